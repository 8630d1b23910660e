"""Detection evaluation: IoU, average precision, mAP over IoU thresholds,
modality-specific mAP, global union mAP, and the harmonic modality mAP.

Conventions (documented here because typical inputs never exercise them):
  - AP integration is all-points interpolation (monotone envelope of the
    precision-recall curve); a 101-point mode is available via ``ap_mode``.
  - Score ties break by (score desc, image_id asc, box coordinates asc),
    so results are invariant under permutation of the input records.
  - A category with no ground truth and no detections scores AP 1.0; with
    detections but no ground truth, AP 0.0.

All internal values are fractions in [0, 1]; rendering as percent is a
presentation concern (see cli).
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class Box:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if self.xmax < self.xmin:
            raise ValueError(f"xmax {self.xmax} < xmin {self.xmin}")
        if self.ymax < self.ymin:
            raise ValueError(f"ymax {self.ymax} < ymin {self.ymin}")

    @property
    def area(self):
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)


@dataclass(frozen=True)
class Detection:
    image_id: str
    category: str
    box: Box
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruthEntry:
    image_id: str
    category: str
    box: Box


class ModalityRegistry:
    """Partition of categories into modalities."""

    def __init__(self, modalities):
        if not modalities:
            raise ValueError("at least one modality required")
        self.modalities = {m: tuple(cats) for m, cats in modalities.items()}
        self.category_map = {}
        for m, cats in self.modalities.items():
            if not cats:
                raise ValueError(f"modality {m!r} has no categories")
            for c in cats:
                if c in self.category_map:
                    raise ValueError(f"category {c!r} appears in more than one modality")
                self.category_map[c] = m

    @property
    def categories(self):
        return tuple(self.category_map)

    def modality_of(self, category):
        try:
            return self.category_map[category]
        except KeyError:
            raise KeyError(f"category {category!r} is not registered") from None


def iou(a, b):
    """Intersection over union of two boxes; 0 when the union is empty."""
    ix = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    iy = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def sort_detections(dets):
    """Canonical evaluation order: score desc, then image_id and box
    coordinates ascending. The key depends only on record content, so
    evaluation is invariant under permutation of the input order."""

    def key(i):
        d = dets[i]
        b = d.box
        return (-d.score, d.image_id, b.xmin, b.ymin, b.xmax, b.ymax)

    return sorted(range(len(dets)), key=key)


def match_detections(dets_in_order, gts, iou_threshold):
    """Greedy matching in the given order; each ground truth matches at most
    once. Returns a list of booleans (True = true positive)."""
    matched = [False] * len(gts)
    by_image = {}
    for j, gt in enumerate(gts):
        by_image.setdefault(gt.image_id, []).append(j)
    flags = []
    for det in dets_in_order:
        best_j = -1
        best_iou = 0.0
        for j in by_image.get(det.image_id, ()):
            if matched[j]:
                continue
            v = iou(det.box, gts[j].box)
            if v >= iou_threshold and v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0:
            matched[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _ap_from_points(recalls, precisions, mode):
    """Area under the monotone (all-points) envelope of the PR points, or
    the 101-point average when mode == '101pt'."""
    if not recalls:
        return 0.0
    if mode == "101pt":
        total = 0.0
        for r in (i / 100.0 for i in range(101)):
            p = 0.0
            for rr, pp in zip(recalls, precisions):
                if rr >= r and pp > p:
                    p = pp
            total += p
        return total / 101.0
    ap = 0.0
    prev_recall = 0.0
    for i in range(len(recalls)):
        if recalls[i] <= prev_recall:
            continue
        # interpolated precision: best precision at recall >= recalls[i]
        p = max(precisions[i:])
        ap += (recalls[i] - prev_recall) * p
        prev_recall = recalls[i]
    return ap


def average_precision(dets, gts, iou_threshold, ap_mode="all-points"):
    """AP for a single category at one IoU threshold."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    cats = {d.category for d in dets} | {g.category for g in gts}
    if len(cats) > 1:
        raise ValueError(f"mixed categories in one AP computation: {sorted(cats)}")
    if not gts:
        return 1.0 if not dets else 0.0
    if not dets:
        return 0.0
    order = sort_detections(dets)
    flags = match_detections([dets[i] for i in order], gts, iou_threshold)
    recalls, precisions = [], []
    tp = 0
    for k, flag in enumerate(flags, start=1):
        if flag:
            tp += 1
        recalls.append(tp / len(gts))
        precisions.append(tp / k)
    return _ap_from_points(recalls, precisions, ap_mode)


def map_over_thresholds(dets, gts, thresholds=DEFAULT_THRESHOLDS, ap_mode="all-points"):
    """Per-threshold AP and its mean over the threshold grid."""
    thresholds = tuple(thresholds)
    if not thresholds:
        raise ValueError("threshold list must be non-empty")
    per = {t: average_precision(dets, gts, t, ap_mode) for t in thresholds}
    return per, sum(per.values()) / len(per)


def modality_map(ap_by_category, registry):
    """Arithmetic mean of category APs within each modality."""
    sums = {m: [0.0, 0] for m in registry.modalities}
    for cat, ap in ap_by_category.items():
        m = registry.modality_of(cat)
        sums[m][0] += ap
        sums[m][1] += 1
    return {m: (s / n if n else math.nan) for m, (s, n) in sums.items()}


def harmonic_modality_map(values):
    """Harmonic mean of per-modality mAPs; exactly 0 if any entry is 0.

    Accepts fractions in [0, 1] or percents in [0, 100]; units must be
    uniform (the harmonic mean is scale-equivariant, so no conversion is
    done here).
    """
    values = list(values)
    if not values:
        raise ValueError("need at least one modality mAP")
    for v in values:
        if not 0.0 <= v <= 100.0:
            raise ValueError(f"mAP value {v} outside [0, 100]")
    if any(v > 1.0 for v in values) and any(0.0 < v < 1.0 for v in values):
        raise ValueError("mixed percent and fraction units")
    if any(v == 0.0 for v in values):
        return 0.0
    return len(values) / sum(1.0 / v for v in values)


def global_union_map(ap_by_category):
    """Unweighted mean AP over the union of all categories."""
    if not ap_by_category:
        raise ValueError("empty category AP map")
    return sum(ap_by_category.values()) / len(ap_by_category)


@dataclass
class EvalReport:
    per_category_ap: dict  # cat -> {"per_threshold": {thr: ap}, "mean": float, "ap50": float}
    per_modality_map: dict  # modality -> mAP_m
    global_map: float
    hmap: float
    thresholds: tuple = DEFAULT_THRESHOLDS

    def to_dict(self):
        return {
            "per_category_ap": {
                c: {
                    "per_threshold": {f"{t:.2f}": v for t, v in d["per_threshold"].items()},
                    "mean": d["mean"],
                    "ap50": d["ap50"],
                }
                for c, d in self.per_category_ap.items()
            },
            "per_modality_map": dict(self.per_modality_map),
            "global_map": self.global_map,
            "hmap": self.hmap,
        }

    def csv_rows(self, registry):
        rows = [("category", "modality", "ap@50", "ap@[.5:.95]")]
        for cat in sorted(self.per_category_ap):
            d = self.per_category_ap[cat]
            rows.append(
                (cat, registry.modality_of(cat), f"{d['ap50']:.6f}", f"{d['mean']:.6f}")
            )
        return rows

    def summary_line(self):
        return f"mAP={100 * self.global_map:.2f} H-mAP={100 * self.hmap:.2f}"


def evaluate(dets, gts, registry, thresholds=DEFAULT_THRESHOLDS, ap_mode="all-points",
             workers=1):
    """Full pipeline: per-category APs, modality mAPs, global mAP, H-mAP.

    Categories are independent, so they may be evaluated in parallel;
    the merge is by category key and identical to the sequential result.
    """
    for d in dets:
        registry.modality_of(d.category)
    for g in gts:
        registry.modality_of(g.category)

    by_cat_d = {c: [] for c in registry.categories}
    by_cat_g = {c: [] for c in registry.categories}
    for d in dets:
        by_cat_d[d.category].append(d)
    for g in gts:
        by_cat_g[g.category].append(g)

    def one(cat):
        per, mean_ap = map_over_thresholds(by_cat_d[cat], by_cat_g[cat], thresholds, ap_mode)
        ap50 = per.get(0.5, average_precision(by_cat_d[cat], by_cat_g[cat], 0.5, ap_mode))
        return cat, {"per_threshold": per, "mean": mean_ap, "ap50": ap50}

    cats = sorted(registry.categories)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(one, cats))
    else:
        results = dict(one(c) for c in cats)

    per_category_ap = {c: results[c] for c in cats}
    mean_aps = {c: d["mean"] for c, d in per_category_ap.items()}
    per_mod = modality_map(mean_aps, registry)
    return EvalReport(
        per_category_ap=per_category_ap,
        per_modality_map=per_mod,
        global_map=global_union_map(mean_aps),
        hmap=harmonic_modality_map(per_mod.values()),
        thresholds=tuple(thresholds),
    )
