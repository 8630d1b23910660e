"""File ingestion for the evaluation stack.

Detections JSONL, one object per line:
    {"image_id": str, "modality": str, "category": str,
     "bbox": [xmin, ymin, xmax, ymax], "score": float}
Ground truth JSONL: same minus "score".
Registry JSON: {"modalities": {"<modality>": ["<category>", ...]}}.

Errors carry the 1-based line number and the offending field.
"""

import json

from babelkit.deteval import Box, Detection, GroundTruthEntry, ModalityRegistry


class RecordError(ValueError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


def _parse_box(obj, path, line_no):
    bbox = obj.get("bbox")
    if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
        raise RecordError(path, line_no, "field 'bbox' must be [xmin, ymin, xmax, ymax]")
    try:
        return Box(*(float(v) for v in bbox))
    except (TypeError, ValueError) as exc:
        raise RecordError(path, line_no, f"field 'bbox': {exc}") from None


def _iter_records(path):
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(path, line_no, f"invalid JSON: {exc}") from None
            if not isinstance(obj, dict):
                raise RecordError(path, line_no, "record must be a JSON object")
            yield line_no, obj


def _require_str(obj, key, path, line_no):
    v = obj.get(key)
    if not isinstance(v, str) or not v:
        raise RecordError(path, line_no, f"field {key!r} must be a non-empty string")
    return v


def load_detections(path):
    out = []
    for line_no, obj in _iter_records(path):
        box = _parse_box(obj, path, line_no)
        score = obj.get("score")
        if not isinstance(score, (int, float)):
            raise RecordError(path, line_no, "field 'score' must be a number")
        try:
            out.append(
                Detection(
                    image_id=_require_str(obj, "image_id", path, line_no),
                    category=_require_str(obj, "category", path, line_no),
                    box=box,
                    score=float(score),
                )
            )
        except ValueError as exc:
            raise RecordError(path, line_no, f"field 'score': {exc}") from None
    return out


def load_ground_truth(path):
    out = []
    for line_no, obj in _iter_records(path):
        out.append(
            GroundTruthEntry(
                image_id=_require_str(obj, "image_id", path, line_no),
                category=_require_str(obj, "category", path, line_no),
                box=_parse_box(obj, path, line_no),
            )
        )
    return out


def load_registry(path):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    modalities = obj.get("modalities")
    if not isinstance(modalities, dict):
        raise ValueError(f"{path}: top-level 'modalities' object required")
    return ModalityRegistry(modalities)
