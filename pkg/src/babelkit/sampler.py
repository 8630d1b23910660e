"""Pretraining-mixture sampler: per-dataset sizes and sampling rates,
expected counts, and a seeded epoch sampler.

"Sample rate" is a per-sample independent inclusion probability per epoch
(Bernoulli, without replacement), so a dataset of size n at rate r
contributes Binomial(n, r) samples with mean n * r.
"""

import json
from dataclasses import dataclass

import numpy as np

TASKS = ("VQA", "VG", "Caption", "CLS")


@dataclass(frozen=True)
class RecipeEntry:
    name: str
    size: int
    sample_rate: float
    tasks: tuple

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError(f"{self.name}: size must be positive, got {self.size}")
        if not 0.0 <= self.sample_rate <= 1.0:
            raise ValueError(
                f"{self.name}: sample_rate must be in [0, 1], got {self.sample_rate}"
            )
        tasks = tuple(self.tasks)
        if not tasks:
            raise ValueError(f"{self.name}: at least one task required")
        for t in tasks:
            if t not in TASKS:
                raise ValueError(f"{self.name}: unknown task {t!r} (allowed: {TASKS})")
        object.__setattr__(self, "tasks", tasks)


@dataclass(frozen=True)
class MixtureRecipe:
    entries: tuple
    seed: int = 0

    def __post_init__(self):
        entries = tuple(self.entries)
        if not entries:
            raise ValueError("recipe needs at least one entry")
        names = [e.name for e in entries]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate dataset names: {dupes}")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_dict(cls, obj):
        entries = []
        for row in obj["entries"]:
            tasks = row["tasks"]
            if isinstance(tasks, str):
                tasks = tuple(t.strip() for t in tasks.split(","))
            entries.append(
                RecipeEntry(
                    name=row["name"],
                    size=int(row["size"]),
                    sample_rate=float(row["sample_rate"]),
                    tasks=tuple(tasks),
                )
            )
        return cls(entries=tuple(entries), seed=int(obj.get("seed", 0)))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def expected_counts(recipe):
    """Expected samples per epoch: size * sample_rate per dataset."""
    return {e.name: e.size * e.sample_rate for e in recipe.entries}


def draw_epoch(recipe, rng_seed):
    """One epoch: include each sample of each dataset independently with
    probability sample_rate, then shuffle globally. Deterministic in
    (recipe, rng_seed); returns a list of (dataset name, index) pairs."""
    rng = np.random.default_rng(rng_seed)
    draws = []
    for e in recipe.entries:
        if e.sample_rate == 0.0:
            continue
        if e.sample_rate == 1.0:
            kept = np.arange(e.size)
        else:
            kept = np.flatnonzero(rng.random(e.size) < e.sample_rate)
        draws.extend((e.name, int(i)) for i in kept)
    order = rng.permutation(len(draws))
    return [draws[i] for i in order]


def verify_rates(draws, recipe, abs_tolerance):
    """Empirical inclusion rate per dataset against the configured rate.
    Returns {name: (empirical_rate, passed)}; unknown names are an error."""
    by_name = {e.name: e for e in recipe.entries}
    counts = {e.name: 0 for e in recipe.entries}
    for name, _ in draws:
        if name not in by_name:
            raise ValueError(f"draw references unknown dataset {name!r}")
        counts[name] += 1
    report = {}
    for e in recipe.entries:
        emp = counts[e.name] / e.size
        report[e.name] = (emp, abs(emp - e.sample_rate) <= abs_tolerance)
    return report
