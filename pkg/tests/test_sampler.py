import json
import math

import numpy as np
import pytest

from babelkit.cli import bundled_path
from babelkit.sampler import (
    MixtureRecipe,
    RecipeEntry,
    draw_epoch,
    expected_counts,
    verify_rates,
)


def bundled():
    return MixtureRecipe.load(bundled_path("recipes/babelrs_table1.json"))


class TestTypes:
    def test_entry_validation(self):
        with pytest.raises(ValueError):
            RecipeEntry("x", 0, 0.5, ("VQA",))
        with pytest.raises(ValueError):
            RecipeEntry("x", 10, 1.5, ("VQA",))
        with pytest.raises(ValueError):
            RecipeEntry("x", 10, 0.5, ("Banana",))
        with pytest.raises(ValueError):
            RecipeEntry("x", 10, 0.5, ())

    def test_recipe_unique_names(self):
        e = RecipeEntry("x", 10, 0.5, ("VQA",))
        with pytest.raises(ValueError, match="duplicate"):
            MixtureRecipe((e, e))
        with pytest.raises(ValueError):
            MixtureRecipe(())

    def test_bundled_recipe_shape(self):
        recipe = bundled()
        assert len(recipe.entries) == 12
        names = {e.name for e in recipe.entries}
        assert {"Mini-InternVL", "SARLang", "Million-AID", "GeoChat"} <= names
        multi = next(e for e in recipe.entries if e.name == "Million-AID")
        assert multi.tasks == ("Caption", "CLS")


class TestExpectedCounts:
    def test_bundled_recipe_products(self):
        counts = expected_counts(bundled())
        assert counts["Mini-InternVL"] == pytest.approx(13940.0)
        assert counts["SARLang"] == pytest.approx(675600.0)
        assert counts["GeoChat"] == pytest.approx(64000.0)

    def test_total_is_sum(self):
        recipe = MixtureRecipe(
            (RecipeEntry("a", 10, 0.5, ("VQA",)), RecipeEntry("b", 4, 1.0, ("VG",)))
        )
        counts = expected_counts(recipe)
        assert sum(counts.values()) == pytest.approx(9.0)


class TestDrawEpoch:
    def test_rate_one_includes_everything(self):
        recipe = MixtureRecipe((RecipeEntry("a", 5, 1.0, ("VQA",)),))
        draws = draw_epoch(recipe, 0)
        assert sorted(i for _, i in draws) == list(range(5))

    def test_rate_zero_empty(self):
        recipe = MixtureRecipe((RecipeEntry("a", 5, 0.0, ("VQA",)),))
        assert draw_epoch(recipe, 0) == []

    def test_determinism(self):
        recipe = MixtureRecipe(
            (RecipeEntry("a", 1000, 0.3, ("VQA",)), RecipeEntry("b", 500, 0.9, ("VG",)))
        )
        assert draw_epoch(recipe, 42) == draw_epoch(recipe, 42)
        assert draw_epoch(recipe, 42) != draw_epoch(recipe, 43)

    def test_binomial_concentration(self):
        recipe = MixtureRecipe((RecipeEntry("big", 10**6, 0.6, ("VQA",)),))
        sigma = math.sqrt(10**6 * 0.6 * 0.4)
        for seed in (0, 1, 2):
            n = len(draw_epoch(recipe, seed))
            assert abs(n - 600000) <= 3 * sigma

    def test_global_shuffle(self):
        recipe = MixtureRecipe(
            (RecipeEntry("a", 200, 1.0, ("VQA",)), RecipeEntry("b", 200, 1.0, ("VG",)))
        )
        names = [n for n, _ in draw_epoch(recipe, 0)]
        # interleaved, not two contiguous blocks
        assert len({n for n in names[:200]}) == 2

    def test_mean_matches_expected_over_seeds(self):
        recipe = MixtureRecipe((RecipeEntry("a", 20000, 0.25, ("VQA",)),))
        n_seeds = 30
        counts = [len(draw_epoch(recipe, s)) for s in range(n_seeds)]
        sigma = math.sqrt(20000 * 0.25 * 0.75)
        assert abs(np.mean(counts) - 5000) <= 3 * sigma / math.sqrt(n_seeds)

    def test_chi_square_across_seeds(self):
        # marginal counts should be Binomial(n, p): chi-square goodness of
        # fit on a 50-seed sample must not reject at alpha = 0.001
        n, p = 5000, 0.3
        recipe = MixtureRecipe((RecipeEntry("a", n, p, ("VQA",)),))
        counts = np.array([len(draw_epoch(recipe, s)) for s in range(50)])
        mean, var = n * p, n * p * (1 - p)
        z = (counts - mean) / math.sqrt(var)
        chi2 = float(np.sum(z**2))
        # chi-square(50) 0.999 quantile ~ 86.66
        assert chi2 < 86.66


class TestVerifyRates:
    def test_exact_rates_pass_at_zero_tolerance(self):
        recipe = MixtureRecipe(
            (RecipeEntry("all", 50, 1.0, ("VQA",)), RecipeEntry("none", 50, 0.0, ("VG",)))
        )
        report = verify_rates(draw_epoch(recipe, 0), recipe, abs_tolerance=0.0)
        assert report["all"] == (1.0, True)
        assert report["none"] == (0.0, True)

    def test_bundled_recipe_one_epoch(self):
        recipe = bundled()
        report = verify_rates(draw_epoch(recipe, 0), recipe, abs_tolerance=0.01)
        assert all(ok for _, ok in report.values())

    def test_mismatched_recipe_fails(self):
        recipe = MixtureRecipe((RecipeEntry("a", 100, 0.9, ("VQA",)),))
        other = MixtureRecipe((RecipeEntry("a", 100, 0.1, ("VQA",)),))
        report = verify_rates(draw_epoch(recipe, 0), other, abs_tolerance=0.05)
        assert not report["a"][1]

    def test_unknown_dataset_rejected(self):
        recipe = MixtureRecipe((RecipeEntry("a", 10, 1.0, ("VQA",)),))
        with pytest.raises(ValueError, match="unknown dataset"):
            verify_rates([("ghost", 0)], recipe, 0.1)


class TestFromDict:
    def test_task_string_splitting(self):
        recipe = MixtureRecipe.from_dict(
            {"entries": [{"name": "a", "size": 5, "sample_rate": 1.0, "tasks": "Caption, CLS"}]}
        )
        assert recipe.entries[0].tasks == ("Caption", "CLS")
