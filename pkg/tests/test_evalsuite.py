from dataclasses import replace

import numpy as np
import pytest

from codo.encoder import LEVELS
from codo.evalsuite import (
    AblationRow,
    ablation_backgrounds,
    format_table,
    invariance_from_embeddings,
    invariance_probe,
    linear_probe,
    random_init_encoder,
)
from codo.trainer import TrainConfig

from conftest import TINY_MODEL


def _levels(e):
    return {lvl: e for lvl in LEVELS}


class TestInvarianceMath:
    def test_identical_inputs_cosine_one(self):
        e = np.tile(np.eye(4)[0], (4, 1))
        report = invariance_from_embeddings(_levels(e), np.array([0, 0, 1, 1]), np.array(["a", "b", "a", "b"]))
        assert report.same_fg_diff_bg_cosine.mean == pytest.approx(1.0)

    def test_orthogonal_cosine_zero(self):
        e = np.repeat(np.eye(2), 2, axis=0)
        report = invariance_from_embeddings(_levels(e), np.array([0, 0, 1, 1]), np.array(["a", "b", "a", "b"]))
        assert report.diff_fg_cosine.mean == pytest.approx(0.0)
        assert report.gap == pytest.approx(1.0)

    def test_gap_is_same_minus_diff(self):
        rng = np.random.default_rng(0)
        emb = {}
        for lvl in LEVELS:
            e = rng.normal(size=(12, 6))
            emb[lvl] = e / np.linalg.norm(e, axis=1, keepdims=True)
        inst = np.repeat(np.arange(4), 3)
        pools = np.tile(["a", "b", "c"], 4)
        r = invariance_from_embeddings(emb, inst, pools)
        assert r.gap == r.same_fg_diff_bg_cosine.mean - r.diff_fg_cosine.mean
        for stat in (r.same_fg_diff_bg_cosine, r.diff_fg_cosine):
            assert -1 <= stat.mean <= 1
        # brute force over different-pool pairs
        sims = np.mean([emb[l] @ emb[l].T for l in LEVELS], axis=0)
        same = [sims[i, j] for i in range(12) for j in range(12) if inst[i] == inst[j] and pools[i] != pools[j]]
        diff = [sims[i, j] for i in range(12) for j in range(12) if inst[i] != inst[j] and pools[i] != pools[j]]
        assert r.gap == pytest.approx(np.mean(same) - np.mean(diff), abs=1e-12)

    def test_needs_two_pools(self):
        e = np.eye(3)
        with pytest.raises(ValueError):
            invariance_from_embeddings(_levels(e), np.array([0, 0, 1]), np.array(["a", "a", "a"]))

    def test_rejects_non_unit(self):
        with pytest.raises(ValueError):
            invariance_from_embeddings(_levels(2 * np.eye(2)), np.array([0, 0]), np.array(["a", "b"]))


class TestProbes:
    def test_linear_probe_split_sizes(self, tiny_corpus):
        result = linear_probe(random_init_encoder(TrainConfig(model=TINY_MODEL)), tiny_corpus)
        counts = tiny_corpus.manifest["counts"]
        assert (result.n_train, result.n_test) == (counts["probe_train"], counts["probe_test"])
        assert 0 <= result.accuracy <= 1

    def test_invariance_probe_runs(self, tiny_corpus):
        report = invariance_probe(random_init_encoder(TrainConfig(model=TINY_MODEL)), tiny_corpus)
        assert set(report.per_level) == set(LEVELS)

    def test_random_init_probe_near_chance(self, full_corpus):
        result = linear_probe(random_init_encoder(TrainConfig()), full_corpus)
        assert abs(result.accuracy - 1 / full_corpus.n_classes) <= 0.10


class TestAblation:
    def test_identical_seeds_identical_cells(self, tiny_corpus, tmp_path):
        base = TrainConfig(batch_size=4, model=TINY_MODEL, queue_size=16)
        rows = [AblationRow("single", ("smooth",), ("smooth",))]
        a = ablation_backgrounds(tiny_corpus, rows, budget=3, seeds=[0], base=base, out_dir=tmp_path / "a")
        b = ablation_backgrounds(tiny_corpus, rows, budget=3, seeds=[0], base=base, out_dir=tmp_path / "b")
        assert a == b
        assert a[0]["steps"] == 3 and a[0]["seed"] == 0

    def test_format_table(self):
        cells = [
            {"row": r, "query_pools": ["a"], "key_pools": ["a"], "seed": s, "steps": 10,
             "invariance_gap": 0.1 * s, "probe_accuracy": 0.5}
            for r in ("one", "two") for s in range(3)
        ]
        lines = format_table(cells).splitlines()
        assert len(lines) == 3 and "0.100" in lines[1]
