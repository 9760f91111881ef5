"""Acceptance criteria, each at its stated tolerance and time budget.

Criteria 6 to 8 share one 10,000-step pretraining run (a session fixture);
criterion 9 trains nine further models.  Expect roughly 1.5 hours on one core.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from codo.contrastive import NegativeQueue, enqueue, info_nce
from codo.cpj import PasteConfig, PhotoConfig, build_viewset
from codo.data import CorpusViewStream
from codo.encoder import LEVELS, Encoder, extract_embeddings, roi_align
from codo.evalsuite import (
    DEFAULT_MATRIX,
    ablation_backgrounds,
    format_table,
    invariance_probe,
    linear_probe,
    random_init_encoder,
)
from codo.geometry import BoundingBox, JitterConfig, iou
from codo.proposals import Proposal, filter_aspect_ratio
from codo.trainer import TrainConfig, load_encoder, run_pretraining

from conftest import TINY_MODEL
from test_encoder import brute_roi_align

SOAK_STEPS = 10_000
ABLATION_BUDGET = 1500
SEEDS = (0, 1, 2)


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def moving_average(values, window):
    c = np.cumsum(np.insert(np.asarray(values, float), 0, 0.0))
    return (c[window:] - c[:-window]) / window


@pytest.fixture(scope="session")
def soak(full_corpus, tmp_path_factory):
    cfg = replace(TrainConfig(), max_steps=SOAK_STEPS, snapshot_every=2500)
    out = tmp_path_factory.mktemp("soak")
    with Timer() as t:
        final = run_pretraining(cfg, CorpusViewStream(full_corpus, seed=cfg.seed), out)
    metrics = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    return {"cfg": cfg, "checkpoint": final, "metrics": metrics, "seconds": t.seconds}


@pytest.fixture(scope="session")
def random_baseline(full_corpus):
    encoder = random_init_encoder(TrainConfig())
    return {"encoder": encoder, "invariance": invariance_probe(encoder, full_corpus), "probe": linear_probe(encoder, full_corpus)}


@pytest.mark.criterion(1, "closed-form loss: uniform logits give ln(K+1)")
def test_closed_form_loss(record_property):
    with Timer() as t:
        worst = 0.0
        for k in (0, 3, 4095):
            d = 32
            e_q = torch.zeros(d, dtype=torch.float64)
            e_q[0] = 1.0
            g = torch.Generator().manual_seed(k)
            rest = F.normalize(torch.randn(k + 1, d - 1, generator=g, dtype=torch.float64), dim=1)
            vecs = torch.cat([torch.full((k + 1, 1), 0.25, dtype=torch.float64), math.sqrt(1 - 0.0625) * rest], 1)
            queue = enqueue(NegativeQueue(4096, d, torch.float64), vecs[1:])
            loss = float(info_nce(e_q, vecs[0], queue, 0.2))
            worst = max(worst, abs(loss - math.log(k + 1)))
    record_property("detail", f"max |loss - ln(K+1)| = {worst:.2e}, {t.seconds:.3f} s")
    assert worst <= 1e-5
    assert t.seconds < 1


@pytest.mark.criterion(2, "gradient fidelity against central finite differences")
def test_gradient_fidelity(record_property):
    def rel(a, n):
        return abs(a - n) / max(abs(a), abs(n), 1e-6)

    with Timer() as t:
        worst_loss = 0.0
        for seed in range(5):
            g = torch.Generator().manual_seed(seed)
            e_q = F.normalize(torch.randn(8, generator=g, dtype=torch.float64), dim=0).requires_grad_(True)
            pos = F.normalize(torch.randn(8, generator=g, dtype=torch.float64), dim=0)
            neg = F.normalize(torch.randn(16, 8, generator=g, dtype=torch.float64), dim=1)
            info_nce(e_q, pos, neg, 0.2).backward()
            for i in range(8):
                d = torch.zeros(8, dtype=torch.float64)
                d[i] = 1e-6
                with torch.no_grad():
                    num = float(info_nce(e_q + d, pos, neg, 0.2) - info_nce(e_q - d, pos, neg, 0.2)) / 2e-6
                worst_loss = max(worst_loss, rel(float(e_q.grad[i]), num))

        torch.manual_seed(0)
        enc = Encoder(TINY_MODEL).double()
        x = torch.randn(1, 3, 32, 32, dtype=torch.float64)
        box = BoundingBox(3.2, 5.1, 27.5, 29.0)
        probe = {lvl: torch.randn(TINY_MODEL.embed_dim, dtype=torch.float64) for lvl in LEVELS}

        def objective():
            emb = extract_embeddings(enc, x, box)
            return sum((emb[lvl] * probe[lvl]).sum() for lvl in LEVELS)

        objective().backward()
        params = [p for name, p in enc.named_parameters() if name.startswith("backbone")]
        rng = np.random.default_rng(0)
        worst_enc = 0.0
        eps = 1e-5
        for _ in range(50):
            p = params[int(rng.integers(len(params)))]
            i = int(rng.integers(p.numel()))
            with torch.no_grad():
                orig = float(p.view(-1)[i])
                p.view(-1)[i] = orig + eps
                up = float(objective())
                p.view(-1)[i] = orig - eps
                down = float(objective())
                p.view(-1)[i] = orig
            worst_enc = max(worst_enc, rel(float(p.grad.view(-1)[i]), (up - down) / (2 * eps)))
    record_property("detail", f"max rel. error: info_nce {worst_loss:.1e}, embeddings {worst_enc:.1e}, {t.seconds:.1f} s")
    assert worst_loss < 1e-4 and worst_enc < 1e-4
    assert t.seconds < 60


@pytest.mark.criterion(3, "RoIAlign equals a brute-force bilinear oracle")
def test_roi_align_oracle(record_property):
    rng = np.random.default_rng(2024)
    worst = 0.0
    with Timer() as t:
        for _ in range(100):
            c, h, w = 4, int(rng.integers(2, 16)), int(rng.integers(2, 16))
            stride = float(rng.choice([1, 4, 8, 16, 32]))
            fmap = rng.normal(size=(c, h, w))
            x0 = rng.uniform(-stride, w * stride * 0.9)
            y0 = rng.uniform(-stride, h * stride * 0.9)
            box = (x0, y0, x0 + rng.uniform(0.5, w * stride), y0 + rng.uniform(0.5, h * stride))
            ours = roi_align(torch.from_numpy(fmap), BoundingBox(*box), 7, stride).numpy()
            worst = max(worst, float(np.abs(ours - brute_roi_align(fmap, box, 7, stride)).max()))
    record_property("detail", f"max abs. deviation {worst:.1e} over 100 cases, {t.seconds:.2f} s")
    assert worst <= 1e-5
    assert t.seconds < 10


@pytest.mark.criterion(4, "CPJ geometry sweep and aspect filter")
def test_cpj_geometry_sweep(full_corpus, record_property):
    rng = np.random.default_rng(7)
    stream = CorpusViewStream(full_corpus, seed=7)
    pools = full_corpus.pools
    views = fallbacks = 0
    with Timer() as t:
        while views < 10_000:
            index = int(rng.integers(len(full_corpus.pretrain_images)))
            props = stream.proposals(index)
            if not props:
                continue
            proposal = props[int(rng.integers(len(props)))]
            vs = build_viewset(proposal, full_corpus.pretrain_images[index], pools, 3,
                               PasteConfig(), JitterConfig(), PhotoConfig(), rng)
            for v in vs.views:
                h, w = v.image.shape[:2]
                assert v.box.inside(w, h)
                if v.box == v.paste_box:
                    fallbacks += 1
                else:
                    assert iou(v.box, v.paste_box) > 0.6
                views += 1

        ratios = np.exp(rng.uniform(np.log(0.05), np.log(20), 10_000))
        ratios = np.concatenate([ratios, [3.0, 1 / 3, 3.0000001, 0.3333333, 2.9999999, 0.3333334]])
        candidates = [Proposal(BoundingBox(0, 0, r * 10, 10), "x", 0.0) for r in ratios]
        kept = filter_aspect_ratio(candidates)
        kept_ids = {id(p) for p in kept}
        for p in candidates:
            ar = p.box.aspect_ratio
            assert (id(p) in kept_ids) == (1 / 3 < ar < 3)
    record_property("detail", f"{views} views, {fallbacks} identity fallbacks, {len(candidates) - len(kept)} ratios rejected, {t.seconds:.1f} s")
    assert t.seconds < 60


@pytest.mark.criterion(5, "queue matches a list-based FIFO oracle")
def test_queue_fifo_oracle(record_property):
    rng = np.random.default_rng(5)
    dim = 4
    with Timer() as t:
        for _ in range(10_000):
            cap = int(rng.integers(1, 9))
            queue = NegativeQueue(cap, dim, torch.float64)
            oracle: list = []
            for _ in range(int(rng.integers(1, 5))):
                n = int(rng.integers(0, 2 * cap + 1))
                batch = rng.normal(size=(n, dim))
                batch /= np.linalg.norm(batch, axis=1, keepdims=True)
                enqueue(queue, torch.from_numpy(batch))
                oracle = (oracle + list(batch))[-cap:]
            expected = np.array(oracle).reshape(-1, dim)
            got = queue.entries().numpy()
            assert got.shape == expected.shape and np.array_equal(got, expected)
    record_property("detail", f"10000 sequences, {t.seconds:.1f} s")
    assert t.seconds < 10


@pytest.mark.criterion(6, "10k-step soak: finite loss, final 200-step mean at least 20% below step 500")
def test_training_soak(soak, record_property):
    losses = [m["loss"] for m in soak["metrics"]]
    assert len(losses) == SOAK_STEPS
    assert all(math.isfinite(x) for x in losses)
    ma = moving_average(losses, 200)
    at_500, at_end = ma[500 - 200], ma[-1]
    record_property("detail", f"200-step mean {at_500:.3f} at step 500 -> {at_end:.3f} at step {SOAK_STEPS} "
                              f"(ratio {at_end / at_500:.3f}), {soak['seconds'] / 60:.1f} min")
    assert at_end <= 0.8 * at_500
    assert soak["seconds"] < 30 * 60


@pytest.mark.criterion(7, "invariance gap >= 0.2 after the soak, < 0.05 at random init")
def test_invariance_emerges(soak, random_baseline, full_corpus, record_property):
    with Timer() as t:
        trained = invariance_probe(load_encoder(soak["checkpoint"]), full_corpus)
    base = random_baseline["invariance"]
    record_property("detail", f"gap {trained.gap:.3f} trained vs {base.gap:.3f} random init, probing {t.seconds:.0f} s")
    assert trained.gap >= 0.2
    assert abs(base.gap) < 0.05
    assert t.seconds < 120


@pytest.mark.criterion(8, "linear probe beats random init by >= 10 points")
def test_transfer_proxy(soak, random_baseline, full_corpus, record_property):
    with Timer() as t:
        trained = linear_probe(load_encoder(soak["checkpoint"]), full_corpus)
    base = random_baseline["probe"]
    record_property("detail", f"probe accuracy {trained.accuracy:.3f} trained vs {base.accuracy:.3f} random init, {t.seconds:.0f} s")
    assert trained.accuracy - base.accuracy >= 0.10
    assert t.seconds < 300


@pytest.mark.criterion(9, "background ablation: mixed >= single, matched >= mismatched in 2 of 3 seeds")
def test_background_ablation(full_corpus, tmp_path, record_property):
    with Timer() as t:
        cells = ablation_backgrounds(full_corpus, DEFAULT_MATRIX, budget=ABLATION_BUDGET, seeds=SEEDS, out_dir=tmp_path)
    gap = {(c["row"], c["seed"]): c["invariance_gap"] for c in cells}
    single, mixed, mismatched = (row.name for row in DEFAULT_MATRIX)
    mixed_wins = sum(gap[mixed, s] >= gap[single, s] for s in SEEDS)
    matched_wins = sum(gap[mixed, s] >= gap[mismatched, s] for s in SEEDS)
    for line in format_table(cells).splitlines():
        record_property("detail", line)
    record_property("detail", f"mixed >= single in {mixed_wins}/3, matched >= mismatched in {matched_wins}/3, {t.seconds / 60:.0f} min")
    assert mixed_wins >= 2
    assert matched_wins >= 2
    assert t.seconds < 2 * 3600


@pytest.mark.criterion(10, "deterministic mode: identical metrics streams")
def test_determinism(full_corpus, tmp_path, record_property):
    cfg = replace(TrainConfig(), max_steps=40, deterministic=True, snapshot_every=0)
    times = []
    for name in ("a", "b"):
        with Timer() as t:
            run_pretraining(cfg, CorpusViewStream(full_corpus, seed=cfg.seed), tmp_path / name)
        times.append(t.seconds)
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    record_property("detail", f"{len(a)} bytes each, runs {times[0]:.1f} s and {times[1]:.1f} s")
    assert a == b
