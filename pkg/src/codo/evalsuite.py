"""Evidence that pretraining worked: linear probe, background-invariance
probe and the background-pool ablation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from .corpus import Corpus
from .data import CorpusViewStream
from .encoder import LEVELS, Encoder, EncoderPair, to_tensor
from .trainer import TrainConfig, load_encoder, run_pretraining

log = logging.getLogger(__name__)


def _as_encoder(model: Encoder | str | Path) -> Encoder:
    return model if isinstance(model, Encoder) else load_encoder(model)


@torch.no_grad()
def embed_records(encoder: Encoder, images: np.ndarray, records: Sequence[dict], batch_size: int = 256) -> dict[str, np.ndarray]:
    """Per-level embeddings (N, D) of the ground-truth boxes in ``records``."""
    encoder.eval()
    out: dict[str, list[np.ndarray]] = {lvl: [] for lvl in LEVELS}
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        x = to_tensor(np.stack([images[r["index"]] for r in chunk]))
        boxes = torch.tensor([r["box"] for r in chunk], dtype=torch.float32)
        emb = encoder(x, boxes)
        for lvl in LEVELS:
            out[lvl].append(emb[lvl].numpy().astype(np.float64))
    d = encoder.cfg.embed_dim
    return {lvl: np.concatenate(v) if v else np.zeros((0, d)) for lvl, v in out.items()}


def _assert_unit(emb: dict[str, np.ndarray]) -> None:
    for lvl, e in emb.items():
        if len(e) and not np.allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-4):
            raise ValueError(f"embeddings at {lvl} are not unit-norm")


# ------------------------------------------------------------ linear probe

@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    n_train: int
    n_test: int
    n_classes: int

    def to_dict(self) -> dict:
        return asdict(self)


def linear_probe(model: Encoder | str | Path, corpus: Corpus, seed: int = 0) -> ProbeResult:
    """Held-out accuracy of a linear classifier on frozen, level-concatenated embeddings."""
    encoder = _as_encoder(model)
    train = corpus.probe_records("train")
    test = corpus.probe_records("test")
    labels_train = np.array([r["class_id"] for r in train])
    counts = np.bincount(labels_train, minlength=corpus.n_classes)
    if (counts == 0).any():
        raise ValueError(f"classes without training samples: {np.flatnonzero(counts == 0).tolist()}")
    feats = []
    for recs in (train, test):
        emb = embed_records(encoder, corpus.probe_images, recs)
        _assert_unit(emb)
        feats.append(np.concatenate([emb[lvl] for lvl in LEVELS], axis=1))
    scaler = StandardScaler().fit(feats[0])
    clf = LogisticRegression(max_iter=2000, C=1.0, random_state=seed)
    clf.fit(scaler.transform(feats[0]), labels_train)
    labels_test = np.array([r["class_id"] for r in test])
    acc = float((clf.predict(scaler.transform(feats[1])) == labels_test).mean())
    return ProbeResult(acc, len(train), len(test), corpus.n_classes)


# ------------------------------------------------------- invariance probe

@dataclass(frozen=True)
class Stat:
    mean: float
    std: float


@dataclass(frozen=True)
class InvarianceReport:
    same_fg_diff_bg_cosine: Stat
    diff_fg_cosine: Stat
    gap: float
    per_level: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _stat(values: np.ndarray) -> Stat:
    if values.size == 0:
        return Stat(float("nan"), float("nan"))
    return Stat(float(values.mean()), float(values.std()))


def _pair_stats(sim: np.ndarray, same_inst: np.ndarray, diff_pool: np.ndarray) -> tuple[Stat, Stat]:
    return _stat(sim[same_inst & diff_pool]), _stat(sim[~same_inst & diff_pool])


def invariance_from_embeddings(emb: dict[str, np.ndarray], instance_ids: np.ndarray, pool_ids: np.ndarray) -> InvarianceReport:
    """Cosine of same-foreground pairs against different-foreground pairs.

    Only pairs rendered on different background pools are compared, so the
    gap isolates foreground identity.  The overall similarity of two views
    is the mean of their per-level cosines.
    """
    if len(set(pool_ids.tolist())) < 2:
        raise ValueError("invariance needs the same foregrounds on at least 2 background pools")
    _assert_unit(emb)
    same_inst = instance_ids[:, None] == instance_ids[None, :]
    diff_pool = pool_ids[:, None] != pool_ids[None, :]
    per_level = {}
    total = None
    for lvl in LEVELS:
        sim = np.clip(emb[lvl] @ emb[lvl].T, -1.0, 1.0)
        total = sim if total is None else total + sim
        s, d = _pair_stats(sim, same_inst, diff_pool)
        per_level[lvl] = {"same": s.mean, "diff": d.mean, "gap": s.mean - d.mean}
    s, d = _pair_stats(total / len(LEVELS), same_inst, diff_pool)
    return InvarianceReport(s, d, s.mean - d.mean, per_level)


def invariance_probe(model: Encoder | str | Path, corpus: Corpus) -> InvarianceReport:
    encoder = _as_encoder(model)
    recs = corpus.probe_records()
    if len({r["pool_id"] for r in recs}) < 2:
        raise ValueError("corpus renders each foreground on fewer than 2 pools")
    emb = embed_records(encoder, corpus.probe_images, recs)
    inst = np.array([r["instance_id"] for r in recs])
    pools = np.array([r["pool_id"] for r in recs])
    return invariance_from_embeddings(emb, inst, pools)


def random_init_encoder(cfg: TrainConfig) -> Encoder:
    torch.manual_seed(cfg.seed)
    enc = EncoderPair.create(cfg.model, cfg.encoder_momentum).query
    enc.eval()
    return enc


# ---------------------------------------------------------------- ablation

@dataclass(frozen=True)
class AblationRow:
    name: str
    query_pools: tuple[str, ...]
    key_pools: tuple[str, ...]


DEFAULT_MATRIX = (
    AblationRow("single pool", ("smooth",), ("smooth",)),
    AblationRow("mixed pools", ("smooth", "stripes", "clutter"), ("smooth", "stripes", "clutter")),
    AblationRow("mismatched Q/K", ("smooth",), ("smooth", "stripes", "clutter")),
)


def ablation_backgrounds(
    corpus: Corpus,
    matrix: Sequence[AblationRow] = DEFAULT_MATRIX,
    budget: int = 1500,
    seeds: Sequence[int] = (0, 1, 2),
    base: TrainConfig = TrainConfig(),
    out_dir: str | Path = "ablation",
) -> list[dict]:
    """Pretrain once per (row, seed) with an equal step budget and probe each run.

    Returns one record per (row, seed) with the invariance gap and probe accuracy.
    """
    out = Path(out_dir)
    cells = []
    for row in matrix:
        for seed in seeds:
            cfg = replace(base, seed=seed, max_steps=budget, snapshot_every=0)
            source = CorpusViewStream(
                corpus,
                n_keys=cfg.n_keys,
                query_pools=row.query_pools,
                key_pools=row.key_pools,
                seed=seed,
                allow_pool_mismatch=True,
            )
            run_dir = out / f"{row.name.replace(' ', '_').replace('/', '')}_seed{seed}"
            log.info("ablation row %r seed %d -> %s", row.name, seed, run_dir)
            ckpt = run_pretraining(cfg, source, run_dir)
            encoder = load_encoder(ckpt)
            report = invariance_probe(encoder, corpus)
            probe = linear_probe(encoder, corpus)
            cells.append({
                "row": row.name,
                "query_pools": list(row.query_pools),
                "key_pools": list(row.key_pools),
                "seed": seed,
                "steps": budget,
                "invariance_gap": report.gap,
                "probe_accuracy": probe.accuracy,
            })
    return cells


def format_table(cells: Sequence[dict]) -> str:
    """Plain-text summary: one line per row, mean over seeds and per-seed gaps."""
    rows: dict[str, list[dict]] = {}
    for c in cells:
        rows.setdefault(c["row"], []).append(c)
    lines = [f"{'background pools':<42} {'steps':>6} {'gap':>7} {'probe':>7}  per-seed gap"]
    for name, cs in rows.items():
        pools = f"Q:{'+'.join(cs[0]['query_pools'])} K:{'+'.join(cs[0]['key_pools'])}"
        gaps = [c["invariance_gap"] for c in cs]
        accs = [c["probe_accuracy"] for c in cs]
        lines.append(
            f"{name + ' ' + pools:<42} {cs[0]['steps']:>6} {np.mean(gaps):>7.3f} {np.mean(accs):>7.3f}  "
            + " ".join(f"{g:.3f}" for g in gaps)
        )
    return "\n".join(lines)
