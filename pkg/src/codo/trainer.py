"""Pretraining loop: query/key forwards, multi-view hierarchical loss, SGD on
the query encoder, momentum blend into the key encoder, queue maintenance."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .contrastive import LossConfig, NegativeQueue, enqueue, hierarchical_loss, info_nce_logits
from .cpj import ViewSet
from .data import ViewSource, prefetch
from .encoder import LEVELS, CorruptedCheckpointError, EncoderConfig, EncoderPair, momentum_update, to_tensor

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
# learning rates in configs are quoted for this batch size and scaled linearly
REFERENCE_BATCH = 1024


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, foreground_ids: Sequence[str]):
        self.step = step
        self.foreground_ids = list(foreground_ids)
        super().__init__(f"non-finite loss at step {step}; batch foregrounds: {self.foreground_ids}")


class ConfigMismatchError(RuntimeError):
    """A checkpoint was produced under a different configuration."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    base_lr: float = 0.06
    momentum_sgd: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    max_steps: int = 0
    lr_schedule: str = "cosine"
    warmup_steps: int = 0
    seed: int = 0
    n_keys: int = 1
    snapshot_every: int = 1000
    encoder_momentum: float = 0.999
    queue_size: int = 4096
    loss: LossConfig = field(default_factory=LossConfig)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    save_queues: bool = True
    deterministic: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_schedule not in ("cosine", "step"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.n_keys not in (1, 3):
            raise ValueError("n_keys must be 1 or 3")
        if not 0 <= self.encoder_momentum <= 1:
            raise ValueError("encoder_momentum must lie in [0, 1]")

    @property
    def lr(self) -> float:
        return self.base_lr * self.batch_size / REFERENCE_BATCH

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d and isinstance(d["loss"], dict):
            d["loss"] = LossConfig(**{**d["loss"], "level_weights": tuple(d["loss"].get("level_weights", LossConfig().level_weights))})
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = EncoderConfig.from_dict(d["model"])
        return cls(**d)

    def hash(self) -> str:
        """Hash of everything that shapes the optimization trajectory."""
        d = self.to_dict()
        for volatile in ("snapshot_every", "save_queues", "deterministic"):
            d.pop(volatile)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def total_steps(cfg: TrainConfig, steps_per_epoch: int) -> int:
    return cfg.max_steps if cfg.max_steps > 0 else cfg.epochs * steps_per_epoch


def learning_rate(cfg: TrainConfig, step: int, total: int) -> float:
    """Rate for 1-based ``step``; cosine decays to exactly 0 at ``total``."""
    lr = cfg.lr
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return lr * step / cfg.warmup_steps
    if cfg.lr_schedule == "cosine":
        t = (step - cfg.warmup_steps) / max(1, total - cfg.warmup_steps)
        return lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, t)))
    # step decay at 60% and 80% of training
    return lr * (0.1 ** ((step > 0.6 * total) + (step > 0.8 * total)))


def set_deterministic(enabled: bool) -> None:
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


def deterministic_from_env(default: bool = False) -> bool:
    return os.environ.get("CODO_DETERMINISTIC", "") == "1" or default


@dataclass
class TrainState:
    pair: EncoderPair
    queues: dict[str, NegativeQueue]
    optimizer: torch.optim.Optimizer
    step: int = 0

    @classmethod
    def create(cls, cfg: TrainConfig) -> "TrainState":
        torch.manual_seed(cfg.seed)
        pair = EncoderPair.create(cfg.model, cfg.encoder_momentum)
        queues = {lvl: NegativeQueue(cfg.queue_size, cfg.model.embed_dim) for lvl in LEVELS}
        opt = torch.optim.SGD(
            pair.query.parameters(), lr=cfg.lr, momentum=cfg.momentum_sgd, weight_decay=cfg.weight_decay
        )
        return cls(pair, queues, opt)


def _stack_views(viewsets: Sequence[ViewSet], which: int) -> tuple[torch.Tensor, torch.Tensor]:
    views = [vs.views[which] for vs in viewsets]
    images = to_tensor(np.stack([v.image for v in views]))
    boxes = torch.tensor([v.box.as_tuple() for v in views], dtype=torch.float32)
    return images, boxes


def train_step(state: TrainState, batch: Sequence[ViewSet], cfg: TrainConfig, lr: float | None = None) -> tuple[TrainState, dict]:
    """One optimization step on a batch of view sets.

    The loss is the batch mean of the multi-view loss: for each key view,
    the level-weighted InfoNCE against a single snapshot of the queues.
    """
    if not batch:
        raise ValueError("empty batch")
    n_keys = batch[0].n_keys
    if any(vs.n_keys != n_keys for vs in batch):
        raise ValueError("all view sets in a batch must share n_keys")
    bsz = len(batch)
    lr = cfg.lr if lr is None else lr
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    xq, bq = _stack_views(batch, 0)
    key_inputs = [_stack_views(batch, 1 + j) for j in range(n_keys)]
    xk = torch.cat([x for x, _ in key_inputs])
    bk = torch.cat([b for _, b in key_inputs])

    q = state.pair.query(xq, bq)
    with torch.no_grad():
        k_all = state.pair.key(xk, bk)
    keys = [{lvl: k_all[lvl][j * bsz : (j + 1) * bsz] for lvl in LEVELS} for j in range(n_keys)]

    snapshot = {lvl: state.queues[lvl].snapshot() for lvl in LEVELS}
    per_sample = sum(hierarchical_loss(q, k, snapshot, cfg.loss) for k in keys)
    loss = per_sample.mean()
    if not torch.isfinite(loss):
        raise NonFiniteLossError(state.step + 1, [vs.foreground_id for vs in batch])

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    momentum_update(state.pair)
    for lvl in LEVELS:
        enqueue(state.queues[lvl], k_all[lvl])
    state.step += 1

    with torch.no_grad():
        pos = torch.stack([
            info_nce_logits(q[lvl], k[lvl], snapshot[lvl][:0], cfg.loss.temperature)[:, 0]
            for k in keys for lvl in LEVELS
        ])
    metrics = {
        "step": state.step,
        "loss": float(loss.detach()),
        "lr": lr,
        "queue_fill": len(state.queues[LEVELS[0]]),
        "pos_logit_mean": float(pos.mean()),
    }
    return state, metrics


# ------------------------------------------------------------- checkpoints

def _atomic_save(obj: dict, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def save_checkpoint(state: TrainState, cfg: TrainConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "step": state.step,
        "momentum": state.pair.momentum,
        "query": state.pair.query.state_dict(),
        "key": state.pair.key.state_dict(),
        "optimizer": state.optimizer.state_dict(),
    }
    if cfg.save_queues:
        payload["queues"] = {lvl: q.state_dict() for lvl, q in state.queues.items()}
    _atomic_save(payload, path)
    return path


def load_checkpoint(path: str | Path, cfg: TrainConfig | None = None) -> tuple[TrainState, TrainConfig]:
    """Restore a training state.  With ``cfg`` given, its hash must match."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CorruptedCheckpointError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    saved_cfg = TrainConfig.from_dict(payload["config"])
    if saved_cfg.hash() != payload["config_hash"]:
        raise CorruptedCheckpointError(f"{path}: stored config does not match its hash")
    if cfg is not None and cfg.hash() != payload["config_hash"]:
        raise ConfigMismatchError(f"{path}: config hash {payload['config_hash']} != current {cfg.hash()}")
    cfg = cfg or saved_cfg
    state = TrainState.create(cfg)
    try:
        state.pair.query.load_state_dict(payload["query"])
        state.pair.key.load_state_dict(payload["key"])
    except RuntimeError as e:
        raise CorruptedCheckpointError(str(e)) from e
    state.pair.momentum = payload["momentum"]
    state.optimizer.load_state_dict(payload["optimizer"])
    if "queues" in payload:
        state.queues = {lvl: NegativeQueue.from_state_dict(q) for lvl, q in payload["queues"].items()}
    state.step = int(payload["step"])
    return state, cfg


def load_encoder(path: str | Path, side: str = "query"):
    """The frozen encoder stored in a checkpoint, in eval mode."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    cfg = TrainConfig.from_dict(payload["config"])
    if cfg.hash() != payload["config_hash"]:
        raise CorruptedCheckpointError(f"{path}: stored config does not match its hash")
    pair = EncoderPair.create(cfg.model, payload["momentum"])
    enc = pair.query if side == "query" else pair.key
    enc.load_state_dict(payload[side])
    enc.eval()
    for p in enc.parameters():
        p.requires_grad_(False)
    return enc


# ------------------------------------------------------------------- loop

def run_pretraining(
    cfg: TrainConfig,
    source: ViewSource,
    out_dir: str | Path,
    resume: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> Path:
    """Train to completion, writing checkpoints and ``metrics.jsonl`` to ``out_dir``.

    Returns the path of the final checkpoint.
    """
    if source.n_keys != cfg.n_keys:
        raise ValueError(f"source provides {source.n_keys} key views, config expects {cfg.n_keys}")
    deterministic = deterministic_from_env(cfg.deterministic)
    set_deterministic(deterministic)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state, cfg = load_checkpoint(resume, cfg)
    else:
        state = TrainState.create(cfg)
    total = total_steps(cfg, source.steps_per_epoch(cfg.batch_size))
    metrics_path = out / "metrics.jsonl"
    mode = "a" if resume is not None else "w"
    log.info("training %d steps from step %d (config %s)", total, state.step + 1, cfg.hash())
    with open(metrics_path, mode) as mf:
        for step, batch in prefetch(source, range(state.step + 1, total + 1), cfg.batch_size):
            state, metrics = train_step(state, batch, cfg, learning_rate(cfg, step, total))
            metrics["config_hash"] = cfg.hash()
            mf.write(json.dumps(metrics, sort_keys=True) + "\n")
            if on_step is not None:
                on_step(metrics)
            if cfg.snapshot_every and step % cfg.snapshot_every == 0 and step < total:
                mf.flush()
                save_checkpoint(state, cfg, out / f"ckpt_{step:07d}.pt")
    return save_checkpoint(state, cfg, out / "final.pt")
