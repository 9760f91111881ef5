"""Hierarchical multi-view InfoNCE with one negative queue per pyramid level."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from .encoder import LEVELS

UNIT_TOL = 1e-4


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.2
    level_weights: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        w = tuple(float(x) for x in self.level_weights)
        if len(w) != len(LEVELS) or any(x < 0 for x in w):
            raise ValueError("level_weights must be 4 non-negative numbers")
        if abs(sum(w) - 1.0) > 1e-6:
            raise ValueError(f"level_weights must sum to 1, got {sum(w)}")
        object.__setattr__(self, "level_weights", w)


class NegativeQueue:
    """Fixed-capacity FIFO of unit vectors backed by a ring buffer."""

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.buffer = torch.zeros(capacity, dim, dtype=dtype)
        self.write_cursor = 0
        self.count = 0

    def __len__(self) -> int:
        return self.count

    def entries(self) -> torch.Tensor:
        """Current contents, oldest first."""
        if self.count < self.capacity:
            return self.buffer[: self.count].clone()
        return torch.cat([self.buffer[self.write_cursor :], self.buffer[: self.write_cursor]])

    def snapshot(self) -> torch.Tensor:
        """Negatives for one training step, in buffer order (order is irrelevant to the loss)."""
        return self.buffer[: self.count].clone()

    def digest(self) -> str:
        return hashlib.sha1(self.entries().numpy().tobytes()).hexdigest()

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "dim": self.dim, "buffer": self.buffer.clone(),
                "write_cursor": self.write_cursor, "count": self.count}

    @classmethod
    def from_state_dict(cls, state: dict) -> "NegativeQueue":
        q = cls(state["capacity"], state["dim"], state["buffer"].dtype)
        q.buffer.copy_(state["buffer"])
        q.write_cursor = int(state["write_cursor"])
        q.count = int(state["count"])
        return q


def enqueue(queue: NegativeQueue, batch: torch.Tensor | Sequence[torch.Tensor]) -> NegativeQueue:
    """Append unit vectors, evicting the oldest entries once full."""
    if not isinstance(batch, torch.Tensor):
        if len(batch) == 0:
            return queue
        batch = torch.stack(list(batch))
    if batch.numel() == 0:
        return queue
    batch = batch.detach().reshape(-1, queue.dim).to(queue.buffer.dtype)
    norms = batch.norm(dim=1)
    if bool(((norms - 1).abs() > UNIT_TOL).any()):
        raise ValueError("queue entries must be unit vectors")
    if len(batch) >= queue.capacity:
        batch = batch[-queue.capacity :]
        queue.buffer.copy_(batch)
        queue.write_cursor = 0
        queue.count = queue.capacity
        return queue
    n = len(batch)
    end = queue.write_cursor + n
    if end <= queue.capacity:
        queue.buffer[queue.write_cursor : end] = batch
    else:
        first = queue.capacity - queue.write_cursor
        queue.buffer[queue.write_cursor :] = batch[:first]
        queue.buffer[: n - first] = batch[first:]
    queue.write_cursor = end % queue.capacity
    queue.count = min(queue.capacity, queue.count + n)
    return queue


def _negatives(queue: NegativeQueue | torch.Tensor) -> torch.Tensor:
    return queue.snapshot() if isinstance(queue, NegativeQueue) else queue


def info_nce_logits(e_q: torch.Tensor, e_k_pos: torch.Tensor, negatives: torch.Tensor, temperature: float) -> torch.Tensor:
    """Logits with the positive in column 0; shapes (B, D), (B, D), (K, D) -> (B, 1+K)."""
    pos = (e_q * e_k_pos).sum(-1, keepdim=True)
    neg = e_q @ negatives.to(e_q.dtype).T
    return torch.cat([pos, neg], dim=-1) / temperature


def info_nce(
    e_q: torch.Tensor,
    e_k_pos: torch.Tensor,
    queue: NegativeQueue | torch.Tensor,
    temperature: float,
) -> torch.Tensor:
    """InfoNCE loss of query vectors against their positives and the queue.

    Accepts a single pair of (D,) vectors or batches (B, D); batches give a
    per-sample loss of shape (B,).  ``queue`` may be a queue or a (K, D)
    tensor of negatives (a snapshot).
    """
    negatives = _negatives(queue)
    d = e_q.shape[-1]
    if e_k_pos.shape != e_q.shape or (negatives.numel() and negatives.shape[-1] != d):
        raise ValueError(
            f"dimension mismatch: query {tuple(e_q.shape)}, positive {tuple(e_k_pos.shape)}, negatives {tuple(negatives.shape)}"
        )
    single = e_q.ndim == 1
    q, k = (e_q[None], e_k_pos[None]) if single else (e_q, e_k_pos)
    logits = info_nce_logits(q, k, negatives.reshape(-1, d), temperature)
    loss = -F.log_softmax(logits, dim=-1)[:, 0]
    return loss[0] if single else loss


def _check_levels(emb: Mapping[str, torch.Tensor], name: str) -> None:
    missing = [lvl for lvl in LEVELS if lvl not in emb]
    if missing:
        raise ValueError(f"{name} is missing levels {missing}")


def hierarchical_loss(
    q: Mapping[str, torch.Tensor],
    k: Mapping[str, torch.Tensor],
    queues: Mapping[str, NegativeQueue | torch.Tensor],
    cfg: LossConfig,
) -> torch.Tensor:
    """Weighted sum over P2..P5 of the per-level InfoNCE."""
    _check_levels(q, "query embeddings")
    _check_levels(k, "key embeddings")
    _check_levels(queues, "queues")
    return sum(
        w * info_nce(q[lvl], k[lvl], queues[lvl], cfg.temperature)
        for lvl, w in zip(LEVELS, cfg.level_weights)
    )


def multi_view_loss(
    q: Mapping[str, torch.Tensor],
    keys: Sequence[Mapping[str, torch.Tensor]],
    queues: Mapping[str, NegativeQueue | torch.Tensor],
    cfg: LossConfig,
) -> torch.Tensor:
    """Sum of hierarchical losses of the query against every key view.

    All key views are scored against one snapshot of the queues.
    """
    if len(keys) == 0:
        raise ValueError("multi_view_loss needs at least one key view")
    _check_levels(queues, "queues")
    snapshot = {lvl: _negatives(queues[lvl]) for lvl in LEVELS}
    return sum(hierarchical_loss(q, k, snapshot, cfg) for k in keys)
