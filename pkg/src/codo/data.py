"""Batches of view sets for the trainer.

Every source is indexed by step: the batch for step ``t`` depends only on the
source's seed and ``t``.  Resuming from a checkpoint therefore replays the
exact data stream without any saved iterator state.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import numpy as np

from .corpus import Corpus
from .cpj import BackgroundPool, PasteConfig, PhotoConfig, SkipSampleError, View, ViewSet, build_viewset
from .geometry import BoundingBox, JitterConfig
from .proposals import (
    NoProposalError,
    Proposal,
    ProposalGeneratorConfig,
    filter_aspect_ratio,
    generate_proposals,
    select_one,
)

SHARD_MAGIC = b"CODOVIEW"
SHARD_VERSION = 1
MAX_FOREGROUND_RETRIES = 20


class ShardFormatError(ValueError):
    """A view shard is unreadable or from an incompatible format version."""


class ViewSource(Protocol):
    n_keys: int

    def steps_per_epoch(self, batch_size: int) -> int: ...

    def batch(self, step: int, batch_size: int) -> list[ViewSet]: ...


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 2, epoch]).permutation(n)


def _indices_for_step(seed: int, step: int, batch_size: int, n: int) -> list[int]:
    """Dataset indices for 1-based ``step``; each epoch is a fresh permutation."""
    orders: dict[int, np.ndarray] = {}
    out = []
    for pos in range((step - 1) * batch_size, step * batch_size):
        epoch, offset = divmod(pos, n)
        if epoch not in orders:
            orders[epoch] = _epoch_order(seed, epoch, n)
        out.append(int(orders[epoch][offset]))
    return out


@dataclass
class CorpusViewStream:
    """Builds fresh view sets from the corpus pretraining images on demand."""

    corpus: Corpus
    n_keys: int = 1
    query_pools: Sequence[str] | None = None
    key_pools: Sequence[str] | None = None
    proposal_cfg: ProposalGeneratorConfig = field(default_factory=ProposalGeneratorConfig)
    paste_cfg: PasteConfig = field(default_factory=PasteConfig)
    jitter_cfg: JitterConfig = field(default_factory=JitterConfig)
    photo_cfg: PhotoConfig = field(default_factory=PhotoConfig)
    seed: int = 0
    allow_pool_mismatch: bool = False
    cache_size: int = 50_000

    def __post_init__(self) -> None:
        if len(self.corpus.pretrain_images) == 0:
            raise ValueError("corpus has no pretraining images")
        ids = [p.pool_id for p in self.corpus.pools]
        self._qpools = self._select(self.query_pools or ids)
        self._kpools = self._select(self.key_pools or self.query_pools or ids)
        self._cache: OrderedDict[int, list[Proposal]] = OrderedDict()
        self._order_cache: dict[int, np.ndarray] = {}

    def _select(self, pool_ids: Sequence[str]) -> list[BackgroundPool]:
        return [self.corpus.pool(p) for p in pool_ids]

    def __len__(self) -> int:
        return len(self.corpus.pretrain_images)

    def steps_per_epoch(self, batch_size: int) -> int:
        return math.ceil(len(self) / batch_size)

    def proposals(self, index: int) -> list[Proposal]:
        """Aspect-filtered proposals of one pretraining image (cached)."""
        if index in self._cache:
            return self._cache[index]
        rng = np.random.default_rng([self.seed, 1, index])
        found = filter_aspect_ratio(
            generate_proposals(self.corpus.pretrain_images[index], self.proposal_cfg, rng, image_id=str(index))
        )
        self._cache[index] = found
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return found

    def _order(self, epoch: int) -> np.ndarray:
        if epoch not in self._order_cache:
            if len(self._order_cache) > 4:
                self._order_cache.clear()
            self._order_cache[epoch] = _epoch_order(self.seed, epoch, len(self))
        return self._order_cache[epoch]

    def viewset(self, index: int, rng: np.random.Generator) -> ViewSet:
        proposal = select_one(self.proposals(index), rng)
        return build_viewset(
            proposal,
            self.corpus.pretrain_images[index],
            self._qpools,
            self.n_keys,
            self.paste_cfg,
            self.jitter_cfg,
            self.photo_cfg,
            rng,
            key_pools=self._kpools,
            allow_pool_mismatch=self.allow_pool_mismatch,
            foreground_id=f"img{index}",
        )

    def batch(self, step: int, batch_size: int) -> list[ViewSet]:
        if step < 1:
            raise ValueError(f"steps are 1-based, got {step}")
        rng = np.random.default_rng([self.seed, 0, step])
        n = len(self)
        out = []
        for pos in range((step - 1) * batch_size, step * batch_size):
            epoch, offset = divmod(pos, n)
            index = int(self._order(epoch)[offset])
            for _ in range(MAX_FOREGROUND_RETRIES):
                try:
                    out.append(self.viewset(index, rng))
                    break
                except (NoProposalError, SkipSampleError):
                    # skip this foreground, substitute a random one
                    index = int(rng.integers(n))
            else:
                raise RuntimeError(f"could not build a view set for step {step}")
        return out


# -------------------------------------------------------------- view shards

def _record_dtype(n_views: int, size: int) -> np.dtype:
    return np.dtype([
        ("foreground_id", "S64"),
        ("image", np.uint8, (n_views, size, size, 3)),
        ("box", np.float64, (n_views, 4)),
        ("paste_box", np.float64, (n_views, 4)),
        ("pool_id", "S32", (n_views,)),
        ("crop_digest", "S40"),
    ])


def write_shard(path: str | Path, viewsets: Sequence[ViewSet], image_size: int) -> Path:
    """Fixed-size binary records behind a JSON header; written atomically."""
    if not viewsets:
        raise ValueError("refusing to write an empty shard")
    n_keys = viewsets[0].n_keys
    if any(v.n_keys != n_keys for v in viewsets):
        raise ValueError("all view sets in a shard must share n_keys")
    dtype = _record_dtype(n_keys + 1, image_size)
    recs = np.zeros(len(viewsets), dtype)
    for i, vs in enumerate(viewsets):
        if len(vs.foreground_id.encode()) > 64:
            raise ValueError(f"foreground id longer than 64 bytes: {vs.foreground_id!r}")
        recs[i]["foreground_id"] = vs.foreground_id.encode()
        recs[i]["crop_digest"] = vs.query.crop_digest.encode()
        for j, v in enumerate(vs.views):
            if v.image.shape != (image_size, image_size, 3):
                raise ValueError(f"view image has shape {v.image.shape}, expected {image_size}x{image_size}x3")
            recs[i]["image"][j] = v.image
            recs[i]["box"][j] = v.box.as_tuple()
            recs[i]["paste_box"][j] = v.paste_box.as_tuple()
            recs[i]["pool_id"][j] = v.pool_id.encode()
    header = json.dumps({
        "format_version": SHARD_VERSION, "image_size": image_size,
        "n_keys": n_keys, "count": len(viewsets),
    }, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(SHARD_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(recs.tobytes())
    tmp.replace(path)
    return path


def read_shard(path: str | Path) -> tuple[dict, list[ViewSet]]:
    raw = Path(path).read_bytes()
    if raw[: len(SHARD_MAGIC)] != SHARD_MAGIC:
        raise ShardFormatError(f"{path}: not a view shard")
    off = len(SHARD_MAGIC)
    (hlen,) = struct.unpack("<I", raw[off : off + 4])
    header = json.loads(raw[off + 4 : off + 4 + hlen])
    if header.get("format_version") != SHARD_VERSION:
        raise ShardFormatError(f"{path}: shard version {header.get('format_version')} != {SHARD_VERSION}")
    dtype = _record_dtype(header["n_keys"] + 1, header["image_size"])
    body = raw[off + 4 + hlen :]
    if len(body) != dtype.itemsize * header["count"]:
        raise ShardFormatError(f"{path}: truncated shard")
    recs = np.frombuffer(body, dtype)
    viewsets = []
    for r in recs:
        views = [
            View(
                r["image"][j].copy(), BoundingBox(*r["box"][j]), r["pool_id"][j].decode(),
                BoundingBox(*r["paste_box"][j]), r["crop_digest"].decode(),
            )
            for j in range(header["n_keys"] + 1)
        ]
        viewsets.append(ViewSet(r["foreground_id"].decode(), views[0], views[1:]))
    return header, viewsets


@dataclass
class ShardViewSource:
    """View sets read from a directory of ``*.views`` shards."""

    root: Path
    seed: int = 0

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        files = sorted(self.root.glob("*.views"))
        if not files:
            raise ShardFormatError(f"no view shards in {self.root}")
        self.viewsets: list[ViewSet] = []
        headers = []
        for f in files:
            header, vs = read_shard(f)
            headers.append(header)
            self.viewsets.extend(vs)
        if len({(h["n_keys"], h["image_size"]) for h in headers}) != 1:
            raise ShardFormatError("shards disagree on n_keys or image size")
        self.n_keys = headers[0]["n_keys"]
        self.image_size = headers[0]["image_size"]

    def __len__(self) -> int:
        return len(self.viewsets)

    def steps_per_epoch(self, batch_size: int) -> int:
        return math.ceil(len(self) / batch_size)

    def batch(self, step: int, batch_size: int) -> list[ViewSet]:
        return [self.viewsets[i] for i in _indices_for_step(self.seed, step, batch_size, len(self))]


def prefetch(source: ViewSource, steps: range, batch_size: int, depth: int = 2) -> Iterator[tuple[int, list[ViewSet]]]:
    """Yield ``(step, batch)`` for ``steps`` while a worker builds the next ones.

    At most ``depth`` batches are in flight.  Batches are pure functions of
    the step, so prefetching never changes what the trainer sees.
    """
    with ThreadPoolExecutor(max_workers=1) as pool:
        pending = []
        it = iter(steps)
        for step in it:
            pending.append((step, pool.submit(source.batch, step, batch_size)))
            if len(pending) >= depth:
                break
        while pending:
            step, fut = pending.pop(0)
            nxt = next(it, None)
            if nxt is not None:
                pending.append((nxt, pool.submit(source.batch, nxt, batch_size)))
            yield step, fut.result()
