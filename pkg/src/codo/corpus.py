"""Synthetic detection corpus: parametric glyph foregrounds on texture pools.

The corpus directory holds

* ``pretrain_images.npy`` -- one glyph per image on a smooth background
  (the single-object pretraining set),
* ``pool_<id>.npy`` -- three background pools of different texture families,
* ``probe_images.npy`` -- held-out glyph instances, each rendered once on a
  fresh background of every pool, for probing,
* ``records.jsonl`` -- ground truth (class, tight box, pool) per image,
* ``manifest.json`` -- config, counts, array checksums and the config hash.

Foreground class and background pool are drawn independently.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .cpj import BackgroundPool, RoleTag
from .geometry import BoundingBox

CORPUS_VERSION = 1

CLASS_NAMES = (
    "disk", "square", "triangle", "ring", "plus",
    "cross", "diamond", "star", "ell", "bar_pair",
)

POOLS = (
    ("smooth", RoleTag.PRETRAIN_LIKE),
    ("stripes", RoleTag.DOWNSTREAM_LIKE_A),
    ("clutter", RoleTag.DOWNSTREAM_LIKE_B),
)


@dataclass(frozen=True)
class SyntheticCorpusConfig:
    n_foreground_classes: int = 10
    n_images: int = 4000
    image_size: int = 64
    pool_size: int = 400
    n_probe_instances: int = 600
    probe_test_fraction: float = 0.3
    glyph_size: tuple[int, int] = (22, 40)
    background_pools: tuple[str, ...] = field(default_factory=lambda: tuple(p for p, _ in POOLS))
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.n_foreground_classes <= len(CLASS_NAMES):
            raise ValueError(f"n_foreground_classes must be in [1, {len(CLASS_NAMES)}]")
        if self.image_size % 32 or self.image_size < 32:
            raise ValueError("image_size must be a positive multiple of 32")
        if self.n_images < 0 or self.pool_size < 1 or self.n_probe_instances < 0:
            raise ValueError("corpus counts out of range")
        if self.glyph_size[1] > self.image_size:
            raise ValueError("glyphs must fit in the image")
        unknown = set(self.background_pools) - {p for p, _ in POOLS}
        if unknown:
            raise ValueError(f"unknown background pools {sorted(unknown)}")
        object.__setattr__(self, "background_pools", tuple(self.background_pools))
        object.__setattr__(self, "glyph_size", tuple(self.glyph_size))


# ---------------------------------------------------------------- textures

def _color(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0, 255, 3)


def smooth_background(size: int, rng: np.random.Generator) -> np.ndarray:
    grid = rng.uniform(40, 215, (3, 3, 3)).astype(np.float32)
    img = cv2.resize(grid, (size, size), interpolation=cv2.INTER_CUBIC)
    img += rng.normal(0, 3, img.shape).astype(np.float32)
    return np.clip(img, 0, 255).astype(np.uint8)


def stripes_background(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(4, 14)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    a, b = _color(rng), _color(rng)
    img = wave[..., None] * a + (1 - wave[..., None]) * b
    return np.clip(img, 0, 255).astype(np.uint8)


def clutter_background(size: int, rng: np.random.Generator) -> np.ndarray:
    img = np.empty((size, size, 3), np.uint8)
    img[:] = _color(rng).astype(np.uint8)
    for _ in range(int(rng.integers(15, 30))):
        x, y = rng.integers(0, size, 2)
        w, h = rng.integers(2, size // 5, 2)
        cv2.rectangle(img, (int(x), int(y)), (int(x + w), int(y + h)), _color(rng).tolist(), -1)
    for _ in range(int(rng.integers(3, 8))):
        p0, p1 = rng.integers(0, size, 2), rng.integers(0, size, 2)
        cv2.line(img, (int(p0[0]), int(p0[1])), (int(p1[0]), int(p1[1])), _color(rng).tolist(), 1)
    return img


TEXTURES = {"smooth": smooth_background, "stripes": stripes_background, "clutter": clutter_background}


# ------------------------------------------------------------------ glyphs

def _poly(mask: np.ndarray, pts: np.ndarray) -> None:
    cv2.fillPoly(mask, [np.round(pts).astype(np.int32)], 1, lineType=cv2.LINE_8)


def glyph_mask(class_id: int, size: int, angle: float) -> np.ndarray:
    """Binary (size, size) mask of a glyph, rotated by ``angle`` degrees."""
    big = 4 * size
    m = np.zeros((big, big), np.uint8)
    c, r = big / 2, big / 2 - 2
    name = CLASS_NAMES[class_id]
    if name == "disk":
        cv2.circle(m, (int(c), int(c)), int(r), 1, -1)
    elif name == "square":
        _poly(m, np.array([[c - r, c - r], [c + r, c - r], [c + r, c + r], [c - r, c + r]]) * 0.85 + c * 0.15)
    elif name == "triangle":
        _poly(m, np.array([[c, c - r], [c + r, c + r * 0.8], [c - r, c + r * 0.8]]))
    elif name == "ring":
        cv2.circle(m, (int(c), int(c)), int(r), 1, -1)
        cv2.circle(m, (int(c), int(c)), int(r * 0.55), 0, -1)
    elif name == "plus":
        t = r * 0.3
        m[int(c - r):int(c + r), int(c - t):int(c + t)] = 1
        m[int(c - t):int(c + t), int(c - r):int(c + r)] = 1
    elif name == "cross":
        t = int(r * 0.42)
        cv2.line(m, (int(c - r * 0.8), int(c - r * 0.8)), (int(c + r * 0.8), int(c + r * 0.8)), 1, t)
        cv2.line(m, (int(c + r * 0.8), int(c - r * 0.8)), (int(c - r * 0.8), int(c + r * 0.8)), 1, t)
    elif name == "diamond":
        _poly(m, np.array([[c, c - r], [c + r * 0.7, c], [c, c + r], [c - r * 0.7, c]]))
    elif name == "star":
        ang = np.pi / 2 + np.arange(10) * np.pi / 5
        rad = np.where(np.arange(10) % 2 == 0, r, r * 0.42)
        _poly(m, np.stack([c + rad * np.cos(ang), c - rad * np.sin(ang)], 1))
    elif name == "ell":
        t = r * 0.6
        m[int(c - r):int(c + r), int(c - r):int(c - r + t)] = 1
        m[int(c + r - t):int(c + r), int(c - r):int(c + r)] = 1
    elif name == "bar_pair":
        t = r * 0.45
        m[int(c - r):int(c - r + t), int(c - r):int(c + r)] = 1
        m[int(c + r - t):int(c + r), int(c - r):int(c + r)] = 1
    rot = cv2.getRotationMatrix2D((c, c), angle, 1.0)
    m = cv2.warpAffine(m, rot, (big, big), flags=cv2.INTER_NEAREST)
    m = cv2.resize(m.astype(np.float32), (size, size), interpolation=cv2.INTER_AREA)
    return (m >= 0.5).astype(np.uint8)


@dataclass(frozen=True)
class GlyphInstance:
    class_id: int
    size: int
    angle: float
    color: tuple[int, int, int]
    shade: tuple[int, int, int]

    @classmethod
    def sample(cls, class_id: int, glyph_size: tuple[int, int], rng: np.random.Generator) -> "GlyphInstance":
        color = rng.uniform(0, 255, 3)
        shade = np.clip(color + rng.normal(0, 40, 3), 0, 255)
        return cls(
            class_id,
            int(rng.integers(glyph_size[0], glyph_size[1] + 1)),
            float(rng.uniform(-20, 20)),
            tuple(int(v) for v in color),
            tuple(int(v) for v in shade),
        )

    def render(self) -> tuple[np.ndarray, np.ndarray]:
        """RGB patch and binary mask, both ``size`` square."""
        mask = glyph_mask(self.class_id, self.size, self.angle)
        t = np.linspace(0, 1, self.size, dtype=np.float32)[None, :, None]
        patch = (1 - t) * np.array(self.color, np.float32) + t * np.array(self.shade, np.float32)
        patch = np.broadcast_to(patch, (self.size, self.size, 3))
        return np.clip(patch, 0, 255).astype(np.uint8), mask


def compose(background: np.ndarray, glyph: GlyphInstance, x: int, y: int) -> tuple[np.ndarray, BoundingBox]:
    """Draw ``glyph`` with its top-left at (x, y); returns image and tight box."""
    patch, mask = glyph.render()
    out = background.copy()
    region = out[y : y + glyph.size, x : x + glyph.size]
    region[mask.astype(bool)] = patch[mask.astype(bool)]
    ys, xs = np.nonzero(mask)
    return out, BoundingBox(float(x + xs.min()), float(y + ys.min()), float(x + xs.max() + 1), float(y + ys.max() + 1))


def foreground_extent(image: np.ndarray, background: np.ndarray) -> BoundingBox:
    """Box of pixels that differ from ``background`` (re-detection check)."""
    ys, xs = np.nonzero(np.any(image != background, axis=2))
    return BoundingBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _place(glyph: GlyphInstance, size: int, rng: np.random.Generator) -> tuple[int, int]:
    return int(rng.integers(0, size - glyph.size + 1)), int(rng.integers(0, size - glyph.size + 1))


def _balanced_classes(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % n_classes)


# ------------------------------------------------------------------ corpus

def config_hash(cfg: SyntheticCorpusConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode()).hexdigest()[:16]


def _sha(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def _empty(size: int) -> np.ndarray:
    return np.zeros((0, size, size, 3), np.uint8)


def generate_corpus(cfg: SyntheticCorpusConfig, out_dir: str | Path) -> Path:
    """Write a corpus for ``cfg`` into ``out_dir``; deterministic under ``cfg.seed``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    size = cfg.image_size
    ss = np.random.SeedSequence(cfg.seed)
    rng_pre, rng_pool, rng_probe = (np.random.default_rng(s) for s in ss.spawn(3))
    records: list[dict] = []

    classes = _balanced_classes(cfg.n_images, cfg.n_foreground_classes, rng_pre)
    pre = np.empty((cfg.n_images, size, size, 3), np.uint8) if cfg.n_images else _empty(size)
    for i, cls in enumerate(classes):
        glyph = GlyphInstance.sample(int(cls), cfg.glyph_size, rng_pre)
        bg = smooth_background(size, rng_pre)
        pre[i], box = compose(bg, glyph, *_place(glyph, size, rng_pre))
        records.append({"split": "pretrain", "index": i, "class_id": int(cls), "box": box.as_tuple()})
    arrays = {"pretrain_images": pre}

    for pool_id in cfg.background_pools:
        arrays[f"pool_{pool_id}"] = np.stack([TEXTURES[pool_id](size, rng_pool) for _ in range(cfg.pool_size)])

    n_pools = len(cfg.background_pools)
    probe_classes = _balanced_classes(cfg.n_probe_instances, cfg.n_foreground_classes, rng_probe)
    is_test = np.zeros(cfg.n_probe_instances, bool)
    for c in range(cfg.n_foreground_classes):
        idx = np.flatnonzero(probe_classes == c)
        is_test[idx[: int(round(cfg.probe_test_fraction * len(idx)))]] = True
    probe = np.empty((cfg.n_probe_instances * n_pools, size, size, 3), np.uint8) if cfg.n_probe_instances else _empty(size)
    k = 0
    for inst, cls in enumerate(probe_classes):
        glyph = GlyphInstance.sample(int(cls), cfg.glyph_size, rng_probe)
        x, y = _place(glyph, size, rng_probe)
        for pool_id in cfg.background_pools:
            bg = TEXTURES[pool_id](size, rng_probe)
            probe[k], box = compose(bg, glyph, x, y)
            records.append({
                "split": "probe", "index": k, "instance_id": inst, "class_id": int(cls),
                "pool_id": pool_id, "box": box.as_tuple(), "probe_split": "test" if is_test[inst] else "train",
            })
            k += 1
    arrays["probe_images"] = probe

    for name, arr in arrays.items():
        np.save(out / f"{name}.npy", arr)
    with open(out / "records.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
    manifest = {
        "version": CORPUS_VERSION,
        "config": asdict(cfg),
        "config_hash": config_hash(cfg),
        "class_names": list(CLASS_NAMES[: cfg.n_foreground_classes]),
        "counts": {
            "pretrain": cfg.n_images,
            "probe_train": int((~is_test).sum()) * n_pools,
            "probe_test": int(is_test.sum()) * n_pools,
            **{f"pool_{p}": cfg.pool_size for p in cfg.background_pools},
        },
        "checksums": {name: _sha(arr) for name, arr in arrays.items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


@dataclass
class Corpus:
    root: Path
    manifest: dict
    pretrain_images: np.ndarray
    pools: list[BackgroundPool]
    probe_images: np.ndarray
    records: list[dict]

    @property
    def n_classes(self) -> int:
        return self.manifest["config"]["n_foreground_classes"]

    @property
    def image_size(self) -> int:
        return self.manifest["config"]["image_size"]

    def pool(self, pool_id: str) -> BackgroundPool:
        for p in self.pools:
            if p.pool_id == pool_id:
                return p
        raise KeyError(pool_id)

    def probe_records(self, split: str | None = None) -> list[dict]:
        return [r for r in self.records if r["split"] == "probe" and (split is None or r["probe_split"] == split)]

    def pretrain_records(self) -> list[dict]:
        return [r for r in self.records if r["split"] == "pretrain"]


def load_corpus(root: str | Path, mmap: bool = False) -> Corpus:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("version") != CORPUS_VERSION:
        raise ValueError(f"unsupported corpus version {manifest.get('version')}")
    mode = "r" if mmap else None
    roles = dict(POOLS)
    pools = [
        BackgroundPool(pid, np.load(root / f"pool_{pid}.npy", mmap_mode=mode), roles[pid])
        for pid in manifest["config"]["background_pools"]
    ]
    with open(root / "records.jsonl") as f:
        records = [json.loads(line) for line in f]
    return Corpus(
        root,
        manifest,
        np.load(root / "pretrain_images.npy", mmap_mode=mode),
        pools,
        np.load(root / "probe_images.npy", mmap_mode=mode),
        records,
    )
