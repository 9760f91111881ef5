"""Copy, paste and jitter: the view factory.

A foreground crop is resized to a random scale and aspect, hard-pasted at a
random position on a background image, and the pasted rectangle is jittered
so the box also takes in some background.  Every view of a :class:`ViewSet`
shares the crop but gets its own background and photometric augmentation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import cv2
import numpy as np

from .geometry import BoundingBox, JitterConfig, hflip, jitter_box
from .proposals import Proposal

MAX_BACKGROUND_RETRIES = 5
MIN_PASTE_SIDE = 2


class SkipSampleError(RuntimeError):
    """The sample cannot be built; the caller should draw another."""


class RoleTag(str, Enum):
    PRETRAIN_LIKE = "pretrain_like"
    DOWNSTREAM_LIKE_A = "downstream_like_A"
    DOWNSTREAM_LIKE_B = "downstream_like_B"


@dataclass
class BackgroundPool:
    pool_id: str
    images: Sequence[np.ndarray]
    role_tag: RoleTag = RoleTag.PRETRAIN_LIKE

    def __post_init__(self) -> None:
        if len(self.images) == 0:
            raise ValueError(f"background pool {self.pool_id!r} is empty")
        self.role_tag = RoleTag(self.role_tag)


@dataclass(frozen=True)
class PasteConfig:
    scale_range: tuple[float, float] = (0.3, 0.8)
    aspect_jitter_range: tuple[float, float] = (3 / 4, 4 / 3)
    blend: str = "hard"

    def __post_init__(self) -> None:
        lo, hi = self.scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"scale_range must lie within (0, 1], got {self.scale_range}")
        alo, ahi = self.aspect_jitter_range
        if not 0 < alo <= ahi:
            raise ValueError(f"aspect_jitter_range must be positive, got {self.aspect_jitter_range}")
        if self.blend != "hard":
            raise ValueError(f"unsupported blend mode {self.blend!r}")


@dataclass(frozen=True)
class PhotoConfig:
    """Color jitter, grayscale, blur and flip, each applied with a probability."""

    p_color_jitter: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    p_grayscale: float = 0.2
    p_blur: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.0)
    p_flip: float = 0.5

    @classmethod
    def off(cls) -> "PhotoConfig":
        return cls(p_color_jitter=0.0, p_grayscale=0.0, p_blur=0.0, p_flip=0.0)


@dataclass
class View:
    image: np.ndarray
    box: BoundingBox
    pool_id: str
    paste_box: BoundingBox
    crop_digest: str = ""


@dataclass
class ViewSet:
    foreground_id: str
    query: View
    keys: list[View] = field(default_factory=list)

    @property
    def views(self) -> list[View]:
        return [self.query, *self.keys]

    @property
    def n_keys(self) -> int:
        return len(self.keys)


def crop(image: np.ndarray, box: BoundingBox) -> np.ndarray:
    x0, y0 = int(np.floor(box.x0)), int(np.floor(box.y0))
    x1, y1 = int(np.ceil(box.x1)), int(np.ceil(box.y1))
    return image[y0:y1, x0:x1]


def digest(array: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(array).tobytes()).hexdigest()


def paste(
    proposal_crop: np.ndarray,
    background: np.ndarray,
    cfg: PasteConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, BoundingBox]:
    """Hard-paste a rescaled crop; returns the composite and the paste rectangle.

    The pasted short side is a ``scale_range`` fraction of the background's
    short side.  If the long side would not fit, the paste shrinks uniformly
    until it does.
    """
    if proposal_crop.size == 0 or background.size == 0:
        raise ValueError("empty crop or background")
    bh, bw = background.shape[:2]
    short = min(bh, bw)
    if cfg.scale_range[0] * short < MIN_PASTE_SIDE:
        raise SkipSampleError(f"background {bw}x{bh} too small for the minimum paste scale")
    scale = rng.uniform(*cfg.scale_range)
    lo, hi = np.log(cfg.aspect_jitter_range)
    aspect = proposal_crop.shape[1] / proposal_crop.shape[0] * float(np.exp(rng.uniform(lo, hi)))
    side = scale * short
    pw, ph = (side * aspect, side) if aspect >= 1 else (side, side / aspect)
    shrink = min(1.0, bw / pw, bh / ph)
    pw = max(MIN_PASTE_SIDE, int(round(pw * shrink)))
    ph = max(MIN_PASTE_SIDE, int(round(ph * shrink)))
    x = int(rng.integers(0, bw - pw + 1))
    y = int(rng.integers(0, bh - ph + 1))
    interp = cv2.INTER_AREA if pw * ph < proposal_crop.shape[0] * proposal_crop.shape[1] else cv2.INTER_LINEAR
    resized = cv2.resize(np.ascontiguousarray(proposal_crop), (pw, ph), interpolation=interp)
    out = background.copy()
    out[y : y + ph, x : x + pw] = resized.reshape(ph, pw, -1)
    return out, BoundingBox(float(x), float(y), float(x + pw), float(y + ph))


def cpj(
    proposal_crop: np.ndarray,
    background: np.ndarray,
    paste_cfg: PasteConfig,
    jitter_cfg: JitterConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, BoundingBox]:
    """Paste the crop onto ``background`` and jitter the pasted box."""
    composite, paste_box = paste(proposal_crop, background, paste_cfg, rng)
    h, w = composite.shape[:2]
    return composite, jitter_box(paste_box, jitter_cfg, (w, h), rng)


def _luma(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype)


def _rotate_hue(img: np.ndarray, turns: float) -> np.ndarray:
    # rotation of the chroma plane in YIQ space
    to_yiq = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]], dtype=np.float32)
    theta = 2 * np.pi * turns
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float32)
    m = np.linalg.inv(to_yiq) @ rot @ to_yiq
    return img @ m.T.astype(np.float32)


def photometric_augment(image: np.ndarray, cfg: PhotoConfig, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Augment a uint8 (H, W, 3) image; returns it with a flag telling
    whether it was mirrored horizontally (the caller mirrors its box)."""
    # draw every random number up front so the stream does not depend on which branches fire
    u = rng.random(4)
    b, c, s = rng.uniform(-1, 1, 3)
    h = rng.uniform(-cfg.hue, cfg.hue)
    sigma = rng.uniform(*cfg.blur_sigma)

    img = image.astype(np.float32)
    changed = False
    if u[0] < cfg.p_color_jitter:
        img = img * (1 + cfg.brightness * b)
        m = _luma(img).mean()
        img = (img - m) * (1 + cfg.contrast * c) + m
        g = _luma(img)[..., None]
        img = (img - g) * (1 + cfg.saturation * s) + g
        img = _rotate_hue(img, h)
        changed = True
    if u[1] < cfg.p_grayscale:
        img = np.repeat(_luma(img)[..., None], 3, axis=2)
        changed = True
    if u[2] < cfg.p_blur:
        img = cv2.GaussianBlur(img, (0, 0), sigmaX=sigma)
        changed = True
    flipped = bool(u[3] < cfg.p_flip)
    if flipped:
        img = img[:, ::-1]
    if not changed:
        return (image[:, ::-1].copy() if flipped else image.copy()), flipped
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), flipped


def draw_background(pools: Sequence[BackgroundPool], rng: np.random.Generator) -> tuple[BackgroundPool, np.ndarray]:
    """Pool uniformly, then an image uniformly within the pool."""
    pool = pools[int(rng.integers(len(pools)))]
    return pool, pool.images[int(rng.integers(len(pool.images)))]


def _make_view(
    fg: np.ndarray,
    fg_digest: str,
    pools: Sequence[BackgroundPool],
    paste_cfg: PasteConfig,
    jitter_cfg: JitterConfig,
    photo_cfg: PhotoConfig,
    rng: np.random.Generator,
) -> View:
    for _ in range(MAX_BACKGROUND_RETRIES):
        pool, background = draw_background(pools, rng)
        try:
            composite, paste_box = paste(fg, background, paste_cfg, rng)
        except SkipSampleError:
            continue
        h, w = composite.shape[:2]
        box = jitter_box(paste_box, jitter_cfg, (w, h), rng)
        image, flipped = photometric_augment(composite, photo_cfg, rng)
        if flipped:
            box, paste_box = hflip(box, w), hflip(paste_box, w)
        return View(image, box, pool.pool_id, paste_box, fg_digest)
    raise SkipSampleError(f"no usable background after {MAX_BACKGROUND_RETRIES} draws")


def build_viewset(
    proposal: Proposal,
    source_image: np.ndarray,
    pools: Sequence[BackgroundPool],
    n_keys: int,
    paste_cfg: PasteConfig,
    jitter_cfg: JitterConfig,
    photo_cfg: PhotoConfig,
    rng: np.random.Generator,
    *,
    key_pools: Sequence[BackgroundPool] | None = None,
    allow_pool_mismatch: bool = False,
    foreground_id: str | None = None,
) -> ViewSet:
    """One query view and ``n_keys`` key views of a single proposal.

    Query and key views must draw from the same pools.  ``key_pools`` with
    ``allow_pool_mismatch=True`` exists only for the background ablation.
    """
    if n_keys not in (1, 3):
        raise ValueError(f"n_keys must be 1 or 3, got {n_keys}")
    if not pools:
        raise ValueError("no background pools")
    key_pools = pools if key_pools is None else key_pools
    if {p.pool_id for p in key_pools} != {p.pool_id for p in pools} and not allow_pool_mismatch:
        raise ValueError("query and key views must be drawn from the same background pools")
    fg = crop(source_image, proposal.box)
    if fg.size == 0:
        raise SkipSampleError("empty proposal crop")
    fg_digest = digest(fg)
    query = _make_view(fg, fg_digest, pools, paste_cfg, jitter_cfg, photo_cfg, rng)
    keys = [_make_view(fg, fg_digest, key_pools, paste_cfg, jitter_cfg, photo_cfg, rng) for _ in range(n_keys)]
    fid = foreground_id if foreground_id is not None else f"{proposal.source_image_id}:{proposal.box.as_tuple()}"
    return ViewSet(fid, query, keys)
