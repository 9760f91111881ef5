"""Unsupervised foreground proposals for pretraining images.

Two cheap generators stand in for selective search behind one interface:

* ``energy_sampler`` draws random boxes and ranks them by the mean gradient
  magnitude inside the box, weighted by the share of the image's total
  gradient energy the box captures;
* ``graph_segmentation`` over-segments the image with Felzenszwalb's graph
  method and proposes the boxes of segments and of merged adjacent pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from skimage.segmentation import felzenszwalb

from .geometry import BoundingBox

MAX_ASPECT = 3.0


class NoProposalError(LookupError):
    """No usable proposal survives for an image; the caller skips it."""


class Strategy(str, Enum):
    ENERGY_SAMPLER = "energy_sampler"
    GRAPH_SEGMENTATION = "graph_segmentation"


@dataclass(frozen=True)
class Proposal:
    box: BoundingBox
    source_image_id: str
    score: float


@dataclass(frozen=True)
class ProposalGeneratorConfig:
    strategy: Strategy = Strategy.ENERGY_SAMPLER
    min_box_fraction: float = 0.05
    max_box_fraction: float = 0.5
    candidates_per_image: int = 32

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if not 0 < self.min_box_fraction < self.max_box_fraction <= 1:
            raise ValueError("need 0 < min_box_fraction < max_box_fraction <= 1")
        if self.candidates_per_image < 0:
            raise ValueError("candidates_per_image must be >= 0")


def _gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return img.mean(axis=2) if img.ndim == 3 else img


def gradient_energy(image: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(_gray(image))
    return np.hypot(gx, gy)


def _integral(a: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    out[1:, 1:] = a.cumsum(0).cumsum(1)
    return out


def _box_sums(ii: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    x0, y0, x1, y1 = boxes.T
    return ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0]


def _rank(scores: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # descending score; the random key breaks ties
    return np.lexsort((rng.random(len(scores)), -scores))[:k]


def _energy_sampler(image: np.ndarray, cfg: ProposalGeneratorConfig, rng: np.random.Generator) -> list[tuple[np.ndarray, float]]:
    h, w = image.shape[:2]
    total = float(h * w)
    n = max(128 * cfg.candidates_per_image, 4096)
    areas = total * rng.uniform(cfg.min_box_fraction, cfg.max_box_fraction, n)
    aspect = np.exp(rng.uniform(np.log(1 / 4), np.log(4), n))
    bw = np.clip(np.round(np.sqrt(areas * aspect)), 1, w).astype(int)
    bh = np.clip(np.round(np.sqrt(areas / aspect)), 1, h).astype(int)
    x0 = (rng.random(n) * (w - bw + 1)).astype(int)
    y0 = (rng.random(n) * (h - bh + 1)).astype(int)
    boxes = np.stack([x0, y0, x0 + bw, y0 + bh], axis=1)
    frac = bw * bh / total
    boxes = boxes[(frac >= cfg.min_box_fraction) & (frac <= cfg.max_box_fraction)]
    if len(boxes) == 0:
        return []
    energy = gradient_energy(image)
    ii = _integral(energy)
    inside_area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    inside = _box_sums(ii, boxes)
    # unweighted mean alone favours thin boxes hugging a single edge
    scores = inside / inside_area * inside / max(ii[-1, -1], 1e-12)
    keep = _rank(scores, cfg.candidates_per_image, rng)
    return [(boxes[i], float(scores[i])) for i in keep]


def _graph_segmentation(image: np.ndarray, cfg: ProposalGeneratorConfig, rng: np.random.Generator) -> list[tuple[np.ndarray, float]]:
    h, w = image.shape[:2]
    total = float(h * w)
    labels = felzenszwalb(np.asarray(image), scale=100, sigma=0.8, min_size=max(4, int(0.01 * total)))
    n_seg = int(labels.max()) + 1
    ys, xs = np.indices(labels.shape)
    flat = labels.ravel()
    seg_area = np.bincount(flat, minlength=n_seg)
    x0 = np.full(n_seg, w)
    y0 = np.full(n_seg, h)
    x1 = np.zeros(n_seg, int)
    y1 = np.zeros(n_seg, int)
    np.minimum.at(x0, flat, xs.ravel())
    np.minimum.at(y0, flat, ys.ravel())
    np.maximum.at(x1, flat, xs.ravel() + 1)
    np.maximum.at(y1, flat, ys.ravel() + 1)

    # adjacency from horizontally and vertically neighbouring pixels
    pairs = np.concatenate([
        np.stack([labels[:, :-1].ravel(), labels[:, 1:].ravel()], 1),
        np.stack([labels[:-1, :].ravel(), labels[1:, :].ravel()], 1),
    ])
    pairs = np.unique(np.sort(pairs[pairs[:, 0] != pairs[:, 1]], axis=1), axis=0)

    groups = [(np.array([i]), seg_area[i]) for i in range(n_seg)]
    groups += [(p, seg_area[p].sum()) for p in pairs]
    boxes, scores = [], []
    for members, covered in groups:
        box = np.array([x0[members].min(), y0[members].min(), x1[members].max(), y1[members].max()])
        box_area = (box[2] - box[0]) * (box[3] - box[1])
        if not cfg.min_box_fraction <= box_area / total <= cfg.max_box_fraction:
            continue
        boxes.append(box)
        # how completely the segment(s) fill their own box
        scores.append(covered / box_area)
    if not boxes:
        return []
    scores_arr = np.asarray(scores, dtype=float)
    keep = _rank(scores_arr, cfg.candidates_per_image, rng)
    return [(boxes[i], float(scores_arr[i])) for i in keep]


_GENERATORS = {
    Strategy.ENERGY_SAMPLER: _energy_sampler,
    Strategy.GRAPH_SEGMENTATION: _graph_segmentation,
}


def generate_proposals(
    image: np.ndarray,
    cfg: ProposalGeneratorConfig,
    rng: np.random.Generator,
    image_id: str = "",
) -> list[Proposal]:
    """Candidate object boxes for ``image`` (H, W[, 3]), best first."""
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("empty image")
    h, w = image.shape[:2]
    if cfg.candidates_per_image == 0 or cfg.min_box_fraction * h * w < 1:
        return []
    found = _GENERATORS[cfg.strategy](image, cfg, rng)
    return [Proposal(BoundingBox(*map(float, b)), image_id, s) for b, s in found]


def filter_aspect_ratio(proposals: list[Proposal]) -> list[Proposal]:
    """Drop proposals with width/height >= 3 or <= 1/3."""
    return [p for p in proposals if 1 / MAX_ASPECT < p.box.aspect_ratio < MAX_ASPECT]


def select_one(proposals: list[Proposal], rng: np.random.Generator) -> Proposal:
    if not proposals:
        raise NoProposalError("no proposal left to select from")
    return proposals[int(rng.integers(len(proposals)))]
