"""Query/key encoders: convolutional backbone, FPN neck, RoIAlign and head."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import BoundingBox

LEVELS = ("P2", "P3", "P4", "P5")
STRIDES = {"P2": 4, "P3": 8, "P4": 16, "P5": 32}

# per-channel statistics used to standardize uint8 RGB input
PIXEL_MEAN = (0.485, 0.456, 0.406)
PIXEL_STD = (0.229, 0.224, 0.225)

# test builds assert unit-norm embeddings on every forward
CHECK_NORMS = os.environ.get("CODO_CHECK_NORMS", "") == "1"
NORM_TOL = 1e-5


class CorruptedCheckpointError(RuntimeError):
    """Parameters that should share a shape do not."""


@dataclass(frozen=True)
class EncoderConfig:
    # output channels of the stem and of the C2..C5 stages
    stem_channels: int = 16
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 96)
    blocks_per_stage: int = 1
    fpn_channels: int = 48
    head_channels: int = 48
    head_hidden: int = 256
    embed_dim: int = 128
    roi_size: int = 7
    sampling_ratio: int = 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        if "stage_channels" in d:
            d["stage_channels"] = tuple(d["stage_channels"])
        return cls(**d)


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class ConvNormAct(nn.Sequential):
    def __init__(self, cin: int, cout: int, stride: int = 1, kernel: int = 3):
        super().__init__(
            nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False),
            nn.GroupNorm(_groups(cout), cout),
            nn.ReLU(inplace=True),
        )


class Backbone(nn.Module):
    """Four stages with the C2..C5 stride layout of a ResNet (4, 8, 16, 32)."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.stem = ConvNormAct(3, cfg.stem_channels, stride=2)
        stages = []
        cin = cfg.stem_channels
        for cout in cfg.stage_channels:
            layers = [ConvNormAct(cin, cout, stride=2)]
            layers += [ConvNormAct(cout, cout) for _ in range(cfg.blocks_per_stage - 1)]
            stages.append(nn.Sequential(*layers))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class FPN(nn.Module):
    def __init__(self, in_channels: tuple[int, ...], out_channels: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.output = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in in_channels
        )

    def forward(self, feats: list[torch.Tensor]) -> dict[str, torch.Tensor]:
        lat = [conv(f) for conv, f in zip(self.lateral, feats)]
        top = lat[-1]
        merged = [top]
        for f in reversed(lat[:-1]):
            top = f + F.interpolate(top, size=f.shape[-2:], mode="nearest")
            merged.append(top)
        merged.reverse()
        return {lvl: conv(m) for lvl, conv, m in zip(LEVELS, self.output, merged)}


class RCNNHead(nn.Module):
    """Two 3x3 convolutions and two fully connected layers; shared by all levels."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.convs = nn.Sequential(
            ConvNormAct(cfg.fpn_channels, cfg.head_channels),
            ConvNormAct(cfg.head_channels, cfg.head_channels),
        )
        self.fc1 = nn.Linear(cfg.head_channels * cfg.roi_size**2, cfg.head_hidden)
        self.fc2 = nn.Linear(cfg.head_hidden, cfg.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.convs(x).flatten(1)
        return self.fc2(F.relu(self.fc1(x)))


def _interp_matrix(coords: torch.Tensor, size: int, sampling_ratio: int) -> torch.Tensor:
    """Per-bin bilinear weights along one axis.

    ``coords`` (R, S*sr) holds sample positions in index space; the result
    (R, S, size) maps a length-``size`` signal to the ``S`` bin averages.
    Samples beyond one pixel outside the map contribute zero; samples in the
    outer half-pixel are clamped to the border.
    """
    valid = ((coords >= -1.0) & (coords <= size)).to(coords.dtype)
    v = coords.clamp(min=0.0)
    lo = v.floor().long()
    at_edge = lo >= size - 1
    lo = torch.where(at_edge, torch.full_like(lo, size - 1), lo)
    hi = torch.where(at_edge, lo, lo + 1)
    v = torch.where(at_edge, lo.to(v.dtype), v)
    frac = v - lo.to(v.dtype)
    w = (
        F.one_hot(lo, size).to(v.dtype) * ((1.0 - frac) * valid)[..., None]
        + F.one_hot(hi, size).to(v.dtype) * (frac * valid)[..., None]
    )
    r, n = coords.shape
    return w.reshape(r, n // sampling_ratio, sampling_ratio, size).mean(dim=2)


def roi_align_batch(
    feat: torch.Tensor,
    boxes: torch.Tensor,
    output_size: int,
    stride: float,
    sampling_ratio: int = 2,
    batch_idx: torch.Tensor | None = None,
) -> torch.Tensor:
    """RoIAlign over ``boxes`` (R, 4) given in input-image coordinates.

    Each box is split into ``output_size**2`` bins; every bin averages
    ``sampling_ratio**2`` bilinear samples on a regular grid.  Coordinates are
    divided by ``stride`` without rounding.  Returns (R, C, S, S).
    """
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ValueError(f"boxes must be (R, 4), got {tuple(boxes.shape)}")
    if batch_idx is None:
        batch_idx = torch.arange(boxes.shape[0])
    scaled = boxes.to(feat.dtype) / stride
    w = scaled[:, 2] - scaled[:, 0]
    h = scaled[:, 3] - scaled[:, 1]
    if bool((w <= 0).any() or (h <= 0).any()):
        raise ValueError("box has zero area after stride scaling")
    s, sr = output_size, sampling_ratio
    # offsets of the sample points within the box, as fractions of the box size
    frac = (torch.arange(s, dtype=feat.dtype)[:, None] + (torch.arange(sr, dtype=feat.dtype) + 0.5) / sr).reshape(-1) / s
    # feature index i sits at continuous coordinate i + 0.5
    xs = scaled[:, 0:1] + w[:, None] * frac[None, :] - 0.5
    ys = scaled[:, 1:2] + h[:, None] * frac[None, :] - 0.5
    # bilinear sampling is separable: pooled = Wy @ feat @ Wx^T per box
    wy = _interp_matrix(ys, feat.shape[-2], sr)
    wx = _interp_matrix(xs, feat.shape[-1], sr)
    return torch.einsum("rsh,rchw,rtw->rcst", wy, feat[batch_idx], wx)


def roi_align(
    feature_map: torch.Tensor,
    box: BoundingBox,
    output_size: int,
    stride: float,
    sampling_ratio: int = 2,
) -> torch.Tensor:
    """Pool one box from a single (C, H, W) map; returns (C, S, S)."""
    if feature_map.ndim != 3:
        raise ValueError("feature_map must be (C, H, W)")
    boxes = torch.tensor([box.as_tuple()], dtype=feature_map.dtype)
    return roi_align_batch(feature_map[None], boxes, output_size, stride, sampling_ratio)[0]


def to_tensor(images: np.ndarray | list[np.ndarray], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """uint8 (N, H, W, 3) or (H, W, 3) images to standardized (N, 3, H, W)."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    x = torch.from_numpy(np.ascontiguousarray(arr)).to(dtype).permute(0, 3, 1, 2) / 255.0
    mean = torch.tensor(PIXEL_MEAN, dtype=dtype)[None, :, None, None]
    std = torch.tensor(PIXEL_STD, dtype=dtype)[None, :, None, None]
    return (x - mean) / std


class Encoder(nn.Module):
    """Image + box -> one L2-normalized embedding per pyramid level."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.fpn = FPN(cfg.stage_channels, cfg.fpn_channels)
        self.head = RCNNHead(cfg)

    def backbone_fpn(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input size {h}x{w} is not a multiple of 32")
        return self.fpn(self.backbone(images))

    def forward(self, images: torch.Tensor, boxes: torch.Tensor) -> dict[str, torch.Tensor]:
        pyramid = self.backbone_fpn(images)
        n = boxes.shape[0]
        # the same box is pooled from every level
        pooled = torch.cat(
            [
                roi_align_batch(pyramid[lvl], boxes, self.cfg.roi_size, STRIDES[lvl], self.cfg.sampling_ratio)
                for lvl in LEVELS
            ]
        )
        emb = F.normalize(self.head(pooled), dim=1)
        if CHECK_NORMS:
            norms = emb.detach().norm(dim=1)
            assert bool(((norms - 1).abs() <= NORM_TOL).all()), f"embedding norms off by {float((norms - 1).abs().max())}"
        return {lvl: emb[i * n : (i + 1) * n] for i, lvl in enumerate(LEVELS)}


def backbone_fpn(encoder: Encoder, image: torch.Tensor) -> dict[str, torch.Tensor]:
    if image.ndim == 3:
        image = image[None]
    return encoder.backbone_fpn(image)


def extract_embeddings(encoder: Encoder, image: np.ndarray | torch.Tensor, box: BoundingBox) -> dict[str, torch.Tensor]:
    """Embeddings of one (image, box) view, one (D,) vector per level."""
    x = image if isinstance(image, torch.Tensor) else to_tensor(image, dtype=next(encoder.parameters()).dtype)
    if x.ndim == 3:
        x = x[None]
    boxes = torch.tensor([box.as_tuple()], dtype=x.dtype)
    return {lvl: e[0] for lvl, e in encoder(x, boxes).items()}


@dataclass
class EncoderPair:
    query: Encoder
    key: Encoder
    momentum: float = 0.999

    @classmethod
    def create(cls, cfg: EncoderConfig = EncoderConfig(), momentum: float = 0.999) -> "EncoderPair":
        query = Encoder(cfg)
        key = Encoder(cfg)
        key.load_state_dict(query.state_dict())
        for p in key.parameters():
            p.requires_grad_(False)
        return cls(query, key, momentum)


@torch.no_grad()
def momentum_update(pair: EncoderPair) -> EncoderPair:
    """Blend key parameters toward the query: ``k <- m*k + (1-m)*q``."""
    m = pair.momentum
    q_params = dict(pair.query.named_parameters())
    k_params = dict(pair.key.named_parameters())
    if q_params.keys() != k_params.keys():
        raise CorruptedCheckpointError("query and key encoders have different parameter sets")
    for name, k in k_params.items():
        q = q_params[name]
        if q.shape != k.shape:
            raise CorruptedCheckpointError(f"shape mismatch for {name}: {tuple(q.shape)} vs {tuple(k.shape)}")
        k.copy_(k * m + q * (1.0 - m))
    return pair
