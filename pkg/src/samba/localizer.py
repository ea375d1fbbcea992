"""Compact single-class detector over 2D slices.

A four-stage conv backbone downsamples 16x to an S x S grid; each cell
predicts (objectness logit, cx, cy, w, h) where (cx, cy) are sigmoid
offsets inside the cell and (w, h) are softplus fractions of the image
size. One detection per slice: the max-objectness cell wins, ties broken
in row-major order. The resulting boxes are the machine prompt source.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ShapeError, ValidationError
from .promptnet import Box, init_conv_params, pad_to_multiple
from .volumes import composite_slice

DETECTOR_STRIDE = 16
BACKBONE_WIDTHS = (8, 16, 32, 32)


@dataclass(frozen=True)
class Detection:
    box: Box
    confidence: float


class LocalizerNet(nn.Module):
    """Backbone of [3x3 conv, ReLU, 2x maxpool] stages plus a 1x1 5-channel head.

    Input is the stacked modality slices (4 channels by default).
    """

    def __init__(self, in_channels: int = 4):
        super().__init__()
        self.in_channels = in_channels
        layers: list[nn.Module] = []
        prev = in_channels
        for w in BACKBONE_WIDTHS:
            layers += [nn.Conv2d(prev, w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            prev = w
        self.backbone = nn.Sequential(*layers)
        self.head = nn.Conv2d(prev, 5, 1)
        self.frozen: frozenset[str] = frozenset()

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def collections(self) -> dict[str, nn.Module]:
        return {"detector": self}

    def param_counts(self) -> dict[str, int]:
        return {"detector": sum(p.numel() for p in self.parameters())}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, S, S', 5) detection grids.

        Channel order: objectness logit, cx, cy (sigmoid, within-cell),
        w, h (softplus, fractions of image size).
        """
        raw = self.head(self.backbone(x))
        obj = raw[:, 0:1]
        cxy = torch.sigmoid(raw[:, 1:3])
        wh = torch.nn.functional.softplus(raw[:, 3:5])
        return torch.cat([obj, cxy, wh], dim=1).permute(0, 2, 3, 1)


def build_localizer(in_channels: int = 4, seed: int = 0,
                    dtype: torch.dtype = torch.float32) -> LocalizerNet:
    torch.manual_seed(seed)
    model = LocalizerNet(in_channels)
    init_conv_params(model)
    return model.to(dtype)


def localize_forward(model: LocalizerNet, slice_stack: np.ndarray) -> torch.Tensor:
    """Run the detector on one (C, H, W) slice stack; returns (S, S', 5)."""
    arr = np.asarray(slice_stack)
    if arr.ndim != 3 or arr.shape[0] != model.in_channels:
        raise ShapeError(
            f"expected ({model.in_channels}, H, W) slice stack, got {arr.shape}"
        )
    h, w = arr.shape[1:]
    if h % DETECTOR_STRIDE or w % DETECTOR_STRIDE:
        raise ShapeError(
            f"slice dims {(h, w)} must be multiples of {DETECTOR_STRIDE};"
            " pad with pad_to_multiple first"
        )
    t = torch.from_numpy(np.ascontiguousarray(arr)).to(model.dtype)
    with torch.no_grad():
        return model(t[None])[0]


def decode_detection(
    grid: torch.Tensor | np.ndarray,
    conf_threshold: float = 0.5,
    image_shape: tuple[int, int] | None = None,
) -> Detection | None:
    """Single-detection decode: max-objectness cell, thresholded.

    Returns None when the winning cell's sigmoid confidence is below the
    threshold (slice classified as tumor-free). Box rounding rule:
    x_min = round(center - w/2), x_max = round(center + w/2) - 1, then
    clip to the image.
    """
    g = grid.detach().numpy() if isinstance(grid, torch.Tensor) else np.asarray(grid)
    if g.ndim != 3 or g.shape[-1] != 5:
        raise ValidationError(f"detection grid must be (S, S', 5), got {g.shape}")
    rows, cols = g.shape[:2]
    if image_shape is None:
        image_shape = (rows * DETECTOR_STRIDE, cols * DETECTOR_STRIDE)
    h, w = image_shape

    flat = int(np.argmax(g[:, :, 0]))  # row-major first on ties
    row, col = divmod(flat, cols)
    obj = float(g[row, col, 0])
    conf = 1.0 / (1.0 + math.exp(-obj))
    if conf < conf_threshold:
        return None
    cx, cy, wf, hf = (float(v) for v in g[row, col, 1:])
    center_x = (col + cx) * DETECTOR_STRIDE
    center_y = (row + cy) * DETECTOR_STRIDE
    w_px = wf * w
    h_px = hf * h
    x_min = int(round(center_x - w_px / 2))
    x_max = int(round(center_x + w_px / 2)) - 1
    y_min = int(round(center_y - h_px / 2))
    y_max = int(round(center_y + h_px / 2)) - 1
    x_min = min(max(x_min, 0), w - 1)
    y_min = min(max(y_min, 0), h - 1)
    x_max = min(max(x_max, x_min), w - 1)
    y_max = min(max(y_max, y_min), h - 1)
    return Detection(box=Box(x_min, y_min, x_max, y_max), confidence=conf)


def box_from_labels(label_slice: np.ndarray, target: str = "wt") -> Box | None:
    """Tight inclusive bounding box of a composite region on one slice."""
    mask = composite_slice(np.asarray(label_slice), target)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return Box(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def full_brain_box(image_shape: tuple[int, int]) -> Box:
    """Box covering the whole slice: (0, 0, W-1, H-1)."""
    h, w = image_shape
    return Box(0, 0, w - 1, h - 1)


def box_iou(a: Box, b: Box) -> float:
    """IoU of two inclusive pixel boxes."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    inter = max(0, ix) * max(0, iy)
    union = a.width * a.height + b.width * b.height - inter
    return inter / union


def box_loss(pred: Box, truth: Box, image_shape: tuple[int, int]) -> float:
    """(1 - IoU) plus the L2 norm of image-normalized center offsets.

    Zero iff the boxes are identical; the IoU term alone reaches 1 for
    disjoint boxes.
    """
    h, w = image_shape
    pcx, pcy = pred.center()
    tcx, tcy = truth.center()
    center = math.hypot((pcx - tcx) / w, (pcy - tcy) / h)
    return (1.0 - box_iou(pred, truth)) + center


def detect_boxes(
    model: LocalizerNet,
    slice_stacks: np.ndarray,
    conf_threshold: float = 0.5,
) -> list[Detection | None]:
    """Batched decode over (N, C, H, W) slice stacks; one entry per slice.

    Slices are padded to the detector stride internally; decoded boxes
    are clipped to the original (H, W).
    """
    arr = np.asarray(slice_stacks)
    if arr.ndim != 4 or arr.shape[1] != model.in_channels:
        raise ShapeError(
            f"expected (N, {model.in_channels}, H, W) slice stacks, got {arr.shape}"
        )
    n, _, h, w = arr.shape
    padded = np.stack(
        [
            np.stack([pad_to_multiple(ch, DETECTOR_STRIDE)[0] for ch in stack])
            for stack in arr
        ]
    )
    t = torch.from_numpy(np.ascontiguousarray(padded)).to(model.dtype)
    with torch.no_grad():
        grids = model(t)
    return [decode_detection(grids[i], conf_threshold, (h, w)) for i in range(n)]
