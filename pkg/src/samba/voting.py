"""3D voting network and fusion of per-modality binary mask volumes.

The voter is a small two-downsample 3D U-Net (about 200k parameters)
that maps stacked per-modality (and optionally per-view) foreground
probability volumes to a 4-class segmentation. A rule-based majority
vote over the same channels serves as the non-learned baseline.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError, ValidationError
from .promptnet import PromptModel, forward_batch, init_conv_params
from .volumes import Case, ViewAxis, extract_slices, reassemble

VOTE_WIDTHS = (12, 24, 48)
PARAM_BUDGET = (150_000, 250_000)
DEFAULT_MODALITIES = ("flair", "t1", "t2", "t1ce")
DEFAULT_VIEWS = (ViewAxis.AXIAL,)


def _double_conv(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, 3, padding=1),
        nn.ReLU(),
        nn.Conv3d(out_ch, out_ch, 3, padding=1),
        nn.ReLU(),
    )


class VoteNet(nn.Module):
    """Two-level 3D U-Net with skip concatenation and a 1x1x1 4-class head.

    Construction fails unless the total parameter count lands inside
    PARAM_BUDGET, keeping the voter deliberately lightweight.
    """

    def __init__(self, in_channels: int = 4):
        super().__init__()
        w1, w2, w3 = VOTE_WIDTHS
        self.in_channels = in_channels
        self.enc1 = _double_conv(in_channels, w1)
        self.enc2 = _double_conv(w1, w2)
        self.bottleneck = _double_conv(w2, w3)
        self.dec2 = _double_conv(w3 + w2, w2)
        self.dec1 = _double_conv(w2 + w1, w1)
        self.head = nn.Conv3d(w1, 4, 1)
        self.pool = nn.MaxPool3d(2)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.frozen: frozenset[str] = frozenset()

        count = self.param_counts()["votenet"]
        if not (PARAM_BUDGET[0] <= count <= PARAM_BUDGET[1]):
            raise ConfigError(
                f"votenet has {count} parameters, outside budget {PARAM_BUDGET}"
            )

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def collections(self) -> dict[str, nn.Module]:
        return {"votenet": self}

    def param_counts(self) -> dict[str, int]:
        return {"votenet": sum(p.numel() for p in self.parameters())}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, D, H, W) -> (B, 4, D, H, W) logits; dims must divide 4."""
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        b = self.bottleneck(self.pool(e2))
        d2 = self.dec2(torch.cat([self.up(b), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up(d2), e1], dim=1))
        return self.head(d1)


def build_votenet(in_channels: int = 4, seed: int = 0,
                  dtype: torch.dtype = torch.float32) -> VoteNet:
    torch.manual_seed(seed)
    model = VoteNet(in_channels)
    init_conv_params(model)
    return model.to(dtype)


def _pad_to_multiple_3d(vol: np.ndarray, k: int) -> tuple[np.ndarray, tuple[int, int, int]]:
    shape = vol.shape[-3:]
    pads = [(-s) % k for s in shape]
    if not any(pads):
        return vol, shape
    pad_width = [(0, 0)] * (vol.ndim - 3) + [(0, p) for p in pads]
    return np.pad(vol, pad_width), shape


def vote_forward(votenet: VoteNet, vote_input: np.ndarray) -> np.ndarray:
    """Per-voxel class probabilities (4, D, H, W) over {bg, NETC, SNFH, ET}.

    The input is zero-padded to multiples of 4 internally and the output
    cropped back, so any volume shape is accepted.
    """
    arr = np.asarray(vote_input, dtype=np.float32)
    if arr.ndim != 4:
        raise ShapeError(f"vote input must be (C, D, H, W), got {arr.shape}")
    if arr.shape[0] != votenet.in_channels:
        raise ConfigError(
            f"vote input has {arr.shape[0]} channels, votenet expects"
            f" {votenet.in_channels}"
        )
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError("vote input values must lie in [0, 1]")
    padded, (d, h, w) = _pad_to_multiple_3d(arr, 4)
    t = torch.from_numpy(np.ascontiguousarray(padded)).to(votenet.dtype)
    with torch.no_grad():
        logits = votenet(t[None])[0]
        probs = torch.softmax(logits, dim=0)
    return probs[:, :d, :h, :w].numpy()


def majority_vote(vote_input: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Voxelwise majority over channels: foreground iff strictly more than
    half the channels exceed the threshold (ties go to background)."""
    arr = np.asarray(vote_input)
    if arr.ndim != 4:
        raise ShapeError(f"vote input must be (C, D, H, W), got {arr.shape}")
    votes = (arr > threshold).sum(axis=0)
    return votes > arr.shape[0] / 2.0


def assemble_votes(
    case: Case,
    sam_model: PromptModel,
    prompt_source,
    modalities: tuple[str, ...] = DEFAULT_MODALITIES,
    views: tuple[ViewAxis, ...] = DEFAULT_VIEWS,
) -> np.ndarray:
    """Stack per-(modality, view) foreground probability volumes.

    Channel order is modality-major, view-minor and is part of the
    trained voter's contract. Slices without a prompt contribute zero
    probability. Returns (len(modalities) * len(views), D, H, W) float32.
    """
    if sam_model.head_channels != 1:
        raise ConfigError("assemble_votes requires a binary-head model")
    missing = [m for m in modalities if m not in case.modalities]
    if missing:
        raise ValidationError(f"case {case.id!r} lacks modalities {missing}")
    boxes_per_view = {view: prompt_source.boxes(case, view) for view in views}
    channels = []
    for m in modalities:
        for view in views:
            slices = extract_slices(case.modalities[m], view)
            probs = forward_batch(sam_model, np.stack(slices), boxes_per_view[view])
            channels.append(reassemble(list(probs[:, 0]), view))
    return np.stack(channels).astype(np.float32)


def fuse_case(
    case: Case,
    sam_model: PromptModel,
    votenet: VoteNet,
    prompt_source,
    modalities: tuple[str, ...] = DEFAULT_MODALITIES,
    views: tuple[ViewAxis, ...] = DEFAULT_VIEWS,
) -> np.ndarray:
    """End-to-end fusion: assemble votes, run the voter, take the argmax."""
    votes = assemble_votes(case, sam_model, prompt_source, modalities, views)
    probs = vote_forward(votenet, votes)
    return np.argmax(probs, axis=0).astype(np.uint8)
