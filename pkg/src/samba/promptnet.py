"""Miniature promptable slice-segmentation model.

Three stages mirror the classic promptable-segmentation layout: a small
convolutional image encoder (8x spatial downsampling, C_img channels), a
prompt encoder turning a box or point prompt into Fourier positional
tokens, and a lightweight upsampling decoder that mixes the two. The
decoder is conditioned on the prompt twice: the mean prompt token is
broadcast-concatenated to every feature location, and the prompt is
rasterized into an interior-indicator channel at feature resolution.

Coordinates follow (x = column, y = row); boxes are inclusive on both
corners; prompt coordinates are normalized to [0, 1] by (W-1) and (H-1).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError, ValidationError

ENCODER_WIDTHS = (16, 32, 64)
DECODER_WIDTHS = (32, 16, 8)
ENCODER_STRIDE = 8


@dataclass(frozen=True)
class Box:
    """Axis-aligned inclusive pixel box; corners are canonicalized to
    (min, max) order at construction."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        x0, x1 = sorted((int(self.x_min), int(self.x_max)))
        y0, y1 = sorted((int(self.y_min), int(self.y_max)))
        object.__setattr__(self, "x_min", x0)
        object.__setattr__(self, "x_max", x1)
        object.__setattr__(self, "y_min", y0)
        object.__setattr__(self, "y_max", y1)

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def shifted(self, dx: int, dy: int) -> "Box":
        return Box(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def in_bounds(self, image_shape: tuple[int, int]) -> bool:
        h, w = image_shape
        return 0 <= self.x_min and self.x_max < w and 0 <= self.y_min and self.y_max < h

    def validate(self, image_shape: tuple[int, int]) -> "Box":
        if not self.in_bounds(image_shape):
            raise ValidationError(f"box {self} out of bounds for image {image_shape}")
        return self

    def interior_mask(self, image_shape: tuple[int, int]) -> np.ndarray:
        """Boolean mask of the (inclusive) box interior."""
        mask = np.zeros(image_shape, dtype=bool)
        mask[self.y_min : self.y_max + 1, self.x_min : self.x_max + 1] = True
        return mask


@dataclass(frozen=True)
class PointPrompt:
    x: int
    y: int
    polarity: Literal["positive", "negative"] = "positive"

    def __post_init__(self):
        if self.polarity not in ("positive", "negative"):
            raise ValidationError(f"unknown point polarity {self.polarity!r}")

    def shifted(self, dx: int, dy: int) -> "PointPrompt":
        return PointPrompt(self.x + dx, self.y + dy, self.polarity)

    def in_bounds(self, image_shape: tuple[int, int]) -> bool:
        h, w = image_shape
        return 0 <= self.x < w and 0 <= self.y < h

    def validate(self, image_shape: tuple[int, int]) -> "PointPrompt":
        if not self.in_bounds(image_shape):
            raise ValidationError(f"point {self} out of bounds for image {image_shape}")
        return self


Prompt = Box | PointPrompt


def init_conv_params(module: nn.Module) -> None:
    """He-normal weights and zero biases for every conv layer.

    The default torch init shrinks activations badly through stacked
    3x3 convs; with a frozen random encoder that would leave the image
    pathway numerically negligible next to the prompt channels.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@dataclass(frozen=True)
class PromptEmbedding:
    """Prompt tokens plus the geometry needed to rasterize the indicator."""

    tokens: torch.Tensor  # (n_tokens, C)
    kind: Literal["box", "points"]
    box: Box | None
    points: tuple[PointPrompt, ...] | None
    image_shape: tuple[int, int]


def pad_to_multiple(slice2d: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Zero-pad bottom/right so both dims divide `multiple`.

    Returns (padded, original_shape); masks predicted on the padded frame
    are cropped back with the recorded shape.
    """
    h, w = slice2d.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return slice2d, (h, w)
    return np.pad(slice2d, ((0, ph), (0, pw))), (h, w)


class ImageEncoder(nn.Module):
    """Three conv stages, each [3x3 conv, ReLU, 3x3 conv, ReLU, 2x maxpool]."""

    def __init__(self, c_img: int, in_channels: int = 1):
        super().__init__()
        widths = (*ENCODER_WIDTHS[:-1], c_img)
        layers: list[nn.Module] = []
        prev = in_channels
        for w in widths:
            layers += [
                nn.Conv2d(prev, w, 3, padding=1),
                nn.ReLU(),
                nn.Conv2d(w, w, 3, padding=1),
                nn.ReLU(),
                nn.MaxPool2d(2),
            ]
            prev = w
        self.stages = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x)


class PromptEncoder(nn.Module):
    """Fourier positional encoding of normalized coordinates plus learned
    corner-type (box) or polarity (point) embeddings."""

    def __init__(self, c_img: int):
        super().__init__()
        if c_img % 2:
            raise ConfigError(f"c_img must be even for Fourier encoding, got {c_img}")
        self.c_img = c_img
        self.freq = nn.Parameter(torch.randn(c_img // 2, 2))
        self.corner_embed = nn.Parameter(torch.randn(2, c_img) * 0.1)
        self.point_embed = nn.Parameter(torch.randn(2, c_img) * 0.1)

    def _fourier(self, coords: torch.Tensor) -> torch.Tensor:
        # coords: (n, 2) normalized (x, y) in [0, 1]
        z = 2.0 * math.pi * coords @ self.freq.t()
        return torch.cat([torch.sin(z), torch.cos(z)], dim=-1)

    @staticmethod
    def _normalize(xy: list[tuple[float, float]], image_shape: tuple[int, int],
                   like: torch.Tensor) -> torch.Tensor:
        h, w = image_shape
        denom_x = max(w - 1, 1)
        denom_y = max(h - 1, 1)
        return torch.tensor(
            [(x / denom_x, y / denom_y) for x, y in xy],
            dtype=like.dtype,
            device=like.device,
        )

    def encode_box(self, box: Box, image_shape: tuple[int, int]) -> torch.Tensor:
        coords = self._normalize(
            [(box.x_min, box.y_min), (box.x_max, box.y_max)], image_shape, self.freq
        )
        return self._fourier(coords) + self.corner_embed

    def encode_points(self, points: tuple[PointPrompt, ...],
                      image_shape: tuple[int, int]) -> torch.Tensor:
        coords = self._normalize([(p.x, p.y) for p in points], image_shape, self.freq)
        which = torch.tensor([0 if p.polarity == "positive" else 1 for p in points])
        return self._fourier(coords) + self.point_embed[which]


class MaskDecoder(nn.Module):
    """Three [2x bilinear upsample, 3x3 conv, ReLU] stages plus a 1x1 head.

    Bilinear (not nearest) upsampling turns the fractional box-coverage
    values into spatial ramps, which is what lets the convs place mask
    edges at sub-cell positions.
    """

    def __init__(self, c_img: int, head_channels: int):
        super().__init__()
        in_ch = 2 * c_img + 1  # features + broadcast mean token + indicator
        layers: list[nn.Module] = []
        prev = in_ch
        for w in DECODER_WIDTHS:
            layers += [
                nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                nn.Conv2d(prev, w, 3, padding=1),
                nn.ReLU(),
            ]
            prev = w
        self.stages = nn.Sequential(*layers)
        self.head = nn.Conv2d(prev, head_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.stages(x))


COLLECTION_NAMES = ("encoder", "prompt", "decoder")


class PromptModel(nn.Module):
    """Promptable segmenter with named parameter collections and a frozen set.

    ``n_output_classes`` is 1 (binary foreground) or 3 (tumor classes);
    the multi-class head carries an explicit background channel, so its
    output has 4 channels ordered (background, NETC, SNFH, ET) to match
    the label codes 0..3.
    """

    def __init__(self, c_img: int = 64, n_output_classes: int = 1, in_channels: int = 1):
        super().__init__()
        if n_output_classes not in (1, 3):
            raise ConfigError(f"n_output_classes must be 1 or 3, got {n_output_classes}")
        self.c_img = c_img
        self.n_output_classes = n_output_classes
        self.in_channels = in_channels
        self.image_encoder = ImageEncoder(c_img, in_channels)
        self.prompt_encoder = PromptEncoder(c_img)
        self.mask_decoder = MaskDecoder(c_img, self.head_channels)
        self.frozen: frozenset[str] = frozenset()

    @property
    def head_channels(self) -> int:
        return 1 if self.n_output_classes == 1 else 4

    @property
    def dtype(self) -> torch.dtype:
        return self.prompt_encoder.freq.dtype

    def collections(self) -> dict[str, nn.Module]:
        return {
            "encoder": self.image_encoder,
            "prompt": self.prompt_encoder,
            "decoder": self.mask_decoder,
        }

    def param_counts(self) -> dict[str, int]:
        return {
            name: sum(p.numel() for p in mod.parameters())
            for name, mod in self.collections().items()
        }

    def freeze(self, components: set[str]) -> "PromptModel":
        """Mark collections frozen; their parameters stop receiving grads."""
        bad = set(components) - set(COLLECTION_NAMES)
        if bad:
            raise ConfigError(f"unknown collections {sorted(bad)}; valid: {COLLECTION_NAMES}")
        self.frozen = frozenset(components)
        for name, mod in self.collections().items():
            req = name not in self.frozen
            for p in mod.parameters():
                p.requires_grad_(req)
        return self

    # -- stage 1: image encoding -------------------------------------------

    def encode_image(self, slice2d: np.ndarray | torch.Tensor) -> torch.Tensor:
        """Encode one 2D slice into a (C, H/8, W/8) feature grid."""
        t = self._to_tensor(slice2d)
        h, w = t.shape
        if h % ENCODER_STRIDE or w % ENCODER_STRIDE:
            raise ShapeError(
                f"slice dims {(h, w)} must be multiples of {ENCODER_STRIDE};"
                " pad with pad_to_multiple first"
            )
        ctx = torch.no_grad() if "encoder" in self.frozen else contextlib.nullcontext()
        with ctx:
            feats = self.image_encoder(t[None, None])[0]
        return feats

    def _to_tensor(self, slice2d: np.ndarray | torch.Tensor) -> torch.Tensor:
        if isinstance(slice2d, torch.Tensor):
            t = slice2d.to(self.dtype)
        else:
            t = torch.from_numpy(np.ascontiguousarray(slice2d)).to(self.dtype)
        if t.ndim != 2:
            raise ShapeError(f"expected a 2D slice, got shape {tuple(t.shape)}")
        if not torch.isfinite(t).all():
            raise ValidationError("slice contains non-finite values")
        return t

    # -- stage 2: prompt encoding ------------------------------------------

    def encode_prompt(self, prompt: Prompt, image_shape: tuple[int, int]) -> PromptEmbedding:
        """Turn a box or point prompt into tokens plus raster geometry."""
        if isinstance(prompt, Box):
            prompt.validate(image_shape)
            tokens = self.prompt_encoder.encode_box(prompt, image_shape)
            return PromptEmbedding(tokens, "box", prompt, None, image_shape)
        if isinstance(prompt, PointPrompt):
            prompt.validate(image_shape)
            tokens = self.prompt_encoder.encode_points((prompt,), image_shape)
            return PromptEmbedding(tokens, "points", None, (prompt,), image_shape)
        raise ValidationError(f"unsupported prompt type {type(prompt).__name__}")

    def _indicator(self, emb: PromptEmbedding, feat_hw: tuple[int, int]) -> torch.Tensor:
        """Prompt-interior indicator at feature resolution.

        Box cells hold the signed distance from the cell center to the
        box boundary (positive inside), in units of the encoder stride
        and clamped to [-2, 2]. The field is linear in position near the
        boundary, so the decoder's bilinear upsampling reconstructs the
        box edge at sub-cell precision. Point cells hold the signed
        polarity.
        """
        fh, fw = feat_hw
        s = ENCODER_STRIDE
        if emb.kind == "box":
            b = emb.box
            # pixel coordinates of cell centers
            cy = torch.arange(fh, dtype=self.dtype) * s + (s - 1) / 2.0
            cx = torch.arange(fw, dtype=self.dtype) * s + (s - 1) / 2.0
            # distance to each box edge; the box covers [min-0.5, max+0.5]
            dy = torch.minimum(cy - (b.y_min - 0.5), (b.y_max + 0.5) - cy)
            dx = torch.minimum(cx - (b.x_min - 0.5), (b.x_max + 0.5) - cx)
            dist = torch.minimum(dy[:, None], dx[None, :]) / s
            return dist.clamp(-2.0, 2.0)[None]
        ind = torch.zeros(1, fh, fw, dtype=self.dtype)
        for p in emb.points:
            ind[0, p.y // s, p.x // s] += 1.0 if p.polarity == "positive" else -1.0
        ind.clamp_(-1.0, 1.0)
        return ind

    # -- stage 3: mask decoding --------------------------------------------

    def decoder_input(self, features: torch.Tensor, emb: PromptEmbedding) -> torch.Tensor:
        """Assemble (2C+1, h, w) decoder input for one slice."""
        c, fh, fw = features.shape
        if c != self.c_img:
            raise ShapeError(f"feature grid has {c} channels, model expects {self.c_img}")
        mean_tok = emb.tokens.mean(dim=0)
        broadcast = mean_tok[:, None, None].expand(c, fh, fw)
        return torch.cat([features, broadcast, self._indicator(emb, (fh, fw))], dim=0)

    def decode_logits(self, decoder_in: torch.Tensor) -> torch.Tensor:
        """Decoder forward on a (B, 2C+1, h, w) batch; returns logits."""
        return self.mask_decoder(decoder_in)

    def decode_mask(self, features: torch.Tensor, emb: PromptEmbedding) -> torch.Tensor:
        """Per-pixel probabilities (head_channels, H, W) at input resolution."""
        logits = self.decode_logits(self.decoder_input(features, emb)[None])[0]
        return self.probabilities(logits)

    def probabilities(self, logits: torch.Tensor) -> torch.Tensor:
        """Sigmoid (binary) or channelwise softmax (multi-class) of logits."""
        if self.head_channels == 1:
            return torch.sigmoid(logits)
        return torch.softmax(logits, dim=-3)

    def forward(self, slice2d: np.ndarray | torch.Tensor, prompt: Prompt) -> torch.Tensor:
        """Full three-stage composition on an already /8-aligned slice."""
        t = self._to_tensor(slice2d)
        features = self.encode_image(t)
        emb = self.encode_prompt(prompt, tuple(t.shape))
        return self.decode_mask(features, emb)


def build_prompt_model(
    c_img: int = 64,
    n_output_classes: int = 1,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> PromptModel:
    """Construct a freshly initialized model; deterministic per seed."""
    torch.manual_seed(seed)
    model = PromptModel(c_img=c_img, n_output_classes=n_output_classes)
    init_conv_params(model)
    return model.to(dtype)


def _predict_probs(model: PromptModel, slice2d: np.ndarray, prompt: Prompt) -> np.ndarray:
    """Pad, run the model, crop; returns (head_channels, H, W) float array."""
    padded, (h, w) = pad_to_multiple(np.asarray(slice2d), ENCODER_STRIDE)
    with torch.no_grad():
        probs = model(padded, prompt)
    return probs[:, :h, :w].numpy()


def predict_binary_probs(model: PromptModel, slice2d: np.ndarray, prompt: Prompt) -> np.ndarray:
    """Foreground probability map (H, W) from a binary-head model."""
    if model.head_channels != 1:
        raise ConfigError("predict_binary_probs requires a binary-head model")
    return _predict_probs(model, slice2d, prompt)[0]

def predict_binary(
    model: PromptModel,
    slice2d: np.ndarray,
    prompt: Prompt,
    threshold: float = 0.5,
) -> np.ndarray:
    """Boolean foreground mask; strictly-greater-than-threshold rule."""
    return predict_binary_probs(model, slice2d, prompt) > threshold


def predict_multiclass(model: PromptModel, slice2d: np.ndarray, prompt: Prompt) -> np.ndarray:
    """Label slice in {0..3}; softmax ties resolve to the lower class code."""
    if model.head_channels != 4:
        raise ConfigError("predict_multiclass requires a multi-class-head model")
    probs = _predict_probs(model, slice2d, prompt)
    return np.argmax(probs, axis=0).astype(np.uint8)


def forward_batch(
    model: PromptModel,
    slices: np.ndarray,
    prompts: list[Prompt | None],
) -> np.ndarray:
    """Probability maps for a stack of same-shaped slices with per-slice prompts.

    Returns (n, head_channels, H, W). A slice whose prompt is None gets the
    no-detection output: all-zero foreground for the binary head, certain
    background for the multi-class head.
    """
    arr = np.asarray(slices)
    if arr.ndim != 3:
        raise ShapeError(f"expected (n, H, W) slice stack, got {arr.shape}")
    if len(prompts) != arr.shape[0]:
        raise ValidationError(
            f"{len(prompts)} prompts for {arr.shape[0]} slices"
        )
    n, h, w = arr.shape
    out = np.zeros((n, model.head_channels, h, w), dtype=np.float32)
    if model.head_channels == 4:
        out[:, 0] = 1.0
    live = [i for i, p in enumerate(prompts) if p is not None]
    if not live:
        return out
    padded0, _ = pad_to_multiple(arr[0], ENCODER_STRIDE)
    ph, pw = padded0.shape
    batch = torch.empty(len(live), 1, ph, pw, dtype=model.dtype)
    for j, i in enumerate(live):
        batch[j, 0] = torch.from_numpy(pad_to_multiple(arr[i], ENCODER_STRIDE)[0]).to(model.dtype)
    with torch.no_grad():
        feats = model.image_encoder(batch)
        dec_in = torch.stack(
            [
                model.decoder_input(feats[j], model.encode_prompt(prompts[i], (ph, pw)))
                for j, i in enumerate(live)
            ]
        )
        probs = model.probabilities(model.decode_logits(dec_in))
    out[live] = probs[:, :, :h, :w].numpy()
    return out
