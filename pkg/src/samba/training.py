"""Losses, Adam training loops for the three model stages, gradient checking.

The decoder fine-tune is the central recipe: image and prompt encoders
stay frozen (bit-identical before/after) while only the mask decoder
learns. All loops are deterministic given (config, seed, dataset): batch
shuffling derives its RNG from (seed, epoch) and nothing else draws
randomness.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import collection_digests
from .errors import ConfigError, ShapeError, ValidationError
from .localizer import (
    DETECTOR_STRIDE,
    LocalizerNet,
    box_from_labels,
    box_loss,
    decode_detection,
)
from .phantom import DatasetSplit
from .promptnet import Box, ENCODER_STRIDE, PromptModel, pad_to_multiple
from .volumes import MODALITY_NAMES, Case, ViewAxis, composite_regions
from .voting import VoteNet, assemble_votes

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
PROB_CLAMP = 1e-7
DICE_EPS = 1.0

DEFAULT_EPOCHS = {
    "samba_binary": 15,
    "samba_multiclass": 50,
    "localizer": 150,
    "voting": 30,
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    allow_unfrozen: bool = False
    conf_threshold: float = 0.5  # localizer prompt-source threshold

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val: dict[str, float]
    wall_clock_s: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    initial_val: dict[str, float] = field(default_factory=dict)
    param_digests: dict[str, str] = field(default_factory=dict)

    def to_jsonl(self) -> str:
        import json

        lines = [json.dumps({"type": "initial", "val": self.initial_val}, sort_keys=True)]
        for r in self.records:
            lines.append(
                json.dumps(
                    {
                        "type": "epoch",
                        "epoch": r.epoch,
                        "train_loss": r.train_loss,
                        "val": r.val,
                        "wall_clock_s": r.wall_clock_s,
                    },
                    sort_keys=True,
                )
            )
        lines.append(
            json.dumps({"type": "digests", "collections": self.param_digests}, sort_keys=True)
        )
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _flatten_spatial(t: torch.Tensor) -> torch.Tensor:
    return t.reshape(*t.shape[:-2], -1)


def dice_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Soft Dice loss 1 - (2*sum(p*t)+eps)/(sum p + sum t + eps), eps=1.

    Accepts (H, W), (B, H, W) or multi-class (B, C, H, W) with a one-hot
    target, in which case the mean over non-background channels (1..C-1)
    and over the batch is returned.
    """
    if probs.shape != target.shape:
        raise ShapeError(f"dice_loss shapes differ: {tuple(probs.shape)} vs {tuple(target.shape)}")
    if probs.ndim == 4:
        probs = probs[:, 1:]
        target = target[:, 1:]
    p = _flatten_spatial(probs)
    t = _flatten_spatial(target)
    inter = (p * t).sum(dim=-1)
    denom = p.sum(dim=-1) + t.sum(dim=-1)
    return (1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)).mean()


def bce_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Cross-entropy on probabilities, clamped to [1e-7, 1-1e-7] before log.

    Binary shapes use the two-term form averaged over pixels; a 4D
    (B, C, H, W) input is treated as a categorical distribution with a
    one-hot target (mean over pixels of -log p_true).
    """
    if probs.shape != target.shape:
        raise ShapeError(f"bce_loss shapes differ: {tuple(probs.shape)} vs {tuple(target.shape)}")
    p = probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    if probs.ndim == 4:
        return -(target * torch.log(p)).sum(dim=1).mean()
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def combined_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Default fine-tuning loss: soft Dice plus cross-entropy."""
    return dice_loss(probs, target) + bce_loss(probs, target)


def one_hot_labels(labels: torch.Tensor, n_classes: int = 4) -> torch.Tensor:
    """(B, H, W) integer labels -> (B, C, H, W) one-hot float."""
    return F.one_hot(labels.long(), n_classes).permute(0, 3, 1, 2).to(torch.get_default_dtype())


# ---------------------------------------------------------------------------
# Decoder fine-tuning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _SliceSample:
    case_index: int
    modality: str
    slice_index: int
    box: Box


def decoder_training_loss(
    model: PromptModel,
    slices: np.ndarray,
    prompts: list[Box],
    targets: np.ndarray,
) -> torch.Tensor:
    """The exact fine-tuning loss on a batch, via the live forward path.

    ``targets`` is (B, H, W): float foreground masks for a binary head,
    integer class labels for a multi-class head. Used both by the train
    loop (through the cached-feature fast path, same math) and by the
    gradient checker.
    """
    arr = np.asarray(slices)
    batch = torch.stack([model._to_tensor(s) for s in arr])[:, None]
    feats = model.image_encoder(batch)
    if "encoder" in model.frozen:
        feats = feats.detach()
    h, w = arr.shape[1:]
    dec_in = torch.stack(
        [
            model.decoder_input(feats[i], model.encode_prompt(prompts[i], (h, w)))
            for i in range(len(prompts))
        ]
    )
    logits = model.decode_logits(dec_in)
    return _loss_from_logits(model, logits, targets)


def _loss_from_logits(model: PromptModel, logits: torch.Tensor, targets: np.ndarray) -> torch.Tensor:
    if model.head_channels == 1:
        probs = torch.sigmoid(logits[:, 0])
        t = torch.as_tensor(np.asarray(targets), dtype=probs.dtype)
        return combined_loss(probs, t)
    probs = torch.softmax(logits, dim=1)
    labels = torch.as_tensor(np.asarray(targets)).long()
    onehot = one_hot_labels(labels).to(probs.dtype)
    return dice_loss(probs, onehot) + bce_loss(probs, onehot)


def _decoder_samples(cases: list[Case], prompt_source) -> list[_SliceSample]:
    """One sample per (case, modality, axial slice) that has a prompt.

    Which slices participate is entirely the prompt source's call: truth
    boxes exist only on tumor-bearing slices (healthy ones are skipped),
    full-brain boxes exist everywhere, and detector boxes keep every
    fired slice, so detector false positives on healthy slices train the
    decoder as negatives while its misses drop out.
    """
    samples: list[_SliceSample] = []
    for ci, case in enumerate(cases):
        boxes = prompt_source.boxes(case, ViewAxis.AXIAL)
        for k, box in enumerate(boxes):
            if box is None:
                continue
            for m in MODALITY_NAMES:
                samples.append(_SliceSample(ci, m, k, box))
    return samples


class _FeatureCache:
    """Frozen-encoder features per (case, modality), computed once."""

    def __init__(self, model: PromptModel, cases: list[Case]):
        self.model = model
        self.feats: dict[tuple[int, str], torch.Tensor] = {}
        self.pad_shape: tuple[int, int] | None = None
        for ci, case in enumerate(cases):
            for m in MODALITY_NAMES:
                vol = case.modalities[m]
                padded = np.stack([pad_to_multiple(sl, ENCODER_STRIDE)[0] for sl in vol])
                self.pad_shape = padded.shape[1:]
                t = torch.from_numpy(padded).to(model.dtype)[:, None]
                with torch.no_grad():
                    self.feats[(ci, m)] = model.image_encoder(t)

    def get(self, case_index: int, modality: str, slice_index: int) -> torch.Tensor:
        return self.feats[(case_index, modality)][slice_index]


def _decoder_batch_loss(
    model: PromptModel,
    cache: _FeatureCache,
    cases: list[Case],
    batch: list[_SliceSample],
    wt_slices: dict[int, np.ndarray],
) -> torch.Tensor:
    dec_in = []
    targets = []
    ph, pw = cache.pad_shape
    for s in batch:
        feats = cache.get(s.case_index, s.modality, s.slice_index)
        emb = model.encode_prompt(s.box, (ph, pw))
        dec_in.append(model.decoder_input(feats, emb))
        if model.head_channels == 1:
            targets.append(wt_slices[s.case_index][s.slice_index])
        else:
            targets.append(cases[s.case_index].labels[s.slice_index])
    logits = model.decode_logits(torch.stack(dec_in))
    target_arr = np.stack(targets)
    th, tw = target_arr.shape[1:]
    if (th, tw) != (ph, pw):
        pad = ((0, 0), (0, ph - th), (0, pw - tw))
        target_arr = np.pad(target_arr, pad)
    return _loss_from_logits(model, logits, target_arr)


def _decoder_val_metrics(
    model: PromptModel,
    cache: _FeatureCache,
    cases: list[Case],
    prompt_source,
    wt_slices: dict[int, np.ndarray],
) -> dict[str, float]:
    """Per-slice Dice on tumor-bearing axial val slices, meaned over modalities.

    Slices the prompt source leaves unprompted score 0 against their
    nonempty truth, so detector misses show up in the curve.
    """
    from .metrics import dice

    per_class: dict[str, list[float]] = {"wt": []}
    if model.head_channels == 4:
        per_class.update({"netc": [], "snfh": [], "et": []})
    ph, pw = cache.pad_shape
    n_mod = len(MODALITY_NAMES)
    with torch.no_grad():
        for ci, case in enumerate(cases):
            boxes = prompt_source.boxes(case, ViewAxis.AXIAL)
            for k in range(case.shape[0]):
                wt = wt_slices[ci][k]
                if not wt.any():
                    continue
                pred_labels = None
                if boxes[k] is None:
                    fg = [np.zeros_like(wt)] * n_mod
                else:
                    emb = model.encode_prompt(boxes[k], (ph, pw))
                    dec_in = torch.stack(
                        [
                            model.decoder_input(cache.get(ci, m, k), emb)
                            for m in MODALITY_NAMES
                        ]
                    )
                    probs = model.probabilities(model.decode_logits(dec_in))
                    probs = probs[:, :, : wt.shape[0], : wt.shape[1]].numpy()
                    if model.head_channels == 1:
                        fg = [probs[i, 0] > 0.5 for i in range(n_mod)]
                    else:
                        pred_labels = probs.argmax(axis=1).astype(np.uint8)
                        fg = [pred_labels[i] > 0 for i in range(n_mod)]
                per_class["wt"].append(float(np.mean([dice(f, wt) for f in fg])))
                if model.head_channels == 4:
                    for code, name in ((1, "netc"), (2, "snfh"), (3, "et")):
                        truth = case.labels[k] == code
                        if not truth.any():
                            continue
                        if pred_labels is None:
                            per_class[name].append(0.0)
                        else:
                            per_class[name].append(
                                float(
                                    np.mean(
                                        [
                                            dice(pred_labels[i] == code, truth)
                                            for i in range(n_mod)
                                        ]
                                    )
                                )
                            )
    return {k: float(np.mean(v)) if v else float("nan") for k, v in per_class.items()}


def train_decoder(
    model: PromptModel,
    data: DatasetSplit,
    prompt_source,
    cfg: TrainConfig,
    epoch_callback=None,
) -> tuple[PromptModel, TrainHistory]:
    """Decoder-only fine-tune; encoder and prompt collections must be frozen.

    Slice sampling: all axial slices of all train cases, one sample per
    modality, shuffled per epoch with a seed derived from (seed, epoch).
    Ground-truth box sources skip slices without a box; the detector
    source keeps every fired slice so its false positives train the
    decoder as negatives.
    """
    if not {"encoder", "prompt"} <= set(model.frozen) and not cfg.allow_unfrozen:
        raise ConfigError(
            "decoder fine-tuning requires frozen {encoder, prompt}"
            " (set allow_unfrozen to override)"
        )
    samples = _decoder_samples(data.train, prompt_source)
    if not samples and cfg.epochs > 0:
        raise ValidationError("no trainable slices: every prompt came back empty")

    cache = _FeatureCache(model, data.train)
    val_cache = _FeatureCache(model, data.val) if data.val else None
    wt_train = {
        ci: composite_regions(c.labels).wt for ci, c in enumerate(data.train)
    }
    wt_val = {ci: composite_regions(c.labels).wt for ci, c in enumerate(data.val)}

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)

    history = TrainHistory()
    if val_cache is not None:
        history.initial_val = _decoder_val_metrics(
            model, val_cache, data.val, prompt_source, wt_val
        )
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, epoch)))
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start : start + cfg.batch_size]]
            optimizer.zero_grad()
            loss = _decoder_batch_loss(model, cache, data.train, batch, wt_train)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        val = (
            _decoder_val_metrics(model, val_cache, data.val, prompt_source, wt_val)
            if val_cache is not None
            else {}
        )
        history.records.append(
            EpochRecord(epoch, float(np.mean(losses)), val, time.perf_counter() - t0)
        )
        if epoch_callback is not None:
            epoch_callback(model, epoch)
    history.param_digests = collection_digests(model)
    return model, history


# ---------------------------------------------------------------------------
# Localizer training
# ---------------------------------------------------------------------------


def _localizer_inputs(cases: list[Case]) -> tuple[torch.Tensor, list[Box | None], tuple[int, int]]:
    """Stacked, padded (N, 4, H', W') inputs plus per-slice truth WT boxes."""
    stacks = []
    boxes: list[Box | None] = []
    shape = None
    for case in cases:
        shape = case.shape[1:]
        for k in range(case.shape[0]):
            stacks.append(
                np.stack(
                    [
                        pad_to_multiple(case.modalities[m][k], DETECTOR_STRIDE)[0]
                        for m in MODALITY_NAMES
                    ]
                )
            )
            boxes.append(box_from_labels(case.labels[k], "wt"))
    return torch.from_numpy(np.stack(stacks)), boxes, shape


def localizer_training_loss(
    model: LocalizerNet,
    inputs: torch.Tensor,
    truth_boxes: list[Box | None],
    image_shape: tuple[int, int],
) -> torch.Tensor:
    """Objectness BCE over every cell plus continuous box loss at positive cells.

    The positive cell of a tumor slice is the one containing the truth
    WT-box center; all other cells, and every cell of healthy slices,
    carry objectness target 0.
    """
    grids = model(inputs.to(model.dtype))
    b, rows, cols, _ = grids.shape
    obj_target = torch.zeros(b, rows, cols, dtype=grids.dtype)
    box_terms = []
    h, w = image_shape
    for i, truth in enumerate(truth_boxes):
        if truth is None:
            continue
        tcx, tcy = truth.center()
        row = min(int(tcy // DETECTOR_STRIDE), rows - 1)
        col = min(int(tcx // DETECTOR_STRIDE), cols - 1)
        obj_target[i, row, col] = 1.0
        box_terms.append(
            _continuous_box_loss(grids[i, row, col, 1:], row, col, truth, (h, w))
        )
    loss = F.binary_cross_entropy_with_logits(grids[..., 0], obj_target)
    if box_terms:
        loss = loss + torch.stack(box_terms).mean()
    return loss


def _continuous_box_loss(
    cell_vals: torch.Tensor,
    row: int,
    col: int,
    truth: Box,
    image_shape: tuple[int, int],
) -> torch.Tensor:
    """Differentiable (1 - IoU) + normalized center distance for one cell."""
    h, w = image_shape
    cx = (col + cell_vals[0]) * DETECTOR_STRIDE
    cy = (row + cell_vals[1]) * DETECTOR_STRIDE
    w_px = cell_vals[2] * w
    h_px = cell_vals[3] * h
    x0, x1 = cx - w_px / 2, cx + w_px / 2
    y0, y1 = cy - h_px / 2, cy + h_px / 2
    tx0, tx1 = float(truth.x_min), float(truth.x_max + 1)
    ty0, ty1 = float(truth.y_min), float(truth.y_max + 1)
    iw = (torch.minimum(x1, torch.tensor(tx1)) - torch.maximum(x0, torch.tensor(tx0))).clamp(min=0)
    ih = (torch.minimum(y1, torch.tensor(ty1)) - torch.maximum(y0, torch.tensor(ty0))).clamp(min=0)
    inter = iw * ih
    union = w_px * h_px + (tx1 - tx0) * (ty1 - ty0) - inter
    iou = inter / union
    tcx, tcy = (tx0 + tx1) / 2, (ty0 + ty1) / 2
    # tiny epsilon keeps sqrt differentiable when the centers coincide
    center = torch.sqrt(((cx - tcx) / w) ** 2 + ((cy - tcy) / h) ** 2 + 1e-12)
    return (1.0 - iou) + center


def _localizer_val_metrics(
    model: LocalizerNet,
    inputs: torch.Tensor,
    truth_boxes: list[Box | None],
    image_shape: tuple[int, int],
    conf_threshold: float = 0.5,
) -> dict[str, float]:
    with torch.no_grad():
        grids = model(inputs.to(model.dtype))
    correct = 0
    confidences = []
    box_losses = []
    for i, truth in enumerate(truth_boxes):
        det = decode_detection(grids[i], conf_threshold, image_shape)
        if (det is not None) == (truth is not None):
            correct += 1
        if det is not None and truth is not None:
            confidences.append(det.confidence)
            box_losses.append(box_loss(det.box, truth, image_shape))
    n = len(truth_boxes)
    return {
        "accuracy": correct / n if n else float("nan"),
        "mean_confidence": float(np.mean(confidences)) if confidences else float("nan"),
        "mean_box_loss": float(np.mean(box_losses)) if box_losses else float("nan"),
    }


def train_localizer(
    model: LocalizerNet,
    data: DatasetSplit,
    cfg: TrainConfig,
    epoch_callback=None,
) -> tuple[LocalizerNet, TrainHistory]:
    """Train the detector on all axial slices (healthy ones as negatives)."""
    inputs, boxes, image_shape = _localizer_inputs(data.train)
    val_inputs, val_boxes, _ = (
        _localizer_inputs(data.val) if data.val else (None, None, None)
    )
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)

    history = TrainHistory()
    if val_inputs is not None:
        history.initial_val = _localizer_val_metrics(
            model, val_inputs, val_boxes, image_shape, cfg.conf_threshold
        )
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, epoch)))
        order = rng.permutation(len(boxes))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            optimizer.zero_grad()
            loss = localizer_training_loss(
                model, inputs[idx], [boxes[i] for i in idx], image_shape
            )
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        val = (
            _localizer_val_metrics(model, val_inputs, val_boxes, image_shape, cfg.conf_threshold)
            if val_inputs is not None
            else {}
        )
        history.records.append(
            EpochRecord(epoch, float(np.mean(losses)), val, time.perf_counter() - t0)
        )
        if epoch_callback is not None:
            epoch_callback(model, epoch)
    history.param_digests = collection_digests(model)
    return model, history


# ---------------------------------------------------------------------------
# Voting-network training
# ---------------------------------------------------------------------------


class ModelMaskSource:
    """Vote inputs produced by the trained binary segmenter."""

    def __init__(self, sam_model, prompt_source, modalities, views):
        self.sam_model = sam_model
        self.prompt_source = prompt_source
        self.modalities = tuple(modalities)
        self.views = tuple(views)

    @property
    def in_channels(self) -> int:
        return len(self.modalities) * len(self.views)

    def vote_input(self, case: Case) -> np.ndarray:
        return assemble_votes(
            case, self.sam_model, self.prompt_source, self.modalities, self.views
        )


class CorruptTruthMaskSource:
    """Ground-truth WT masks with independent per-voxel flips per channel.

    Isolation harness for the voter: the inputs already contain the
    answer up to i.i.d. corruption, so fused quality measures the voter
    alone. Deterministic per (seed, case id, channel).
    """

    def __init__(self, channels: int = 4, flip_prob: float = 0.1, seed: int = 0):
        if not (0.0 <= flip_prob < 1.0):
            raise ConfigError(f"flip_prob must be in [0,1), got {flip_prob}")
        self.channels = channels
        self.flip_prob = flip_prob
        self.seed = seed

    @property
    def in_channels(self) -> int:
        return self.channels

    def vote_input(self, case: Case) -> np.ndarray:
        wt = composite_regions(case.labels).wt
        chans = []
        for ch in range(self.channels):
            rng = np.random.default_rng(
                np.random.SeedSequence((self.seed, zlib.crc32(case.id.encode()), ch))
            )
            flips = rng.random(wt.shape) < self.flip_prob
            chans.append((wt ^ flips).astype(np.float32))
        return np.stack(chans)


def voting_training_loss(
    votenet: VoteNet, inputs: torch.Tensor, labels: torch.Tensor
) -> torch.Tensor:
    """Four-way voxel cross-entropy on (B, C, D, H, W) vote inputs."""
    logits = votenet(inputs.to(votenet.dtype))
    return F.cross_entropy(logits, labels.long())


def _voting_val_metrics(votenet: VoteNet, inputs: list[np.ndarray],
                        cases: list[Case]) -> dict[str, float]:
    from .metrics import dice
    from .voting import vote_forward

    scores = {"wt": [], "tc": [], "et": []}
    for vote_in, case in zip(inputs, cases):
        pred = np.argmax(vote_forward(votenet, vote_in), axis=0).astype(np.uint8)
        pred_comp = composite_regions(pred)
        truth_comp = composite_regions(case.labels)
        for name in scores:
            scores[name].append(dice(pred_comp.by_name(name), truth_comp.by_name(name)))
    return {k: float(np.mean(v)) if v else float("nan") for k, v in scores.items()}


def train_voting(
    votenet: VoteNet,
    data: DatasetSplit,
    mask_source,
    cfg: TrainConfig,
    epoch_callback=None,
) -> tuple[VoteNet, TrainHistory]:
    """Train the voter on whole volumes; vote inputs are built once up front."""
    if mask_source.in_channels != votenet.in_channels:
        raise ConfigError(
            f"mask source yields {mask_source.in_channels} channels,"
            f" votenet expects {votenet.in_channels}"
        )
    train_inputs = [mask_source.vote_input(c) for c in data.train]
    val_inputs = [mask_source.vote_input(c) for c in data.val]
    train_t = torch.from_numpy(np.stack(train_inputs))
    labels_t = torch.from_numpy(np.stack([c.labels for c in data.train]).astype(np.int64))

    params = [p for p in votenet.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)

    history = TrainHistory()
    if data.val:
        history.initial_val = _voting_val_metrics(votenet, val_inputs, data.val)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, epoch)))
        order = rng.permutation(len(train_inputs))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size].copy())
            optimizer.zero_grad()
            loss = voting_training_loss(votenet, train_t[idx], labels_t[idx])
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        val = _voting_val_metrics(votenet, val_inputs, data.val) if data.val else {}
        history.records.append(
            EpochRecord(epoch, float(np.mean(losses)), val, time.perf_counter() - t0)
        )
        if epoch_callback is not None:
            epoch_callback(votenet, epoch)
    history.param_digests = collection_digests(votenet)
    return votenet, history


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    n_checked: int
    tolerance: float
    passed: bool


def gradient_check(
    loss_fn,
    params: dict[str, torch.Tensor],
    tolerance: float = 1e-4,
    n_samples: int = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients against central finite differences.

    ``loss_fn`` must be a zero-argument callable returning a scalar loss
    built from ``params``; every tensor must be float64 and trainable
    (frozen collections are excluded by construction of the dict). A
    random subset of n_samples scalar coordinates is probed with step
    1e-6 * max(1, |theta|); the relative error uses a 1e-6 floor in the
    denominator so exact-zero gradients compare cleanly.
    """
    if not params:
        raise ValidationError("gradient_check needs at least one parameter tensor")
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise ConfigError(f"gradient_check requires float64 params; {name} is {p.dtype}")
        if not p.requires_grad:
            raise ConfigError(f"parameter {name} does not require grad")

    loss = loss_fn()
    if not torch.isfinite(loss):
        raise ValidationError(f"loss is non-finite: {float(loss)}")
    tensors = list(params.values())
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    analytic = [
        torch.zeros_like(t) if g is None else g for t, g in zip(tensors, analytic)
    ]

    sizes = [t.numel() for t in tensors]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    if total <= n_samples:
        coords = np.arange(total)
    else:
        coords = rng.choice(total, size=n_samples, replace=False)

    names = list(params.keys())
    offsets = np.cumsum([0] + sizes)
    max_rel = 0.0
    worst = names[0]
    for flat in sorted(int(c) for c in coords):
        ti = int(np.searchsorted(offsets, flat, side="right")) - 1
        local = flat - offsets[ti]
        t = tensors[ti]
        orig = t.detach().reshape(-1)[local].item()
        h = 1e-6 * max(1.0, abs(orig))
        with torch.no_grad():
            t.reshape(-1)[local] = orig + h
            f_plus = float(loss_fn())
            t.reshape(-1)[local] = orig - h
            f_minus = float(loss_fn())
            t.reshape(-1)[local] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[ti].reshape(-1)[local])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        if rel > max_rel:
            max_rel = rel
            worst = f"{names[ti]}[{local}]"
    return GradCheckReport(
        max_rel_error=max_rel,
        worst_param=worst,
        n_checked=len(coords),
        tolerance=tolerance,
        passed=max_rel < tolerance,
    )
