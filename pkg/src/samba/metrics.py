"""Evaluation: Dice/IoU, prompt-shift sensitivity, detector metrics, reports.

Empty-vs-empty mask pairs score 1.0 for both Dice and IoU: correctly
predicting absence on a healthy slice is rewarded, which materially
affects aggregate scores and is therefore fixed here once.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .localizer import Detection, LocalizerNet, box_from_labels, detect_boxes, box_loss
from .promptnet import (
    Box,
    PointPrompt,
    PromptModel,
    Prompt,
    forward_batch,
    predict_binary,
    predict_multiclass,
)
from .prompts import make_prompt_source
from .volumes import (
    MODALITY_NAMES,
    Case,
    ViewAxis,
    composite_regions,
    extract_slices,
    reassemble,
)
from .voting import (
    DEFAULT_MODALITIES,
    DEFAULT_VIEWS,
    VoteNet,
    assemble_votes,
    majority_vote,
    vote_forward,
)

COMPOSITE_KEYS = ("et", "tc", "wt")
CLASS_KEYS = ("netc", "snfh", "et")


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A&B| / (|A|+|B|); two empty masks agree perfectly and score 1."""
    a, b = _check_pair(a, b)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """|A&B| / |A|B|union; two empty masks score 1."""
    a, b = _check_pair(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


# ---------------------------------------------------------------------------
# Prompt sensitivity
# ---------------------------------------------------------------------------

UNIT_SHIFTS = ((1, 0), (-1, 0), (0, 1), (0, -1))


@dataclass
class SensitivityReport:
    per_shift: dict[str, float]
    min_iou: float
    mean_iou: float
    skipped: list[str] = field(default_factory=list)


def binary_mask_predictor(model: PromptModel, threshold: float = 0.5):
    """Adapter turning a model into the (slice, prompt) -> mask callable
    that prompt_sensitivity consumes; works for both head types."""
    if model.head_channels == 1:
        return lambda sl, p: predict_binary(model, sl, p, threshold)
    return lambda sl, p: predict_multiclass(model, sl, p) > 0


def prompt_sensitivity(
    predict,
    slice2d: np.ndarray,
    prompt: Prompt,
    shifts: tuple[tuple[int, int], ...] = UNIT_SHIFTS,
) -> SensitivityReport:
    """IoU between the mask of a prompt and of its one-pixel shifts.

    ``predict`` is any (slice, prompt) -> boolean-mask callable (see
    binary_mask_predictor). The whole box, or the point, is shifted by
    each (dx, dy); shifts leaving the image are skipped and recorded.
    An IoU near 1 for every shift means the prompt is non-sensitive.
    """
    image_shape = np.asarray(slice2d).shape
    if isinstance(prompt, (Box, PointPrompt)):
        prompt.validate(image_shape)
    base = predict(slice2d, prompt)
    per_shift: dict[str, float] = {}
    skipped: list[str] = []
    for dx, dy in shifts:
        key = f"dx={dx},dy={dy}"
        shifted = prompt.shifted(dx, dy)
        if not shifted.in_bounds(image_shape):
            skipped.append(key)
            continue
        per_shift[key] = iou(base, predict(slice2d, shifted))
    if not per_shift:
        raise ValidationError("every shifted prompt fell out of bounds")
    values = list(per_shift.values())
    return SensitivityReport(
        per_shift=per_shift,
        min_iou=min(values),
        mean_iou=float(np.mean(values)),
        skipped=skipped,
    )


# ---------------------------------------------------------------------------
# Localization metrics
# ---------------------------------------------------------------------------


def localization_metrics(
    detections: list[Detection | None],
    truth_boxes: list[Box | None],
    image_shape: tuple[int, int],
) -> dict[str, float]:
    """Slice accuracy plus confidence / box loss over true positives.

    Accuracy counts slices where detection presence matches tumor
    presence; confidence and box loss average over slices where both a
    detection and a truth box exist.
    """
    if len(detections) != len(truth_boxes):
        raise ValidationError(
            f"{len(detections)} detections vs {len(truth_boxes)} truth slices"
        )
    correct = 0
    confs: list[float] = []
    losses: list[float] = []
    for det, truth in zip(detections, truth_boxes):
        if (det is not None) == (truth is not None):
            correct += 1
        if det is not None and truth is not None:
            confs.append(det.confidence)
            losses.append(box_loss(det.box, truth, image_shape))
    n = len(detections)
    return {
        "accuracy": correct / n if n else float("nan"),
        "mean_confidence": float(np.mean(confs)) if confs else float("nan"),
        "mean_box_loss": float(np.mean(losses)) if losses else float("nan"),
    }


# ---------------------------------------------------------------------------
# Dataset evaluation
# ---------------------------------------------------------------------------

MODES = ("binary", "multiclass")
FUSIONS = ("none", "votenet", "majority")


@dataclass(frozen=True)
class Condition:
    """One evaluation row: model head, prompt source, fusion strategy."""

    mode: str
    prompt_source: str
    fusion: str = "none"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; valid: {MODES}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}; valid: {FUSIONS}")
        if self.mode == "multiclass" and self.fusion != "none":
            raise ConfigError(
                "fusion operates on binary-head mask volumes; use mode='binary'"
            )

    @property
    def label(self) -> str:
        src = {
            "truth_box": "tumor box (truth)",
            "full_brain_box": "full brain box",
            "localizer": "tumor box (localizer)",
        }[self.prompt_source]
        return f"{self.mode}, {src}, fusion={self.fusion}"

    @property
    def slug(self) -> str:
        return f"{self.mode}_{self.prompt_source}_{self.fusion}"


@dataclass
class Pipeline:
    """Trained components needed by some subset of conditions."""

    binary: PromptModel | None = None
    multiclass: PromptModel | None = None
    localizer: LocalizerNet | None = None
    votenet: VoteNet | None = None
    modalities: tuple[str, ...] = DEFAULT_MODALITIES
    views: tuple[ViewAxis, ...] = DEFAULT_VIEWS
    conf_threshold: float = 0.5

    def prompt_source_for(self, condition: Condition):
        return make_prompt_source(
            condition.prompt_source, self.localizer, self.conf_threshold
        )

    def predict_case(self, case: Case, condition: Condition) -> list[dict[str, np.ndarray]]:
        """Per-member predictions; fusion-free conditions yield one member
        per modality whose scores are averaged."""
        source = self.prompt_source_for(condition)
        if condition.mode == "binary":
            if self.binary is None:
                raise ConfigError("condition needs a trained binary model")
            if condition.fusion == "none":
                return [
                    {"wt": _predict_binary_volume(self.binary, case, m, source)}
                    for m in self.modalities
                ]
            votes = assemble_votes(case, self.binary, source, self.modalities, self.views)
            if condition.fusion == "majority":
                return [{"wt": majority_vote(votes)}]
            if self.votenet is None:
                raise ConfigError("fusion='votenet' needs a trained voting network")
            probs = vote_forward(self.votenet, votes)
            return [{"labels": np.argmax(probs, axis=0).astype(np.uint8)}]
        if self.multiclass is None:
            raise ConfigError("condition needs a trained multi-class model")
        return [
            {"labels": _predict_multiclass_volume(self.multiclass, case, m, source)}
            for m in self.modalities
        ]


class OraclePipeline:
    """Identity-on-ground-truth stand-in: predicts the case's own labels."""

    def predict_case(self, case: Case, condition: Condition):
        return [{"labels": case.labels.copy()}]


def _predict_binary_volume(model, case: Case, modality: str, source) -> np.ndarray:
    slices = extract_slices(case.modalities[modality], ViewAxis.AXIAL)
    boxes = source.boxes(case, ViewAxis.AXIAL)
    probs = forward_batch(model, np.stack(slices), boxes)
    return reassemble(list(probs[:, 0] > 0.5), ViewAxis.AXIAL)


def _predict_multiclass_volume(model, case: Case, modality: str, source) -> np.ndarray:
    slices = extract_slices(case.modalities[modality], ViewAxis.AXIAL)
    boxes = source.boxes(case, ViewAxis.AXIAL)
    probs = forward_batch(model, np.stack(slices), boxes)
    labels = probs.argmax(axis=1).astype(np.uint8)
    return reassemble(list(labels), ViewAxis.AXIAL)


def _member_scores(member: dict[str, np.ndarray], truth) -> dict[str, float]:
    if "labels" in member:
        pred = composite_regions(member["labels"])
        scores = {
            "et": dice(pred.et, truth.et),
            "tc": dice(pred.tc, truth.tc),
            "wt": dice(pred.wt, truth.wt),
            "netc": dice(member["labels"] == 1, truth.tc & ~truth.et),
            "snfh": dice(member["labels"] == 2, truth.wt & ~truth.tc),
        }
        return scores
    return {"wt": dice(member["wt"], truth.wt)}


@dataclass
class CaseResult:
    case_id: str
    scores: dict[str, float]


@dataclass
class EvalReport:
    condition: str
    per_case: list[CaseResult]
    aggregate: dict[str, float]
    mean_composites: float | None = None
    localization: dict[str, float] | None = None

    def to_dict(self) -> dict:
        return {
            "condition": self.condition,
            "aggregate": self.aggregate,
            "mean_composites": self.mean_composites,
            "localization": self.localization,
            "per_case": [
                {"case_id": r.case_id, **r.scores} for r in self.per_case
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def per_case_csv(self) -> str:
        keys = sorted({k for r in self.per_case for k in r.scores})
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["case_id", *keys])
        for r in self.per_case:
            writer.writerow([r.case_id, *[f"{r.scores.get(k, float('nan')):.6f}" for k in keys]])
        return buf.getvalue()


def evaluate_dataset(cases: list[Case], pipeline, condition: Condition) -> EvalReport:
    """Score a pipeline on every case; aggregate = mean over cases per key.

    Members of a fusion-free condition (one per modality) are averaged
    into the case score. mean_composites is the Table-style mean over
    the ET/TC/WT aggregates when a condition produces all three.
    """
    per_case: list[CaseResult] = []
    for case in cases:
        truth = composite_regions(case.labels)
        members = pipeline.predict_case(case, condition)
        member_scores = [_member_scores(m, truth) for m in members]
        keys = member_scores[0].keys()
        per_case.append(
            CaseResult(
                case_id=case.id,
                scores={
                    k: float(np.mean([s[k] for s in member_scores])) for k in keys
                },
            )
        )
    keys = per_case[0].scores.keys() if per_case else ()
    aggregate = {
        k: float(np.mean([r.scores[k] for r in per_case])) for k in keys
    }
    mean_composites = None
    if all(k in aggregate for k in COMPOSITE_KEYS):
        mean_composites = float(np.mean([aggregate[k] for k in COMPOSITE_KEYS]))
    localization = None
    if condition.prompt_source == "localizer" and hasattr(pipeline, "localizer") \
            and pipeline.localizer is not None:
        localization = _dataset_localization(pipeline, cases)
    return EvalReport(
        condition=condition.label,
        per_case=per_case,
        aggregate=aggregate,
        mean_composites=mean_composites,
        localization=localization,
    )


def _dataset_localization(pipeline, cases: list[Case]) -> dict[str, float]:
    dets: list[Detection | None] = []
    truths: list[Box | None] = []
    image_shape = None
    for case in cases:
        image_shape = case.shape[1:]
        stacks = np.stack(
            [
                np.stack([case.modalities[m][k] for m in MODALITY_NAMES])
                for k in range(case.shape[0])
            ]
        )
        dets.extend(detect_boxes(pipeline.localizer, stacks, pipeline.conf_threshold))
        truths.extend(
            box_from_labels(case.labels[k], "wt") for k in range(case.shape[0])
        )
    return localization_metrics(dets, truths, image_shape)
