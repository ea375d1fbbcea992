"""Per-slice prompt sources: ground-truth boxes, full-brain boxes, detector boxes.

A prompt source maps (case, view axis) to one optional box per slice;
None means the slice gets no prompt, which downstream turns into an
empty prediction (or, in training, a skipped/negative sample).
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .localizer import LocalizerNet, detect_boxes, box_from_labels, full_brain_box
from .promptnet import Box
from .volumes import MODALITY_NAMES, Case, ViewAxis, extract_slices

PROMPT_SOURCE_NAMES = ("truth_box", "full_brain_box", "localizer")


class TruthBoxSource:
    """Tight box around a composite region of the ground-truth labels."""

    name = "truth_box"

    def __init__(self, target: str = "wt"):
        self.target = target

    def boxes(self, case: Case, axis: ViewAxis) -> list[Box | None]:
        return [
            box_from_labels(sl, self.target)
            for sl in extract_slices(case.labels, axis)
        ]


class FullBrainBoxSource:
    """The whole slice as one box; deliberately uninformative localization."""

    name = "full_brain_box"

    def boxes(self, case: Case, axis: ViewAxis) -> list[Box | None]:
        slices = extract_slices(case.labels, axis)
        return [full_brain_box(sl.shape) for sl in slices]


class LocalizerBoxSource:
    """Boxes from the trained detector over stacked modality slices."""

    name = "localizer"

    def __init__(self, model: LocalizerNet, conf_threshold: float = 0.5):
        self.model = model
        self.conf_threshold = conf_threshold

    def boxes(self, case: Case, axis: ViewAxis) -> list[Box | None]:
        per_mod = [extract_slices(case.modalities[m], axis) for m in MODALITY_NAMES]
        stacks = np.stack(
            [np.stack([mod[k] for mod in per_mod]) for k in range(len(per_mod[0]))]
        )
        dets = detect_boxes(self.model, stacks, self.conf_threshold)
        return [d.box if d is not None else None for d in dets]


def make_prompt_source(name: str, localizer: LocalizerNet | None = None,
                       conf_threshold: float = 0.5):
    """Build a prompt source by config name."""
    if name == "truth_box":
        return TruthBoxSource()
    if name == "full_brain_box":
        return FullBrainBoxSource()
    if name == "localizer":
        if localizer is None:
            raise ConfigError("prompt source 'localizer' requires a localizer checkpoint")
        return LocalizerBoxSource(localizer, conf_threshold)
    raise ConfigError(f"unknown prompt source {name!r}; valid: {PROMPT_SOURCE_NAMES}")
