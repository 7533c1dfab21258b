"""Annotation masks carried along agent motion, and the two perception actions.

Annotate resets the mask to the current view's ground truth and adds the
fully labeled view to the training pool. Collect adds the current view with
the propagated (possibly partial) labels at no annotation cost. Pixels that
lose correspondence during motion become UNKNOWN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .perception import UNKNOWN, LabeledView
from .render import NONE_PIXEL, View


@dataclass
class PropagatedMask:
    labels: np.ndarray  # (W,) class id or UNKNOWN

    @property
    def unknown_fraction(self) -> float:
        return float(np.mean(self.labels == UNKNOWN))

    @property
    def known_count(self) -> int:
        return int(np.sum(self.labels != UNKNOWN))


def init_from_gt(view: View) -> PropagatedMask:
    """Mask equal to the view's ground truth; unknown fraction zero."""
    return PropagatedMask(labels=view.gt_class.copy())


def propagate(mask: PropagatedMask, corr: np.ndarray) -> PropagatedMask:
    """Carry labels through a correspondence map; unmatched pixels go UNKNOWN."""
    if len(corr) == 0:
        raise ValueError("empty correspondence map")
    valid = corr != NONE_PIXEL
    labels = np.full(len(corr), UNKNOWN, dtype=mask.labels.dtype)
    labels[valid] = mask.labels[corr[valid]]
    return PropagatedMask(labels=labels)


def do_annotate(trainset: list[LabeledView], view: View) -> PropagatedMask:
    """Add (view, ground truth) to the pool; return the re-initialized mask."""
    trainset.append(LabeledView(view=view, labels=view.gt_class.copy()))
    return init_from_gt(view)


def do_collect(trainset: list[LabeledView], view: View, mask: PropagatedMask) -> None:
    """Add (view, propagated labels) to the pool; the mask is unchanged.

    UNKNOWN pixels are preserved and excluded from the training loss.
    """
    if mask.known_count == 0:
        raise ValueError("cannot collect an all-UNKNOWN mask")
    trainset.append(LabeledView(view=view, labels=mask.labels.copy()))
