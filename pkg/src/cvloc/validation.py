"""Input checks used by the estimator wrappers."""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, EmptySequence
from .geometry import FeatureMap, GroundFrame


def check_feature_map(X, name: str = "X") -> FeatureMap:
    """Accept a FeatureMap or an (H, W[, C]) array; arrays get a full mask."""
    if isinstance(X, FeatureMap):
        return X
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise DimensionMismatch(f"{name} must be HxW or HxWxC, got shape {arr.shape}")
    return FeatureMap(arr)


def check_maps(X, name: str = "X") -> list:
    """A non-empty list of same-shaped feature maps."""
    maps = [check_feature_map(x, name) for x in X]
    if not maps:
        raise EmptySequence(f"{name} is empty")
    shapes = {m.shape for m in maps}
    if len(shapes) > 1:
        raise DimensionMismatch(f"{name} mixes map shapes {sorted(shapes)}")
    return maps


def check_frame_sequence(seq, name: str = "sequence") -> list:
    seq = list(seq)
    if not seq:
        raise EmptySequence(f"{name} has no frames")
    for f in seq:
        if not isinstance(f, GroundFrame):
            raise TypeError(f"{name} items must be GroundFrame, got {type(f).__name__}")
    return seq


def check_sequences(X, item_check=check_maps) -> list:
    """A batch of sequences; a single un-nested sequence is rejected."""
    X = list(X)
    if not X:
        raise EmptySequence("no sequences given")
    if isinstance(X[0], (FeatureMap, GroundFrame)):
        raise TypeError("expected a list of sequences, got a single sequence")
    return [item_check(seq) for seq in X]
