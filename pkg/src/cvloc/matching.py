"""Displacement search between satellite and fused query feature maps.

The satellite map is shifted over a ``(2R+1) x (2R+1)`` window of integer
displacements and compared to the query by normalized cross-correlation
(cosine similarity over the jointly valid pixels). An uncertainty map derived
from the satellite features divides the scores before the argmax.

Displacement ``(m, n)`` means the shifted satellite view reads
``F_s[p + (m, n)]``; it is the query camera's offset from the satellite
center in feature-grid pixels (rows, columns).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    AllCellsInvalid,
    DegenerateQuery,
    DimensionMismatch,
    RadiusTooLarge,
)
from .fusion import ConvStack
from .geometry import FeatureMap

UNCERTAINTY_FLOOR = 1e-2
SEARCH_HALF_EXTENT_M = 5.0


@dataclass
class SimilarityField:
    """Scores over displacements; ``scores[m + R, n + R]`` holds cell ``(m, n)``."""

    scores: np.ndarray
    valid: np.ndarray
    radius: int
    meters_per_cell: float = 1.0

    def at(self, m: int, n: int) -> float:
        return float(self.scores[m + self.radius, n + self.radius])

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.radius, self.radius + 1)


@dataclass
class UncertaintyField:
    values: np.ndarray
    radius: int


@dataclass
class Alignment:
    """Outcome of matching one query against one satellite map."""

    m: int
    n: int
    ncc: float
    weighted: float
    distance: float


def default_radius(meters_per_cell: float, half_extent_m: float = SEARCH_HALF_EXTENT_M) -> int:
    """Search radius covering a 10 m x 10 m region at the given resolution."""
    return int(math.ceil(half_extent_m / meters_per_cell - 1e-9))


def _check_radius(shape, R):
    if R < 0 or R > min(shape) / 2:
        raise RadiusTooLarge(f"radius {R} exceeds half the map size {min(shape)}")


def shifted_view(F: FeatureMap, m: int, n: int) -> FeatureMap:
    """``out[p] = F[p + (m, n)]``; pixels shifted in from outside are masked."""
    H, W = F.height, F.width
    _check_radius((H, W), max(abs(m), abs(n)))
    data = np.zeros_like(F.data)
    mask = np.zeros_like(F.mask)
    r0, r1 = max(0, -m), min(H, H - m)
    c0, c1 = max(0, -n), min(W, W - n)
    data[r0:r1, c0:c1] = F.data[r0 + m:r1 + m, c0 + n:c1 + n]
    mask[r0:r1, c0:c1] = F.mask[r0 + m:r1 + m, c0 + n:c1 + n]
    return FeatureMap(data, mask)


def _check_query(F_q: FeatureMap):
    if not F_q.mask.any() or not np.any(F_q.data):
        raise DegenerateQuery("query map is entirely masked or zero")


def ncc_fields(sat_data: np.ndarray, sat_mask: np.ndarray, F_q: FeatureMap, R: int):
    """NCC of one query against a stack of satellite maps.

    ``sat_data`` is (B, H, W, C) with masked entries zero, ``sat_mask`` is
    (B, H, W). Returns ``(scores, valid)`` each of shape (B, 2R+1, 2R+1).
    Per-entry results do not depend on B.
    """
    B, H, W, C = sat_data.shape
    if (H, W, C) != F_q.shape:
        raise DimensionMismatch(f"satellite maps {sat_data.shape[1:]} vs query {F_q.shape}")
    _check_radius((H, W), R)
    _check_query(F_q)
    q = F_q.data
    qmask = F_q.mask.astype(np.float64)
    qpow = np.einsum("hwc,hwc->hw", q, q)
    spow = np.einsum("bhwc,bhwc->bhw", sat_data, sat_data)
    smask = sat_mask.astype(np.float64)
    size = 2 * R + 1
    scores = np.zeros((B, size, size))
    valid = np.zeros((B, size, size), dtype=bool)
    for i, m in enumerate(range(-R, R + 1)):
        r0, r1 = max(0, -m), min(H, H - m)
        for j, n in enumerate(range(-R, R + 1)):
            c0, c1 = max(0, -n), min(W, W - n)
            qs = q[r0:r1, c0:c1]
            ss = sat_data[:, r0 + m:r1 + m, c0 + n:c1 + n]
            # masked entries are zero, so the raw product already lives on the intersection
            num = (ss * qs).reshape(B, -1).sum(axis=1)
            na = (spow[:, r0 + m:r1 + m, c0 + n:c1 + n] * qmask[r0:r1, c0:c1]).reshape(B, -1).sum(axis=1)
            nb = (smask[:, r0 + m:r1 + m, c0 + n:c1 + n] * qpow[r0:r1, c0:c1]).reshape(B, -1).sum(axis=1)
            ok = (na > 0) & (nb > 0)
            denom = np.sqrt(na) * np.sqrt(nb)
            scores[:, i, j] = np.divide(num, denom, out=np.zeros(B), where=ok)
            valid[:, i, j] = ok
    return scores, valid


def ncc_field(F_s: FeatureMap, F_q: FeatureMap, R: int, meters_per_cell: float = 1.0) -> SimilarityField:
    """Normalized cross-correlation over all displacements ``|m|, |n| <= R``.

    Inner product and norms use only pixels valid in both maps; cells with an
    empty intersection or a zero norm score 0 and are flagged invalid.
    """
    if F_s.shape != F_q.shape:
        raise DimensionMismatch(f"satellite map {F_s.shape} vs query {F_q.shape}")
    scores, valid = ncc_fields(F_s.data[None], F_s.mask[None], F_q, R)
    return SimilarityField(scores[0], valid[0], R, meters_per_cell)


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def uncertainty_field(F_s: FeatureMap, weights: ConvStack, R: int, stride: int = 1,
                      floor: float = UNCERTAINTY_FLOOR) -> UncertaintyField:
    """Sigmoid of a conv stack over ``F_s``, pooled onto the displacement grid.

    Cell ``(m, n)`` averages the ``stride x stride`` block centered on pixel
    ``center + stride * (m, n)``; values are floored at ``floor``.
    """
    if weights.out_channels != 1:
        raise DimensionMismatch("uncertainty conv stack must output one channel")
    H, W = F_s.height, F_s.width
    _check_radius((H, W), R * stride)
    prob = _sigmoid(weights(F_s).data[:, :, 0])
    cr, cc = H // 2, W // 2
    lo = stride // 2
    size = 2 * R + 1
    U = np.empty((size, size))
    for i, m in enumerate(range(-R, R + 1)):
        r = cr + m * stride - lo
        rows = slice(max(r, 0), min(r + stride, H))
        for j, n in enumerate(range(-R, R + 1)):
            c = cc + n * stride - lo
            U[i, j] = prob[rows, max(c, 0):min(c + stride, W)].mean()
    return UncertaintyField(np.maximum(U, floor), R)


def weighted_similarity(D0: SimilarityField, U: UncertaintyField) -> SimilarityField:
    """``D = D0 / U``; invalid cells become -inf."""
    if U.values.shape != D0.scores.shape:
        raise DimensionMismatch("uncertainty grid does not match similarity grid")
    scores = np.where(D0.valid, D0.scores / U.values, -np.inf)
    return SimilarityField(scores, D0.valid.copy(), D0.radius, D0.meters_per_cell)


def best_displacement(D: SimilarityField) -> tuple:
    """Argmax over valid cells, ties broken by smallest ``m`` then ``n``."""
    if not D.valid.any():
        raise AllCellsInvalid("no valid displacement cell")
    scores = np.where(D.valid, D.scores, -np.inf)
    k = int(np.argmax(scores))  # row-major: first hit has the smallest (m, n)
    i, j = divmod(k, scores.shape[1])
    return i - D.radius, j - D.radius, float(scores[i, j])


def distance_from_ncc(ncc):
    return np.sqrt(np.maximum(0.0, 2.0 - 2.0 * np.asarray(ncc)))


def align(F_s: FeatureMap, F_q: FeatureMap, R: int, U: UncertaintyField = None) -> Alignment:
    D0 = ncc_field(F_s, F_q, R)
    if U is None:
        U = UncertaintyField(np.ones_like(D0.scores), R)
    m, n, score = best_displacement(weighted_similarity(D0, U))
    ncc = D0.at(m, n)
    return Alignment(m, n, ncc, score, float(distance_from_ncc(ncc)))


def aligned_distance(F_s: FeatureMap, F_q: FeatureMap, U: UncertaintyField, R: int) -> float:
    """L2 distance between the unit-normalized maps at the best displacement.

    The displacement is chosen on uncertainty-weighted scores but the distance
    uses the raw NCC there, so it stays within ``[0, 2]``. Not symmetric in
    its arguments: only the satellite map is shifted. ``U=None`` means no
    uncertainty weighting.
    """
    return align(F_s, F_q, R, U).distance


def align_batch(sat_data: np.ndarray, sat_mask: np.ndarray, F_q: FeatureMap, R: int,
                U: np.ndarray = None) -> list:
    """Align one query against a stack of satellite maps.

    ``U`` is an optional (B, 2R+1, 2R+1) stack of floored uncertainty values.
    """
    scores, valid = ncc_fields(sat_data, sat_mask, F_q, R)
    results = []
    for b in range(scores.shape[0]):
        D0 = SimilarityField(scores[b], valid[b], R)
        Ub = np.ones_like(scores[b]) if U is None else U[b]
        m, n, w = best_displacement(weighted_similarity(D0, UncertaintyField(Ub, R)))
        ncc = D0.at(m, n)
        results.append(Alignment(m, n, ncc, w, float(distance_from_ncc(ncc))))
    return results
