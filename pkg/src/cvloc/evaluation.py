"""Soft-margin triplet loss and retrieval metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import BatchTooSmall, UnknownId

EARTH_RADIUS_M = 6378137.0
DEFAULT_ALPHA = 10.0
DEFAULT_KS = (1, 5, 10, 100)
SUCCESS_RADIUS_M = 10.0


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if abs(self.lat) > 90 or abs(self.lon) > 180:
            raise ValueError(f"invalid coordinates ({self.lat}, {self.lon})")


def _softplus(x):
    # log(1 + e^x) without overflow for large positive x
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def triplet_loss(d_pos, d_neg, alpha: float = DEFAULT_ALPHA):
    """``log(1 + exp(alpha * (d_pos - d_neg)))``, vectorized."""
    out = _softplus(alpha * (np.asarray(d_pos, dtype=np.float64) - d_neg))
    return float(out) if out.ndim == 0 else out


def triplet_loss_grad(d_pos, d_neg, alpha: float = DEFAULT_ALPHA):
    """Partial derivatives ``(dL/dd_pos, dL/dd_neg)``."""
    s = alpha * _sigmoid(alpha * (np.asarray(d_pos, dtype=np.float64) - d_neg))
    if s.ndim == 0:
        return float(s), float(-s)
    return s, -s


def _triplet_indices(B):
    q, s = np.nonzero(~np.eye(B, dtype=bool))
    return q, s


def batch_loss(D, alpha: float = DEFAULT_ALPHA) -> float:
    """Mean soft-margin loss over every exhaustive triplet in a B x B batch.

    ``D[q, s]`` is the aligned distance between query ``q`` and satellite
    ``s``; the diagonal holds matching pairs. Both query-anchored
    ``(D[q,q], D[q,s])`` and satellite-anchored ``(D[q,q], D[p,q])`` triplets
    are included, ``2 B (B - 1)`` in total.
    """
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError(f"distance matrix must be square, got {D.shape}")
    B = D.shape[0]
    if B < 2:
        raise BatchTooSmall("need at least two pairs per batch")
    a, b = _triplet_indices(B)
    pos = np.diag(D)
    terms = np.concatenate([
        triplet_loss(pos[a], D[a, b], alpha),
        triplet_loss(pos[a], D[b, a], alpha),
    ])
    return float(np.mean(terms))


def batch_loss_grad(D, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Gradient of :func:`batch_loss` with respect to every entry of ``D``."""
    D = np.asarray(D, dtype=np.float64)
    B = D.shape[0]
    if B < 2:
        raise BatchTooSmall("need at least two pairs per batch")
    a, b = _triplet_indices(B)
    pos = np.diag(D)
    T = 2 * B * (B - 1)
    G = np.zeros_like(D)
    for neg_rows, neg_cols in ((a, b), (b, a)):
        gp, gn = triplet_loss_grad(pos[a], D[neg_rows, neg_cols], alpha)
        np.add.at(G, (a, a), gp / T)
        np.add.at(G, (neg_rows, neg_cols), gn / T)
    return G


def geo_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Equirectangular distance in meters; sub-meter accurate below ~1 km."""
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlam = math.radians(b.lon - a.lon)
    return EARTH_RADIUS_M * math.hypot(dphi, math.cos(0.5 * (phi1 + phi2)) * dlam)


def offset_geopoint(origin: GeoPoint, south_m: float, east_m: float) -> GeoPoint:
    """Inverse of :func:`geo_distance`'s local projection around ``origin``."""
    lat = origin.lat - math.degrees(south_m / EARTH_RADIUS_M)
    phi_mean = math.radians(0.5 * (origin.lat + lat))
    lon = origin.lon + math.degrees(east_m / (EARTH_RADIUS_M * math.cos(phi_mean)))
    return GeoPoint(lat, lon)


def success_flags(rankings: Mapping[str, Sequence[str]], db_positions: Mapping[str, GeoPoint],
                  query_positions: Mapping[str, GeoPoint],
                  threshold_m: float = SUCCESS_RADIUS_M) -> dict:
    """Per query, the 1-based rank of the first entry within ``threshold_m`` (or None)."""
    first_hit = {}
    for qid, ranked in rankings.items():
        if qid not in query_positions:
            raise UnknownId(f"no position for query {qid!r}")
        missing = [d for d in ranked if d not in db_positions]
        if missing:
            raise UnknownId(f"no position for database entry {missing[0]!r}")
        qpos = query_positions[qid]
        first_hit[qid] = None
        for rank, dbid in enumerate(ranked, start=1):
            if geo_distance(qpos, db_positions[dbid]) <= threshold_m:
                first_hit[qid] = rank
                break
    return first_hit


def recall_at_k(rankings: Mapping[str, Sequence[str]], db_positions: Mapping[str, GeoPoint],
                query_positions: Mapping[str, GeoPoint], ks: Iterable[int] = DEFAULT_KS,
                threshold_m: float = SUCCESS_RADIUS_M) -> dict:
    """Fraction of queries with a top-k entry within ``threshold_m`` meters."""
    hits = success_flags(rankings, db_positions, query_positions, threshold_m)
    n = len(hits)
    recalls = {}
    for k in ks:
        good = sum(1 for r in hits.values() if r is not None and r <= k)
        recalls[k] = good / n if n else 0.0
    return recalls
