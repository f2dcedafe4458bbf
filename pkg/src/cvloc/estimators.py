"""scikit-learn style wrappers around the projection, fusion and matching steps.

The query side composes as a pipeline::

    query = make_pipeline(GroundViewProjector(64, 1.6), SequenceFuser())
    fused = query.fit_transform(sequences)          # one map per sequence
    retriever = CrossViewRetriever(meters_per_cell=1.6).fit(sat_maps, ids)
    top1 = retriever.predict(fused)
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .evaluation import geo_distance
from .fusion import ConvStack, fuse_sequence
from .geometry import DEFAULT_CAMERA_HEIGHT, CanvasSpec, gvp_warp_sequence
from .matching import align_batch, default_radius, uncertainty_field
from .validation import check_frame_sequence, check_maps, check_sequences


def resolve_threads(n_jobs=None) -> int:
    """``n_jobs`` if given, else the ``CVL_THREADS`` env var; 0 or unset means auto."""
    if n_jobs is None:
        n_jobs = int(os.environ.get("CVL_THREADS", "0") or 0)
    if n_jobs <= 0:
        n_jobs = os.cpu_count() or 1
    return n_jobs


class GroundViewProjector(TransformerMixin, BaseEstimator):
    """Warp sequences of ground frames onto a shared overhead canvas.

    ``transform`` takes a list of sequences (each a list of
    :class:`~cvloc.geometry.GroundFrame`) and returns, per sequence, the list
    of projected maps.
    """

    def __init__(self, size_px=512, meters_per_pixel=0.2, camera_height=DEFAULT_CAMERA_HEIGHT,
                 interpolation="bilinear"):
        self.size_px = size_px
        self.meters_per_pixel = meters_per_pixel
        self.camera_height = camera_height
        self.interpolation = interpolation

    def fit(self, X=None, y=None):
        if self.interpolation not in ("bilinear", "nearest"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        self.canvas_ = CanvasSpec(self.size_px, self.meters_per_pixel, self.camera_height)
        return self

    def transform(self, X):
        check_is_fitted(self, "canvas_")
        out = []
        for seq in check_sequences(X, check_frame_sequence):
            out.append(gvp_warp_sequence(
                [f.features for f in seq], [f.intrinsics for f in seq], [f.pose for f in seq],
                self.canvas_, self.interpolation,
            ))
        return out


class SequenceFuser(TransformerMixin, BaseEstimator):
    """Fuse each projected sequence into one overhead map.

    ``weights`` is a (query, key, value) triple of ConvStacks; ``None`` uses
    identity stacks sized to the input channels at fit time.
    """

    def __init__(self, mode="pcsf", weights=None, scale_logits=False):
        self.mode = mode
        self.weights = weights
        self.scale_logits = scale_logits

    def fit(self, X, y=None):
        if self.mode not in ("pcsf", "mean"):
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        seqs = check_sequences(X)
        self.n_channels_ = seqs[0][0].channels
        if self.weights is None:
            ident = ConvStack.identity(self.n_channels_)
            self.weights_ = (ident, ident, ident)
        else:
            self.weights_ = tuple(self.weights)
        return self

    def transform(self, X):
        check_is_fitted(self, "weights_")
        return [fuse_sequence(seq, self.weights_, self.mode, self.scale_logits)
                for seq in check_sequences(X)]


@dataclass
class RetrievalRecord:
    query_id: str
    db_ids: list
    alignments: list
    geo_distances: list = field(default_factory=list)

    @property
    def distances(self) -> list:
        return [a.distance for a in self.alignments]


class CrossViewRetriever(BaseEstimator):
    """Rank satellite maps for each fused query by best-aligned distance.

    ``fit`` stores the satellite database; ``rank`` runs the displacement
    search against every entry. Database chunks are scanned on up to
    ``n_jobs`` threads (``None`` reads ``CVL_THREADS``); chunking is fixed
    so results never depend on the thread count.
    """

    def __init__(self, radius_px=None, meters_per_cell=0.2, uncertainty=None, chunk_size=16,
                 n_jobs=None):
        self.radius_px = radius_px
        self.meters_per_cell = meters_per_cell
        self.uncertainty = uncertainty
        self.chunk_size = chunk_size
        self.n_jobs = n_jobs

    def fit(self, X, y=None, positions=None):
        maps = check_maps(X, "satellite maps")
        self.ids_ = list(y) if y is not None else [str(i) for i in range(len(maps))]
        if len(self.ids_) != len(maps):
            raise ValueError("need one id per satellite map")
        self.radius_ = self.radius_px if self.radius_px is not None else default_radius(self.meters_per_cell)
        self.data_ = np.stack([m.data for m in maps])
        self.mask_ = np.stack([m.mask for m in maps])
        self.positions_ = None if positions is None else list(positions)
        if self.uncertainty is None:
            self.uncertainty_ = None
        else:
            self.uncertainty_ = np.stack([uncertainty_field(m, self.uncertainty, self.radius_).values
                                          for m in maps])
        return self

    def _align_all(self, query) -> list:
        B = self.data_.shape[0]
        starts = range(0, B, self.chunk_size)

        def run(s):
            e = min(s + self.chunk_size, B)
            U = None if self.uncertainty_ is None else self.uncertainty_[s:e]
            return align_batch(self.data_[s:e], self.mask_[s:e], query, self.radius_, U)

        threads = min(resolve_threads(self.n_jobs), len(starts))
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                chunks = list(pool.map(run, starts))
        else:
            chunks = [run(s) for s in starts]
        return [a for chunk in chunks for a in chunk]

    def rank(self, X, query_ids=None, query_positions=None) -> list:
        """Full ranking per query, ascending distance, ties in database order."""
        check_is_fitted(self, "data_")
        queries = check_maps(X, "queries")
        query_ids = list(query_ids) if query_ids is not None else [str(i) for i in range(len(queries))]
        records = []
        for k, (qid, q) in enumerate(zip(query_ids, queries)):
            aligns = self._align_all(q)
            order = sorted(range(len(aligns)), key=lambda i: aligns[i].distance)
            rec = RetrievalRecord(qid, [self.ids_[i] for i in order], [aligns[i] for i in order])
            if query_positions is not None and self.positions_ is not None:
                qpos = query_positions[k]
                rec.geo_distances = [geo_distance(qpos, self.positions_[i]) for i in order]
            records.append(rec)
        return records

    def predict(self, X) -> np.ndarray:
        """Top-1 database id per query."""
        return np.array([r.db_ids[0] for r in self.rank(X)])

    def score(self, X, y) -> float:
        """Fraction of queries whose top-1 id equals ``y``."""
        return float(np.mean(self.predict(X) == np.asarray(y)))


__all__ = [
    "CrossViewRetriever",
    "GroundViewProjector",
    "RetrievalRecord",
    "SequenceFuser",
    "resolve_threads",
]
