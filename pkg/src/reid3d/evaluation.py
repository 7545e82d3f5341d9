"""Query/gallery retrieval metrics: CMC and mAP.

Gallery entries sharing both identity and camera with the query are dropped
before ranking (when camera labels are given). Distance ties go to the lower
gallery index. Queries left with no correct gallery entry are skipped and
excluded from both metrics.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .losses import cross_distances


@dataclass
class EvalProtocol:
    query_ids: np.ndarray
    gallery_ids: np.ndarray
    distances: np.ndarray
    query_cams: np.ndarray | None = None
    gallery_cams: np.ndarray | None = None

    def __post_init__(self):
        self.query_ids = np.asarray(self.query_ids)
        self.gallery_ids = np.asarray(self.gallery_ids)
        nq, ng = len(self.query_ids), len(self.gallery_ids)
        if self.distances.shape != (nq, ng):
            raise ShapeError(f"distances {self.distances.shape} do not match {nq} queries x {ng} gallery")
        if (self.query_cams is None) != (self.gallery_cams is None):
            raise ShapeError("camera labels must be given for both query and gallery, or neither")
        if self.query_cams is not None:
            self.query_cams = np.asarray(self.query_cams)
            self.gallery_cams = np.asarray(self.gallery_cams)
            if len(self.query_cams) != nq or len(self.gallery_cams) != ng:
                raise ShapeError("camera label counts do not match the distance matrix")
        if not np.all(np.isfinite(self.distances)) or np.any(self.distances < 0):
            raise ShapeError("distances must be finite and nonnegative")


@dataclass
class EvalResult:
    cmc: np.ndarray
    map: float
    n_valid_queries: int
    n_skipped: int


def _ranked_matches(p: EvalProtocol, q: int) -> np.ndarray:
    """Boolean relevance of the kept gallery entries in ranked order."""
    order = np.argsort(p.distances[q], kind="stable")
    same_id = p.gallery_ids[order] == p.query_ids[q]
    if p.query_cams is not None:
        keep = ~(same_id & (p.gallery_cams[order] == p.query_cams[q]))
        same_id = same_id[keep]
    return same_id


def _valid_rankings(p: EvalProtocol) -> list[np.ndarray]:
    ranked = [_ranked_matches(p, q) for q in range(len(p.query_ids))]
    valid = [r for r in ranked if r.any()]
    if not valid:
        raise ValueError("no query has a valid gallery match")
    return valid


def cmc(p: EvalProtocol, max_rank: int) -> np.ndarray:
    """Fraction of valid queries whose first correct match is at rank <= r, r = 1..max_rank."""
    valid = _valid_rankings(p)
    hits = np.zeros(max_rank, dtype=np.int64)
    for r in valid:
        first = int(np.argmax(r))
        if first < max_rank:
            hits[first:] += 1
    return hits / len(valid)


def average_precision(relevance: np.ndarray) -> float:
    pos = np.nonzero(relevance)[0]
    total = 0.0
    for k, idx in enumerate(pos):
        total += (k + 1) / (idx + 1)
    return total / len(pos)


def mean_ap(p: EvalProtocol) -> float:
    valid = _valid_rankings(p)
    total = 0.0
    for r in valid:
        total += average_precision(r)
    return total / len(valid)


def evaluate(p: EvalProtocol, max_rank: int) -> EvalResult:
    n_valid = len(_valid_rankings(p))
    return EvalResult(cmc(p, max_rank), mean_ap(p), n_valid, len(p.query_ids) - n_valid)


def distance_matrix(qf: np.ndarray, gf: np.ndarray) -> np.ndarray:
    """Euclidean distances, identical to ``pairwise_distances`` on the stacked rows."""
    return cross_distances(qf, gf)


def extract_features(enc, tracks: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Eval-mode embeddings for ``n x C x T x H x W`` tracks, processed in chunks."""
    if enc.training:
        raise RuntimeError("extract_features needs the encoder in eval mode")
    d = enc.config.embedding_dim
    if len(tracks) == 0:
        return np.zeros((0, d), dtype=enc.dtype)
    rows = [enc.forward(tracks[i : i + batch_size])[0] for i in range(0, len(tracks), batch_size)]
    return np.concatenate(rows)


def read_labels(path: str | os.PathLike) -> np.ndarray:
    """One unsigned integer per line; blank lines ignored."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if not line.isdigit():
                raise ValueError(f"{path}:{lineno}: expected an unsigned integer, got {line!r}")
            out.append(int(line))
    return np.asarray(out, dtype=np.int64)


def write_labels(labels, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.writelines(f"{int(v)}\n" for v in labels)


def result_csv(result: EvalResult, ranks: list[int]) -> str:
    """``rank,cmc`` rows for the requested ranks plus a ``map,...`` footer."""
    lines = ["rank,cmc"]
    for r in ranks:
        lines.append(f"{r},{result.cmc[r - 1]:.9g}")
    lines.append(f"map,{result.map:.9g},n_valid,{result.n_valid_queries}")
    return "\n".join(lines) + "\n"
