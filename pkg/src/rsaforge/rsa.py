"""Representational similarity scoring of model layers against brain RDMs.

A model layer is compared with a brain region through the strict upper
triangles of their RDMs (correlation distance). Per subject the Spearman
correlation ``r_s`` is computed; the layer's score is ``mean_s(r_s**2)``
expressed as a percentage of the squared lower noise ceiling.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

REGIONS = ("EVC", "IT")


class UndefinedCorrelationError(ValueError):
    """Correlation with a constant vector is undefined."""


class DegenerateRowError(ValueError):
    """An activation pattern is constant, so its correlation distance is undefined."""

    def __init__(self, index: int):
        super().__init__(f"activation row for stimulus {index} is constant")
        self.index = index


def rank_transform(x) -> np.ndarray:
    """Ranks starting at 1; tied values share the mean of the positions they span."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("need at least two values to rank")
    if not np.isfinite(x).all():
        raise ValueError("cannot rank non-finite values")
    order = np.argsort(x, kind="stable")
    xs = x[order]
    # boundaries of runs of equal values in sorted order
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], x.size]
    run_rank = (starts + 1 + ends) / 2.0
    ranks = np.empty_like(x)
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def pearson(x, y) -> float:
    """Product-moment correlation with float64 accumulation."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 3:
        raise ValueError("need at least three paired values")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = dx @ dx
    syy = dy @ dy
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant vector")
    r = (dx @ dy) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def spearman(x, y) -> float:
    """Pearson correlation of fractional ranks (exact under ties)."""
    return pearson(rank_transform(x), rank_transform(y))


def upper_triangle(rdm: np.ndarray) -> np.ndarray:
    """Strict upper triangle of a square matrix, row-major, as float64."""
    rdm = np.asarray(rdm)
    n = rdm.shape[-1]
    if rdm.shape[-2] != n:
        raise ValueError(f"RDM must be square, got shape {rdm.shape}")
    iu = np.triu_indices(n, k=1)
    return rdm[..., iu[0], iu[1]].astype(np.float64)


def compute_rdm(activations: np.ndarray) -> np.ndarray:
    """Correlation-distance RDM (``1 - pearson``) between the rows of ``[N, D]`` activations."""
    a = np.asarray(activations, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"activations must be [N, D], got shape {a.shape}")
    n, d = a.shape
    if n < 3 or d < 2:
        raise ValueError(f"need at least 3 stimuli and 2 units, got {n}x{d}")
    a = a - a.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", a, a))
    flat = np.flatnonzero(norms == 0)
    if flat.size:
        raise DegenerateRowError(int(flat[0]))
    z = a / norms[:, None]
    corr = z @ z.T
    rdm = 1.0 - 0.5 * (corr + corr.T)
    np.clip(rdm, 0.0, 2.0, out=rdm)
    # identical patterns are exactly 0 apart, whatever the matmul rounding did
    _, group = np.unique(a, axis=0, return_inverse=True)
    rdm[group.reshape(-1, 1) == group.reshape(1, -1)] = 0.0
    return rdm.astype(np.float32)


def check_rdm(rdm: np.ndarray, what: str = "RDM") -> np.ndarray:
    """Validate symmetry, zero diagonal and the [0, 2] range; returns the array."""
    rdm = np.asarray(rdm)
    if rdm.ndim != 2 or rdm.shape[0] != rdm.shape[1]:
        raise ValueError(f"{what} must be square, got shape {rdm.shape}")
    if rdm.shape[0] < 3:
        raise ValueError(f"{what} needs at least 3 stimuli")
    if np.abs(rdm - rdm.T).max() > 1e-6:
        raise ValueError(f"{what} is not symmetric")
    if np.any(np.diag(rdm) != 0):
        raise ValueError(f"{what} has a non-zero diagonal")
    if rdm.min() < 0 or rdm.max() > 2:
        raise ValueError(f"{what} has entries outside [0, 2]")
    return rdm


def check_subjects(subject_rdms: np.ndarray, what: str = "subject RDMs") -> np.ndarray:
    subject_rdms = np.asarray(subject_rdms)
    if subject_rdms.ndim != 3:
        raise ValueError(f"{what} must be [S, n, n], got shape {subject_rdms.shape}")
    if subject_rdms.shape[0] < 2:
        raise ValueError(f"{what} needs at least two subjects")
    for s, rdm in enumerate(subject_rdms):
        check_rdm(rdm, f"{what}[{s}]")
    return subject_rdms


@dataclass(frozen=True)
class NoiseCeiling:
    """Squared noise-ceiling bounds with the per-subject correlations behind them."""

    lower: float
    upper: float
    lower_r: tuple[float, ...]
    upper_r: tuple[float, ...]


def noise_ceiling(subject_rdms: np.ndarray) -> NoiseCeiling:
    """Leave-one-out (lower) and all-subject (upper) ceilings, as means of squared r."""
    tri = upper_triangle(check_subjects(subject_rdms))
    n_subj = tri.shape[0]
    grand = tri.mean(axis=0)
    lower_r, upper_r = [], []
    for s in range(n_subj):
        others = np.delete(tri, s, axis=0).mean(axis=0)
        lower_r.append(spearman(tri[s], others))
        upper_r.append(spearman(tri[s], grand))
    lo, up = np.square(lower_r), np.square(upper_r)
    return NoiseCeiling(float(lo.mean()), float(up.mean()), tuple(lower_r), tuple(upper_r))


@dataclass(frozen=True)
class ModelScore:
    r2_mean: float
    normalized_pct: float
    per_subject_r: tuple[float, ...]
    mean_r: float
    std_pct: float
    nc_lower: float
    nc_upper: float

    def to_dict(self) -> dict:
        return {
            "r2_mean": self.r2_mean,
            "normalized_pct": self.normalized_pct,
            "mean_r": self.mean_r,
            "std_pct": self.std_pct,
            "nc_lower": self.nc_lower,
            "nc_upper": self.nc_upper,
            "per_subject_r": list(self.per_subject_r),
        }


def subject_pct(per_subject_r: Sequence[float], nc_lower: float) -> np.ndarray:
    """Per-subject noise-normalized squared correlation percentages."""
    return 100.0 * np.square(np.asarray(per_subject_r, dtype=np.float64)) / nc_lower


def score_model(model_rdm: np.ndarray, subject_rdms: np.ndarray,
                ceiling: NoiseCeiling | None = None) -> ModelScore:
    """Noise-normalized squared Spearman percentage of one model RDM.

    ``std_pct`` is the population standard deviation across subjects of the
    per-subject percentages ``100 * r_s**2 / nc_lower``.
    """
    model_rdm = np.asarray(model_rdm)
    subject_rdms = np.asarray(subject_rdms)
    if subject_rdms.ndim != 3 or model_rdm.shape != subject_rdms.shape[1:]:
        raise ValueError(f"model RDM {model_rdm.shape} does not match subject RDMs "
                         f"{subject_rdms.shape}")
    if ceiling is None:
        ceiling = noise_ceiling(subject_rdms)
    if ceiling.lower <= 0:
        raise UndefinedCorrelationError("lower noise ceiling is zero")
    model_tri = upper_triangle(model_rdm)
    per_subject = [spearman(model_tri, t) for t in upper_triangle(subject_rdms)]
    r2 = float(np.mean(np.square(per_subject)))
    return ModelScore(
        r2_mean=r2,
        normalized_pct=100.0 * r2 / ceiling.lower,
        per_subject_r=tuple(per_subject),
        mean_r=float(np.mean(per_subject)),
        std_pct=float(np.std(subject_pct(per_subject, ceiling.lower))),
        nc_lower=ceiling.lower,
        nc_upper=ceiling.upper,
    )


def best_layer(scores: Mapping[str, Mapping[str, float]], sets: Sequence[str] | None = None) -> str:
    """Layer with the highest unweighted mean score across stimulus sets.

    ``scores`` maps layer -> set -> score and is iterated in network order;
    exact ties go to the earlier layer.
    """
    if not scores:
        raise ValueError("no layers to choose from")
    if sets is None:
        sets = sorted({s for per_set in scores.values() for s in per_set})
    if not sets:
        raise ValueError("no stimulus sets scored")
    best, best_mean = None, -np.inf
    for layer, per_set in scores.items():
        missing = [s for s in sets if s not in per_set]
        if missing:
            raise KeyError(f"layer {layer!r} has no score for set(s) {missing}")
        mean = sum(per_set[s] for s in sets) / len(sets)
        if mean > best_mean:
            best, best_mean = layer, mean
    return best
