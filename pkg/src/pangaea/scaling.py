"""The saturation law relating modality count to downstream performance.

Performance after pre-training on x modalities is modeled as
y = 1 - (1-p)^x + c: the chance of having acquired a unit of transferable
knowledge from at least one of x sources (a geometric-distribution CDF),
shifted by a fine-tuning constant. This module fits that law to measured
points, aggregates combination-sweep results into per-cardinality means,
and summarizes cross-modality attention into affinity matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError, FitError
from .triplets import ModalityKind

PRETRAIN_MODALITIES = (ModalityKind.TABLE, ModalityKind.TIMESERIES, ModalityKind.TEXT,
                       ModalityKind.GRAPH, ModalityKind.IMAGE)
_P_MIN, _P_MAX = 1e-9, 1.0 - 1e-9


def geometric_cdf(p: float, k: int) -> float:
    """Probability of at least one success in k trials: 1 - (1-p)^k."""
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"p={p} outside [0, 1]")
    if k < 0 or int(k) != k:
        raise DomainError("k must be a non-negative integer")
    return 1.0 - (1.0 - p) ** int(k)


def predicted_y(p: float, c: float, x) -> float:
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"p={p} outside [0, 1]")
    return 1.0 - (1.0 - p) ** np.asarray(x, dtype=np.float64) + c


@dataclass
class ScalingFit:
    p: float
    c: float
    residual_sse: float
    points: list
    boundary: bool = False

    def predict(self, x):
        return predicted_y(self.p, self.c, x)


def _best_c(p: float, x: np.ndarray, y: np.ndarray) -> float:
    # c enters additively, so the least-squares optimum is the mean residual
    return float(np.mean(y - (1.0 - (1.0 - p) ** x)))


def _sse(p: float, c: float, x: np.ndarray, y: np.ndarray) -> float:
    r = y - (1.0 - (1.0 - p) ** x + c)
    return float(r @ r)


def fit_scaling(points) -> ScalingFit:
    """Least-squares (p, c) via a coarse grid with closed-form c, then
    damped Gauss-Newton refinement. Deterministic throughout."""
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) < 2:
        raise FitError("need at least two points")
    x = np.array([q[0] for q in pts])
    y = np.array([q[1] for q in pts])
    if not np.isfinite(y).all() or not np.isfinite(x).all():
        raise FitError("points must be finite")
    if np.unique(x).size < 2:
        raise FitError("need at least two distinct x values")

    grid = np.linspace(0.001, 0.999, 999)
    sses = [_sse(p, _best_c(p, x, y), x, y) for p in grid]
    p = float(grid[int(np.argmin(sses))])
    c = _best_c(p, x, y)

    lam = 1e-6
    sse = _sse(p, c, x, y)
    for _ in range(200):
        q = 1.0 - p
        r = y - (1.0 - q ** x + c)
        # d r / d p = -x (1-p)^(x-1); d r / d c = -1
        with np.errstate(divide="ignore", invalid="ignore"):
            jp = -x * np.where(x == 0, 0.0, q ** (x - 1.0))
        jac = np.stack([jp, -np.ones_like(x)], axis=1)
        g = jac.T @ r
        h = jac.T @ jac
        accepted = False
        for _try in range(40):
            delta = np.linalg.solve(h + lam * np.eye(2), -g)
            p_new = float(np.clip(p + delta[0], _P_MIN, _P_MAX))
            c_new = float(c + delta[1])
            sse_new = _sse(p_new, c_new, x, y)
            if sse_new <= sse:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
        moved = abs(p_new - p) + abs(c_new - c)
        p, c, sse = p_new, c_new, sse_new
        lam = max(lam * 0.3, 1e-12)
        if moved < 1e-14:
            break
    boundary = p <= _P_MIN * 1.01 or p >= _P_MAX * 0.999999
    return ScalingFit(p=p, c=c, residual_sse=sse, points=pts, boundary=boundary)


# ---------------------------------------------------------------------------
# combination sweeps
# ---------------------------------------------------------------------------

@dataclass
class CombinationResult:
    """Scores of one pre-training subset, keyed by task name."""

    subset: frozenset
    scores: dict

    def __post_init__(self):
        self.subset = frozenset(self.subset)
        if not self.subset <= set(PRETRAIN_MODALITIES):
            bad = {m.value for m in self.subset - set(PRETRAIN_MODALITIES)}
            raise ContractError(f"subset contains non-pre-training modalities: {bad}")
        if not self.scores:
            raise ContractError("a combination result needs at least one task score")

    @property
    def cardinality(self) -> int:
        return len(self.subset)


@dataclass
class AggregateCurve:
    points: list                 # (x, mean normalized score), sorted by x
    missing: list = field(default_factory=list)  # cardinalities with no results


def aggregate_by_cardinality(results) -> AggregateCurve:
    """Min-max normalize per task across combinations, average per subset
    size, then average across tasks. Order-independent."""
    results = list(results)
    if not results:
        raise ContractError("no combination results")
    tasks = sorted({t for r in results for t in r.scores})
    for r in results:
        if sorted(r.scores) != tasks:
            raise ContractError("every combination must score the same task set")
    per_task_curves = []
    for t in tasks:
        vals = np.array([r.scores[t] for r in results], dtype=np.float64)
        lo, hi = vals.min(), vals.max()
        span = hi - lo if hi > lo else 1.0
        normed = (vals - lo) / span
        by_x = {}
        for r, v in zip(results, normed):
            by_x.setdefault(r.cardinality, []).append(v)
        per_task_curves.append({x: float(np.mean(vs)) for x, vs in by_x.items()})
    covered = sorted(set().union(*[set(c) for c in per_task_curves]))
    points = [(x, float(np.mean([c[x] for c in per_task_curves]))) for x in covered]
    missing = [x for x in range(6) if x not in covered]
    return AggregateCurve(points=points, missing=missing)


# ---------------------------------------------------------------------------
# attention affinity
# ---------------------------------------------------------------------------

def attention_affinity(attn_layers, segments, modalities=None, layers=None, heads=None):
    """Mean attention weight between modality segments.

    ``attn_layers``: per-layer arrays of post-softmax weights shaped
    (..., L, L) (leading batch/head axes are averaged). ``segments``: length
    L labels; None marks tokens outside every segment (the reconstruction
    token). Returns (matrix, modality_order).
    """
    attn_layers = [np.asarray(a, dtype=np.float64) for a in attn_layers]
    if not attn_layers:
        raise ContractError("no attention layers given")
    if layers is not None:
        attn_layers = [attn_layers[i] for i in layers]
    length = attn_layers[0].shape[-1]
    segments = list(segments)
    if len(segments) != length:
        raise ContractError(f"{len(segments)} segment labels for {length} tokens")

    picked = []
    for a in attn_layers:
        if a.shape[-2:] != (length, length):
            raise ContractError("attention arrays must share (L, L) trailing shape")
        flat = a.reshape(-1, length, length)
        if heads is not None:
            if a.ndim < 3:
                raise ContractError("head selection needs a per-head axis")
            flat = a.reshape(-1, a.shape[-3], length, length)[:, heads].reshape(-1, length, length)
        picked.append(flat.mean(axis=0))
    mean_attn = np.mean(picked, axis=0)

    if modalities is None:
        modalities = sorted({s for s in segments if s is not None},
                            key=lambda m: m.value if isinstance(m, ModalityKind) else str(m))
    groups = []
    for m in modalities:
        idx = np.array([i for i, s in enumerate(segments) if s == m])
        if idx.size == 0:
            raise ContractError(f"no tokens labeled {m}")
        groups.append(idx)
    k = len(modalities)
    out = np.zeros((k, k))
    for i, qi in enumerate(groups):
        for j, kj in enumerate(groups):
            out[i, j] = mean_attn[np.ix_(qi, kj)].mean()
    return out, list(modalities)
