"""Per-matrix spectral diagnostics.

Eigenvalues are ``lambda_i = sigma_i**2`` of the raw weight matrix, with no
``1/N`` scaling, so ``lambda_min`` is reported on the scale the weights live
on. The Marchenko-Pastur spike count is the only place a normalization is
applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .checkpoint_io import LayerMeta, WeightMatrix, as_weight_matrix
from .errors import (
    AllZeroSpectrum,
    ConvergenceFailure,
    DegenerateTail,
    FitError,
    NoBulk,
    TooFewEigenvalues,
)


@dataclass(frozen=True, eq=False)
class Esd:
    eigenvalues: np.ndarray  # descending, >= 0
    rows: int
    cols: int

    def __len__(self):
        return len(self.eigenvalues)


@dataclass(frozen=True)
class FitConfig:
    min_tail: int = 8
    # Thin the x_min candidate grid to at most this many rank-spaced values.
    max_xmin_candidates: int | None = None
    # Fixed x_min; skips the KS search.
    xmin: float | None = None
    # KS distances within this relative gap count as tied (smaller x_min wins).
    tie_rtol: float = 1e-12
    # Eigenvalues at or below positive_rtol * max are treated as numerical zeros.
    positive_rtol: float = 1e-12

    def __post_init__(self):
        if self.min_tail < 2:
            raise ValueError("min_tail must be >= 2")
        if self.max_xmin_candidates is not None and self.max_xmin_candidates < 1:
            raise ValueError("max_xmin_candidates must be >= 1")


@dataclass(frozen=True)
class PowerLawFit:
    alpha: float
    lambda_min: float
    ks_distance: float
    n_tail: int


@dataclass(frozen=True)
class MPResult:
    n_spikes: int
    bulk_variance: float  # s^2 in normalized units
    bulk_edge: float  # in unnormalized eigenvalue units (lambda, not lambda / N)


@dataclass(frozen=True)
class SpectralConfig:
    fit: FitConfig = field(default_factory=FitConfig)
    # Bulk-edge margin in Tracy-Widom scale units; 0 gives the bare MP edge.
    edge_margin_tw: float = 2.0
    mp_max_iter: int = 100


@dataclass(frozen=True, eq=False)
class SpectralStats:
    meta: LayerMeta
    esd: Esd
    fit: PowerLawFit | None
    fit_status: str  # "ok" or the failure reason
    effective_rank: float
    effective_feature_number: int | None
    mp_bulk_edge: float | None

    @property
    def alpha(self) -> float | None:
        return None if self.fit is None else self.fit.alpha


# ---------------------------------------------------------------------------
# singular values


def _perm_canonical(a: np.ndarray) -> np.ndarray:
    """Reorder rows and columns by permutation-invariant keys.

    Row keys (min, max) do not depend on column order and vice versa, so the
    result is bit-identical for ``P @ a @ Q`` whenever the keys are distinct;
    on ties a full lexicographic sort of the sorted rows/columns is used.
    """

    def order(m: np.ndarray) -> np.ndarray:
        lo, hi = m.min(axis=1), m.max(axis=1)
        idx = np.lexsort((hi, lo))
        keys = np.stack([lo[idx], hi[idx]], axis=1)
        if len(idx) > 1 and (keys[1:] == keys[:-1]).all(axis=1).any():
            srt = np.sort(m, axis=1)
            idx = np.lexsort(srt.T[::-1])
        return idx

    a = a[order(a)]
    return np.ascontiguousarray(a[:, order(a.T)])


def _canonical(a: np.ndarray) -> np.ndarray:
    if a.shape[0] > a.shape[1]:
        a = a.T
    c = _perm_canonical(a)
    if a.shape[0] == a.shape[1] and a.shape[0] > 1:
        ct = _perm_canonical(a.T)
        diff = np.flatnonzero(c != ct)
        if diff.size and ct.flat[diff[0]] < c.flat[diff[0]]:
            c = ct
    return c


def _as_array(w) -> np.ndarray:
    return w.data if isinstance(w, WeightMatrix) else np.asarray(w, dtype=np.float64)


def singular_values(w) -> np.ndarray:
    """Singular values of a matrix, descending.

    The matrix is put in a canonical orientation and row/column order first,
    so transposes and permutations of the same matrix give identical bits.
    """
    a = _as_array(w)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"expected a non-empty matrix, got shape {a.shape}")
    try:
        s = np.linalg.svd(_canonical(a), compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(str(exc)) from exc
    return np.sort(s)[::-1]


def esd(w) -> Esd:
    a = _as_array(w)
    s = singular_values(a)
    return Esd(eigenvalues=s * s, rows=a.shape[0], cols=a.shape[1])


# ---------------------------------------------------------------------------
# power-law tail fit


@numba.njit(cache=True)
def _ks_scan(lx, cand, tie_rtol):
    """Scan x_min candidates in ascending order; return the winning slot.

    ``lx`` holds ascending log-eigenvalues, ``cand`` the start index of each
    candidate tail. For a candidate starting at ``k`` with ``m`` points the
    Hill estimate is ``1 + m / sum(lx[k:] - lx[k])`` and the KS distance is
    the sup gap between the tail ECDF and ``1 - exp(-(alpha - 1) * dlog)``.
    The running KS max only grows, so a candidate is dropped as soon as it
    can no longer beat the incumbent.
    """
    n = lx.shape[0]
    best_d = np.inf
    best_c = -1
    best_alpha = np.nan
    for c in range(cand.shape[0]):
        k = cand[c]
        base = lx[k]
        if lx[n - 1] == base:
            continue
        s = 0.0
        for j in range(k, n):
            s += lx[j] - base
        m = n - k
        alpha = 1.0 + m / s
        e = alpha - 1.0
        bound = best_d * (1.0 - tie_rtol)
        d = 0.0
        for j in range(k, n):
            f = -math.expm1(-e * (lx[j] - base))
            hi = (j - k + 1) / m
            lo = (j - k) / m
            v = max(hi - f, f - lo)
            if v > d:
                d = v
                if d >= bound:
                    break
        if d < bound:
            best_d = d
            best_c = c
            best_alpha = alpha
    return best_c, best_alpha, best_d


def _positive_sorted(values, cfg: FitConfig) -> np.ndarray:
    lam = np.asarray(values, dtype=np.float64)
    if lam.size == 0 or not np.isfinite(lam).all():
        raise TooFewEigenvalues("empty or non-finite spectrum")
    top = lam.max()
    lam = np.sort(lam[lam > cfg.positive_rtol * top]) if top > 0 else lam[:0]
    return lam


def fit_power_law(spectrum, config: FitConfig | None = None) -> PowerLawFit:
    """Continuous power-law MLE on the ESD tail with KS-optimal ``x_min``.

    Every distinct eigenvalue that leaves at least ``min_tail`` points at or
    above it is a candidate. Among candidates the smallest KS distance wins;
    ties go to the smaller ``x_min``.
    """
    cfg = config or FitConfig()
    lam = _positive_sorted(spectrum.eigenvalues if isinstance(spectrum, Esd) else spectrum, cfg)
    n = lam.size
    if cfg.xmin is not None:
        return _fit_fixed_xmin(lam, cfg)
    if n < cfg.min_tail:
        raise TooFewEigenvalues(f"{n} positive eigenvalues, need {cfg.min_tail}")

    # ratios to the max are exact under power-of-two rescaling
    lx = np.log(lam / lam[-1])
    last = n - cfg.min_tail
    starts = np.flatnonzero(np.r_[True, lam[1 : last + 1] != lam[:last]])
    if cfg.max_xmin_candidates is not None and starts.size > cfg.max_xmin_candidates:
        pick = np.unique(np.linspace(0, starts.size - 1, cfg.max_xmin_candidates).round().astype(np.int64))
        starts = starts[pick]
    c, alpha, d = _ks_scan(lx, starts.astype(np.int64), cfg.tie_rtol)
    if c < 0:
        raise DegenerateTail("every candidate tail is constant; alpha is unbounded")
    k = int(starts[c])
    return PowerLawFit(alpha=float(alpha), lambda_min=float(lam[k]), ks_distance=float(d), n_tail=n - k)


def _fit_fixed_xmin(lam: np.ndarray, cfg: FitConfig) -> PowerLawFit:
    xmin = float(cfg.xmin)
    if xmin <= 0:
        raise ValueError("xmin must be positive")
    tail = lam[lam >= xmin]
    m = tail.size
    if m < cfg.min_tail:
        raise TooFewEigenvalues(f"{m} eigenvalues >= xmin={xmin}, need {cfg.min_tail}")
    logs = np.log(tail / xmin)
    s = math.fsum(logs)
    if s <= 0:
        raise DegenerateTail("tail is constant at xmin")
    alpha = 1.0 + m / s
    f = -np.expm1(-(alpha - 1.0) * logs)
    i = np.arange(1, m + 1)
    d = float(max((i / m - f).max(), (f - (i - 1) / m).max()))
    return PowerLawFit(alpha=alpha, lambda_min=xmin, ks_distance=d, n_tail=m)


# ---------------------------------------------------------------------------
# rank-type measures


def effective_rank(singular_vals) -> float:
    """exp of the Shannon entropy of ``sigma / sum(sigma)``.

    Evaluated as ``S * exp(-sum(t log t) / S)`` with ``t = sigma / max`` and
    ``S = sum(t)``, which is exact for uniform spectra and under power-of-two
    scaling.
    """
    s = np.asarray(singular_vals, dtype=np.float64)
    top = s.max() if s.size else 0.0
    if not top > 0:
        raise AllZeroSpectrum("effective rank needs at least one positive singular value")
    t = s / top
    t = t[t > 0]  # subnormal entries can underflow to zero here
    total = math.fsum(t)
    return float(total * math.exp(-math.fsum(t * np.log(t)) / total))


def _drop_noise_floor(s: np.ndarray, shape) -> np.ndarray:
    # values at or below max(rows, cols) * eps * sigma_max are SVD rounding error
    if not s.size:
        return s
    floor = max(shape) * np.finfo(np.float64).eps * s[0]
    return np.where(s > floor, s, 0.0)


def numerical_singular_values(w) -> np.ndarray:
    """Singular values with the decomposition's noise floor set to zero."""
    data = w.data if isinstance(w, WeightMatrix) else np.asarray(w)
    return _drop_noise_floor(singular_values(w), data.shape)


def matrix_effective_rank(w) -> float:
    return effective_rank(numerical_singular_values(w))


def tracy_widom_scale(rows: int, cols: int) -> float:
    """Fluctuation scale of the top eigenvalue of ``W W^T / N`` for unit-variance entries."""
    m, n = min(rows, cols), max(rows, cols)
    return (math.sqrt(n) + math.sqrt(m)) * (1 / math.sqrt(n) + 1 / math.sqrt(m)) ** (1 / 3) / n


def mp_spikes(spectrum: Esd, edge_margin_tw: float = 2.0, max_iter: int = 100) -> MPResult:
    """Count eigenvalues above a Marchenko-Pastur bulk with re-estimated variance.

    With ``M <= N`` and ``gamma = M / N`` the eigenvalues are normalized by
    ``N``; the bulk variance is the mean of the current bulk and the edge is
    ``s2 * ((1 + sqrt(gamma))**2 + edge_margin_tw * tw)``. Points above the
    edge leave the bulk and the estimate repeats until the bulk set is fixed.
    """
    m, n = sorted((spectrum.rows, spectrum.cols))
    if m < 2:
        raise ValueError("matrix must be at least 2x2")
    lam = np.asarray(spectrum.eigenvalues, dtype=np.float64) / n
    factor = (1 + math.sqrt(m / n)) ** 2 + edge_margin_tw * tracy_widom_scale(m, n)
    bulk = np.ones(lam.size, dtype=bool)
    s2 = edge = 0.0
    for _ in range(max_iter):
        if not bulk.any():
            raise NoBulk("bulk set emptied during edge re-estimation")
        s2 = float(lam[bulk].mean())
        edge = s2 * factor
        nxt = lam <= edge
        if (nxt == bulk).all():
            break
        bulk = nxt
    if not bulk.any():
        raise NoBulk("bulk set emptied during edge re-estimation")
    return MPResult(n_spikes=int(lam.size - bulk.sum()), bulk_variance=s2, bulk_edge=edge * n)


def effective_feature_number(spectrum: Esd, edge_margin_tw: float = 2.0, max_iter: int = 100) -> int:
    return mp_spikes(spectrum, edge_margin_tw, max_iter).n_spikes


# ---------------------------------------------------------------------------
# bundle


def layer_spectral_stats(w, config: SpectralConfig | None = None) -> SpectralStats:
    """All per-matrix metrics; a failed tail fit is recorded, not raised."""
    cfg = config or SpectralConfig()
    if not isinstance(w, WeightMatrix):
        w = as_weight_matrix(w)
    try:
        s = singular_values(w)
    except ConvergenceFailure as exc:
        raise ConvergenceFailure(f"{w.name}: {exc}") from exc
    spec = Esd(eigenvalues=s * s, rows=w.meta.rows, cols=w.meta.cols)
    try:
        fit, status = fit_power_law(spec, cfg.fit), "ok"
    except FitError as exc:
        fit, status = None, f"{type(exc).__name__}: {exc}"
    try:
        erank = effective_rank(_drop_noise_floor(s, w.shape))
    except AllZeroSpectrum as exc:
        raise AllZeroSpectrum(f"{w.name}: {exc}") from exc
    if min(spec.rows, spec.cols) >= 2:
        mp = mp_spikes(spec, cfg.edge_margin_tw, cfg.mp_max_iter)
        n_feat, edge = mp.n_spikes, mp.bulk_edge
    else:
        n_feat = edge = None
    return SpectralStats(
        meta=w.meta,
        esd=spec,
        fit=fit,
        fit_status=status,
        effective_rank=erank,
        effective_feature_number=n_feat,
        mp_bulk_edge=edge,
    )
