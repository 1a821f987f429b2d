"""Checkpoint-pair metrics over name-matched weight matrices."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .checkpoint_io import ContainerHandle, LayerMeta, WeightMatrix, as_weight_matrix, list_matrices, load_matrix
from .classify import DEFAULT_RULESET, ComponentGroup, Ruleset
from .errors import AllZeroSpectrum, DomainError, EmptyGroup, NoCommonTensors, ShapeMismatch, ZeroBase
from .spectral import matrix_effective_rank

log = logging.getLogger(__name__)

METRICS = ("mean_change", "relative_change_pct", "correlation", "change_variance", "delta_effective_rank")


@dataclass(frozen=True)
class DeltaStats:
    meta: LayerMeta
    mean_change: float  # mean |target - base|
    relative_change_pct: float  # 100 * ||delta||_F / ||base||_F
    correlation: float | None  # Pearson over entries; None if either side is constant
    change_variance: float  # population variance of delta entries
    delta_effective_rank: float | None  # effrank(target) - effrank(base)


def pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    x = a.ravel() - a.mean()
    y = b.ravel() - b.mean()
    sx, sy = np.sqrt(x @ x), np.sqrt(y @ y)
    if sx == 0 or sy == 0:
        return None
    return float(np.clip((x @ y) / (sx * sy), -1.0, 1.0))


def delta_stats(base, target) -> DeltaStats:
    if not isinstance(base, WeightMatrix):
        base = as_weight_matrix(base)
    if not isinstance(target, WeightMatrix):
        target = as_weight_matrix(target, base.name)
    if base.shape != target.shape:
        raise ShapeMismatch(f"{base.name}: {base.shape} vs {target.shape}")
    a, b = base.data, target.data
    base_norm = np.linalg.norm(a)
    if base_norm == 0:
        raise ZeroBase(f"{base.name}: base matrix is all zeros")
    d = b - a
    try:
        d_erank = matrix_effective_rank(b) - matrix_effective_rank(a)
    except AllZeroSpectrum:
        d_erank = None
    return DeltaStats(
        meta=base.meta,
        mean_change=float(np.abs(d).mean()),
        relative_change_pct=float(100.0 * np.linalg.norm(d) / base_norm),
        correlation=pearson(a, b),
        change_variance=float(d.var()),
        delta_effective_rank=d_erank,
    )


@dataclass
class DiffResult:
    deltas: list[DeltaStats]
    only_in_base: list[str] = field(default_factory=list)
    only_in_target: list[str] = field(default_factory=list)
    # name -> reason for matched pairs that could not be compared
    skipped: dict[str, str] = field(default_factory=dict)


def diff_checkpoints(
    base: ContainerHandle,
    target: ContainerHandle,
    min_dim: int = 1,
    groups: set[ComponentGroup] | None = None,
    ruleset: Ruleset = DEFAULT_RULESET,
    workers: int = 1,
) -> DiffResult:
    """Pair matrices by exact tensor name and compute :class:`DeltaStats` for each.

    Names present on one side only are listed in the result rather than
    dropped. Output order is depth order regardless of ``workers``.
    """
    a_meta = {m.tensor_name: m for m in list_matrices(base, min_dim, ruleset)}
    b_meta = {m.tensor_name: m for m in list_matrices(target, min_dim, ruleset)}
    if groups is not None:
        a_meta = {k: v for k, v in a_meta.items() if v.component_group in groups}
        b_meta = {k: v for k, v in b_meta.items() if v.component_group in groups}
    common = [m for name, m in a_meta.items() if name in b_meta]
    if not common:
        raise NoCommonTensors(f"{base.path} and {target.path} share no analyzable tensor names")

    def one(meta: LayerMeta):
        try:
            return delta_stats(load_matrix(base, meta.tensor_name, ruleset), load_matrix(target, meta.tensor_name, ruleset))
        except DomainError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(one, common))

    out = DiffResult(
        deltas=[],
        only_in_base=sorted(set(a_meta) - set(b_meta)),
        only_in_target=sorted(set(b_meta) - set(a_meta)),
    )
    for meta, res in zip(common, results):
        if isinstance(res, Exception):
            log.warning("skipping %s: %s", meta.tensor_name, res)
            out.skipped[meta.tensor_name] = f"{type(res).__name__}: {res}"
        else:
            out.deltas.append(res)
    return out


def layer_change_profile(deltas, group: ComponentGroup | str, metric: str) -> dict[int, float]:
    """``layer_index -> value`` for one component group, ascending by depth.

    Layers without the group, and absent values (e.g. correlation of a
    constant matrix), are left out rather than zero-filled.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    group = ComponentGroup(group)
    members = [d for d in deltas if d.meta.component_group == group and d.meta.layer_index is not None]
    if not members:
        raise EmptyGroup(f"no deltas with a layer index in group {group.value}")
    series = {}
    for d in sorted(members, key=lambda d: d.meta.sort_key()):
        value = getattr(d, metric)
        if value is not None:
            series[d.meta.layer_index] = value
    return series
