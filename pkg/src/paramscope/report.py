"""Model-level aggregation, trend labels, ancestor comparison and report files."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .checkpoint_io import ContainerHandle, LayerMeta, list_matrices, load_matrix
from .classify import DEFAULT_RULESET, ComponentGroup, Ruleset
from .config import BandConfig, RegimeConfig, RunConfig, TrendConfig
from .dynamics import METRICS as DELTA_METRICS
from .dynamics import DeltaStats, DiffResult, diff_checkpoints
from .errors import DomainError, MisalignedReference, NoFits, TooShortSeries
from .spectral import SpectralStats, layer_spectral_stats

log = logging.getLogger(__name__)

SPECTRAL_METRICS = ("alpha", "lambda_min", "ks", "eff_rank", "eff_features")


def _fits(stats: Iterable[SpectralStats]) -> list[float]:
    return [s.fit.alpha for s in stats if s.fit is not None]


# ---------------------------------------------------------------------------
# band proportion and color


def band_proportion(stats: Sequence[SpectralStats], cfg: BandConfig = BandConfig()) -> float:
    """Percent of successfully fitted matrices with ``lo <= alpha <= hi``.

    Matrices whose fit failed are left out of both counts; see
    :func:`fit_counts` for how many.
    """
    alphas = _fits(stats)
    if not alphas:
        raise NoFits("no matrix has a successful power-law fit")
    inside = sum(1 for a in alphas if cfg.lo <= a <= cfg.hi)
    return 100.0 * inside / len(alphas)


def fit_counts(stats: Sequence[SpectralStats]) -> tuple[int, int]:
    """``(n_fit, n_excluded)``."""
    n_fit = len(_fits(stats))
    return n_fit, len(stats) - n_fit


class BandColor(str, Enum):
    GREEN = "green"
    YELLOW = "yellow"
    RED = "red"


def band_color(pct: float, cfg: BandConfig = BandConfig()) -> BandColor:
    if not 0 <= pct <= 100:
        raise ValueError(f"percentage out of range: {pct}")
    if pct >= cfg.green_min:
        return BandColor.GREEN
    if pct >= cfg.yellow_min:
        return BandColor.YELLOW
    return BandColor.RED


# ---------------------------------------------------------------------------
# trends over checkpoints


class TrendLabel(str, Enum):
    STABLE = "Stable"
    STUCK = "Stuck"
    RECOVER = "Recover"
    GAP = "Gap"
    UNCLASSIFIED = "Unclassified"


@dataclass
class TrendSeries:
    checkpoint_ids: list[str]
    proportions_pct: list[float]
    reference: "TrendSeries | None" = None
    label: TrendLabel | None = None

    def __post_init__(self):
        if len(self.checkpoint_ids) != len(self.proportions_pct):
            raise ValueError("checkpoint_ids and proportions_pct differ in length")

    def to_dict(self, band: BandConfig = BandConfig()) -> dict:
        out = {
            "checkpoint_ids": list(self.checkpoint_ids),
            "proportions_pct": [_num(p) for p in self.proportions_pct],
            "colors": [band_color(p, band).value for p in self.proportions_pct],
            "label": None if self.label is None else self.label.value,
        }
        if self.reference is not None:
            out["reference"] = {
                "checkpoint_ids": list(self.reference.checkpoint_ids),
                "proportions_pct": [_num(p) for p in self.reference.proportions_pct],
            }
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "TrendSeries":
        ref = doc.get("reference")
        label = doc.get("label")
        return cls(
            checkpoint_ids=[str(c) for c in doc["checkpoint_ids"]],
            proportions_pct=[float(p) for p in doc["proportions_pct"]],
            reference=cls.from_dict(ref) if ref else None,
            label=TrendLabel(label) if label else None,
        )


def classify_trend(series: TrendSeries, band: BandConfig = BandConfig(), trend: TrendConfig = TrendConfig()) -> TrendLabel:
    """Label a band-proportion series.

    The first ``warmup_skip`` checkpoints are ignored. The final value decides
    Stuck (below yellow) and Gap (yellow). A green final is Stable if every
    later value stayed green and never fell more than ``delta_pp`` below the
    reference at the same position; it is Recover if some value did dip (below
    the reference by more than ``delta_pp``, or below green without a
    reference).
    """
    values = series.proportions_pct
    if len(values) < 3:
        raise TooShortSeries(f"need at least 3 checkpoints, got {len(values)}")
    if len(values) <= trend.warmup_skip:
        raise TooShortSeries("warmup_skip leaves no checkpoints")
    ref = series.reference
    if ref is not None and len(ref.proportions_pct) != len(values):
        raise MisalignedReference(
            f"reference has {len(ref.proportions_pct)} checkpoints, series has {len(values)}"
        )
    final = values[-1]
    if final < band.yellow_min:
        return TrendLabel.STUCK
    if final < band.green_min:
        return TrendLabel.GAP
    post = range(trend.warmup_skip, len(values))
    all_green = all(values[i] >= band.green_min for i in post)
    if ref is None:
        dipped = not all_green
    else:
        dipped = any(values[i] < ref.proportions_pct[i] - trend.delta_pp for i in post)
    if all_green and not dipped:
        return TrendLabel.STABLE
    if dipped:
        return TrendLabel.RECOVER
    return TrendLabel.UNCLASSIFIED


# ---------------------------------------------------------------------------
# alpha histogram


def alpha_histogram(stats: Sequence[SpectralStats], bin_width: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """Left-closed bins of ``bin_width`` from ``floor(min alpha)`` past ``max alpha``."""
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    return _histogram(_fits(stats), bin_width)


def _histogram(alphas: Sequence[float], bin_width: float) -> tuple[np.ndarray, np.ndarray]:
    if not len(alphas):
        raise NoFits("no fitted alphas to histogram")
    a = np.asarray(alphas, dtype=np.float64)
    lo, hi = math.floor(a.min()), math.ceil(a.max())
    n_bins = max(1, math.ceil((hi - lo) / bin_width - 1e-9))
    edges = lo + bin_width * np.arange(n_bins + 1)
    while edges[-1] <= a.max():
        edges = np.append(edges, lo + bin_width * len(edges))
    idx = np.searchsorted(edges, a, side="right") - 1
    counts = np.bincount(idx, minlength=len(edges) - 1)
    return edges, counts


# ---------------------------------------------------------------------------
# model report


@dataclass
class ModelReport:
    checkpoint_id: str
    per_layer: list[SpectralStats]
    band_proportion_pct: float
    band_color: BandColor
    n_fit: int
    n_excluded: int
    alpha_histogram: tuple[np.ndarray, np.ndarray]
    profiles: dict[tuple[str, str], dict[int, float]]
    skipped: dict[str, str] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        edges, counts = self.alpha_histogram
        return {
            "checkpoint_id": self.checkpoint_id,
            "config": self.config,
            "layers": [_layer_row(s) for s in self.per_layer],
            "summary": {
                "band_proportion": _num(self.band_proportion_pct),
                "band_color": self.band_color.value,
                "n_fit": self.n_fit,
                "n_excluded": self.n_excluded,
                "n_skipped": len(self.skipped),
            },
            "histogram": {"edges": [_num(e) for e in edges], "counts": [int(c) for c in counts]},
            "profiles": _profiles_dict(self.profiles),
            "skipped": dict(sorted(self.skipped.items())),
        }


def _layer_row(s: SpectralStats) -> dict:
    fit = s.fit
    return {
        "name": s.meta.tensor_name,
        "group": s.meta.component_group.value,
        "layer_index": s.meta.layer_index,
        "rows": s.meta.rows,
        "cols": s.meta.cols,
        "alpha": None if fit is None else _num(fit.alpha),
        "lambda_min": None if fit is None else _num(fit.lambda_min),
        "ks": None if fit is None else _num(fit.ks_distance),
        "n_tail": None if fit is None else fit.n_tail,
        "eff_rank": _num(s.effective_rank),
        "eff_features": s.effective_feature_number,
        "mp_bulk_edge": None if s.mp_bulk_edge is None else _num(s.mp_bulk_edge),
        "fit_status": s.fit_status,
    }


def _spectral_value(s: SpectralStats, metric: str):
    if metric == "eff_rank":
        return s.effective_rank
    if metric == "eff_features":
        return s.effective_feature_number
    if s.fit is None:
        return None
    return {"alpha": s.fit.alpha, "lambda_min": s.fit.lambda_min, "ks": s.fit.ks_distance}[metric]


def spectral_profiles(stats: Sequence[SpectralStats]) -> dict[tuple[str, str], dict[int, float]]:
    """Depth series per (component group, metric) for layers with an index."""
    profiles: dict[tuple[str, str], dict[int, float]] = {}
    for s in sorted(stats, key=lambda s: s.meta.sort_key()):
        if s.meta.layer_index is None:
            continue
        for metric in SPECTRAL_METRICS:
            value = _spectral_value(s, metric)
            if value is not None:
                profiles.setdefault((s.meta.component_group.value, metric), {})[s.meta.layer_index] = value
    return dict(sorted(profiles.items()))


def build_model_report(
    checkpoint_id: str,
    stats: Sequence[SpectralStats],
    band: BandConfig = BandConfig(),
    bin_width: float = 0.25,
    skipped: dict[str, str] | None = None,
    config: dict | None = None,
) -> ModelReport:
    stats = sorted(stats, key=lambda s: s.meta.sort_key())
    pct = band_proportion(stats, band)
    n_fit, n_excluded = fit_counts(stats)
    return ModelReport(
        checkpoint_id=checkpoint_id,
        per_layer=stats,
        band_proportion_pct=pct,
        band_color=band_color(pct, band),
        n_fit=n_fit,
        n_excluded=n_excluded,
        alpha_histogram=alpha_histogram(stats, bin_width),
        profiles=spectral_profiles(stats),
        skipped=dict(skipped or {}),
        config=dict(config or {}),
    )


def analyze_container(
    handle: ContainerHandle,
    config: RunConfig | None = None,
    ruleset: Ruleset = DEFAULT_RULESET,
    checkpoint_id: str | None = None,
) -> ModelReport:
    """Spectral stats for every analyzable matrix, aggregated into a report.

    A matrix that fails to load or decompose is skipped with a warning.
    """
    cfg = config or RunConfig()
    metas = list_matrices(handle, cfg.min_dim, ruleset)
    spectral_cfg = cfg.spectral

    def one(meta: LayerMeta):
        try:
            return layer_spectral_stats(load_matrix(handle, meta.tensor_name, ruleset), spectral_cfg)
        except DomainError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        results = list(pool.map(one, metas))
    stats, skipped = [], {}
    for meta, res in zip(metas, results):
        if isinstance(res, Exception):
            log.warning("skipping %s: %s", meta.tensor_name, res)
            skipped[meta.tensor_name] = f"{type(res).__name__}: {res}"
        else:
            stats.append(res)
    if not stats:
        raise NoFits("no analyzable matrices")
    return build_model_report(
        checkpoint_id or handle.path.stem,
        stats,
        cfg.band,
        cfg.bin_width,
        skipped=skipped,
        config=cfg.report_dict(),
    )


# ---------------------------------------------------------------------------
# comparison against a shared ancestor


class Regime(str, Enum):
    MINIMAL = "minimal"
    CONSERVATIVE = "conservative"
    DEEP = "deep"


def tag_regime(relative_change_pct: float, correlation: float | None, cfg: RegimeConfig = RegimeConfig()) -> Regime:
    """Minimal below ``minimal_max_pct``; deep above ``deep_min_pct`` when the
    correlation with the ancestor is also below ``deep_max_corr``; otherwise
    conservative. An undefined correlation never counts as low."""
    if relative_change_pct < cfg.minimal_max_pct:
        return Regime.MINIMAL
    if relative_change_pct > cfg.deep_min_pct and correlation is not None and correlation < cfg.deep_max_corr:
        return Regime.DEEP
    return Regime.CONSERVATIVE


@dataclass
class DescendantComparison:
    target_id: str
    diff: DiffResult
    regimes: dict[str, Regime]
    profiles: dict[tuple[str, str], dict[int, float]]

    def to_dict(self) -> dict:
        counts = {r.value: 0 for r in Regime}
        for r in self.regimes.values():
            counts[r.value] += 1
        return {
            "target": self.target_id,
            "layers": [
                {**_delta_row(d), "regime": self.regimes[d.meta.tensor_name].value} for d in self.diff.deltas
            ],
            "regime_counts": counts,
            "unmatched": {
                "only_in_base": list(self.diff.only_in_base),
                "only_in_target": list(self.diff.only_in_target),
                "skipped": dict(sorted(self.diff.skipped.items())),
            },
            "profiles": _profiles_dict(self.profiles),
        }


@dataclass
class ComparisonReport:
    ancestor_id: str
    descendants: list[DescendantComparison]
    config: dict = field(default_factory=dict)
    # band summaries of any model reports supplied alongside
    model_summaries: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ancestor": self.ancestor_id,
            "config": self.config,
            "model_summaries": self.model_summaries,
            "descendants": [d.to_dict() for d in self.descendants],
        }


def _delta_row(d: DeltaStats) -> dict:
    return {
        "name": d.meta.tensor_name,
        "group": d.meta.component_group.value,
        "layer_index": d.meta.layer_index,
        "mean_change": _num(d.mean_change),
        "relative_change_pct": _num(d.relative_change_pct),
        "correlation": None if d.correlation is None else _num(d.correlation),
        "change_variance": _num(d.change_variance),
        "delta_effective_rank": None if d.delta_effective_rank is None else _num(d.delta_effective_rank),
    }


def delta_profiles(deltas: Sequence[DeltaStats]) -> dict[tuple[str, str], dict[int, float]]:
    profiles: dict[tuple[str, str], dict[int, float]] = {}
    for d in sorted(deltas, key=lambda d: d.meta.sort_key()):
        if d.meta.layer_index is None:
            continue
        for metric in DELTA_METRICS:
            value = getattr(d, metric)
            if value is not None:
                profiles.setdefault((d.meta.component_group.value, metric), {})[d.meta.layer_index] = value
    return dict(sorted(profiles.items()))


def compare_diff(target_id: str, diff: DiffResult, cfg: RegimeConfig = RegimeConfig()) -> DescendantComparison:
    regimes = {d.meta.tensor_name: tag_regime(d.relative_change_pct, d.correlation, cfg) for d in diff.deltas}
    return DescendantComparison(target_id, diff, regimes, delta_profiles(diff.deltas))


def compare_against_ancestor(
    ancestor: ContainerHandle,
    descendants: Sequence[ContainerHandle],
    config: RunConfig | None = None,
    ruleset: Ruleset = DEFAULT_RULESET,
    reports: Sequence[ModelReport] = (),
    groups: set[ComponentGroup] | None = None,
) -> ComparisonReport:
    """Diff each descendant against the ancestor and tag every layer's regime."""
    cfg = config or RunConfig()
    entries = []
    for desc in descendants:
        diff = diff_checkpoints(ancestor, desc, cfg.min_dim, groups, ruleset, cfg.workers)
        entries.append(compare_diff(desc.path.stem, diff, cfg.regime))
    summaries = {
        r.checkpoint_id: {
            "band_proportion": _num(r.band_proportion_pct),
            "band_color": r.band_color.value,
            "n_fit": r.n_fit,
            "n_excluded": r.n_excluded,
        }
        for r in reports
    }
    return ComparisonReport(ancestor.path.stem, entries, cfg.report_dict(), summaries)


# ---------------------------------------------------------------------------
# serialization


def _num(x):
    """Round to 6 significant digits (the fixed output precision)."""
    if x is None or isinstance(x, (bool, int, np.integer)):
        return None if x is None else int(x)
    return float(f"{float(x):.6g}")


def _profiles_dict(profiles: dict[tuple[str, str], dict[int, float]]) -> dict:
    out: dict[str, dict] = {}
    for (group, metric), series in profiles.items():
        out.setdefault(group, {})[metric] = {str(k): _num(v) for k, v in sorted(series.items())}
    return out


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _json_text(doc: dict) -> str:
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def render_report(report, fmt: str = "both") -> dict[str, str]:
    """File name -> contents, without touching the filesystem."""
    if fmt not in ("json", "csv", "both"):
        raise ValueError(f"unknown format {fmt!r}")
    files: dict[str, str] = {}
    if isinstance(report, ModelReport):
        if fmt in ("json", "both"):
            files["report.json"] = _json_text(report.to_dict())
        if fmt in ("csv", "both"):
            summary = [
                ("checkpoint_id", report.checkpoint_id),
                ("band_proportion", _num(report.band_proportion_pct)),
                ("band_color", report.band_color.value),
                ("n_fit", report.n_fit),
                ("n_excluded", report.n_excluded),
                ("n_skipped", len(report.skipped)),
            ]
            files["summary.csv"] = _csv_text(("key", "value"), summary)
            for (group, metric), series in report.profiles.items():
                files[f"profile_{group}_{metric}.csv"] = _csv_text(("layer_index", "value"), sorted(series.items()))
    elif isinstance(report, ComparisonReport):
        if fmt in ("json", "both"):
            files["comparison.json"] = _json_text(report.to_dict())
        if fmt in ("csv", "both"):
            summary = []
            for entry in report.descendants:
                counts = entry.to_dict()["regime_counts"]
                summary.append((
                    report.ancestor_id, entry.target_id, len(entry.diff.deltas),
                    counts["minimal"], counts["conservative"], counts["deep"],
                    len(entry.diff.only_in_base), len(entry.diff.only_in_target), len(entry.diff.skipped),
                ))
            files["summary.csv"] = _csv_text(
                ("ancestor", "target", "n_matched", "n_minimal", "n_conservative", "n_deep",
                 "only_in_base", "only_in_target", "n_skipped"),
                summary,
            )
            for entry in report.descendants:
                tid = _safe(entry.target_id)
                files[f"deltas_{tid}.csv"] = _csv_text(
                    ("name", "group", "layer_index") + DELTA_METRICS + ("regime",),
                    (
                        (d.meta.tensor_name, d.meta.component_group.value, d.meta.layer_index)
                        + tuple(getattr(d, m) for m in DELTA_METRICS)
                        + (entry.regimes[d.meta.tensor_name].value,)
                        for d in entry.diff.deltas
                    ),
                )
                for (group, metric), series in entry.profiles.items():
                    files[f"profile_{tid}_{group}_{metric}.csv"] = _csv_text(
                        ("layer_index", "value"), sorted(series.items())
                    )
    else:
        raise TypeError(f"cannot render {type(report).__name__}")
    return files


def emit_report(report, fmt: str, path: str | Path) -> list[Path]:
    """Write a report into directory ``path``; returns the files written."""
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in render_report(report, fmt).items():
        target = out_dir / name
        with open(target, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        written.append(target)
    return written
