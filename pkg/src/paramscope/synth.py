"""Ground-truth generators and brute-force oracles.

Randomness comes from :class:`Rng`: numpy's PCG64 bit generator (128-bit
LCG with XSL-RR output, a fixed published algorithm) read through
``random_raw`` only, with the float conversions defined here. Nothing
depends on numpy's distribution samplers, whose streams are not pinned
across numpy releases, so fixtures are byte-reproducible.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .checkpoint_io import WeightMatrix, as_weight_matrix
from .errors import DegenerateTail, ManifestError, PrecisionLoss, ShapeMismatch, TooFewEigenvalues
from .spectral import PowerLawFit

RNG_ALGORITHM = "PCG64 (XSL-RR 128/64) via numpy.random.PCG64.random_raw; uniforms (k + 0.5) * 2**-53"

_TWO_53 = float(2**53)


class Rng:
    """Seeded source of uniforms on the open interval (0, 1) and Gaussians."""

    def __init__(self, *seed: int):
        self._bits = np.random.PCG64(np.random.SeedSequence(list(seed) if seed else 0))

    def uniform(self, size) -> np.ndarray:
        raw = self._bits.random_raw(int(np.prod(size)))
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) / _TWO_53
        return u.reshape(size)

    def normal(self, size) -> np.ndarray:
        """Box-Muller on paired open-interval uniforms."""
        count = int(np.prod(size))
        half = (count + 1) // 2
        u1, u2 = self.uniform(half), self.uniform(half)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:count].reshape(size)


def random_orthonormal(rows: int, cols: int, rng: Rng) -> np.ndarray:
    """``rows x cols`` matrix with orthonormal columns (Haar), via sign-fixed QR."""
    q, r = np.linalg.qr(rng.normal((rows, cols)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def pareto_samples(alpha: float, xmin: float, n: int, rng: Rng) -> np.ndarray:
    """Inverse-CDF draws with density ~ x^-alpha above xmin."""
    if alpha <= 1 or xmin <= 0:
        raise ValueError("need alpha > 1 and xmin > 0")
    return xmin * rng.uniform(n) ** (-1.0 / (alpha - 1.0))


@dataclass(frozen=True)
class PlantedSpectrumSpec:
    rows: int
    cols: int
    spectrum: Sequence[float] | None = None  # singular values
    alpha: float | None = None
    xmin: float = 1.0
    n_tail: int | None = None
    seed: int = 0

    def singular_values(self, rng: Rng) -> np.ndarray:
        k = min(self.rows, self.cols)
        if self.spectrum is not None:
            s = np.asarray(self.spectrum, dtype=np.float64)
            if s.size != k or (s < 0).any():
                raise ValueError(f"spectrum needs {k} non-negative values, got {s.size}")
            return s
        if self.alpha is None:
            raise ValueError("give either an explicit spectrum or a Pareto recipe")
        n_tail = k if self.n_tail is None else self.n_tail
        if not 1 <= n_tail <= k:
            raise ValueError(f"n_tail must be in [1, {k}]")
        lam = pareto_samples(self.alpha, self.xmin, n_tail, rng)
        # remaining eigenvalues sit uniformly below the tail cutoff
        bulk = self.xmin * rng.uniform(k - n_tail)
        return np.sqrt(np.sort(np.concatenate([lam, bulk]))[::-1])


def gen_matrix_with_spectrum(spec: PlantedSpectrumSpec, name: str = "planted") -> WeightMatrix:
    """``U diag(s) V^T`` with Haar-random orthonormal ``U``, ``V``."""
    rng = Rng(spec.seed)
    s = spec.singular_values(rng)
    k = s.size
    u = random_orthonormal(spec.rows, k, rng)
    v = random_orthonormal(spec.cols, k, rng)
    return as_weight_matrix((u * s) @ v.T, name)


def gen_mp_bulk(rows: int, cols: int, entry_std: float, seed: int, name: str = "bulk") -> WeightMatrix:
    if rows < 16 or cols < 16:
        raise ValueError("rows and cols must be >= 16")
    return as_weight_matrix(entry_std * Rng(seed).normal((rows, cols)), name)


def plant_spikes(w: WeightMatrix, n_spikes: int, edge_multiple: float, entry_std: float, seed: int) -> WeightMatrix:
    """Add a rank-``n_spikes`` term whose normalized eigenvalues sit at
    ``edge_multiple`` times the MP bulk edge of an ``entry_std`` noise matrix."""
    rows, cols = w.shape
    m, n = sorted((rows, cols))
    edge = entry_std**2 * (1 + math.sqrt(m / n)) ** 2
    theta = math.sqrt(edge_multiple * edge * n)
    rng = Rng(seed, 1)
    u = random_orthonormal(rows, n_spikes, rng)
    v = random_orthonormal(cols, n_spikes, rng)
    return as_weight_matrix(w.data + theta * (u @ v.T), w.name)


def gen_trajectory(w0: WeightMatrix, d: WeightMatrix, steps: int) -> list[WeightMatrix]:
    """``W_t = W0 + (t / steps) D`` for ``t = 0..steps``."""
    if w0.shape != d.shape:
        raise ShapeMismatch(f"{w0.shape} vs {d.shape}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return [as_weight_matrix(w0.data + (t / steps) * d.data, w0.name) for t in range(steps + 1)]


# ---------------------------------------------------------------------------
# oracles


def brute_force_pl_fit(samples, min_tail: int = 8, tie_rtol: float = 1e-12) -> PowerLawFit:
    """Exhaustive power-law fit: every candidate, O(n^2) KS by direct counting."""
    x = [float(v) for v in samples]
    if any(not v > 0 for v in x):
        raise ValueError("samples must be positive")
    if len(x) < min_tail:
        raise TooFewEigenvalues(f"{len(x)} samples, need {min_tail}")
    best = None
    for xmin in sorted(set(x)):
        tail = [v for v in x if v >= xmin]
        m = len(tail)
        if m < min_tail:
            break
        if all(v == xmin for v in tail):
            continue
        alpha = 1.0 + m / math.fsum(math.log(v / xmin) for v in tail)
        d = 0.0
        for v in tail:
            f = 1.0 - (v / xmin) ** (1.0 - alpha)
            below_or_at = sum(1 for t in tail if t <= v) / m
            strictly_below = sum(1 for t in tail if t < v) / m
            d = max(d, abs(below_or_at - f), abs(f - strictly_below))
        if best is None or d < best.ks_distance * (1.0 - tie_rtol):
            best = PowerLawFit(alpha=alpha, lambda_min=xmin, ks_distance=d, n_tail=m)
    if best is None:
        raise DegenerateTail("every candidate tail is constant")
    return best


def jacobi_eigvalsh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.

    Deliberately independent of LAPACK's SVD path; used as the reference for
    singular values via the Gram matrix.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    for _ in range(max_sweeps):
        off = math.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * math.sqrt(np.sum(a * a)):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * ap - s * aq, s * ap + c * aq
    else:
        raise RuntimeError("Jacobi iteration did not converge")
    return np.sort(np.diag(a))[::-1]


# ---------------------------------------------------------------------------
# container writer

_F16_MAX = 65504.0
_BF16_MAX = float(np.frombuffer(struct.pack("<I", 0x7F7F0000), "<f4")[0])
_F32_MAX = float(np.finfo(np.float32).max)


def encode_bf16(values: np.ndarray) -> np.ndarray:
    """float64 -> float32 -> bfloat16 bits with round-to-nearest-even."""
    bits = np.asarray(values, dtype=np.float64).astype("<f4").view("<u4").astype(np.uint64)
    rounding = np.uint64(0x7FFF) + ((bits >> np.uint64(16)) & np.uint64(1))
    return ((bits + rounding) >> np.uint64(16)).astype("<u2")


def encode(values: np.ndarray, dtype: str, name: str = "") -> bytes:
    arr = np.asarray(values, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise PrecisionLoss(f"{name!r}: non-finite values cannot be stored")
    peak = float(np.abs(arr).max()) if arr.size else 0.0
    limit = {"F64": math.inf, "F32": _F32_MAX, "F16": _F16_MAX, "BF16": _BF16_MAX}.get(dtype)
    if limit is None:
        raise ValueError(f"unsupported dtype {dtype!r}")
    if peak > limit:
        raise PrecisionLoss(f"{name!r}: value {peak:g} exceeds the {dtype} range ({limit:g})")
    if dtype == "F64":
        return arr.astype("<f8").tobytes()
    if dtype == "F32":
        return arr.astype("<f4").tobytes()
    if dtype == "F16":
        return arr.astype("<f2").tobytes()
    return encode_bf16(arr).tobytes()


def write_container(tensors: Mapping[str, tuple], path: str | os.PathLike, metadata: Mapping[str, str] | None = None) -> Path:
    """Write ``{name: (array, dtype)}`` in the single-file container format.

    Arrays may have any rank. Payloads follow the header in insertion order;
    the header is space-padded to an 8-byte boundary.
    """
    path = Path(path)
    header: dict = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    blobs = []
    offset = 0
    for name, (array, dtype) in tensors.items():
        arr = np.asarray(array.data if isinstance(array, WeightMatrix) else array)
        blob = encode(arr, dtype, name)
        header[name] = {"dtype": dtype, "shape": list(arr.shape), "data_offsets": [offset, offset + len(blob)]}
        blobs.append(blob)
        offset += len(blob)
    text = json.dumps(header, separators=(",", ":")).encode("utf-8")
    text += b" " * (-len(text) % 8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        for blob in blobs:
            fh.write(blob)
    return path


# ---------------------------------------------------------------------------
# fixture manifests

_MANIFEST_KEYS = {"seed", "dtype", "layers", "tensors", "metadata"}
_LAYER_KEYS = {"count", "prefix", "modules", "spectrum", "overrides"}
_TENSOR_KEYS = {"name", "shape", "spectrum", "dtype"}


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ManifestError(f"{where}: expected an object")
    extra = set(obj) - allowed
    if extra:
        raise ManifestError(f"{where}: unknown keys {sorted(extra)}")


def expand_manifest(manifest: Mapping) -> list[dict]:
    """Flatten a manifest into ``[{name, shape, spectrum, dtype}]`` entries.

    ``layers`` repeats ``modules`` (suffix -> [rows, cols]) over ``count``
    depths as ``{prefix}.{i}.{suffix}``; ``overrides`` maps a layer range
    ``"a-b"`` or index ``"a"`` to a spectrum replacing the default there.
    ``tensors`` adds explicitly named entries.
    """
    _check_keys(manifest, _MANIFEST_KEYS, "manifest")
    dtype = manifest.get("dtype", "F32")
    out = []
    layers = manifest.get("layers")
    if layers is not None:
        _check_keys(layers, _LAYER_KEYS, "layers")
        try:
            count = int(layers["count"])
            modules = layers["modules"]
        except KeyError as exc:
            raise ManifestError(f"layers: missing {exc}") from None
        except (TypeError, ValueError):
            raise ManifestError(f"layers: count must be an integer, got {layers['count']!r}") from None
        prefix = layers.get("prefix", "model.layers")
        default = layers.get("spectrum", {"kind": "mp", "entry_std": 0.02})
        overrides = {}
        for key, spec in (layers.get("overrides") or {}).items():
            lo, _, hi = str(key).partition("-")
            try:
                span = range(int(lo), int(hi or lo) + 1)
            except ValueError:
                raise ManifestError(f"layers.overrides: bad layer range {key!r}") from None
            for i in span:
                overrides[i] = spec
        for i in range(count):
            for suffix, shape in modules.items():
                out.append({"name": f"{prefix}.{i}.{suffix}", "shape": list(shape),
                            "spectrum": overrides.get(i, default), "dtype": dtype})
    for j, t in enumerate(manifest.get("tensors", [])):
        _check_keys(t, _TENSOR_KEYS, f"tensors[{j}]")
        if "name" not in t or "shape" not in t:
            raise ManifestError(f"tensors[{j}]: name and shape are required")
        out.append({"name": t["name"], "shape": list(t["shape"]),
                    "spectrum": t.get("spectrum", {"kind": "mp", "entry_std": 0.02}),
                    "dtype": t.get("dtype", dtype)})
    names = [e["name"] for e in out]
    if len(set(names)) != len(names):
        raise ManifestError("manifest produces duplicate tensor names")
    return out


def build_tensor(entry: Mapping, seed: int, index: int) -> np.ndarray:
    """Realize one manifest entry; the seed stream is ``(seed, index)``."""
    shape = tuple(int(d) for d in entry["shape"])
    spec = dict(entry["spectrum"])
    kind = spec.pop("kind", "mp")
    rng = Rng(seed, index)
    if len(shape) != 2:
        if kind != "mp":
            raise ManifestError(f"{entry['name']}: only 'mp' spectra apply to non-matrix tensors")
        return spec.get("entry_std", 0.02) * rng.normal(shape)
    rows, cols = shape
    if kind == "mp":
        _check_keys(spec, {"entry_std"}, entry["name"])
        return spec.get("entry_std", 0.02) * rng.normal(shape)
    if kind == "pareto":
        _check_keys(spec, {"alpha", "xmin", "n_tail"}, entry["name"])
        planted = PlantedSpectrumSpec(rows, cols, alpha=float(spec["alpha"]), xmin=float(spec.get("xmin", 1.0)),
                                      n_tail=spec.get("n_tail"), seed=0)
        s = planted.singular_values(rng)
    elif kind == "explicit":
        _check_keys(spec, {"values"}, entry["name"])
        s = PlantedSpectrumSpec(rows, cols, spectrum=spec["values"]).singular_values(rng)
    else:
        raise ManifestError(f"{entry['name']}: unknown spectrum kind {kind!r}")
    k = s.size
    return (random_orthonormal(rows, k, rng) * s) @ random_orthonormal(cols, k, rng).T


def synthesize(manifest: Mapping, path: str | os.PathLike) -> Path:
    """Write the fixture container a manifest describes."""
    entries = expand_manifest(manifest)
    seed = int(manifest.get("seed", 0))
    tensors = {e["name"]: (build_tensor(e, seed, i), e["dtype"]) for i, e in enumerate(entries)}
    meta = manifest.get("metadata") or {}
    return write_container(tensors, path, metadata=meta)


def load_manifest(path: str | os.PathLike) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON: {exc}") from exc
