import json

import numpy as np
import pytest

from paramscope.synth import Rng, synthesize, write_container

ATTN = {
    "self_attn.q_proj.weight": [64, 64],
    "self_attn.k_proj.weight": [64, 64],
    "self_attn.v_proj.weight": [64, 64],
    "self_attn.o_proj.weight": [64, 64],
}
MLP = {
    "mlp.up_proj.weight": [128, 64],
    "mlp.down_proj.weight": [64, 128],
}

MODEL_36 = {
    "seed": 11,
    "dtype": "F32",
    "layers": {
        "count": 36,
        "prefix": "model.layers",
        "modules": {**ATTN, **MLP},
        "spectrum": {"kind": "pareto", "alpha": 3.0, "xmin": 1.0},
    },
    "tensors": [
        {"name": "model.norm.weight", "shape": [64], "spectrum": {"kind": "mp", "entry_std": 1.0}},
    ],
}


BIMODAL_100 = {
    "seed": 3,
    "dtype": "F32",
    "layers": {
        "count": 100,
        "prefix": "model.layers",
        "modules": {"mlp.up_proj.weight": [128, 256]},
        "spectrum": {"kind": "pareto", "alpha": 2.5},
        "overrides": {"50-99": {"kind": "pareto", "alpha": 5.5}},
    },
}

ATTN_SUFFIXES = [f"self_attn.{p}_proj.weight" for p in "qkvo"]


def write_ancestor_pair(directory, deep_layers=range(2, 21), n_layers=36, size=64, seed=5,
                        deep=(0.4, 1.3), conservative=(1.0, 0.2)):
    """Ancestor plus one descendant ``a * W0 + b * N`` per attention matrix, with
    ``N`` independent noise at the scale of ``W0``.

    ``(0.4, 1.3)`` gives roughly 143% relative change at correlation 0.3;
    ``(1.0, 0.2)`` gives about 20% at correlation 0.98.
    """
    base, target = {}, {}
    for i in range(n_layers):
        a, b = deep if i in deep_layers else conservative
        for j, suffix in enumerate(ATTN_SUFFIXES):
            name = f"model.layers.{i}.{suffix}"
            w0 = 0.02 * Rng(seed, i, j, 0).normal((size, size))
            noise = 0.02 * Rng(seed, i, j, 1).normal((size, size))
            base[name] = (w0, "F64")
            target[name] = (a * w0 + b * noise, "F64")
    return (
        write_container(base, directory / "ancestor.safetensors"),
        write_container(target, directory / "descendant.safetensors"),
    )


@pytest.fixture(scope="session")
def deep_zone_pair(tmp_path_factory):
    return write_ancestor_pair(tmp_path_factory.mktemp("deep"))


@pytest.fixture(scope="session")
def model36(tmp_path_factory):
    path = tmp_path_factory.mktemp("fixtures") / "model36.safetensors"
    synthesize(MODEL_36, path)
    return path


@pytest.fixture
def write_manifest(tmp_path):
    def _write(doc, name="manifest.json"):
        p = tmp_path / name
        p.write_text(json.dumps(doc))
        return p

    return _write


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance results, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
