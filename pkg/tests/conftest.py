import os
from pathlib import Path

import numpy as np
import pytest

from auxstream.harness import ExperimentConfig
from auxstream.streams import HaphazardInstance, StreamSpec


def dataset_dir() -> Path:
    return Path(os.environ.get("AUXSTREAM_DATA", Path(__file__).resolve().parent.parent / "data"))


def dataset_path(filename: str) -> Path:
    """Path of a benchmark data file, or skip the test when it is absent."""
    path = dataset_dir() / filename
    if not path.exists():
        pytest.skip(f"dataset file {path} not present (see README for the expected layout)")
    return path


def make_instance(t, base, aux, label) -> HaphazardInstance:
    return HaphazardInstance(t=t, base=np.asarray(base, dtype=float), aux=dict(aux),
                             label=int(label))


def synthetic_config(name="synth", *, p=0.75, n=1500, features=10, data_seed=3,
                     corruption="bernoulli", n_runs=3, base_seed=10, backbone="odl",
                     depth=3, width=16, aux_nodes=32, position=2, learning_rate=0.1,
                     dropout=0.3, **extra) -> ExperimentConfig:
    """A small, fast experiment on a deterministic synthetic table."""
    model = {"backbone": backbone, "depth": depth, "width": width, "aux_nodes": aux_nodes,
             "position": position, "dropout": dropout, "learning_rate": learning_rate}
    model.update(extra.pop("model", {}))
    spec = StreamSpec(path=f"synthetic://n={n}&features={features}&seed={data_seed}",
                      base_indices=2, corruption=corruption, p=p)
    return ExperimentConfig(name=name, stream=spec, model=model, n_runs=n_runs,
                            base_seed=base_seed, **extra)
