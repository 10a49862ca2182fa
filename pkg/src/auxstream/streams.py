"""Dataset ingestion and haphazard-stream synthesis.

A stream is a labelled table plus a corruption mode that decides, per step,
which auxiliary columns are delivered.  Base columns are always delivered.
Corruption only hides values, it never alters them, and every random choice
is keyed by (stream seed, feature, step) so a spec reproduces the same
instance sequence byte for byte regardless of what else consumes randomness.

Supported corruption modes:

* ``none``        -- every auxiliary feature present at every step;
* ``bernoulli``   -- each auxiliary feature present independently with
                     probability p at each step;
* ``trapezoidal`` -- the stream is cut into equal chunks and chunk i exposes
                     a growing prefix of the feature columns;
* ``schedule``    -- explicit per-feature arrival windows (features behave as
                     sudden, then obsolete).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataFormatError

DENSE = "dense"
SPARSE = "sparse"
CORRUPTIONS = ("none", "bernoulli", "trapezoidal", "schedule")

_SHUFFLE_KEY = 7
_AVAIL_KEY = 11
_SYNTH_KEY = 97


@dataclass
class HaphazardInstance:
    """One stream step: fixed-width base vector, sparse auxiliary map, label."""

    t: int
    base: np.ndarray
    aux: dict
    label: int


@dataclass(frozen=True)
class ScheduleWindow:
    """Arrival window for one auxiliary feature, by its 1-based rank among the
    auxiliary columns; covers steps t with start <= t < end (t is 1-based)."""

    feature: int
    start: int
    end: int

    def __post_init__(self):
        if self.feature < 1:
            raise ConfigError(f"window feature rank must be >= 1, got {self.feature}")
        if not 1 <= self.start < self.end:
            raise ConfigError(f"window needs 1 <= start < end, got [{self.start}, {self.end})")


@dataclass
class StreamSpec:
    path: str
    fmt: str = DENSE
    label_position: str = "last"
    label_map: dict | None = None
    feature_limit: int | None = None
    base_indices: object = 2          # int k = first k columns, or an explicit list
    corruption: str = "none"
    p: float = 1.0
    chunks: int = 10
    windows: tuple = ()
    schedule_preset: str | None = None
    seed: int = 0
    shuffle: bool = False
    limit: int | None = None
    standardize: bool = False

    def validate(self) -> None:
        if self.fmt not in (DENSE, SPARSE):
            raise ConfigError(f"unknown format {self.fmt!r}")
        if self.corruption not in CORRUPTIONS:
            raise ConfigError(f"unknown corruption {self.corruption!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"availability probability must lie in [0, 1], got {self.p}")
        if self.chunks < 1:
            raise ConfigError(f"chunks must be >= 1, got {self.chunks}")


# -- loaders ----------------------------------------------------------------


def _map_labels(tokens: list[str], label_map: dict | None) -> np.ndarray:
    if label_map:
        table = {str(k): int(v) for k, v in label_map.items()}
        try:
            return np.array([table[tok] for tok in tokens], dtype=int)
        except KeyError as exc:
            raise DataFormatError(f"label {exc.args[0]!r} missing from label_map") from None
    try:
        values = [float(tok) for tok in tokens]
        order = {v: i for i, v in enumerate(sorted(set(values)))}
        return np.array([order[v] for v in values], dtype=int)
    except ValueError:
        order = {v: i for i, v in enumerate(sorted(set(tokens)))}
        return np.array([order[tok] for tok in tokens], dtype=int)


def load_dense(path: str, label_position: str = "last", label_map: dict | None = None,
               feature_limit: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Read a delimited text table, one instance per line, label first or last."""
    if label_position not in ("first", "last"):
        raise ConfigError(f"label_position must be 'first' or 'last', got {label_position!r}")
    rows: list[list[float]] = []
    labels: list[str] = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            tokens = [t for t in line.replace(",", " ").split() if t]
            if width is None:
                width = len(tokens)
            elif len(tokens) != width:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {width} columns, found {len(tokens)}")
            if len(tokens) < 2:
                raise DataFormatError(f"{path}:{lineno}: need at least one feature and a label")
            if label_position == "first":
                label, feats = tokens[0], tokens[1:]
            else:
                label, feats = tokens[-1], tokens[:-1]
            try:
                rows.append([float(t) for t in feats])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
            labels.append(label)
    if not rows:
        raise DataFormatError(f"{path}: no instances found")
    table = np.array(rows, dtype=float)
    if feature_limit is not None:
        table = table[:, :feature_limit]
    return table, _map_labels(labels, label_map)


def load_sparse(path: str, n_features: int | None = None,
                label_map: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Read 'label idx:val idx:val ...' lines with 1-based, strictly ascending indices."""
    entries: list[list[tuple[int, float]]] = []
    labels: list[str] = []
    max_index = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            labels.append(tokens[0])
            pairs = []
            last = 0
            for tok in tokens[1:]:
                try:
                    idx_s, val_s = tok.split(":", 1)
                    idx, val = int(idx_s), float(val_s)
                except ValueError:
                    raise DataFormatError(f"{path}:{lineno}: malformed pair {tok!r}") from None
                if idx <= last:
                    raise DataFormatError(
                        f"{path}:{lineno}: indices must be 1-based and strictly ascending "
                        f"({idx} after {last})")
                last = idx
                pairs.append((idx, val))
                max_index = max(max_index, idx)
            entries.append(pairs)
    if not entries:
        raise DataFormatError(f"{path}: no instances found")
    dim = n_features if n_features is not None else max_index
    if max_index > dim:
        raise DataFormatError(f"{path}: index {max_index} exceeds declared width {dim}")
    table = np.zeros((len(entries), dim))
    for row, pairs in enumerate(entries):
        for idx, val in pairs:
            table[row, idx - 1] = val
    return table, _map_labels(labels, label_map)


def _synthetic_table(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic labelled table from a 'synthetic://k=v&k=v' pseudo-path.

    Parameters: n (rows), features, seed.  Labels follow a noisy linear
    teacher over all columns, so models that see more columns can do better.
    """
    params = {"n": 500, "features": 10, "seed": 0}
    body = path.split("://", 1)[1] if "://" in path else path.split(":", 1)[1]
    for part in filter(None, body.split("&")):
        try:
            key, value = part.split("=", 1)
            params[key.strip()] = int(value)
        except (ValueError, KeyError):
            raise ConfigError(f"bad synthetic table parameter {part!r}") from None
    n, f, seed = params["n"], params["features"], params["seed"]
    if n < 1 or f < 1:
        raise ConfigError("synthetic table needs n >= 1 and features >= 1")
    rng = np.random.default_rng([seed, _SYNTH_KEY])
    table = rng.normal(size=(n, f))
    teacher = rng.normal(size=f)
    score = table @ teacher / np.sqrt(f)
    prob = 1.0 / (1.0 + np.exp(-2.0 * score))
    labels = (rng.random(n) < prob).astype(int)
    return table, labels


def load_table(spec: StreamSpec) -> tuple[np.ndarray, np.ndarray]:
    spec.validate()
    if spec.path.startswith("synthetic:"):
        return _synthetic_table(spec.path)
    if spec.fmt == SPARSE:
        return load_sparse(spec.path, n_features=spec.feature_limit, label_map=spec.label_map)
    return load_dense(spec.path, label_position=spec.label_position,
                      label_map=spec.label_map, feature_limit=spec.feature_limit)


# -- column split -----------------------------------------------------------


def split_base_aux(n_features: int, base_indices) -> tuple[list[int], list[int]]:
    """Partition column indices into (base, auxiliary); auxiliary is the rest."""
    if isinstance(base_indices, int):
        base = list(range(base_indices))
    else:
        base = [int(i) for i in base_indices]
    if not base:
        raise ConfigError(
            "base feature set is empty: at least one always-available base feature is required")
    if len(set(base)) != len(base) or min(base) < 0 or max(base) >= n_features:
        raise ConfigError(f"base column indices {base} invalid for {n_features} features")
    aux = [c for c in range(n_features) if c not in set(base)]
    return base, aux


# -- corruption -------------------------------------------------------------


def trapezoid_cumulative(n_features: int, chunks: int) -> list[int]:
    """Features exposed by each chunk: round-half-up of i * n / chunks."""
    return [min(int(np.floor(i * n_features / chunks + 0.5)), n_features)
            for i in range(1, chunks + 1)]


def schedule_windows(preset: str, n_aux: int) -> tuple[ScheduleWindow, ...]:
    """Built-in arrival schedules: staggered windows where auxiliary feature k
    arrives at k * step and stays for span steps."""
    presets = {"susy": (100_000, 400_000), "higgs": (50_000, 200_000)}
    if preset not in presets:
        raise ConfigError(f"unknown schedule preset {preset!r}")
    step, span = presets[preset]
    return tuple(ScheduleWindow(k, step * k, step * k + span) for k in range(1, n_aux + 1))


def schedule_available(windows, t: int) -> set[int]:
    """Feature ranks whose window covers 1-based step t."""
    return {w.feature for w in windows if w.start <= t < w.end}


class _OnlineStandardizer:
    """Per-column running mean/variance using only previously emitted values."""

    def __init__(self, n_columns: int):
        self.count = np.zeros(n_columns)
        self.mean = np.zeros(n_columns)
        self.m2 = np.zeros(n_columns)

    def transform(self, col: int, value: float) -> float:
        if self.count[col] < 2:
            return value - self.mean[col]
        std = np.sqrt(self.m2[col] / (self.count[col] - 1))
        return (value - self.mean[col]) / max(std, 1e-8)

    def update(self, col: int, value: float) -> None:
        self.count[col] += 1
        delta = value - self.mean[col]
        self.mean[col] += delta / self.count[col]
        self.m2[col] += delta * (value - self.mean[col])


def stream_instances(table: np.ndarray, labels: np.ndarray,
                     spec: StreamSpec) -> Iterator[HaphazardInstance]:
    """Emit the corrupted instance sequence for a labelled table.

    Auxiliary feature ids are the original column indices.  Availability is a
    pure function of (spec.seed, column, emitted step), so iteration order and
    model-side randomness cannot perturb it.
    """
    spec.validate()
    n_rows, n_features = table.shape
    base_cols, aux_cols = split_base_aux(n_features, spec.base_indices)
    order = np.arange(n_rows)
    if spec.shuffle:
        order = np.random.default_rng([spec.seed, _SHUFFLE_KEY]).permutation(n_rows)
    n_emit = min(spec.limit, n_rows) if spec.limit is not None else n_rows

    if spec.corruption == "bernoulli":
        avail = np.zeros((n_emit, len(aux_cols)), dtype=bool)
        for j, col in enumerate(aux_cols):
            draws = np.random.default_rng([spec.seed, _AVAIL_KEY, col]).random(n_emit)
            avail[:, j] = draws < spec.p
    elif spec.corruption == "trapezoidal":
        if n_rows < spec.chunks:
            raise ConfigError(f"{n_rows} instances cannot form {spec.chunks} chunks")
        cumulative = trapezoid_cumulative(n_features, spec.chunks)
        chunk_len = n_rows // spec.chunks
    elif spec.corruption == "schedule":
        windows = tuple(spec.windows)
        if spec.schedule_preset:
            windows = windows + schedule_windows(spec.schedule_preset, len(aux_cols))
        if not windows:
            raise ConfigError("schedule corruption needs windows or a schedule preset")
        for w in windows:
            if w.feature > len(aux_cols):
                raise ConfigError(f"window feature rank {w.feature} exceeds "
                                  f"{len(aux_cols)} auxiliary columns")
            if w.end > n_rows + 1:
                raise ConfigError(f"window [{w.start}, {w.end}) exceeds stream length {n_rows}")

    scaler = _OnlineStandardizer(n_features) if spec.standardize else None

    for i in range(n_emit):
        row = table[order[i]]
        t = i + 1
        if spec.corruption == "none":
            present = list(range(len(aux_cols)))
        elif spec.corruption == "bernoulli":
            present = [j for j in range(len(aux_cols)) if avail[i, j]]
        elif spec.corruption == "trapezoidal":
            exposed = cumulative[min(i // chunk_len, spec.chunks - 1)]
            present = [j for j, col in enumerate(aux_cols) if col < exposed]
        else:
            ranks = schedule_available(windows, t)
            present = [j for j in range(len(aux_cols)) if (j + 1) in ranks]

        base = row[base_cols].astype(float).copy()
        aux = {aux_cols[j]: float(row[aux_cols[j]]) for j in present}
        if scaler is not None:
            base = np.array([scaler.transform(c, v) for c, v in zip(base_cols, base)])
            aux = {c: scaler.transform(c, v) for c, v in aux.items()}
            for c, v in zip(base_cols, row[base_cols]):
                scaler.update(c, float(v))
            for c in aux:
                scaler.update(c, float(row[c]))
        yield HaphazardInstance(t=t, base=base, aux=aux, label=int(labels[order[i]]))


def bernoulli_stream(table, labels, spec: StreamSpec) -> Iterator[HaphazardInstance]:
    if spec.corruption != "bernoulli":
        raise ConfigError("bernoulli_stream needs corruption = 'bernoulli'")
    return stream_instances(table, labels, spec)


def trapezoidal_stream(table, labels, spec: StreamSpec) -> Iterator[HaphazardInstance]:
    if spec.corruption != "trapezoidal":
        raise ConfigError("trapezoidal_stream needs corruption = 'trapezoidal'")
    return stream_instances(table, labels, spec)


def schedule_stream(table, labels, spec: StreamSpec) -> Iterator[HaphazardInstance]:
    if spec.corruption != "schedule":
        raise ConfigError("schedule_stream needs corruption = 'schedule'")
    return stream_instances(table, labels, spec)
