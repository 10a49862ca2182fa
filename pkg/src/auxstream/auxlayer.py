"""The auxiliary layer: a node pool coupled one-to-one to erratic input features.

A designated hidden layer owns one node per known auxiliary feature plus a
pool of ordinary nodes.  Its input is the previous hidden activation
concatenated with the auxiliary feature values (absent ones zero-filled).
Each step the layer drops nodes two ways:

* selective dropout -- every node whose paired feature is absent this step is
  forced out;
* random dropout -- the leftover nodes drop independently with a probability
  chosen so the expected total drop count stays at `node_count * dropout_rate`.

Dropped nodes output exactly zero, so no gradient reaches their incoming or
outgoing weights, and weights fed by an absent feature see a zero input and
likewise receive zero gradient.  On top of that implicit freezing the layer
produces explicit freeze masks so the SGD update can assert the same thing.

When a feature never seen before arrives, the layer grows: one input slot,
one node, and the node's outgoing connections, all without touching any
existing parameter value.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn import DenseLayer, GradientBuffer, glorot_uniform

BERNOULLI = "bernoulli"
EXACT_COUNT = "exact_count"
RANDOM_DROP_MODES = (BERNOULLI, EXACT_COUNT)


@dataclass(frozen=True)
class DropoutMask:
    """Per-step partition of the layer's nodes into dropped and kept sets."""

    selective: frozenset
    random: frozenset
    kept: frozenset
    per_node_prob: float
    clamped: bool = False

    @property
    def dropped(self) -> frozenset:
        return self.selective | self.random

    def keep_vector(self, n: int, keep_scale: float = 1.0) -> np.ndarray:
        vec = np.full(n, keep_scale, dtype=float)
        for i in self.selective:
            vec[i] = 0.0
        for i in self.random:
            vec[i] = 0.0
        return vec


@dataclass
class AuxInput:
    """Input to the auxiliary layer: feature slots followed by the previous hidden output.

    `present_slots` records which slots actually carried a value this step
    (a delivered value of exactly 0.0 still counts as present).
    """

    aux_values: np.ndarray
    hidden_prev: np.ndarray
    concatenated: np.ndarray
    present_slots: tuple = ()


class AuxLayerState:
    """The auxiliary layer's weights plus the feature -> node registry.

    `layer` spans the concatenated input (one slot per registered feature, in
    registration order, then the previous hidden layer's output).  Slot i of
    the input belongs to the i-th registered feature; the registry maps each
    feature id to its dedicated node index.
    """

    def __init__(self, layer: DenseLayer, aux_ids, dropout_rate: float, position: int,
                 random_drop_mode: str = BERNOULLI):
        aux_ids = list(aux_ids)
        if len(set(aux_ids)) != len(aux_ids):
            raise ConfigError("duplicate auxiliary feature ids")
        if not 0.0 < dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must lie in (0, 1), got {dropout_rate}")
        if layer.out_dim < len(aux_ids):
            raise ConfigError(
                f"auxiliary layer too small: {layer.out_dim} nodes < {len(aux_ids)} "
                f"declared auxiliary features")
        if random_drop_mode not in RANDOM_DROP_MODES:
            raise ConfigError(f"unknown random drop mode {random_drop_mode!r}")
        if layer.out_dim * dropout_rate < len(aux_ids):
            warnings.warn(
                f"dropout capacity {layer.out_dim} * {dropout_rate} = "
                f"{layer.out_dim * dropout_rate:g} is below the declared auxiliary feature "
                f"count {len(aux_ids)}; steps with many absent features will clamp the "
                f"random-drop probability at 0", stacklevel=2)
        self.layer = layer
        self.aux_registry: dict = {fid: i for i, fid in enumerate(aux_ids)}
        self.dropout_rate = float(dropout_rate)
        self.position = int(position)
        self.random_drop_mode = random_drop_mode
        self.clamp_count = 0

    @property
    def node_count(self) -> int:
        return self.layer.out_dim

    @property
    def slot_count(self) -> int:
        return len(self.aux_registry)

    @property
    def non_aux_count(self) -> int:
        return self.node_count - len(self.aux_registry)

    @property
    def hidden_dim(self) -> int:
        return self.layer.in_dim - self.slot_count

    def slot_of(self, feature_id) -> int:
        """Input-slot index of a registered feature (registration order)."""
        for i, fid in enumerate(self.aux_registry):
            if fid == feature_id:
                return i
        raise KeyError(feature_id)


def build_aux_input(hidden_prev: np.ndarray, available: dict, state: AuxLayerState) -> AuxInput:
    """Assemble the layer input; slots of absent features are exactly zero."""
    hidden_prev = np.asarray(hidden_prev, dtype=float)
    if hidden_prev.shape != (state.hidden_dim,):
        raise ValueError(
            f"hidden input has length {hidden_prev.size}, layer expects {state.hidden_dim}")
    aux_values = np.zeros(state.slot_count)
    present = []
    for slot, fid in enumerate(state.aux_registry):
        if fid in available:
            aux_values[slot] = available[fid]
            present.append(slot)
    unknown = set(available) - set(state.aux_registry)
    if unknown:
        raise KeyError(
            f"unregistered auxiliary feature ids {sorted(map(repr, unknown))}; "
            f"register new features before building the layer input")
    return AuxInput(aux_values=aux_values, hidden_prev=hidden_prev,
                    concatenated=np.concatenate([aux_values, hidden_prev]),
                    present_slots=tuple(present))


def make_mask(state: AuxLayerState, available_ids, rng: np.random.Generator) -> DropoutMask:
    """Build the step's dropout mask from the set of available feature ids.

    The forced drops are the registered nodes whose feature is absent.  The
    leftover nodes drop with probability
    (node_count * rate - forced) / (node_count - forced), clamped to [0, 1];
    a clamp means too many features were absent for the configured rate, and
    is counted on the state.  One uniform draw is consumed per node index in
    increasing order, so draws for existing nodes do not move when the layer
    grows.
    """
    unknown = set(available_ids) - set(state.aux_registry)
    if unknown:
        raise KeyError(f"unregistered auxiliary feature ids {sorted(map(repr, unknown))}")
    selective = frozenset(node for fid, node in state.aux_registry.items()
                          if fid not in available_ids)
    n = state.node_count
    target = n * state.dropout_rate
    leftover = n - len(selective)
    clamped = False
    if leftover == 0:
        prob = 0.0
        clamped = len(selective) > target
    else:
        raw = (target - len(selective)) / leftover
        prob = min(max(raw, 0.0), 1.0)
        clamped = raw < 0.0
    if clamped:
        state.clamp_count += 1

    draws = rng.random(n)
    if state.random_drop_mode == BERNOULLI:
        random_set = frozenset(i for i in range(n)
                               if i not in selective and draws[i] < prob)
    else:
        # Drop exactly round(target) - forced of the leftover nodes, choosing
        # them by their per-node draws so the stream stays node-keyed.
        want = max(int(round(target)) - len(selective), 0)
        leftover_nodes = [i for i in range(n) if i not in selective]
        ranked = sorted(leftover_nodes, key=lambda i: draws[i])
        random_set = frozenset(ranked[:min(want, len(ranked))])
    kept = frozenset(range(n)) - selective - random_set
    return DropoutMask(selective=selective, random=random_set, kept=kept,
                       per_node_prob=prob, clamped=clamped)


def random_mask(n: int, rate: float, rng: np.random.Generator) -> DropoutMask:
    """Plain per-node random dropout (no feature coupling) at the given rate."""
    draws = rng.random(n)
    dropped = frozenset(i for i in range(n) if draws[i] < rate)
    return DropoutMask(selective=frozenset(), random=dropped,
                       kept=frozenset(range(n)) - dropped, per_node_prob=float(rate))


def masked_forward(state: AuxLayerState, aux_input: AuxInput, mask: DropoutMask,
                   keep_scale: float = 1.0) -> np.ndarray:
    """Forward pass with dropped nodes silenced to exactly zero (no rescaling by default).

    The pre-activation is accumulated in a growth-stable order: the
    previous-hidden block, then the columns of the features present this step,
    then the bias, each summed pairwise per node.  Growing the layer therefore
    reproduces old nodes' outputs bit for bit when the new feature is absent,
    which plain matrix-vector products do not guarantee.
    """
    layer = state.layer
    k = state.slot_count
    weights = layer.weights
    pre = np.sum(np.ascontiguousarray(weights[:, k:]) * aux_input.hidden_prev, axis=1)
    cols = list(aux_input.present_slots)
    if cols:
        pre = pre + np.sum(np.ascontiguousarray(weights[:, cols]) * aux_input.aux_values[cols],
                           axis=1)
    pre = pre + layer.bias
    keep = mask.keep_vector(state.node_count, keep_scale)
    return layer.forward_from_pre(aux_input.concatenated, pre, keep)


def masked_backward(state: AuxLayerState, upstream_grad: np.ndarray,
                    mask: DropoutMask | None = None) -> tuple[GradientBuffer, np.ndarray]:
    """Backward pass; returns the layer's gradient buffer and the gradient
    w.r.t. the previous hidden output (which flows only through kept nodes).

    The keep vector cached by the matching `masked_forward` call routes the
    gradients, so dropped nodes and absent-feature input slots come out with
    exactly zero entries; `mask` is accepted for documentation symmetry.
    """
    downstream = state.layer.backward(upstream_grad)
    return state.layer.grads, downstream[state.slot_count:]


def freeze_masks(state: AuxLayerState, mask: DropoutMask,
                 available_ids) -> tuple[np.ndarray, np.ndarray]:
    """Explicit freeze masks for the layer's incoming weights and bias.

    Frozen: every weight/bias entry of a dropped node, plus every weight
    column fed by an absent feature's input slot.  The masked forward/backward
    pair already produces zero gradients there; the explicit mask lets the
    update step (and the tests) assert it.
    """
    frozen_w = np.zeros_like(state.layer.weights, dtype=bool)
    frozen_b = np.zeros(state.node_count, dtype=bool)
    for node in mask.dropped:
        frozen_w[node, :] = True
        frozen_b[node] = True
    for slot, fid in enumerate(state.aux_registry):
        if fid not in available_ids:
            frozen_w[:, slot] = True
    return frozen_w, frozen_b


def register_sudden_feature(state: AuxLayerState, feature_id, rng: np.random.Generator,
                            next_layer: DenseLayer | None = None) -> int:
    """Grow the layer for a feature never seen before; returns its node index.

    Adds, in this order: the feature's input column (its connection to every
    existing node), the new node's full input row, a zero bias entry, and --
    when `next_layer` is given -- the node's outgoing column in the consumer
    layer.  New values use the same fan-scaled initializer as construction,
    sized by the grown dimensions.  Every pre-existing parameter keeps its
    exact value.
    """
    if feature_id in state.aux_registry:
        raise ConfigError(f"auxiliary feature {feature_id!r} is already registered")
    layer = state.layer
    slot = state.slot_count
    new_in = layer.in_dim + 1
    new_out = layer.out_dim + 1
    limit = np.sqrt(6.0 / (new_in + new_out))
    column = rng.uniform(-limit, limit, size=layer.out_dim)
    layer.insert_input(slot, column)
    row = rng.uniform(-limit, limit, size=layer.in_dim)
    layer.append_output(row, bias_value=0.0)
    node = layer.out_dim - 1
    state.aux_registry[feature_id] = node
    if next_layer is not None:
        out_limit = np.sqrt(6.0 / (next_layer.in_dim + 1 + next_layer.out_dim))
        next_layer.insert_input(node, rng.uniform(-out_limit, out_limit,
                                                  size=next_layer.out_dim))
    return node


@dataclass(frozen=True)
class ParamCountReport:
    """Parameter counts: the plain backbone, the backbone plus auxiliary
    input connections, and the extra parameters a per-feature dedicated-layer
    design would need on the same dimensions."""

    backbone: int
    with_aux: int
    dedicated_layer_extra: int


def param_count(n_aux_max: int, aux_nodes: int, *, depth: int, width: int, position: int,
                n_base: int, n_classes: int = 2, backbone: str = "ogd") -> ParamCountReport:
    """Count parameters for a backbone of `depth` hidden layers of `width`
    nodes whose layer at `position` (1-based) is the auxiliary layer with
    `aux_nodes` nodes.

    The plain-backbone count excludes the auxiliary input connections; wiring
    in `n_aux_max` features adds exactly `n_aux_max * aux_nodes` weights.  The
    dedicated-layer alternative is reported as
    n_aux_max * width + n_aux_max * width * aux_nodes for comparison output.
    """
    if not 1 <= position <= depth:
        raise ConfigError(f"auxiliary layer position {position} outside 1..{depth}")
    total = 0
    head_inputs = []
    prev = n_base
    for i in range(1, depth + 1):
        out = aux_nodes if i == position else width
        total += out * prev + out
        if i != position:
            head_inputs.append(out)
        prev = out
    if backbone == "ogd":
        last = aux_nodes if position == depth else width
        total += n_classes * last + n_classes
    elif backbone == "odl":
        for w in head_inputs:
            total += n_classes * w + n_classes
    else:
        raise ConfigError(f"unknown backbone {backbone!r}")
    with_aux = total + n_aux_max * aux_nodes
    extra = n_aux_max * width + n_aux_max * width * aux_nodes
    return ParamCountReport(backbone=total, with_aux=with_aux, dedicated_layer_extra=extra)
