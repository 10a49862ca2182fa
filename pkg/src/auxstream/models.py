"""Online backbones and the auxiliary-dropout wrapper around them.

Two backbones are supported.  "ogd" is a plain deep net trained by per-instance
SGD, predicting from the last hidden layer.  "odl" attaches a classifier head
to every eligible hidden layer and combines the per-head softmax outputs with
multiplicative ("hedge") weights: each head is trained on its own
cross-entropy, shared hidden layers accumulate the heads' gradients scaled by
their weights, and the weights themselves are discounted by beta**loss,
floored at smoothing/L, and renormalized every step.

The auxiliary layer is spliced in at a configurable hidden position; in the
"odl" backbone that layer carries no head because its node count can change
mid-stream.  Every step is predict-then-train: the model commits to a
prediction, the label is revealed, and one SGD update follows.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import auxlayer
from .auxlayer import AuxLayerState, DropoutMask, build_aux_input, freeze_masks, make_mask, \
    masked_backward, masked_forward, random_mask, register_sudden_feature
from .errors import ConfigError, RunAbortError
from .nn import ClassifierHead, DenseLayer, GradCheckBlock, GradCheckReport, RELU, \
    finite_diff_check as _finite_diff_check, softmax

OGD = "ogd"
ODL = "odl"
BACKBONES = (OGD, ODL)

# Dropout strategies.  AUXDROP is the full mechanism: forced drops for absent
# features plus rate-balancing random drops, auxiliary layer only.  The rest
# are ablation variants: RDANDO random-drops the auxiliary layer without the
# forced coupling; RDAL random-drops every hidden layer; ADARDO keeps the full
# mechanism on the auxiliary layer and random-drops the others; RDIFL removes
# the auxiliary layer entirely, feeds all features (absent ones zero-filled)
# into the first layer, and random-drops that layer.
AUXDROP = "AUXDROP"
RDANDO = "RDANDO"
RDAL = "RDAL"
ADARDO = "ADARDO"
RDIFL = "RDIFL"
STRATEGIES = (AUXDROP, RDANDO, RDAL, ADARDO, RDIFL)

_INIT_KEY = 11
_MASK_KEY = 31


@dataclass
class ModelConfig:
    n_base: int
    backbone: str = ODL
    depth: int = 6
    width: int = 50
    aux_nodes: int = 100
    position: int = 3
    dropout: float = 0.3
    learning_rate: float = 0.01
    discount: float = 0.99
    smoothing: float = 0.2
    strategy: str = AUXDROP
    n_classes: int = 2
    aux_ids: tuple = ()
    activation: str = RELU
    rescale_kept: bool = False
    aux_enabled: bool = True
    random_drop_mode: str = auxlayer.BERNOULLI


@dataclass
class MaskPlan:
    """Per-step dropout decisions: the auxiliary layer's mask plus plain
    random masks for any other layer the strategy touches (0-based indices)."""

    masks: dict[int, DropoutMask] = field(default_factory=dict)
    aux_index: int | None = None

    @property
    def aux(self) -> DropoutMask | None:
        return self.masks.get(self.aux_index) if self.aux_index is not None else None


@dataclass
class StepResult:
    step: int
    loss: float
    predicted: int
    error: bool
    clamped: bool = False
    per_head_losses: tuple = ()


class AuxDropModel:
    """A backbone plus (optionally) an auxiliary layer, stepped one instance at a time."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = int(seed)
        self.init_rng = np.random.default_rng([self.seed, _INIT_KEY])
        self.layers: list[DenseLayer] = []
        self.heads: list[ClassifierHead] = []
        self.head_layers: list[int] = []
        self.aux: AuxLayerState | None = None
        self.alphas: np.ndarray | None = None
        self.step_count = 0
        self._rdifl_slots: dict = {}
        self._build()

    # -- construction -----------------------------------------------------

    def _build(self) -> None:
        cfg = self.config
        rng = self.init_rng
        has_aux_layer = cfg.aux_enabled and cfg.strategy != RDIFL
        if cfg.strategy == RDIFL:
            self._rdifl_slots = {fid: i for i, fid in enumerate(cfg.aux_ids)}
        in_dim = cfg.n_base
        if cfg.strategy == RDIFL and cfg.aux_enabled:
            in_dim += len(cfg.aux_ids)
        prev = in_dim
        for i in range(1, cfg.depth + 1):
            if has_aux_layer and i == cfg.position:
                layer = DenseLayer(len(cfg.aux_ids) + prev, cfg.aux_nodes,
                                   cfg.activation, rng=rng, name=f"hidden{i}(aux)")
                self.aux = AuxLayerState(layer, cfg.aux_ids, cfg.dropout, cfg.position,
                                         random_drop_mode=cfg.random_drop_mode)
                prev = cfg.aux_nodes
            else:
                layer = DenseLayer(prev, cfg.width, cfg.activation, rng=rng, name=f"hidden{i}")
                prev = cfg.width
            self.layers.append(layer)
        if cfg.backbone == OGD:
            self.heads = [ClassifierHead(prev, cfg.n_classes, rng=rng, name="head")]
            self.head_layers = [cfg.depth - 1]
        else:
            for i, layer in enumerate(self.layers):
                if has_aux_layer and i == cfg.position - 1:
                    continue
                self.heads.append(ClassifierHead(layer.out_dim, cfg.n_classes, rng=rng,
                                                 name=f"head{i + 1}"))
                self.head_layers.append(i)
            self.alphas = np.full(len(self.heads), 1.0 / len(self.heads))

    @property
    def aux_layer_index(self) -> int | None:
        return self.config.position - 1 if self.aux is not None else None

    @property
    def n_params(self) -> int:
        return sum(l.n_params for l in self.layers) + sum(h.n_params for h in self.heads)

    @property
    def clamp_count(self) -> int:
        return self.aux.clamp_count if self.aux is not None else 0

    def parameter_blocks(self):
        for layer in self.layers:
            yield layer
        for head in self.heads:
            yield head

    # -- per-step RNG -----------------------------------------------------

    def mask_rng(self, step: int, layer_index: int) -> np.random.Generator:
        """Fresh generator keyed by (seed, layer, step): mask draws never depend
        on how many draws other layers or other steps consumed."""
        return np.random.default_rng([self.seed, _MASK_KEY, layer_index, int(step)])


def build_model(config: ModelConfig, seed: int) -> AuxDropModel:
    """Validate a configuration and construct the model."""
    cfg = config
    if cfg.backbone not in BACKBONES:
        raise ConfigError(f"unknown backbone {cfg.backbone!r}")
    if cfg.strategy not in STRATEGIES:
        raise ConfigError(f"unknown dropout strategy {cfg.strategy!r}")
    if cfg.n_base < 1:
        raise ConfigError("n_base >= 1 is required: at least one always-present base feature")
    if cfg.depth < 1:
        raise ConfigError(f"depth >= 1 violated: depth={cfg.depth}")
    if cfg.width < 1:
        raise ConfigError(f"width >= 1 violated: width={cfg.width}")
    if cfg.n_classes < 2:
        raise ConfigError(f"n_classes >= 2 violated: n_classes={cfg.n_classes}")
    if cfg.learning_rate <= 0:
        raise ConfigError(f"learning_rate > 0 violated: learning_rate={cfg.learning_rate}")
    uses_dropout = cfg.aux_enabled or cfg.strategy in (RDAL, ADARDO)
    if uses_dropout and not 0.0 < cfg.dropout < 1.0:
        raise ConfigError(f"0 < dropout < 1 violated: dropout={cfg.dropout}")
    if cfg.backbone == ODL:
        if not 0.0 < cfg.discount <= 1.0:
            raise ConfigError(f"0 < discount <= 1 violated: discount={cfg.discount}")
        if not 0.0 <= cfg.smoothing < 1.0:
            raise ConfigError(f"0 <= smoothing < 1 violated: smoothing={cfg.smoothing}")
    if cfg.aux_enabled and cfg.strategy != RDIFL:
        if not 1 <= cfg.position <= cfg.depth:
            raise ConfigError(
                f"1 <= position <= depth violated: position={cfg.position}, depth={cfg.depth}")
        if cfg.backbone == ODL and cfg.position == cfg.depth:
            raise ConfigError(
                "position <= depth - 1 violated for the odl backbone: the auxiliary "
                "layer carries no head, so it must feed a later layer")
        if cfg.aux_nodes < max(1, len(cfg.aux_ids)):
            raise ConfigError(
                f"aux_nodes >= declared auxiliary features violated: "
                f"aux_nodes={cfg.aux_nodes}, declared={len(cfg.aux_ids)}")
    return AuxDropModel(cfg, seed)


def ablation_strategy(model: AuxDropModel, strategy: str) -> str:
    """Switch a built model's mask policy; wiring-incompatible switches are errors."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown dropout strategy {strategy!r}")
    built_rdifl = model.aux is None and model.config.strategy == RDIFL
    if (strategy == RDIFL) != built_rdifl:
        raise ConfigError(
            "RDIFL rewires the input layer; build the model with the target strategy instead")
    model.config = replace(model.config, strategy=strategy)
    return strategy


# -- masks ----------------------------------------------------------------


def plan_masks(model: AuxDropModel, available_ids, step: int) -> MaskPlan:
    """Build this step's dropout decisions according to the model's strategy."""
    cfg = model.config
    plan = MaskPlan(aux_index=model.aux_layer_index)
    if not cfg.aux_enabled:
        return plan
    d = cfg.dropout
    if cfg.strategy == RDIFL:
        plan.masks[0] = random_mask(model.layers[0].out_dim, d, model.mask_rng(step, 0))
        return plan
    z = model.aux_layer_index
    for i, layer in enumerate(model.layers):
        rng = model.mask_rng(step, i)
        if i == z:
            if cfg.strategy in (AUXDROP, ADARDO):
                plan.masks[i] = make_mask(model.aux, available_ids, rng)
            else:  # RDANDO, RDAL: no forced coupling
                plan.masks[i] = random_mask(layer.out_dim, d, rng)
        elif cfg.strategy in (RDAL, ADARDO):
            plan.masks[i] = random_mask(layer.out_dim, d, rng)
    return plan


def _keep_vector(model: AuxDropModel, mask: DropoutMask, n: int) -> np.ndarray:
    scale = 1.0
    if model.config.rescale_kept:
        scale = 1.0 / (1.0 - model.config.dropout)
    return mask.keep_vector(n, scale)


# -- forward / predict ----------------------------------------------------


def _input_vector(model: AuxDropModel, instance) -> np.ndarray:
    base = np.asarray(instance.base, dtype=float)
    if base.shape != (model.config.n_base,):
        raise ValueError(
            f"instance has {base.size} base features, model expects {model.config.n_base}")
    if model.config.strategy == RDIFL and model.config.aux_enabled:
        aux_vec = np.zeros(len(model._rdifl_slots))
        for fid, value in instance.aux.items():
            if fid not in model._rdifl_slots:
                raise ConfigError(
                    f"feature {fid!r} was not declared; the RDIFL wiring has a fixed "
                    f"input width and cannot grow")
            aux_vec[model._rdifl_slots[fid]] = value
        return np.concatenate([base, aux_vec])
    return base


def _forward(model: AuxDropModel, instance, plan: MaskPlan) -> tuple[np.ndarray, list]:
    """Run the shared stack and heads; returns (combined probabilities, per-head logits)."""
    h = _input_vector(model, instance)
    z = model.aux_layer_index
    outputs = []
    for i, layer in enumerate(model.layers):
        mask = plan.masks.get(i)
        if i == z:
            aux_in = build_aux_input(h, instance.aux, model.aux)
            h = masked_forward(model.aux, aux_in, mask,
                               keep_scale=1.0 / (1.0 - model.config.dropout)
                               if model.config.rescale_kept else 1.0)
        else:
            keep = _keep_vector(model, mask, layer.out_dim) if mask is not None else None
            h = layer.forward(h, keep=keep)
        outputs.append(h)
    head_logits = [head.forward(outputs[idx]) for head, idx in zip(model.heads, model.head_layers)]
    if model.config.backbone == OGD:
        probs = softmax(head_logits[0])
    else:
        probs = np.zeros(model.config.n_classes)
        for alpha, logits in zip(model.alphas, head_logits):
            probs += alpha * softmax(logits)
    return probs, head_logits


def predict(model: AuxDropModel, instance, masks: MaskPlan | None = None):
    """Commit to a prediction for one instance; the combined probabilities sum to 1."""
    if masks is None:
        masks = plan_masks(model, set(instance.aux), instance.t)
    return _forward(model, instance, masks)


def _instance_loss(probs: np.ndarray, label: int) -> float:
    return -float(np.log(max(probs[label], 1e-300)))


def evaluate_objective(model: AuxDropModel, instance, masks: MaskPlan) -> float:
    """The scalar the analytic gradients differentiate, recomputed without
    touching parameters or hedge weights (used by the gradient checker)."""
    probs, head_logits = _forward(model, instance, masks)
    if model.config.backbone == OGD:
        return _instance_loss(probs, instance.label)
    total = 0.0
    for alpha, logits in zip(model.alphas, head_logits):
        total += alpha * _instance_loss(softmax(logits), instance.label)
    return total


# -- backward / update ----------------------------------------------------


def odl_backward(model: AuxDropModel, head_grads: list[np.ndarray],
                 alphas: np.ndarray) -> None:
    """Accumulate gradients for the multi-head backbone.

    Each head's own parameters receive its unscaled cross-entropy gradient;
    every shared hidden layer receives the sum of the downstream heads'
    contributions, each scaled by that head's combination weight.
    """
    head_down: dict[int, np.ndarray] = {}
    for head, layer_idx, g, alpha in zip(model.heads, model.head_layers, head_grads, alphas):
        down = head.backward(g)
        head_down[layer_idx] = head_down.get(layer_idx, 0.0) + alpha * down
    delta = np.zeros(model.layers[-1].out_dim)
    z = model.aux_layer_index
    for i in range(len(model.layers) - 1, -1, -1):
        if i in head_down:
            delta = delta + head_down[i]
        if i == z:
            _, delta = masked_backward(model.aux, delta, None)
        else:
            delta = model.layers[i].backward(delta)


def _backward(model: AuxDropModel, probs: np.ndarray, head_logits: list, label: int) -> None:
    if model.config.backbone == OGD:
        grad = probs.copy()
        grad[label] -= 1.0
        delta = model.heads[0].backward(grad)
        z = model.aux_layer_index
        for i in range(len(model.layers) - 1, -1, -1):
            if i == z:
                _, delta = masked_backward(model.aux, delta, None)
            else:
                delta = model.layers[i].backward(delta)
    else:
        grads = []
        for logits in head_logits:
            g = softmax(logits)
            g[label] -= 1.0
            grads.append(g)
        odl_backward(model, grads, model.alphas)


def _zero_grads(model: AuxDropModel) -> None:
    for block in model.parameter_blocks():
        block.zero_grads()


def _apply_updates(model: AuxDropModel, plan: MaskPlan, available_ids) -> None:
    lr = model.config.learning_rate
    z = model.aux_layer_index
    for i, layer in enumerate(model.layers):
        if i == z:
            fw, fb = freeze_masks(model.aux, plan.masks[i], available_ids)
            layer.apply_sgd(lr, freeze_weights=fw, freeze_bias=fb)
        else:
            layer.apply_sgd(lr)
    for head in model.heads:
        head.apply_sgd(lr)


def hedge_update(alphas: np.ndarray, per_head_losses, discount: float,
                 smoothing: float) -> np.ndarray:
    """Discount each weight by discount**loss (losses clipped to [0, 1] first),
    floor at smoothing/L, renormalize to sum 1.  Returns the new weights."""
    losses = np.clip(np.asarray(per_head_losses, dtype=float), 0.0, 1.0)
    if losses.shape != alphas.shape:
        raise ValueError("one loss per head is required")
    out = alphas * np.power(discount, losses)
    out = np.maximum(out, smoothing / len(out))
    return out / out.sum()


def train_step(model: AuxDropModel, instance, masks: MaskPlan | None = None) -> StepResult:
    """One predict-then-train pass over a single instance.

    Order of operations: register any never-seen feature ids (growing the
    auxiliary layer), build the dropout masks, predict, read the label,
    backpropagate with freezing, apply SGD, and -- for the multi-head
    backbone -- update the combination weights.
    """
    cfg = model.config
    if model.aux is not None:
        known = model.aux.aux_registry
        new_ids = sorted((fid for fid in instance.aux if fid not in known), key=repr)
        for fid in new_ids:
            consumer = model.layers[cfg.position] if cfg.position < cfg.depth else model.heads[0]
            register_sudden_feature(model.aux, fid, model.init_rng, next_layer=consumer)
    available = set(instance.aux) if model.aux is not None else set()
    if masks is None:
        masks = plan_masks(model, available, instance.t)
    _zero_grads(model)
    probs, head_logits = _forward(model, instance, masks)
    predicted = int(np.argmax(probs))
    label = int(instance.label)
    loss = _instance_loss(probs, label)
    per_head = tuple(_instance_loss(softmax(lg), label) for lg in head_logits) \
        if cfg.backbone == ODL else ()
    if not np.isfinite(loss) or (per_head and not np.all(np.isfinite(per_head))):
        raise RunAbortError(
            f"non-finite loss at step {instance.t} (seed {model.seed}); aborting run")
    _backward(model, probs, head_logits, label)
    _apply_updates(model, masks, available)
    if cfg.backbone == ODL:
        model.alphas = hedge_update(model.alphas, per_head, cfg.discount, cfg.smoothing)
    model.step_count += 1
    aux_mask = masks.aux
    return StepResult(step=instance.t, loss=loss, predicted=predicted,
                      error=predicted != label,
                      clamped=bool(aux_mask.clamped) if aux_mask is not None else False,
                      per_head_losses=per_head)


# -- gradient checking ----------------------------------------------------


def gradient_check_blocks(model: AuxDropModel, instance, masks: MaskPlan,
                          available_ids) -> list[GradCheckBlock]:
    """Analytic-gradient blocks for the objective `evaluate_objective` computes.

    Head parameters only influence their own head's loss, so for the
    multi-head backbone their stored (own-loss) gradients are scaled by the
    head's combination weight to match the checked objective.
    """
    blocks = []
    z = model.aux_layer_index
    for i, layer in enumerate(model.layers):
        frozen = None
        if i == z:
            fw, fb = freeze_masks(model.aux, masks.masks[i], available_ids)
            frozen = fw
            blocks.append(GradCheckBlock(f"{layer.name}.bias", layer.bias,
                                         layer.grads.bias.copy(), fb))
        else:
            blocks.append(GradCheckBlock(f"{layer.name}.bias", layer.bias,
                                         layer.grads.bias.copy()))
        blocks.append(GradCheckBlock(f"{layer.name}.weights", layer.weights,
                                     layer.grads.weights.copy(), frozen))
    scales = model.alphas if model.config.backbone == ODL else np.ones(1)
    for head, scale in zip(model.heads, scales):
        blocks.append(GradCheckBlock(f"{head.name}.weights", head.weights,
                                     scale * head.grads.weights))
        blocks.append(GradCheckBlock(f"{head.name}.bias", head.bias,
                                     scale * head.grads.bias))
    return blocks


def finite_diff_check(model: AuxDropModel, instance, tolerance: float = 1e-4,
                      step: float = 1e-6, masks: MaskPlan | None = None) -> GradCheckReport:
    """Compare the model's analytic gradients against central differences with
    the dropout mask held fixed for the whole check."""
    available = set(instance.aux) if model.aux is not None else set()
    if masks is None:
        masks = plan_masks(model, available, instance.t)
    _zero_grads(model)
    probs, head_logits = _forward(model, instance, masks)
    _backward(model, probs, head_logits, int(instance.label))
    blocks = gradient_check_blocks(model, instance, masks, available)
    report = _finite_diff_check(lambda: evaluate_objective(model, instance, masks),
                                blocks, tolerance=tolerance, step=step)
    _zero_grads(model)
    return report
