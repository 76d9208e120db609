"""Training loop: joint CE + class-anchored contrastive objective and baselines.

Presets gate the loss terms:

  ancor             CE + contrastive (angular on, per-class queues by default)
  naive-combo       CE + contrastive with angular normalization disabled
  contrastive-only  contrastive only; shared queue, no angular
  supcon            supervised-contrastive loss replacing CE (two online views)
  coarse            CE only, classifier tapped directly on the encoder output
  coarse-plus       CE only through the embedder (same parameter count)
  fine / fine-plus  as coarse / coarse-plus but trained on fine labels
                    (upper bounds; the only presets allowed to see them)

Every step records lr and the per-term mean losses; the recorded total is
always loss_ce + loss_cont. Determinism: all draws come from per-epoch
substreams of the config seed, so a run resumed from its saved state file
reproduces the uninterrupted run bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as model_mod
from .contrastive import ClassQueueSet, ContrastiveConfig, group_contrastive_grads, supcon_grads
from .data import AugmentStrength, DatasetSplit, augment_batch, training_view
from .errors import ConfigError, NumericsError
from .model import AncorModel, EmbedCache, embed_batch, init_model, mlp_backward, tap_output
from .numcore import l2_normalize_rows_grad, softmax_cross_entropy_batch
from .rng import substream

PRESETS = (
    "ancor",
    "coarse",
    "coarse-plus",
    "contrastive-only",
    "supcon",
    "fine",
    "fine-plus",
    "naive-combo",
)

_CE_PRESETS = {"ancor", "naive-combo", "coarse", "coarse-plus", "fine", "fine-plus"}
_CONT_PRESETS = {"ancor", "naive-combo", "contrastive-only"}
_FINE_LABEL_PRESETS = {"fine", "fine-plus"}
_ENCODER_TAP_PRESETS = {"coarse", "fine"}


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 0.03
    min_lr: float = 0.0
    cycle_epochs: int = 20
    weight_decay: float = 1e-4
    sgd_momentum: float = 0.9
    moco_momentum: float = 0.99
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    variant: str = "seq"
    preset: str = "ancor"
    seed: int = 0
    d: int = 128
    e: int = 32
    augment: AugmentStrength = field(default_factory=AugmentStrength)
    fork_preactivation: bool = False

    def validate(self) -> "TrainConfig":
        if self.epochs < 0 or self.batch_size < 1 or self.cycle_epochs < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1, cycle_epochs >= 1 required")
        if not self.base_lr > self.min_lr >= 0:
            raise ConfigError(f"need base_lr > min_lr >= 0, got {self.base_lr} / {self.min_lr}")
        if self.weight_decay < 0 or not 0 <= self.sgd_momentum < 1:
            raise ConfigError("weight_decay >= 0 and 0 <= sgd_momentum < 1 required")
        if not 0 <= self.moco_momentum <= 1:
            raise ConfigError("moco_momentum must be in [0, 1]")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.variant not in model_mod.VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        self.contrastive.validate()
        self.augment.validate()
        if min(self.d, self.e) < 1:
            raise ConfigError("model dims must be >= 1")
        if self.uses_contrastive and self.contrastive.angular_enabled and self.effective_tap != "embed":
            raise ConfigError(
                "angular normalization requires the classifier to read the embedding "
                f"(variant 'seq'); got variant {self.variant!r} / preset {self.preset!r}"
            )
        return self

    @property
    def uses_ce(self) -> bool:
        return self.preset in _CE_PRESETS

    @property
    def uses_contrastive(self) -> bool:
        return self.preset in _CONT_PRESETS

    @property
    def uses_supcon(self) -> bool:
        return self.preset == "supcon"

    @property
    def uses_fine_labels(self) -> bool:
        return self.preset in _FINE_LABEL_PRESETS

    @property
    def effective_tap(self) -> str:
        if self.preset in _ENCODER_TAP_PRESETS:
            return "encoder"
        return "embed" if self.variant == "seq" else "hidden"


def apply_preset_defaults(cfg: TrainConfig) -> TrainConfig:
    """Hard constraints some presets place on the contrastive flags."""
    if cfg.preset == "contrastive-only":
        cfg = replace(
            cfg, contrastive=replace(cfg.contrastive, angular_enabled=False, queue_mode="single")
        )
    elif cfg.preset == "naive-combo":
        cfg = replace(cfg, contrastive=replace(cfg.contrastive, angular_enabled=False))
    return cfg


@dataclass
class MetricsRow:
    epoch: int
    step: int
    lr: float
    loss_ce: float
    loss_cont: float
    loss_total: float
    coarse_acc: float


METRICS_HEADER = "epoch,step,lr,loss_ce,loss_cont,loss_total,coarse_acc"


def write_metrics_csv(history: list[MetricsRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(METRICS_HEADER + "\n")
        for r in history:
            fh.write(
                f"{r.epoch},{r.step},{r.lr:.10g},{r.loss_ce:.10g},"
                f"{r.loss_cont:.10g},{r.loss_total:.10g},{r.coarse_acc:.6g}\n"
            )


def lr_at(cfg: TrainConfig, epoch: int, step_in_epoch: int, steps_per_epoch: int) -> float:
    """Cosine annealing restarting every cycle_epochs epochs."""
    t = (epoch % cfg.cycle_epochs) + step_in_epoch / max(1, steps_per_epoch)
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (
        1.0 + math.cos(math.pi * t / cfg.cycle_epochs)
    )


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    momentum_buf: dict[str, np.ndarray],
    sgd_momentum: float,
    wd: float,
) -> None:
    """g' = grad + wd * theta; v <- momentum * v + g'; theta <- theta - lr * v."""
    for name, g in grads.items():
        theta = params[name]
        if g.shape != theta.shape:
            raise NumericsError(f"gradient shape {g.shape} != parameter shape {theta.shape} ({name})")
        v = momentum_buf[name]
        v *= sgd_momentum
        v += g + wd * theta
        theta -= lr * v


def active_param_names(model: AncorModel, cfg: TrainConfig) -> list[str]:
    """Parameters actually reached by the preset's loss terms."""
    names = [n for n, _ in model.param_items() if n.startswith("encoder.")]
    if cfg.effective_tap != "encoder" or cfg.uses_contrastive or cfg.uses_supcon:
        names += [n for n, _ in model.param_items() if n.startswith("embedder.")]
    if cfg.uses_ce or (cfg.uses_contrastive and cfg.contrastive.angular_enabled and cfg.contrastive.anchor_grad):
        names.append("classifier.W")
    return names


def _zero_grads(model: AncorModel, names: list[str]) -> dict[str, np.ndarray]:
    params = dict(model.param_items())
    return {n: np.zeros_like(params[n]) for n in names}


def _accumulate_mlp_grads(grads: dict, prefix: str, d_ws, d_bs) -> None:
    for i, (dw, db) in enumerate(zip(d_ws, d_bs)):
        if f"{prefix}.{i}.w" in grads:
            grads[f"{prefix}.{i}.w"] += dw
            grads[f"{prefix}.{i}.b"] += db


def _backprop_online(
    model: AncorModel,
    cache: EmbedCache,
    d_unit: np.ndarray,
    d_hidden: np.ndarray | None,
    d_encoder_out: np.ndarray | None,
    grads: dict[str, np.ndarray],
) -> None:
    """Chain gradients from the embedding/tap points into all online params."""
    d_raw = l2_normalize_rows_grad(cache.unit, cache.norms, d_unit)
    inject_post = inject_pre = None
    if d_hidden is not None:
        if model.fork_preactivation:
            inject_pre = {0: d_hidden}
        else:
            inject_post = {0: d_hidden}
    d_feats, d_ws, d_bs = mlp_backward(
        model.embedder, cache.embedder, d_raw, inject_post=inject_post, inject_pre=inject_pre
    )
    _accumulate_mlp_grads(grads, "embedder", d_ws, d_bs)
    if d_encoder_out is not None:
        d_feats = d_feats + d_encoder_out
    _, d_ws, d_bs = mlp_backward(model.encoder, cache.encoder, d_feats)
    _accumulate_mlp_grads(grads, "encoder", d_ws, d_bs)


def batch_grads(
    model: AncorModel,
    queues: ClassQueueSet,
    Xq: np.ndarray,
    Xk: np.ndarray | None,
    labels: np.ndarray,
    cfg: TrainConfig,
) -> tuple[float, float, float, dict[str, np.ndarray], np.ndarray | None]:
    """Losses and gradients for one batch of already-augmented views.

    Xq feeds the online path; Xk the momentum path (keys; None for presets
    without a contrastive term). Pure function of the model parameters: the
    queues are only read, and for the supcon preset Xk is the second online
    view. Returns (mean ce, mean cont, accuracy, grads, keys).
    """
    n = Xq.shape[0]
    W = model.classifier_w
    unit, cache = embed_batch(model, Xq)

    grads = _zero_grads(model, active_param_names(model, cfg))
    d_unit = np.zeros_like(unit)
    d_hidden = None
    d_encoder_out = None

    # classifier logits are always recorded for the accuracy column
    tap = tap_output(model, cache)
    logits = tap @ W.T
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))

    loss_ce = 0.0
    if cfg.uses_ce:
        losses, d_logits = softmax_cross_entropy_batch(logits, labels)
        loss_ce = float(losses.mean())
        d_logits /= n
        grads["classifier.W"] += d_logits.T @ tap
        d_tap = d_logits @ W
        if model.tap == "embed":
            d_unit += d_tap
        elif model.tap == "hidden":
            d_hidden = d_tap
        else:
            d_encoder_out = d_tap

    loss_cont = 0.0
    keys = None
    if cfg.uses_contrastive:
        keys, _ = embed_batch(model, Xk, momentum=True)
        cont_sum = 0.0
        for y in np.unique(labels):
            idx = np.flatnonzero(labels == y)
            negs = queues.negatives_for(int(y))
            losses, dQ, dW = group_contrastive_grads(
                unit[idx], keys[idx], negs, cfg.contrastive, int(y), W
            )
            cont_sum += float(losses.sum())
            d_unit[idx] += dQ / n
            if "classifier.W" in grads:
                grads["classifier.W"] += dW / n
        loss_cont = cont_sum / n

    if cfg.uses_supcon:
        unit2, cache2 = embed_batch(model, Xk)
        Z = np.concatenate([unit, unit2], axis=0)
        loss_cont, dZ = supcon_grads(Z, np.concatenate([labels, labels]), cfg.contrastive.temperature)
        d_unit += dZ[:n]
        _backprop_online(model, cache2, dZ[n:], None, None, grads)

    _backprop_online(model, cache, d_unit, d_hidden, d_encoder_out, grads)
    return loss_ce, loss_cont, acc, grads, keys


def train_step(
    model: AncorModel,
    queues: ClassQueueSet,
    X: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    velocities: dict[str, np.ndarray],
    lr: float,
    rng: np.random.Generator,
) -> tuple[float, float, float]:
    """One optimization step on a batch; returns (mean ce, mean cont, accuracy)."""
    Xq = augment_batch(X, rng, cfg.augment)
    Xk = None
    if cfg.uses_contrastive or cfg.uses_supcon:
        Xk = augment_batch(X, rng, cfg.augment)
    loss_ce, loss_cont, acc, grads, keys = batch_grads(model, queues, Xq, Xk, labels, cfg)
    params = dict(model.param_items())
    sgd_step(params, grads, lr, velocities, cfg.sgd_momentum, cfg.weight_decay)
    if cfg.uses_contrastive:
        model_mod.momentum_update(model, cfg.moco_momentum)
        for i in range(X.shape[0]):
            queues.enqueue(int(labels[i]), keys[i])
    return loss_ce, loss_cont, acc


@dataclass
class TrainState:
    """Optimizer/queue state saved next to the checkpoint for exact resume."""

    velocities: dict[str, np.ndarray]
    queues: ClassQueueSet
    epochs_done: int

    def to_arrays(self) -> list[tuple[str, np.ndarray]]:
        items = [(f"optim.{n}", v) for n, v in self.velocities.items()]
        items += self.queues.state_arrays()
        items.append(("meta.progress", np.array([[float(self.epochs_done)]])))
        return items


def save_train_state(state: TrainState, path) -> None:
    model_mod.write_arrays(path, state.to_arrays())


def load_train_state(path, model: AncorModel, cfg: TrainConfig, n_classes: int) -> TrainState:
    arrays = dict(model_mod.read_arrays(path))
    if "meta.progress" not in arrays:
        raise model_mod.CheckpointShapeError("state file missing 'meta.progress'")
    velocities = {}
    for name, theta in model.param_items():
        key = f"optim.{name}"
        if key not in arrays or arrays[key].shape != theta.shape:
            raise model_mod.CheckpointShapeError(f"state file missing or mis-shaped '{key}'")
        velocities[name] = arrays[key]
    queues = ClassQueueSet(n_classes, cfg.contrastive.capacity, cfg.contrastive.queue_mode)
    queues.load_state_arrays(arrays)
    return TrainState(velocities, queues, int(arrays["meta.progress"][0, 0]))


@dataclass
class TrainResult:
    model: AncorModel
    history: list[MetricsRow]
    state: TrainState


def train(
    split: DatasetSplit,
    cfg: TrainConfig,
    resume: TrainState | None = None,
    resume_model: AncorModel | None = None,
) -> TrainResult:
    """Run the configured preset over the training split.

    With ``resume``/``resume_model`` the loop continues from the recorded
    epoch; because every epoch has its own derived rng stream, the result is
    bit-identical to a single uninterrupted run.
    """
    cfg = apply_preset_defaults(cfg)
    cfg.validate()
    if not split.train:
        raise ConfigError("training split is empty")
    X, labels = training_view(split.train, use_fine=cfg.uses_fine_labels)
    n_classes = int(labels.max()) + 1
    d_in = X.shape[1]

    if resume_model is not None:
        model = resume_model
    else:
        model = init_model(
            d_in,
            cfg.d,
            cfg.e,
            n_classes,
            cfg.variant,
            rng_seed=cfg.seed,
            tap=cfg.effective_tap,
            fork_preactivation=cfg.fork_preactivation,
        )
    if resume is not None:
        state = resume
    else:
        state = TrainState(
            velocities={n: np.zeros_like(p) for n, p in model.param_items()},
            queues=ClassQueueSet(n_classes, cfg.contrastive.capacity, cfg.contrastive.queue_mode),
            epochs_done=0,
        )

    n = X.shape[0]
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    history: list[MetricsRow] = []
    for epoch in range(state.epochs_done, cfg.epochs):
        rng = substream(cfg.seed, "train", epoch)
        order = rng.permutation(n)
        for step in range(steps_per_epoch):
            idx = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            lr = lr_at(cfg, epoch, step, steps_per_epoch)
            try:
                ce, cont, acc = train_step(
                    model, state.queues, X[idx], labels[idx], cfg, state.velocities, lr, rng
                )
            except NumericsError as exc:
                raise NumericsError(f"epoch {epoch} step {step}: {exc}") from exc
            history.append(MetricsRow(epoch, step, lr, ce, cont, ce + cont, acc))
        state.epochs_done = epoch + 1
    return TrainResult(model, history, state)
