"""Loss, optimizer, schedule, clipping, metrics, and the seeded training
loop with best-validation checkpoint selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Mapping

import numpy as np

from .errors import ConfigError, NumericError
from .model import ModelConfig, forward, is_trainable, predict, trainable
from .numerics import Rng, Tape, Tensor
from .numerics import ops


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 512
    lr_peak: float = 5e-4
    weight_decay: float = 0.1
    warmup_epochs: int = 5
    warmup_start_frac: float = 0.01
    clip_norm: float = 4.0
    label_smoothing: float = 0.02
    seed: int = 41
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def from_dict(d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return TrainConfig(**d)


# ---------------------------------------------------------------------------
# loss

def smoothed_ce(logits: Tensor, labels, eps: float = 0.02) -> Tensor:
    """Mean cross entropy against smoothed targets
    q = (1 - eps) * onehot + eps / K."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {eps}")
    logits = ops.astensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    if np.any(labels < 0) or np.any(labels >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise IndexError(f"label {bad} outside [0, {k})")
    q = np.full((b, k), eps / k, dtype=logits.dtype)
    q[np.arange(b), labels] += 1.0 - eps
    # log softmax: shift by the (constant) row max for stability
    shifted = ops.sub(logits, logits.data.max(axis=-1, keepdims=True))
    logp = ops.sub(shifted, ops.log(ops.sum_(ops.exp(shifted), axis=-1, keepdims=True)))
    return ops.neg(ops.mean_(ops.sum_(ops.mul(logp, Tensor(q)), axis=-1)))


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
               state: AdamState, lr_t: float, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay multiplies parameters by (1 - lr_t * wd) separately from the
    bias-corrected moment update. Non-finite gradients abort the step.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for tensor {name!r}; step aborted")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, g in grads.items():
        theta = params[name].data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(theta)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay:
            theta *= 1.0 - lr_t * cfg.weight_decay
        theta -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


def lr_schedule(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from warmup_start_frac * lr_peak, then cosine to zero
    at the final step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    total = cfg.epochs * steps_per_epoch
    warm = min(cfg.warmup_epochs * steps_per_epoch, total)
    f0 = cfg.warmup_start_frac
    if step < warm:
        return cfg.lr_peak * (f0 + (1.0 - f0) * step / warm)
    last = max(total - 1, warm)
    if last == warm:
        return cfg.lr_peak
    progress = min((step - warm) / (last - warm), 1.0)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(grads: Mapping[str, np.ndarray],
                   max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so the global L2 norm is at most ``max_norm``;
    returns the scaled gradients and the pre-clip norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return dict(grads), total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricsReport:
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    auroc_macro: float | None  # absent when only one class is present

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision_macro": self.precision_macro,
                "recall_macro": self.recall_macro, "f1_macro": self.f1_macro,
                "auroc_macro": self.auroc_macro}


def _midrank_auroc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Rank-based one-vs-rest AUROC with midrank tie correction."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    n_pos = int(positive.sum())
    n_neg = len(scores) - n_pos
    rank_sum = float(ranks[positive].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def compute_metrics(logits, labels) -> MetricsReport:
    """Accuracy, macro precision/recall/F1 over all classes (0/0 -> 0), and
    macro one-vs-rest AUROC over the classes present in the labels."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[0] != labels.shape[0] or arr.shape[0] < 1:
        raise ValueError(f"logits {arr.shape} and labels {labels.shape} disagree")
    k = arr.shape[1]
    preds = predict(arr)
    accuracy = float(np.mean(preds == labels))

    precisions, recalls, f1s = [], [], []
    for c in range(k):
        tp = float(np.sum((preds == c) & (labels == c)))
        fp = float(np.sum((preds == c) & (labels != c)))
        fn = float(np.sum((preds != c) & (labels == c)))
        p = tp / (tp + fp) if tp + fp > 0 else 0.0
        r = tp / (tp + fn) if tp + fn > 0 else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        precisions.append(p)
        recalls.append(r)
        f1s.append(f)

    present = np.unique(labels)
    auroc = None
    if len(present) >= 2:
        shifted = arr - arr.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=-1, keepdims=True)
        aucs = [_midrank_auroc(probs[:, c], labels == c) for c in present]
        auroc = float(np.mean(aucs))
    return MetricsReport(accuracy, float(np.mean(precisions)),
                         float(np.mean(recalls)), float(np.mean(f1s)), auroc)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    best_params: dict[str, Tensor]
    best_epoch: int
    best_val_f1: float
    history: list[dict]


HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "val_acc", "val_precision",
                   "val_recall", "val_f1", "val_auroc")


def evaluate(params: Mapping[str, Tensor], config: ModelConfig, windows,
             labels, batch_size: int = 512) -> MetricsReport:
    """Deterministic eval-mode metrics over a window array [N, L, C]."""
    outs = []
    for at in range(0, windows.shape[0], batch_size):
        chunk = np.asarray(windows[at:at + batch_size], dtype=config.np_dtype)
        outs.append(forward(Tensor(chunk), params, config, mode="eval").data)
    return compute_metrics(np.concatenate(outs, axis=0), labels)


def _clone_params(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return {k: v.copy() for k, v in params.items()}


def train_loop(params: dict[str, Tensor], config: ModelConfig,
               train_set, val_set, cfg: TrainConfig) -> TrainResult:
    """Seeded epoch loop; retains the parameters with the best validation
    macro-F1 (earliest epoch on ties).

    ``train_set``/``val_set`` are WindowSets (or anything with ``windows``
    and ``labels``). The loop is single-threaded and bitwise reproducible
    for a fixed seed when the model's stochastic rates are zero.
    """
    if len(train_set.labels) == 0 or len(val_set.labels) == 0:
        raise ConfigError("train_loop: train and val splits must be non-empty")
    rng = Rng(cfg.seed)
    n = train_set.windows.shape[0]
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    names = sorted(trainable(params))
    state = AdamState()
    history: list[dict] = []
    best: tuple[float, int] | None = None
    best_params = _clone_params(params)
    global_step = 0
    xs = np.asarray(train_set.windows, dtype=config.np_dtype)

    for epoch in range(1, cfg.epochs + 1):
        perm = rng.split("shuffle", epoch).permutation(n)
        losses = []
        lr_t = 0.0
        for step in range(steps_per_epoch):
            idx = perm[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            if idx.size == 0:
                continue
            batch = Tensor(xs[idx])
            labels = train_set.labels[idx]
            step_rng = rng.split("forward", epoch, step)
            with Tape() as tape:
                logits = forward(batch, params, config, mode="train", rng=step_rng)
                loss = smoothed_ce(logits, labels, cfg.label_smoothing)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {step}")
            grads = tape.grad_dict(loss, {k: params[k] for k in names})
            grads, _ = clip_grad_norm(grads, cfg.clip_norm)
            lr_t = lr_schedule(global_step, steps_per_epoch, cfg)
            adamw_step(params, grads, state, lr_t, cfg)
            global_step += 1
            losses.append(loss_val)

        val = evaluate(params, config, val_set.windows, val_set.labels,
                       cfg.batch_size)
        row = {"epoch": epoch, "lr": lr_t, "train_loss": float(np.mean(losses)),
               "val_acc": val.accuracy, "val_precision": val.precision_macro,
               "val_recall": val.recall_macro, "val_f1": val.f1_macro,
               "val_auroc": val.auroc_macro}
        history.append(row)
        if best is None or val.f1_macro > best[0]:
            best = (val.f1_macro, epoch)
            best_params = _clone_params(params)

    return TrainResult(best_params, best[1], best[0], history)
