"""
WhiskerNet: causal transformer mapping base-moment histories to contact positions.
"""
import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from exceptions import NonFiniteActivationError, ShapeMismatchError, TrainingDivergedError, ValidationError
from sweep_datagen import DatasetSplit, SignalSequence

logger = logging.getLogger(__name__)

GATE_THRESHOLD = 1e-6


@dataclass(frozen=True)
class WhiskerNetConfig:
    encoder_hidden: int = 64
    n_layers: int = 6
    n_heads: int = 8
    d_model: int = 128
    ffn_hidden: int = 512
    dropout: float = 0.1
    max_len: int = 256
    input_dim: int = 2
    output_dim: int = 2

    @classmethod
    def small(cls) -> "WhiskerNetConfig":
        """Two-layer desk-scale variant used by default runs and CI."""
        return cls(encoder_hidden=32, n_layers=2, n_heads=4, d_model=32, ffn_hidden=128)

    def validate(self) -> None:
        sizes = (self.encoder_hidden, self.n_layers, self.n_heads, self.d_model, self.ffn_hidden,
                 self.max_len, self.input_dim, self.output_dim)
        if min(sizes) < 1:
            raise ValidationError(f"All WhiskerNet sizes must be positive: {self}")
        if self.d_model % self.n_heads:
            raise ValidationError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 100
    patience: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ValidationError("batch_size, epochs and patience must be positive")
        if self.learning_rate < 0:
            raise ValidationError(f"learning_rate must be non-negative, got {self.learning_rate}")


@dataclass
class Normalization:
    """Train-split statistics; inputs are standardized and outputs de-standardized."""

    input_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    input_std: np.ndarray = field(default_factory=lambda: np.ones(2))
    target_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    target_std: np.ndarray = field(default_factory=lambda: np.ones(2))

    def to_dict(self) -> Dict[str, List[float]]:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Dict[str, Sequence[float]]) -> "Normalization":
        return cls(**{k: np.asarray(v, dtype=float) for k, v in data.items()})


@dataclass
class ModelParams:
    """Named parameter tensors (insertion order is the canonical order) plus normalization."""

    config: WhiskerNetConfig
    tensors: Dict[str, np.ndarray]
    norm: Normalization = field(default_factory=Normalization)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, copy.deepcopy(self.norm))

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: v.shape for k, v in self.tensors.items()}

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def validate(self) -> None:
        expected = parameter_shapes(self.config)
        if self.shapes() != expected:
            raise ShapeMismatchError(f"Parameter shapes do not match config {self.config}")
        for name, value in self.tensors.items():
            if not np.all(np.isfinite(value)):
                raise ValidationError(f"Parameter '{name}' has non-finite values")


def parameter_shapes(config: WhiskerNetConfig) -> Dict[str, Tuple[int, ...]]:
    d, f, e = config.d_model, config.ffn_hidden, config.encoder_hidden
    shapes = {
        "encoder.w1": (config.input_dim, e), "encoder.b1": (e,),
        "encoder.w2": (e, d), "encoder.b2": (d,),
        "pos_embedding": (config.max_len, d),
    }
    for i in range(config.n_layers):
        p = f"block{i}"
        shapes.update({
            f"{p}.ln1.gamma": (d,), f"{p}.ln1.beta": (d,),
            f"{p}.attn.wq": (d, d), f"{p}.attn.bq": (d,),
            f"{p}.attn.wk": (d, d), f"{p}.attn.bk": (d,),
            f"{p}.attn.wv": (d, d), f"{p}.attn.bv": (d,),
            f"{p}.attn.wo": (d, d), f"{p}.attn.bo": (d,),
            f"{p}.ln2.gamma": (d,), f"{p}.ln2.beta": (d,),
            f"{p}.ffn.w1": (d, f), f"{p}.ffn.b1": (f,),
            f"{p}.ffn.w2": (f, d), f"{p}.ffn.b2": (d,),
        })
    shapes.update({"ln_f.gamma": (d,), "ln_f.beta": (d,), "head.w": (d, config.output_dim), "head.b": (config.output_dim,)})
    return shapes


def init_params(config: WhiskerNetConfig, seed: int = 0) -> ModelParams:
    """Scaled-normal weights, zero biases, unit layer-norm gains."""
    config.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gamma"):
            tensors[name] = np.ones(shape)
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape)
        elif name == "pos_embedding":
            tensors[name] = rng.normal(0.0, 0.02, size=shape)
        else:
            tensors[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
    return ModelParams(config, tensors, Normalization())


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def _checked(t: ad.Tensor, layer: str) -> ad.Tensor:
    if not np.all(np.isfinite(t.value)):
        raise NonFiniteActivationError(layer)
    return t


def _linear(x: ad.Tensor, p: Dict[str, ad.Tensor], prefix: str, w: str = "w", b: str = "b") -> ad.Tensor:
    return x @ p[f"{prefix}.{w}"] + p[f"{prefix}.{b}"]


def _attention(x: ad.Tensor, p: Dict[str, ad.Tensor], prefix: str, config: WhiskerNetConfig,
               rng: Optional[np.random.Generator]) -> ad.Tensor:
    B, T, d = x.shape
    H = config.n_heads
    dh = d // H

    def heads(t: ad.Tensor) -> ad.Tensor:
        return ad.transpose(ad.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

    q = heads(_linear(x, p, f"{prefix}.attn", "wq", "bq"))
    k = heads(_linear(x, p, f"{prefix}.attn", "wk", "bk"))
    v = heads(_linear(x, p, f"{prefix}.attn", "wv", "bv"))
    scores = ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(dh))
    causal = np.tril(np.ones((T, T), dtype=bool))
    weights = ad.dropout(ad.masked_softmax(scores, causal), config.dropout, rng)
    mixed = ad.reshape(ad.transpose(weights @ v, (0, 2, 1, 3)), (B, T, d))
    return _linear(mixed, p, f"{prefix}.attn", "wo", "bo")


def _graph(p: Dict[str, ad.Tensor], config: WhiskerNetConfig, norm: Normalization, signals: np.ndarray,
           tape: ad.Tape, rng: Optional[np.random.Generator]) -> ad.Tensor:
    B, T, _ = signals.shape
    x = tape.constant((signals - norm.input_mean) / norm.input_std)
    h = ad.gelu(_linear(x, p, "encoder", "w1", "b1"))
    h = _linear(h, p, "encoder", "w2", "b2")
    h = _checked(h + ad.take_rows(p["pos_embedding"], T), "encoder")
    h = ad.dropout(h, config.dropout, rng)
    for i in range(config.n_layers):
        prefix = f"block{i}"
        a = _attention(ad.layer_norm(h, p[f"{prefix}.ln1.gamma"], p[f"{prefix}.ln1.beta"]), p, prefix, config, rng)
        h = _checked(h + ad.dropout(a, config.dropout, rng), f"{prefix}.attn")
        f = ad.layer_norm(h, p[f"{prefix}.ln2.gamma"], p[f"{prefix}.ln2.beta"])
        f = _linear(ad.gelu(_linear(f, p, f"{prefix}.ffn", "w1", "b1")), p, f"{prefix}.ffn", "w2", "b2")
        h = _checked(h + ad.dropout(f, config.dropout, rng), f"{prefix}.ffn")
    h = ad.layer_norm(h, p["ln_f.gamma"], p["ln_f.beta"])
    out = _linear(h, p, "head")
    return _checked(ad.mul(out, norm.target_std) + norm.target_mean, "head")


def _check_signals(signals: np.ndarray, config: WhiskerNetConfig) -> Tuple[np.ndarray, bool]:
    s = np.asarray(signals, dtype=float)
    single = s.ndim == 2
    if single:
        s = s[None]
    if s.ndim != 3 or s.shape[-1] != config.input_dim:
        raise ShapeMismatchError(f"Expected signals of shape (T, {config.input_dim}) or (B, T, {config.input_dim}), got {np.shape(signals)}")
    if s.shape[1] < 1 or s.shape[1] > config.max_len:
        raise ShapeMismatchError(f"Sequence length {s.shape[1]} outside [1, {config.max_len}]")
    return s, single


def forward(params: ModelParams, config: WhiskerNetConfig, signals: np.ndarray, mode: str = "eval",
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Predict contact positions (mm, base frame) for every step.

    Args:
        params: Model parameters.
        config: Architecture.
        signals: (T, 2) or (B, T, 2) base moments.
        mode: "eval" (deterministic, no dropout) or "train" (dropout from `rng`).
        rng: Dropout generator for train mode.

    Returns:
        Predictions with the same leading shape as `signals`.
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    s, single = _check_signals(signals, config)
    tape = ad.Tape(enabled=False)
    p = {k: tape.param(v, k) for k, v in params.tensors.items()}
    out = _graph(p, config, params.norm, s, tape, rng if mode == "train" else None).value
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------

def mse_loss(pred, target: np.ndarray, mask: np.ndarray, reduction: str = "mean"):
    """
    Squared error over masked steps, averaged over steps and output dims
    (or summed with `reduction="sum"`). Works on arrays and tape tensors.
    """
    m = np.asarray(mask, dtype=float)
    count = float(m.sum())
    if count == 0:
        raise ValidationError("mse_loss mask selects no steps")
    pred_value = pred.value if isinstance(pred, ad.Tensor) else np.asarray(pred, dtype=float)
    if pred_value.shape != np.shape(target) or pred_value.shape[:-1] != m.shape:
        raise ShapeMismatchError(f"Prediction {pred_value.shape}, target {np.shape(target)} and mask {m.shape} disagree")
    factor = 1.0 if reduction == "sum" else 1.0 / (count * pred_value.shape[-1])
    if isinstance(pred, ad.Tensor):
        diff = ad.sub(pred, np.asarray(target, dtype=float))
        return ad.scale(ad.total(ad.mul(ad.mul(diff, diff), m[..., None])), factor)
    diff = pred_value - np.asarray(target, dtype=float)
    return float(np.sum(diff * diff * m[..., None]) * factor)


@dataclass(frozen=True)
class Batch:
    signals: np.ndarray
    targets: np.ndarray
    mask: np.ndarray


def backward(params: ModelParams, config: WhiskerNetConfig, batch: Batch, rng: Optional[np.random.Generator] = None,
             reduction: str = "mean") -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Train-mode forward on a tape, then reverse-mode gradients of the loss.

    Returns:
        (loss, gradient per parameter name)
    """
    s, _ = _check_signals(batch.signals, config)
    tape = ad.Tape()
    p = {k: tape.param(v, k) for k, v in params.tensors.items()}
    pred = _graph(p, config, params.norm, s, tape, rng)
    loss = mse_loss(pred, batch.targets.reshape(pred.shape), batch.mask.reshape(pred.shape[:-1]), reduction)
    tape.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in p.items()}
    return float(loss.value), grads


class Adam:
    """Adam with bias correction over a dict of parameter arrays."""

    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k in params:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            params[k] -= (self.lr / bc1) * self.m[k] / (np.sqrt(self.v[k] / bc2) + self.epsilon)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def fit_normalization(sequences: Sequence[SignalSequence]) -> Normalization:
    moments = np.vstack([s.moments for s in sequences])
    contacts = np.vstack([s.contact_pos[s.in_contact] for s in sequences if s.in_contact.any()] or [np.zeros((1, 2))])

    def safe(std):
        return np.where(std > 1e-9, std, 1.0)

    return Normalization(moments.mean(axis=0), safe(moments.std(axis=0)),
                         contacts.mean(axis=0), safe(contacts.std(axis=0)))


def make_batch(sequences: Sequence[SignalSequence]) -> Batch:
    """Right-pad sequences to a common length; padding is masked out."""
    T = max(len(s) for s in sequences)
    B = len(sequences)
    signals = np.zeros((B, T, 2))
    targets = np.zeros((B, T, 2))
    mask = np.zeros((B, T), dtype=bool)
    for i, s in enumerate(sequences):
        n = len(s)
        signals[i, :n] = s.moments
        targets[i, :n] = s.contact_pos
        mask[i, :n] = s.in_contact
    return Batch(signals, targets, mask)


def evaluate_loss(params: ModelParams, config: WhiskerNetConfig, sequences: Sequence[SignalSequence],
                  batch_size: int = 64) -> float:
    """Eval-mode MSE over every in-contact step of `sequences`."""
    total, count = 0.0, 0.0
    for start in range(0, len(sequences), batch_size):
        batch = make_batch(sequences[start:start + batch_size])
        n = float(batch.mask.sum())
        if n == 0:
            continue
        pred = forward(params, config, batch.signals)
        total += mse_loss(pred, batch.targets, batch.mask, reduction="sum")
        count += n * config.output_dim
    return total / count if count else float("nan")


@dataclass
class TrainResult:
    params: ModelParams
    history: List[Tuple[int, float, float]]
    best_epoch: int


def train(dataset: DatasetSplit, config: WhiskerNetConfig, train_config: TrainConfig) -> TrainResult:
    """
    Adam training with seeded batch order and dropout, early stopping on validation MSE.

    Args:
        dataset: Train/validation split of SignalSequences.
        config: Architecture.
        train_config: Optimizer and schedule.

    Returns:
        TrainResult with the best-validation parameters and the (epoch, train, val) history.

    Raises:
        TrainingDivergedError: The loss became non-finite; carries the best checkpoint so far.
    """
    config.validate()
    train_config.validate()
    train_set = [s for s in dataset.train if s.in_contact.any()]
    if not train_set:
        raise ValidationError("Training split has no in-contact steps")
    val_set = [s for s in dataset.validation if s.in_contact.any()]

    params = init_params(config, train_config.seed)
    params.norm = fit_normalization(dataset.train)
    optimizer = Adam(train_config.learning_rate, train_config.adam_beta1, train_config.adam_beta2, train_config.adam_eps)
    rng = np.random.default_rng(train_config.seed)
    logger.info(f"Training {params.n_parameters()} parameters on {len(train_set)} sequences "
                f"({len(val_set)} validation)")

    history: List[Tuple[int, float, float]] = []
    best, best_val, best_epoch, stale = params.copy(), float("inf"), 0, 0
    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(len(train_set))
        total, count = 0.0, 0.0
        for start in range(0, len(order), train_config.batch_size):
            batch = make_batch([train_set[i] for i in order[start:start + train_config.batch_size]])
            try:
                loss, grads = backward(params, config, batch, rng)
            except NonFiniteActivationError as e:
                logger.error(f"{e} at epoch {epoch}")
                raise TrainingDivergedError(f"Training diverged at epoch {epoch}: {e}", best, history) from e
            if not np.isfinite(loss):
                logger.error(f"Loss became non-finite at epoch {epoch}")
                raise TrainingDivergedError(f"Non-finite training loss at epoch {epoch}", best, history)
            optimizer.step(params.tensors, grads)
            n = float(batch.mask.sum())
            total += loss * n
            count += n
        train_mse = total / count
        val_mse = evaluate_loss(params, config, val_set, train_config.batch_size) if val_set else train_mse
        history.append((epoch, train_mse, val_mse))
        logger.info(f"Epoch {epoch}: train_mse={train_mse:.4f} val_mse={val_mse:.4f}")

        if val_mse < best_val:
            best, best_val, best_epoch, stale = params.copy(), val_mse, epoch, 0
        else:
            stale += 1
            if stale >= train_config.patience:
                logger.warning(f"Early stopping at epoch {epoch}; best epoch {best_epoch} (val_mse={best_val:.4f})")
                break
    return TrainResult(best, history, best_epoch)


# ---------------------------------------------------------------------------
# Inference over a sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepPrediction:
    points: np.ndarray
    steps: np.ndarray

    def __len__(self) -> int:
        return len(self.steps)


def predict_sweep(params: ModelParams, config: WhiskerNetConfig, moments: np.ndarray,
                  gate_threshold: float = GATE_THRESHOLD) -> SweepPrediction:
    """
    Contact trail for a whole sweep, emitted only at steps whose moment norm exceeds the gate.

    Sequences longer than `max_len` are evaluated with a sliding window of
    `max_len` steps and stride 1; step i >= max_len takes the last output of
    the window ending at i.
    """
    m = np.asarray(moments, dtype=float).reshape(-1, config.input_dim)
    gated = np.nonzero(np.linalg.norm(m, axis=1) > gate_threshold)[0]
    if len(gated) == 0:
        return SweepPrediction(np.zeros((0, config.output_dim)), gated)
    T, L = len(m), config.max_len
    out = np.zeros((T, config.output_dim))
    head = forward(params, config, m[:min(T, L)])
    out[:min(T, L)] = head
    for i in gated[gated >= L]:
        out[i] = forward(params, config, m[i - L + 1:i + 1])[-1]
    return SweepPrediction(out[gated], gated)
