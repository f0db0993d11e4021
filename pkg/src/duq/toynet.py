"""Small fully connected regressor with a mean head and a log-sigma head.

Hidden layers use ELU; dropout (inverted, rate ``p``) can be switched on
per hidden layer and is applied after the activation. Gradients are
backpropagated by hand. The same network serves both sampling schemes:
MC dropout (one model, fresh masks per forward pass) and deep ensembles
(independently initialised and trained members, no dropout).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from duq.errors import ConfigurationError, EmptyInputError, ShapeError, TrainingError
from duq.losses import laplace_nll_grad
from duq.predictive import PredictiveSampleSet

#: Variance of the Gaussian used to initialise every weight and bias.
INIT_VARIANCE = 1e-2

DROPOUT_PRESETS = ("none", "first_half", "second_half", "all", "first_layer", "last_layer")


def dropout_plan(preset: str, n_hidden: int) -> tuple[bool, ...]:
    """Expand a named placement preset into per-hidden-layer flags.

    ``first_half`` covers the first ceil(n/2) hidden layers (encoder-like),
    ``second_half`` the remaining ones (decoder-like; the last layer when n = 1).
    """
    if n_hidden < 1:
        raise ConfigurationError("network needs at least one hidden layer")
    half = math.ceil(n_hidden / 2)
    idx = range(n_hidden)
    if preset == "none":
        flags = [False] * n_hidden
    elif preset == "all":
        flags = [True] * n_hidden
    elif preset == "first_half":
        flags = [i < half for i in idx]
    elif preset == "second_half":
        flags = [i >= half for i in idx] if n_hidden > 1 else [True]
    elif preset == "first_layer":
        flags = [i == 0 for i in idx]
    elif preset == "last_layer":
        flags = [i == n_hidden - 1 for i in idx]
    else:
        raise ConfigurationError(f"unknown dropout preset {preset!r}; expected one of {DROPOUT_PRESETS}")
    return tuple(flags)


@dataclass(frozen=True)
class ToyNetConfig:
    layer_sizes: tuple[int, ...]
    dropout: tuple[bool, ...] = ()
    p: float = 0.0
    activation: str = "elu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 3:
            raise ConfigurationError("layer_sizes needs input, at least one hidden layer and the output")
        if sizes[-1] != 2:
            raise ConfigurationError(f"output width must be 2 (mean, raw sigma), got {sizes[-1]}")
        if any(s < 1 for s in sizes):
            raise ConfigurationError("layer widths must be positive")
        flags = tuple(bool(f) for f in self.dropout) or (False,) * self.n_hidden
        if len(flags) != self.n_hidden:
            raise ConfigurationError(f"{len(flags)} dropout flags for {self.n_hidden} hidden layers")
        object.__setattr__(self, "dropout", flags)
        if any(flags) and not 0.0 < self.p < 1.0:
            raise ConfigurationError(f"dropout rate must lie in (0, 1), got {self.p}")
        if self.activation != "elu":
            raise ConfigurationError("only ELU activation is supported")

    @classmethod
    def from_preset(cls, layer_sizes, preset: str = "none", p: float = 0.0) -> "ToyNetConfig":
        n_hidden = len(layer_sizes) - 2
        return cls(tuple(layer_sizes), dropout_plan(preset, n_hidden), p if preset != "none" else 0.0)

    @property
    def n_hidden(self) -> int:
        return len(self.layer_sizes) - 2

    @property
    def has_dropout(self) -> bool:
        return any(self.dropout)

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "dropout": list(self.dropout),
            "p": self.p,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyNetConfig":
        return cls(tuple(d["layer_sizes"]), tuple(d.get("dropout", ())), float(d.get("p", 0.0)),
                   d.get("activation", "elu"))


@dataclass
class ToyNetParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    meta: dict = field(default_factory=dict)

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b.ravel()]
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, config: ToyNetConfig, flat: np.ndarray, meta: dict | None = None) -> "ToyNetParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != n_params(config):
            raise ShapeError(f"expected {n_params(config)} parameters, got {flat.size}")
        weights, biases, i = [], [], 0
        for n_in, n_out in zip(config.layer_sizes[:-1], config.layer_sizes[1:]):
            weights.append(flat[i:i + n_in * n_out].reshape(n_in, n_out).copy())
            i += n_in * n_out
            biases.append(flat[i:i + n_out].copy())
            i += n_out
        return cls(weights, biases, dict(meta or {}))

    def copy(self) -> "ToyNetParams":
        return ToyNetParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], dict(self.meta))


@dataclass
class EnsembleModel:
    members: list[ToyNetParams]
    seeds: list[int]

    def __post_init__(self):
        if not self.members:
            raise EmptyInputError("ensemble needs at least one member")
        if len(self.seeds) != len(self.members):
            raise ShapeError("one seed per ensemble member")


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_dict(self) -> dict:
        return {"lr": self.lr, "batch_size": self.batch_size, "epochs": self.epochs,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "optimizer": "adam"}


def n_params(config: ToyNetConfig) -> int:
    s = config.layer_sizes
    return sum(a * b + b for a, b in zip(s[:-1], s[1:]))


def init_params(config: ToyNetConfig, seed: int) -> ToyNetParams:
    """Draw every weight and bias iid from N(0, INIT_VARIANCE)."""
    rng = np.random.default_rng(seed)
    flat = rng.normal(0.0, math.sqrt(INIT_VARIANCE), size=n_params(config))
    return ToyNetParams.from_flat(config, flat, {"init_seed": int(seed), "init_variance": INIT_VARIANCE})


def _elu(z):
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def _elu_grad(z):
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


def _as_batch(config: ToyNetConfig, x) -> tuple[np.ndarray, tuple[int, ...]]:
    x = np.asarray(x, dtype=np.float64)
    d = config.layer_sizes[0]
    if x.ndim == 1 and d == 1:
        x = x[:, None]
    if x.shape[-1] != d:
        raise ShapeError(f"input feature dimension {x.shape[-1]} != network input width {d}")
    lead = x.shape[:-1]
    return x.reshape(-1, d), lead


def draw_masks(config: ToyNetConfig, n: int, rng: np.random.Generator) -> list[np.ndarray | None]:
    """Keep-masks (1 = kept) for each flagged hidden layer, one row per example."""
    masks = []
    for flag, width in zip(config.dropout, config.layer_sizes[1:-1]):
        masks.append((rng.random((n, width)) >= config.p).astype(np.float64) if flag else None)
    return masks


def _forward_cache(params: ToyNetParams, config: ToyNetConfig, x: np.ndarray, masks):
    if masks is None:
        masks = [None] * config.n_hidden
    if len(masks) != config.n_hidden:
        raise ShapeError(f"{len(masks)} masks for {config.n_hidden} hidden layers")
    scale = 1.0 / (1.0 - config.p) if config.p < 1 else 0.0
    acts, pre, used = [x], [], []
    h = x
    for i in range(config.n_hidden):
        z = h @ params.weights[i] + params.biases[i]
        a = _elu(z)
        m = masks[i]
        if m is not None:
            if not config.dropout[i]:
                raise ShapeError(f"mask given for hidden layer {i}, which has no dropout")
            m = np.asarray(m, dtype=np.float64)
            if m.shape != a.shape:
                raise ShapeError(f"mask shape {m.shape} != activation shape {a.shape} at layer {i}")
            m = m * scale
            a = a * m
        pre.append(z)
        used.append(m)
        acts.append(a)
        h = a
    out = h @ params.weights[-1] + params.biases[-1]
    return out, (acts, pre, used)


def forward(params: ToyNetParams, config: ToyNetConfig, x, masks=None) -> tuple[np.ndarray, np.ndarray]:
    """Return (mean, raw_sigma); sigma = exp(raw_sigma).

    ``masks`` holds one keep-mask per hidden layer (None where dropout is off).
    Without masks the network is deterministic.
    """
    xb, lead = _as_batch(config, x)
    out, _ = _forward_cache(params, config, xb, masks)
    return out[:, 0].reshape(lead), out[:, 1].reshape(lead)


def _backward(params, config, cache, g_out):
    acts, pre, used = cache
    gw = [None] * len(params.weights)
    gb = [None] * len(params.biases)
    g = g_out
    for i in range(len(params.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ g
        gb[i] = g.sum(axis=0)
        if i == 0:
            break
        g = g @ params.weights[i].T
        if used[i - 1] is not None:
            g = g * used[i - 1]
        g = g * _elu_grad(pre[i - 1])
    return gw, gb


def loss_and_grad(params: ToyNetParams, config: ToyNetConfig, x, y, masks=None):
    """Laplace NLL on a batch and its gradient w.r.t. every parameter.

    Returns ``(loss, grad_weights, grad_biases)``.
    """
    xb, _ = _as_batch(config, x)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size != xb.shape[0]:
        raise ShapeError(f"{y.size} targets for {xb.shape[0]} inputs")
    out, cache = _forward_cache(params, config, xb, masks)
    mean, raw = out[:, 0], out[:, 1]
    sigma = np.exp(raw)
    loss = float(np.mean(np.abs(y - mean) / sigma + raw))
    g_mean, g_raw = laplace_nll_grad(mean, raw, y)
    gw, gb = _backward(params, config, cache, np.stack([g_mean, g_raw], axis=1))
    return loss, gw, gb


def train(config: ToyNetConfig, dataset, settings: TrainSettings | None = None, seed: int = 0,
          init: ToyNetParams | None = None) -> ToyNetParams:
    """Mini-batch Adam on the Laplace NLL.

    ``dataset`` is ``(x, y)``. Shuffling and dropout masks come from one
    generator seeded with ``seed``; initial weights from ``init_params(seed)``
    unless ``init`` is given. Settings and the loss history end up in
    ``params.meta``.
    """
    settings = settings or TrainSettings()
    x, y = dataset
    xb, _ = _as_batch(config, x)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = xb.shape[0]
    if n == 0:
        raise EmptyInputError("training set is empty")
    if y.size != n:
        raise ShapeError(f"{y.size} targets for {n} inputs")

    params = init.copy() if init is not None else init_params(config, seed)
    rng = np.random.default_rng([seed, 1])
    tensors = params.weights + params.biases
    m1 = [np.zeros_like(t) for t in tensors]
    m2 = [np.zeros_like(t) for t in tensors]
    b1, b2 = settings.beta1, settings.beta2
    step = 0
    history = []
    for _ in range(settings.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, settings.batch_size):
            idx = order[start:start + settings.batch_size]
            masks = draw_masks(config, idx.size, rng) if config.has_dropout else None
            # overflow shows up as a non-finite loss, reported below with its step
            with np.errstate(over="ignore", invalid="ignore"):
                loss, gw, gb = loss_and_grad(params, config, xb[idx], y[idx], masks)
            step += 1
            if not math.isfinite(loss):
                raise TrainingError("loss diverged", step)
            for k, g in enumerate(gw + gb):
                m1[k] = b1 * m1[k] + (1 - b1) * g
                m2[k] = b2 * m2[k] + (1 - b2) * g * g
                mhat = m1[k] / (1 - b1**step)
                vhat = m2[k] / (1 - b2**step)
                tensors[k] -= settings.lr * mhat / (np.sqrt(vhat) + settings.eps)
            epoch_loss += loss * idx.size
        history.append(epoch_loss / n)

    params.meta.update({
        "train_seed": int(seed),
        "settings": settings.to_dict(),
        "steps": step,
        "loss_history": history,
    })
    return params


def train_ensemble(config: ToyNetConfig, dataset, settings: TrainSettings | None = None,
                   seeds=(0,)) -> EnsembleModel:
    if config.has_dropout:
        raise ConfigurationError("ensemble members are trained without dropout")
    seeds = [int(s) for s in seeds]
    return EnsembleModel([train(config, dataset, settings, s) for s in seeds], seeds)


def _sample_set(means, raws, lead) -> PredictiveSampleSet:
    means = np.stack(means).reshape((len(means),) + lead)
    sigmas = np.exp(np.stack(raws)).reshape((len(raws),) + lead)
    return PredictiveSampleSet(means, sigmas)


def mc_dropout_sample(params: ToyNetParams, config: ToyNetConfig, x, M: int, seed: int) -> PredictiveSampleSet:
    """M stochastic forward passes with independent dropout masks."""
    if not config.has_dropout:
        raise ConfigurationError("MC dropout needs at least one hidden layer with dropout")
    if M < 1:
        raise EmptyInputError("M must be >= 1")
    xb, lead = _as_batch(config, x)
    rng = np.random.default_rng(seed)
    means, raws = [], []
    for _ in range(M):
        out, _ = _forward_cache(params, config, xb, draw_masks(config, xb.shape[0], rng))
        means.append(out[:, 0])
        raws.append(out[:, 1])
    return _sample_set(means, raws, lead)


def ensemble_sample(ensemble: EnsembleModel, config: ToyNetConfig, x) -> PredictiveSampleSet:
    """One deterministic forward pass per member."""
    xb, lead = _as_batch(config, x)
    means, raws = [], []
    for member in ensemble.members:
        out, _ = _forward_cache(member, config, xb, None)
        means.append(out[:, 0])
        raws.append(out[:, 1])
    return _sample_set(means, raws, lead)
