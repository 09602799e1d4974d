"""Dense probabilistic ladder VAE with a class-conditional latent prior.

Rungs are indexed ``0 .. L-1`` from the input upward. Rung ``L-1`` is the top
and its Gaussian heads produce the latent code (width ``latent_dim``). Each
middle rung ``l < L-1`` produces Gaussian statistics of width
``layer_dims[l]`` on the way up, and the decoder produces matching top-down
statistics on the way down; the two are merged by precision weighting.

With ``ladder=False`` the middle rungs are plain deterministic layers, which
gives the non-ladder (CVAE) baseline from the same code.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DimensionError
from .numerics import Tensor

Mode = Literal["train", "deterministic"]

# softplus^-1(1): initial variance heads output 1
VAR_BIAS_INIT = math.log(math.e - 1.0)


@dataclass(frozen=True)
class LadderConfig:
    input_dim: int
    layer_dims: tuple[int, ...]
    num_classes: int
    latent_dim: int = 32
    prelu_init: float = 0.25
    ladder: bool = True
    layer_type: str = "dense"

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if self.input_dim < 1:
            raise ConfigError("input_dim must be positive")
        if len(self.layer_dims) < 1 or any(d < 1 for d in self.layer_dims):
            raise ConfigError("layer_dims needs at least one positive width")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.layer_type != "dense":
            raise ConfigError(f"unsupported layer_type {self.layer_type!r}; only 'dense'")

    @property
    def num_rungs(self) -> int:
        return len(self.layer_dims)

    def stat_dim(self, rung: int) -> int:
        """Width of the Gaussian statistics carried by ``rung``."""
        return self.latent_dim if rung == self.num_rungs - 1 else self.layer_dims[rung]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["layer_dims"] = list(self.layer_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> LadderConfig:
        return cls(**d)


@dataclass
class LayerStats:
    """Diagonal Gaussian statistics for one rung (batch x width)."""

    mu: Tensor
    var: Tensor

    def __post_init__(self):
        if self.mu.shape != self.var.shape:
            raise DimensionError(f"mu {self.mu.shape} and var {self.var.shape} differ")


@dataclass
class ForwardTrace:
    """Everything one forward pass produced.

    ``downward`` and ``merged`` hold ``None`` for the top rung (whose prior
    is the class-conditional Gaussian) and for rungs without stochastic
    layers.
    """

    upward: list[LayerStats | None]
    downward: list[LayerStats | None]
    merged: list[LayerStats | None]
    mu: Tensor
    var: Tensor
    z: Tensor
    recon: Tensor
    logits: Tensor | None = None


class LadderModel:
    """Parameter container for encoder, decoder, classifier and class means."""

    def __init__(self, config: LadderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: LadderConfig, seed: int = 0) -> LadderModel:
        rng = nx.make_rng(seed, "init")
        p: dict[str, Tensor] = {}
        L = config.num_rungs

        def weight(name, fan_in, fan_out, gain=2.0):
            p[name] = nx.parameter(rng.normal(0.0, math.sqrt(gain / fan_in), (fan_in, fan_out)))

        def bias(name, width, value=0.0):
            p[name] = nx.parameter(np.full(width, value))

        def slope(name):
            p[name] = nx.parameter(np.array([config.prelu_init]))

        def gauss_heads(prefix, fan_in, width, with_var=True):
            weight(f"{prefix}.mu.W", fan_in, width, gain=1.0)
            bias(f"{prefix}.mu.b", width)
            if with_var:
                weight(f"{prefix}.var.W", fan_in, width, gain=1.0)
                bias(f"{prefix}.var.b", width, VAR_BIAS_INIT)

        fan_in = config.input_dim
        for l, width in enumerate(config.layer_dims):
            weight(f"enc.{l}.W", fan_in, width)
            bias(f"enc.{l}.b", width)
            slope(f"enc.{l}.a")
            if l == L - 1 or config.ladder:
                gauss_heads(f"enc.{l}", width, config.stat_dim(l))
            fan_in = width

        # decoder block l turns the code of rung l+1 into top-down stats of rung l
        for l in range(L - 2, -1, -1):
            hidden = config.layer_dims[l + 1]
            weight(f"dec.{l}.W", config.stat_dim(l + 1), hidden)
            bias(f"dec.{l}.b", hidden)
            slope(f"dec.{l}.a")
            gauss_heads(f"dec.{l}", hidden, config.stat_dim(l), with_var=config.ladder)

        hidden = config.layer_dims[0]
        weight("out.W", config.stat_dim(0), hidden)
        bias("out.b", hidden)
        slope("out.a")
        weight("out.px.W", hidden, config.input_dim, gain=1.0)
        bias("out.px.b", config.input_dim)

        weight("cls.W", config.latent_dim, config.num_classes, gain=1.0)
        bias("cls.b", config.num_classes)
        p["class_means"] = nx.parameter(rng.normal(0.0, 1.0, (config.num_classes, config.latent_dim)))
        return cls(config, p)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def copy(self) -> LadderModel:
        return LadderModel(
            self.config, {k: nx.parameter(v.data.copy()) for k, v in self.params.items()}
        )

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def _dense(model: LadderModel, prefix: str, x: Tensor) -> Tensor:
    h = nx.linear(x, model[f"{prefix}.W"], model[f"{prefix}.b"])
    return nx.prelu(h, model[f"{prefix}.a"])


def _heads(model: LadderModel, prefix: str, h: Tensor) -> LayerStats:
    mu = nx.linear(h, model[f"{prefix}.mu.W"], model[f"{prefix}.mu.b"])
    var = nx.softplus(nx.linear(h, model[f"{prefix}.var.W"], model[f"{prefix}.var.b"]))
    return LayerStats(mu, var)


def _as_batch(x, width: int, what: str) -> Tensor:
    x = nx.as_tensor(x)
    if x.ndim == 1:
        x = nx.reshape(x, (1, -1))
    elif x.ndim > 2:
        x = nx.flatten(x)
    if x.shape[1] != width:
        raise DimensionError(f"{what}: expected width {width}, got shape {x.shape}")
    return x


def encode_upward(x, model: LadderModel) -> list[LayerStats | None]:
    """Bottom-up pass. Returns one entry per rung; the last is the latent (mu, var).

    Non-ladder models yield ``None`` for middle rungs.
    """
    cfg = model.config
    h = _as_batch(x, cfg.input_dim, "encode_upward")
    stats: list[LayerStats | None] = []
    for l in range(cfg.num_rungs):
        h = _dense(model, f"enc.{l}", h)
        if l == cfg.num_rungs - 1 or cfg.ladder:
            stats.append(_heads(model, f"enc.{l}", h))
        else:
            stats.append(None)
    return stats


def precision_merge(up: LayerStats, down: LayerStats) -> LayerStats:
    """Inverse-variance weighted combination of two diagonal Gaussians."""
    if np.any(up.var.data <= 0) or np.any(down.var.data <= 0):
        raise ContractError("precision_merge: variances must be strictly positive")
    prec_up = nx.reciprocal(up.var)
    prec_down = nx.reciprocal(down.var)
    var = nx.reciprocal(nx.add(prec_up, prec_down))
    mu = nx.mul(nx.add(nx.mul(down.mu, prec_down), nx.mul(up.mu, prec_up)), var)
    return LayerStats(mu, var)


def reparameterize(mu, var, eps) -> Tensor:
    """``mu + sqrt(var) * eps``."""
    mu, var = nx.as_tensor(mu), nx.as_tensor(var)
    if np.any(var.data <= 0):
        raise ContractError("reparameterize: variance must be strictly positive")
    return nx.add(mu, nx.mul(nx.sqrt(var), nx.as_tensor(eps)))


def _draw(stats: LayerStats, mode: Mode, rng: np.random.Generator | None) -> Tensor:
    if mode == "deterministic":
        return stats.mu
    if rng is None:
        raise ContractError("train mode needs a random generator for eps")
    return reparameterize(stats.mu, stats.var, rng.standard_normal(stats.mu.shape))


def decode_downward(
    z,
    upward: list[LayerStats | None] | None,
    model: LadderModel,
    mode: Mode = "deterministic",
    rng: np.random.Generator | None = None,
) -> ForwardTrace:
    """Top-down pass from latent code ``z`` to a reconstruction.

    With ``upward`` given, each middle rung merges its top-down statistics with
    the bottom-up ones and passes on a code drawn from the merged Gaussian
    (its mean in deterministic mode). Without ``upward`` the rung uses its own
    top-down statistics.
    """
    cfg = model.config
    L = cfg.num_rungs
    z = _as_batch(z, cfg.latent_dim, "decode_downward")
    if mode not in ("train", "deterministic"):
        raise ValueError(f"unknown mode {mode!r}")
    downward: list[LayerStats | None] = [None] * L
    merged: list[LayerStats | None] = [None] * L
    code = z
    for l in range(L - 2, -1, -1):
        h = _dense(model, f"dec.{l}", code)
        if not cfg.ladder:
            code = nx.linear(h, model[f"dec.{l}.mu.W"], model[f"dec.{l}.mu.b"])
            continue
        down = _heads(model, f"dec.{l}", h)
        downward[l] = down
        up = upward[l] if upward is not None else None
        q = precision_merge(up, down) if up is not None else down
        merged[l] = q
        code = _draw(q, mode, rng)
    h = _dense(model, "out", code)
    recon = nx.sigmoid(nx.linear(h, model["out.px.W"], model["out.px.b"]))
    top = upward[L - 1] if upward is not None else None
    return ForwardTrace(
        upward=list(upward) if upward is not None else [None] * L,
        downward=downward,
        merged=merged,
        mu=top.mu if top is not None else z,
        var=top.var if top is not None else nx.Tensor(np.ones(z.shape)),
        z=z,
        recon=recon,
    )


def class_means(model: LadderModel) -> Tensor:
    """The K x J matrix whose row k is the latent prior mean of class k."""
    return model["class_means"]


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise IndexError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def mean_of(model: LadderModel, k: int) -> Tensor:
    """Prior mean for class ``k`` (one-hot row times the embedding matrix)."""
    K = model.config.num_classes
    if not 0 <= k < K:
        raise IndexError(f"class index {k} outside [0, {K})")
    return nx.reshape(nx.matmul(nx.Tensor(one_hot([k], K)), class_means(model)), (-1,))


def means_for(model: LadderModel, labels) -> Tensor:
    """Batch of prior means, one row per label."""
    return nx.matmul(nx.Tensor(one_hot(labels, model.config.num_classes)), class_means(model))


def logits(z, model: LadderModel) -> Tensor:
    z = _as_batch(z, model.config.latent_dim, "logits")
    return nx.linear(z, model["cls.W"], model["cls.b"])


def classify(z, model: LadderModel) -> Tensor:
    """Softmax class probabilities, one row per latent code."""
    return nx.softmax(logits(z, model), axis=-1)


def forward(
    model: LadderModel,
    x,
    mode: Mode = "deterministic",
    rng: np.random.Generator | None = None,
) -> ForwardTrace:
    """Full encoder -> latent -> decoder -> classifier pass."""
    upward = encode_upward(x, model)
    top = upward[-1]
    z = _draw(top, mode, rng)
    trace = decode_downward(z, upward, model, mode=mode, rng=rng)
    trace.mu, trace.var = top.mu, top.var
    trace.logits = logits(z, model)
    return trace


def infer(model: LadderModel, x, batch_size: int = 1024) -> dict[str, np.ndarray]:
    """Deterministic latent codes, class probabilities and reconstructions.

    Runs without recording a tape; returns plain arrays.
    """
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(x.shape[0], -1) if x.ndim != 2 else x
    zs, probs, recons = [], [], []
    with nx.no_grad():
        for start in range(0, x.shape[0], batch_size):
            tr = forward(model, x[start:start + batch_size], mode="deterministic")
            zs.append(tr.z.data)
            probs.append(nx.softmax(tr.logits).data)
            recons.append(tr.recon.data)
    J, K = model.config.latent_dim, model.config.num_classes
    return {
        "z": np.concatenate(zs) if zs else np.zeros((0, J)),
        "probs": np.concatenate(probs) if probs else np.zeros((0, K)),
        "recon": np.concatenate(recons) if recons else np.zeros((0, model.config.input_dim)),
    }
