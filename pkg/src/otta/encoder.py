"""Frozen toy encoder whose only trainable state is its LayerNorm affines.

The network is a stack of blocks, each a frozen semi-orthogonal linear map
followed by LayerNorm with trainable scale gamma and shift beta, then a tanh
GELU. The final activations are L2-normalized per column so downstream cosine
similarities are plain inner products; that normalization is part of the
differentiated graph. Gradients are derived by hand and restricted to the
gamma/beta vectors, which is the whole point: adaptation may only move the
normalization statistics, never the frozen weights.

Data layout is column-major throughout: inputs are (d_in, B), embeddings
(d_out, B), one column per sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import prototypes
from .errors import (
    EmptyBatch,
    InvalidConfig,
    InvalidTemperature,
    NonFiniteLoss,
    ShapeMismatch,
)

_LN_EPS = 1e-5
_LOG_FLOOR = 1e-12

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass(frozen=True)
class ToyEncoderSpec:
    """Architecture description; weights are a pure function of the seed."""

    d_in: int = 64
    d_hidden: int = 64
    d_out: int = 32
    layers: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("d_in", "d_hidden", "d_out", "layers"):
            val = getattr(self, name)
            if not isinstance(val, (int, np.integer)) or val < 1:
                raise InvalidConfig(f"{name} must be a positive int, got {val!r}")

    @property
    def layer_dims(self) -> tuple[tuple[int, int], ...]:
        """(n_out, n_in) per block."""
        if self.layers == 1:
            return ((self.d_out, self.d_in),)
        dims = [(self.d_hidden, self.d_in)]
        dims += [(self.d_hidden, self.d_hidden)] * (self.layers - 2)
        dims.append((self.d_out, self.d_hidden))
        return tuple(dims)


def _semi_orthogonal(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    """Haar-ish semi-orthogonal matrix; keeps the data geometry well conditioned."""
    gauss = rng.standard_normal((max(n_out, n_in), min(n_out, n_in)))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))[None, :]
    return q.T.copy() if n_in >= n_out else q.copy()


@dataclass(frozen=True)
class LayerNormState:
    """Per-layer gamma and beta vectors; also used as the gradient container."""

    gammas: tuple[np.ndarray, ...]
    betas: tuple[np.ndarray, ...]

    def __post_init__(self):
        gammas = tuple(np.asarray(g, dtype=np.float64) for g in self.gammas)
        betas = tuple(np.asarray(b, dtype=np.float64) for b in self.betas)
        if len(gammas) != len(betas):
            raise ShapeMismatch("gamma and beta layer counts differ")
        for g, b in zip(gammas, betas):
            if g.shape != b.shape or g.ndim != 1:
                raise ShapeMismatch("gamma/beta must be matching 1-d vectors per layer")
        object.__setattr__(self, "gammas", gammas)
        object.__setattr__(self, "betas", betas)


@dataclass(frozen=True)
class EmbeddingBatch:
    """(d, B) unit-norm embedding columns with optional integer labels."""

    z: np.ndarray
    labels: np.ndarray | None = None


class ToyEncoder:
    """Frozen weights built deterministically from a ToyEncoderSpec."""

    def __init__(self, spec: ToyEncoderSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        weights = []
        for n_out, n_in in spec.layer_dims:
            w = _semi_orthogonal(rng, n_out, n_in)
            w.flags.writeable = False
            weights.append(w)
        self.weights = tuple(weights)

    @property
    def d_in(self) -> int:
        return self.spec.d_in

    @property
    def d_out(self) -> int:
        return self.spec.d_out


def reset_state(enc: ToyEncoder) -> LayerNormState:
    """Reference LayerNorm state: gamma = 1, beta = 0 in every block."""
    gammas = tuple(np.ones(w.shape[0]) for w in enc.weights)
    betas = tuple(np.zeros(w.shape[0]) for w in enc.weights)
    return LayerNormState(gammas=gammas, betas=betas)


def zero_grads(enc: ToyEncoder) -> LayerNormState:
    gammas = tuple(np.zeros(w.shape[0]) for w in enc.weights)
    betas = tuple(np.zeros(w.shape[0]) for w in enc.weights)
    return LayerNormState(gammas=gammas, betas=betas)


def _check_state(enc: ToyEncoder, ln: LayerNormState) -> None:
    if len(ln.gammas) != len(enc.weights):
        raise ShapeMismatch(
            f"state has {len(ln.gammas)} layers, encoder has {len(enc.weights)}"
        )
    for g, w in zip(ln.gammas, enc.weights):
        if g.shape[0] != w.shape[0]:
            raise ShapeMismatch(f"gamma size {g.shape[0]} != layer width {w.shape[0]}")


def _check_input(enc: ToyEncoder, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != enc.d_in:
        raise ShapeMismatch(f"inputs must be ({enc.d_in}, B), got {arr.shape}")
    if arr.shape[1] == 0:
        raise EmptyBatch("batch has zero samples")
    if not np.isfinite(arr).all():
        raise ShapeMismatch("input entries must be finite")
    return arr


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x**3)))


def _gelu_prime(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)


def _forward_cache(enc: ToyEncoder, ln: LayerNormState, x: np.ndarray):
    """Forward pass keeping everything the backward pass needs."""
    blocks = []
    h = x
    for w, gamma, beta in zip(enc.weights, ln.gammas, ln.betas):
        a = w @ h
        mu = a.mean(axis=0, keepdims=True)
        var = a.var(axis=0, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + _LN_EPS)
        xhat = (a - mu) * inv_std
        u = gamma[:, None] * xhat + beta[:, None]
        h = _gelu(u)
        blocks.append({"inv_std": inv_std, "xhat": xhat, "u": u})
    norms = np.linalg.norm(h, axis=0, keepdims=True)
    z = h / norms
    return z, {"blocks": blocks, "norms": norms, "z": z}


def forward(enc: ToyEncoder, ln: LayerNormState, x) -> EmbeddingBatch:
    """Embed a batch; output columns are unit norm."""
    arr = _check_input(enc, x)
    _check_state(enc, ln)
    z, _ = _forward_cache(enc, ln, arr)
    return EmbeddingBatch(z=z)


def _grads_from_dz(enc: ToyEncoder, ln: LayerNormState, cache, dz: np.ndarray) -> LayerNormState:
    """Backpropagate an embedding-space gradient down to gamma/beta only."""
    norms = cache["norms"]
    z = cache["z"]
    # z = y / ||y||: project out the radial component, then rescale.
    dh = (dz - z * np.sum(z * dz, axis=0, keepdims=True)) / norms
    grad_gammas = []
    grad_betas = []
    for idx in range(len(enc.weights) - 1, -1, -1):
        blk = cache["blocks"][idx]
        du = dh * _gelu_prime(blk["u"])
        grad_gammas.append(np.sum(du * blk["xhat"], axis=1))
        grad_betas.append(np.sum(du, axis=1))
        if idx > 0:
            dxhat = du * ln.gammas[idx][:, None]
            mean_dxhat = dxhat.mean(axis=0, keepdims=True)
            mean_proj = (dxhat * blk["xhat"]).mean(axis=0, keepdims=True)
            da = blk["inv_std"] * (dxhat - mean_dxhat - blk["xhat"] * mean_proj)
            dh = enc.weights[idx].T @ da
    return LayerNormState(gammas=tuple(reversed(grad_gammas)), betas=tuple(reversed(grad_betas)))


def _log_softmax_columns(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=0, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=0, keepdims=True))


def _check_tau(tau: float) -> None:
    if not (isinstance(tau, (int, float)) and math.isfinite(tau)) or tau <= 0:
        raise InvalidTemperature(f"temperature must be finite and > 0, got {tau!r}")


def loss_and_grad(
    enc: ToyEncoder,
    ln: LayerNormState,
    x,
    targets,
    bank: prototypes.PrototypeBank,
    tau: float,
) -> tuple[float, LayerNormState]:
    """Cross-entropy of soft predictions against fixed target columns.

    loss = -(1/B) sum_j sum_k q_kj log max(p_kj, 1e-12), with p the softmax
    of averaged-bank cosines over tau and q the target columns, treated as
    constants. Returns the loss and gamma/beta gradients.

    Log-probabilities are computed in log space, so sharp temperatures never
    underflow them to -inf; the 1e-12 floor guards the reported value. The
    gradient is that of the unfloored cross-entropy, which is exact wherever
    the floor is inactive and keeps the usual softmax pull (p - q) alive in
    the saturated regime, where a floored graph would silently flatline.

    Target columns are expected to carry mass close to 1 each; the gradient
    is exact for whatever mass they carry (no sum-to-one shortcut is taken).
    """
    arr = _check_input(enc, x)
    _check_state(enc, ln)
    q = np.asarray(targets, dtype=np.float64)
    if q.shape != (bank.n_classes, arr.shape[1]):
        raise ShapeMismatch(
            f"targets must be ({bank.n_classes}, {arr.shape[1]}), got {q.shape}"
        )
    if not np.isfinite(q).all() or (q < 0).any():
        raise ShapeMismatch("targets must be finite and nonnegative")
    col_mass = q.sum(axis=0, keepdims=True)
    if np.max(np.abs(col_mass - 1.0)) > 0.5:
        raise ShapeMismatch("target columns are not remotely probability-like")
    if bank.dim != enc.d_out:
        raise ShapeMismatch(f"bank dim {bank.dim} != encoder output dim {enc.d_out}")
    _check_tau(tau)

    n_batch = arr.shape[1]
    z, cache = _forward_cache(enc, ln, arr)
    scores = bank.averaged.T @ z
    logp = _log_softmax_columns(scores / tau)
    p = np.exp(logp)
    loss = -float(np.sum(q * np.maximum(logp, math.log(_LOG_FLOOR)))) / n_batch

    dscores = (p * col_mass - q) / (n_batch * tau)
    dz = bank.averaged @ dscores
    grads = _grads_from_dz(enc, ln, cache, dz)

    if not math.isfinite(loss) or not all(
        np.isfinite(g).all() and np.isfinite(b).all()
        for g, b in zip(grads.gammas, grads.betas)
    ):
        raise NonFiniteLoss("cross-entropy loss or gradient left float64 range")
    return loss, grads


def entropy_loss_and_grad(
    enc: ToyEncoder,
    ln: LayerNormState,
    x,
    bank: prototypes.PrototypeBank,
    tau: float,
) -> tuple[float, LayerNormState]:
    """Shannon entropy of the predictions, averaged over the batch.

    loss = -(1/B) sum_j sum_k p_kj log max(p_kj, 1e-12). Unlike the
    cross-entropy above, the distribution inside the log is the live one, so
    gradients flow through both factors. Minimizing this sharpens predictions
    with no balancing constraint, which is exactly why it can collapse. At an
    exactly one-hot prediction both the loss and the gradient vanish.
    """
    arr = _check_input(enc, x)
    _check_state(enc, ln)
    if bank.dim != enc.d_out:
        raise ShapeMismatch(f"bank dim {bank.dim} != encoder output dim {enc.d_out}")
    _check_tau(tau)

    n_batch = arr.shape[1]
    z, cache = _forward_cache(enc, ln, arr)
    scores = bank.averaged.T @ z
    logp = _log_softmax_columns(scores / tau)
    p = np.exp(logp)
    loss = -float(np.sum(p * np.maximum(logp, math.log(_LOG_FLOOR)))) / n_batch

    gp = -(logp + 1.0) / n_batch
    inner = np.sum(p * gp, axis=0, keepdims=True)
    dscores = p * (gp - inner) / tau
    dz = bank.averaged @ dscores
    grads = _grads_from_dz(enc, ln, cache, dz)

    if not math.isfinite(loss) or not all(
        np.isfinite(g).all() and np.isfinite(b).all()
        for g, b in zip(grads.gammas, grads.betas)
    ):
        raise NonFiniteLoss("entropy loss or gradient left float64 range")
    return loss, grads


def sgd_step(ln: LayerNormState, grads: LayerNormState, lr: float) -> LayerNormState:
    """One plain gradient-descent step on gamma/beta; returns a new state."""
    if not (isinstance(lr, (int, float)) and math.isfinite(lr)) or lr < 0:
        raise InvalidConfig(f"learning rate must be finite and >= 0, got {lr!r}")
    if len(grads.gammas) != len(ln.gammas):
        raise ShapeMismatch("gradient and state layer counts differ")
    gammas = tuple(g - lr * dg for g, dg in zip(ln.gammas, grads.gammas))
    betas = tuple(b - lr * db for b, db in zip(ln.betas, grads.betas))
    return LayerNormState(gammas=gammas, betas=betas)
