"""Trainable building blocks: linear maps, embeddings, GRUs, Adam, dropout.

Parameter containers are plain dataclasses holding Tensors; application is
functional so that everything runs through the autodiff ops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class OptimError(RuntimeError):
    """Raised when an optimizer step cannot be applied."""


# ---------------------------------------------------------------------------
# Linear
# ---------------------------------------------------------------------------


@dataclass
class LinearParams:
    weight: Tensor  # (out_features, in_features)
    bias: Tensor    # (out_features,)

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def apply(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


def init_linear(out_features: int, in_features: int, rng: np.random.Generator,
                name: str = "linear") -> LinearParams:
    """Uniform(-s, s) weights with s = sqrt(6 / (in + out)); zero bias."""
    s = math.sqrt(6.0 / (in_features + out_features))
    w = rng.uniform(-s, s, size=(out_features, in_features))
    return LinearParams(
        weight=Tensor(w, requires_grad=True, name=f"{name}.weight"),
        bias=Tensor(np.zeros(out_features), requires_grad=True, name=f"{name}.bias"),
    )


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingTable:
    """(vocab_size, dim) lookup table; the padding row stays zero forever."""

    table: Tensor
    pad_index: int

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def lookup(self, indices) -> Tensor:
        return ad.embedding(self.table, indices)

    def zero_pad_grad(self, grads: dict[Tensor, np.ndarray]) -> None:
        g = grads.get(self.table)
        if g is not None:
            g[self.pad_index] = 0.0


def init_embedding(vocab_size: int, dim: int, rng: np.random.Generator,
                   pad_index: int = 0, scale: float = 0.1,
                   name: str = "embedding") -> EmbeddingTable:
    table = rng.uniform(-scale, scale, size=(vocab_size, dim))
    table[pad_index] = 0.0
    return EmbeddingTable(Tensor(table, requires_grad=True, name=name), pad_index)


def load_text_embeddings(emb: EmbeddingTable, path: str,
                         token_to_index: dict[str, int]) -> int:
    """Overwrite rows from a whitespace-separated text file (token then reals).

    Tokens absent from the vocabulary are skipped; vocabulary tokens absent
    from the file keep their random initialization.  Returns the number of
    rows written.  A line whose arity does not match the table width is an
    error.
    """
    dim = emb.dim
    loaded = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if len(values) != dim:
                raise ValueError(
                    f"{path}:{lineno}: expected {dim} values for {token!r}, got {len(values)}")
            idx = token_to_index.get(token)
            if idx is None or idx == emb.pad_index:
                continue
            emb.table.data[idx] = np.asarray([float(v) for v in values],
                                             dtype=emb.table.dtype)
            loaded += 1
    return loaded


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------


@dataclass
class GruParams:
    """One GRU direction: input weights W_*, recurrent weights U_*, biases."""

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    @property
    def hidden_size(self) -> int:
        return self.w_z.shape[0]


def init_gru(hidden_size: int, input_size: int, rng: np.random.Generator,
             name: str = "gru") -> GruParams:
    def lin(tag, n_in):
        return init_linear(hidden_size, n_in, rng, name=f"{name}.{tag}")

    wz, wr, wh = lin("w_z", input_size), lin("w_r", input_size), lin("w_h", input_size)
    uz, ur, uh = lin("u_z", hidden_size), lin("u_r", hidden_size), lin("u_h", hidden_size)
    return GruParams(
        w_z=wz.weight, u_z=uz.weight, b_z=wz.bias,
        w_r=wr.weight, u_r=ur.weight, b_r=wr.bias,
        w_h=wh.weight, u_h=uh.weight, b_h=wh.bias,
    )


def gru_params_dict(p: GruParams, prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}.{field}": getattr(p, field)
            for field in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")}


def gru_cell_step(x: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    """One batched step: rows of x and h_prev advance independently.

    Uses the convention h = (1 - z) * h_prev + z * h_tilde, so z gates how
    much of the candidate state is taken.  With all-zero parameters z = 0.5
    and h_tilde = 0, hence h = 0.5 * h_prev.
    """
    z = ad.sigmoid(ad.add(ad.linear(x, p.w_z, p.b_z), ad.linear(h_prev, p.u_z)))
    r = ad.sigmoid(ad.add(ad.linear(x, p.w_r, p.b_r), ad.linear(h_prev, p.u_r)))
    h_tilde = ad.tanh(ad.add(ad.linear(x, p.w_h, p.b_h),
                             ad.linear(ad.mul(r, h_prev), p.u_h)))
    one_minus_z = ad.add_scalar(ad.neg(z), 1.0)
    return ad.add(ad.mul(one_minus_z, h_prev), ad.mul(z, h_tilde))


def masked_gru_step(x: Tensor, h_prev: Tensor, p: GruParams, mask: Tensor) -> Tensor:
    """GRU step where rows with mask 0 keep their previous state.

    ``mask`` is a constant (batch, hidden) 0/1 tensor, pre-expanded so no
    broadcasting is needed.
    """
    cand = gru_cell_step(x, h_prev, p)
    keep = ad.add_scalar(ad.neg(mask), 1.0)
    return ad.add(ad.mul(mask, cand), ad.mul(keep, h_prev))


def bigru_encode(sequence: Tensor, init_fwd: Tensor, init_bwd: Tensor,
                 fwd: GruParams, bwd: GruParams) -> tuple[Tensor, Tensor]:
    """Run both directions over a (T, input) sequence.

    Returns (hiddens, final) where hiddens is (T, 2H) with forward and
    backward states concatenated per position, and final is (1, 2H): the
    forward state after the last position next to the backward state after
    the first position.
    """
    if sequence.ndim != 2:
        raise ad.ShapeError(f"bigru_encode: sequence must be (T, input), got {sequence.shape}")
    t_len = sequence.shape[0]
    steps = [ad.narrow(sequence, 0, t, 1) for t in range(t_len)]
    h = init_fwd
    fwd_states = []
    for t in range(t_len):
        h = gru_cell_step(steps[t], h, fwd)
        fwd_states.append(h)
    g = init_bwd
    bwd_states: list[Tensor | None] = [None] * t_len
    for t in reversed(range(t_len)):
        g = gru_cell_step(steps[t], g, bwd)
        bwd_states[t] = g
    hiddens = ad.concat([ad.concat([fwd_states[t], bwd_states[t]], axis=1)
                         for t in range(t_len)], axis=0)
    final = ad.concat([fwd_states[-1], bwd_states[0]], axis=1)
    return hiddens, final


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------


def dropout(x: Tensor, rate: float, training: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: kept activations are scaled by 1 / (1 - rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a generator")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return ad.mul(x, Tensor(mask, dtype=x.dtype))


# ---------------------------------------------------------------------------
# Gradient clipping and Adam
# ---------------------------------------------------------------------------


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 5.0) -> float:
    """Scale all gradients in place so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm.
    """
    norm = global_grad_norm(grads)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name not in self.params:
                raise OptimError(f"adam: gradient for unknown parameter {name!r}")
            if not np.isfinite(g).all():
                raise OptimError(f"adam: non-finite gradient for parameter {name!r}")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = self.params[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / b1t
            v_hat = v / b2t
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)

    def state_dict(self) -> dict:
        return {"t": self.t, "lr": self.lr, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps,
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        if set(state["m"]) != set(self.m):
            raise OptimError("adam: state parameter names do not match")
        self.t = state["t"]
        self.lr = state["lr"]
        self.beta1, self.beta2, self.eps = state["beta1"], state["beta2"], state["eps"]
        self.m = {k: v.copy() for k, v in state["m"].items()}
        self.v = {k: v.copy() for k, v in state["v"].items()}


def grads_by_name(params: dict[str, Tensor],
                  tensor_grads: dict[Tensor, np.ndarray]) -> dict[str, np.ndarray]:
    """Re-key a backward() result by parameter name, dropping untouched ones."""
    out = {}
    for name, p in params.items():
        g = tensor_grads.get(p)
        if g is not None:
            out[name] = g
    return out
