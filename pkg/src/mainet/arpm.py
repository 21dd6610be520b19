"""Auxiliary-modality reinforcement of a primary modality.

Attention operates on token sequences shaped (..., L, d_m).  A 512-wide modal
vector is split into L channel groups and each group is projected to d_m.

Per primary modality a (auxiliaries b, c):

    stage 1   F_ab = DAFN1(F_a, F_b) + CAFN(F_a, F_b)      (same for c)
    stage 2   A_abc = DAFN2(F_ab, F_ac)
              F_a*  = F_a + A_abc

Each primary modality owns its own parameters.  No positional encoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import Linear, Module, param, xavier
from .tensor import (
    ConfigurationError, DimensionError, Tensor, as_tensor, concat, linear, matmul, mean, relu,
    reshape, sigmoid, softmax, swapaxes,
)

MODALITIES = ("image", "audio", "wave")
RESIDUAL_GAIN = 0.1


class AttentionParams(Module):
    """Per-head Q/K/V projections (h, d_m, d_k) and the output map (h*d_k, d_m)."""

    def __init__(self, d_m: int, h: int, rng: np.random.Generator, out_gain: float = 1.0):
        if d_m % h:
            raise ConfigurationError(f"model width {d_m} not divisible by {h} heads")
        self.d_m, self.h, self.d_k = d_m, h, d_m // h
        self.W_Q = xavier(rng, (h, d_m, self.d_k), d_m, self.d_k)
        self.W_K = xavier(rng, (h, d_m, self.d_k), d_m, self.d_k)
        self.W_V = xavier(rng, (h, d_m, self.d_k), d_m, self.d_k)
        self.W_O = xavier(rng, (h * self.d_k, d_m), h * self.d_k, d_m, out_gain)


def _heads(X: Tensor, W: Tensor) -> Tensor:
    # (..., L, d) -> (..., 1, L, d) @ (h, d, dk) -> (..., h, L, dk)
    return matmul(reshape(X, X.shape[:-2] + (1,) + X.shape[-2:]), W)


def attention_weights(X_q, X_kv, p: AttentionParams) -> Tensor:
    """softmax(Q_i K_i^T / sqrt(d_k)) for every head: (..., h, L_q, L_kv)."""
    X_q, X_kv = as_tensor(X_q), as_tensor(X_kv)
    for X in (X_q, X_kv):
        if X.shape[-1] != p.d_m:
            raise DimensionError(f"token width {X.shape[-1]} != model width {p.d_m}")
    Q, K = _heads(X_q, p.W_Q), _heads(X_kv, p.W_K)
    return softmax(matmul(Q, swapaxes(K, -1, -2)) * (1.0 / math.sqrt(p.d_k)), axis=-1)


def mhca(X_q, X_kv, p: AttentionParams) -> Tensor:
    """Multi-head cross attention: queries from X_q, keys and values from X_kv."""
    X_q, X_kv = as_tensor(X_q), as_tensor(X_kv)
    A = attention_weights(X_q, X_kv, p)
    H = matmul(A, _heads(X_kv, p.W_V))                       # (..., h, L_q, d_k)
    H = swapaxes(H, -3, -2)                                   # (..., L_q, h, d_k)
    H = reshape(H, H.shape[:-2] + (p.h * p.d_k,))
    return matmul(H, p.W_O)


def mhsa(X, p: AttentionParams) -> Tensor:
    return mhca(X, X, p)


class CAFN(Module):
    """SE-style channel gate over the concatenation of two token sequences."""

    def __init__(self, d_m: int, rng: np.random.Generator, reduction: int = 4):
        c = 2 * d_m
        if c % reduction:
            raise ConfigurationError(f"{c} channels not divisible by reduction {reduction}")
        self.W1 = xavier(rng, (c, c // reduction), c, c // reduction)
        self.b1 = param(np.zeros(c // reduction))
        self.W2 = xavier(rng, (c // reduction, c), c // reduction, c)
        self.b2 = param(np.zeros(c))
        self.proj = Linear(c, d_m, rng)


def cafn(F_x, F_y, p: CAFN) -> Tensor:
    F_x, F_y = as_tensor(F_x), as_tensor(F_y)
    if F_x.shape != F_y.shape:
        raise DimensionError(f"CAFN inputs differ in shape: {F_x.shape} vs {F_y.shape}")
    cat = concat([F_x, F_y], axis=-1)
    squeeze = mean(cat, axis=-2)
    scale = sigmoid(linear(relu(linear(squeeze, p.W1, p.b1)), p.W2, p.b2))
    return p.proj(cat * reshape(scale, scale.shape[:-1] + (1, scale.shape[-1])))


class DAFN1(Module):
    def __init__(self, d_m: int, h: int, rng: np.random.Generator):
        self.self_attn = AttentionParams(d_m, h, rng)
        self.cross_attn = AttentionParams(d_m, h, rng)
        self.refine_attn = AttentionParams(d_m, h, rng)


def dafn1(F_primary, F_aux, p: DAFN1) -> Tensor:
    """Serial self -> cross -> self attention.

    The self-enhanced auxiliary sequence queries the primary sequence; the
    sum of the two is refined by a second self attention.
    """
    S = mhsa(F_aux, p.self_attn)
    C = mhca(S, F_primary, p.cross_attn)
    return mhsa(S + C, p.refine_attn)


class DAFN2(Module):
    """``out_gain`` scales the initial output projection; a small value makes a
    residual branch built on DAFN2 start close to the identity."""

    def __init__(self, d_m: int, h: int, rng: np.random.Generator, out_gain: float = 1.0):
        self.cross_ab = AttentionParams(d_m, h, rng)
        self.cross_ba = AttentionParams(d_m, h, rng)
        self.fuse = CAFN(d_m, rng)
        self.refine_attn = AttentionParams(d_m, h, rng, out_gain)


def dafn2(F_ab, F_ac, p: DAFN2) -> Tensor:
    """Parallel cross attention in both directions, CAFN fusion, self attention."""
    U = mhca(F_ab, F_ac, p.cross_ab)
    V = mhca(F_ac, F_ab, p.cross_ba)
    return mhsa(cafn(U, V, p.fuse), p.refine_attn)


@dataclass
class FusionIntermediates:
    A_ab: Tensor
    A_ac: Tensor
    G_ab: Tensor
    G_ac: Tensor
    F_ab: Tensor
    F_ac: Tensor
    A_abc: Tensor
    F_star: Tensor


class PrimaryBranch(Module):
    """Parameters for one choice of primary modality."""

    def __init__(self, d_m: int, h: int, rng: np.random.Generator):
        self.dafn1_b = DAFN1(d_m, h, rng)
        self.cafn_b = CAFN(d_m, rng)
        self.dafn1_c = DAFN1(d_m, h, rng)
        self.cafn_c = CAFN(d_m, rng)
        self.dafn2 = DAFN2(d_m, h, rng, RESIDUAL_GAIN)

    def forward(self, F_a, F_b, F_c) -> FusionIntermediates:
        A_ab, G_ab = dafn1(F_a, F_b, self.dafn1_b), cafn(F_a, F_b, self.cafn_b)
        A_ac, G_ac = dafn1(F_a, F_c, self.dafn1_c), cafn(F_a, F_c, self.cafn_c)
        F_ab, F_ac = A_ab + G_ab, A_ac + G_ac
        A_abc = dafn2(F_ab, F_ac, self.dafn2)
        return FusionIntermediates(A_ab, A_ac, G_ab, G_ac, F_ab, F_ac, A_abc, as_tensor(F_a) + A_abc)


class ARPM(Module):
    """Three primary branches; branch m enhances modality m using the other two."""

    def __init__(self, d_m: int, h: int, rng: np.random.Generator, primaries=(0, 1, 2)):
        self.primaries = tuple(primaries)
        self.branches = {str(m): PrimaryBranch(d_m, h, rng) for m in self.primaries}

    def enhance(self, feats, m: int) -> FusionIntermediates:
        b, c = [i for i in range(3) if i != m]
        return self.branches[str(m)](feats[m], feats[b], feats[c])

    def forward(self, F_a, F_b, F_c) -> tuple[Tensor, ...]:
        feats = (as_tensor(F_a), as_tensor(F_b), as_tensor(F_c))
        return tuple(self.enhance(feats, m).F_star if m in self.primaries else feats[m] for m in range(3))


def arpm_forward(F_a, F_b, F_c, params: ARPM) -> tuple[Tensor, Tensor, Tensor]:
    return params(F_a, F_b, F_c)


class BimodalInteraction(Module):
    """Two-modality enhancement: F_x* = F_x + DAFN2(F_x, F_y), and symmetrically."""

    def __init__(self, d_m: int, h: int, rng: np.random.Generator):
        self.x = DAFN2(d_m, h, rng, RESIDUAL_GAIN)
        self.y = DAFN2(d_m, h, rng, RESIDUAL_GAIN)

    def forward(self, F_x, F_y):
        F_x, F_y = as_tensor(F_x), as_tensor(F_y)
        return F_x + dafn2(F_x, F_y, self.x), F_y + dafn2(F_y, F_x, self.y)


class Tokenizer(Module):
    """512-wide vector -> L tokens of width d_m (reshape, then shared projection)."""

    def __init__(self, d_m: int, rng: np.random.Generator, n_tokens: int = 4, width: int = 512):
        if width % n_tokens:
            raise ConfigurationError(f"feature width {width} not divisible into {n_tokens} tokens")
        self.n_tokens, self.width = n_tokens, width
        self.proj = Linear(width // n_tokens, d_m, rng)

    def forward(self, f):
        f = as_tensor(f)
        if f.shape[-1] != self.width:
            raise DimensionError(f"tokenizer expects width {self.width}, got {f.shape}")
        return self.proj(reshape(f, f.shape[:-1] + (self.n_tokens, self.width // self.n_tokens)))


def tokenize(f, tokenizer: Tokenizer) -> Tensor:
    return tokenizer(f)


def zero_parameters(module: Module) -> None:
    for p in module.parameters():
        p.assign_(np.zeros_like(p.data))
