"""Decision heads and evidence combination.

Each modality head emits a confidence distribution over the N intensity
classes together with a weight ``w`` and a reliability ``r``.  The ER rule
combines them:

    c_m   = 1 / (1 + w_m - r_m)
    A_n   = prod_m c_m (1 - r_m + alpha_nm)
    B     = prod_m c_m (1 - r_m)
    L     = 1 / (sum_n A_n - (N - 1) B)
    P_n   = L (A_n - B) / (1 - L B)

Since sum_n A_n - (N - 1) B = sum_n (A_n - B) + B, the last two lines reduce
to P_n = D_n / sum_k D_k with D_n = A_n - B.  D_n is evaluated as the
telescoped sum of non-negative terms

    D_n = sum_k [prod_{j<k} c_j (1 - r_j + alpha_nj)] c_k alpha_nk [prod_{j>k} c_j (1 - r_j)]

so no digits are lost to cancellation when alpha is small next to 1 - r.

With the default ``alpha_nm = w_m r_m p_nm`` an evidence with r_m = 0 is
neutral and r_m = 1 reduces to Dempster's normalised product.  The
``alpha="w"`` variant uses ``alpha_nm = w_m p_nm`` (the recursive ER rule of
the belief-rule literature), which coincides at r = 1 but lets a fully
unreliable source still shift the result.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import Linear, Module, param
from .tensor import (
    DimensionError, Tensor, as_tensor, concat, mean, no_grad, prod, reshape, sigmoid, softmax, tsum,
)

N_CLASSES = 3
ALPHA_RULES = ("wr", "w")
_DEGENERATE_TOL = 1e-300


class DegenerateCombinationError(ArithmeticError):
    """Raised when evidence leaves no support for any class."""

    def __init__(self, message: str, evidence: Sequence[int] = ()):
        super().__init__(message)
        self.evidence = tuple(int(i) for i in evidence)


@dataclass
class Evidence:
    p: np.ndarray
    w: float = 1.0
    r: float = 1.0
    p_global: float = 0.0

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(-1)
        self.w, self.r, self.p_global = float(self.w), float(self.r), float(self.p_global)
        if (self.p < 0).any() or self.p_global < 0:
            raise ValueError(f"confidences must be non-negative: {self.p}")
        if abs(self.p.sum() + self.p_global - 1.0) > 1e-9:
            raise ValueError(f"confidences sum to {self.p.sum() + self.p_global}, expected 1")
        if not 0.0 < self.w <= 1.0:
            raise ValueError(f"weight must lie in (0, 1], got {self.w}")
        if not 0.0 <= self.r <= 1.0:
            raise ValueError(f"reliability must lie in [0, 1], got {self.r}")


def _stack(evidences: Sequence[Evidence]):
    if not evidences:
        raise ValueError("need at least one evidence")
    n = {len(e.p) for e in evidences}
    if len(n) != 1:
        raise DimensionError(f"evidences disagree on the number of classes: {sorted(n)}")
    p = np.stack([e.p for e in evidences])
    return p, np.array([e.w for e in evidences]), np.array([e.r for e in evidences])


# -- ER rule -------------------------------------------------------------------------------

def er_joint(p, w, r, alpha: str = "wr") -> Tensor:
    """Differentiable ER combination.

    p: (..., M, N) confidences; w, r: (M,) or broadcastable to (..., M).
    Returns (..., N) joint confidences.
    """
    if alpha not in ALPHA_RULES:
        raise ValueError(f"unknown alpha rule {alpha!r}; choose from {ALPHA_RULES}")
    p, w, r = as_tensor(p), as_tensor(w), as_tensor(r)
    M = p.shape[-2]
    c = 1.0 / (1.0 + w - r)
    cm, wm, rm = (reshape(t, t.shape + (1,)) for t in (c, w, r))
    a = wm * rm * p if alpha == "wr" else wm * p
    with_support = cm * (1.0 - rm + a)            # (..., M, N)
    residual = cm * (1.0 - rm)                    # (..., M, 1)
    D = None
    for k in range(M):
        term = cm[..., k, :] * a[..., k, :]
        if k > 0:
            term = term * prod(with_support[..., :k, :], axis=-2)
        if k < M - 1:
            term = term * prod(residual[..., k + 1:, :], axis=-2)
        D = term if D is None else D + term
    total = tsum(D, axis=-1, keepdims=True)
    _check_degenerate(total.data, p.data, r.data)
    return D / total


def _check_degenerate(total, p, r):
    bad = total <= _DEGENERATE_TOL
    if not bad.any():
        return
    r_all = np.broadcast_to(r, p.shape[:-1])
    where = np.argwhere(bad[..., 0])
    sample = tuple(where[0]) if where.size else ()
    r_row = r_all[sample] if sample else r_all
    unreliable = [m for m in range(len(r_row)) if r_row[m] == 0.0]
    offending = unreliable if len(unreliable) == len(r_row) else list(range(len(r_row)))
    loc = f" at sample {sample}" if sample else ""
    raise DegenerateCombinationError(
        f"evidence leaves no class support{loc} (evidence {offending})", offending)


def er_combine(evidences: Sequence[Evidence], alpha: str = "wr") -> np.ndarray:
    p, w, r = _stack(evidences)
    with no_grad():
        return er_joint(p, w, r, alpha).data


# -- baselines -----------------------------------------------------------------------------

def ds_combine(evidences: Sequence[Evidence]) -> np.ndarray:
    """Dempster's rule over singleton masses: normalised elementwise product."""
    p, _, _ = _stack(evidences)
    joint = p.prod(axis=0)
    z = joint.sum()
    if z <= 0.0:
        raise DegenerateCombinationError("total conflict: no class is supported by every evidence",
                                         range(len(evidences)))
    return joint / z


def prob_average(evidences: Sequence[Evidence]) -> np.ndarray:
    p, _, _ = _stack(evidences)
    return p.mean(axis=0)


def majority_vote(evidences: Sequence[Evidence]) -> int:
    """Plurality of per-evidence argmaxes.

    Ties go to the tied class with the highest mean confidence, then the
    lowest class id.
    """
    p, _, _ = _stack(evidences)
    votes = np.bincount(p.argmax(axis=1), minlength=p.shape[1])
    tied = np.flatnonzero(votes == votes.max())
    conf = p.mean(axis=0)[tied]
    return int(tied[np.flatnonzero(conf == conf.max())[0]])


def learned_fusion(evidences: Sequence[Evidence], W, b) -> np.ndarray:
    """softmax(concat(p) W + b) with W shaped (M*N, N)."""
    p, _, _ = _stack(evidences)
    W, b = np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if W.shape != (p.size, p.shape[1]) or b.shape != (p.shape[1],):
        raise DimensionError(f"fusion layer expects W {(p.size, p.shape[1])} and b {(p.shape[1],)}, "
                             f"got {W.shape} and {b.shape}")
    with no_grad():
        return softmax(p.reshape(-1) @ W + b).data


class LearnedFusion(Module):
    """Fully connected fusion over the concatenated modality confidences."""

    def __init__(self, n_evidence: int, rng: np.random.Generator, n_classes: int = N_CLASSES):
        self.fc = Linear(n_evidence * n_classes, n_classes, rng)

    def forward(self, p):
        p = as_tensor(p)
        return softmax(self.fc(reshape(p, p.shape[:-2] + (p.shape[-2] * p.shape[-1],))), axis=-1)


def decide(joint) -> int:
    """Index of the largest confidence; ties resolve to the lowest class id."""
    return int(np.argmax(np.asarray(joint)))


# -- heads --------------------------------------------------------------------------------

class DecisionHead(Module):
    """Token mean-pool, linear d_m -> N, softmax; plus a learnable (w, r) pair.

    ``w`` and ``r`` are stored unconstrained and squashed with a sigmoid.
    """

    def __init__(self, d_m: int, rng: np.random.Generator, n_classes: int = N_CLASSES,
                 w0: float = 0.9, r0: float = 0.9):
        self.fc = Linear(d_m, n_classes, rng, gain=0.1)
        self.raw_w = param(np.array(np.log(w0 / (1.0 - w0))))
        self.raw_r = param(np.array(np.log(r0 / (1.0 - r0))))

    def logits(self, F_star) -> Tensor:
        return self.fc(mean(as_tensor(F_star), axis=-2))

    def forward(self, F_star) -> Tensor:
        return softmax(self.logits(F_star), axis=-1)

    def w(self) -> Tensor:
        return sigmoid(self.raw_w)

    def r(self) -> Tensor:
        return sigmoid(self.raw_r)


def head_forward(F_star, head: DecisionHead) -> Evidence:
    with no_grad():
        p = head(F_star).data
        return Evidence(p, w=head.w().item(), r=head.r().item())


def stack_heads(probs: Sequence[Tensor], heads: Sequence[DecisionHead]):
    """(..., N) per head -> (..., M, N) plus (M,) weights and reliabilities."""
    p = concat([reshape(q, q.shape[:-1] + (1, q.shape[-1])) for q in probs], axis=-2)
    w = concat([reshape(h.w(), (1,)) for h in heads])
    r = concat([reshape(h.r(), (1,)) for h in heads])
    return p, w, r
