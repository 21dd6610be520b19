"""Self-contained consistency checks runnable on a fresh install.

Each check returns a ``Check``; ``run_checks`` collects them.  The checks use
their own direct re-computations (loops, closed forms) rather than the code
under test, so a pass is evidence of correctness, not of self-agreement.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .arpm import ARPM, zero_parameters
from .backbone import dilated_reparam_forward, reparam_merge
from .data import split_counts
from .fusion import N_CLASSES, er_joint
from .metrics import compute_metrics
from .nn import param
from .tensor import conv2d, grad_check, layer_norm, log, matmul, no_grad, softmax, tsum


@dataclass
class Check:
    name: str
    ok: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {self.detail}"


def _grad_checks(rng) -> list[Check]:
    out = []
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    x = rng.normal(size=(1, 2, 6, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    c = rng.normal(size=(2, 4))
    cases: list[tuple[str, Callable, np.ndarray, float]] = [
        ("matmul", lambda t: tsum(matmul(t, b) * matmul(t, b)), a, 1e-6),
        ("softmax", lambda t: tsum(softmax(t) * c), rng.normal(size=(2, 4)), 1e-6),
        ("layer_norm", lambda t: tsum(layer_norm(t) * a), rng.normal(size=(3, 4)), 1e-6),
        ("conv2d", lambda t: tsum(conv2d(t, k, padding=1) * x[:, :1].repeat(3, 1)), x, 1e-6),
    ]
    for name, f, x0, tol in cases:
        err = grad_check(f, x0)
        out.append(Check(f"grad {name}", err <= tol, f"max rel err {err:.2e} (tol {tol:g})"))
    p = rng.dirichlet(np.ones(N_CLASSES), size=3)
    w = rng.uniform(0.2, 1.0, 3)
    r = rng.uniform(0.2, 0.9, 3)
    target = rng.dirichlet(np.ones(N_CLASSES))
    for name, f, x0 in (
        ("p", lambda t: tsum(log(er_joint(t, w, r)) * target), p),
        ("w", lambda t: tsum(log(er_joint(p, t, r)) * target), w),
        ("r", lambda t: tsum(log(er_joint(p, w, t)) * target), r),
    ):
        err = grad_check(f, x0)
        out.append(Check(f"grad er wrt {name}", err <= 1e-5, f"max rel err {err:.2e} (tol 1e-05)"))
    return out


def _reparam_checks(rng) -> list[Check]:
    worst = 0.0
    for K, branches in ((13, ((13, 1), (5, 2), (3, 3))), (7, ((7, 1), (3, 2))), (9, ((5, 2), (3, 4), (9, 1)))):
        kernels = [(kk, d, param(rng.normal(size=(4, 1, kk, kk)))) for kk, d in branches]
        for _ in range(3):
            x = rng.normal(size=(2, 4, 15, 15))
            with no_grad():
                multi = dilated_reparam_forward(x, kernels, K).data
                merged = conv2d(x, reparam_merge(kernels, K), padding=K // 2, depthwise=True).data
            worst = max(worst, float(np.max(np.abs(multi - merged)) / np.max(np.abs(multi))))
    return [Check("reparam merge", worst <= 1e-10, f"max rel diff {worst:.2e} (tol 1e-10)")]


def _er_closed_form(p, w, r):
    """Direct evaluation of the ER formulas with Python floats."""
    M, N = p.shape
    c = [1.0 / (1.0 + w[m] - r[m]) for m in range(M)]
    A = []
    for n in range(N):
        v = 1.0
        for m in range(M):
            v *= c[m] * (1.0 - r[m] + w[m] * r[m] * p[m, n])
        A.append(v)
    B = 1.0
    for m in range(M):
        B *= c[m] * (1.0 - r[m])
    L = 1.0 / (sum(A) - (N - 1) * B)
    return np.array([L * (a - B) / (1.0 - L * B) for a in A])


def _er_checks(rng, n_sets: int = 1000) -> list[Check]:
    errs = {"closed form": 0.0, "single evidence": 0.0, "permutation": 0.0, "r=1 dempster": 0.0,
            "r=0 neutral": 0.0, "normalised": 0.0}
    with no_grad():
        for _ in range(n_sets):
            M = int(rng.integers(2, 5))
            p = rng.dirichlet(np.ones(N_CLASSES), size=M)
            w = rng.uniform(0.05, 1.0, M)
            r = rng.uniform(0.0, 0.95, M)
            joint = er_joint(p, w, r).data
            errs["closed form"] = max(errs["closed form"], float(np.abs(joint - _er_closed_form(p, w, r)).max()))
            errs["normalised"] = max(errs["normalised"], abs(joint.sum() - 1.0))
            perm = rng.permutation(M)
            errs["permutation"] = max(errs["permutation"],
                                      float(np.abs(er_joint(p[perm], w[perm], r[perm]).data - joint).max()))
            single = er_joint(p[:1], w[:1], r[:1]).data
            errs["single evidence"] = max(errs["single evidence"], float(np.abs(single - p[0]).max()))
            ds = p.prod(axis=0) / p.prod(axis=0).sum()
            errs["r=1 dempster"] = max(errs["r=1 dempster"], float(np.abs(er_joint(p, w, np.ones(M)).data - ds).max()))
            r0 = r.copy()
            r0[0] = 0.0
            rest = er_joint(p[1:], w[1:], r[1:]).data
            errs["r=0 neutral"] = max(errs["r=0 neutral"], float(np.abs(er_joint(p, w, r0).data - rest).max()))
    tol = {"closed form": 1e-12, "single evidence": 1e-12, "permutation": 1e-12, "r=1 dempster": 1e-9,
           "r=0 neutral": 1e-9, "normalised": 1e-9}
    return [Check(f"er {k}", v <= tol[k], f"max abs err {v:.2e} over {n_sets} sets (tol {tol[k]:g})")
            for k, v in errs.items()]


def _residual_check(rng) -> list[Check]:
    arpm = ARPM(8, 2, rng)
    zero_parameters(arpm)
    F = [rng.normal(size=(2, 4, 8)) for _ in range(3)]
    with no_grad():
        out = arpm(*F)
    ok = all(np.array_equal(o.data, f) for o, f in zip(out, F))
    return [Check("arpm residual identity", ok, "zero fusion parameters return inputs exactly" if ok
                  else "outputs differ from inputs")]


def _split_check() -> list[Check]:
    rows = [split_counts(n) for n in (2409, 2353, 2327)]
    want = [(1927, 241, 241), (1881, 236, 236), (1861, 233, 233)]
    totals = tuple(int(sum(col)) for col in zip(*rows))
    ok = rows == want and totals == (5669, 710, 710)
    return [Check("split counts", ok, f"rows {rows}, totals {totals}")]


def _metrics_check(rng) -> list[Check]:
    worst = 0.0
    for _ in range(100):
        cm = rng.integers(0, 50, size=(3, 3))
        rep = compute_metrics(cm)
        col, row, diag = cm.sum(0), cm.sum(1), np.diag(cm)
        prec = np.mean([diag[i] / col[i] if col[i] else 0.0 for i in range(3)]) * 100
        rec = np.mean([diag[i] / row[i] if row[i] else 0.0 for i in range(3)]) * 100
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        acc = diag.sum() / cm.sum() * 100
        worst = max(worst, abs(rep.precision - prec), abs(rep.recall - rec), abs(rep.f1 - f1),
                    abs(rep.accuracy - acc))
    perfect = compute_metrics(np.diag([5, 7, 9]))
    ok_perfect = all(v == 100.0 for v in (perfect.accuracy, perfect.precision, perfect.recall, perfect.f1))
    return [Check("metric formulas", worst <= 1e-9 and ok_perfect,
                  f"max abs err {worst:.2e} on 100 matrices; perfect diagonal {'100%' if ok_perfect else 'wrong'}")]


def run_checks(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    return (_grad_checks(rng) + _reparam_checks(rng) + _er_checks(rng) + _residual_check(rng)
            + _split_check() + _metrics_check(rng))
