"""Optimiser, schedule, loss and the training loop."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset
from .fusion import N_CLASSES
from .metrics import MetricsReport, compute_metrics, confusion_matrix
from .model import MAINet, ModelConfig, ModelOutput
from .nn import load_checkpoint, save_checkpoint
from .tensor import ConfigurationError, DimensionError, Tensor, log, no_grad, tape

LOG_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc")
CE_FLOOR = 1e-12


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, block: str):
        super().__init__(message)
        self.block = block


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    lr: float = 1e-3
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        self.split = tuple(float(s) for s in self.split)
        for name in ("batch_size", "epochs", "lr", "plateau_patience", "plateau_factor"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if len(self.split) != 3 or min(self.split) <= 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigurationError(f"split must be three positive shares summing to 1, got {self.split}")


# -- loss ---------------------------------------------------------------------------------

def cross_entropy(probs, label: int) -> float:
    p = np.asarray(probs, dtype=np.float64)
    return float(-np.log(p[label] + CE_FLOOR))


def batch_cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of -log(p[label] + 1e-12) over the batch axis."""
    labels = np.asarray(labels, dtype=int)
    onehot = np.eye(probs.shape[-1])[labels]
    return -(log(probs + CE_FLOOR) * onehot).sum() * (1.0 / len(labels))


def training_loss(out: ModelOutput, labels) -> Tensor:
    """Sum of per-head cross entropies plus the cross entropy of the joint."""
    loss = batch_cross_entropy(out.joint, labels)
    if len(out.probs) > 1:
        for m in sorted(out.probs):
            loss = loss + batch_cross_entropy(out.probs[m], labels)
    return loss


# -- optimiser ----------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction; a None gradient counts as zero."""
    if not (len(params) == len(grads) == len(state.m)):
        raise DimensionError("params, grads and optimiser state differ in length")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else g
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        p.assign_(p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps))


# -- plateau schedule ---------------------------------------------------------------------

@dataclass
class Plateau:
    patience: int = 5
    factor: float = 0.5
    best: float = -math.inf
    wait: int = 0

    def step(self, val_acc: float, lr: float) -> float:
        if val_acc > self.best:
            self.best, self.wait = val_acc, 0
            return lr
        self.wait += 1
        if self.wait >= self.patience:
            self.wait = 0
            return lr * self.factor
        return lr


def lr_schedule(history: Sequence[float], lr: float, patience: int = 5, factor: float = 0.5) -> float:
    """Learning rate after the last epoch of ``history``.

    Replays the plateau rule over the whole history; only a cut triggered
    by the final epoch changes ``lr``.
    """
    if not history:
        raise ValueError("history must be non-empty")
    sched = Plateau(patience, factor)
    cut = False
    for acc in history:
        cut = sched.step(acc, 1.0) != 1.0
    return lr * factor if cut else lr


# -- evaluation ---------------------------------------------------------------------------

def _batch_maps(ds: Dataset, idx) -> list:
    return [m[idx] for m in ds.maps]


@dataclass
class Predictions:
    joint: np.ndarray                   # (n, N)
    heads: np.ndarray | None            # (n, M, N) or None
    w: np.ndarray | None
    r: np.ndarray | None
    labels: np.ndarray


def predict(model: MAINet, ds: Dataset, batch_size: int = 64) -> Predictions:
    joints, heads = [], []
    w = r = None
    with no_grad():
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            out = model(_batch_maps(ds, idx))
            joints.append(out.joint.data)
            if out.probs:
                heads.append(out.stacked())
            if out.w is not None:
                w, r = out.w.data.copy(), out.r.data.copy()
    return Predictions(np.concatenate(joints), np.concatenate(heads) if heads else None, w, r, ds.labels.copy())


def metrics_from_probs(probs: np.ndarray, labels) -> MetricsReport:
    return compute_metrics(confusion_matrix(labels, np.argmax(probs, axis=-1), probs.shape[-1]))


def evaluate(model: MAINet, ds: Dataset, batch_size: int = 64) -> tuple[float, MetricsReport]:
    pred = predict(model, ds, batch_size)
    loss = float(np.mean(-np.log(pred.joint[np.arange(len(ds)), pred.labels] + CE_FLOOR)))
    return loss, metrics_from_probs(pred.joint, pred.labels)


# -- training loop ------------------------------------------------------------------------

@dataclass
class TrainResult:
    history: list[dict]
    best_val_acc: float
    best_epoch: int
    best_state: dict[str, np.ndarray] = field(repr=False)


def _offending_block(model: MAINet) -> str:
    for name, p in model.named_parameters():
        if not np.isfinite(p.data).all() or (p.grad is not None and not np.isfinite(p.grad).all()):
            return name.split(".")[0] + ":" + name
    return "loss"


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def _log_text(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for row in history:
        w.writerow([row["epoch"]] + [_fmt(row[k]) for k in LOG_COLUMNS[1:]])
    return buf.getvalue()


def save_training_state(path, model: MAINet, state: AdamState, meta: dict) -> None:
    tensors = {}
    names = [n for n, _ in model.named_parameters()]
    for n, p in model.named_parameters():
        tensors[f"param/{n}"] = p.data
    for n, m_, v_ in zip(names, state.m, state.v):
        tensors[f"adam_m/{n}"] = m_
        tensors[f"adam_v/{n}"] = v_
    save_checkpoint(path, tensors, {**meta, "adam_t": state.t})


def load_training_state(path, model: MAINet) -> tuple[AdamState, dict]:
    tensors, meta = load_checkpoint(path)
    names = [n for n, _ in model.named_parameters()]
    model.load_state_dict({n: tensors[f"param/{n}"] for n in names})
    state = AdamState([tensors[f"adam_m/{n}"].copy() for n in names],
                      [tensors[f"adam_v/{n}"].copy() for n in names], int(meta["adam_t"]))
    return state, meta


def load_model(path, rng_seed: int = 0) -> tuple[MAINet, dict]:
    """Rebuild a model from a checkpoint's recorded config and load its weights."""
    tensors, meta = load_checkpoint(path)
    model = MAINet(ModelConfig(**meta["model"]), np.random.default_rng(rng_seed))
    model.load_state_dict({n: tensors[f"param/{n}"] for n, _ in model.named_parameters()})
    return model, meta


def train(model: MAINet, cfg: TrainConfig, train_set: Dataset, val_set: Dataset,
          out_dir: str | Path | None = None, resume: str | Path | None = None,
          max_epochs: int | None = None, verbose: bool = False, extra_meta: dict | None = None) -> TrainResult:
    """Mini-batch Adam with a plateau schedule; keeps the best-validation weights.

    Batch order for epoch e comes from ``default_rng([seed, e])`` so a run
    resumed from a checkpoint replays exactly.  With ``out_dir`` the loop
    writes ``log.csv``, ``last.{bin,json}`` every epoch and ``best.{bin,json}``
    whenever validation accuracy improves.  ``max_epochs`` stops early
    (after that many epochs in this call) without changing the schedule.
    ``extra_meta`` is copied into every checkpoint's metadata.
    """
    params = model.parameters()
    names = [n for n, _ in model.named_parameters()]
    state = AdamState.fresh(params)
    lr = cfg.lr
    sched = Plateau(cfg.plateau_patience, cfg.plateau_factor)
    history: list[dict] = []
    best_acc, best_epoch, best_state = -math.inf, 0, model.state_dict()
    start = 1
    if resume is not None:
        state, meta = load_training_state(resume, model)
        lr = meta["lr"]
        sched = Plateau(cfg.plateau_patience, cfg.plateau_factor, meta["sched_best"], meta["sched_wait"])
        history = meta["history"]
        best_acc, best_epoch = meta["best_val_acc"], meta["best_epoch"]
        best_path = Path(resume).with_name("best")
        if best_path.with_suffix(".json").exists():
            best_state = {n: t for n, t in load_checkpoint(best_path)[0].items()}
            best_state = {n[len("param/"):]: t for n, t in best_state.items() if n.startswith("param/")}
        else:
            best_state = model.state_dict()
        start = meta["epoch"] + 1
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    stop = cfg.epochs if max_epochs is None else min(cfg.epochs, start - 1 + max_epochs)
    n = len(train_set)
    for epoch in range(start, stop + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        tot_loss, correct = 0.0, 0
        for b in range(0, n, cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            labels = train_set.labels[idx]
            with tape() as tp:
                outp = model(_batch_maps(train_set, idx))
                loss = training_loss(outp, labels)
            if not np.isfinite(loss.data):
                block = _offending_block(model)
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}; first bad block: {block}", block)
            model.zero_grad()
            loss.backward(tape_=tp)
            grads = [p.grad for p in params]
            for nm, g in zip(names, grads):
                if g is not None and not np.isfinite(g).all():
                    raise NonFiniteLossError(f"non-finite gradient at epoch {epoch} in {nm}", nm)
            adam_step(params, grads, state, lr)
            tot_loss += float(loss.data) * len(idx)
            correct += int((outp.joint.data.argmax(axis=-1) == labels).sum())
        val_loss, val = evaluate(model, val_set, cfg.batch_size)
        row = {"epoch": epoch, "lr": lr, "train_loss": tot_loss / n, "train_acc": 100.0 * correct / n,
               "val_loss": val_loss, "val_acc": val.accuracy}
        history.append(row)
        if verbose:
            print(",".join([str(epoch)] + [_fmt(row[k]) for k in LOG_COLUMNS[1:]]), flush=True)
        improved = val.accuracy > best_acc
        if improved:
            best_acc, best_epoch, best_state = val.accuracy, epoch, model.state_dict()
        lr = sched.step(val.accuracy, lr)
        if out is not None:
            meta = {"epoch": epoch, "lr": lr, "sched_best": sched.best, "sched_wait": sched.wait,
                    "best_val_acc": best_acc, "best_epoch": best_epoch, "history": history,
                    "model": model.cfg.as_dict(), "train": asdict(cfg), **(extra_meta or {})}
            save_training_state(out / "last", model, state, meta)
            if improved:
                save_training_state(out / "best", model, state, meta)
            (out / "log.csv").write_text(_log_text(history))
    return TrainResult(history, best_acc, best_epoch, best_state)
