"""Modality / interaction / decision-rule comparisons under one protocol.

Every configuration is trained from the same seed on the same split with the
same budget, then scored on the held-out test split.  A run shared by two
tables (the full trimodal model) is trained once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import config as C
from .data import Dataset, gen_synthetic, split_dataset
from .fusion import (
    DegenerateCombinationError, Evidence, LearnedFusion, ds_combine, majority_vote, prob_average,
)
from .metrics import compute_metrics, confusion_matrix
from .model import MAINet
from .tensor import no_grad, tape
from .train import AdamState, Predictions, adam_step, batch_cross_entropy, metrics_from_probs, predict, train

IMAGE, AUDIO, WAVE = 0, 1, 2

# key -> (label, model-config overrides)
ROWS: dict[str, tuple[str, dict]] = {
    "wave": ("wave", dict(modalities=(WAVE,), interaction="none", decision="single")),
    "audio": ("audio", dict(modalities=(AUDIO,), interaction="none", decision="single")),
    "image": ("image", dict(modalities=(IMAGE,), interaction="none", decision="single")),
    "wave+audio": ("wave+audio", dict(modalities=(AUDIO, WAVE), interaction="dafn2", decision="er")),
    "wave+image": ("wave+image", dict(modalities=(IMAGE, WAVE), interaction="dafn2", decision="er")),
    "audio+image": ("audio+image", dict(modalities=(IMAGE, AUDIO), interaction="dafn2", decision="er")),
    "concat": ("concat", dict(interaction="none", decision="concat")),
    "arpm-image": ("arpm[image]", dict(interaction="arpm", primaries=(IMAGE,), decision="concat")),
    "arpm-audio": ("arpm[audio]", dict(interaction="arpm", primaries=(AUDIO,), decision="concat")),
    "arpm-wave": ("arpm[wave]", dict(interaction="arpm", primaries=(WAVE,), decision="concat")),
    "er-only": ("er", dict(interaction="none", decision="er")),
    "arpm+er": ("arpm[all]+er", dict(interaction="arpm", primaries=(0, 1, 2), decision="er")),
}

TABLE3 = ("wave", "audio", "image", "wave+audio", "wave+image", "audio+image", "arpm+er")
TABLE4 = ("concat", "arpm-image", "arpm-audio", "arpm-wave", "er-only", "arpm+er")
PLANS = {
    "table3": TABLE3,
    "table4": TABLE4,
    "table4-core": ("concat", "arpm+er"),
}
FUSION_METHODS = ("MV", "PA", "LF", "DST", "ER")


@dataclass
class Row:
    key: str
    label: str
    accuracy: float
    precision: float
    recall: float
    f1: float
    params_m: float
    best_epoch: int = 0
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"key": self.key, "label": self.label, "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "params_m": self.params_m, "best_epoch": self.best_epoch,
                **self.extra}


def _row(key: str, label: str, report, params: int, best_epoch: int = 0, **extra) -> Row:
    return Row(key, label, report.accuracy, report.precision, report.recall, report.f1, params / 1e6,
               best_epoch, extra)


def fit_learned_fusion(heads: np.ndarray, labels, seed: int, steps: int = 300, lr: float = 0.05) -> LearnedFusion:
    """Full-batch Adam on frozen head confidences (n, M, N)."""
    lf = LearnedFusion(heads.shape[1], np.random.default_rng(seed), heads.shape[2])
    params = lf.parameters()
    state = AdamState.fresh(params)
    for _ in range(steps):
        with tape() as tp:
            loss = batch_cross_entropy(lf(heads), labels)
        lf.zero_grad()
        loss.backward(tape_=tp)
        adam_step(params, [p.grad for p in params], state, lr)
    return lf


def fusion_decisions(pred: Predictions, lf: LearnedFusion | None = None) -> dict[str, np.ndarray]:
    """Per-method predicted class ids from the stored head confidences.

    ER is the model's own joint output (learned w, r).  DST falls back to
    PA on the rare sample where every class is vetoed.
    """
    n = len(pred.labels)
    out = {"ER": pred.joint.argmax(axis=-1)}
    mv, pa, ds = np.empty(n, int), np.empty(n, int), np.empty(n, int)
    fallbacks = 0
    for i in range(n):
        ev = [Evidence(p / p.sum()) for p in pred.heads[i]]
        mv[i] = majority_vote(ev)
        pa_i = prob_average(ev)
        pa[i] = int(np.argmax(pa_i))
        try:
            ds[i] = int(np.argmax(ds_combine(ev)))
        except DegenerateCombinationError:
            ds[i] = pa[i]
            fallbacks += 1
    out.update(MV=mv, PA=pa, DST=ds)
    if lf is not None:
        with no_grad():
            out["LF"] = lf(pred.heads).data.argmax(axis=-1)
    out["_dst_fallbacks"] = np.array(fallbacks)
    return out


@dataclass
class AblationReport:
    config_hash: str
    tables: dict[str, list[Row]]

    def as_dict(self) -> dict:
        return {"config_hash": self.config_hash,
                "tables": {k: [r.as_dict() for r in rows] for k, rows in self.tables.items()}}

    def text(self) -> str:
        lines = [f"config {self.config_hash}"]
        for name, rows in self.tables.items():
            lines.append("")
            lines.append(name)
            lines.append(f"{'configuration':<16}{'Acc/%':>9}{'Prec/%':>9}{'Rec/%':>9}{'F1/%':>9}{'Params/M':>10}")
            for r in rows:
                lines.append(f"{r.label:<16}{r.accuracy:9.2f}{r.precision:9.2f}{r.recall:9.2f}{r.f1:9.2f}"
                             f"{r.params_m:10.4f}")
        return "\n".join(lines) + "\n"

    def row(self, table: str, key: str) -> Row:
        return next(r for r in self.tables[table] if r.key == key)


def run_config(cfg: Mapping, key: str, splits, out_dir: Path | None = None, verbose: bool = False):
    label, overrides = ROWS[key]
    mcfg = C.build_model(cfg, **overrides)
    model = MAINet(mcfg, np.random.default_rng(int(cfg["seed"])))
    tr, va, te = splits
    run_dir = out_dir / "runs" / key if out_dir is not None else None
    res = train(model, C.build_train(cfg), tr, va, out_dir=run_dir, verbose=verbose)
    model.load_state_dict(res.best_state)
    return model, res


def ablate(cfg: Mapping, plan: Sequence[str] = ("table3", "table4", "fusion"), dataset: Dataset | None = None,
           out_dir: str | Path | None = None, verbose: bool = False) -> AblationReport:
    """Train every configuration the plan needs and score it on the test split."""
    for item in plan:
        if item not in PLANS and item != "fusion":
            raise ValueError(f"unknown plan item {item!r}; choose from {sorted(PLANS) + ['fusion']}")
    out = Path(out_dir) if out_dir is not None else None
    ds = dataset if dataset is not None else gen_synthetic(C.build_synth(cfg))
    splits = split_dataset(ds, C.build_train(cfg).split, int(cfg["seed"]))
    te = splits[2]
    cache: dict[str, tuple[MAINet, object, Predictions]] = {}

    def get(key):
        if key not in cache:
            if verbose:
                print(f"== {key}", flush=True)
            model, res = run_config(cfg, key, splits, out, verbose)
            cache[key] = (model, res, predict(model, te))
        return cache[key]

    tables: dict[str, list[Row]] = {}
    for item in plan:
        if item == "fusion":
            continue
        rows = []
        for key in PLANS[item]:
            model, res, pred = get(key)
            rows.append(_row(key, ROWS[key][0], metrics_from_probs(pred.joint, pred.labels),
                             model.num_parameters(), res.best_epoch))
        tables[item] = rows
    if "fusion" in plan:
        model, res, pred = get("arpm+er")
        train_pred = predict(model, splits[0])
        lf = fit_learned_fusion(train_pred.heads, train_pred.labels, int(cfg["seed"]),
                                int(cfg["lf.steps"]), float(cfg["lf.lr"]))
        dec = fusion_decisions(pred, lf)
        rows = []
        for name in FUSION_METHODS:
            rep = compute_metrics(confusion_matrix(pred.labels, dec[name], pred.joint.shape[-1]))
            extra = {"dst_fallbacks": int(dec["_dst_fallbacks"])} if name == "DST" else {}
            rows.append(_row(name.lower(), name, rep, model.num_parameters(), res.best_epoch, **extra))
        tables["fusion"] = rows
    report = AblationReport(C.config_hash(dict(cfg)), tables)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report.as_dict(), indent=1, sort_keys=True))
        (out / "report.txt").write_text(report.text())
    return report
