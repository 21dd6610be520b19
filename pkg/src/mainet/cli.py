"""Command-line entry point.

    mainet gen | preprocess | train | eval | fuse | ablate | verify  [common flags]

Exit codes: 0 ok, 2 configuration error, 3 missing input, 4 malformed data;
``verify`` exits with the number of failed checks.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .data import gen_synthetic, load_dataset, save_dataset, split_dataset, synth_config_dict
from .fusion import DegenerateCombinationError, Evidence, decide, ds_combine, er_combine, majority_vote, prob_average
from .tensor import ConfigurationError

EXIT_CONFIG, EXIT_MISSING, EXIT_MALFORMED = 2, 3, 4
FUSE_METHODS = {"ER": er_combine, "DST": ds_combine, "PA": prob_average}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'section.key = value' config file")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--out", help="output directory (created if absent)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("--profile", choices=sorted(C.PROFILES), default="desk",
                   help="base defaults (default: desk)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mainet", description="Trimodal intensity classifier toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic trimodal dataset")
    _common(p)
    p.add_argument("--n", type=int, help="number of samples (data.n_samples)")

    p = sub.add_parser("preprocess", help="cut a recording directory into aligned raw windows")
    _common(p)
    p.add_argument("--input", required=True, help="recording directory (frames/, audio.wav, wave.csv, labels.csv)")
    p.add_argument("--width", type=float, default=1.0, help="window width in seconds")
    p.add_argument("--overlap", type=float, default=0.5, help="window overlap fraction")

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--data", help="dataset directory from 'gen' (default: generate from config)")
    p.add_argument("--resume", help="checkpoint path without suffix, e.g. OUT/last")

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint path without suffix")
    p.add_argument("--data", help="dataset directory (default: generate from config)")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")

    p = sub.add_parser("fuse", help="combine per-modality evidence rows from a CSV")
    _common(p)
    p.add_argument("--input", required=True,
                   help="CSV with columns sample,strong,weak,none[,w,r]; rows sharing a sample are combined")
    p.add_argument("--method", choices=("ER", "DST", "PA", "MV"), default="ER")

    p = sub.add_parser("ablate", help="modality / interaction / decision comparisons")
    _common(p)
    p.add_argument("--plan", default="table3,table4,fusion",
                   help="comma-separated items from table3, table4, table4-core, fusion")

    p = sub.add_parser("verify", help="run the built-in consistency checks")
    _common(p)
    return parser


def _resolve(args) -> dict:
    file_values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}", EXIT_MISSING)
        file_values = C.parse_config_text(path.read_text(), str(path))
    overrides = C.parse_overrides(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "n", None) is not None:
        overrides["data.n_samples"] = args.n
    return C.resolve(args.profile, file_values, overrides)


def _out_dir(args) -> Path:
    out = Path(args.out or Path("out") / args.command)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg, data_arg):
    if data_arg is None:
        return gen_synthetic(C.build_synth(cfg))
    path = Path(data_arg)
    if not (path / "manifest.json").is_file():
        raise CliError(f"dataset not found: {path}", EXIT_MISSING)
    return load_dataset(path)[0]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def cmd_gen(args, cfg, out: Path, h: str) -> int:
    synth = C.build_synth(cfg)
    ds = gen_synthetic(synth)
    manifest = save_dataset(ds, out, {"config_hash": h, "synth": synth_config_dict(synth)})
    print(f"wrote {manifest['count']} samples to {out}; class counts {manifest['class_counts']}")
    return 0


def cmd_preprocess(args, cfg, out: Path, h: str) -> int:
    from .preprocess import load_recording, window_stream, write_windows

    src = Path(args.input)
    if not src.is_dir():
        raise CliError(f"recording directory not found: {src}", EXIT_MISSING)
    windows = window_stream(load_recording(src), args.width, args.overlap)
    manifest = write_windows(windows, out, int(cfg["seed"]), cfg)
    print(f"wrote {manifest['count']} windows to {out}")
    return 0


def cmd_train(args, cfg, out: Path, h: str) -> int:
    from .model import MAINet
    from .train import evaluate, train

    if args.resume is not None and not Path(args.resume).with_suffix(".json").is_file():
        raise CliError(f"checkpoint not found: {args.resume}", EXIT_MISSING)
    ds = _dataset(cfg, args.data)
    tcfg = C.build_train(cfg)
    tr, va, _ = split_dataset(ds, tcfg.split, tcfg.seed)
    model = MAINet(C.build_model(cfg), np.random.default_rng(int(cfg["seed"])))
    res = train(model, tcfg, tr, va, out_dir=out, resume=args.resume, verbose=True,
                extra_meta={"config_hash": h})
    model.load_state_dict(res.best_state)
    _, rep = evaluate(model, va, tcfg.batch_size)
    _write_json(out / "val_metrics.json", {"config_hash": h, "best_epoch": res.best_epoch, **rep.as_dict()})
    s = rep.summary()
    print(f"best epoch {res.best_epoch}: val accuracy {s['accuracy']:.2f} precision {s['precision']:.2f} "
          f"recall {s['recall']:.2f} f1 {s['f1']:.2f}")
    return 0


def cmd_eval(args, cfg, out: Path, h: str) -> int:
    from .train import evaluate, load_model

    if not Path(args.checkpoint).with_suffix(".json").is_file():
        raise CliError(f"checkpoint not found: {args.checkpoint}", EXIT_MISSING)
    model, meta = load_model(args.checkpoint)
    ds = _dataset(cfg, args.data)
    if args.split != "all":
        tr, va, te = split_dataset(ds, C.build_train(cfg).split, int(cfg["seed"]))
        ds = {"train": tr, "val": va, "test": te}[args.split]
    loss, rep = evaluate(model, ds)
    _write_json(out / "metrics.json", {"config_hash": h, "split": args.split, "loss": loss, **rep.as_dict()})
    s = rep.summary()
    lines = [f"split {args.split} ({len(ds)} samples)", f"loss {loss:.6f}"]
    lines += [f"{k} {s[k]:.2f}" for k in ("accuracy", "precision", "recall", "f1")]
    lines.append("confusion (rows actual, columns predicted)")
    lines += ["  " + " ".join(f"{v:6d}" for v in row) for row in np.asarray(rep.confusion, dtype=int)]
    text = "\n".join(lines) + "\n"
    (out / "metrics.txt").write_text(text)
    print(text, end="")
    return 0


def read_evidence_csv(path: Path) -> list[tuple[str, list[Evidence]]]:
    """Group rows by sample id in first-seen order; malformed rows raise CliError(4)."""
    groups: dict[str, list[Evidence]] = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and row[0].strip().lower() == "sample":
                continue
            if len(row) not in (4, 6):
                raise CliError(f"{path}: row {lineno}: expected 4 or 6 columns, got {len(row)}", EXIT_MALFORMED)
            try:
                vals = [float(v) for v in row[1:]]
                w, r = (vals[3], vals[4]) if len(vals) == 5 else (1.0, 1.0)
                ev = Evidence(np.array(vals[:3]), w=w, r=r)
            except ValueError as e:
                raise CliError(f"{path}: row {lineno}: {e}", EXIT_MALFORMED) from None
            groups.setdefault(row[0].strip(), []).append(ev)
    return list(groups.items())


def cmd_fuse(args, cfg, out: Path, h: str) -> int:
    path = Path(args.input)
    if not path.is_file():
        raise CliError(f"evidence file not found: {path}", EXIT_MISSING)
    records = []
    for sample, evs in read_evidence_csv(path):
        rec = {"sample": sample, "method": args.method, "n_evidence": len(evs)}
        try:
            if args.method == "MV":
                rec["decision"] = majority_vote(evs)
            else:
                joint = FUSE_METHODS[args.method](evs)
                rec["joint"] = [float(v) for v in joint]
                rec["decision"] = decide(joint)
        except DegenerateCombinationError as e:
            rec["error"] = str(e)
        records.append(rec)
    _write_json(out / "fused.json", {"config_hash": h, "records": records})
    for rec in records:
        print(json.dumps(rec, sort_keys=True))
    return 0


def cmd_ablate(args, cfg, out: Path, h: str) -> int:
    from .ablate import ablate

    plan = [p.strip() for p in args.plan.split(",") if p.strip()]
    try:
        report = ablate(cfg, plan, out_dir=out, verbose=True)
    except ValueError as e:
        raise CliError(str(e), EXIT_CONFIG) from None
    print(report.text(), end="")
    return 0


def cmd_verify(args, cfg, out: Path, h: str) -> int:
    from .verify import run_checks

    checks = run_checks(int(cfg["seed"]))
    text = "".join(c.line() + "\n" for c in checks)
    failed = sum(not c.ok for c in checks)
    text += f"{len(checks) - failed}/{len(checks)} checks passed\n"
    (out / "verify.txt").write_text(text)
    print(text, end="")
    return failed


COMMANDS = {"gen": cmd_gen, "preprocess": cmd_preprocess, "train": cmd_train, "eval": cmd_eval,
            "fuse": cmd_fuse, "ablate": cmd_ablate, "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        out = _out_dir(args)
        h = C.write_effective(cfg, out)
        return COMMANDS[args.command](args, cfg, out, h)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
