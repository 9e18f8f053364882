"""Command-line entry point: ``brainstrip <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error (including missing
input files). Each processed case produces one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from brainstrip import metrics, phantom
from brainstrip.densevnet import load_network, predict_mask
from brainstrip.labelgen import LabelGenConfig, make_spm12p_label
from brainstrip.nifti import read_nifti, write_nifti
from brainstrip.preprocess import (
    RegistrationError,
    RegistrationOptions,
    apply_transform,
    correct_bias_field,
    denoise_curvature_flow,
    register_rigid,
)
from brainstrip import trainer


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _Log:
    def __init__(self, command: str, timestamps: bool):
        self.command = command
        self.timestamps = timestamps

    def __call__(self, **fields):
        rec = {"cmd": self.command, **fields}
        if self.timestamps:
            rec["time"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
        print(json.dumps(rec, sort_keys=True), file=sys.stderr)


def _write_text(path, text: str) -> None:
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _need(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(2, "no such file or directory", str(p))


def _dims(text: str) -> tuple[int, int, int]:
    parts = [int(v) for v in text.split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"bad dims {text!r}")
    return tuple(parts)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from None


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


# -- subcommands ---------------------------------------------------------------------


def cmd_phantom_gen(args, log) -> int:
    out = Path(args.out)
    cases = phantom.generate_cohort(
        args.count, args.seed, args.dims, tumor_probability=args.tumor_probability
    )
    for case in cases:
        phantom.write_case(case, out / case.case_id)
        log(case=case.case_id, status="ok", has_tumor=case.spec.tumor is not None)
    return 0


def cmd_labelgen(args, log) -> int:
    _need(args.gm, args.wm, args.csf)
    cfg = LabelGenConfig(tau=args.tau, fill_holes=not args.no_fill)
    mask = make_spm12p_label(read_nifti(args.gm), read_nifti(args.wm), read_nifti(args.csf), cfg)
    write_nifti(mask, args.out)
    log(case=args.case_id or Path(args.out).stem, status="ok", voxels=int(np.sum(mask.data)))
    return 0


def cmd_preprocess(args, log) -> int:
    _need(args.input, args.reference)
    vol = read_nifti(args.input)
    fields = {}
    if args.denoise_steps > 0:
        vol = denoise_curvature_flow(vol, steps=args.denoise_steps)
    if args.bias_order > 0:
        data = np.asarray(vol.data, dtype=np.float64)
        # log-domain fit needs positive voxels; background noise can dip below 0
        floor = max(1e-6, 1e-3 * float(np.abs(data).max()))
        vol, _ = correct_bias_field(vol.with_data(np.maximum(data, floor)), order=args.bias_order)
    if args.reference is not None:
        ref = read_nifti(args.reference)
        opts = RegistrationOptions(metric=args.metric)
        try:
            xform = register_rigid(vol, ref, opts)
        except RegistrationError as exc:
            xform = exc.best
            fields["warning"] = str(exc)
        vol = apply_transform(vol, xform, ref)
        fields["transform"] = xform.to_line()
        if args.transform_out:
            _write_text(args.transform_out, xform.to_line() + "\n")
    write_nifti(vol, args.out)
    log(case=args.case_id or Path(args.input).stem, status="ok", **fields)
    return 0


def cmd_train(args, log) -> int:
    _need(args.data, args.config, args.validation)
    cfg = trainer.load_config(args.config)
    data = trainer.load_cases(args.data, args.label)
    validation = trainer.load_cases(args.validation, args.label) if args.validation else []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net_cfg = cfg.network_config()
    net = trainer.build_dense_vnet(net_cfg, cfg.seed)
    log(case="-", status="start", train_cases=len(data), parameters=net.parameter_count())

    def on_checkpoint(ckpt):
        path = out / f"ckpt_{ckpt.iteration:06d}.ckpt"
        trainer.save_checkpoint(path, ckpt, net_cfg)
        log(case="-", status="checkpoint", iteration=ckpt.iteration, path=path.name)

    result = trainer.train(data, net, cfg, on_checkpoint=on_checkpoint)
    _write_text(out / "loss.csv", trainer.loss_csv(result.losses))
    if validation:
        best = trainer.select_checkpoint(result.checkpoints, validation, net_cfg)
    else:
        best = result.checkpoints[-1]
    trainer.save_checkpoint(out / "model.ckpt", best, net_cfg)
    log(case="-", status="ok", selected_iteration=best.iteration, final_loss=result.losses[-1])
    return 0


def cmd_strip(args, log) -> int:
    _need(args.model, args.t1gd, args.flair)
    net, _, _ = load_network(args.model)
    t1gd = read_nifti(args.t1gd) if args.t1gd else None
    flair = read_nifti(args.flair) if args.flair else None
    start = time.perf_counter()
    mask = predict_mask(net, t1gd, flair)
    write_nifti(mask, args.out)
    fields = {"seconds": round(time.perf_counter() - start, 3)} if log.timestamps else {}
    log(case=args.case_id or Path(args.out).stem, status="ok", voxels=int(np.sum(mask.data)), **fields)
    return 0


def cmd_eval(args, log) -> int:
    _need(args.pred, args.truth)
    pred, truth = read_nifti(args.pred), read_nifti(args.truth)
    m = metrics.segmentation_metrics(metrics.confusion_counts(pred, truth))
    case_id = args.case_id or Path(args.pred).stem
    fmt = lambda v: "undefined" if v is None else f"{v:.6f}"  # noqa: E731
    print(f"dice={fmt(m.dice)} sensitivity={fmt(m.sensitivity)} specificity={fmt(m.specificity)}")
    if args.csv:
        rows = {}
        if Path(args.csv).exists():
            rows = metrics.read_cases_csv(Path(args.csv).read_text())
        rows[case_id] = m
        _write_text(args.csv, metrics.cases_csv(rows.items()))
    log(case=case_id, status="ok", dice=m.dice, sensitivity=m.sensitivity, specificity=m.specificity)
    return 0


def cmd_data_efficiency(args, log) -> int:
    _need(args.data, args.config, args.eval, args.validation)
    cfg = trainer.load_config(args.config)
    cases = trainer.load_cases(args.data, args.label)
    if args.eval and args.validation:
        train_cases = cases
        eval_set = trainer.load_cases(args.eval, args.label)
        validation = trainer.load_cases(args.validation, args.label)
    elif args.eval or args.validation:
        raise UsageError("give both --eval and --validation, or neither")
    else:
        split = trainer.split_dataset([c.case_id for c in cases], args.split, cfg.seed)
        by_id = {c.case_id: c for c in cases}
        train_cases = [by_id[i] for i in sorted(split.train)]
        validation = [by_id[i] for i in sorted(split.validation)]
        eval_set = [by_id[i] for i in sorted(split.test)]

    def on_row(row):
        log(case="-", status="ok", train_size=row.train_size, mean_dice=row.mean_dice, std_dice=row.std_dice)

    rows = trainer.run_data_efficiency(train_cases, args.sizes, cfg, eval_set, validation, on_row=on_row)
    _write_text(args.csv, trainer.efficiency_csv(rows))
    return 0


def summary_csv(runs: dict[str, dict[str, metrics.SegMetrics]], reference: str) -> str:
    """One row per run: mean/std of each metric and the paired t-test p-value
    of its dice against the reference run over shared case ids."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(metrics.SUMMARY_HEADER + ["n_cases", "p_dice"])
    ref = runs[reference]
    for name in sorted(runs):
        scores = runs[name]
        summary = metrics.summarize_runs(list(scores.values()))
        p = ""
        if name != reference:
            shared = sorted(k for k in scores if k in ref and scores[k].dice is not None and ref[k].dice is not None)
            if len(shared) >= 2:
                res = metrics.paired_t_test([scores[k].dice for k in shared], [ref[k].dice for k in shared])
                p = repr(res.p_value)
        w.writerow(metrics.summary_row(name, summary) + [str(len(scores)), p])
    return buf.getvalue()


def markdown_report(summary_text: str, reference: str) -> str:
    pct = lambda m, s: f"{100 * float(m):.2f} ({100 * float(s):.2f})"  # noqa: E731
    lines = [
        f"| Input | Dice | Sensitivity | Specificity | n | p (dice vs {reference}) |",
        "|---|---|---|---|---|---|",
    ]
    for row in csv.DictReader(io.StringIO(summary_text)):
        p = row["p_dice"]
        p_txt = "-" if not p else ("<0.001" if float(p) < 1e-3 else f"{float(p):.3f}")
        lines.append(
            f"| {row['input']} | {pct(row['dice_mean'], row['dice_std'])} | "
            f"{pct(row['sens_mean'], row['sens_std'])} | {pct(row['spec_mean'], row['spec_std'])} | "
            f"{row['n_cases']} | {p_txt} |"
        )
    return "Values are mean (standard deviation) in percent.\n\n" + "\n".join(lines) + "\n"


def cmd_report(args, log) -> int:
    _need(args.runs)
    runs = {}
    for path in sorted(Path(args.runs).glob("*.csv")):
        text = path.read_text()
        if not text.startswith("case_id,"):
            continue
        runs[path.stem] = metrics.read_cases_csv(text)
        log(case=path.stem, status="ok", cases=len(runs[path.stem]))
    if not runs:
        raise ValueError(f"{args.runs}: no per-case metric CSV files")
    reference = args.reference or sorted(runs)[0]
    if reference not in runs:
        raise ValueError(f"reference run {reference!r} not found in {args.runs}")
    text = summary_csv(runs, reference)
    if args.csv:
        _write_text(args.csv, text)
    _write_text(args.out, markdown_report(text, reference))
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--no-timestamp", action="store_true", help="omit timestamps from log lines")

    p = _Parser(prog="brainstrip", description="Skull stripping pipeline on NIfTI volumes.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("phantom-gen", parents=[common], help="write synthetic phantom case directories")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--dims", type=_dims, default=(48, 48, 48))
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tumor-probability", type=float, default=0.8)

    s = sub.add_parser("labelgen", parents=[common], help="brain mask from GM/WM/CSF maps")
    s.add_argument("--gm", required=True)
    s.add_argument("--wm", required=True)
    s.add_argument("--csf", required=True)
    s.add_argument("--tau", type=float, default=0.7)
    s.add_argument("--no-fill", action="store_true", help="skip hole filling")
    s.add_argument("--out", required=True)
    s.add_argument("--case-id")

    s = sub.add_parser("preprocess", parents=[common], help="denoise, bias-correct, optionally register")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--denoise-steps", type=int, default=10)
    s.add_argument("--bias-order", type=int, default=2, help="0 disables bias correction")
    s.add_argument("--reference", help="register rigidly onto this volume's grid")
    s.add_argument("--metric", choices=("mse", "ncc"), default="mse")
    s.add_argument("--transform-out")
    s.add_argument("--case-id")

    s = sub.add_parser("train", parents=[common], help="train a network on case directories")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--validation", help="case directories used for checkpoint selection")
    s.add_argument("--label", default="label", help="label file stem (falls back to truth)")

    s = sub.add_parser("strip", parents=[common], help="predict a brain mask")
    s.add_argument("--model", required=True)
    s.add_argument("--t1gd")
    s.add_argument("--flair")
    s.add_argument("--out", required=True)
    s.add_argument("--case-id")

    s = sub.add_parser("eval", parents=[common], help="dice/sensitivity/specificity of a mask")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--csv", help="per-case CSV to add this case to")
    s.add_argument("--case-id")

    s = sub.add_parser("data-efficiency", parents=[common], help="retrain on shrinking subsets")
    s.add_argument("--data", required=True)
    s.add_argument("--sizes", type=_int_list, required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--csv", required=True)
    s.add_argument("--eval", help="held-out evaluation cases (else split --data)")
    s.add_argument("--validation", help="checkpoint-selection cases (else split --data)")
    s.add_argument("--split", type=_float_list, default=(0.8, 0.07, 0.13))
    s.add_argument("--label", default="label")

    s = sub.add_parser("report", parents=[common], help="summary table over per-case CSVs")
    s.add_argument("--runs", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--csv", help="also write the summary CSV")
    s.add_argument("--reference", help="run compared against (default: first by name)")
    return p


COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "labelgen": cmd_labelgen,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "strip": cmd_strip,
    "eval": cmd_eval,
    "data-efficiency": cmd_data_efficiency,
    "report": cmd_report,
}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("brainstrip: a subcommand is required")
        if args.command == "strip" and not (args.t1gd or args.flair):
            raise UsageError("brainstrip strip: give --t1gd and/or --flair")
        log = _Log(args.command, not args.no_timestamp)
        return COMMANDS[args.command](args, log)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())
