"""Command-line surface: dataset generation, gradient checking, training,
evaluation, and the four-loss comparison.

Exit codes: 0 success, 1 failed numeric checks, 2 configuration problems,
3 I/O problems, 4 numeric aborts during training.

DICEGRAD_THREADS caps worker parallelism for the comparison command
(default 1, which keeps every output bitwise reproducible).  BLAS thread
pools are pinned to one thread unless the caller already set them, for the
same reason.
"""

from __future__ import annotations

import os

# Pin BLAS threading before numpy is first imported so runs are bitwise
# reproducible by default; explicit user settings win.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import sys

import numpy as np

from . import (checkpoint, config, gradcheck, metrics, model as model_mod,
               phantom, training, volume_io)
from .errors import (ConfigError, DicegradError, FormatError, IoError,
                     NumericError, ValidationError)
from .tensor_core import Rng

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _load_cfg(args) -> dict:
    text = None
    source = "<defaults>"
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise IoError(f"cannot read config {args.config}: {exc}") from exc
        source = args.config
    return config.resolve(text, args.set or [], source)


def _echo_config(cfg: dict, out_dir) -> None:
    if out_dir is None:
        return
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.cfg"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(config.render(cfg))


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("DICEGRAD_THREADS", "1")))
    except ValueError:
        return 1


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    if args.out is None:
        raise ConfigError("gen-data requires --out DIR")
    spec = config.phantom_spec(cfg)
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {args.out}: {exc}") from exc
    written: list[str] = []
    refs = []
    try:
        for case_id, seed, vol in phantom.generate_dataset(
                spec, cfg["data.num_cases"], cfg["data.seed"]):
            ref = volume_io.save_case(args.out, case_id, vol, seed)
            written += [os.path.join(args.out, ref.image_path),
                        os.path.join(args.out, ref.label_path)]
            refs.append(ref)
        volume_io.write_manifest(args.out, refs)
    except Exception:
        for path in written:        # do not leave a half-written dataset
            if os.path.exists(path):
                os.remove(path)
        raise
    _echo_config(cfg, args.out)
    print(f"wrote {len(refs)} cases ({2 * len(refs)} volume files) to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_cfg(args)
    threshold = cfg["check.threshold"]
    e2e_threshold = cfg["check.end_to_end_threshold"]
    rows = gradcheck.run_layer_checks() + gradcheck.run_loss_checks()
    lines = []
    failures = 0
    for name, err in rows:
        ok = err < threshold
        failures += 0 if ok else 1
        lines.append(f"{'PASS' if ok else 'FAIL'}  {name:40s} max_rel_err={err:.3e}")
    e2e = gradcheck.check_model_end_to_end()
    ok = e2e < e2e_threshold
    failures += 0 if ok else 1
    lines.append(f"{'PASS' if ok else 'FAIL'}  {'model/end_to_end':40s} max_rel_err={e2e:.3e}")
    lines.append(f"{len(rows) + 1 - failures}/{len(rows) + 1} checks passed "
                 f"(threshold {threshold:g}, end-to-end {e2e_threshold:g})")
    report = "\n".join(lines) + "\n"
    print(report, end="")
    if args.out is not None:
        _echo_config(cfg, args.out)
        with open(os.path.join(args.out, "gradcheck.txt"), "w",
                  encoding="utf-8", newline="\n") as fh:
            fh.write(report)
    return EXIT_OK if failures == 0 else EXIT_CHECK_FAILED


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if args.data is None or args.out is None:
        raise ConfigError("train requires --data DIR and --out DIR")
    model_cfg = config.model_config(cfg)
    train_cfg = config.train_config(cfg)
    train_ds, holdout = training.load_split(args.data, train_cfg.holdout_cases,
                                            model_cfg.num_labels)
    if args.resume:
        m, state = checkpoint.load_checkpoint(args.resume)
        if m.cfg != model_cfg:
            raise ValidationError(
                f"checkpoint model config {m.cfg} != configured {model_cfg}"
            )
    else:
        m = model_mod.build_model(model_cfg, Rng(train_cfg.seed).child(1))
        state = None
    _echo_config(cfg, args.out)
    m, record = training.train(m, train_ds, train_cfg, out_dir=args.out,
                               holdout=holdout, state=state)
    final = record.losses[-1][1] if record.losses else float("nan")
    print(f"trained {len(record.losses)} steps; final loss {final:.6f}; "
          f"outputs in {args.out}")
    return EXIT_OK


def _format_stat(values):
    defined = [v for v in values if v is not None]
    if not defined:
        return "", ""
    return (f"{float(np.mean(defined)):.17g}",
            f"{float(np.std(defined)):.17g}")


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    if args.data is None or args.out is None:
        raise ConfigError("eval requires --data DIR and --out DIR")
    self_test = cfg["eval.oracle_self_test"]
    num_labels = cfg["model.num_labels"]
    if not self_test:
        if args.checkpoint is None:
            raise ConfigError("eval requires --checkpoint (or eval.oracle_self_test=true)")
        m, _ = checkpoint.load_checkpoint(args.checkpoint)
        num_labels = m.cfg.num_labels

    refs = volume_io.read_manifest(args.data)
    rows = []          # (case_id, label, dsc, asd, flags)
    for ref in refs:
        vol = volume_io.load_case(args.data, ref)
        if vol.labels.max(initial=0) >= num_labels:
            raise ValidationError(
                f"case {ref.case_id} has label {vol.labels.max()} but the model "
                f"knows {num_labels} labels"
            )
        if self_test:
            pred = vol.labels.copy()
        else:
            pred = model_mod.segment_volume(m, vol.intensities)
        report = metrics.evaluate_case(pred, vol, num_labels=num_labels)
        for label, lm in sorted(report.per_label.items()):
            flags = []
            if lm.gt_voxels == 0:
                flags.append("gt_empty")
            if lm.pred_voxels == 0:
                flags.append("pred_empty")
            rows.append((ref.case_id, label, lm.dsc, lm.asd_mm, ";".join(flags)))

    os.makedirs(args.out, exist_ok=True)
    _echo_config(cfg, args.out)
    with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("case_id,label,dsc,asd_mm,flags\n")
        for case_id, label, dsc, asd, flags in rows:
            asd_s = "" if asd is None else f"{asd:.17g}"
            fh.write(f"{case_id},{label},{dsc:.17g},{asd_s},{flags}\n")
    with open(os.path.join(args.out, "summary.csv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("label,cases,dsc_mean,dsc_std,asd_mean,asd_std,absent_cases\n")
        for label in range(1, num_labels):
            sub = [r for r in rows if r[1] == label]
            dsc_mean, dsc_std = _format_stat([r[2] for r in sub])
            asd_mean, asd_std = _format_stat([r[3] for r in sub])
            absent = sum(1 for r in sub if r[4])
            fh.write(f"{label},{len(sub)},{dsc_mean},{dsc_std},"
                     f"{asd_mean},{asd_std},{absent}\n")
            dm = float(dsc_mean) if dsc_mean else float("nan")
            am = float(asd_mean) if asd_mean else float("nan")
            print(f"label {label}: DSC {100 * dm:6.1f} %   ASD {am:7.3f} mm   "
                  f"({len(sub)} cases, {absent} flagged)")
    print(f"wrote metrics for {len(refs)} cases to {args.out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    if args.data is None or args.out is None:
        raise ConfigError("compare requires --data DIR and --out DIR")
    from . import svgplot

    model_cfg = config.model_config(cfg)
    base_cfg = config.train_config(cfg)
    cmp_cfg = config.compare_config(cfg)
    _echo_config(cfg, args.out)
    report = training.run_loss_comparison(args.data, model_cfg, base_cfg,
                                          cmp_cfg, args.out,
                                          max_workers=_workers())
    training.write_comparison_csv(os.path.join(args.out, "compare_results.csv"),
                                  report.results)
    with open(os.path.join(args.out, "verdicts.txt"), "w", encoding="utf-8",
              newline="\n") as fh:
        for line in report.verdicts:
            fh.write(line + "\n")
    for label in range(1, model_cfg.num_labels):
        groups = {}
        for kind in cmp_cfg.losses:
            vals = [r.dsc for r in report.results
                    if r.loss_kind == kind and r.label == label]
            if vals:
                groups[kind] = vals
        if groups:
            svgplot.box_plot(
                os.path.join(args.out, f"dsc_label{label}.svg"), groups,
                title=f"Test Dice, label {label}", y_label="DSC")
    for line in report.verdicts:
        print(line)
    for kind, seed, why in report.failed_cells:
        print(f"warning: cell ({kind}, seed {seed}) failed: {why}", file=sys.stderr)
    if report.failed_cells and not report.results:
        return EXIT_NUMERIC
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dicegrad",
        description="From-scratch differentiable segmentation workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "gen-data": (cmd_gen_data, "generate a synthetic phantom dataset"),
        "gradcheck": (cmd_gradcheck, "finite-difference checks for layers and losses"),
        "train": (cmd_train, "train a segmentation model"),
        "eval": (cmd_eval, "evaluate a checkpoint (or ground truth) on a dataset"),
        "compare": (cmd_compare, "train and compare the four losses"),
    }
    for name, (fn, help_text) in specs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="path to a key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--data", help="dataset directory (with manifest.csv)")
        if name == "train":
            p.add_argument("--resume", help="checkpoint to resume from")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint to evaluate")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IoError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DicegradError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
