"""Command-line interface: ``partkd <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .data import load_dataset, save_dataset
from .errors import ConfigError, PartKDError, StageFailed, UnknownSchema
from .part_matrix import MATRIX_FILE, EfficiencyMatrix, build_efficiency_matrix, export_heatmap
from .skeleton import build_part_map
from .synth import SynthConfig, synth_generate
from .training import (TrainConfig, evaluate, load_checkpoint, matrix_split, save_checkpoint, train_student,
                       train_teacher)

log = logging.getLogger("partkd")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return doc


def _echo(out_dir: Path, name: str, doc: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(yaml.safe_dump(doc, sort_keys=False))


def _train_config(args) -> TrainConfig:
    base = TrainConfig.paper() if args.paper_profile else TrainConfig.fast()
    d = base.to_dict()
    for k, v in _read_config(args.config).items():
        d[k] = {**d[k], **v} if isinstance(v, dict) and isinstance(d.get(k), dict) else v
    for flag in ("seed", "epochs", "occlusion_p", "holdout_fraction"):
        value = getattr(args, flag, None)
        if value is not None:
            d[flag] = value
    if args.epochs is not None and "lr_decay_epochs" not in _read_config(args.config):
        # keep the decay points at the same relative positions
        scaled = {int(e * args.epochs / base.epochs) for e in base.lr_decay_epochs}
        d["lr_decay_epochs"] = sorted(e for e in scaled if 0 < e < args.epochs)
    for flag in ("reocclude_per_epoch", "masked_pooling"):
        if getattr(args, flag, False):
            d[flag] = True
    for key in ("alpha", "w"):
        value = getattr(args, key, None)
        if value is not None:
            d["distill"] = {**d["distill"], key: value}
    cfg = TrainConfig.from_dict(d)
    cfg.validate()
    return cfg


# --- commands --------------------------------------------------------------

def cmd_synth(args) -> int:
    d = _read_config(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = SynthConfig.from_dict(d)
    cfg.validate()
    ds = synth_generate(cfg)
    out = Path(args.out)
    manifest = save_dataset(ds, out)
    _echo(out, "synth_config.yaml", cfg.to_dict())
    print(f"wrote {ds.M} paired + {ds.N} solitary instances -> {manifest}")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = _train_config(args)
    ds = load_dataset(args.data)
    out = Path(args.out)
    _echo(out, "train_config.yaml", cfg.to_dict())
    res = train_teacher(ds, cfg)
    ckpt = save_checkpoint(out / "teacher.pt", res.model, cfg, "teacher")
    (out / "history.json").write_text(json.dumps(res.history, indent=1))
    print(f"teacher train accuracy {res.history[-1]['train_acc']:.4f} -> {ckpt}")
    return EXIT_OK


def cmd_build_matrix(args) -> int:
    teacher, doc = load_checkpoint(args.teacher)
    cfg = TrainConfig.from_dict(doc["train_config"])
    if args.holdout_fraction is not None:
        cfg.holdout_fraction = args.holdout_fraction
        cfg.validate()
    ds = load_dataset(args.data)
    seqs = matrix_split(ds, cfg)[1]
    E = build_efficiency_matrix(teacher, seqs, build_part_map(teacher.graph.schema_id), cfg.frames, cfg.bodies,
                                [f"action {c}" for c in range(ds.num_actions)])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    png, path = export_heatmap(E, E.action_names, (out / MATRIX_FILE).with_suffix(".png"))
    print(f"efficiency matrix from {len(seqs)} sequences -> {path} ({png.name})")
    return EXIT_OK


def cmd_train_student(args) -> int:
    cfg = _train_config(args)
    ds = load_dataset(args.data)
    teacher = E = None
    if not args.no_kd:
        if args.teacher is None or args.matrix is None:
            raise ConfigError("distillation needs --teacher and --matrix (or pass --no-kd)")
        teacher, _ = load_checkpoint(args.teacher, cfg.backbone)
        E = EfficiencyMatrix.load(args.matrix)
    out = Path(args.out)
    _echo(out, "train_config.yaml", {**cfg.to_dict(), "kd": not args.no_kd, "teacher": args.teacher,
                                      "matrix": args.matrix})
    res = train_student(ds, cfg, teacher, E)
    ckpt = save_checkpoint(out / "student.pt", res.model, cfg, "student", kd=not args.no_kd)
    (out / "history.json").write_text(json.dumps(res.history, indent=1))
    print(f"student train accuracy {res.history[-1]['train_acc']:.4f}, solitary terms {res.stats.solitary} "
          f"-> {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, doc = load_checkpoint(args.checkpoint)
    cfg = TrainConfig.from_dict(doc["train_config"])
    ds = load_dataset(args.data)
    seqs = [s for s in ds.high() + ds.low() if s.schema_id == model.graph.schema_id]
    if not seqs:
        raise ConfigError(f"no test sequences on schema {model.graph.schema_id}")
    m = evaluate(model, seqs, args.occlusion_p, cfg.eval_seed if args.eval_seed is None else args.eval_seed,
                 cfg.frames, cfg.bodies, cfg.masked_pooling)
    print(f"top1 {100 * m.top1:.2f}  top5 {100 * m.top5:.2f}  (n={len(seqs)}, occlusion p={args.occlusion_p:g})")
    if args.out:
        Path(args.out).write_text(json.dumps({"occlusion_p": args.occlusion_p, **m.to_dict()}, indent=1))
    return EXIT_OK


def cmd_plot_matrix(args) -> int:
    E = EfficiencyMatrix.load(args.matrix)
    names = list(E.action_names) or [f"action {c}" for c in range(E.num_actions)]
    png, js = export_heatmap(E, names, args.out)
    print(f"heatmap -> {png} ({js})")
    return EXIT_OK


def cmd_run_experiment(args) -> int:
    from .experiment import ExperimentManifest, render_report, run_experiment

    manifest = ExperimentManifest.load(args.manifest)
    if args.paper_profile:
        manifest.profile = "paper"
    if args.seeds:
        manifest.seeds = tuple(args.seeds)
    manifest.validate()
    report = run_experiment(manifest, args.out)
    print(render_report(report), end="")
    print(f"runtime {report.runtime_s:.1f} s -> {args.out}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="training config file (YAML or JSON), merged over the profile defaults")
    p.add_argument("--paper-profile", action="store_true", help="T=300 and the 9-block backbone")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--occlusion-p", type=float, help="joint occlusion probability on the training data")
    p.add_argument("--reocclude-per-epoch", action="store_true", help="redraw the occlusion masks every epoch")
    p.add_argument("--masked-pooling", action="store_true", help="exclude padded frames from the feature means")
    p.add_argument("--holdout-fraction", type=float, help="share of paired HQ data withheld for the matrix")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partkd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired/solitary dataset")
    p.add_argument("--config", help="synth config file (YAML or JSON)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-teacher", help="train the teacher on the paired high-quality data")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--out", required=True)
    _training_flags(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("build-matrix", help="measure the action/part efficiency matrix")
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory (matrix JSON and heatmap)")
    p.add_argument("--holdout-fraction", type=float)
    p.set_defaults(func=cmd_build_matrix)

    p = sub.add_parser("train-student", help="train the student on all low-quality data")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--teacher")
    p.add_argument("--matrix", help="matrix JSON or the build-matrix output directory")
    p.add_argument("--no-kd", action="store_true", help="plain classifier baseline without distillation")
    p.add_argument("--alpha", type=float)
    p.add_argument("--w", type=float)
    _training_flags(p)
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("eval", help="evaluate a checkpoint under joint occlusion")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--occlusion-p", type=float, default=0.0)
    p.add_argument("--eval-seed", type=int)
    p.add_argument("--out", help="write metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot-matrix", help="render an efficiency matrix as a heatmap")
    p.add_argument("--matrix", required=True, help="matrix JSON or the build-matrix output directory")
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(func=cmd_plot_matrix)

    p = sub.add_parser("run-experiment", help="run the occlusion and pairing grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--paper-profile", action="store_true")
    p.add_argument("--seeds", type=int, nargs="+")
    p.set_defaults(func=cmd_run_experiment)
    return parser


def _is_config_error(exc: BaseException) -> bool:
    while exc is not None:
        if isinstance(exc, (ConfigError, UnknownSchema)):
            return True
        exc = exc.__cause__
    return False


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (PartKDError, OSError, ValueError) as exc:
        code = EXIT_CONFIG if _is_config_error(exc) else EXIT_RUNTIME
        stage = f" during {exc.stage}" if isinstance(exc, StageFailed) else ""
        print(f"partkd {args.command}: error{stage}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
