"""Command-line front end.

Exit codes: 0 success, 1 usage, 2 configuration / input files,
3 numeric failure, 4 evaluation finished with failed runs.

Experiment files are INI: an ``[experiment]`` section (task, train, test,
out, seeds, noise_scale), ``[flow1]`` / ``[flow2]`` sections with
:class:`~se3flow.training.TrainConfig` fields, and a ``[solver]`` section
(kind, steps, rtol, atol, max_steps). Command-line flags override file
values; the merged configuration is written next to the outputs.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .errors import ConfigError, CutLocusError, FormatError, InvalidArgument, NumericFailure
from .integrator import SOLVER_KINDS, SolverSpec
from .model import load_checkpoint, save_checkpoint
from .tasks import DEFAULT_COUNT, TASKS, load_dataset, make_dataset, save_dataset
from .training import (
    DemoPairs,
    TrainConfig,
    load_reflow_pairs,
    save_reflow_pairs,
    synthesize_reflow_pairs,
    train_flow1,
    train_flow2,
    write_loss_csv,
)

log = logging.getLogger("se3flow")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 1, 2, 3, 4
OUTPUT_ROOT_ENV = "SE3FLOW_OUTPUT_ROOT"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    """``"1,2,10"`` or a range ``"3407..3416"`` (inclusive)."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer list: {text!r}")


def _default_out(name: str) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / name


# -- config ------------------------------------------------------------------------------

_TRAIN_FIELDS = {
    "learning_rate": float, "batch_size": int, "epochs": int, "rectified_step_budget": int,
    "mix_ratio": float, "seed": int, "lr_schedule": str, "noise_scale": float,
    "grad_clip": float, "reflow_endpoint": str, "synthesis_solver": str, "convention": str,
}


def _read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file {path} does not exist")
        cp.read(path)
    return cp


def _train_config(cp: configparser.ConfigParser, stage: int, flags: dict) -> TrainConfig:
    section = f"flow{stage}"
    values: dict = {}
    if cp.has_section(section):
        for key, raw in cp.items(section):
            if key == "hidden":
                values["hidden"] = tuple(int(v) for v in raw.split(","))
            elif key in _TRAIN_FIELDS:
                values[key] = None if raw.strip().lower() == "none" else _TRAIN_FIELDS[key](raw)
            else:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
    values.update({k: v for k, v in flags.items() if v is not None})
    try:
        return TrainConfig.flow1(**values) if stage == 1 else TrainConfig.flow2(**values)
    except (TypeError, InvalidArgument) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def _solver(cp: configparser.ConfigParser, kind: str | None) -> SolverSpec:
    s = cp["solver"] if cp.has_section("solver") else {}
    try:
        return SolverSpec(
            kind=kind or s.get("kind", "rk4"),
            steps=int(s.get("steps", 100)),
            rtol=float(s.get("rtol", 1e-6)),
            atol=float(s.get("atol", 1e-8)),
            max_steps=int(s.get("max_steps", 10000)),
        )
    except InvalidArgument as exc:
        raise ConfigError(f"[solver]: {exc}") from exc


def _experiment(cp, key, flag=None, default=None):
    if flag is not None:
        return flag
    if cp.has_section("experiment") and cp.has_option("experiment", key):
        return cp.get("experiment", key)
    return default


def _write_effective(cp: configparser.ConfigParser, sections: dict, path: Path) -> None:
    out = configparser.ConfigParser()
    for name in cp.sections():
        out[name] = dict(cp.items(name))
    for name, values in sections.items():
        out[name] = {k: ",".join(map(str, v)) if isinstance(v, (list, tuple)) else str(v)
                     for k, v in values.items()}
    with open(path, "w") as fh:
        out.write(fh)


def _load_dataset(path, what: str):
    if path is None:
        raise ConfigError(f"no {what} dataset given")
    if not Path(path).exists():
        raise ConfigError(f"{what} dataset {path} does not exist")
    return load_dataset(path)


# -- commands ----------------------------------------------------------------------------

def cmd_generate(args) -> int:
    out = Path(args.out or _default_out("data"))
    out.mkdir(parents=True, exist_ok=True)
    n = args.n or DEFAULT_COUNT[args.task]
    n_test = args.n_test if args.n_test is not None else max(1, n // 5)
    for split, count in (("train", n), ("test", n_test)):
        ds = make_dataset(args.task, count, args.seed, split)
        path = out / f"{args.task}_{split}.bin"
        save_dataset(ds, path)
        print(f"{path}: {len(ds)} demonstrations, clouds {ds[0].cloud.shape}, "
              f"trajectories {ds[0].trajectory.shape}")
    return EXIT_OK


def cmd_train(args) -> int:
    cp = _read_config(args.config)
    flags = {"epochs": args.epochs, "learning_rate": args.lr, "batch_size": args.batch_size,
             "seed": args.seed, "mix_ratio": args.mix_ratio}
    if args.hidden:
        flags["hidden"] = tuple(args.hidden)
    cfg = _train_config(cp, args.stage, flags)
    train = _load_dataset(_experiment(cp, "train", args.dataset), "training")
    out = Path(_experiment(cp, "out", args.out, str(_default_out("runs"))))
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    if args.stage == 1:
        model, reports = train_flow1(train, cfg, rng)
    else:
        flow1_path = args.flow1 or _experiment(cp, "flow1_checkpoint")
        if not flow1_path or not Path(flow1_path).exists():
            raise ConfigError("stage 2 needs an existing stage-1 checkpoint (--flow1)")
        model1 = load_checkpoint(flow1_path)
        _check_compat(model1, train.task)
        if model1.stage != 1:
            raise ConfigError(f"{flow1_path} is a stage-{model1.stage} checkpoint")
        reflow = load_reflow_pairs(args.reflow, train) if args.reflow else None
        model, reports = train_flow2(model1, train, cfg, rng, reflow)
    model.train_config["task"] = train.task
    ckpt = out / f"flow{args.stage}.ckpt"
    save_checkpoint(model, ckpt)
    write_loss_csv(reports, out / f"flow{args.stage}_loss.csv")
    echo = cfg.to_dict()
    (out / f"flow{args.stage}_config.txt").write_text(
        "".join(f"{k} = {v}\n" for k, v in sorted(echo.items())))
    _write_effective(cp, {f"flow{args.stage}": echo}, out / f"flow{args.stage}_effective.ini")
    final = reports[-1].mean_loss if reports else float("nan")
    print(f"{ckpt}: stage {args.stage}, {model.n_params} parameters, "
          f"{len(reports)} epochs, final loss {final:.6g}")
    return EXIT_OK


def _check_compat(model, task: str) -> None:
    ck_task = model.train_config.get("task")
    if ck_task is not None and ck_task != task:
        raise ConfigError(f"checkpoint was trained on {ck_task!r}, dataset is {task!r}")


def cmd_synthesize(args) -> int:
    model1 = load_checkpoint(args.checkpoint)
    train = _load_dataset(args.dataset, "training")
    _check_compat(model1, train.task)
    if model1.stage != 1:
        raise ConfigError("reflow pairs must be synthesized from a stage-1 checkpoint")
    spec = SolverSpec(args.solver, args.steps)
    pairs = synthesize_reflow_pairs(model1, DemoPairs(train), args.n,
                                    np.random.default_rng(args.seed), spec, args.noise_scale)
    save_reflow_pairs(pairs, args.out)
    print(f"{args.out}: {len(pairs)} pairs ({pairs.rejected} rejected, {pairs.failed} failed)")
    return EXIT_OK


def _evaluate(args, steps_list) -> tuple[list, list]:
    cp = _read_config(getattr(args, "config", None))
    test = _load_dataset(_experiment(cp, "test", args.dataset), "test")
    base = _solver(cp, args.solver)
    all_runs = []
    for path in args.checkpoint:
        model = load_checkpoint(path)
        _check_compat(model, test.task)
        model_id = Path(path).stem if len(args.checkpoint) > 1 or args.model_id is None \
            else args.model_id
        for steps in steps_list:
            spec = SolverSpec(base.kind, steps, base.rtol, base.atol, base.max_steps)
            all_runs.extend(ev.run_eval(model, test, spec, args.seeds, model_id,
                                        args.noise_scale, args.mode))
    return all_runs, ev.aggregate(all_runs)


def cmd_eval(args) -> int:
    runs, reports = _evaluate(args, args.steps)
    out = Path(args.out or _default_out("eval"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "per_action.csv").write_text(ev.per_action_csv(runs))
    (out / "aggregate.csv").write_text(ev.aggregate_csv(reports))
    print(ev.side_by_side(reports), end="")
    failed = sum(r.failed for r in runs)
    if failed:
        print(f"{failed} of {len(runs)} runs failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_ablate(args) -> int:
    runs, reports = _evaluate(args, args.steps)
    out = Path(args.out or _default_out("ablation"))
    out.mkdir(parents=True, exist_ok=True)
    if args.external:
        ext = ev.aggregate(ev.import_external_results(args.external))
        reports = reports + ext
    (out / "ablation.csv").write_text(ev.aggregate_csv(reports))
    (out / "per_action.csv").write_text(ev.per_action_csv(runs))
    table = ev.side_by_side(reports)
    (out / "table.txt").write_text(table)
    print(table, end="")
    return EXIT_PARTIAL if any(r.failed for r in runs) else EXIT_OK


def _read_aggregate_csv(path) -> list:
    import csv
    reports = []
    with open(path) as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if lineno == 1:
                if tuple(row) != ev.AGGREGATE_COLUMNS:
                    raise FormatError("not an aggregate report", line=1)
                continue
            if len(row) != len(ev.AGGREGATE_COLUMNS):
                raise FormatError("wrong column count", line=lineno)
            task, model, steps, mean, std, n = row
            reports.append(ev.AggregateReport(task, model, int(steps), float(mean),
                                              float(std), int(n)))
    return reports


def cmd_import_external(args) -> int:
    runs = ev.import_external_results(args.csv)
    reports = ev.aggregate(runs) if runs else []
    for path in args.aggregate or []:
        reports.extend(_read_aggregate_csv(path))
    table = ev.side_by_side(reports) if reports else ""
    if args.out:
        Path(args.out).write_text(table)
    print(table, end="")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="se3flow", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write train and test datasets")
    g.add_argument("--task", choices=TASKS, required=True)
    g.add_argument("--n", type=int, help="training demonstrations (task default if omitted)")
    g.add_argument("--n-test", type=int)
    g.add_argument("--seed", type=int, default=ev.BASE_SEED)
    g.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/data)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train stage 1 or stage 2")
    t.add_argument("--config")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--dataset", help="training dataset (overrides [experiment] train)")
    t.add_argument("--flow1", help="stage-1 checkpoint (stage 2 only)")
    t.add_argument("--reflow", help="pre-synthesized reflow pairs (.npz, stage 2 only)")
    t.add_argument("--out")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--mix-ratio", type=float)
    t.add_argument("--hidden", type=_int_list)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synthesize-reflow", help="integrate stage 1 to build reflow pairs")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=ev.BASE_SEED)
    s.add_argument("--solver", choices=SOLVER_KINDS, default="rk4")
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--noise-scale", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize)

    for name, func, helptext in (("eval", cmd_eval, "evaluate checkpoints on a test set"),
                                 ("ablate", cmd_ablate, "step-budget ablation table")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", nargs="+", required=True)
        e.add_argument("--dataset", help="test dataset")
        e.add_argument("--config")
        e.add_argument("--steps", type=_int_list, default=list(ev.DEFAULT_STEPS))
        e.add_argument("--seeds", type=_int_list, default=list(ev.DEFAULT_SEEDS))
        e.add_argument("--solver", choices=SOLVER_KINDS)
        e.add_argument("--mode", choices=("chained", "joint"), default="chained")
        e.add_argument("--noise-scale", type=float, default=0.5)
        e.add_argument("--model-id")
        e.add_argument("--out")
        if name == "ablate":
            e.add_argument("--external", help="external results CSV to include")
        e.set_defaults(func=func)

    i = sub.add_parser("import-external", help="render external results next to ours")
    i.add_argument("--csv", required=True)
    i.add_argument("--aggregate", nargs="*", help="aggregate.csv files from eval/ablate")
    i.add_argument("--out")
    i.set_defaults(func=cmd_import_external)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericFailure, CutLocusError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, InvalidArgument, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
