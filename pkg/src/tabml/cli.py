"""Command-line entry point: ``tabml <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every command that
writes files also writes a ``manifest.json`` describing how they were made.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .base_model import Model, ModelConfig
from .bayes import GlobalPriorConfig
from .episodes import EpisodeSpec, SynthConfig, generate_synthetic, load_corpus, save_corpus, split_tasks
from .evaluation import METRIC_NAMES, ablate_z, aggregate, evaluate_tasks, sweep_clues, sweep_shots
from .trainer import TrainConfig, meta_train, write_log

log = logging.getLogger("tabml")


class UsageError(Exception):
    """Flags that are individually valid but do not make sense together."""


# -- flag plumbing ------------------------------------------------------------

_TRAIN_FLAGS = {
    "alpha": float, "beta": float, "k_min": int, "k_max": int, "outer_iters": int,
    "mc_train": int, "mc_eval": int,
}
_SPEC_FLAGS = {"shots": "shots_per_class", "clues": "clues_per_shot", "query": "query_per_class"}


def _add_train_flags(p):
    g = p.add_argument_group("training")
    for name, typ in _TRAIN_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), type=typ, default=None)
    g.add_argument("--a0", type=float, default=None)
    g.add_argument("--b0", type=float, default=None)
    g.add_argument("--dropout", type=float, default=None, help="dropout rate on encoder outputs")


def _add_spec_flags(p):
    g = p.add_argument_group("episodes")
    g.add_argument("--shots", type=int, default=None, help="support shots per class")
    g.add_argument("--clues", type=int, default=None, help="clues kept per shot (earliest first)")
    g.add_argument("--query", type=int, default=None, help="query shots per class")


def _add_common(p, corpus=False, ckpt=False, out=True):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="worker processes for evaluation")
    if corpus:
        p.add_argument("--corpus", type=Path, required=True)
    if ckpt:
        p.add_argument("--checkpoint", type=Path, required=True)
    if out:
        p.add_argument("--out", type=Path, required=True, help="output directory")


def _flag_values(fn):
    """Config constructors reject bad flag values with ValueError; report those as usage errors."""

    def wrapper(*a, **kw):
        try:
            return fn(*a, **kw)
        except (ValueError, TypeError) as exc:
            raise UsageError(str(exc)) from None

    return wrapper


@_flag_values
def _train_config(args, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig(seed=args.seed)
    changes = {k: getattr(args, k) for k in _TRAIN_FLAGS if getattr(args, k, None) is not None}
    prior = base.prior
    if getattr(args, "a0", None) is not None or getattr(args, "b0", None) is not None:
        prior = GlobalPriorConfig(
            args.a0 if args.a0 is not None else prior.a0, args.b0 if args.b0 is not None else prior.b0
        )
    return dataclasses.replace(base, prior=prior, **changes)


@_flag_values
def _episode_spec(args) -> EpisodeSpec:
    changes = {field: getattr(args, flag) for flag, field in _SPEC_FLAGS.items() if getattr(args, flag) is not None}
    return dataclasses.replace(EpisodeSpec(seed=args.seed), **changes)


@_flag_values
def _model(args) -> Model:
    cfg = ModelConfig()
    if args.dropout is not None:
        cfg = dataclasses.replace(cfg, dropout_rate=args.dropout)
    return Model.default(cfg)


def _write_manifest(out_dir: Path, command: str, config: dict, seed: int, inputs: dict, outputs: dict):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "format_version": checkpoint.FORMAT_VERSION,
        # excluded from the byte-determinism contract
        "volatile": {"created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_tasks(path: Path):
    if not path.is_file():
        raise FileNotFoundError(f"corpus {path} does not exist")
    return load_corpus(path)


def _check_episode_fit(tasks, spec: EpisodeSpec):
    need = spec.shots_per_class + spec.query_per_class
    for t in tasks:
        for label in (0, 1):
            have = t.label_indices(label).size
            if have < need:
                raise ValueError(
                    f"corpus too small for the episode spec: task {t.task_id} has {have} shots of label "
                    f"{label}, but {spec.shots_per_class} support + {spec.query_per_class} query are needed"
                )


def _points(text: str, cast=float):
    try:
        vals = [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--points must be a comma-separated list of numbers, got {text!r}") from None
    if not vals:
        raise UsageError("--points is empty")
    return vals


# -- commands -----------------------------------------------------------------


def cmd_gen(args):
    fields = {f.name for f in dataclasses.fields(SynthConfig)}
    cfg = _flag_values(SynthConfig)(**{k: getattr(args, k) for k in fields if getattr(args, k, None) is not None})
    out = args.output
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(generate_synthetic(cfg), out)
    _write_manifest(out.parent, "gen", cfg.to_dict(), cfg.seed, {}, {"corpus": out})
    log.info("wrote %d tasks to %s", cfg.tasks, out)


def cmd_meta_train(args):
    cfg, spec, model = _train_config(args), _episode_spec(args), _model(args)
    tasks = _load_tasks(args.corpus)
    train, _ = split_tasks(tasks, 0.8, args.seed)
    _check_episode_fit(train, spec)
    args.out.mkdir(parents=True, exist_ok=True)

    def progress(it, rows):
        ell = np.mean([r.expected_loglik for r in rows])
        log.info("pass %d/%d  E[log p] %.4f  query acc %.3f", it + 1, cfg.outer_iters, ell,
                 np.mean([r.query_acc for r in rows]))

    ckpt = meta_train(train, cfg, spec, model, progress)
    ckpt_path, log_path = args.out / "checkpoint.json", args.out / "train_log.csv"
    checkpoint.save(ckpt, ckpt_path)
    write_log(ckpt.log, log_path)
    config = {"train": cfg.to_dict(), "episode": dataclasses.asdict(spec), "model": model.cfg.to_dict()}
    _write_manifest(args.out, "meta-train", config, args.seed, {"corpus": args.corpus},
                    {"checkpoint": ckpt_path, "log": log_path})


def _held_out(ckpt, tasks):
    test = [t for t in tasks if t.task_id not in set(ckpt.train_tasks)]
    if not test:
        raise ValueError("every task in the corpus was used for meta-training; nothing to evaluate")
    return test


def cmd_meta_test(args):
    ckpt = checkpoint.load(args.checkpoint)
    cfg, spec = _train_config(args, ckpt.train_config), _episode_spec(args)
    test = _held_out(ckpt, _load_tasks(args.corpus))
    _check_episode_fit(test, spec)
    args.out.mkdir(parents=True, exist_ok=True)
    results = evaluate_tasks(ckpt, test, spec, cfg, init_z=args.init_z, jobs=args.jobs)
    path = args.out / "meta_test.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("task_id,z,K,metric,mean,std\n")
        for r in results:
            for k, m in enumerate(METRIC_NAMES):
                fh.write(f"{r.task_id},{r.z!r},{r.K},{m},{float(r.mean[k])!r},{float(r.std[k])!r}\n")
        agg = aggregate(results)
        for m in METRIC_NAMES:
            fh.write(f"ALL,,,{m},{agg.mean[m]!r},{agg.std[m]!r}\n")
    config = {"train": cfg.to_dict(), "episode": dataclasses.asdict(spec), "init_z": args.init_z}
    _write_manifest(args.out, "meta-test", config, args.seed,
                    {"checkpoint": args.checkpoint, "corpus": args.corpus}, {"report": path})
    print(f"accuracy {agg.mean['accuracy']:.4f} +- {agg.std['accuracy']:.4f} over {agg.n_tasks} tasks")


def cmd_sweep(args):
    spec = _episode_spec(args)
    tasks = _load_tasks(args.corpus)
    args.out.mkdir(parents=True, exist_ok=True)
    inputs = {"corpus": args.corpus}
    if args.axis == "clues":
        if args.checkpoint is None:
            raise UsageError("--axis clues needs --checkpoint")
        ckpt = checkpoint.load(args.checkpoint)
        cfg = _train_config(args, ckpt.train_config)
        points = _points(args.points, int)
        test = _held_out(ckpt, tasks)
        _check_episode_fit(test, spec)
        result = sweep_clues(ckpt, test, cfg, spec, points, jobs=args.jobs)
        inputs["checkpoint"] = args.checkpoint
    else:
        cfg, model = _train_config(args), _model(args)
        # shot points are percentages of each meta-train task
        result = sweep_shots(tasks, cfg, spec, model, [p / 100.0 for p in _points(args.points)], jobs=args.jobs)
    path = args.out / f"sweep_{args.axis}.csv"
    result.to_csv(path)
    config = {"train": cfg.to_dict(), "episode": dataclasses.asdict(spec), "axis": args.axis, "points": args.points}
    _write_manifest(args.out, "sweep", config, args.seed, inputs, {"report": path})


def cmd_ablate(args):
    cfg, spec, model = _train_config(args), _episode_spec(args), _model(args)
    tasks = _load_tasks(args.corpus)
    args.out.mkdir(parents=True, exist_ok=True)
    result = ablate_z(tasks, cfg, spec, model, jobs=args.jobs)
    path = args.out / "ablation.csv"
    result.to_csv(path, seed=args.seed)
    config = {"train": cfg.to_dict(), "episode": dataclasses.asdict(spec), "model": model.cfg.to_dict()}
    _write_manifest(args.out, "ablate", config, args.seed, {"corpus": args.corpus}, {"report": path})
    print(f"adaptive z accuracy {result.adaptive.accuracy:.4f}  z=1 accuracy {result.fixed.accuracy:.4f}")


def cmd_gradcheck(args):
    from . import gradcheck

    report = gradcheck.run(args.seed, args.configs)
    for name, err in report.max_rel_err.items():
        verdict = "<" if err < gradcheck.TOLERANCE else ">="
        print(f"{name}: max_rel_err {verdict} 1e-4 ({err:.3e})")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        _write_manifest(args.out, "gradcheck", {"configs": args.configs, "max_rel_err": report.max_rel_err},
                        args.seed, {}, {})
    return 0 if report.ok else 1


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabml", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="write a synthetic JSONL corpus")
    for f in dataclasses.fields(SynthConfig):
        if f.name == "source_credibility":
            continue
        typ = float if f.type == "float" else int
        p.add_argument("--" + f.name.replace("_", "-"), type=typ, default=None)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("meta-train", parents=[common], help="meta-train on the 80%% task split")
    _add_common(p, corpus=True)
    _add_train_flags(p)
    _add_spec_flags(p)
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("meta-test", parents=[common], help="adapt and evaluate on held-out tasks")
    _add_common(p, corpus=True, ckpt=True)
    _add_train_flags(p)
    _add_spec_flags(p)
    p.add_argument("--init-z", type=float, default=None,
                   help="override the initialisation blend (0 = random initialisation baseline)")
    p.set_defaults(func=cmd_meta_test)

    p = sub.add_parser("sweep", parents=[common], help="accuracy against shots or clues")
    _add_common(p, corpus=True)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--axis", choices=("shots", "clues"), required=True)
    p.add_argument("--points", required=True, help="comma-separated values (shots: percentages)")
    _add_train_flags(p)
    _add_spec_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", parents=[common], help="adaptive z against z fixed to 1")
    _add_common(p, corpus=True)
    _add_train_flags(p)
    _add_spec_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every objective")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--configs", type=int, default=10, help="random model configurations to check")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        status = args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return int(status or 0)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
