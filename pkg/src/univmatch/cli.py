"""Command line entry point: ``univmatch synth|train|eval|export``.

Settings resolve as explicit flags > JSON config file (``--config``) >
built-in defaults, which for training are the full-scale schedule
(4000 warm-start / 150000 total iterations, batch 16, lr 0.008 decayed by
0.98 every 3000 iterations).

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import autodiff as ad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dataset import DatasetError, SyntheticConfig, generate_synthetic, load_dataset, save_dataset
from .evaluation import evaluate, predict
from .export import export_geometry, export_matchings
from .graphgen import GraphError
from .matching import MatchingError
from .network import NetworkConfig
from .training import (
    ForwardOptions,
    InstanceForward,
    LossWeights,
    Schedule,
    TrainConfig,
    TrainingDiverged,
    TrainState,
    prepare_instances,
    train,
)

log = logging.getLogger("univmatch")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUTPUT_ENV = "UNIVMATCH_OUTPUT_DIR"
ABLATIONS = ("no-deform", "no-warm-start")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


SYNTH_DEFAULTS = {
    "categories": 1,
    "points": 10,
    "instances": 200,
    "test_instances": 0,
    "amplitude": 0.1,
    "noise": 0.0,
    "occlusion": 0.0,
    "seed": 0,
}

_schedule = Schedule()
_weights = LossWeights.main_phase()
_net = NetworkConfig()
TRAIN_DEFAULTS = {
    "warm_start": _schedule.warm_start_iterations,
    "iterations": _schedule.total_iterations,
    "batch_size": _schedule.batch_size,
    "lr": _schedule.initial_lr,
    "decay_factor": _schedule.decay_factor,
    "decay_every": _schedule.decay_every,
    "w_match": _weights.match,
    "w_deform": _weights.deform,
    "w_off": _weights.off,
    "w_reg": _weights.reg,
    "w_rec_warm": 1.0,
    "latent": _net.latent,
    "rounds": _net.rounds,
    "seed": 0,
    "threads": 1,
    "log_every": 50,
    "checkpoint_every": 0,
    "ablate": [],
    "augment_occlusion": 0.0,
    "canonical_rotation": True,
    "optimizer": "adam",
}


def _default_out(sub: str) -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs")) / sub


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge flags over the optional config file over ``defaults``."""
    file_cfg: dict = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else file_cfg.get(key, default)
    return out


# --- synth --------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _resolve(args, SYNTH_DEFAULTS)
    if cfg["instances"] < 1:
        raise UsageError("--instances must be at least 1")
    try:
        synth = SyntheticConfig(**cfg)
        synth.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out) if args.out else _default_out("data")
    path = out / "dataset.jsonl" if out.suffix != ".jsonl" else out
    path.parent.mkdir(parents=True, exist_ok=True)
    result = generate_synthetic(synth)
    save_dataset(result.manifest, path)
    summary = {
        "path": str(path),
        "categories": [{"name": c.name, "d": c.d} for c in result.manifest.categories],
        "instances": len(result.manifest.instances),
        "train": len(result.manifest.split("train")),
        "test": len(result.manifest.split("test")),
    }
    print(json.dumps(summary))
    return EXIT_OK


# --- train --------------------------------------------------------------------


def _train_config(cfg: dict) -> tuple[TrainConfig, Schedule, LossWeights, LossWeights]:
    for name in cfg["ablate"]:
        if name not in ABLATIONS:
            raise UsageError(f"unknown ablation {name!r} (choose from {', '.join(ABLATIONS)})")
    warm = 0 if "no-warm-start" in cfg["ablate"] else cfg["warm_start"]
    if cfg["iterations"] == 0:
        warm = 0
    try:
        schedule = Schedule(
            warm_start_iterations=warm,
            total_iterations=cfg["iterations"],
            batch_size=cfg["batch_size"],
            initial_lr=cfg["lr"],
            decay_factor=cfg["decay_factor"],
            decay_every=cfg["decay_every"],
        )
        weights = LossWeights(
            match=cfg["w_match"], deform=cfg["w_deform"], off=cfg["w_off"], reg=cfg["w_reg"]
        )
        warm_weights = LossWeights(rec=cfg["w_rec_warm"])
        network = NetworkConfig(latent=cfg["latent"], rounds=cfg["rounds"])
        config = TrainConfig(
            network=network,
            deformation="no-deform" not in cfg["ablate"],
            optimizer=cfg["optimizer"],
            threads=cfg["threads"],
            log_every=cfg["log_every"],
            canonical_rotation=cfg["canonical_rotation"],
            augment_occlusion=cfg["augment_occlusion"],
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return config, schedule, weights, warm_weights


def cmd_train(args) -> int:
    cfg = _resolve(args, TRAIN_DEFAULTS)
    config, schedule, weights, warm_weights = _train_config(cfg)
    manifest = load_dataset(args.data)
    train_insts = manifest.split("train")
    if not train_insts:
        raise DatasetError("dataset has no training instances")
    out = Path(args.out) if args.out else _default_out("train")
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.ckpt"
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    data = prepare_instances(manifest, train_insts, canonical=config.canonical_rotation)
    state = None
    if args.resume:
        state = load_checkpoint(args.resume)
        if state.category_names != [c.name for c in manifest.categories]:
            raise DatasetError("dataset categories differ from the resumed checkpoint")
    metrics = (out / "metrics.jsonl").open("a" if args.resume else "w", encoding="utf-8")

    def on_log(record):
        line = json.dumps(record, sort_keys=True)
        metrics.write(line + "\n")
        metrics.flush()
        log.info(line)

    try:
        if schedule.total_iterations == 0 and state is None:
            state = TrainState.initialize(manifest.category_sizes(), config, cfg["seed"])
        else:
            state, _ = train(
                data,
                schedule,
                weights,
                seed=cfg["seed"],
                config=config,
                state=state,
                category_sizes=manifest.category_sizes(),
                warm_weights=warm_weights,
                on_log=on_log,
                checkpoint=lambda s: save_checkpoint(s, ckpt_path),
                checkpoint_every=cfg["checkpoint_every"],
            )
    except TrainingDiverged as exc:
        save_checkpoint(exc.state, out / "last_good.ckpt")
        print(f"error: training diverged at iteration {exc.iteration}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        metrics.close()
    save_checkpoint(state, ckpt_path)
    print(json.dumps({"checkpoint": str(ckpt_path), "iteration": state.iteration}))
    return EXIT_OK


# --- eval / export ------------------------------------------------------------


def _load_for_inference(args):
    state = load_checkpoint(args.checkpoint)
    manifest = load_dataset(args.data)
    index = {name: i for i, name in enumerate(state.category_names)}
    insts = manifest.instances if args.split == "all" else manifest.split(args.split)
    if not insts:
        raise DatasetError(f"dataset has no {args.split!r} instances")
    for inst in insts:
        if inst.category not in index:
            raise DatasetError(f"category {inst.category!r} is unknown to the checkpoint")
        d = state.model.categories[index[inst.category]]
        if manifest.category_sizes()[inst.category] != d:
            raise DatasetError(f"category {inst.category!r} has d != {d} in the checkpoint")
    prepared = prepare_instances(
        manifest, insts, canonical=state.config.canonical_rotation, category_index=index
    )
    return state, prepared


def cmd_eval(args) -> int:
    state, prepared = _load_for_inference(args)
    options = ForwardOptions.from_config(state.config)
    report = evaluate(state.model, prepared, options, state.category_names, seed=args.seed)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    return EXIT_OK


def cmd_export(args) -> int:
    state, prepared = _load_for_inference(args)
    options = ForwardOptions.from_config(state.config)
    out = Path(args.out) if args.out else _default_out("export")
    out.mkdir(parents=True, exist_ok=True)
    names = state.category_names
    if args.what == "geometry":
        universe = {names[c]: p.data for c, p in state.model.universe.items()}
        offsets = {
            inst.id: (names[inst.category], InstanceForward(state.model, inst, options).offsets.data)
            for inst in prepared
        }
        export_geometry(universe, offsets, out)
    else:
        records = [(inst.id, names[inst.category], predict(state.model, inst, options)) for inst in prepared]
        export_matchings(records, out / "matchings.json", pairwise=args.pairwise)
    print(json.dumps({"what": args.what, "out": str(out), "instances": len(prepared)}))
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="univmatch", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic keypoint dataset")
    s.add_argument("--config", help="JSON file with default values for the flags")
    s.add_argument("--categories", type=int)
    s.add_argument("--points", type=int, help="universe size d per category")
    s.add_argument("--instances", type=int, help="training instances per category")
    s.add_argument("--test-instances", dest="test_instances", type=int)
    s.add_argument("--amplitude", type=float, help="deformation amplitude (normalised units)")
    s.add_argument("--noise", type=float, help="keypoint noise sigma (normalised units)")
    s.add_argument("--occlusion", type=float, help="per-keypoint occlusion probability")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help=f"output directory or .jsonl path (default ${OUTPUT_ENV}/data)")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", help=f"run directory (default ${OUTPUT_ENV}/train)")
    t.add_argument("--config", help="JSON file with default values for the flags")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--warm-start", dest="warm_start", type=int)
    t.add_argument("--iterations", type=int, help="total iterations including the warm start")
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--decay-factor", dest="decay_factor", type=float)
    t.add_argument("--decay-every", dest="decay_every", type=int)
    for name in ("match", "deform", "off", "reg"):
        t.add_argument(f"--w-{name}", dest=f"w_{name}", type=float, help=f"weight of L_{name}")
    t.add_argument("--w-rec-warm", dest="w_rec_warm", type=float, help="warm-start L_rec weight")
    t.add_argument("--latent", type=int, help="graph network width")
    t.add_argument("--rounds", type=int, help="message passing rounds")
    t.add_argument("--seed", type=int)
    t.add_argument("--threads", type=int)
    t.add_argument("--log-every", dest="log_every", type=int)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--augment-occlusion", dest="augment_occlusion", type=float)
    t.add_argument(
        "--no-canonical-rotation",
        dest="canonical_rotation",
        action="store_const",
        const=False,
        help="feed keypoints without aligning them to their principal axes",
    )
    t.add_argument("--optimizer", choices=("adam", "sgd"))
    t.add_argument("--ablate", action="append", choices=ABLATIONS)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "report accuracy, cycle consistency and reconstruction errors"),
        ("export", cmd_export, "write geometry or matchings"),
    ):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--split", choices=("train", "test", "all"), default="test")
        e.add_argument("--seed", type=int, default=0, help="seed for triple sampling")
        e.add_argument("--out")
        if name == "export":
            e.add_argument("--what", required=True, choices=("geometry", "matchings"))
            e.add_argument("--pairwise", action="store_true", help="include composed pairwise matchings")
        e.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, GraphError, MatchingError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ad.NonFiniteError, ad.SingularMatrixError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
