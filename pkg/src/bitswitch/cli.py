"""Command-line front end.

Subcommands compose through files only: ``train-mp`` writes the float seed
model and the jointly trained checkpoint, ``sensitivity`` turns a checkpoint
plus data into a profile JSON, ``train-mixed`` consumes the checkpoint and
profile, ``search`` turns a profile into width assignments, and ``eval``
scores checkpoints or assignment files.  Exit codes: 0 ok, 2 configuration
error, 3 numerical failure, 4 infeasible search target.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from fractions import Fraction

import numpy as np

from .checkpoint import describe, load, store
from .data import gaussian_blobs, load_idx_pair, train_eval_split, two_moons
from .errors import (CheckpointError, ConfigError, DimensionError,
                     InfeasibleError, NumericalError)
from .nn import mlp
from .quant import BitWidthSet
from .reports import MetricsRecorder, write_config, write_pareto
from .search import SearchProblem, SubNetAssignment, enumerate_solutions, pareto_front, solve
from .sensitivity import SensitivityProfile, profile_network
from .state import ModelState
from .supernet import SupernetConfig, SupernetTrainer, evaluate_assignment, make_edge_tables
from .trainer import (MultiPrecTrainer, TrainConfig, evaluate_float,
                      evaluate_uniform, init_quant_params, train_float)

CALIB_SAMPLES = 256


def _csv_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}")


def _add_dataset_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("dataset")
    g.add_argument("--dataset", choices=("blobs", "moons", "idx"), default="blobs")
    g.add_argument("--samples", type=int, default=2000)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--features", type=int, default=16)
    g.add_argument("--noise", type=float, default=0.1, help="moons jitter")
    g.add_argument("--eval-fraction", type=float, default=0.2)
    g.add_argument("--idx-images", help="IDX image file (dataset=idx)")
    g.add_argument("--idx-labels", help="IDX label file (dataset=idx)")


def _add_train_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--bits", default="8,6,4,2", help="candidate widths, widest first")
    g.add_argument("--hidden", default="32,32,32", help="hidden layer sizes")
    g.add_argument("--epochs", type=int, default=30)
    g.add_argument("--float-epochs", type=int, default=10)
    g.add_argument("--batch-size", type=int, default=64)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--weight-decay", type=float, default=5e-5)
    g.add_argument("--out", required=True, help="output directory")


def _load_dataset(args):
    if args.dataset == "blobs":
        x, y = gaussian_blobs(args.samples, args.classes, args.features,
                              seed=args.seed, spread=1.5)
    elif args.dataset == "moons":
        x, y = two_moons(args.samples, seed=args.seed, noise=args.noise)
    else:
        if not args.idx_images or not args.idx_labels:
            raise ConfigError("dataset=idx needs --idx-images and --idx-labels")
        x, y = load_idx_pair(args.idx_images, args.idx_labels)
        x = x.reshape(x.shape[0], -1)
    return train_eval_split(x, y, args.eval_fraction, seed=args.seed)


def _config_echo(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _pretrain(args, train_x, train_y):
    classes = int(train_y.max()) + 1
    dims = (train_x.shape[1], *_csv_ints(args.hidden), classes)
    net = mlp(dims, np.random.default_rng(np.random.SeedSequence([args.seed, 1])))
    norm = train_float(net, train_x, train_y, args.float_epochs, args.batch_size,
                       args.lr, args.weight_decay, seed=args.seed)
    return net, norm


def _float_seed_state(net, norm, bits: BitWidthSet, calib_x) -> ModelState:
    """Float model packaged for storage: full-precision (unshared) mode."""
    qparams = init_quant_params(net, bits, calib_x, norm, shared_weight_scale=False)
    per_bit = {b: {site: norm[site].copy() for site in norm} for b in bits}
    return ModelState(net=net, bits=bits, qparams=qparams, norm_per_bit=per_bit,
                      shared_weight_scale=False)


def _cmd_train_mp(args) -> int:
    bits = BitWidthSet(_csv_ints(args.bits))
    train_x, train_y, eval_x, eval_y = _load_dataset(args)
    net, norm = _pretrain(args, train_x, train_y)
    calib_x = train_x[:CALIB_SAMPLES]
    os.makedirs(args.out, exist_ok=True)
    store(_float_seed_state(net.copy(), norm, bits, calib_x),
          os.path.join(args.out, "float.ckpt"))
    print(f"float model accuracy {evaluate_float(net, norm, eval_x, eval_y):.4f}")

    cfg = TrainConfig(bits=bits, epochs=args.epochs, batch_size=args.batch_size,
                      base_lr=args.lr, weight_decay=args.weight_decay,
                      mode=args.mode, alrs_floor=args.alrs_floor,
                      shared_weight_scale=not args.unshared_scales)
    trainer = MultiPrecTrainer.initialize(
        net, cfg, calib_x, {site: s.copy() for site, s in norm.items()},
        seed=args.seed)
    recorder = MetricsRecorder()
    trainer.run(train_x, train_y, eval_x, eval_y, recorder)
    recorder.write(args.out, _config_echo(args))
    store(trainer.state, os.path.join(args.out, "model.ckpt"))
    for b in bits:
        print(f"{b}-bit accuracy {trainer.evaluate(b, eval_x, eval_y):.4f}")
    print(f"wrote {os.path.join(args.out, 'model.ckpt')}")
    return 0


def _cmd_sensitivity(args) -> int:
    state = load(args.ckpt)
    train_x, train_y, _, _ = _load_dataset(args)
    x = train_x[:CALIB_SAMPLES]
    y = train_y[:CALIB_SAMPLES]
    norm = state.norm_for_uniform(state.bits.highest)
    profile = profile_network(state.net, norm, x, y, probes=args.probes,
                              seed=args.seed)
    text = profile.to_json()
    with open(args.out, "w") as fh:
        fh.write(text + "\n")
    mean = profile.mean_trace
    for i, t in zip(profile.layer_indices, profile.traces):
        tag = "sensitive" if t >= mean else "insensitive"
        print(f"layer {i}: trace {t:.6g} ({tag})")
    print(f"wrote {args.out}")
    return 0


def _load_profile(path: str) -> SensitivityProfile:
    try:
        with open(path) as fh:
            return SensitivityProfile.from_json(fh.read())
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad profile {path}: {exc}")


def _cmd_train_mixed(args) -> int:
    train_x, train_y, eval_x, eval_y = _load_dataset(args)
    calib_x = train_x[:CALIB_SAMPLES]
    profile = _load_profile(args.profile) if args.profile else None
    if args.roulette == "hessian" and profile is None:
        raise ConfigError("--roulette hessian needs --profile")

    if args.init_ckpt:
        state = load(args.init_ckpt)
        net, bits, qparams = state.net, state.bits, state.qparams
        if state.mixed:
            edges = state.norm_edges
        else:
            edges = make_edge_tables(net, bits, state.norm_per_bit)
    else:
        bits = BitWidthSet(_csv_ints(args.bits))
        net, norm = _pretrain(args, train_x, train_y)
        qparams = init_quant_params(net, bits, calib_x, norm)
        per_bit = {b: {site: norm[site].copy() for site in norm} for b in bits}
        edges = make_edge_tables(net, bits, per_bit)

    cfg = SupernetConfig(bits=bits, epochs=args.epochs, batch_size=args.batch_size,
                         base_lr=args.lr, weight_decay=args.weight_decay,
                         sigma_max=args.sigma_max, roulette=args.roulette,
                         use_alrs=args.use_alrs, alrs_floor=args.alrs_floor)
    trainer = SupernetTrainer(net, cfg, qparams, edges, profile, seed=args.seed)
    recorder = MetricsRecorder()
    trainer.run(train_x, train_y, eval_x, eval_y, recorder)
    os.makedirs(args.out, exist_ok=True)
    recorder.write(args.out, _config_echo(args))
    store(trainer.state, os.path.join(args.out, "mixed.ckpt"))
    for b in bits:
        print(f"uniform {b}-bit accuracy {trainer.evaluate_uniform(b, eval_x, eval_y):.4f}")
    print(f"wrote {os.path.join(args.out, 'mixed.ckpt')}")
    return 0


def _cmd_search(args) -> int:
    profile = _load_profile(args.profile)
    weights = profile.traces
    problem = SearchProblem(
        candidates=_csv_ints(args.bits),
        layer_weights=weights,
        target_avg=Fraction(args.avg),
        sense="minimize" if args.minimize else "maximize",
    )
    assignments = enumerate_solutions(problem) if args.enumerate else [solve(problem)]
    payload = {
        "candidates": list(problem.candidates),
        "avg_bits": str(problem.target_avg),
        "sense": problem.sense,
        "layer_indices": list(profile.layer_indices),
        "assignments": [
            {"bits": list(a.bits), "objective": a.objective} for a in assignments
        ],
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for a in assignments:
        print(f"widths {list(a.bits)} objective {a.objective:.6g}")
    print(f"wrote {args.out}")
    return 0


def _read_assignments(path: str) -> tuple[list[int], list[SubNetAssignment]]:
    try:
        with open(path) as fh:
            payload = json.load(fh)
        indices = [int(i) for i in payload["layer_indices"]]
        out = []
        for row in payload["assignments"]:
            bits = tuple(int(b) for b in row["bits"])
            avg = Fraction(sum(bits), len(bits))
            out.append(SubNetAssignment(bits, float(row["objective"]), avg))
        return indices, out
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad assignment file {path}: {exc}")


def _cmd_eval(args) -> int:
    state = load(args.ckpt)
    _, _, eval_x, eval_y = _load_dataset(args)
    chosen = [opt for opt in (args.uniform_bits, args.per_layer, args.assignments)
              if opt is not None]
    if len(chosen) != 1:
        raise ConfigError("pick exactly one of --uniform-bits, --per-layer, --assignments")

    if args.uniform_bits is not None:
        acc = evaluate_uniform(state, args.uniform_bits, eval_x, eval_y)
        print(f"uniform {args.uniform_bits}-bit accuracy {acc:.4f}")
        return 0

    q_indices = state.net.quantized_indices
    if args.per_layer is not None:
        widths = _csv_ints(args.per_layer)
        if len(widths) != len(q_indices):
            raise ConfigError(
                f"--per-layer needs {len(q_indices)} widths, got {len(widths)}")
        acc = evaluate_assignment(state, dict(zip(q_indices, widths)), eval_x, eval_y)
        print(f"widths {list(widths)} accuracy {acc:.4f}")
        return 0

    indices, assignments = _read_assignments(args.assignments)
    if indices != q_indices:
        raise ConfigError(
            f"assignment file indexes layers {indices}, checkpoint has {q_indices}")
    scored = []
    for a in assignments:
        acc = evaluate_assignment(state, dict(zip(q_indices, a.bits)), eval_x, eval_y)
        scored.append(a.with_accuracy(acc))
        print(f"widths {list(a.bits)} accuracy {acc:.4f}")
    front = pareto_front(scored)
    print("pareto front: " + "; ".join(
        f"{float(a.avg_bits):.3g}b -> {a.accuracy:.4f}" for a in front))
    if args.pareto_out:
        write_pareto(args.pareto_out, scored)
        print(f"wrote {args.pareto_out}")
    return 0


def _cmd_inspect(args) -> int:
    print(describe(args.ckpt))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bitswitch",
        description="multi-precision and mixed-precision quantization workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-mp", help="jointly train one model at several widths")
    _add_dataset_args(p)
    _add_train_args(p)
    p.add_argument("--mode", choices=("conventional", "alrs"), default="alrs")
    p.add_argument("--alrs-floor", type=float, default=0.0)
    p.add_argument("--unshared-scales", action="store_true",
                   help="store float32 weights with per-width scales")
    p.set_defaults(func=_cmd_train_mp)

    p = sub.add_parser("sensitivity", help="per-layer Hessian-trace profile")
    _add_dataset_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=64)
    p.add_argument("--out", required=True, help="profile JSON path")
    p.set_defaults(func=_cmd_sensitivity)

    p = sub.add_parser("train-mixed", help="train a per-layer-width supernet")
    _add_dataset_args(p)
    _add_train_args(p)
    p.add_argument("--init-ckpt", help="start from this checkpoint's weights")
    p.add_argument("--profile", help="sensitivity profile JSON")
    p.add_argument("--roulette", choices=("hessian", "uniform"), default="hessian")
    p.add_argument("--sigma-max", type=float, default=0.5)
    p.add_argument("--use-alrs", action="store_true")
    p.add_argument("--alrs-floor", type=float, default=0.0)
    p.set_defaults(func=_cmd_train_mixed)

    p = sub.add_parser("search", help="optimal width assignments at a target average")
    p.add_argument("--profile", required=True)
    p.add_argument("--bits", default="8,6,4,2")
    p.add_argument("--avg", required=True, help="target average width, e.g. 4 or 7/2")
    p.add_argument("--minimize", action="store_true")
    p.add_argument("--enumerate", action="store_true", default=True)
    p.add_argument("--no-enumerate", dest="enumerate", action="store_false")
    p.add_argument("--out", required=True, help="assignment JSON path")
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("eval", help="score a checkpoint on held-out data")
    _add_dataset_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--uniform-bits", type=int)
    p.add_argument("--per-layer", help="comma-separated width per quantized layer")
    p.add_argument("--assignments", help="JSON written by the search subcommand")
    p.add_argument("--pareto-out", help="CSV path for the scored assignments")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("inspect-ckpt", help="describe a checkpoint file")
    p.add_argument("ckpt")
    p.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DimensionError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        if exc.achievable:
            opts = ", ".join(str(a) for a in exc.achievable)
            print(f"achievable averages: {opts}", file=sys.stderr)
        return 4


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
