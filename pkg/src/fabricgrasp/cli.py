"""Command-line front end: generation, training, rollout, evaluation.

Every verb is a pure function of (artifacts, seed, config), so reruns with
equal inputs rewrite byte-identical outputs. Humans consume the emitted
JSON/CSV; there is no interactive mode.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .config import build, load_config, section
from .core import (
    ConfigError,
    DataGenError,
    DatasetLookupError,
    EncodingMode,
    FabricGraspError,
    FormatError,
    InvalidArgumentError,
    NoGraspError,
    NoIKError,
    ObjectEncoding,
    TrainingAbortError,
    TrajectoryRejectedError,
    stream,
)
from .datagen import (
    SHAPE_IDS,
    build_dataset,
    build_grasp_table,
    load_dataset,
    make_grid,
    save_dataset,
)
from .encoder import (
    AutoencoderTrainConfig,
    EncoderConfig,
    encode,
    load_encoder,
    load_point_corpus,
    save_encoder,
    save_point_corpus,
    train_autoencoder,
)
from .env import SceneObject, Shape, boundary_points
from .expert import TrainConfig, train
from .pipeline import (
    GRASP,
    LIFT,
    EpisodeConfig,
    EvalConfig,
    PolicySpec,
    evaluate,
    pos_encode,
    run_episode,
    write_episode_csv,
    write_report_json,
)
from .policy import load_policy, save_policy

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4

ENCODE_POINTS = 32
DEFAULT_SHAPES = ("circle:0.05", "box:0.09,0.05")
DEFAULT_THETAS = (0.4,)

_DATA_ERRORS = (DataGenError, FormatError, DatasetLookupError,
                TrajectoryRejectedError, NoGraspError, NoIKError)


def parse_shape(token: str):
    """'circle:0.05' or 'box:0.09,0.05' -> (Shape, size tuple)."""
    try:
        name, _, rest = token.partition(":")
        shape = Shape(name)
        size = tuple(float(v) for v in rest.split(",") if v)
    except ValueError:
        raise ConfigError(f"bad shape spec {token!r}") from None
    if not size:
        raise ConfigError(f"shape spec {token!r} is missing sizes")
    return shape, size


def _shapes(args) -> list:
    return [parse_shape(tok) for tok in args.shapes]


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pcd_encode_fn(encoder_path, n_points=ENCODE_POINTS):
    enc, _ = load_encoder(encoder_path)
    return lambda obj: encode(enc, boundary_points(obj, n_points)).data


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_gen_objects(args, cfg):
    sec = section(cfg, "objects")
    shapes = _shapes(args)
    sets = args.sets if args.sets is not None else sec.get("sets", 2000)
    pts = args.points if args.points is not None else sec.get("points", 32)
    x_range = tuple(sec.get("x_range", (0.35, 0.75)))
    y_range = tuple(sec.get("y_range", (-0.25, 0.25)))
    entries = []
    for i in range(sets):
        rng = stream(args.seed, "objects", i)
        shape, size = shapes[i % len(shapes)]
        pose = (float(rng.uniform(*x_range)), float(rng.uniform(*y_range)),
                float(rng.uniform(-np.pi, np.pi)))
        obj = SceneObject(shape, size, pose)
        entries.append((boundary_points(obj, pts), SHAPE_IDS[shape], pose))
    path = _out_dir(args) / "objects.ngfp"
    save_point_corpus(path, entries)
    print(f"wrote {path} ({len(entries)} point sets, {pts} points each)")
    return EXIT_OK


def cmd_gen_data(args, cfg):
    sec = section(cfg, "data")
    shapes = _shapes(args)
    nx = args.nx if args.nx is not None else sec.get("nx", 5)
    ny = args.ny if args.ny is not None else sec.get("ny", 5)
    thetas = (args.thetas if args.thetas
              else sec.get("thetas", list(DEFAULT_THETAS)))
    samples = (args.samples if args.samples is not None
               else sec.get("samples", 32))
    grid_kw = {}
    if "x_range" in sec:
        grid_kw["x_range"] = tuple(sec["x_range"])
    if "y_range" in sec:
        grid_kw["y_range"] = tuple(sec["y_range"])
    grid = make_grid(nx, ny, thetas, **grid_kw)

    if args.encoding == "pcd":
        if not args.encoder:
            raise ConfigError("--encoding pcd requires --encoder")
        fn = _pcd_encode_fn(args.encoder)
        encode_fn = lambda obj: ObjectEncoding(EncodingMode.PCD, fn(obj))
    else:
        encode_fn = None  # position encoding is the table default

    table = build_grasp_table(shapes, grid, encode_fn=encode_fn)
    ds = build_dataset(table, samples, seed=args.seed)
    path = _out_dir(args) / f"dataset-{args.encoding}.ngfd"
    save_dataset(ds, path)
    print(f"wrote {path}: {len(ds)} trajectories "
          f"({ds.requested} requested, {ds.rejected} rejected) "
          f"over {len(table)} grasp entries")
    return EXIT_OK


def cmd_train_encoder(args, cfg):
    corpus_path = args.corpus or str(Path(args.out) / "objects.ngfp")
    corpus = load_point_corpus(corpus_path)
    sets = [points for points, _, _ in corpus]
    enc_cfg = build(EncoderConfig, section(cfg, "encoder"))
    train_cfg = build(AutoencoderTrainConfig, section(cfg, "encoder-train"),
                      seed=args.seed, epochs=args.epochs)
    enc, dec, report = train_autoencoder(sets, train_cfg, enc_cfg=enc_cfg)
    out = _out_dir(args)
    save_encoder(enc, dec, out / "encoder.json")
    _write_json(out / "encoder-report.json", report)
    print(f"wrote {out / 'encoder.json'} "
          f"(val chamfer {report['best_val_chamfer']:.6f})")
    return EXIT_OK


def cmd_train_policy(args, cfg):
    data_path = args.data or str(
        Path(args.out) / f"dataset-{args.encoding}.ngfd")
    ds = load_dataset(data_path)
    train_cfg = build(TrainConfig, section(cfg, "train"), seed=args.seed,
                      rounds=args.rounds)
    policy, report = train(args.arch, args.encoding, ds, train_cfg)
    out = _out_dir(args)
    stem = f"policy-{args.arch}-{args.encoding}"
    save_policy(policy, out / f"{stem}.json", encoding_mode=args.encoding)
    _write_json(out / f"{stem}-train.json", report)
    print(f"wrote {out / (stem + '.json')} "
          f"(best val loss {report['best_val_loss']:.6f} "
          f"at round {report['best_round']})")
    return EXIT_OK


def _episode_config(args, cfg) -> EpisodeConfig:
    return build(EpisodeConfig, section(cfg, "episode"),
                 use_ik_start=True if args.ik_start else None)


def cmd_rollout(args, cfg):
    policy, mode = load_policy(args.policy)
    ds = load_dataset(args.data)
    shape, size = parse_shape(args.shape)
    obj = SceneObject(shape, size, tuple(args.pose))
    if mode == "pcd" and not args.encoder:
        raise ConfigError("pcd policy rollout requires --encoder")
    encode_fn = (_pcd_encode_fn(args.encoder) if mode == "pcd"
                 else pos_encode)
    record = {}
    out = run_episode(obj, policy, ds, _episode_config(args, cfg),
                      stream(args.seed, "rollout", 0), encode_fn=encode_fn,
                      record=record)
    if args.csv:
        d = ds.d
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phase", "t"] + [f"q{i}" for i in range(d)]
                       + [f"qdot{i}" for i in range(d)])
            for phase in (GRASP, LIFT):
                traj = record.get(phase)
                if traj is None:
                    continue
                for i in range(len(traj)):
                    w.writerow([phase, f"{traj.t[i]:.9f}"]
                               + [f"{v:.12g}" for v in traj.q[i]]
                               + [f"{v:.12g}" for v in traj.qdot[i]])
        print(f"wrote {args.csv}")
    print(json.dumps({"phase": out.phase, "success": out.success,
                      "steps": out.steps, "diagnostics": out.diagnostics},
                     sort_keys=True))
    return EXIT_OK


def cmd_eval(args, cfg):
    ds_by_mode = {}
    if args.data_pos:
        ds_by_mode["pos"] = load_dataset(args.data_pos)
    if args.data_pcd:
        ds_by_mode["pcd"] = load_dataset(args.data_pcd)
    pcd_encode = None
    specs = []
    for path in args.policy:
        policy, mode = load_policy(path)
        if mode not in ds_by_mode:
            raise ConfigError(
                f"policy {path} needs a --data-{mode} dataset")
        if mode == "pcd":
            if not args.encoder:
                raise ConfigError(f"pcd policy {path} requires --encoder")
            if pcd_encode is None:
                pcd_encode = _pcd_encode_fn(args.encoder)
            encode_fn = pcd_encode
        else:
            encode_fn = pos_encode
        specs.append(PolicySpec(Path(path).stem, policy, ds_by_mode[mode],
                                encode_fn))
    if not specs:
        raise ConfigError("eval needs at least one --policy")

    eval_cfg = build(EvalConfig, section(cfg, "eval"), trials=args.trials,
                     threads=args.threads,
                     episode=_episode_config(args, cfg))
    report, episodes = evaluate(specs, _shapes(args), seed=args.seed,
                                cfg=eval_cfg)
    out = _out_dir(args)
    report_path = Path(args.report) if args.report else out / "eval.json"
    write_report_json(report, report_path)
    csv_path = Path(args.csv) if args.csv else out / "episodes.csv"
    write_episode_csv(episodes, csv_path)
    for name, per_shape in report["policies"].items():
        for shape, cell in per_shape.items():
            rate = "n/a" if cell["rate"] is None else f"{cell['rate']:.2f}"
            print(f"{name} {shape}: {cell['success']}/{cell['trials']} "
                  f"({rate})")
    print(f"wrote {report_path} and {csv_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", default=None,
                        help="JSON config file with per-verb sections")
    shared.add_argument("--seed", type=int, default=0)
    shared.add_argument("--out", default="out",
                        help="artifact directory (default: out)")
    shared.add_argument("--threads", type=int, default=None)

    p = argparse.ArgumentParser(
        prog="fabricgrasp",
        description="Fabric grasping policies on a planar arm: data "
                    "generation, imitation training, and evaluation.")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen-objects", parents=[shared],
                       help="sample a boundary point-set corpus")
    g.add_argument("--sets", type=int, default=None)
    g.add_argument("--points", type=int, default=None)
    g.add_argument("--shapes", nargs="+", default=list(DEFAULT_SHAPES))
    g.set_defaults(func=cmd_gen_objects)

    g = sub.add_parser("gen-data", parents=[shared],
                       help="generate the reverse-trajectory dataset")
    g.add_argument("--encoding", choices=("pos", "pcd"), default="pos")
    g.add_argument("--encoder", default=None,
                   help="encoder manifest (required for --encoding pcd)")
    g.add_argument("--nx", type=int, default=None)
    g.add_argument("--ny", type=int, default=None)
    g.add_argument("--thetas", type=float, nargs="+", default=None)
    g.add_argument("--samples", type=int, default=None,
                   help="trajectories per grasp entry")
    g.add_argument("--shapes", nargs="+", default=list(DEFAULT_SHAPES))
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("train-encoder", parents=[shared],
                       help="train the point-set autoencoder")
    g.add_argument("--corpus", default=None)
    g.add_argument("--epochs", type=int, default=None)
    g.set_defaults(func=cmd_train_encoder)

    g = sub.add_parser("train-policy", parents=[shared],
                       help="DAgger-train a grasping policy")
    g.add_argument("--arch", choices=("ngf", "mlp"), required=True)
    g.add_argument("--encoding", choices=("pos", "pcd"), required=True)
    g.add_argument("--data", default=None,
                   help="dataset path (default: <out>/dataset-<encoding>.ngfd)")
    g.add_argument("--rounds", type=int, default=None)
    g.set_defaults(func=cmd_train_policy)

    g = sub.add_parser("rollout", parents=[shared],
                       help="run one episode and dump its trajectory")
    g.add_argument("--policy", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--encoder", default=None)
    g.add_argument("--shape", default="circle:0.05")
    g.add_argument("--pose", type=float, nargs=3, required=True,
                   metavar=("X", "Y", "THETA"))
    g.add_argument("--csv", default=None)
    g.add_argument("--ik-start", action="store_true")
    g.set_defaults(func=cmd_rollout)

    g = sub.add_parser("eval", parents=[shared],
                       help="run the evaluation protocol")
    g.add_argument("--policy", action="append", default=[],
                   help="policy manifest; repeatable")
    g.add_argument("--data-pos", default=None)
    g.add_argument("--data-pcd", default=None)
    g.add_argument("--encoder", default=None)
    g.add_argument("--trials", type=int, default=None)
    g.add_argument("--report", default=None)
    g.add_argument("--csv", default=None)
    g.add_argument("--shapes", nargs="+", default=list(DEFAULT_SHAPES))
    g.add_argument("--ik-start", action="store_true")
    g.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAbortError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        if exc.snapshot:
            print(json.dumps(exc.snapshot, sort_keys=True, default=str),
                  file=sys.stderr)
        return EXIT_TRAINING
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvalidArgumentError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FabricGraspError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
