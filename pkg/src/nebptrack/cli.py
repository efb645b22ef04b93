"""Command-line interface.

Subcommands cover the full workflow: simulate scenarios, run a tracker
over a dataset, train the refinement networks, calibrate the rejection
head, and evaluate estimates against ground truth. Every run writes a
manifest with configuration hashes and seeds so outputs can be reproduced
exactly; identical inputs and seeds produce byte-identical estimate files.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
Errors are reported as a single JSON object on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor

from . import __version__
from .bp import format_estimates_csv, parse_estimates_csv
from .metrics import evaluate_tracking
from .model import ModelParams
from .nebp import METHOD_VARIANTS, NebpConfig, init_nets, load_nets, save_nets
from .simulate import Dataset, ScenarioConfig, clutter_mismatch_scenario, make_dataset
from .train import (
    CalibrationResult,
    TrainConfig,
    TrainingDiverged,
    calibrate,
    track_frames,
    train,
)

METHODS = ("bp",) + tuple(METHOD_VARIANTS)


class ConfigError(Exception):
    pass


def _atomic_write(path: str, text: str, binary: bool = False) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb" if binary else "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_text(path: str) -> str:
    if not os.path.exists(path):
        raise ConfigError(f"file not found: {path}")
    with open(path, "r") as fh:
        return fh.read()


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _write_manifest(out_dir: str, command: str, entries: dict) -> None:
    manifest = {"command": command, "package_version": __version__, **entries}
    _atomic_write(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=2))


def _load_params(path: str | None) -> ModelParams:
    if path is None:
        return ModelParams()
    try:
        return ModelParams.from_json(_read_text(path))
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid model parameters in {path}: {exc}") from exc


def _load_dataset(path: str) -> Dataset:
    if os.path.isdir(path):
        path = os.path.join(path, "dataset.json")
    try:
        return Dataset.from_json(_read_text(path))
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid dataset in {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


def _cmd_simulate(args) -> int:
    if (args.config is None) == (args.preset is None):
        raise ConfigError("exactly one of --config or --preset is required")
    if args.config:
        cfg_text = _read_text(args.config)
        try:
            cfg = ScenarioConfig.from_json(cfg_text)
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"invalid scenario config: {exc}") from exc
        if args.seed is not None:
            cfg = ScenarioConfig.from_json(
                json.dumps({**json.loads(cfg_text), "seed": args.seed})
            )
    else:
        if args.preset != "clutter-mismatch":
            raise ConfigError(f"unknown preset {args.preset!r}")
        cfg = clutter_mismatch_scenario(args.seed if args.seed is not None else 0)
    data = make_dataset(cfg)
    os.makedirs(args.out, exist_ok=True)
    _atomic_write(os.path.join(args.out, "dataset.json"), data.to_json())
    _atomic_write(os.path.join(args.out, "ground_truth.csv"), data.gt_csv())
    _atomic_write(os.path.join(args.out, "measurements.csv"), data.measurements_csv())
    _write_manifest(
        args.out,
        "simulate",
        {"seed": cfg.seed, "config_hash": _sha256(cfg.to_json())},
    )
    print(f"wrote dataset with {cfg.n_frames} frames to {args.out}")
    return 0


def _track_one(dataset_path, method, params, nets, temperature, offset, seed):
    data = _load_dataset(dataset_path)
    estimates = track_frames(
        data.frames, params, method=method, nets=nets,
        temperature=temperature, offset=offset, seed=seed,
    )
    return dataset_path, format_estimates_csv(estimates)


def _cmd_track(args) -> int:
    if args.method not in METHODS:
        raise ConfigError(f"unknown method {args.method!r}; choose from {METHODS}")
    params = _load_params(args.params)
    nets = None
    if args.method != "bp":
        if args.checkpoint is None:
            raise ConfigError(f"method {args.method!r} requires --checkpoint")
        if not os.path.exists(args.checkpoint):
            raise ConfigError(f"checkpoint not found: {args.checkpoint}")
        nets, _ = load_nets(args.checkpoint)
    temperature, offset = 1.0, 0.0
    calibration_hash = None
    if args.calibration is not None and args.method not in ("bp", "nebp-nc"):
        calib_text = _read_text(args.calibration)
        try:
            calib = CalibrationResult.from_json(calib_text)
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"invalid calibration file: {exc}") from exc
        temperature, offset = calib.temperature, calib.offset
        calibration_hash = _sha256(calib_text)

    os.makedirs(args.out, exist_ok=True)
    jobs = max(1, args.jobs)
    work = [
        (path, args.method, params, nets, temperature, offset, args.seed)
        for path in args.dataset
    ]
    if jobs == 1 or len(work) == 1:
        results = [_track_one(*w) for w in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_track_one, *zip(*work)))
    outputs = {}
    for idx, (path, csv_text) in enumerate(results):
        name = "estimates.csv" if len(results) == 1 else f"estimates_{idx:03d}.csv"
        _atomic_write(os.path.join(args.out, name), csv_text)
        outputs[name] = path
    _write_manifest(
        args.out,
        "track",
        {
            "method": args.method,
            "seed": args.seed,
            "params_hash": _sha256(params.to_json()),
            "checkpoint": args.checkpoint,
            "calibration_hash": calibration_hash,
            "temperature": temperature,
            "offset": offset,
            "outputs": outputs,
        },
    )
    print(f"tracked {len(results)} dataset(s) with method {args.method}")
    return 0


def _cmd_train(args) -> int:
    datasets = [_load_dataset(p) for p in args.dataset]
    params = _load_params(args.params)
    net_cfg = NebpConfig(
        d_shape=datasets[0].config.d_shape,
        d_emb=args.d_emb,
        d_msg=args.d_msg,
        d_hidden=args.d_hidden,
        gnn_iters=args.gnn_iters,
    )
    nets = init_nets(net_cfg, seed=args.seed)
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, seed=args.seed)
    try:
        nets, adam, history = train(datasets, params, nets, cfg)
    except TrainingDiverged as exc:
        raise RuntimeError(str(exc)) from exc
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    save_nets(args.out, nets, adam)
    _write_manifest(
        out_dir,
        "train",
        {
            "seed": args.seed,
            "epochs": cfg.epochs,
            "lr": cfg.lr,
            "datasets": list(args.dataset),
            "final_loss": history.epoch_loss[-1] if history.epoch_loss else None,
            "checkpoint": os.path.basename(args.out),
        },
    )
    losses = ", ".join(f"{v:.4f}" for v in history.epoch_loss)
    print(f"trained {cfg.epochs} epoch(s); per-epoch loss: {losses}")
    return 0


def _cmd_calibrate(args) -> int:
    datasets = [_load_dataset(p) for p in args.dataset]
    params = _load_params(args.params)
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    nets, _ = load_nets(args.checkpoint)
    result = calibrate(nets, datasets, params, metric=args.metric, seed=args.seed)
    _atomic_write(args.out, result.to_json())
    print(
        f"calibrated: temperature={result.temperature}, "
        f"sigmoid(offset)={result.sigmoid_offset} "
        f"({args.metric}={result.objective:.4f})"
    )
    return 0


def _cmd_evaluate(args) -> int:
    data = _load_dataset(args.dataset)
    try:
        estimates = parse_estimates_csv(_read_text(args.estimates))
    except ValueError as exc:
        raise ConfigError(f"invalid estimates file: {exc}") from exc
    while len(estimates) < len(data.frames):
        estimates.append([])
    report = evaluate_tracking(
        estimates,
        data.ground_truth,
        gospa_cutoff=args.gospa_cutoff,
        match_dist=args.match_dist,
    )
    _atomic_write(args.out, report.to_json())
    print(
        f"gospa={report.gospa_total:.2f} "
        f"(loc={report.gospa_localization:.2f}, missed={report.gospa_missed:.2f}, "
        f"false={report.gospa_false:.2f}) amota={report.amota:.4f} "
        f"ids={report.ids} frag={report.frag}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nebptrack",
        description="Belief-propagation multiobject tracking with learned refinement",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    p_sim.add_argument("--config", help="scenario config JSON")
    p_sim.add_argument("--preset", choices=["clutter-mismatch"], help="built-in scenario family")
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.set_defaults(func=_cmd_simulate)

    p_track = sub.add_parser("track", help="run a tracker over datasets")
    p_track.add_argument("--dataset", nargs="+", required=True)
    p_track.add_argument("--method", default="bp", help=f"one of {METHODS}")
    p_track.add_argument("--params", help="model parameter JSON")
    p_track.add_argument("--checkpoint", help="trained networks (.npz)")
    p_track.add_argument("--calibration", help="calibration JSON")
    p_track.add_argument("--seed", type=int, default=0)
    p_track.add_argument("--jobs", type=int, default=1)
    p_track.add_argument("--out", required=True)
    p_track.set_defaults(func=_cmd_track)

    p_train = sub.add_parser("train", help="train the refinement networks")
    p_train.add_argument("--dataset", nargs="+", required=True)
    p_train.add_argument("--params", help="model parameter JSON")
    p_train.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p_train.add_argument("--epochs", type=int, default=8)
    p_train.add_argument("--lr", type=float, default=1e-4)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--d-emb", type=int, default=128)
    p_train.add_argument("--d-msg", type=int, default=128)
    p_train.add_argument("--d-hidden", type=int, default=128)
    p_train.add_argument("--gnn-iters", type=int, default=3)
    p_train.set_defaults(func=_cmd_train)

    p_cal = sub.add_parser("calibrate", help="grid-search rejection temperature/offset")
    p_cal.add_argument("--dataset", nargs="+", required=True)
    p_cal.add_argument("--checkpoint", required=True)
    p_cal.add_argument("--params")
    p_cal.add_argument("--metric", choices=["gospa", "amota"], default="gospa")
    p_cal.add_argument("--seed", type=int, default=0)
    p_cal.add_argument("--out", required=True)
    p_cal.set_defaults(func=_cmd_calibrate)

    p_eval = sub.add_parser("evaluate", help="score estimates against ground truth")
    p_eval.add_argument("--estimates", required=True)
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--gospa-cutoff", type=float, default=10.0)
    p_eval.add_argument("--match-dist", type=float, default=2.0)
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": {"type": "config", "message": str(exc)}}), file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures
        print(
            json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}),
            file=sys.stderr,
        )
        return 3


if __name__ == "__main__":
    sys.exit(main())
