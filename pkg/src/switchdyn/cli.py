"""Command-line interface: ``switchdyn {simulate,train,evaluate,predict,track,render}``.

Every command takes its parameters from built-in defaults, then an optional
``--config`` JSON file, then command-line flags, and writes the fully
resolved configuration to ``<out>/config.json`` next to its outputs.
Exit status is 0 on success, 1 on a runtime or numerical failure and 2 on
a usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("switchdyn")

MODEL_KINDS = ("gmm", "cgmm", "rslds", "rslds-ro")
MODEL_FORMAT = "switchdyn-model"

DEFAULTS = {
    "simulate": {"kind": "benchmark", "n": 1400, "split": 0.7, "duration": 91, "seed": 0, "out": "out"},
    "train": {"data": None, "model": "rslds", "regimes": 10, "components": 10, "em_iters": 20,
              "cgmm_iters": 2000, "lr": 1e-3, "seed": 0, "out": "out"},
    "evaluate": {"data": None, "models": {}, "contexts": [1, 10, 50], "horizon": 40, "samples": 300,
                 "components": 10, "seed": 0, "out": "out"},
    "predict": {"data": None, "model_file": None, "index": 0, "contexts": [10], "horizon": 40, "samples": 300,
                "seed": 0, "out": "out"},
    "track": {"scene": None, "kind": None, "slots_per_region": 2, "sweeps": 5, "seed": 0, "frames": True,
              "out": "out"},
    "render": {"history": None, "scene": None, "kind": None, "seed": 0, "out": "out"},
}


class ConfigError(Exception):
    """Bad usage or configuration; reported with exit status 2."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a JSON object")
    return data


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS[command])
    file_cfg = _load_config(args.config)
    unknown = sorted(set(file_cfg) - set(cfg))
    if unknown:
        raise ConfigError(f"unknown {command} config keys: {', '.join(unknown)}")
    cfg.update(file_cfg)
    flags = {
        "seed": args.seed, "model": args.model, "regimes": args.regimes, "horizon": args.horizon,
        "samples": args.samples, "slots_per_region": args.slots_per_region, "sweeps": args.sweeps, "out": args.out,
        "data": args.data, "scene": args.scene, "kind": args.kind, "n": args.n, "history": args.history,
        "index": args.index,
    }
    for key, value in flags.items():
        if value is not None and key in cfg:
            cfg[key] = value
    if args.context is not None and "contexts" in cfg:
        cfg["contexts"] = [args.context]
    if args.model_file:
        if command == "evaluate":
            cfg["models"] = model_names(args.model_file)
        elif command == "predict":
            cfg["model_file"] = args.model_file[0]
    _validate(command, cfg)
    return cfg


def model_names(paths) -> dict:
    """Label model files by file stem, or by their directory when stems repeat (``gmm/model.json``)."""
    stems = [Path(p).stem for p in paths]
    clash = len(set(stems)) < len(stems)
    return {(Path(p).parent.name if clash else Path(p).stem): str(p) for p in paths}


def _validate(command: str, cfg: dict) -> None:
    def positive(key):
        v = cfg[key]
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise ConfigError(f"{key} must be a positive integer, got {v!r}")

    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError("seed must be an integer")
    if command == "train":
        if cfg["model"] not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {cfg['model']!r}; choose from {', '.join(MODEL_KINDS)}")
        for key in ("regimes", "components", "em_iters"):
            positive(key)
    if command in ("evaluate", "predict"):
        positive("horizon")
        positive("samples")
        if not cfg["contexts"] or any(not isinstance(c, int) or c < 1 for c in cfg["contexts"]):
            raise ConfigError("context lengths must be positive integers")
    if command == "track":
        positive("slots_per_region")
        positive("sweeps")
    if command == "simulate":
        positive("n")
        positive("duration")
        if not 0.0 < float(cfg["split"]) < 1.0:
            raise ConfigError("split must lie strictly between 0 and 1")


def _require(cfg: dict, key: str, what: str) -> Path:
    if not cfg.get(key):
        raise ConfigError(f"missing {what} (set '{key}' in the config or pass --{key.replace('_', '-')})")
    path = Path(cfg[key])
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _outdir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return out


def _read_trajectories(path: Path):
    from .scenarios import read_trajectories_csv

    try:
        trajs = read_trajectories_csv(path)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read trajectories from {path}: {exc}") from exc
    if not trajs:
        raise ConfigError(f"no trajectories in {path}")
    return trajs


def _num(v: float) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------


def save_model(model, kind: str, path) -> None:
    Path(path).write_text(json.dumps({"format": MODEL_FORMAT, "kind": kind, "params": model.to_dict()},
                                     sort_keys=True) + "\n")


def load_model(path):
    """Model file to ``(kind, model)``; the rSLDS is returned as-is, not wrapped."""
    from .baselines import ConditionalGMM, TrajectoryGMM
    from .rslds import RSLDSModel

    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"model file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"model file {path} is not valid JSON") from exc
    if not isinstance(data, dict) or data.get("format") != MODEL_FORMAT or data.get("kind") not in MODEL_KINDS:
        raise ConfigError(f"{path} is not a switchdyn model file")
    kind, params = data["kind"], data["params"]
    try:
        if kind == "gmm":
            return kind, TrajectoryGMM.from_dict(params)
        if kind == "cgmm":
            return kind, ConditionalGMM.from_dict(params)
        return kind, RSLDSModel.from_dict(params)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"malformed model file {path}: {exc}") from exc


def _predictor(kind: str, model, cfg: dict):
    from .metrics import SamplingPredictor

    if kind in ("rslds", "rslds-ro"):
        return SamplingPredictor(model, cfg["samples"], cfg.get("components", 10))
    return model


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: dict) -> int:
    from .scenarios import (SCENE_KINDS, generate_benchmark, generate_scene, save_scene, split_dataset,
                            write_trajectories_csv)

    out = _outdir(cfg)
    if cfg["kind"] == "benchmark":
        trajs = generate_benchmark(cfg["n"], seed=cfg["seed"], T=cfg["duration"])
        train, test = split_dataset(trajs, cfg["split"], seed=cfg["seed"])
        write_trajectories_csv(trajs, out / "trajectories.csv")
        write_trajectories_csv(train, out / "train.csv")
        write_trajectories_csv(test, out / "test.csv")
        print(f"wrote {len(train)} training and {len(test)} test trajectories to {out}")
        return 0
    if cfg["kind"] not in SCENE_KINDS:
        raise ConfigError(f"unknown kind {cfg['kind']!r}; choose 'benchmark' or one of {', '.join(SCENE_KINDS)}")
    scene = generate_scene(cfg["kind"], seed=cfg["seed"], duration=cfg["duration"])
    save_scene(scene, out / "scene.json")
    write_trajectories_csv([scene.ego] + [v.traj for v in scene.vehicles] + [p.traj for p in scene.pedestrians],
                           out / "tracks.csv")
    print(f"wrote scene {cfg['kind']} (seed {cfg['seed']}) to {out}")
    return 0


def cmd_train(cfg: dict) -> int:
    from .baselines import cgmm_train, fit_trajectory_gmm
    from .rslds import fit_variational_em

    trajs = _read_trajectories(_require(cfg, "data", "training data"))
    if len({len(t) for t in trajs}) != 1:
        raise ConfigError("training trajectories must all have the same length")
    out = _outdir(cfg)
    kind = cfg["model"]
    if kind in ("gmm", "cgmm"):
        model = fit_trajectory_gmm(trajs, cfg["components"], seed=cfg["seed"])
        trace = model.trace
        if kind == "cgmm":
            model = cgmm_train(model, trajs, seed=cfg["seed"], lr=cfg["lr"], iters=cfg["cgmm_iters"])
            trace = model.trace
    else:
        variant = "full" if kind == "rslds" else "recurrent-only"
        model, em_trace = fit_variational_em(trajs, cfg["regimes"], variant=variant, seed=cfg["seed"],
                                             max_iters=cfg["em_iters"])
        trace = em_trace.elbo
    save_model(model, kind, out / "model.json")
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective"])
        for i, v in enumerate(trace):
            w.writerow([i, _num(v)])
    print(f"trained {kind} on {len(trajs)} trajectories; model written to {out / 'model.json'}")
    return 0


def cmd_evaluate(cfg: dict) -> int:
    from .metrics import evaluate_suite

    test = _read_trajectories(_require(cfg, "data", "test data"))
    models = cfg["models"]
    if isinstance(models, list):
        models = model_names(models)
    if not models:
        raise ConfigError("no models to evaluate (set 'models' or pass --model-file)")
    loaded = {}
    for name, path in models.items():
        kind, model = load_model(path)
        loaded[name] = _predictor(kind, model, cfg)
    out = _outdir(cfg)
    res = evaluate_suite(loaded, test, cfg["contexts"], horizon=cfg["horizon"], seed=cfg["seed"])
    res.to_csv(out / "results.csv")
    table = res.table()
    (out / "results.txt").write_text(table + "\n")
    print(table)
    if res.skipped:
        print(f"skipped {res.skipped} trajectory evaluations that were too short", file=sys.stderr)
    return 0


def _sample_paths(pred, n: int, rng: np.random.Generator) -> np.ndarray:
    """Whole-path samples from a per-step mixture whose weights do not change over steps."""
    comp = rng.choice(pred.k, size=n, p=pred.weights[0])
    noise = rng.standard_normal((n, pred.horizon, 2))
    return pred.means[:, comp].transpose(1, 0, 2) + np.sqrt(pred.variances[:, comp]).transpose(1, 0, 2) * noise


def cmd_predict(cfg: dict) -> int:
    from .render import ForecastPanel, render_forecast, save_svg
    from .rslds import forecast

    trajs = _read_trajectories(_require(cfg, "data", "trajectory data"))
    _require(cfg, "model_file", "model file")
    kind, model = load_model(cfg["model_file"])
    idx = cfg["index"]
    if not 0 <= idx < len(trajs):
        raise ConfigError(f"trajectory index {idx} out of range (0..{len(trajs) - 1})")
    traj = trajs[idx]
    horizon = cfg["horizon"]
    for c in cfg["contexts"]:
        if c + horizon > len(traj):
            raise ConfigError(f"context {c} plus horizon {horizon} exceeds the trajectory length {len(traj)}")
        if kind == "cgmm" and not model.supports_context(c):
            raise ConfigError(f"the cgmm model only supports context {model.context}")
    out = _outdir(cfg)
    panels = []
    with open(out / "samples.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["context", "sample", "t", "x", "y"])
        for c in cfg["contexts"]:
            ctx = traj.slice(0, c)
            seed = cfg["seed"] + c
            if kind in ("rslds", "rslds-ro"):
                paths = forecast(model, ctx, horizon, cfg["samples"], seed=seed)[..., :2]
            else:
                paths = _sample_paths(model.predict(ctx, horizon), cfg["samples"], np.random.default_rng(seed))
            for s, path in enumerate(paths):
                for h, (x, y) in enumerate(path):
                    w.writerow([c, s, c + h, _num(x), _num(y)])
            panels.append(ForecastPanel(ctx.positions, traj.positions[c:c + horizon], paths, f"context {c}"))
    save_svg(render_forecast(panels), out / "forecast.svg")
    print(f"wrote {cfg['samples']} sampled futures per context to {out / 'samples.csv'}")
    return 0


def _scene_for(cfg: dict):
    from .scenarios import SCENE_KINDS, SceneFormatError, generate_scene, load_scene

    if cfg.get("scene"):
        path = Path(cfg["scene"])
        if not path.exists():
            raise ConfigError(f"scene file not found: {path}")
        try:
            return load_scene(path)
        except SceneFormatError as exc:
            raise ConfigError(f"malformed scene {path}: {exc}") from exc
    if cfg.get("kind"):
        if cfg["kind"] not in SCENE_KINDS:
            raise ConfigError(f"unknown scene kind {cfg['kind']!r}; choose from {', '.join(SCENE_KINDS)}")
        return generate_scene(cfg["kind"], seed=cfg["seed"])
    raise ConfigError("track needs a scene (--scene PATH or --kind KIND)")


def _write_frames(frames: list[str], out: Path) -> None:
    fdir = out / "frames"
    fdir.mkdir(exist_ok=True)
    for i, svg in enumerate(frames):
        (fdir / f"frame_{i:03d}.svg").write_text(svg)


def cmd_track(cfg: dict) -> int:
    from dataclasses import replace

    from .occlusion import TrackerConfig, run_filter, write_history
    from .render import render_tracking
    from .scenarios import scene_frames

    scene = _scene_for(cfg)
    out = _outdir(cfg)
    tcfg = replace(TrackerConfig(), slots_per_region=cfg["slots_per_region"], sweeps=cfg["sweeps"],
                   range=scene.range_)
    history, _ = run_filter(scene_frames(scene), tcfg)
    write_history(history, out / "history.jsonl")
    with open(out / "beliefs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "slot", "region", "existence", "dead", "mean_x", "mean_y", "std"])
        for b in history:
            for s in b.slots:
                m = s.position.mean
                w.writerow([b.t, s.index, s.region_id, _num(s.existence), int(s.dead), _num(m[0]), _num(m[1]),
                            _num(s.position.std())])
    if cfg["frames"]:
        peds = [p.traj.positions for p in scene.pedestrians]
        _write_frames(render_tracking([b.to_dict() for b in history], peds), out)
    live = sum(not s.dead for s in history[-1].slots)
    print(f"tracked {len(history)} steps; {live} of {history[-1].num_slots} slots alive at the end")
    return 0


def cmd_render(cfg: dict) -> int:
    from .occlusion import read_history
    from .render import render_tracking

    path = _require(cfg, "history", "belief history")
    try:
        frames = read_history(path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed history file {path}: {exc.msg}") from exc
    peds = None
    if cfg.get("scene") or cfg.get("kind"):
        peds = [p.traj.positions for p in _scene_for(cfg).pedestrians]
    out = _outdir(cfg)
    _write_frames(render_tracking(frames, peds), out)
    print(f"rendered {len(frames)} frames to {out / 'frames'}")
    return 0


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate, "predict": cmd_predict,
            "track": cmd_track, "render": cmd_render}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="switchdyn", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON file with command parameters")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--model", help="model kind to train: " + ", ".join(MODEL_KINDS))
    parser.add_argument("--regimes", type=int, help="number of discrete regimes")
    parser.add_argument("--context", type=int, help="context length (single value)")
    parser.add_argument("--horizon", type=int)
    parser.add_argument("--samples", type=int, help="sampled futures per prediction")
    parser.add_argument("--slots-per-region", type=int)
    parser.add_argument("--sweeps", type=int, help="coordinate-ascent sweeps per tracking step")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--data", help="trajectory CSV")
    parser.add_argument("--model-file", action="append", help="model JSON (repeatable for evaluate)")
    parser.add_argument("--scene", help="scene JSON")
    parser.add_argument("--kind", help="benchmark or a scene kind")
    parser.add_argument("--n", type=int, help="number of benchmark trajectories")
    parser.add_argument("--index", type=int, help="trajectory index for predict")
    parser.add_argument("--history", help="belief history (JSON lines) to render")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"switchdyn {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # any other failure is a runtime error, not a usage error
        log.debug("command failed", exc_info=True)
        print(f"switchdyn {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
