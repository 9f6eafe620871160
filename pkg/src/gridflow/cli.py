"""Command line entry point: ``gridflow {gen,train,eval,sample,warp}``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .baseline import GridPrediction
from .config import ConfigError, RunConfig, load_config, scenario_seeds, split_seeds
from .dataset import Window, make_windows, stack_windows
from .estimators import ConstantVelocityPredictor, FlowGuidedPredictor, PersistencePredictor
from .evaluation import occupancy_frequency, per_step_csv, score_windows
from .grid import (FlowGrid, Frame, FrameSequence, OccupancyStateGrid, Pose2D, SemanticGrid, VelocityGrid,
                   to_allocentric)
from .io import FormatError, meta_path, read_gseq, write_gseq
from .losses import TERMS, NumericError
from .metrics import iou, score_sequence, evaluate
from .scene import ScenarioError, ground_truth_flow, simulate
from .warp import warp_rollout

log = logging.getLogger("gridflow")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
LOSS_COLUMNS = ("step",) + TERMS + ("total",)


def threads() -> int:
    raw = os.environ.get("GRIDFLOW_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"GRIDFLOW_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("GRIDFLOW_THREADS must be at least 1")
    return n


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    cfg = cfg.with_seed(getattr(args, "seed", None))
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- data

def _scene_files(data: Path, split: Optional[str]) -> list[Path]:
    if data.is_file():
        return [data]
    if not data.is_dir():
        raise FileNotFoundError(f"data not found: {data}")
    base = data / split if split and (data / split).is_dir() else data
    files = sorted(p for p in base.glob("*.gseq"))
    if not files:
        raise ConfigError(f"no .gseq files under {base}")
    return files


def load_windows(data: Path, split: Optional[str], cfg: RunConfig) -> list[Window]:
    windows = []
    for path in _scene_files(Path(data), split):
        seq = read_gseq(path)
        windows.extend(make_windows(seq, cfg.net.n_input, cfg.net.horizon, source=path.stem))
    if not windows:
        raise ConfigError(f"sequences under {data} are too short for {cfg.net.n_input}+{cfg.net.horizon} windows")
    return windows


# ---------------------------------------------------------------- gen

def cmd_gen(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    h = cfg.hash()
    if cfg.scenario is not None:
        seq = ground_truth_flow(simulate(cfg.scenario, cfg.net.n_input, cfg.net.horizon))
        path = write_gseq(out / "scene.gseq", seq, meta={"config_hash": h, "kind": "scenario",
                                                          "seed": cfg.scenario.seed})
        print(f"wrote {path}")
        return EXIT_OK
    seeds = scenario_seeds(cfg.seed, cfg.corpus.n_scenarios)
    train, val = split_seeds(seeds, cfg.corpus.val_fraction, cfg.seed)
    jobs = [("train", s) for s in train] + [("val", s) for s in val]
    index = {s: i for i, s in enumerate(seeds)}

    def one(job):
        split, seed = job
        scen = cfg.corpus.scenario(seed)
        seq = ground_truth_flow(simulate(scen, cfg.net.n_input, cfg.net.horizon))
        name = f"scene_{index[seed]:04d}"
        write_gseq(out / split / f"{name}.gseq", seq,
                   meta={"config_hash": h, "kind": "corpus", "split": split, "scenario_seed": seed})
        return split, name

    with ThreadPoolExecutor(max_workers=threads()) as pool:
        done = list(pool.map(one, jobs))
    manifest = {"config_hash": h, "config": cfg.to_dict(),
                "train": [n for s, n in done if s == "train"], "val": [n for s, n in done if s == "val"]}
    _dump_json(out / "corpus.json", manifest)
    print(f"wrote {len(manifest['train'])} train and {len(manifest['val'])} val scenes to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- train

def _read_loss_rows(path: Path, before_step: int) -> list[list[str]]:
    if not path.exists():
        return []
    rows = []
    with path.open() as fh:
        for row in csv.reader(line for line in fh if not line.startswith("#")):
            if row and row[0] != "step" and int(row[0]) < before_step:
                rows.append(row)
    return rows


def _loss_row(step: dict) -> list[str]:
    return [str(step["step"])] + [repr(float(step[c])) for c in LOSS_COLUMNS[1:]]


def _write_loss_csv(path: Path, config_hash: str, rows: list[list[str]]) -> None:
    with path.open("w", newline="") as fh:
        fh.write(f"# config_hash: {config_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOSS_COLUMNS)
        writer.writerows(rows)


def _model_report(est: FlowGuidedPredictor, windows: list[Window], cfg: RunConfig, mode: str = "mean",
                  seed: Optional[int] = None) -> dict:
    X, _ = stack_windows(windows)
    pred = est.predict_bundle(X, mode=mode, seed=seed)
    return score_windows(pred, windows, cfg.eval.retention_every_step, threads())


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.hash()
    train_w = load_windows(Path(args.data), "train", cfg)
    X, Y = stack_windows(train_w)
    manifest = {"config_hash": h, "run_config": cfg.to_dict()}

    if args.resume:
        est = FlowGuidedPredictor.load_checkpoint(args.resume)
        if est.manifest_.get("config_hash") != h:
            raise ConfigError("checkpoint was produced by a different configuration")
        start = est.n_epochs_
    else:
        est = FlowGuidedPredictor.from_configs(cfg.net, cfg.loss, cfg.optim, random_state=cfg.seed)
        start = 0
    n_batches = -(-len(X) // cfg.optim.batch_size)
    loss_csv = out / "loss.csv"
    rows = _read_loss_rows(loss_csv, start * n_batches) if start else []
    written = 0

    def on_epoch(epoch, net, optimizer, result):
        nonlocal written
        est.net_, est.optimizer_ = net, optimizer
        est.n_epochs_ = epoch + 1
        rows.extend(_loss_row(s) for s in result.steps[written:])
        written = len(result.steps)
        _write_loss_csv(loss_csv, h, rows)
        snapshot = {**manifest, "loss_curve": prior_curve + result.loss_curve}
        est.save_checkpoint(out / "last.gfck", snapshot)
        every = cfg.eval.checkpoint_every
        if every and (epoch + 1) % every == 0:
            est.save_checkpoint(out / f"checkpoint_epoch{epoch + 1:03d}.gfck", snapshot)
        print(f"epoch {epoch + 1}/{cfg.optim.epochs} loss {result.loss_curve[-1]:.5f}", flush=True)

    prior_curve = list(est.loss_curve_) if start else []
    try:
        est.fit(X, Y, start_epoch=start, on_epoch=on_epoch)
    except NumericError as exc:
        log.error("training diverged: %s (last finite checkpoint: %s)", exc, out / "last.gfck")
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if start >= cfg.optim.epochs:
        log.warning("checkpoint already covers %d epochs", start)
    est.save_checkpoint(out / "checkpoint.gfck", manifest)
    if not loss_csv.exists():
        _write_loss_csv(loss_csv, h, rows)

    report = {"config_hash": h, "split": "val", "epochs": est.n_epochs_, "loss_curve": est.loss_curve_}
    try:
        val_w = load_windows(Path(args.data), "val", cfg) if (Path(args.data) / "val").is_dir() else []
    except ConfigError:
        val_w = []
    if val_w:
        report["report"] = _model_report(est, val_w, cfg)
    _dump_json(out / "train_report.json", report)
    print(f"wrote {out / 'checkpoint.gfck'}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _prediction_gseq(window: Window, pred: GridPrediction, i: int) -> tuple[FrameSequence, list]:
    """Predictions of one window as a 9-channel sequence: frame 0 current, then the horizon."""
    g = window.geometry
    shape = g.shape
    zeros3, zeros2 = np.zeros((3,) + shape), np.zeros((2,) + shape)
    pose = Pose2D()
    frames, extra = [], []
    t0 = window.start * window.dt_s
    for k in range(window.horizon + 1):
        sem = pred.y_now[i] if k == 0 else pred.y_future[i, k - 1]
        flow = None if k == 0 else FlowGrid(pred.f_future[i, k - 1])
        frames.append(Frame(t0 + (window.inputs.shape[0] - 1 + k) * window.dt_s, OccupancyStateGrid(zeros3),
                            VelocityGrid(zeros2), SemanticGrid(np.clip(sem, 0, 1)), flow, pose))
        extra.append(pred.y_now[i] if k == 0 else pred.w_future[i, k - 1])
    return FrameSequence(g, tuple(frames)), extra


def _gt_gseq(window: Window) -> FrameSequence:
    g = window.geometry
    frames = []
    t0 = window.start * window.dt_s
    n_in = window.inputs.shape[0]
    cur = window.targets[0, 0]
    for k in range(window.horizon + 1):
        sem = cur if k == 0 else window.targets[k, 0]
        flow = None if k == 0 else FlowGrid(window.targets[k, 1:])
        state = np.zeros((3,) + g.shape)
        if k == 0:
            state = window.inputs[-1, 0:3].astype(np.float64)
            state = state / np.maximum(state.sum(axis=0), 1.0)
        frames.append(Frame(t0 + (n_in - 1 + k) * window.dt_s, OccupancyStateGrid(state),
                            VelocityGrid(np.zeros((2,) + g.shape)), SemanticGrid(sem), flow, Pose2D()))
    instances = (window.current_instances,) + tuple(window.future_instances)
    return FrameSequence(g, tuple(frames), instances)


def _pair_report(pred_path: Path, gt_path: Path, every_step: bool):
    pred_seq, extra = read_gseq(pred_path, with_extra=True)
    if extra is None:
        raise FormatError(f"{pred_path} has no warped-prediction channel")
    gt = read_gseq(gt_path)
    times = [round(f.timestamp_s, 9) for f in gt.frames]
    idx = []
    for f in pred_seq.frames:
        t = round(f.timestamp_s, 9)
        if t not in times:
            raise FormatError(f"prediction timestamp {f.timestamp_s} not found in {gt_path}")
        idx.append(times.index(t))
    if not gt.instances:
        raise FormatError(f"{gt_path} has no instances sidecar")
    sub = FrameSequence(gt.geometry, tuple(gt.frames[i] for i in idx), tuple(gt.instances[i] for i in idx))
    anchor = pred_seq.frames[0].pose
    if any(f.pose.as_tuple() != anchor.as_tuple() for f in sub.frames):
        sub = to_allocentric(sub, anchor)
    y_future = [f.semantic.data for f in pred_seq.frames[1:]]
    gt_sem = [f.semantic.data for f in sub.frames[1:]]
    return score_sequence(y_future, extra[1:], gt_sem, sub.instances[1:], sub.instances[0], every_step=every_step)


def _write_report(args, out: Path, report: dict) -> Path:
    path = Path(args.report) if args.report else out / "report.json"
    _dump_json(path, report)
    path.with_suffix(".csv").write_text(f"# config_hash: {report['config_hash']}\n" + per_step_csv(report["report"]))
    return path


def cmd_eval(args) -> int:
    out = Path(args.out)
    if args.pred or args.gt:
        if not (args.pred and args.gt):
            raise ConfigError("--pred and --gt must be given together")
        cfg = _resolve_config(args)
        pred_p, gt_p = Path(args.pred), Path(args.gt)
        if pred_p.is_dir():
            pairs = [(p, gt_p / p.name) for p in sorted(pred_p.glob("*.gseq"))]
        else:
            pairs = [(pred_p, gt_p)]
        scores = [_pair_report(p, g, cfg.eval.retention_every_step) for p, g in pairs]
        pred_hashes = []
        for p, _ in pairs:
            m = meta_path(p)
            pred_hashes.append(json.loads(m.read_text()).get("config_hash") if m.exists() else None)
        report = {"config_hash": cfg.hash(), "source": {"kind": "pred", "pred_config_hash": sorted(
            {h for h in pred_hashes if h})}, "n_windows": len(scores), "report": evaluate(scores)}
        path = _write_report(args, out, report)
        print(f"wrote {path}")
        return EXIT_OK

    if not args.data:
        raise ConfigError("eval needs --data (with --checkpoint or --baseline) or --pred/--gt")
    if args.checkpoint:
        est = FlowGuidedPredictor.load_checkpoint(args.checkpoint)
        cfg = RunConfig.from_dict(est.manifest_["run_config"])
        cfg = cfg.with_seed(args.seed)
        source = {"kind": "checkpoint", "config_hash": est.manifest_.get("config_hash"),
                  "epochs": est.n_epochs_, "mode": args.mode}
    elif args.baseline:
        cfg = _resolve_config(args)
        source = {"kind": "baseline", "name": args.baseline}
    else:
        raise ConfigError("eval needs --checkpoint or --baseline")
    windows = load_windows(Path(args.data), args.split, cfg)
    X, _ = stack_windows(windows)
    if args.checkpoint:
        seed = cfg.seed if args.mode == "sample" else None
        pred = est.predict_bundle(X, mode=args.mode, seed=seed)
    elif args.baseline == "cv":
        w0 = windows[0]
        pred = ConstantVelocityPredictor(cfg.net.horizon, w0.dt_s, w0.geometry.cell_size_m).predict_bundle(X)
    else:
        pred = PersistencePredictor(cfg.net.horizon).predict_bundle(X)
    report = {"config_hash": cfg.hash(), "source": source, "n_windows": len(windows),
              "report": score_windows(pred, windows, cfg.eval.retention_every_step, threads())}
    if args.save_pred:
        dest = Path(args.save_pred)
        meta = {"config_hash": cfg.hash(), "kind": "prediction", "source": source}
        for i, w in enumerate(windows):
            name = f"{w.source}_w{w.start:03d}.gseq"
            seq, extra = _prediction_gseq(w, pred, i)
            write_gseq(dest / "pred" / name, seq, extra_planes=extra, meta=meta)
            write_gseq(dest / "gt" / name, _gt_gseq(w), meta={"config_hash": cfg.hash(), "kind": "window"})
    path = _write_report(args, out, report)
    m = report["report"]["mean"]
    print(f"wrote {path}: mean IoU(W) {m['iou_w']:.4f} IoU(Y) {m['iou_y']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- sample

def write_ppm(path: Path, grid: np.ndarray, config_hash: str) -> None:
    """Grey-level binary pixmap; intensity is the cell frequency."""
    g = np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0)
    h, w = g.shape
    pix = np.round(g * 255).astype(np.uint8)
    rgb = np.repeat(pix[:, :, None], 3, axis=2)
    header = f"P6\n# config_hash {config_hash}\n{w} {h}\n255\n".encode("ascii")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + rgb.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens, off = [], 0
    while len(tokens) < 4:
        end = blob.index(b"\n", off)
        line = blob[off:end]
        off = end + 1
        if not line.startswith(b"#"):
            tokens.extend(line.split())
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(blob, dtype=np.uint8, offset=off).reshape(h, w, 3)[:, :, 0] / 255.0


def cmd_sample(args) -> int:
    est = FlowGuidedPredictor.load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_dict(est.manifest_["run_config"]).with_seed(args.seed)
    n = args.n_samples if args.n_samples is not None else cfg.eval.n_samples
    if n < 1:
        raise ConfigError("--n-samples must be at least 1")
    windows = load_windows(Path(args.data), args.split, cfg)
    if not 0 <= args.window < len(windows):
        raise ConfigError(f"--window must lie in [0, {len(windows) - 1}]")
    w = windows[args.window]
    X = w.inputs[None].astype(np.float32)
    ys, ws = [], []
    for i in range(n):
        s = int(np.random.SeedSequence([cfg.seed, i]).generate_state(1)[0])
        b = est.predict_bundle(X, mode="sample", seed=s)
        ys.append(b.y_future[0])
        ws.append(b.w_future[0])
    freq_y = occupancy_frequency(ys)
    freq_w = occupancy_frequency(ws)
    out = Path(args.out)
    h = cfg.hash()
    rows = []
    for k in range(freq_y.shape[0]):
        write_ppm(out / f"freq_y_step{k + 1}.ppm", freq_y[k], h)
        write_ppm(out / f"freq_w_step{k + 1}.ppm", freq_w[k], h)
        rows.append({"step": k + 1, "mean_freq_y": float(freq_y[k].mean()), "mean_freq_w": float(freq_w[k].mean()),
                     "iou_freq_w": iou(freq_w[k], w.targets[k + 1, 0])})
    with (out / "frequencies.csv").open("w", newline="") as fh:
        fh.write(f"# config_hash: {h}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("step", "row", "col", "freq_y", "freq_w"))
        for k in range(freq_y.shape[0]):
            for r, c in np.ndindex(freq_y.shape[1:]):
                writer.writerow((k + 1, r, c, repr(float(freq_y[k, r, c])), repr(float(freq_w[k, r, c]))))
    _dump_json(out / "sample_report.json", {"config_hash": h, "n_samples": n, "window": args.window,
                                            "source": w.source, "per_step": rows})
    np.save(out / "frequencies.npy", np.stack([freq_y, freq_w]))
    print(f"wrote {n}-sample frequency grids to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- warp

def cmd_warp(args) -> int:
    path = Path(args.data)
    seq = read_gseq(path)
    t, steps = args.frame, args.steps
    if t < 0 or steps < 1 or t + steps >= len(seq):
        raise ConfigError(f"--frame {t} --steps {steps} exceeds the {len(seq)} frames in {path}")
    flows = []
    for k in range(t + 1, t + steps + 1):
        if seq.frames[k].flow is None:
            raise ConfigError(f"frame {k} of {path} carries no flow")
        flows.append(seq.frames[k].flow.data)
    m = meta_path(path)
    source_hash = json.loads(m.read_text()).get("config_hash") if m.exists() else \
        hashlib.sha256(path.read_bytes()).hexdigest()
    h = hashlib.sha256(json.dumps({"command": "warp", "source": source_hash, "frame": t, "steps": steps},
                                  sort_keys=True).encode()).hexdigest()
    start = seq.frames[t].semantic.data
    warped = warp_rollout(start, flows)
    sub_frames = seq.frames[t:t + steps + 1]
    sub_inst = seq.instances[t:t + steps + 1] if seq.instances else ()
    out = Path(args.out)
    write_gseq(out / "warp.gseq", FrameSequence(seq.geometry, sub_frames, sub_inst), extra_planes=[start] + warped,
               meta={"config_hash": h, "kind": "warp", "source_config_hash": source_hash})
    per_step = [{"step": k + 1, "iou": iou(warped[k], seq.frames[t + k + 1].semantic.data)} for k in range(steps)]
    _dump_json(out / "warp_report.json", {"config_hash": h, "frame": t, "steps": steps, "per_step": per_step})
    print(f"wrote {out / 'warp.gseq'}")
    return EXIT_OK


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridflow", description="Flow-guided semantic grid prediction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", default=out_default, help="output directory")

    g = sub.add_parser("gen", help="generate synthetic scenes")
    common(g, "data")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the predictor")
    common(t, "run")
    t.add_argument("--data", required=True, help="corpus directory written by gen")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score predictions")
    common(e, "eval")
    e.add_argument("--checkpoint")
    e.add_argument("--baseline", choices=("cv", "persistence"))
    e.add_argument("--data")
    e.add_argument("--split", default="val")
    e.add_argument("--mode", choices=("mean", "sample"), default="mean")
    e.add_argument("--pred", help="prediction GSEQ file or directory")
    e.add_argument("--gt", help="ground-truth GSEQ file or directory")
    e.add_argument("--report", help="report path (CSV written alongside)")
    e.add_argument("--save-pred", help="directory for prediction and window GSEQ files")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="occupancy frequency over latent samples")
    common(s, "samples")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--window", type=int, default=0)
    s.add_argument("--n-samples", type=int)
    s.set_defaults(func=cmd_sample)

    w = sub.add_parser("warp", help="roll stored flows forward from one frame")
    common(w, "warp")
    w.add_argument("--data", required=True, help="GSEQ file with flows")
    w.add_argument("--frame", type=int, required=True)
    w.add_argument("--steps", type=int, default=4)
    w.set_defaults(func=cmd_warp)
    return p


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        torch.set_num_threads(threads())
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ScenarioError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
