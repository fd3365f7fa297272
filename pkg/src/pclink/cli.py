"""Command-line entry point.

Commands: synth, train, finetune, eval, baseline, transmit, ablate, plot.
Every command is deterministic given (config, seed), writes all artifacts under
its run directory, and leaves a manifest there. Exit codes: 0 success, 2 bad
arguments, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from . import link as linkmod
from . import trainer as trainermod
from .baseline import RATES, baseline_transmit, make_ldpc
from .featurecodec import CodecConfig
from .metrics import (
    MetricRecord,
    summarize_records,
    write_metrics_csv,
    write_summary_json,
)
from .pcdata import (
    PointCloud,
    SceneParams,
    ScenePair,
    load_point_cloud,
    save_point_cloud,
    synth_scene,
)
from .plotting import plot_metric_curves
from .trainer import TrainConfig, TrainingDiverged

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _load_cfg(args) -> dict[str, str]:
    mapping: dict[str, str] = {}
    if args.config:
        mapping = cfgmod.read_kv(args.config)
    if getattr(args, "seed", None) is not None:
        mapping["seed"] = str(args.seed)  # flags win over the config file
    return mapping


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output directory {out} is not empty (use --force to reuse it)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, args, mapping: dict, started: float):
    manifest = {
        "command": command,
        "config_path": str(args.config) if args.config else None,
        "seed": int(mapping.get("seed", 0)),
        "config_hash": cfgmod.content_hash(mapping),
        "out_dir": str(out),
        "started_at": started,
        "finished_at": time.time(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _dataset_index(data_dir: Path) -> list[tuple[str, Path, Path, Path]]:
    index = data_dir / "index.txt"
    if not index.exists():
        raise UsageError(f"{data_dir} has no index.txt; run `pclink synth` first")
    rows = []
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        pair_id, tx_f, rx_f, tfm_f = line.split("\t")
        rows.append((pair_id, data_dir / tx_f, data_dir / rx_f, data_dir / tfm_f))
    return rows


def load_dataset(data_dir) -> list[ScenePair]:
    data_dir = Path(data_dir)
    pairs = []
    for pair_id, tx_f, rx_f, tfm_f in _dataset_index(data_dir):
        for f in (tx_f, rx_f, tfm_f):
            if not f.exists():
                raise UsageError(f"index references missing file {f}")
        tx = load_point_cloud(tx_f, "ply_binary_le")
        rx = load_point_cloud(rx_f, "ply_binary_le")
        tx.frame_id = pair_id
        rx.frame_id = pair_id
        kv = cfgmod.read_kv(tfm_f)
        mat = np.array([float(x) for x in kv["tx_to_rx"].split(",")]).reshape(4, 4)
        pairs.append(
            ScenePair(
                tx=tx,
                rx=rx,
                tx_to_rx=mat,
                separation=float(kv["separation"]),
                comm_range_m=float(kv["comm_range_m"]),
            )
        )
    return pairs


def _parse_snrs(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad SNR list {text!r}; expected comma-separated numbers")


def _train_log(path: Path):
    f = open(path, "w", newline="")
    w = csv.writer(f)
    w.writerow(["epoch", "mean_loss", "lr"])

    def log(st):
        w.writerow([st.epoch, st.mean_loss, st.lr])
        f.flush()

    return f, log


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    mapping = _load_cfg(args)
    params = cfgmod.build_dataclass(SceneParams, mapping)
    n_pairs = args.pairs
    out = _out_dir(args, "runs/synth")
    started = time.time()
    lines = []
    for i in range(n_pairs):
        pair = synth_scene(params.seed + i, params)
        pid = f"pair{i:04d}"
        tx_f, rx_f, tfm_f = f"{pid}_tx.ply", f"{pid}_rx.ply", f"{pid}.tfm"
        save_point_cloud(pair.tx, out / tx_f, "ply_binary_le")
        save_point_cloud(pair.rx, out / rx_f, "ply_binary_le")
        cfgmod.write_kv(
            out / tfm_f,
            {
                "tx_to_rx": ",".join(repr(float(v)) for v in pair.tx_to_rx.ravel()),
                "separation": repr(pair.separation),
                "comm_range_m": repr(pair.comm_range_m),
            },
        )
        lines.append("\t".join([pid, tx_f, rx_f, tfm_f]))
    (out / "index.txt").write_text("\n".join(lines) + "\n")
    _write_manifest(out, "synth", args, mapping, started)
    print(f"wrote {n_pairs} scene pairs to {out}")
    return EXIT_OK


def _configs_from(mapping: dict, stage: str):
    codec = cfgmod.build_dataclass(CodecConfig, mapping)
    link = cfgmod.build_dataclass(linkmod.LinkConfig, mapping)
    base = TrainConfig.pretrain_defaults() if stage == "pretrain" else TrainConfig.finetune_defaults()
    defaults = {f.name: getattr(base, f.name) for f in dataclasses.fields(TrainConfig)}
    defaults["stage"] = stage
    train = cfgmod.build_dataclass(TrainConfig, {**{k: cfgmod.format_value(v) for k, v in defaults.items()}, **mapping}, stage=stage)
    return codec, link, train


def cmd_train(args) -> int:
    mapping = _load_cfg(args)
    codec_cfg, _, train_cfg = _configs_from(mapping, "pretrain")
    dataset = load_dataset(args.data)
    out = _out_dir(args, "runs/train")
    started = time.time()
    log_f, log = _train_log(out / "train_log.csv")
    try:
        result = trainermod.pretrain(dataset, codec_cfg, train_cfg, log_fn=log)
    finally:
        log_f.close()
    trainermod.save_model(out / "checkpoint.pclk", result.model, train_cfg, epoch=train_cfg.epochs)
    _write_manifest(out, "train", args, mapping, started)
    print(f"pretrained for {train_cfg.epochs} epochs; final mean loss {result.stats[-1].mean_loss:.4f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    mapping = _load_cfg(args)
    _, link_cfg, train_cfg = _configs_from(mapping, "finetune")
    dataset = load_dataset(args.data)
    out = _out_dir(args, "runs/finetune")
    started = time.time()
    if not Path(args.init).exists():
        raise UsageError(f"stage-1 checkpoint {args.init} does not exist")
    log_f, log = _train_log(out / "train_log.csv")
    try:
        result = trainermod.finetune(str(args.init), dataset, train_cfg, link_cfg=link_cfg, log_fn=log)
    finally:
        log_f.close()
    trainermod.save_model(out / "checkpoint.pclk", result.model, train_cfg, epoch=train_cfg.epochs)
    _write_manifest(out, "finetune", args, mapping, started)
    print(f"finetuned for {train_cfg.epochs} epochs; final mean loss {result.stats[-1].mean_loss:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    mapping = _load_cfg(args)
    link_cfg = cfgmod.build_dataclass(linkmod.LinkConfig, mapping)
    snrs = _parse_snrs(args.snrs)
    dataset = load_dataset(args.data)
    model, _ = trainermod.load_model(args.checkpoint)
    out = _out_dir(args, "runs/eval")
    started = time.time()
    seed = int(mapping.get("seed", 0))
    report = trainermod.evaluate(model, dataset, snrs, channel=args.channel, link_cfg=link_cfg, seed=seed)
    write_metrics_csv(out / "metrics.csv", report.records)
    write_summary_json(out / "summary.json", report.summary)
    plot_metric_curves([out / "metrics.csv"], labels=["learned"], out_dir=out)
    _write_manifest(out, "eval", args, mapping, started)
    print(f"evaluated {len(dataset)} frames at {len(snrs)} SNRs -> {out}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    mapping = _load_cfg(args)
    link_cfg = cfgmod.build_dataclass(linkmod.LinkConfig, mapping)
    if args.rate not in RATES:
        raise UsageError(f"--rate must be one of {RATES}")
    snrs = _parse_snrs(args.snrs)
    dataset = load_dataset(args.data)
    out = _out_dir(args, "runs/baseline")
    started = time.time()
    seed = int(mapping.get("seed", 0))
    ldpc = make_ldpc(rate=args.rate)
    crop = float(mapping.get("crop_limit", 70.0))
    bbox_min, bbox_max = (-crop, -crop, -5.0), (crop, crop, 5.0)
    records = []
    for fi, pair in enumerate(dataset):
        for snr in snrs:
            rng = np.random.default_rng(trainermod._seed_parts(seed, fi, float(snr)))
            cfg = replace(link_cfg, channel=args.channel, snr_db=float(snr))
            _, rec, _ = baseline_transmit(
                pair.tx, args.depth, args.rate, cfg, rng,
                bbox_min=bbox_min, bbox_max=bbox_max, ldpc=ldpc,
                frame_id=pair.tx.frame_id or f"pair{fi:04d}",
            )
            records.append(rec)
    write_metrics_csv(out / "metrics.csv", records)
    write_summary_json(out / "summary.json", summarize_records(records))
    csvs = [out / "metrics.csv"]
    labels = [f"octree+ldpc {args.rate}"]
    if args.overlay:
        csvs.append(Path(args.overlay))
        labels.append("learned")
    plot_metric_curves(csvs, labels=labels, out_dir=out)
    _write_manifest(out, "baseline", args, mapping, started)
    print(f"baseline sweep ({args.rate}, depth {args.depth}) -> {out}")
    return EXIT_OK


def cmd_transmit(args) -> int:
    mapping = _load_cfg(args)
    link_cfg = cfgmod.build_dataclass(linkmod.LinkConfig, mapping)
    model, _ = trainermod.load_model(args.checkpoint)
    tx = load_point_cloud(args.tx, _sniff_format(args.tx))
    rx = load_point_cloud(args.rx, _sniff_format(args.rx))
    out = _out_dir(args, "runs/transmit")
    started = time.time()
    seed = int(mapping.get("seed", 0))
    snr = float("inf") if args.snr.lower() in ("inf", "+inf") else float(args.snr)
    cfg = replace(link_cfg, channel=args.channel, snr_db=snr)
    pair = ScenePair(tx=tx, rx=rx, tx_to_rx=np.eye(4), separation=0.0)
    frames = trainermod.prepare_frames([pair], model.codec_cfg, need_rx=model.fusion is not None)
    rng = np.random.default_rng(trainermod._seed_parts(seed, 0, snr))
    with torch.no_grad():
        recon, _, _ = trainermod.run_pipeline(
            model, frames[0], snr, None if args.perfect_link else cfg, rng,
            transmit=not args.perfect_link,
        )
    recon_np = recon.cpu().numpy()
    n_latent = model.codec_cfg.latent_points(len(tx))
    rate = n_latent * model.codec_cfg.bottleneck_dim * cfg.bits_per_feature / len(tx)
    rec = trainermod.frame_metrics(frames[0], recon_np, snr, rate)

    # per-point nearest-neighbor error, stored as a PLY vertex property
    from .metrics import _nn_sq

    nn_err = np.sqrt(_nn_sq(recon_np.astype(np.float64), frames[0].tx_points)[0])
    save_point_cloud(
        PointCloud(points=recon_np), out / "reconstruction.ply", "ply_binary_le",
        extra_props={"nn_error": nn_err.astype(np.float32)},
    )
    write_metrics_csv(out / "metrics.csv", [rec])
    _write_manifest(out, "transmit", args, mapping, started)
    print(f"reconstruction of {len(recon_np)} points -> {out} (cd {rec.cd:.5f})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    mapping = _load_cfg(args)
    codec_cfg, link_cfg, _ = _configs_from(mapping, "finetune")
    _, _, pre_cfg = _configs_from(mapping, "pretrain")
    _, _, fine_cfg = _configs_from(mapping, "finetune")
    axes = tuple(a.strip() for a in args.axes.split(",") if a.strip())
    name_map = {"abs_pos": "use_abs_pos", "channel": "use_channel_codec", "fusion": "use_fusion"}
    axes = tuple(name_map.get(a, a) for a in axes)
    dataset = load_dataset(args.data)
    out = _out_dir(args, "runs/ablate")
    started = time.time()
    snrs = _parse_snrs(args.snrs)
    reports = trainermod.run_ablation(
        dataset, codec_cfg, pre_cfg, fine_cfg, axes=axes, snr_grid=snrs, link_cfg=link_cfg
    )
    table = {}
    for name, report in reports.items():
        write_metrics_csv(out / f"{name}.csv", report.records)
        table[name] = {k: v["mean_cd"] for k, v in report.summary["per_snr"].items()}
    write_summary_json(out / "comparison.json", table)
    plot_metric_curves([out / f"{n}.csv" for n in reports], labels=list(reports), out_dir=out)
    _write_manifest(out, "ablate", args, mapping, started)
    print(f"ablation over {axes} -> {out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    out = Path(args.out or "runs/plot")
    out.mkdir(parents=True, exist_ok=True)
    paths = plot_metric_curves(args.csv, labels=args.label or None, out_dir=out)
    print("\n".join(paths))
    return EXIT_OK


def _sniff_format(path) -> str:
    head = open(path, "rb").read(256)
    if not head.startswith(b"ply"):
        return "raw_f32"
    return "ply_ascii" if b"format ascii" in head else "ply_binary_le"


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pclink", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="key=value run config file")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", default=None, help="run output directory")
        sp.add_argument("--force", action="store_true", help="reuse a non-empty output directory")

    sp = sub.add_parser("synth", help="generate a synthetic scene-pair dataset")
    common(sp)
    sp.add_argument("--pairs", type=int, default=200)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="stage-1 pretraining of the feature codec")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("finetune", help="stage-2 end-to-end finetuning through the link")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--init", required=True, help="stage-1 checkpoint")
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("eval", help="metric sweep of a checkpoint over an SNR grid")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--snrs", default="0,5,10")
    sp.add_argument("--channel", choices=linkmod.CHANNELS, default="awgn")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("baseline", help="octree+LDPC sweep with the eval CSV schema")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--depth", type=int, default=9)
    sp.add_argument("--rate", default="1/2", help="LDPC code rate: 1/2 or 3/4")
    sp.add_argument("--snrs", default="0,5,10")
    sp.add_argument("--channel", choices=linkmod.CHANNELS, default="awgn")
    sp.add_argument("--overlay", default=None, help="learned-system CSV to overlay")
    sp.set_defaults(fn=cmd_baseline)

    sp = sub.add_parser("transmit", help="single-frame end-to-end transmission")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--tx", required=True)
    sp.add_argument("--rx", required=True)
    sp.add_argument("--snr", default="10")
    sp.add_argument("--channel", choices=linkmod.CHANNELS, default="awgn")
    sp.add_argument("--perfect-link", action="store_true",
                    help="bypass the transmission chain (pure codec roundtrip)")
    sp.set_defaults(fn=cmd_transmit)

    sp = sub.add_parser("ablate", help="train/evaluate component-ablation variants")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--axes", default="abs_pos,channel,fusion")
    sp.add_argument("--snrs", default="0,5,10")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("plot", help="regenerate plots from metrics CSVs")
    common(sp)
    sp.add_argument("--csv", action="append", required=True)
    sp.add_argument("--label", action="append")
    sp.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (UsageError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
