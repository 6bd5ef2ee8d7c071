"""Experiment runner: dataset generation, training, sweeps, baselines, ablations.

Every command reads a JSON config (schema-validated, unknown keys rejected),
derives all randomness from the config seed, and writes CSV results plus any
plots under --out. Reruns with identical config and seed produce bit-identical
CSVs. Exit codes: 0 success, 2 config error, 3 runtime/divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import jsonschema
import torch

from .baseline import LinkModel, baseline_sweep, default_threshold_table
from .channel import ChannelConfig, noise_std_per_real_dim
from .checkpoint import load_checkpoint
from .geometry import (
    DatasetSpec,
    PointCloud,
    generate_dataset,
    load_dataset,
    save_dataset,
    write_ply,
)
from .training import (
    DivergenceError,
    TrainConfig,
    ablate_latent_head,
    ablate_refinement,
    derive_seed,
    encode_codewords,
    evaluate,
    hybrid_experiment,
    train,
)


class ConfigError(ValueError):
    pass


_TRAIN_BLOCK = {
    "type": "object",
    "additionalProperties": False,
    "required": ["snr_train_db", "n", "num_points", "d_f", "epochs", "batch_size"],
    "properties": {
        "snr_train_db": {"type": "number"},
        "n": {"type": "integer", "minimum": 2},
        "num_points": {"type": "integer", "minimum": 16, "multipleOf": 16},
        "d_f": {"type": "integer", "minimum": 1},
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "lr_decay_factor": {"type": "number", "exclusiveMinimum": 0},
        "lr_decay_every": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "head": {"enum": ["maxpool", "projection"]},
        "proj_t": {"type": "integer", "minimum": 0},
        "k": {"type": "integer", "minimum": 1},
        "r": {"type": "number", "exclusiveMinimum": 0},
        "normalizer_momentum": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "hybrid_coords": {"type": "boolean"},
        "hybrid_quant_bits": {"type": "integer", "minimum": 1},
    },
}

SCHEMAS = {
    "gen-data": {
        "type": "object",
        "additionalProperties": False,
        "required": ["family", "count", "points_per_cloud", "seed"],
        "properties": {
            "family": {"enum": ["sphere", "cube", "torus", "composite"]},
            "count": {"type": "integer", "minimum": 1},
            "points_per_cloud": {"type": "integer", "minimum": 16, "multipleOf": 16},
            "seed": {"type": "integer"},
            "oversample": {"type": "integer", "minimum": 1},
        },
    },
    "train": {
        "type": "object",
        "additionalProperties": False,
        "required": ["dataset", "train"],
        "properties": {
            "dataset": {"type": "string"},
            "train": _TRAIN_BLOCK,
            "resume_from": {"type": ["string", "null"]},
            "log_every": {"type": ["integer", "null"], "minimum": 1},
        },
    },
    "eval-sweep": {
        "type": "object",
        "additionalProperties": False,
        "required": ["checkpoint", "dataset", "snr_list"],
        "properties": {
            "checkpoint": {"type": "string"},
            "dataset": {"type": "string"},
            "snr_list": {"type": "array", "items": {"type": "number"}, "minItems": 1},
            "trials": {"type": "integer", "minimum": 1},
            "seed": {"type": "integer"},
            "dump_clouds": {"type": "integer", "minimum": 0},
        },
    },
    "baseline": {
        "type": "object",
        "additionalProperties": False,
        "required": ["dataset", "depth", "snr_list"],
        "properties": {
            "dataset": {"type": "string"},
            "depth": {"type": "integer", "minimum": 1, "maximum": 8},
            "snr_list": {"type": "array", "items": {"type": "number"}, "minItems": 1},
            "modulation": {"enum": ["BPSK", "QPSK", "16QAM"]},
            "code_rate": {"enum": [0.5, 0.75]},
            "mode": {"enum": ["threshold", "finite-blocklength"]},
            "eps": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "floor_db": {"type": "number"},
            "gap_db": {"type": "number"},
            "seed": {"type": "integer"},
        },
    },
    "ablate": {
        "type": "object",
        "additionalProperties": False,
        "required": ["mode", "dataset"],
        "properties": {
            "mode": {"enum": ["latent-head", "refinement", "hybrid"]},
            "dataset": {"type": "string"},
            "eval_dataset": {"type": "string"},
            "train": _TRAIN_BLOCK,
            "checkpoint": {"type": "string"},
            "hybrid_checkpoint": {"type": "string"},
            "snr_list": {"type": "array", "items": {"type": "number"}, "minItems": 1},
            "snr_db": {"type": "number"},
            "trials": {"type": "integer", "minimum": 1},
            "quant_bits": {"type": "integer", "minimum": 1},
            "seed": {"type": "integer"},
        },
    },
}


def load_config(path: str, schema: dict) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        config = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    try:
        jsonschema.validate(config, schema)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"config rejected: {e.message} (at {'/'.join(map(str, e.path))})") from e
    return config


def write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def _plot_sweep(rows: list[dict], out_dir: Path, metric: str) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        schemes = sorted({r["scheme"] for r in rows})
        for scheme in schemes:
            pts = sorted((r["snr_db"], r[metric]) for r in rows if r["scheme"] == scheme)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=scheme)
        ax.set_xlabel("test SNR (dB)")
        ax.set_ylabel(f"{metric.replace('_db', '').upper()} (dB)")
        ax.grid(True, alpha=0.4)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / f"{metric.replace('_db', '')}_vs_snr.png", dpi=120)
        plt.close(fig)
    except Exception as e:  # plots are derived artifacts; never fail the run
        print(f"warning: plotting failed: {e}", file=sys.stderr)


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def cmd_gen_data(config: dict, out: Path, seed: int | None, workers: int) -> None:
    spec = DatasetSpec(
        family=config["family"],
        count=config["count"],
        points_per_cloud=config["points_per_cloud"],
        seed=seed if seed is not None else config["seed"],
        oversample=config.get("oversample", 4),
    )
    manifest = save_dataset(generate_dataset(spec), spec, out)
    print(f"wrote {spec.count} clouds to {out} (manifest {manifest.name})")


def cmd_train(config: dict, out: Path, seed: int | None, workers: int) -> None:
    clouds = load_dataset(_require_dir(config["dataset"], "dataset"))
    block = dict(config["train"])
    if seed is not None:
        block["seed"] = seed
    cfg = TrainConfig(**block)
    out.mkdir(parents=True, exist_ok=True)
    codec, normalizer, log = train(
        cfg, clouds,
        resume_from=config.get("resume_from"),
        checkpoint_dir=out / "checkpoint",
        log_every=config.get("log_every"),
    )
    (out / "train_log.csv").write_text(log.to_csv())
    final = log.records[-1]
    print(f"trained {cfg.epochs} epochs; final chamfer {final.mean_chamfer:.6f}; "
          f"checkpoint at {out / 'checkpoint'}")


SWEEP_COLUMNS = ["snr_db", "d1_db", "d2_db", "chamfer", "scheme", "n", "trials"]


def _sweep_one(args: tuple) -> list[dict]:
    ckpt, dataset, snr_db, trials, seed = args
    codec, normalizer, _ = load_checkpoint(ckpt)
    clouds = load_dataset(dataset)
    return evaluate(codec, normalizer, clouds, [snr_db], trials=trials, seed=seed)


def cmd_eval_sweep(config: dict, out: Path, seed: int | None, workers: int) -> None:
    ckpt = _require_dir(config["checkpoint"], "checkpoint")
    dataset = _require_dir(config["dataset"], "dataset")
    snr_list = config["snr_list"]
    trials = config.get("trials", 8)
    seed = seed if seed is not None else config.get("seed", 0)
    if workers > 1:
        jobs = [(ckpt, dataset, snr, trials, seed) for snr in snr_list]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = [r for chunk in pool.map(_sweep_one, jobs) for r in chunk]
    else:
        codec, normalizer, _ = load_checkpoint(ckpt)
        clouds = load_dataset(dataset)
        rows = evaluate(codec, normalizer, clouds, snr_list, trials=trials, seed=seed)
    write_csv(out / "sweep.csv", rows, SWEEP_COLUMNS)
    _plot_sweep(rows, out, "d1_db")
    _plot_sweep(rows, out, "d2_db")
    if config.get("dump_clouds", 0) > 0:
        _dump_reconstructions(ckpt, dataset, snr_list, config["dump_clouds"], seed,
                              out / "reconstructions")
    print(f"wrote {out / 'sweep.csv'} ({len(rows)} rows)")


def _dump_reconstructions(ckpt, dataset, snr_list, count, seed, out_dir: Path) -> None:
    """Write a few decoded clouds per SNR as PLY files for visual inspection."""
    codec, normalizer, _ = load_checkpoint(ckpt)
    clouds = load_dataset(dataset)[:count]
    out_dir.mkdir(parents=True, exist_ok=True)
    z = encode_codewords(codec, normalizer, clouds)
    for snr_db in snr_list:
        std = noise_std_per_real_dim(ChannelConfig(snr_db))
        for ci in range(z.shape[0]):
            gen = torch.Generator().manual_seed(derive_seed(seed, "dump", repr(snr_db), ci))
            with torch.no_grad():
                y = z[ci : ci + 1] + torch.randn(1, z.shape[1], generator=gen) * std
                rec = codec.decode(y).points[0].numpy().astype("float64")
            write_ply(out_dir / f"snr{snr_db:g}_cloud{ci:03d}.ply", PointCloud(rec))


BASELINE_COLUMNS = ["snr_db", "d1_db", "channel_uses", "delivered", "scheme", "depth"]


def cmd_baseline(config: dict, out: Path, seed: int | None, workers: int) -> None:
    clouds = load_dataset(_require_dir(config["dataset"], "dataset"))
    table = default_threshold_table(eps=config.get("eps", 1e-3),
                                    gap_db=config.get("gap_db", 1.5))
    model = LinkModel(
        modulation=config.get("modulation", "QPSK"),
        code_rate=config.get("code_rate", 0.5),
        mode=config.get("mode", "threshold"),
        eps=config.get("eps", 1e-3),
        threshold_table=table,
    )
    rows = baseline_sweep(clouds, config["depth"], config["snr_list"], model,
                          floor_db=config.get("floor_db", 0.0))
    write_csv(out / "baseline.csv", rows, BASELINE_COLUMNS)
    _plot_sweep(rows, out, "d1_db")
    print(f"wrote {out / 'baseline.csv'} ({len(rows)} rows)")


def cmd_ablate(config: dict, out: Path, seed: int | None, workers: int) -> None:
    mode = config["mode"]
    clouds = load_dataset(_require_dir(config["dataset"], "dataset"))
    trials = config.get("trials", 8)
    out.mkdir(parents=True, exist_ok=True)

    if mode == "latent-head":
        if "train" not in config:
            raise ConfigError("latent-head ablation requires a 'train' block")
        block = dict(config["train"])
        if seed is not None:
            block["seed"] = seed
        eval_clouds = clouds
        if "eval_dataset" in config:
            eval_clouds = load_dataset(_require_dir(config["eval_dataset"], "eval dataset"))
        rows = ablate_latent_head(TrainConfig(**block), clouds, eval_clouds,
                                  config.get("snr_list", [0.0, 5.0, 10.0]), trials=trials)
        write_csv(out / "ablate_latent_head.csv", rows, SWEEP_COLUMNS)
        print(f"wrote {out / 'ablate_latent_head.csv'}")
        return

    if "checkpoint" not in config:
        raise ConfigError(f"{mode} ablation requires a 'checkpoint'")
    codec, normalizer, _ = load_checkpoint(_require_dir(config["checkpoint"], "checkpoint"))
    seed = seed if seed is not None else config.get("seed", 0)
    snr_db = config.get("snr_db", 0.0)
    if mode == "refinement":
        report = ablate_refinement(codec, normalizer, clouds, snr_db, trials=trials, seed=seed)
        write_csv(out / "ablate_refinement.csv", [report],
                  ["snr_db", "chamfer_initial", "chamfer_refined",
                   "improved_fraction", "trials"])
        print(f"wrote {out / 'ablate_refinement.csv'}")
    else:
        hybrid_codec = hybrid_normalizer = None
        if "hybrid_checkpoint" in config:
            hybrid_codec, hybrid_normalizer, _ = load_checkpoint(
                _require_dir(config["hybrid_checkpoint"], "hybrid checkpoint"))
        report = hybrid_experiment(codec, normalizer, clouds, snr_db,
                                   quant_bits=config.get("quant_bits", 16),
                                   trials=trials, seed=seed,
                                   hybrid_codec=hybrid_codec,
                                   hybrid_normalizer=hybrid_normalizer)
        write_csv(out / "ablate_hybrid.csv", [report],
                  ["snr_db", "d1_features_only", "d1_hybrid", "d1_delta",
                   "coordinate_bits", "capacity_limit_uses", "quant_bits", "trials"])
        print(f"wrote {out / 'ablate_hybrid.csv'}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-sweep": cmd_eval_sweep,
    "baseline": cmd_baseline,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcjscc",
        description="Point-cloud transmission experiments: codec training, SNR sweeps, "
                    "digital baselines, ablations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel workers for sweep fan-out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, SCHEMAS[args.command])
        out = Path(args.out)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        out.mkdir(parents=True, exist_ok=True)
        # replay metadata: the resolved config and seed fully determine outputs
        (out / "run.json").write_text(json.dumps({
            "command": args.command,
            "config": config,
            "seed_override": args.seed,
            "workers": args.workers,
        }, indent=2, sort_keys=True) + "\n")
        COMMANDS[args.command](config, out, args.seed, max(1, args.workers))
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 3
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
