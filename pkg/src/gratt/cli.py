"""Command-line driver: ``gratt <subcommand> [--config FILE] [--overwrite] [key=value ...]``.

Each subcommand writes into ``<output_dir>/<tag>/<subcommand>`` and refuses to
touch an existing directory unless ``--overwrite`` is given.  Every artifact
carries the resolved config: CSVs as leading ``#`` lines, JSON/JSONL under a
``config`` key, checkpoints in their metadata block.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from gratt import checkpoint, config, experiment
from gratt import evalkit as E
from gratt.config import ConfigError, ExperimentConfig
from gratt.decoder import DecoderConfig, GatePlacement, MaskConfig
from gratt.gradsuite import TOLERANCE, run_suite
from gratt.propagation import METRIC_COLUMNS, GRAttModel, TrainingDiverged, propagate_clip
from gratt.synthworld import save_clips
from gratt.tensor import Tensor

log = logging.getLogger("gratt")

SUBCOMMANDS = ("gen-data", "train", "eval", "ablate-mask", "ablate-placement", "flops", "gradcheck")
EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2
CHECKPOINT = "model.grat"


class CheckFailure(RuntimeError):
    """A tolerance or training check failed; maps to exit status 1."""


# ---------------------------------------------------------------------------
# artifact writers


def write_csv(path: Path, rows: list[dict], columns, cfg: ExperimentConfig) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for k, v in cfg.to_items():
            fh.write(f"# {k} = {v}\n")
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def read_csv(path: Path | str) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def write_json(path: Path, payload: dict, cfg: ExperimentConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"config": cfg.to_dict(), **payload}, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_jsonl(path: Path, rows: list[dict], cfg: ExperimentConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"config": cfg.to_dict()}, sort_keys=True) + "\n")
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def save_model(path: Path, model: GRAttModel, cfg: ExperimentConfig) -> None:
    checkpoint.save(path, {k: p.data for k, p in model.params.items()}, {"config": cfg.to_dict()})


def load_model(path: Path | str) -> tuple[GRAttModel, ExperimentConfig]:
    arrays, meta = checkpoint.load(path)
    cfg = config.build(meta["config"].items())
    model = GRAttModel.create(cfg.decoder, cfg.seed)
    missing = set(model.params) ^ set(arrays)
    if missing:
        raise ConfigError(f"checkpoint parameters do not match the decoder config: {sorted(missing)}")
    for k, p in model.params.items():
        if p.shape != arrays[k].shape:
            raise ConfigError(f"checkpoint parameter {k} has shape {arrays[k].shape}, expected {p.shape}")
        model.params[k] = Tensor(arrays[k].copy(), requires_grad=True)
    return model, cfg


def prepare_dir(path: Path, overwrite: bool) -> Path:
    if path.exists():
        if not overwrite:
            raise ConfigError(f"run directory {path} exists; choose a new tag or pass --overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: ExperimentConfig, out: Path) -> int:
    clips = experiment.eval_clips(cfg)
    save_clips(out / "clips.jsonl", clips, header=cfg.to_dict())
    log.info("wrote %d clips", len(clips))
    return EXIT_OK


def _progress(total: int):
    every = max(1, total // 10)

    def on_step(row):
        if row["step"] % every == 0 or row["step"] == total - 1:
            log.info("step %d/%d loss %.4f gate %.3f", row["step"] + 1, total, row["loss"], row["gate_rate"])

    return on_step


def train_into(cfg: ExperimentConfig, out: Path) -> GRAttModel:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    try:
        model, rows = experiment.train_model(cfg, on_step=_progress(cfg.train.steps))
    except TrainingDiverged as exc:
        model = GRAttModel.create(cfg.decoder, cfg.seed)
        for k, a in exc.last_good.items():
            model.params[k].data[...] = a
        save_model(out / "last_good.grat", model, cfg)
        raise CheckFailure(str(exc)) from exc
    save_model(out / CHECKPOINT, model, cfg)
    write_csv(out / "train_metrics.csv", rows, METRIC_COLUMNS, cfg)
    return model


def cmd_train(cfg: ExperimentConfig, out: Path) -> int:
    train_into(cfg, out)
    return EXIT_OK


def _checkpoint_path(cfg: ExperimentConfig) -> Path | None:
    if cfg.eval.checkpoint:
        return Path(cfg.eval.checkpoint)
    default = cfg.run_dir() / "train" / CHECKPOINT
    return default if default.exists() else None


def _model_for(cfg: ExperimentConfig, required: bool) -> GRAttModel:
    path = _checkpoint_path(cfg)
    if path is None:
        if required:
            raise ConfigError("no checkpoint: set eval.checkpoint or run 'train' with the same tag first")
        log.info("no checkpoint given; using freshly initialised parameters")
        return GRAttModel.create(cfg.decoder, cfg.seed)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} not found")
    model, _ = load_model(path)
    # the evaluation-time decoder settings (e.g. eval_gate_mode) come from the current config
    if _shape_fields(model.cfg) != _shape_fields(cfg.decoder):
        raise ConfigError("decoder shape in config differs from the checkpoint")
    model.cfg = cfg.decoder
    return model


def _shape_fields(d: DecoderConfig) -> tuple:
    return (d.n_queries, d.width, d.n_layers, d.n_heads, d.n_classes, d.ffn_mult)


SUMMARY_COLUMNS = ("n_clips", "median_id_switches", "median_recall", "mean_precision", "mean_recall",
                   "mean_duplicate_rate", "mean_id_switches", "mean_gate_rate", "occlusion_wins", "occlusion_clips")


def evaluate_into(cfg: ExperimentConfig, model: GRAttModel, out: Path) -> list[dict]:
    clips = experiment.eval_clips(cfg)
    rows, runs = experiment.evaluate(model, clips, cfg.eval.threshold)
    summary = experiment.summarize(rows)
    summary["occlusion_wins"], summary["occlusion_clips"] = experiment.occlusion_wins(rows)
    write_csv(out / "metrics.csv", [summary], SUMMARY_COLUMNS, cfg)
    write_csv(out / "clip_metrics.csv", rows, experiment.CLIP_COLUMNS, cfg)
    write_csv(out / "gate_series.csv", experiment.gate_series(runs, clips), ("seed", "frame", "layer", "active_fraction"), cfg)
    write_jsonl(out / "gate_traces.jsonl", experiment.gate_traces(runs, clips), cfg)
    return rows


def cmd_eval(cfg: ExperimentConfig, out: Path) -> int:
    rows = evaluate_into(cfg, _model_for(cfg, required=True), out)
    s = experiment.summarize(rows)
    print(f"median id_switches {s['median_id_switches']:g}  median recall {s['median_recall']:.3f}  gate rate {s['mean_gate_rate']:.3f}")
    return EXIT_OK


def _variant_worker(args) -> list[dict]:
    text, key, value, sub = args
    cfg = config.build(config.parse_lines(text.splitlines()))
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    log.info("variant %s = %s", key, value)
    model = train_into(cfg, sub)
    rows = evaluate_into(cfg, model, sub)
    return [{key: value, **r} for r in rows]


def _sweep(cfg: ExperimentConfig, out: Path, key: str, variants: dict[str, dict], filename: str) -> int:
    jobs = []
    for name, changes in variants.items():
        vcfg = config.replace(cfg, **changes)
        jobs.append((vcfg.to_text(), key, name, out / "variants" / name))
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_variant_worker, jobs))
    else:
        results = [_variant_worker(j) for j in jobs]
    rows = [r for part in results for r in part]
    column = key.split(".")[-1]
    write_csv(out / filename, [{column: r[key], **r} for r in rows],
              (column, "seed", "id_switches", "recall", "gate_rate"), cfg)
    for name, part in zip(variants, results):
        s = experiment.summarize(part)
        print(f"{name:18s} median id_switches {s['median_id_switches']:g}  median recall {s['median_recall']:.3f}  gate rate {s['mean_gate_rate']:.3f}")
    return EXIT_OK


def cmd_ablate_mask(cfg: ExperimentConfig, out: Path) -> int:
    variants = {m.value: {"decoder.mask_config": m.value, "decoder.gate_placement": "InterAttention"} for m in MaskConfig}
    return _sweep(cfg, out, "decoder.mask_config", variants, "ablate_mask.csv")


def cmd_ablate_placement(cfg: ExperimentConfig, out: Path) -> int:
    # gates placed after self-attention leave nothing to mask, so every placement runs unmasked
    variants = {p.value: {"decoder.gate_placement": p.value, "decoder.mask_config": "AllToAll"} for p in GatePlacement}
    return _sweep(cfg, out, "decoder.gate_placement", variants, "ablate_placement.csv")


def cmd_flops(cfg: ExperimentConfig, out: Path) -> int:
    model = _model_for(cfg, required=False)
    clips = experiment.eval_clips(cfg)
    per_clip, total, base = [], 0, 0
    for clip in clips:
        run = propagate_clip(clip, model, "eval")
        rep = E.flops_count(model.cfg, run.gate_log(), n_tokens=clip.spec.grid**2)
        per_clip.append({"seed": clip.seed, "scenario": clip.spec.scenario, **rep.to_json()})
        total += rep.total
        base += rep.ungated_total
    write_json(out / "flops.json", {"clips": per_clip, "total": total, "ungated_total": base, "ratio": total / base}, cfg)
    print(f"decoder FLOPs {total} / ungated {base} = {total / base:.4f}")
    return EXIT_OK


def cmd_gradcheck(cfg: ExperimentConfig, out: Path | None) -> int:
    results = run_suite(cfg.seed)
    worst = max(e for _, e in results)
    for name, err in results:
        print(f"{name:28s} {err:.3e}")
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    return EXIT_OK if worst < TOLERANCE else EXIT_CHECK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate-mask": cmd_ablate_mask,
    "ablate-placement": cmd_ablate_placement,
    "flops": cmd_flops,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gratt", description="Gated residual attention toy experiments.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides, e.g. train.steps=500")
    p.add_argument("--config", "-c", type=Path, help="flat 'section.key = value' config file")
    p.add_argument("--overwrite", action="store_true", help="replace an existing run directory")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_intermixed_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        cfg = config.load(args.config, args.overrides)
        if args.print_config:
            sys.stdout.write(cfg.to_text())
            return EXIT_OK
        out = None
        if args.subcommand != "gradcheck":
            out = prepare_dir(cfg.run_dir() / args.subcommand, args.overwrite)
            (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        return COMMANDS[args.subcommand](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
