"""Command-line entry point: ``erinet <command> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import wave
from pathlib import Path

import numpy as np

from . import report
from .autodiff import NumericalError
from .config import RunConfig, echo_config, load_config
from .features import MODALITY_COMBOS, AU_COMBOS, ConfigError, DataError, FormatError, load_manifest, write_feature_matrix
from .mfcc import MfccConfig, audio_tokens, read_audio
from .model import ConfigError as ModelConfigError
from .model import load_checkpoint, save_checkpoint
from .synth import generate_synthetic_dataset, load_events
from .train import (
    EvaluationError,
    ablation_to_json,
    ablation_to_text,
    attention_curves,
    evaluate,
    fit,
    prepare_sample,
    run_ablation,
)

logger = logging.getLogger("erinet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("gen-synth", "mfcc", "train", "eval", "ablate", "attn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="erinet", description="Emotion reaction intensity models on precomputed features.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("inputs", nargs="*", help="audio files for the mfcc command")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("-o", "--out", help="output directory (same as run.out_dir)")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def _need(value: str, key: str) -> Path:
    if not value:
        raise ConfigError(f"{key} is required for this command")
    path = Path(value)
    if not path.exists():
        raise DataError(f"{key}: {path} does not exist")
    return path


def cmd_gen_synth(cfg: RunConfig, out: Path) -> None:
    ds, _ = generate_synthetic_dataset(cfg.synth, out)
    logger.info("wrote %d samples to %s", len(ds), out / "manifest.json")


def cmd_mfcc(cfg: RunConfig, out: Path, inputs: list[str]) -> None:
    if not inputs:
        raise UsageError("mfcc needs at least one input audio file")
    mcfg = MfccConfig()
    for name in inputs:
        path = Path(name)
        if not path.is_file():
            raise DataError(f"audio file {path} does not exist")
        try:
            samples, rate = read_audio(path, mcfg.sample_rate)
            tokens = audio_tokens(samples, mcfg, rate)
        except (ValueError, EOFError, wave.Error) as exc:
            raise DataError(f"{path}: {exc}") from exc
        write_feature_matrix(out / f"{path.stem}.fmx", tokens.astype(np.float32))
        logger.info("%s: %d tokens", path, len(tokens))


def cmd_train(cfg: RunConfig, out: Path) -> None:
    ds = load_manifest(_need(cfg.run.manifest, "run.manifest"))
    res = fit(ds, cfg.model, cfg.train, cfg.run.combo, cfg.run.val_split or None)
    save_checkpoint(out / "model.eri", res.model, res.optimizer)
    report.write_history(out / "loss.csv", res.history)
    report.plot_history(out / "loss.png", res.history)
    logger.info("final train loss %.6f", res.history[-1]["train_loss"])


def _load_model(cfg: RunConfig):
    path = _need(cfg.run.checkpoint, "run.checkpoint")
    try:
        model, _ = load_checkpoint(path)
    except (ValueError, EOFError) as exc:
        raise FormatError(path, 0, str(exc)) from exc
    return model


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    model = _load_model(cfg)
    ds = load_manifest(_need(cfg.run.manifest, "run.manifest")).split(cfg.run.eval_split)
    if not len(ds):
        raise DataError(f"split {cfg.run.eval_split!r} is empty")
    rep = evaluate(model, ds, cfg.run.combo, cfg.train.batch_size, cfg.run.workers)
    (out / "report.json").write_text(rep.to_json() + "\n")
    (out / "report.txt").write_text(rep.to_text())
    report.write_csv(
        out / "predictions.csv",
        ["id", *(f"pred_{i}" for i in range(7)), *(f"label_{i}" for i in range(7))],
        [[i, *map(repr, p.tolist()), *map(repr, y.tolist())] for i, p, y in zip(rep.ids, rep.predictions, rep.labels)],
    )
    report.plot_pcc(out / "pcc.png", rep.per_emotion_pcc)
    sys.stdout.write(rep.to_text())


def cmd_ablate(cfg: RunConfig, out: Path) -> None:
    tables = {"modality": MODALITY_COMBOS, "au": AU_COMBOS}
    if cfg.run.ablation not in tables:
        raise ConfigError(f"run.ablation must be one of {sorted(tables)}, got {cfg.run.ablation!r}")
    ds = load_manifest(_need(cfg.run.manifest, "run.manifest"))
    rows = run_ablation(ds, cfg.model, cfg.train, tables[cfg.run.ablation], cfg.run.seed_list(), cfg.run.eval_split)
    (out / "ablation.json").write_text(ablation_to_json(rows) + "\n")
    (out / "ablation.txt").write_text(ablation_to_text(rows))
    report.write_csv(out / "ablation.csv", ["combination", "mean_pcc"], [[r.label, repr(r.mean_pcc)] for r in rows])
    report.plot_ablation(out / "ablation.png", [r.label for r in rows], [r.mean_pcc for r in rows])
    sys.stdout.write(ablation_to_text(rows))


def cmd_attn(cfg: RunConfig, out: Path) -> None:
    model = _load_model(cfg)
    manifest = _need(cfg.run.manifest, "run.manifest")
    ds = load_manifest(manifest).split(cfg.run.eval_split)
    stream = cfg.run.stream
    if stream not in model.config.streams:
        raise ConfigError(f"run.stream={stream!r} is not a stream of this model {model.config.streams}")
    items = [it for it in (prepare_sample(s, cfg.run.combo) for s in ds) if it.valid]
    events_path = manifest.parent / "events.json"
    events = load_events(events_path) if events_path.is_file() else {}
    curves = attention_curves(model, items, stream, cfg.train.batch_size)
    for n, (it, w) in enumerate(zip(items, curves)):
        report.write_attention_csv(out / "attention" / f"{it.id}.csv", w)
        if n < cfg.run.max_plots:
            ev = events[it.id].frames if it.id in events and stream == "video" else None
            report.plot_attention(out / "attention" / f"{it.id}.png", w, ev, title=it.id)
    logger.info("wrote %d attention curves", len(curves))


def run(command: str, cfg: RunConfig, inputs: list[str] | None = None) -> int:
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    handlers = {
        "gen-synth": lambda: cmd_gen_synth(cfg, out),
        "mfcc": lambda: cmd_mfcc(cfg, out, inputs or []),
        "train": lambda: cmd_train(cfg, out),
        "eval": lambda: cmd_eval(cfg, out),
        "ablate": lambda: cmd_ablate(cfg, out),
        "attn": lambda: cmd_attn(cfg, out),
    }
    handlers[command]()
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_intermixed_args(argv)
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
        overrides = list(args.overrides)
        if args.out:
            overrides.append(f"run.out_dir={args.out}")
        cfg = load_config(args.config, overrides)
        # non-finite values are caught and reported by the finite checks
        with np.errstate(over="ignore", invalid="ignore"):
            return run(args.command, cfg, args.inputs)
    except (UsageError, ConfigError, ModelConfigError) as exc:
        print(f"erinet: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"erinet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, DataError, EvaluationError, OSError, ValueError) as exc:
        print(f"erinet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
