"""CLI subcommands. Each handler takes the parsed namespace and returns an exit code."""
from __future__ import annotations

import argparse
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from models.audio import AudioClip, WatermarkMessage
from models.config import ATTACK_NAMES, AttackSpec, RunConfig
from services.attacks import apply_attack
from services.bitstream import pack_bitstream, unpack_bitstream
from services.checkpoint import load_model
from services.codec import WMCodec
from services.corpus import load_dataset, synth_corpus
from services.dsp import load_wav, resample, save_wav
from services.errors import ConfigError
from services.evaluation import (
    digit_accuracy,
    quality_eval,
    robustness_eval,
    write_quality_report,
    write_robustness_report,
)
from services.log import Colors
from services.storage import read_bytes, write_bytes_atomic
from services.training import train_loop

logger = logging.getLogger(__name__)

Handler = Callable[[argparse.Namespace], int]


@dataclass
class Command:
    name: str
    help: str
    handler: Handler
    arguments: list[tuple[tuple, dict]] = field(default_factory=list)


COMMANDS: dict[str, Command] = {}


def argument(*flags, **kwargs):
    """Attach an argparse argument to a handler; stack these under @command, top to bottom."""
    def decorator(func):
        func.__dict__.setdefault("cli_arguments", []).insert(0, (flags, kwargs))
        return func
    return decorator


def command(name: str, help: str):
    def decorator(func: Handler) -> Handler:
        COMMANDS[name] = Command(name, help, func, list(func.__dict__.get("cli_arguments", [])))
        return func
    return decorator


# -- shared helpers ---------------------------------------------------------
def _run_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.load(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    return config


def _checkpoint_path(args: argparse.Namespace) -> Path:
    if args.checkpoint is not None:
        return args.checkpoint
    return Path(_run_config(args).checkpoint_dir) / "latest.npz"


def _load_input(path: Path, model: WMCodec) -> AudioClip:
    clip = load_wav(path)
    if clip.sample_rate != model.config.sample_rate:
        logger.info(f"Resampling {path} from {clip.sample_rate} Hz to {model.config.sample_rate} Hz")
        clip = resample(clip, model.config.sample_rate)
    return clip


def _attack_params(pairs: list[str] | None) -> dict:
    params = {}
    for pair in pairs or []:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"Attack parameter '{pair}' is not in key=value form")
        if key == "seed":
            raise ConfigError("Attack seeds come from --seed")
        try:
            params[key] = json.loads(raw)
        except json.JSONDecodeError:
            params[key] = raw
    return params


def _message(args: argparse.Namespace, model: WMCodec) -> WatermarkMessage:
    return WatermarkMessage.from_text(args.message, model.config.m, model.config.b)


# -- commands ---------------------------------------------------------------
@command("synth-corpus", "Generate a deterministic synthetic corpus of WAV clips")
@argument("--out", type=Path, default=None, help="Output directory (default: dataset_dir from the run config)")
@argument("--n-clips", type=int, default=8)
@argument("--duration", type=float, default=1.0, help="Clip length in seconds")
@argument("--sample-rate", type=int, default=None)
def cmd_synth_corpus(args: argparse.Namespace) -> int:
    config = _run_config(args)
    manifest = synth_corpus(
        args.out or config.dataset_dir,
        args.n_clips,
        args.duration,
        args.sample_rate or config.model.sample_rate,
        config.seed,
    )
    print(f"Wrote {args.n_clips} clips, manifest {manifest}")
    return 0


@command("train", "Train the codec and extractor on a corpus")
@argument("--dataset", type=Path, default=None)
@argument("--steps", type=int, default=None, help="Override training.steps")
@argument("--resume", type=Path, default=None, help="Checkpoint to continue from")
def cmd_train(args: argparse.Namespace) -> int:
    config = _run_config(args)
    if args.steps is not None:
        if args.steps < 1:
            raise ConfigError(f"--steps must be >= 1, got {args.steps}")
        config = config.model_copy(update={"training": config.training.model_copy(update={"steps": args.steps})})
    dataset = load_dataset(args.dataset or config.dataset_dir, config.model.sample_rate)
    result = train_loop(config, dataset, resume=args.resume)
    final = result.checkpoints[-1] if result.checkpoints else None
    print(f"Trained to step {result.state.step}; checkpoint {final}; metrics {result.metrics_path}")
    return 0


@command("embed", "Watermark a WAV file and write its compressed code stream")
@argument("--checkpoint", type=Path, default=None)
@argument("--input", type=Path, required=True)
@argument("--message", required=True, help="Digits as text, e.g. A30F for four hex digits")
@argument("--output", type=Path, required=True)
def cmd_embed(args: argparse.Namespace) -> int:
    _, model = load_model(_checkpoint_path(args))
    message = _message(args, model)
    stream = model.embed_clip(_load_input(args.input, model).samples, message)
    write_bytes_atomic(args.output, pack_bitstream(stream))
    print(f"Embedded {message.to_text()}: {stream.n_frames} frames, {stream.bandwidth_bps:.0f} bps -> {args.output}")
    return 0


@command("decode", "Decode a code stream back to a WAV file")
@argument("--checkpoint", type=Path, default=None)
@argument("--input", type=Path, required=True)
@argument("--output", type=Path, required=True)
def cmd_decode(args: argparse.Namespace) -> int:
    _, model = load_model(_checkpoint_path(args))
    stream = unpack_bitstream(read_bytes(args.input))
    samples = model.decode_stream(stream)
    save_wav(AudioClip(samples=samples, sample_rate=stream.sample_rate), args.output)
    print(f"Decoded {stream.n_frames} frames at {stream.bandwidth_bps:.0f} bps -> {args.output}")
    return 0


@command("extract", "Read the watermark message from a WAV file")
@argument("--checkpoint", type=Path, default=None)
@argument("--input", type=Path, required=True)
def cmd_extract(args: argparse.Namespace) -> int:
    _, model = load_model(_checkpoint_path(args))
    digits, confidences = model.extract_clip(_load_input(args.input, model).samples)
    message = WatermarkMessage(digits=tuple(int(d) for d in digits), base=model.config.b)
    print(message.to_text())
    print(" ".join(f"{c:.3f}" for c in confidences))
    return 0


@command("attack", "Apply one attack to a WAV file")
@argument("--kind", required=True, choices=ATTACK_NAMES)
@argument("--param", action="append", metavar="KEY=VALUE", help="Attack parameter, repeatable")
@argument("--input", type=Path, required=True)
@argument("--output", type=Path, required=True)
def cmd_attack(args: argparse.Namespace) -> int:
    spec = AttackSpec.parse(args.kind, _attack_params(args.param), seed=args.seed or 0)
    attacked = apply_attack(load_wav(args.input), spec)
    save_wav(attacked, args.output)
    print(f"Applied {spec.kind} -> {args.output} ({len(attacked)} samples)")
    return 0


@command("eval", "Write robustness and quality reports for a checkpoint")
@argument("--checkpoint", type=Path, default=None)
@argument("--dataset", type=Path, default=None)
def cmd_eval(args: argparse.Namespace) -> int:
    config = _run_config(args)
    _, model = load_model(_checkpoint_path(args))
    dataset = load_dataset(args.dataset or config.dataset_dir, model.config.sample_rate)
    clips = list(dataset)
    evaluation = config.evaluation
    matrix = robustness_eval(model, clips, evaluation.attacks, evaluation.trials, config.seed, evaluation.label)
    quality = quality_eval(model, clips, config.seed, evaluation.label)
    described = json.loads(config.to_json())
    robustness_paths = write_robustness_report(matrix, config.report_dir, described)
    quality_paths = write_quality_report([quality], config.report_dir, described)
    print(f"Average accuracy {matrix.rows[-1]['average']:.4f}; SI-SNR {quality.si_snr_db:.2f} dB")
    print(f"Reports: {robustness_paths[0]} {quality_paths[0]}")
    return 0


@command("roundtrip", "Embed, decode, attack and extract one clip; prints a PASS/FAIL verdict")
@argument("--checkpoint", type=Path, default=None)
@argument("--input", type=Path, required=True)
@argument("--message", required=True)
@argument("--attack", default="identity", choices=ATTACK_NAMES)
@argument("--param", action="append", metavar="KEY=VALUE")
def cmd_roundtrip(args: argparse.Namespace) -> int:
    _, model = load_model(_checkpoint_path(args))
    message = _message(args, model)
    samples = _load_input(args.input, model).samples
    stream = unpack_bitstream(pack_bitstream(model.embed_clip(samples, message)))
    decoded = model.decode_stream(stream)[: len(samples)]
    spec = AttackSpec.parse(args.attack, _attack_params(args.param), seed=args.seed or 0)
    attacked = apply_attack(AudioClip(samples=decoded, sample_rate=model.config.sample_rate), spec)
    digits, _ = model.extract_clip(attacked.samples)
    extracted = WatermarkMessage(digits=tuple(int(d) for d in np.asarray(digits)), base=model.config.b)
    accuracy = digit_accuracy(message, extracted)
    verdict = f"{Colors.GREEN}PASS{Colors.RESET}" if accuracy == 1.0 else f"{Colors.RED}FAIL{Colors.RESET}"
    logger.info(f"Roundtrip verdict: {verdict}")
    print(f"{'PASS' if accuracy == 1.0 else 'FAIL'} attack={spec.kind} embedded={message.to_text()} "
          f"extracted={extracted.to_text()} accuracy={accuracy:.3f}")
    return 0
