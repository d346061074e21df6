#!/usr/bin/env python3
"""
Tests for the wmcodec command line: argument parsing, exit codes and the
subcommands end to end on a tiny model.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from main import build_parser, main
from models.audio import AudioClip
from models.config import ModelConfig, RunConfig
from routers.commands import COMMANDS
from services.bitstream import MAGIC
from services.checkpoint import TrainState, save_checkpoint
from services.codec import WMCodec
from services.dsp import load_wav, save_wav

SR = 8000
TINY_MODEL = dict(channels=4, d_s=16, d_w=16, n_heads=2, extractor_channels=4, codebook_size=16)


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    monkeypatch.delenv("WMCODEC_CONFIG", raising=False)
    monkeypatch.delenv("WMCODEC_LOG_LEVEL", raising=False)


def _wav(path: Path, seconds=0.5, freq=300.0) -> Path:
    t = np.arange(int(seconds * SR)) / SR
    save_wav(AudioClip(samples=0.4 * np.sin(2 * np.pi * freq * t), sample_rate=SR), path)
    return path


def _checkpoint(tmp_path: Path) -> Path:
    config = RunConfig(model=ModelConfig(**TINY_MODEL), checkpoint_dir=tmp_path / "ckpt")
    path = tmp_path / "ckpt" / "tiny.npz"
    save_checkpoint(path, config, WMCodec(config.model), TrainState(rng=np.random.default_rng(0)))
    return path


def _run_config_file(tmp_path: Path) -> Path:
    payload = {
        "dataset_dir": str(tmp_path / "corpus"),
        "checkpoint_dir": str(tmp_path / "ckpt"),
        "report_dir": str(tmp_path / "reports"),
        "model": TINY_MODEL,
        "training": {"steps": 2, "batch_size": 2, "log_interval": 1, "checkpoint_interval": 2},
        "evaluation": {"trials": 1, "attacks": [{"kind": "ar"}, {"kind": "lp"}]},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(payload))
    return path


# -- parsing ---------------------------------------------------------------
def test_every_command_is_registered():
    assert set(COMMANDS) == {"synth-corpus", "train", "embed", "decode", "extract", "attack", "eval", "roundtrip"}
    flags = [f for flags, _ in COMMANDS["embed"].arguments for f in flags]
    assert flags == ["--checkpoint", "--input", "--message", "--output"]


def test_parser_rejects_bad_usage():
    parser = build_parser()
    with pytest.raises(SystemExit) as info:
        parser.parse_args(["--help"])
    assert info.value.code == 0
    with pytest.raises(SystemExit) as info:
        parser.parse_args(["compress"])
    assert info.value.code == 2
    with pytest.raises(SystemExit):
        parser.parse_args(["attack", "--kind", "reverb", "--input", "a.wav", "--output", "b.wav"])
    args = parser.parse_args(["--log-level", "debug", "--seed", "4", "extract", "--input", "a.wav"])
    assert args.log_level == "DEBUG" and args.seed == 4


# -- corpus and attacks ----------------------------------------------------
def test_synth_corpus_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["--seed", "3", "synth-corpus", "--out", str(tmp_path / name), "--n-clips", "8"]) == 0
    files = sorted((tmp_path / "a").glob("*.wav"))
    assert len(files) == 8
    for path in files:
        assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    for entry in manifest["clips"]:
        clip = load_wav(tmp_path / "a" / entry["path"])
        assert len(clip) == entry["samples"] == 8000
        assert 0.75 <= np.max(np.abs(clip.samples)) <= 0.8 + 1 / 32768
        spectrum = np.abs(np.fft.rfft(clip.samples))
        assert int(np.argmax(spectrum)) == entry["tones"][0]


def test_attack_command(tmp_path, capsys):
    source = _wav(tmp_path / "in.wav")
    out = tmp_path / "out.wav"
    assert main(["attack", "--kind", "ar", "--param", "factor=0.5", "--input", str(source), "--output", str(out)]) == 0
    np.testing.assert_allclose(load_wav(out).samples, 0.5 * load_wav(source).samples, atol=2 / 32768)
    assert "Applied ar" in capsys.readouterr().out

    assert main(["attack", "--kind", "resplice", "--input", str(source), "--output", str(out)]) == 0
    assert len(load_wav(out)) == 4000 - 4000 // 3


def test_exit_codes(tmp_path):
    source = _wav(tmp_path / "in.wav")
    out = str(tmp_path / "out.wav")
    assert main(["attack", "--kind", "sd", "--param", "p=1.5", "--input", str(source), "--output", out]) == 2
    assert main(["attack", "--kind", "ar", "--param", "seed=1", "--input", str(source), "--output", out]) == 2
    assert main(["attack", "--kind", "ar", "--input", str(tmp_path / "none.wav"), "--output", out]) == 5
    garbage = tmp_path / "garbage.wav"
    garbage.write_bytes(b"RIFF....")
    assert main(["attack", "--kind", "ar", "--input", str(garbage), "--output", out]) == 3
    assert main(["extract", "--checkpoint", str(tmp_path / "none.npz"), "--input", str(source)]) == 5
    bad_config = tmp_path / "bad.json"
    bad_config.write_text('{"model": {"b": 99}}')
    assert main(["--config", str(bad_config), "synth-corpus", "--out", str(tmp_path / "c")]) == 2


# -- model commands --------------------------------------------------------
def test_embed_decode_extract(tmp_path, capsys):
    checkpoint = _checkpoint(tmp_path)
    source = _wav(tmp_path / "in.wav")
    stream = tmp_path / "msg.wmcs"
    assert main(["embed", "--checkpoint", str(checkpoint), "--input", str(source),
                 "--message", "A30F", "--output", str(stream)]) == 0
    assert stream.read_bytes()[:4] == MAGIC

    decoded = tmp_path / "decoded.wav"
    assert main(["decode", "--checkpoint", str(checkpoint), "--input", str(stream), "--output", str(decoded)]) == 0
    assert len(load_wav(decoded)) == 25 * 160

    capsys.readouterr()
    assert main(["extract", "--checkpoint", str(checkpoint), "--input", str(decoded)]) == 0
    text, confidences = capsys.readouterr().out.strip().splitlines()
    assert len(text) == 4 and all(c in "0123456789ABCDEF" for c in text)
    assert len(confidences.split()) == 4

    assert main(["embed", "--checkpoint", str(checkpoint), "--input", str(source),
                 "--message", "A30", "--output", str(stream)]) == 2
    (tmp_path / "broken.wmcs").write_bytes(b"WMCX" + stream.read_bytes()[4:])
    assert main(["decode", "--checkpoint", str(checkpoint), "--input", str(tmp_path / "broken.wmcs"),
                 "--output", str(decoded)]) == 3


def test_roundtrip_verdict(tmp_path, capsys):
    checkpoint = _checkpoint(tmp_path)
    source = _wav(tmp_path / "in.wav")
    capsys.readouterr()
    assert main(["--seed", "2", "roundtrip", "--checkpoint", str(checkpoint), "--input", str(source),
                 "--message", "0F1E", "--attack", "noise", "--param", "snr_db=20"]) == 0
    line = capsys.readouterr().out.strip()
    assert line.split()[0] in ("PASS", "FAIL")
    assert "attack=noise" in line and "embedded=0F1E" in line and "accuracy=" in line


def test_train_and_eval(tmp_path):
    config = str(_run_config_file(tmp_path))
    assert main(["--config", config, "synth-corpus", "--n-clips", "3", "--duration", "0.5"]) == 0
    assert main(["--config", config, "train"]) == 0
    assert (tmp_path / "ckpt" / "latest.npz").exists()
    assert (tmp_path / "ckpt" / "metrics.csv").read_text().count("\n") == 3
    assert main(["--config", config, "train", "--steps", "3", "--resume", str(tmp_path / "ckpt" / "latest.npz")]) == 0
    assert (tmp_path / "ckpt" / "step_000003.npz").exists()

    assert main(["--config", config, "eval"]) == 0
    robustness = (tmp_path / "reports" / "robustness.csv").read_text().splitlines()
    assert robustness[0].startswith("model,n_codebooks,bandwidth_bps,capacity_bps,normal")
    assert len(robustness) == 2
    assert (tmp_path / "reports" / "quality.json").exists()


if __name__ == "__main__":
    print("Run with: pytest test_cli.py")
