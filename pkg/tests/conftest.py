"""Shared fixtures: synthetic corpora, downsized configs, cached checkpoints.

Everything here is deterministic — every waveform, manifest, and
checkpoint derives from fixed seeds, so test outcomes are reproducible
run to run.
"""

import json

import numpy as np
import pytest
import torch

from emovc import EMOTION_CLASSES
from emovc.audio_frontend import MelConfig, Waveform, write_wav
from emovc.data_ingest import parse_manifest
from emovc.emotion_embedder import ClassifierArch, EmotionClassifier, save_extractor
from emovc.losses import LossWeights
from emovc.vc_trainer import TrainConfig, run_training

SR = 24000

# verdict lines registered by the acceptance tests, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.line(line)


def synth_clip(freq: float, seconds: float, rng: np.random.Generator, sr: int = SR) -> Waveform:
    """A noisy two-harmonic tone; enough structure for F0 and mel tests."""
    t = np.arange(int(seconds * sr)) / sr
    tone = 0.25 * np.sin(2 * np.pi * freq * t) + 0.05 * np.sin(2 * np.pi * 2 * freq * t)
    return Waveform(tone + 0.01 * rng.standard_normal(t.size), sr)


def build_corpus(root, speakers=2, clips=5, seconds=0.5, seed=0):
    """Write WAV clips plus a JSON-lines manifest; returns the manifest path."""
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for si in range(speakers):
        for k in range(clips):
            freq = 140 + 45 * si + 17 * k
            path = root / f"spk{si}_{k:02d}.wav"
            write_wav(path, synth_clip(freq, seconds, rng))
            lines.append(
                json.dumps(
                    {
                        "id": f"spk{si}_{k:02d}",
                        "path": str(path),
                        "speaker": f"spk{si}",
                        "emotion": EMOTION_CLASSES[k % len(EMOTION_CLASSES)],
                        "transcript": "a short test line",
                    }
                )
            )
    manifest = root / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def tiny_train_config(**overrides) -> TrainConfig:
    """Downsized trainer config: small nets, short crops, two steps."""
    base = dict(
        epochs=1,
        batch_size=2,
        train_frames=24,
        seed=3,
        base_channels=8,
        disc_channels=8,
        map_hidden=32,
        max_steps=2,
        log_every=1,
        weights=LossWeights(demo=0.0),
    )
    base.update(overrides)
    return TrainConfig(**base)


def tiny_extractor(seed: int = 11, n_mels: int = 80) -> EmotionClassifier:
    """Small frozen-trunk emotion classifier with the contract widths."""
    torch.manual_seed(seed)
    arch = ClassifierArch(n_mels=n_mels, base_channels=4, trunk_dim=32, hidden_dim=16)
    clf = EmotionClassifier(arch, MelConfig(n_mels=n_mels))
    clf.eval()
    return clf


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifest = build_corpus(root, speakers=2, clips=5)
    return {"root": root, "manifest": manifest, "records": parse_manifest(manifest)}


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_train_config()


@pytest.fixture(scope="session")
def vc_ckpt(tmp_path_factory, corpus):
    """A two-step VC checkpoint reused by convert/diagnose/CLI tests."""
    out = tmp_path_factory.mktemp("vc_ckpt")
    return run_training(corpus["manifest"], tiny_train_config(), out).final


@pytest.fixture(scope="session")
def emo_ckpt(tmp_path_factory):
    """A frozen extractor checkpoint (random weights; structure is what matters)."""
    path = tmp_path_factory.mktemp("emo") / "c_emo.pt"
    clf = tiny_extractor()
    for p in clf.parameters():
        p.requires_grad_(False)
    save_extractor(path, clf)
    return path
