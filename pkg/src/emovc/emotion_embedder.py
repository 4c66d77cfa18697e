"""Two-stage construction of the frozen emotion-embedding extractor.

Stage I trains the conversion framework with emotion classes as the
domains, teaching the style-encoder trunk to carry emotion structure.
Stage II freezes that trunk, discards the per-domain linear heads, and
trains a three-layer classification head on labeled utterances.  The
extractor output is the 64-wide activation after the second head layer,
taken post-nonlinearity — no emotion label is needed at extraction time,
and the map stays differentiable in its input for training-time use.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.optim import AdamW

from . import EMOTION_CLASSES
from .audio_frontend import MelConfig, MelSpectrogram
from .networks import CheckpointError, _ConvTrunk, model_from_checkpoint
from .vc_trainer import (
    CheckpointSet,
    FeatureStore,
    TrainConfig,
    TrainerError,
    _load_records,
    fit_frames,
    run_training,
)

logger = logging.getLogger(__name__)

EMO_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ClassifierArch:
    """Shape descriptor for the emotion classifier, stored in its checkpoint."""

    n_mels: int = 80
    base_channels: int = 32
    trunk_dim: int = 512
    hidden_dim: int = 128
    embed_dim: int = 64
    num_classes: int = len(EMOTION_CLASSES)


class EmotionClassifier(nn.Module):
    """Frozen conv trunk plus a three-layer fully-connected head.

    ``embed`` returns the post-ReLU output of the second head layer
    (width 64); ``forward`` continues through the final layer to class
    logits, so the embedding is by construction the intermediate
    activation of classification.
    """

    def __init__(self, arch: ClassifierArch, mel_cfg: MelConfig):
        super().__init__()
        self.arch = arch
        self.mel_cfg = mel_cfg
        self.trunk = _ConvTrunk(arch.base_channels, arch.trunk_dim)
        self.fc1 = nn.Linear(arch.trunk_dim, arch.hidden_dim)
        self.fc2 = nn.Linear(arch.hidden_dim, arch.embed_dim)
        self.fc3 = nn.Linear(arch.embed_dim, arch.num_classes)
        self.freeze_trunk()

    def freeze_trunk(self) -> None:
        for p in self.trunk.parameters():
            p.requires_grad_(False)

    def head_parameters(self):
        yield from self.fc1.parameters()
        yield from self.fc2.parameters()
        yield from self.fc3.parameters()

    @staticmethod
    def _as_batch(mel: torch.Tensor) -> torch.Tensor:
        if mel.dim() == 2:
            return mel.unsqueeze(0)
        return mel

    def embed(self, mel: torch.Tensor) -> torch.Tensor:
        """[B, T, M] (or [T, M]) log-mel -> [B, 64] emotion embedding."""
        h = self.trunk(self._as_batch(mel))
        h = F.relu(self.fc1(h))
        return F.relu(self.fc2(h))

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """Class logits [B, num_classes]."""
        return self.fc3(self.embed(mel))


# --------------------------------------------------------------------------
# stage I


def train_stage1_emotion_conversion(
    manifest,
    cfg: TrainConfig,
    out_dir: str | Path,
    mel_cfg: MelConfig | None = None,
    **session_kwargs,
) -> CheckpointSet:
    """Train the conversion framework with emotion-class domains.

    Reuses the whole training loop; the only structural changes are the
    domain kind and forcing the emotion-term weight to zero — the
    extractor this stage exists to produce cannot be its own input.
    """
    records = _load_records(manifest)
    unlabeled = [rec.id for rec in records if rec.emotion is None]
    if unlabeled:
        raise TrainerError(
            f"stage-I training needs emotion labels; missing on {unlabeled[:5]}"
            + ("..." if len(unlabeled) > 5 else "")
        )
    if cfg.weights.demo != 0:
        logger.info("stage-I forces the emotion-term weight to 0 (was %s)", cfg.weights.demo)
    stage_cfg = replace(
        cfg, domain_kind="emotion", weights=replace(cfg.weights, demo=0.0)
    )
    return run_training(records, stage_cfg, out_dir, mel_cfg=mel_cfg, **session_kwargs)


# --------------------------------------------------------------------------
# stage II


def classifier_from_stage1(stage1_ckpt: str | Path) -> EmotionClassifier:
    """Build a classifier around the frozen Stage-I style-encoder trunk.

    The per-domain linear heads of the Stage-I style encoder are
    discarded; only the shared convolutional trunk carries over.
    """
    model, mel_cfg, _, _ = model_from_checkpoint(stage1_ckpt)
    if model.arch.domain_kind != "emotion":
        logger.warning(
            "stage-I checkpoint has domain kind %r (expected 'emotion')",
            model.arch.domain_kind,
        )
    arch = ClassifierArch(
        n_mels=model.arch.n_mels,
        base_channels=model.arch.base_channels,
        trunk_dim=model.arch.trunk_dim,
    )
    clf = EmotionClassifier(arch, mel_cfg)
    clf.trunk.load_state_dict(model.style_encoder.trunk.state_dict(), strict=True)
    clf.freeze_trunk()
    return clf


def fit_classifier(
    clf: EmotionClassifier,
    examples: list[tuple[np.ndarray, int]],
    cfg: TrainConfig,
    max_steps: int | None = None,
) -> float:
    """Cross-entropy training of the head only; returns final train accuracy.

    ``examples`` pairs a log-mel matrix [frames, n_mels] with a class
    index.  Mels are cropped/padded to the configured training length.
    """
    if not examples:
        raise TrainerError("no labeled examples to fit the classifier on")
    for _, label in examples:
        if not 0 <= label < clf.arch.num_classes:
            raise TrainerError(f"class index {label} out of range")

    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    optimizer = AdamW(
        list(clf.head_parameters()),
        lr=cfg.learning_rate,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
    )
    pad_value = float(np.log(clf.mel_cfg.eps))
    steps = max_steps if max_steps is not None else (cfg.max_steps or 500)
    batch = min(cfg.batch_size, len(examples))

    step = 0
    while step < steps:
        order = rng.permutation(len(examples))
        for start in range(0, len(order), batch):
            if step >= steps:
                break
            chosen = order[start : start + batch]
            mels, labels = [], []
            for j in chosen:
                mel, label = examples[int(j)]
                mel, _ = fit_frames(
                    mel.astype(np.float32), None, cfg.train_frames, pad_value, rng
                )
                mels.append(mel)
                labels.append(label)
            x = torch.from_numpy(np.stack(mels))
            y = torch.tensor(labels, dtype=torch.long)
            loss = F.cross_entropy(clf(x), y)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1

    return classifier_accuracy(clf, examples)


def classifier_accuracy(
    clf: EmotionClassifier, examples: list[tuple[np.ndarray, int]]
) -> float:
    """Fraction of examples whose argmax logit matches the label."""
    pad_value = float(np.log(clf.mel_cfg.eps))
    rng = np.random.default_rng(0)
    hits = 0
    with torch.no_grad():
        for mel, label in examples:
            # full-length evaluation; pad only below the minimum frame count
            frames = max(mel.shape[0], 8)
            fitted, _ = fit_frames(mel.astype(np.float32), None, frames, pad_value, rng)
            logits = clf(torch.from_numpy(fitted))
            hits += int(logits.argmax(dim=-1).item() == label)
    return hits / len(examples)


def train_stage2_classifier(
    stage1_ckpt: str | Path,
    manifest,
    cfg: TrainConfig,
    out_path: str | Path | None = None,
    feature_store: FeatureStore | None = None,
    max_steps: int | None = None,
) -> EmotionClassifier:
    """Stage II: freeze the trunk, train the three-layer head on labels."""
    clf = classifier_from_stage1(stage1_ckpt)
    records = _load_records(manifest)
    pool = [rec for rec in records if rec.split in (None, "train")]
    unlabeled = [rec.id for rec in pool if rec.emotion is None]
    if unlabeled:
        raise TrainerError(f"stage-II training needs emotion labels; missing on {unlabeled[:5]}")

    store = feature_store or FeatureStore(clf.mel_cfg)
    examples = [
        (store.features(rec.audio_path)[0], rec.emotion.index) for rec in pool
    ]
    accuracy = fit_classifier(clf, examples, cfg, max_steps=max_steps)
    logger.info("stage-II training accuracy: %.1f%%", 100.0 * accuracy)
    if out_path is not None:
        save_extractor(out_path, clf)
    return clf


# --------------------------------------------------------------------------
# extraction (the frozen, label-free interface)


def _as_mel_tensor(mel) -> torch.Tensor:
    if isinstance(mel, MelSpectrogram):
        mel = mel.values
    if isinstance(mel, np.ndarray):
        mel = torch.from_numpy(np.ascontiguousarray(mel, dtype=np.float32))
    return mel


def extract_embedding(mel, clf: EmotionClassifier) -> np.ndarray:
    """64-wide emotion embedding of one utterance; no label involved."""
    with torch.no_grad():
        emb = clf.embed(_as_mel_tensor(mel))
    return emb.squeeze(0).numpy()


def classify_emotion(mel, clf: EmotionClassifier) -> np.ndarray:
    """Class-logit vector (width = class count) of one utterance."""
    with torch.no_grad():
        logits = clf(_as_mel_tensor(mel))
    return logits.squeeze(0).numpy()


# --------------------------------------------------------------------------
# checkpoint artifact


def save_extractor(path: str | Path, clf: EmotionClassifier) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": EMO_CHECKPOINT_VERSION,
            "kind": "emotion_classifier",
            "arch": asdict(clf.arch),
            "mel_config": asdict(clf.mel_cfg),
            "state": clf.state_dict(),
        },
        path,
    )
    return path


def load_extractor(path: str | Path) -> EmotionClassifier:
    """Load a classifier checkpoint as a fully frozen extractor."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"emotion extractor checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read emotion checkpoint {path}: {exc}") from exc
    if payload.get("version") != EMO_CHECKPOINT_VERSION or payload.get("kind") != "emotion_classifier":
        raise CheckpointError(
            f"not a supported emotion classifier checkpoint: {path}"
        )
    clf = EmotionClassifier(
        ClassifierArch(**payload["arch"]), MelConfig(**payload["mel_config"])
    )
    try:
        clf.load_state_dict(payload["state"], strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"parameter shape mismatch in {path}: {exc}") from exc
    for p in clf.parameters():
        p.requires_grad_(False)
    clf.eval()
    return clf
