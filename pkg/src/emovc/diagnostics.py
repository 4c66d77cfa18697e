"""Emotion-leakage diagnostic over style-encoder embeddings.

Collects one style embedding per utterance, scores how strongly the
embedding cloud clusters by emotion versus by speaker (silhouette
comparison on the full-dimensional vectors), and renders a 2-D
stochastic-neighbor layout for inspection.  The projection is
presentation-only; scoring never touches it.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.manifold import TSNE
from sklearn.metrics import silhouette_score

from .data_ingest import UtteranceRecord
from .networks import model_from_checkpoint
from .vc_trainer import FeatureStore, _load_records

logger = logging.getLogger(__name__)

DEFAULT_PERPLEXITY = 15.0


class DiagnosticsError(ValueError):
    """Degenerate inputs for the leakage analysis."""


@dataclass
class EmbeddingSet:
    """Style embeddings with their speaker and emotion labels."""

    vectors: np.ndarray  # [n, width]
    speaker_labels: list[str]
    emotion_labels: list[str | None]
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise DiagnosticsError("vectors must be a 2-D array")
        n = self.vectors.shape[0]
        if len(self.speaker_labels) != n:
            raise DiagnosticsError("labels must match the number of vectors")
        if self.emotion_labels is not None and len(self.emotion_labels) != n:
            raise DiagnosticsError("labels must match the number of vectors")
        if self.ids and len(self.ids) != n:
            raise DiagnosticsError("ids must match the number of vectors")

    def __len__(self) -> int:
        return self.vectors.shape[0]


def collect_style_embeddings(
    ckpt: str | Path,
    manifest,
    feature_store: FeatureStore | None = None,
) -> EmbeddingSet:
    """One style embedding per utterance, under its own speaker code."""
    model, mel_cfg, _, _ = model_from_checkpoint(ckpt)
    model.eval()
    records: list[UtteranceRecord] = _load_records(manifest)
    if not records:
        raise DiagnosticsError("no utterances to embed")
    store = feature_store or FeatureStore(mel_cfg)

    vectors, speakers, emotions, ids = [], [], [], []
    with torch.no_grad():
        for rec in records:
            mel, _ = store.features(rec.audio_path)
            if mel.shape[0] < model.arch.min_frames:
                pad = np.full(
                    (model.arch.min_frames - mel.shape[0], mel.shape[1]),
                    np.log(mel_cfg.eps),
                    dtype=mel.dtype,
                )
                mel = np.concatenate([mel, pad])
            emb = model.style_encode(
                torch.from_numpy(mel).unsqueeze(0), rec.speaker.index
            )
            vectors.append(emb.squeeze(0).numpy().astype(np.float64))
            speakers.append(rec.speaker.label)
            emotions.append(rec.emotion.label if rec.emotion else None)
            ids.append(rec.id)

    return EmbeddingSet(
        vectors=np.stack(vectors),
        speaker_labels=speakers,
        emotion_labels=emotions,
        ids=ids,
    )


def project_2d(
    embeddings: EmbeddingSet, seed: int, perplexity: float = DEFAULT_PERPLEXITY
) -> np.ndarray:
    """Deterministic 2-D stochastic-neighbor layout of the embeddings."""
    n = len(embeddings)
    if n < 5:
        raise DiagnosticsError(f"need at least 5 points to project, got {n}")
    # the solver requires perplexity < n; clamp rather than fail on small sets
    effective = min(float(perplexity), (n - 1) / 3.0)
    tsne = TSNE(
        n_components=2,
        perplexity=effective,
        random_state=seed,
        init="pca",
        method="exact",
    )
    return tsne.fit_transform(embeddings.vectors)


def leakage_score(embeddings: EmbeddingSet) -> dict:
    """Silhouette of the full-dimensional vectors under each labeling.

    ``leakage_flag`` is true only when the emotion labeling explains the
    cluster structure strictly better than the speaker labeling.
    """
    emotions = embeddings.emotion_labels
    if emotions is None or any(label is None for label in emotions):
        raise DiagnosticsError("leakage scoring requires an emotion label on every utterance")
    speakers = embeddings.speaker_labels
    if len(set(emotions)) < 2 or len(set(speakers)) < 2:
        raise DiagnosticsError(
            "leakage scoring requires at least 2 emotion labels and 2 speaker labels"
        )
    try:
        by_emotion = float(silhouette_score(embeddings.vectors, emotions))
        by_speaker = float(silhouette_score(embeddings.vectors, speakers))
    except ValueError as exc:
        raise DiagnosticsError(f"degenerate labeling for silhouette scoring: {exc}") from exc
    return {
        "by_emotion": by_emotion,
        "by_speaker": by_speaker,
        "leakage_flag": bool(by_emotion > by_speaker),
    }


# --------------------------------------------------------------------------
# artifacts


def write_embeddings_json(embeddings: EmbeddingSet, path: str | Path) -> Path:
    path = Path(path)
    payload = {
        "vectors": embeddings.vectors.tolist(),
        "speaker_labels": embeddings.speaker_labels,
        "emotion_labels": embeddings.emotion_labels,
        "ids": embeddings.ids,
    }
    path.write_text(json.dumps(payload) + "\n", encoding="utf-8")
    return path


def write_layout_csv(
    embeddings: EmbeddingSet, layout: np.ndarray, path: str | Path
) -> Path:
    path = Path(path)
    emotion_labels = embeddings.emotion_labels or [None] * len(embeddings)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "x", "y", "speaker", "emotion"])
        for i in range(len(embeddings)):
            writer.writerow(
                [
                    embeddings.ids[i] if embeddings.ids else str(i),
                    f"{layout[i, 0]:.6f}",
                    f"{layout[i, 1]:.6f}",
                    embeddings.speaker_labels[i],
                    emotion_labels[i] or "",
                ]
            )
    return path


def write_scatter_svg(
    embeddings: EmbeddingSet, layout: np.ndarray, path: str | Path
) -> Path:
    """Scatter of the 2-D layout, colored by emotion, marker per speaker."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed hash salt + stripped Date metadata keep reruns byte-identical
    matplotlib.rcParams["svg.hashsalt"] = "emovc"

    path = Path(path)
    emotion_labels = embeddings.emotion_labels or [None] * len(embeddings)
    emotions = [label or "unlabeled" for label in emotion_labels]
    emotion_order = sorted(set(emotions))
    speakers = embeddings.speaker_labels
    speaker_order = sorted(set(speakers))
    markers = ["o", "s", "^", "v", "D", "P", "X", "*", "<", ">"]
    cmap = matplotlib.colormaps["tab10"]

    fig, ax = plt.subplots(figsize=(6, 5))
    for spk_idx, spk in enumerate(speaker_order):
        for emo_idx, emo in enumerate(emotion_order):
            mask = [s == spk and e == emo for s, e in zip(speakers, emotions)]
            if not any(mask):
                continue
            pts = layout[np.asarray(mask)]
            ax.scatter(
                pts[:, 0],
                pts[:, 1],
                color=cmap(emo_idx % 10),
                marker=markers[spk_idx % len(markers)],
                label=f"{spk}/{emo}",
                alpha=0.8,
                s=30,
            )
    ax.set_title("Style embeddings (2-D projection)")
    ax.legend(fontsize=6, loc="best")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def run_leakage_diagnostic(
    ckpt: str | Path,
    manifest,
    out_dir: str | Path,
    seed: int = 0,
    perplexity: float = DEFAULT_PERPLEXITY,
    feature_store: FeatureStore | None = None,
) -> dict:
    """Full pipeline: collect, score, project, and write all artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    embeddings = collect_style_embeddings(ckpt, manifest, feature_store=feature_store)
    scores = leakage_score(embeddings)
    layout = project_2d(embeddings, seed=seed, perplexity=perplexity)

    write_embeddings_json(embeddings, out / "embeddings.json")
    write_layout_csv(embeddings, layout, out / "layout.csv")
    write_scatter_svg(embeddings, layout, out / "scatter.svg")
    (out / "leakage.json").write_text(
        json.dumps(scores, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    logger.info(
        "leakage: by_emotion=%.4f by_speaker=%.4f flag=%s",
        scores["by_emotion"],
        scores["by_speaker"],
        scores["leakage_flag"],
    )
    return scores
