"""Training loss terms, each an independently testable pure function.

Distance-style terms all reduce with the mean of elementwise absolute
differences, so the loss weights stay scale-free with respect to tensor
sizes.  Functions accept torch tensors (gradients flow) or numpy arrays /
floats (converted; no gradients).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Protocol

import numpy as np
import torch
import torch.nn.functional as F

from .audio_frontend import F0Contour, MelConfig, mel_filter_centers, normalize_f0
from .data_ingest import DomainCode

logger = logging.getLogger(__name__)

GENERATOR_TERMS = ("adv", "spk", "style", "div", "asr", "norm", "cycle", "f0", "demo", "inv")


class LossError(ValueError):
    """Mismatched shapes or invalid loss inputs."""


@dataclass(frozen=True)
class LossWeights:
    """Per-term weights of the two training objectives."""

    spk: float = 0.5
    aspk: float = 0.1
    style: float = 1.0
    div: float = 1.0
    asr: float = 10.0
    norm: float = 1.0
    cycle: float = 5.0
    f0: float = 5.0
    demo: float = 2.0
    inv: float = 5.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise LossError(f"loss weight {name} must be nonnegative, got {value}")


@dataclass
class LossReport:
    """Per-term values plus the weighted total for one optimization side."""

    side: str  # "generator" | "discriminator"
    terms: dict[str, float] = field(default_factory=dict)
    total: float = 0.0

    def validate(self, weights: LossWeights, rel_tol: float = 1e-6) -> None:
        if self.side == "generator":
            recomputed = generator_objective(self.terms, weights)
        else:
            recomputed = discriminator_objective(
                self.terms.get("adv", 0.0), self.terms.get("aspk", 0.0), weights
            )
        scale = max(abs(self.total), abs(recomputed), 1e-12)
        if abs(recomputed - self.total) > rel_tol * scale:
            raise LossError(
                f"{self.side} total {self.total} does not match parts ({recomputed})"
            )

    def to_json(self) -> str:
        return json.dumps({"side": self.side, "total": self.total, **self.terms})


def _pair(a, b, name: str):
    ta = torch.as_tensor(a)
    tb = torch.as_tensor(b)
    if ta.shape != tb.shape:
        raise LossError(f"{name}: shape mismatch {tuple(ta.shape)} vs {tuple(tb.shape)}")
    return ta, tb


def _mean_abs(a, b, name: str) -> torch.Tensor:
    ta, tb = _pair(a, b, name)
    return (ta - tb).abs().mean()


def style_reconstruction_loss(se_ref, se_trg, se_ref2, mode: str = "augmented") -> torch.Tensor:
    """Style-embedding reconstruction distance.

    ``vanilla`` uses the single reference term; ``augmented`` adds the
    second-reference term and the reference-to-reference term, pulling both
    references' embeddings onto the regenerated style and onto each other.
    """
    if mode == "vanilla":
        return _mean_abs(se_ref, se_trg, "style_reconstruction_loss")
    if mode == "augmented":
        return (
            _mean_abs(se_ref, se_trg, "style_reconstruction_loss")
            + _mean_abs(se_ref2, se_trg, "style_reconstruction_loss")
            + _mean_abs(se_ref, se_ref2, "style_reconstruction_loss")
        )
    raise LossError(f"unknown style loss mode {mode!r}")


def demo_loss(emb_src, emb_trg) -> torch.Tensor:
    """Mean absolute distance between two emotion embeddings."""
    return _mean_abs(emb_src, emb_trg, "demo_loss")


def inv_loss(code_src, code_trg) -> torch.Tensor:
    """Mean absolute distance between two encoder latent codes."""
    return _mean_abs(code_src, code_trg, "inv_loss")


def diversity_loss(out1, out2) -> torch.Tensor:
    """Mean absolute distance between two generator outputs (maximized)."""
    return _mean_abs(out1, out2, "diversity_loss")


def cycle_loss(x_src, x_cycled) -> torch.Tensor:
    """Mean absolute reconstruction error after a round trip."""
    return _mean_abs(x_src, x_cycled, "cycle_loss")


def asr_loss(feat_src, feat_trg) -> torch.Tensor:
    """Mean absolute distance between content-feature tensors."""
    return _mean_abs(feat_src, feat_trg, "asr_loss")


def norm_loss(x_src, x_trg) -> torch.Tensor:
    """Framewise-L1-norm consistency between two mels.

    Mean over frames of the absolute difference of per-frame L1 norms;
    preserves voiced/unvoiced energy structure, invariant to permuting
    bins within a frame.
    """
    ta = torch.as_tensor(x_src)
    tb = torch.as_tensor(x_trg)
    if ta.shape[:-1] != tb.shape[:-1]:
        raise LossError(
            f"norm_loss: frame-count mismatch {tuple(ta.shape)} vs {tuple(tb.shape)}"
        )
    return (ta.abs().sum(dim=-1) - tb.abs().sum(dim=-1)).abs().mean()


def adversarial_losses(real_logit, fake_logit, side: str) -> torch.Tensor:
    """Non-saturating adversarial loss (softplus form)."""
    if side == "generator":
        return F.softplus(-torch.as_tensor(fake_logit)).mean()
    if side == "discriminator":
        return (
            F.softplus(-torch.as_tensor(real_logit)).mean()
            + F.softplus(torch.as_tensor(fake_logit)).mean()
        )
    raise LossError(f"unknown adversarial side {side!r}")


def speaker_adv_loss(logits, speaker: DomainCode | int, phase: str) -> torch.Tensor:
    """Cross-entropy of speaker-classifier logits against the phase's label.

    The generator phase targets the target speaker; the discriminator
    phase classifies the source speaker.  The caller supplies the label
    matching ``phase``; the computation is plain cross-entropy either way.
    """
    if phase not in ("generator_targets_trg", "discriminator_classifies_src"):
        raise LossError(f"unknown speaker-loss phase {phase!r}")
    t = torch.as_tensor(logits)
    if t.dim() == 1:
        t = t.unsqueeze(0)
    if isinstance(speaker, DomainCode):
        labels = torch.full((t.shape[0],), speaker.index, dtype=torch.long)
    elif isinstance(speaker, int):
        labels = torch.full((t.shape[0],), speaker, dtype=torch.long)
    else:  # per-sample labels for batched calls
        labels = torch.as_tensor(speaker, dtype=torch.long)
        if labels.shape != (t.shape[0],):
            raise LossError(
                f"speaker labels shape {tuple(labels.shape)} != batch ({t.shape[0]},)"
            )
    if labels.numel() and (labels.min() < 0 or labels.max() >= t.shape[-1]):
        raise LossError(
            f"speaker label out of range for width {t.shape[-1]}: {labels.tolist()}"
        )
    log_probs = F.log_softmax(t, dim=-1)
    return -log_probs.gather(-1, labels.view(-1, 1)).mean()


def f0_loss(c_src: F0Contour, c_trg: F0Contour) -> float:
    """Mean absolute difference of mean-normalized F0 contours.

    Contours of unequal length are linearly interpolated to the shorter
    one.  Two all-unvoiced contours define the loss as 0.
    """
    a = normalize_f0(c_src)
    b = normalize_f0(c_trg)
    if not np.any(c_src.voiced) and not np.any(c_trg.voiced):
        logger.warning("f0_loss: both contours unvoiced; defined as 0")
        return 0.0
    n = min(len(a), len(b))
    if n == 0:
        raise LossError("f0_loss: empty contour")
    a = _interp_to(a, n)
    b = _interp_to(b, n)
    return float(np.mean(np.abs(a - b)))


def _interp_to(values: np.ndarray, length: int) -> np.ndarray:
    if len(values) == length:
        return values
    positions = np.linspace(0.0, len(values) - 1.0, length)
    return np.interp(positions, np.arange(len(values)), values)


def generator_objective(parts: Mapping[str, object] | LossReport, w: LossWeights):
    """Weighted generator total; the diversity term enters negatively."""
    terms = parts.terms if isinstance(parts, LossReport) else parts
    get = lambda k: terms.get(k, 0.0)
    for key in GENERATOR_TERMS:
        value = get(key)
        if isinstance(value, float) and not np.isfinite(value):
            raise LossError(f"non-finite generator loss part {key!r}: {value}")
    return (
        get("adv")
        + w.spk * get("spk")
        + w.style * get("style")
        - w.div * get("div")
        + w.asr * get("asr")
        + w.norm * get("norm")
        + w.cycle * get("cycle")
        + w.f0 * get("f0")
        + w.demo * get("demo")
        + w.inv * get("inv")
    )


def discriminator_objective(adv, aspk, w: LossWeights):
    """Weighted discriminator total: the classifiers maximize the
    adversarial term and minimize the source-speaker classification."""
    return -adv + w.aspk * aspk


# --------------------------------------------------------------------------
# pluggable feature extractors used by the training-time loss wiring


class ContentFeatureExtractor(Protocol):
    """Adapter contract for the linguistic-content feature network.

    Must be differentiable in its input so the content loss trains the
    generator.  A pretrained recognizer can be plugged in without touching
    loss code.
    """

    def __call__(self, mel: torch.Tensor) -> torch.Tensor: ...


class IdentityContentFeatures:
    """Documented stub: features are the mel itself, so the content loss
    reduces to the mean absolute mel difference."""

    def __call__(self, mel: torch.Tensor) -> torch.Tensor:
        return mel


class MelCentroidPitch:
    """Differentiable mel-domain pitch proxy for the training F0 term.

    The per-frame softmax-weighted centroid of mel filter center
    frequencies tracks the dominant harmonic ridge; normalizing by the
    utterance mean mirrors the contour normalization convention, so the
    term compares intonation shapes.  A signal-domain extractor cannot be
    used here because converted utterances only exist as mels.
    """

    def __init__(self, cfg: MelConfig):
        self._centers = torch.from_numpy(mel_filter_centers(cfg).copy())

    def __call__(self, mel: torch.Tensor) -> torch.Tensor:
        """[..., frames, n_mels] log-mel -> [..., frames] normalized proxy."""
        centers = self._centers.to(dtype=mel.dtype, device=mel.device)
        weights = torch.softmax(mel, dim=-1)
        centroid = (weights * centers).sum(dim=-1)
        mean = centroid.mean(dim=-1, keepdim=True).clamp_min(1e-8)
        return centroid / mean


def report_from_terms(
    side: str, tensor_terms: Mapping[str, torch.Tensor | float], total: torch.Tensor | float
) -> LossReport:
    """Detach tensor loss parts into a serializable report."""
    def _scalar(v):
        if isinstance(v, torch.Tensor):
            return float(v.detach())
        return float(v)

    terms = {k: _scalar(v) for k, v in tensor_terms.items()}
    return LossReport(side=side, terms=terms, total=_scalar(total))
