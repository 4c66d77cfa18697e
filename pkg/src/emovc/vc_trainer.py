"""Adversarial training loop for the conversion networks.

Each batch runs one discriminator step (classifiers only) followed by one
generator step (generator, style encoder, and mapping network jointly).
The style fed to the generator alternates between the style encoder and
the mapping network per optimization step.  The loop is single-process
and fully seeded so fixed-seed reruns reproduce loss reports bitwise.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.optim import AdamW

from . import EMOTION_CLASSES
from .audio_frontend import (
    F0Contour,
    MelConfig,
    extract_f0,
    load_and_resample,
    mel_spectrogram,
    normalize_f0,
)
from .data_ingest import (
    TrainingTuple,
    TupleSampler,
    UtteranceRecord,
    apply_split_assignments,
    parse_manifest,
    speaker_labels,
)
from .losses import (
    IdentityContentFeatures,
    LossReport,
    LossWeights,
    MelCentroidPitch,
    adversarial_losses,
    asr_loss,
    cycle_loss,
    demo_loss,
    discriminator_objective,
    diversity_loss,
    generator_objective,
    inv_loss,
    norm_loss,
    report_from_terms,
    speaker_adv_loss,
    style_reconstruction_loss,
)
from .networks import ArchConfig, VCModel, draw_latent, model_from_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

CACHE_ENV_VAR = "EMOVC_CACHE"

STYLE_POLICIES = ("alternate", "encoder", "mapping")
STYLE_LOSS_MODES = ("augmented", "vanilla")
DOMAIN_KINDS = ("speaker", "emotion")


class TrainerError(RuntimeError):
    """Unrecoverable training failure."""


class ConfigError(ValueError):
    """Invalid training configuration."""


class NonFiniteLossError(TrainerError):
    """A step produced a non-finite loss; raised before parameters change."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; defaults follow the published protocol."""

    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    domain_kind: str = "speaker"  # "speaker" | "emotion"
    style_source_policy: str = "alternate"  # "alternate" | "encoder" | "mapping"
    style_loss_mode: str = "augmented"  # "augmented" | "vanilla"
    weights: LossWeights = field(default_factory=LossWeights)
    train_frames: int = 192
    steps_per_epoch: int = 0  # 0 -> ceil(pool size / batch size)
    max_steps: int = 0  # 0 -> epochs * steps_per_epoch; nonzero caps the run
    log_every: int = 10
    checkpoint_every: int = 0  # steps between periodic checkpoints; 0 -> final only
    base_channels: int = 32
    disc_channels: int = 16
    map_hidden: int = 128
    emotion_extractor: str | None = None  # checkpoint path, loaded lazily

    def __post_init__(self):
        if self.style_source_policy not in STYLE_POLICIES:
            raise ConfigError(
                f"style_source_policy must be one of {STYLE_POLICIES}, "
                f"got {self.style_source_policy!r}"
            )
        if self.style_loss_mode not in STYLE_LOSS_MODES:
            raise ConfigError(
                f"style_loss_mode must be one of {STYLE_LOSS_MODES}, "
                f"got {self.style_loss_mode!r}"
            )
        if self.domain_kind not in DOMAIN_KINDS:
            raise ConfigError(f"domain_kind must be one of {DOMAIN_KINDS}")
        for name in ("epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.train_frames < 8:
            raise ConfigError("train_frames must be >= 8 (the generator minimum)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")

    def uses_encoder_style(self, step_index: int) -> bool:
        if self.style_source_policy == "encoder":
            return True
        if self.style_source_policy == "mapping":
            return False
        return step_index % 2 == 0


def config_to_dict(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["betas"] = list(cfg.betas)
    return out


def config_from_dict(data: dict) -> TrainConfig:
    """Build a TrainConfig from a parsed config document; unknown keys fail."""
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
    kwargs = dict(data)
    if "betas" in kwargs:
        betas = kwargs["betas"]
        if len(betas) != 2:
            raise ConfigError("betas must hold exactly two values")
        kwargs["betas"] = (float(betas[0]), float(betas[1]))
    if "weights" in kwargs and not isinstance(kwargs["weights"], LossWeights):
        try:
            kwargs["weights"] = LossWeights(**kwargs["weights"])
        except TypeError as exc:
            raise ConfigError(f"invalid loss weights: {exc}") from exc
    try:
        return TrainConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# --------------------------------------------------------------------------
# feature pipeline


class FeatureStore:
    """Mel + F0 features per audio file, with an optional on-disk cache.

    The cache directory comes from the EMOVC_CACHE environment variable
    unless given explicitly; entries are keyed by file identity (path,
    size, mtime) and the mel configuration, so edited audio or changed
    configs never hit stale entries.
    """

    def __init__(self, mel_cfg: MelConfig, cache_dir: str | Path | None = None):
        self.mel_cfg = mel_cfg
        env_dir = os.environ.get(CACHE_ENV_VAR)
        self.cache_dir = Path(cache_dir or env_dir) if (cache_dir or env_dir) else None
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._memory: dict[str, tuple[np.ndarray, F0Contour]] = {}

    def _cache_key(self, path: Path) -> str:
        stat = path.stat()
        ident = json.dumps(
            {
                "path": str(path.resolve()),
                "size": stat.st_size,
                "mtime_ns": stat.st_mtime_ns,
                "mel": asdict(self.mel_cfg),
            },
            sort_keys=True,
        )
        return hashlib.sha256(ident.encode()).hexdigest()[:32]

    def features(self, audio_path: str | Path) -> tuple[np.ndarray, F0Contour]:
        """Return (log-mel [frames, n_mels] float32, F0Contour) for a file."""
        path = Path(audio_path)
        key = str(path)
        if key in self._memory:
            return self._memory[key]

        cache_file = None
        if self.cache_dir is not None:
            cache_file = self.cache_dir / f"{self._cache_key(path)}.npz"
            if cache_file.is_file():
                data = np.load(cache_file, allow_pickle=False)
                mel = data["mel"]
                contour = F0Contour(hz=data["f0_hz"], voiced=data["voiced"].astype(bool))
                self._memory[key] = (mel, contour)
                return mel, contour

        wave = load_and_resample(path)
        mel = mel_spectrogram(wave, self.mel_cfg).values.astype(np.float32)
        contour = extract_f0(wave, self.mel_cfg)
        if cache_file is not None:
            np.savez(cache_file, mel=mel, f0_hz=contour.hz, voiced=contour.voiced)
        self._memory[key] = (mel, contour)
        return mel, contour


def fit_frames(
    mel: np.ndarray,
    contour: F0Contour | None,
    frames: int,
    pad_value: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, F0Contour | None]:
    """Random-crop or end-pad features to exactly ``frames`` frames.

    Padding rows take the log-floor value (silence); padded F0 frames are
    unvoiced.  The crop offset comes from ``rng`` so epochs see different
    windows.
    """
    t = mel.shape[0]
    if t > frames:
        offset = int(rng.integers(t - frames + 1))
        mel = mel[offset : offset + frames]
        if contour is not None:
            contour = F0Contour(
                hz=contour.hz[offset : offset + frames],
                voiced=contour.voiced[offset : offset + frames],
            )
    elif t < frames:
        pad = frames - t
        mel = np.concatenate(
            [mel, np.full((pad, mel.shape[1]), pad_value, dtype=mel.dtype)]
        )
        if contour is not None:
            contour = F0Contour(
                hz=np.concatenate([contour.hz, np.zeros(pad)]),
                voiced=np.concatenate([contour.voiced, np.zeros(pad, dtype=bool)]),
            )
    return mel, contour


@dataclass
class Batch:
    """One optimization-step batch; all mels share the same frame count."""

    src_mel: torch.Tensor  # [B, T, M]
    src_f0: torch.Tensor  # [B, T] normalized contour
    ref_mel: torch.Tensor  # [B, T, M]
    ref2_mel: torch.Tensor  # [B, T, M]
    y_src: torch.Tensor  # [B] long, source domain indices
    y_trg: torch.Tensor  # [B] long, target domain indices

    def stats(self) -> dict:
        return {
            "frames": int(self.src_mel.shape[1]),
            "src_mel_min": float(self.src_mel.min()),
            "src_mel_max": float(self.src_mel.max()),
            "src_mel_mean": float(self.src_mel.mean()),
            "y_src": self.y_src.tolist(),
            "y_trg": self.y_trg.tolist(),
        }


def _source_domain_index(rec: UtteranceRecord, kind: str) -> int:
    if kind == "emotion":
        if rec.emotion is None:
            raise TrainerError(f"record {rec.id!r} lacks an emotion label")
        return rec.emotion.index
    return rec.speaker.index


def assemble_batch(
    tuples: list[TrainingTuple],
    store: FeatureStore,
    train_frames: int,
    rng: np.random.Generator,
    domain_kind: str = "speaker",
) -> Batch:
    """Fetch, crop, and stack the features for a list of training tuples."""
    pad_value = float(np.log(store.mel_cfg.eps))
    src, f0n, ref, ref2, y_src, y_trg = [], [], [], [], [], []
    for tup in tuples:
        mel, contour = store.features(tup.source.audio_path)
        mel, contour = fit_frames(mel, contour, train_frames, pad_value, rng)
        src.append(mel)
        f0n.append(normalize_f0(contour).astype(np.float32))

        mel_r, _ = store.features(tup.reference.audio_path)
        ref.append(fit_frames(mel_r, None, train_frames, pad_value, rng)[0])
        mel_r2, _ = store.features(tup.reference2.audio_path)
        ref2.append(fit_frames(mel_r2, None, train_frames, pad_value, rng)[0])

        y_src.append(_source_domain_index(tup.source, domain_kind))
        y_trg.append(tup.target_speaker.index)

    return Batch(
        src_mel=torch.from_numpy(np.stack(src)),
        src_f0=torch.from_numpy(np.stack(f0n)),
        ref_mel=torch.from_numpy(np.stack(ref)),
        ref2_mel=torch.from_numpy(np.stack(ref2)),
        y_src=torch.tensor(y_src, dtype=torch.long),
        y_trg=torch.tensor(y_trg, dtype=torch.long),
    )


# --------------------------------------------------------------------------
# optimization steps


def _styles_for_step(
    model: VCModel,
    batch: Batch,
    cfg: TrainConfig,
    step_index: int,
    z_source: torch.Generator | None,
    z_pair: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Primary and secondary target styles for this step's source policy."""
    if cfg.uses_encoder_style(step_index):
        s1 = model.style_encode(batch.ref_mel, batch.y_trg)
        s2 = model.style_encode(batch.ref2_mel, batch.y_trg)
    else:
        if z_pair is None:
            z1 = draw_latent(len(batch.y_trg), model.arch, z_source)
            z2 = draw_latent(len(batch.y_trg), model.arch, z_source)
        else:
            z1, z2 = z_pair
        s1 = model.map_style(z1, batch.y_trg)
        s2 = model.map_style(z2, batch.y_trg)
    return s1, s2


def _check_finite(total: torch.Tensor, side: str, step_index: int, batch: Batch, terms) -> None:
    if bool(torch.isfinite(total)):
        return
    diagnostics = {
        "side": side,
        "step_index": step_index,
        "total": float(total.detach()),
        "terms": {k: float(torch.as_tensor(v).detach()) for k, v in terms.items()},
        "batch": batch.stats(),
    }
    raise NonFiniteLossError(
        f"non-finite {side} loss at step {step_index}: {float(total.detach())}", diagnostics
    )


def discriminator_loss_terms(
    model: VCModel,
    batch: Batch,
    cfg: TrainConfig,
    step_index: int,
    z_source: torch.Generator | None = None,
) -> dict[str, torch.Tensor]:
    """Discriminator-side terms; ``adv`` is the adversarial game value.

    The objective recomputation negates ``adv``, so minimizing the
    returned objective drives the real/fake classifier the right way.
    The converted sample is built without gradient flow to the generator
    side, and the source-domain classifier is scored on the converted
    sample against the *source* domain label.
    """
    with torch.no_grad():
        s_trg, _ = _styles_for_step(model, batch, cfg, step_index, z_source)
        fake = model.generate(batch.src_mel, batch.src_f0, s_trg)

    real_logit = model.discriminate(batch.src_mel, batch.y_src)
    fake_logit = model.discriminate(fake, batch.y_trg)
    adv_min = adversarial_losses(real_logit, fake_logit, side="discriminator")
    aspk = speaker_adv_loss(
        model.classify_speaker(fake), batch.y_src, phase="discriminator_classifies_src"
    )
    return {"adv": -adv_min, "aspk": aspk}


def train_discriminator_step(
    model: VCModel,
    batch: Batch,
    cfg: TrainConfig,
    optimizer: torch.optim.Optimizer,
    step_index: int,
    z_source: torch.Generator | None = None,
) -> LossReport:
    """One classifier update; generator-side parameters stay bit-equal."""
    terms = discriminator_loss_terms(model, batch, cfg, step_index, z_source)
    total = discriminator_objective(terms["adv"], terms["aspk"], cfg.weights)
    _check_finite(total, "discriminator", step_index, batch, terms)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return report_from_terms("discriminator", terms, total)


def generator_loss_terms(
    model: VCModel,
    batch: Batch,
    cfg: TrainConfig,
    step_index: int,
    *,
    emotion_extractor=None,
    content_features=None,
    pitch_proxy: MelCentroidPitch | None = None,
    z_source: torch.Generator | None = None,
    z_pair: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> dict[str, torch.Tensor]:
    """All ten generator-side loss terms for one batch.

    The emotion term is evaluated only when its weight is positive, so a
    run without an emotion extractor never touches one.  The training
    F0 term compares the differentiable mel-domain pitch proxy of source
    and converted mels, since converted audio exists only as a mel here.
    """
    weights = cfg.weights
    content_features = content_features or IdentityContentFeatures()

    s_trg, s_trg2 = _styles_for_step(model, batch, cfg, step_index, z_source, z_pair)
    fake = model.generate(batch.src_mel, batch.src_f0, s_trg)
    fake2 = model.generate(batch.src_mel, batch.src_f0, s_trg2)

    terms: dict[str, torch.Tensor] = {}
    terms["adv"] = adversarial_losses(
        None, model.discriminate(fake, batch.y_trg), side="generator"
    )
    terms["spk"] = speaker_adv_loss(
        model.classify_speaker(fake), batch.y_trg, phase="generator_targets_trg"
    )
    terms["style"] = style_reconstruction_loss(
        s_trg, model.style_encode(fake, batch.y_trg), s_trg2, mode=cfg.style_loss_mode
    )
    terms["div"] = diversity_loss(fake, fake2)
    terms["asr"] = asr_loss(content_features(fake), content_features(batch.src_mel))
    terms["norm"] = norm_loss(batch.src_mel, fake)

    s_src = model.style_encode(batch.src_mel, batch.y_src)
    cycled = model.generate(fake, batch.src_f0, s_src)
    terms["cycle"] = cycle_loss(batch.src_mel, cycled)

    if pitch_proxy is not None:
        terms["f0"] = (pitch_proxy(fake) - pitch_proxy(batch.src_mel)).abs().mean()
    else:
        terms["f0"] = torch.zeros(())

    if weights.demo > 0:
        if emotion_extractor is None:
            raise TrainerError(
                "the emotion term has positive weight but no emotion-embedding "
                "extractor was provided"
            )
        with torch.no_grad():
            emb_src = emotion_extractor.embed(batch.src_mel)
        terms["demo"] = demo_loss(emb_src, emotion_extractor.embed(fake))
    else:
        terms["demo"] = torch.zeros(())

    terms["inv"] = inv_loss(model.encode(batch.src_mel), model.encode(fake))
    return terms


def train_generator_step(
    model: VCModel,
    batch: Batch,
    cfg: TrainConfig,
    optimizer: torch.optim.Optimizer,
    step_index: int,
    **adapters,
) -> LossReport:
    """One joint update of generator, style encoder, and mapping network."""
    terms = generator_loss_terms(model, batch, cfg, step_index, **adapters)
    total = generator_objective(terms, cfg.weights)
    _check_finite(total, "generator", step_index, batch, terms)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return report_from_terms("generator", terms, total)


def probe_report(
    model: VCModel, batch: Batch, cfg: TrainConfig, step_index: int = 0, **adapters
) -> LossReport:
    """Generator LossReport on a fixed batch without any parameter update."""
    with torch.no_grad():
        terms = generator_loss_terms(model, batch, cfg, step_index, **adapters)
        total = generator_objective(terms, cfg.weights)
    return report_from_terms("generator", terms, total)


# --------------------------------------------------------------------------
# training session and run loop


@dataclass
class CheckpointSet:
    """Artifacts of one training run."""

    final: Path
    periodic: list[Path]
    log_path: Path


class TrainingSession:
    """Owns the model, both optimizers, and every random stream.

    Checkpoints capture all of them, so a resumed session reproduces the
    exact step sequence an uninterrupted run would have taken.
    """

    def __init__(
        self,
        records: list[UtteranceRecord],
        cfg: TrainConfig,
        mel_cfg: MelConfig | None = None,
        arch: ArchConfig | None = None,
        emotion_extractor=None,
        content_features=None,
        feature_store: FeatureStore | None = None,
    ):
        self.records = records
        self.cfg = cfg
        self.mel_cfg = mel_cfg or MelConfig()
        torch.manual_seed(cfg.seed)

        if cfg.domain_kind == "emotion":
            labels = list(EMOTION_CLASSES)
        else:
            labels = speaker_labels(records)
        self.arch = arch or ArchConfig(
            n_mels=self.mel_cfg.n_mels,
            num_domains=len(labels),
            domain_kind=cfg.domain_kind,
            domain_labels=tuple(labels),
            base_channels=cfg.base_channels,
            disc_channels=cfg.disc_channels,
            map_hidden=cfg.map_hidden,
        )
        self.model = VCModel(self.arch)
        self.opt_g = AdamW(
            list(self.model.generator_side_parameters()),
            lr=cfg.learning_rate,
            betas=cfg.betas,
            weight_decay=cfg.weight_decay,
        )
        self.opt_d = AdamW(
            list(self.model.discriminator_side_parameters()),
            lr=cfg.learning_rate,
            betas=cfg.betas,
            weight_decay=cfg.weight_decay,
        )
        self.sampler = TupleSampler(records, cfg.seed, kind=cfg.domain_kind)
        self.z_source = torch.Generator().manual_seed(cfg.seed + 1)
        self.store = feature_store or FeatureStore(self.mel_cfg)
        self.pitch_proxy = MelCentroidPitch(self.mel_cfg)
        self.content_features = content_features or IdentityContentFeatures()
        self._emotion_extractor = emotion_extractor
        self.step_index = 0

    def emotion_extractor(self):
        """Extractor handle, loaded lazily and only when the term is active."""
        if self.cfg.weights.demo <= 0:
            return None
        if self._emotion_extractor is None:
            if not self.cfg.emotion_extractor:
                raise TrainerError(
                    "weights.demo > 0 requires an emotion_extractor checkpoint path"
                )
            from .emotion_embedder import load_extractor

            self._emotion_extractor = load_extractor(self.cfg.emotion_extractor)
        return self._emotion_extractor

    def next_batch(self) -> Batch:
        tuples = [self.sampler.sample() for _ in range(self.cfg.batch_size)]
        return assemble_batch(
            tuples, self.store, self.cfg.train_frames, self.sampler.rng, self.cfg.domain_kind
        )

    def step(self) -> tuple[LossReport, LossReport]:
        """One discriminator update then one generator update on a fresh batch."""
        batch = self.next_batch()
        d_report = train_discriminator_step(
            self.model, batch, self.cfg, self.opt_d, self.step_index, self.z_source
        )
        g_report = train_generator_step(
            self.model,
            batch,
            self.cfg,
            self.opt_g,
            self.step_index,
            emotion_extractor=self.emotion_extractor(),
            content_features=self.content_features,
            pitch_proxy=self.pitch_proxy,
            z_source=self.z_source,
        )
        self.step_index += 1
        return d_report, g_report

    def save(self, path: str | Path) -> Path:
        extra = {
            "step_index": self.step_index,
            "train_config": config_to_dict(self.cfg),
            "optimizer_g": self.opt_g.state_dict(),
            "optimizer_d": self.opt_d.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "z_rng": self.z_source.get_state(),
            "sampler_rng": json.dumps(self.sampler.rng.bit_generator.state),
        }
        return save_checkpoint(path, self.model, self.mel_cfg, self.cfg.weights, extra)

    @classmethod
    def resume(
        cls,
        path: str | Path,
        records: list[UtteranceRecord],
        cfg: TrainConfig | None = None,
        **kwargs,
    ) -> "TrainingSession":
        model, mel_cfg, _, extra = model_from_checkpoint(path)
        if not extra or "train_config" not in extra:
            raise TrainerError(f"checkpoint {path} lacks a training state record")
        if cfg is None:
            cfg = config_from_dict(extra["train_config"])
        session = cls(records, cfg, mel_cfg=mel_cfg, arch=model.arch, **kwargs)
        session.model.load_state_dict(model.state_dict(), strict=True)
        session.opt_g.load_state_dict(extra["optimizer_g"])
        session.opt_d.load_state_dict(extra["optimizer_d"])
        torch.set_rng_state(extra["torch_rng"].to(torch.uint8))
        session.z_source.set_state(extra["z_rng"].to(torch.uint8))
        session.sampler.rng.bit_generator.state = json.loads(extra["sampler_rng"])
        session.step_index = int(extra["step_index"])
        return session


def _load_records(manifest: str | Path | list[UtteranceRecord]) -> list[UtteranceRecord]:
    if isinstance(manifest, (str, Path)):
        records = parse_manifest(manifest)
        assignments = Path(str(manifest) + ".splits.json")
        if assignments.is_file():
            records = apply_split_assignments(records, assignments)
        return records
    return manifest


def run_training(
    manifest: str | Path | list[UtteranceRecord],
    cfg: TrainConfig,
    out_dir: str | Path,
    mel_cfg: MelConfig | None = None,
    resume_from: str | Path | None = None,
    **session_kwargs,
) -> CheckpointSet:
    """Train to completion, writing checkpoints and a JSONL loss log.

    A sibling ``<manifest>.splits.json`` is honored when present, so
    validation and test utterances never enter the sampling pool.  A
    streak of more than 10 consecutive non-finite steps aborts with a
    diagnostic dump; isolated non-finite steps are skipped (parameters
    are untouched by a failed step).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = _load_records(manifest)

    if resume_from is not None:
        session = TrainingSession.resume(resume_from, records, cfg, **session_kwargs)
    else:
        session = TrainingSession(records, cfg, mel_cfg=mel_cfg, **session_kwargs)

    pool = sum(1 for rec in records if rec.split in (None, "train"))
    steps_per_epoch = cfg.steps_per_epoch or max(1, math.ceil(pool / cfg.batch_size))
    total_steps = cfg.max_steps or cfg.epochs * steps_per_epoch

    log_path = out / "loss_log.jsonl"
    periodic: list[Path] = []
    streak = 0
    with log_path.open("a", encoding="utf-8") as log:
        while session.step_index < total_steps:
            step = session.step_index
            try:
                d_report, g_report = session.step()
            except NonFiniteLossError as exc:
                streak += 1
                logger.warning("step %d: %s (streak %d)", step, exc, streak)
                if streak > 10:
                    dump = out / "nonfinite_dump.json"
                    dump.write_text(json.dumps(exc.diagnostics, indent=2) + "\n")
                    raise TrainerError(
                        f"aborted after {streak} consecutive non-finite steps; "
                        f"diagnostics in {dump}"
                    ) from exc
                session.step_index += 1  # skip this batch, keep the schedule moving
                continue
            streak = 0

            if cfg.log_every and (step % cfg.log_every == 0 or step == total_steps - 1):
                log.write(
                    json.dumps(
                        {
                            "step": step,
                            "discriminator": {**d_report.terms, "total": d_report.total},
                            "generator": {**g_report.terms, "total": g_report.total},
                        }
                    )
                    + "\n"
                )
                log.flush()
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                periodic.append(session.save(out / f"ckpt_step{step + 1:06d}.pt"))

    final = session.save(out / "final.pt")
    return CheckpointSet(final=final, periodic=periodic, log_path=log_path)
