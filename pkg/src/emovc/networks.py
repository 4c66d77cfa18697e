"""Conversion networks: generator (encoder + decoder), style encoder,
mapping network, and the two adversarial classifiers.

Mels move through the public API as ``[batch, frames, n_mels]`` tensors;
internally they are treated as single-channel images ``[B, 1, mels,
frames]``.  Channel widths are config-driven and default to a desk-scale
size that trains on a CPU; the 512-wide style trunk and 64-wide style
embeddings are fixed points of the design.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio_frontend import MelConfig
from .losses import LossWeights

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Version or shape mismatch while loading a checkpoint."""


@dataclass(frozen=True)
class ArchConfig:
    """Architecture descriptor, serialized into every checkpoint."""

    n_mels: int = 80
    num_domains: int = 2
    domain_kind: str = "speaker"  # "speaker" | "emotion"
    domain_labels: tuple[str, ...] = ()
    base_channels: int = 32
    style_dim: int = 64
    latent_dim: int = 16
    trunk_dim: int = 512
    map_hidden: int = 128
    disc_channels: int = 16
    min_frames: int = 8

    def __post_init__(self):
        if self.num_domains < 1:
            raise ValueError("num_domains must be positive")
        if self.domain_labels and len(self.domain_labels) != self.num_domains:
            raise ValueError("domain_labels length must match num_domains")


def _to_image(mel: torch.Tensor) -> torch.Tensor:
    # [B, T, M] -> [B, 1, M, T]
    return mel.transpose(1, 2).unsqueeze(1)


def _from_image(img: torch.Tensor) -> torch.Tensor:
    return img.squeeze(1).transpose(1, 2)


class ResBlk(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, downsample: bool = False):
        super().__init__()
        self.downsample = downsample
        self.norm1 = nn.InstanceNorm2d(in_ch, affine=True)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.InstanceNorm2d(out_ch, affine=True)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1, bias=False) if in_ch != out_ch else None

    def _shortcut(self, x):
        if self.skip is not None:
            x = self.skip(x)
        if self.downsample:
            x = F.avg_pool2d(x, 2, ceil_mode=True)
        return x

    def forward(self, x):
        h = self.conv1(F.leaky_relu(self.norm1(x), 0.2))
        if self.downsample:
            h = F.avg_pool2d(h, 2, ceil_mode=True)
        h = self.conv2(F.leaky_relu(self.norm2(h), 0.2))
        return (h + self._shortcut(x)) / math.sqrt(2.0)


class AdaIN(nn.Module):
    """Instance norm with per-channel affine predicted from the style."""

    def __init__(self, style_dim: int, ch: int):
        super().__init__()
        self.fc = nn.Linear(style_dim, 2 * ch)

    def forward(self, x, style):
        gamma, beta = self.fc(style).chunk(2, dim=-1)
        gamma = gamma.unsqueeze(-1).unsqueeze(-1)
        beta = beta.unsqueeze(-1).unsqueeze(-1)
        return (1.0 + gamma) * F.instance_norm(x) + beta


class AdainResBlk(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, style_dim: int, upsample: bool = False):
        super().__init__()
        self.upsample = upsample
        self.norm1 = AdaIN(style_dim, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = AdaIN(style_dim, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1, bias=False) if in_ch != out_ch else None

    def _maybe_up(self, x):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        return x

    def forward(self, x, style):
        h = self._maybe_up(F.leaky_relu(self.norm1(x, style), 0.2))
        h = self.conv1(h)
        h = self.conv2(F.leaky_relu(self.norm2(h, style), 0.2))
        s = self._maybe_up(x)
        if self.skip is not None:
            s = self.skip(s)
        return (h + s) / math.sqrt(2.0)


class Generator(nn.Module):
    """Encoder-decoder conversion network.

    The encoder halves both axes twice (ceil); the decoder mirrors that
    with style-conditioned blocks and resizes to the exact input shape,
    so any frame count from ``min_frames`` up works unmodified.  The
    source F0 contour joins the latent as an extra channel at the reduced
    temporal resolution.
    """

    DOWNSAMPLE_FACTOR = 4

    def __init__(self, arch: ArchConfig):
        super().__init__()
        c = arch.base_channels
        self.arch = arch
        self.stem = nn.Conv2d(1, c, 3, padding=1)
        self.down1 = ResBlk(c, 2 * c, downsample=True)
        self.down2 = ResBlk(2 * c, 4 * c, downsample=True)
        self.bottleneck_enc = ResBlk(4 * c, 4 * c)
        self.f0_fuse = nn.Conv2d(4 * c + 1, 4 * c, 1)
        self.bottleneck_dec = AdainResBlk(4 * c, 4 * c, arch.style_dim)
        self.up1 = AdainResBlk(4 * c, 2 * c, arch.style_dim, upsample=True)
        self.up2 = AdainResBlk(2 * c, c, arch.style_dim, upsample=True)
        self.head_norm = nn.InstanceNorm2d(c, affine=True)
        self.head = nn.Conv2d(c, 1, 1)

    def encode(self, mel: torch.Tensor) -> torch.Tensor:
        """[B, T, M] -> latent code [B, channels, ceil(T/4)].

        The frequency axis is folded into channels so the latent is a
        per-reduced-frame feature matrix.
        """
        h = self._encode_image(mel)
        b, ch, freq, t = h.shape
        return h.reshape(b, ch * freq, t)

    def _encode_image(self, mel: torch.Tensor) -> torch.Tensor:
        if mel.shape[-1] != self.arch.n_mels:
            raise ValueError(
                f"expected {self.arch.n_mels} mel bins, got {mel.shape[-1]}"
            )
        if mel.shape[1] < self.arch.min_frames:
            raise ValueError(
                f"frame count {mel.shape[1]} below the minimum {self.arch.min_frames}"
            )
        h = self.stem(_to_image(mel))
        h = self.down1(h)
        h = self.down2(h)
        return self.bottleneck_enc(h)

    def forward(self, mel: torch.Tensor, f0: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        """Convert ``mel`` [B, T, M] with source contour ``f0`` [B, T] and
        target style [B, style_dim]; output shape equals input shape."""
        if f0.shape[-1] != mel.shape[1]:
            raise ValueError(
                f"f0 frame count {f0.shape[-1]} != mel frame count {mel.shape[1]}"
            )
        b, t, m = mel.shape
        h = self._encode_image(mel)
        f0_lat = F.interpolate(
            f0.unsqueeze(1).to(h.dtype), size=h.shape[-1], mode="linear", align_corners=False
        )
        f0_map = f0_lat.unsqueeze(2).expand(b, 1, h.shape[2], h.shape[3])
        h = self.f0_fuse(torch.cat([h, f0_map], dim=1))
        h = self.bottleneck_dec(h, style)
        h = self.up1(h, style)
        h = self.up2(h, style)
        h = self.head(F.leaky_relu(self.head_norm(h), 0.2))
        h = F.interpolate(h, size=(m, t), mode="bilinear", align_corners=False)
        return _from_image(h)


class _ConvTrunk(nn.Module):
    """Shared downsampling conv stack pooled to a fixed-width vector."""

    def __init__(self, base: int, out_dim: int, blocks: int = 3):
        super().__init__()
        self.stem = nn.Conv2d(1, base, 3, padding=1)
        layers = []
        ch = base
        for _ in range(blocks):
            layers.append(ResBlk(ch, min(2 * ch, out_dim), downsample=True))
            ch = min(2 * ch, out_dim)
        self.blocks = nn.ModuleList(layers)
        self.proj = nn.Conv2d(ch, out_dim, 1)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        h = self.stem(_to_image(mel))
        for blk in self.blocks:
            h = blk(h)
        h = self.proj(F.leaky_relu(h, 0.2))
        return F.adaptive_avg_pool2d(h, 1).flatten(1)


def _gather_heads(heads: nn.ModuleList, shared: torch.Tensor, domain) -> torch.Tensor:
    idx = _domain_indices(domain, shared.shape[0], len(heads), shared.device)
    stacked = torch.stack([head(shared) for head in heads], dim=1)  # [B, D, width]
    return stacked.gather(
        1, idx.view(-1, 1, 1).expand(-1, 1, stacked.shape[-1])
    ).squeeze(1)


def _domain_indices(domain, batch: int, num_domains: int, device) -> torch.Tensor:
    from .data_ingest import DomainCode

    if isinstance(domain, DomainCode):
        idx = torch.full((batch,), domain.index, dtype=torch.long, device=device)
    elif isinstance(domain, int):
        idx = torch.full((batch,), domain, dtype=torch.long, device=device)
    else:
        idx = torch.as_tensor(domain, dtype=torch.long, device=device)
        if idx.dim() == 0:
            idx = idx.expand(batch)
    if idx.min() < 0 or idx.max() >= num_domains:
        raise ValueError(
            f"domain index out of range [0, {num_domains}): {idx.tolist()}"
        )
    return idx


class StyleEncoder(nn.Module):
    """Shared conv trunk (512-wide output) with one linear head per domain."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.trunk = _ConvTrunk(arch.base_channels, arch.trunk_dim)
        self.heads = nn.ModuleList(
            nn.Linear(arch.trunk_dim, arch.style_dim) for _ in range(arch.num_domains)
        )

    def shared(self, mel: torch.Tensor) -> torch.Tensor:
        """Trunk output, [B, trunk_dim]; the Stage-II classifier builds on this."""
        return self.trunk(mel)

    def forward(self, mel: torch.Tensor, domain) -> torch.Tensor:
        return _gather_heads(self.heads, self.shared(mel), domain)


class MappingNetwork(nn.Module):
    """Gaussian noise + domain code -> style embedding."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.shared_layers = nn.Sequential(
            nn.Linear(arch.latent_dim, arch.map_hidden),
            nn.ReLU(),
            nn.Linear(arch.map_hidden, arch.map_hidden),
            nn.ReLU(),
        )
        self.heads = nn.ModuleList(
            nn.Linear(arch.map_hidden, arch.style_dim) for _ in range(arch.num_domains)
        )

    def forward(self, z: torch.Tensor, domain) -> torch.Tensor:
        if z.dim() == 1:
            z = z.unsqueeze(0)
        if z.shape[-1] != self.arch.latent_dim:
            raise ValueError(f"latent width {z.shape[-1]} != {self.arch.latent_dim}")
        return _gather_heads(self.heads, self.shared_layers(z), domain)


class Discriminator(nn.Module):
    """Real/fake quality classifier conditioned on the domain code."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.trunk = _ConvTrunk(arch.disc_channels, 4 * arch.disc_channels, blocks=2)
        self.out = nn.Linear(4 * arch.disc_channels, arch.num_domains)

    def forward(self, mel: torch.Tensor, domain) -> torch.Tensor:
        logits = self.out(self.trunk(mel))  # [B, D]
        idx = _domain_indices(domain, mel.shape[0], self.arch.num_domains, mel.device)
        return logits.gather(1, idx.view(-1, 1)).squeeze(1)


class SpeakerClassifier(nn.Module):
    """Predicts the domain (speaker or emotion class) of a mel."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.trunk = _ConvTrunk(arch.disc_channels, 4 * arch.disc_channels, blocks=2)
        self.out = nn.Linear(4 * arch.disc_channels, arch.num_domains)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        return self.out(self.trunk(mel))


class VCModel(nn.Module):
    """All five parameter collections behind one handle."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.generator = Generator(arch)
        self.style_encoder = StyleEncoder(arch)
        self.mapping = MappingNetwork(arch)
        self.discriminator = Discriminator(arch)
        self.speaker_classifier = SpeakerClassifier(arch)

    # thin named wrappers matching the operation contracts
    def encode(self, mel):
        return self.generator.encode(mel)

    def generate(self, mel, f0, style):
        return self.generator(mel, f0, style)

    def style_encode(self, mel, domain):
        return self.style_encoder(mel, domain)

    def map_style(self, z, domain):
        return self.mapping(z, domain)

    def discriminate(self, mel, domain):
        return self.discriminator(mel, domain)

    def classify_speaker(self, mel):
        return self.speaker_classifier(mel)

    def generator_side_parameters(self):
        for module in (self.generator, self.style_encoder, self.mapping):
            yield from module.parameters()

    def discriminator_side_parameters(self):
        for module in (self.discriminator, self.speaker_classifier):
            yield from module.parameters()


def draw_latent(
    batch: int, arch: ArchConfig, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Standard-normal latent vectors [batch, latent_dim]."""
    return torch.randn(batch, arch.latent_dim, generator=generator)


# --------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(
    path: str | Path,
    model: VCModel,
    mel_cfg: MelConfig,
    weights: LossWeights,
    extra: dict | None = None,
) -> Path:
    """Versioned checkpoint: parameters + architecture + front-end config."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "arch": asdict(model.arch),
        "mel_config": asdict(mel_cfg),
        "loss_weights": asdict(weights),
        "state": model.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version!r} unsupported (expected {CHECKPOINT_VERSION})"
        )
    return payload


def model_from_checkpoint(path: str | Path) -> tuple[VCModel, MelConfig, LossWeights, dict]:
    """Rebuild the model; fails loudly on any shape mismatch."""
    payload = load_checkpoint(path)
    arch_dict = dict(payload["arch"])
    arch_dict["domain_labels"] = tuple(arch_dict.get("domain_labels", ()))
    arch = ArchConfig(**arch_dict)
    model = VCModel(arch)
    try:
        model.load_state_dict(payload["state"], strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"parameter shape mismatch in {path}: {exc}") from exc
    mel_cfg = MelConfig(**payload["mel_config"])
    weights = LossWeights(**payload["loss_weights"])
    return model, mel_cfg, weights, payload.get("extra", {})
