"""Waveform ingestion, log-mel spectrograms, and F0 contours.

Every model input and output flows through this module.  All utterances
are resampled to 24 kHz on load; mel and F0 extraction share one framing
so their frame counts always agree.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.signal import resample_poly

from . import flac_reader

TARGET_SAMPLE_RATE = 24000


class AudioReadError(RuntimeError):
    """Unreadable, empty, or unsupported audio input."""


class FrontendError(ValueError):
    """Invalid argument to a front-end transform."""


@dataclass
class Waveform:
    samples: np.ndarray  # float64, mono
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    """Front-end parameters; serialized into every checkpoint."""

    sample_rate: int = TARGET_SAMPLE_RATE
    n_mels: int = 80
    win_length: int = 1200
    hop_length: int = 300
    fmin: float = 0.0
    fmax: float | None = None  # defaults to Nyquist
    eps: float = 1e-5
    f0_floor: float = 60.0
    f0_ceil: float = 600.0
    voicing_threshold: float = 0.15


@dataclass
class MelSpectrogram:
    values: np.ndarray  # [frames, n_mels], log-amplitude
    frame_hop: int
    n_mels: int

    @property
    def frames(self) -> int:
        return self.values.shape[0]


@dataclass
class F0Contour:
    hz: np.ndarray  # per-frame fundamental in Hz, 0 where unvoiced
    voiced: np.ndarray  # bool per frame

    def __post_init__(self):
        if len(self.hz) != len(self.voiced):
            raise FrontendError("hz and voiced lengths differ")


class Vocoder(Protocol):
    """Adapter contract for mel-to-waveform synthesis (none bundled)."""

    def synthesize(self, mel: MelSpectrogram) -> Waveform: ...


# --------------------------------------------------------------------------
# loading


def _read_wav(path: Path) -> tuple[np.ndarray, int]:
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            sampwidth = wf.getsampwidth()
            rate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except (wave.Error, EOFError, OSError) as exc:
        raise AudioReadError(f"cannot read WAV {path}: {exc}") from exc

    if sampwidth == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif sampwidth == 3:
        as_bytes = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3)
        ints = (
            as_bytes[:, 0].astype(np.int32)
            | (as_bytes[:, 1].astype(np.int32) << 8)
            | (as_bytes[:, 2].astype(np.int32) << 16)
        )
        ints = (ints << 8) >> 8  # sign-extend 24 -> 32 bits
        data = ints.astype(np.float64) / 8388608.0
    else:
        raise AudioReadError(
            f"{path}: unsupported WAV sample width {sampwidth * 8} bits "
            "(expected 16- or 24-bit PCM)"
        )
    if n_channels > 1:
        data = data.reshape(-1, n_channels).mean(axis=1)
    return data, rate


def _read_flac(path: Path) -> tuple[np.ndarray, int]:
    try:
        samples, rate, bits = flac_reader.decode_file(path)
    except flac_reader.FlacError as exc:
        raise AudioReadError(f"cannot read FLAC {path}: {exc}") from exc
    data = samples.astype(np.float64) / float(1 << (bits - 1))
    if data.ndim == 2 and data.shape[1] > 1:
        data = data.mean(axis=1)
    else:
        data = data.reshape(-1)
    return data, rate


def load_and_resample(path: str | Path) -> Waveform:
    """Load WAV (PCM 16/24-bit) or FLAC, downmix to mono, resample to 24 kHz."""
    path = Path(path)
    if not path.is_file():
        raise AudioReadError(f"audio file not found: {path}")
    magic = path.open("rb").read(4)
    if magic == b"RIFF":
        data, rate = _read_wav(path)
    elif magic == b"fLaC":
        data, rate = _read_flac(path)
    else:
        raise AudioReadError(f"{path}: unrecognized audio container")

    if len(data) == 0:
        raise AudioReadError(f"{path}: zero-length audio")
    if rate != TARGET_SAMPLE_RATE:
        ratio = Fraction(TARGET_SAMPLE_RATE, rate)
        data = resample_poly(data, ratio.numerator, ratio.denominator)
    if not np.all(np.isfinite(data)):
        raise AudioReadError(f"{path}: non-finite samples after load")
    return Waveform(samples=np.asarray(data, dtype=np.float64), sample_rate=TARGET_SAMPLE_RATE)


def write_wav(path: str | Path, w: Waveform, sampwidth: int = 2) -> None:
    """Write a mono PCM WAV (16- or 24-bit); the inverse of the reader."""
    clipped = np.clip(w.samples, -1.0, 1.0 - 1e-9)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(sampwidth)
        wf.setframerate(w.sample_rate)
        if sampwidth == 2:
            wf.writeframes((clipped * 32768.0).astype("<i2").tobytes())
        elif sampwidth == 3:
            ints = (clipped * 8388608.0).astype(np.int32)
            frames = b"".join(struct.pack("<i", v)[:3] for v in ints)
            wf.writeframes(frames)
        else:
            raise FrontendError("sampwidth must be 2 or 3 bytes")


# --------------------------------------------------------------------------
# framing shared by mel and F0 extraction


def frame_count(n_samples: int, cfg: MelConfig) -> int:
    if n_samples < cfg.win_length:
        raise FrontendError(
            f"waveform of {n_samples} samples is shorter than one window "
            f"({cfg.win_length})"
        )
    return int(np.ceil((n_samples - cfg.win_length) / cfg.hop_length)) + 1


def _frame_signal(x: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """[n_frames, win_length] view with the tail reflection-padded."""
    n_frames = frame_count(len(x), cfg)
    covered = (n_frames - 1) * cfg.hop_length + cfg.win_length
    pad = covered - len(x)
    if pad > 0:
        x = np.concatenate([x, x[-2 : -2 - pad : -1]])
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop_length * np.arange(n_frames)[:, None]
    return x[idx]


# --------------------------------------------------------------------------
# mel spectrogram


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular mel filters, [n_mels, n_fft//2 + 1], unit peak."""
    fmax = cfg.fmax if cfg.fmax is not None else cfg.sample_rate / 2.0
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_hz = np.fft.rfftfreq(cfg.win_length, 1.0 / cfg.sample_rate)
    fb = np.zeros((cfg.n_mels, len(bin_hz)))
    for m in range(cfg.n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (bin_hz - lo) / (ctr - lo)
        falling = (hi - bin_hz) / (hi - ctr)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def mel_filter_centers(cfg: MelConfig) -> np.ndarray:
    """Center frequency (Hz) of each mel filter."""
    fmax = cfg.fmax if cfg.fmax is not None else cfg.sample_rate / 2.0
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2)
    return mel_to_hz(mel_pts)[1:-1]


def mel_spectrogram(w: Waveform, cfg: MelConfig) -> MelSpectrogram:
    """Log-mel energies, ``log(mel_power + eps)``, frames x n_mels."""
    if w.sample_rate != cfg.sample_rate:
        raise FrontendError(
            f"waveform rate {w.sample_rate} != config rate {cfg.sample_rate}"
        )
    frames = _frame_signal(w.samples, cfg)
    window = np.hanning(cfg.win_length)
    power = np.abs(np.fft.rfft(frames * window, cfg.win_length, axis=1)) ** 2
    mel_power = power @ mel_filterbank(cfg).T
    values = np.log(mel_power + cfg.eps)
    return MelSpectrogram(values=values, frame_hop=cfg.hop_length, n_mels=cfg.n_mels)


# --------------------------------------------------------------------------
# F0 extraction (YIN-style)

_SILENCE_RMS = 1e-4
_FALLBACK_CLARITY = 0.3


def extract_f0(w: Waveform, cfg: MelConfig | None = None) -> F0Contour:
    """Per-frame F0 via the cumulative-mean-normalized difference function.

    Framing matches :func:`mel_spectrogram` exactly, one F0 value per mel
    frame.  Silence and aperiodic frames come back unvoiced with hz == 0.
    """
    cfg = cfg or MelConfig()
    if w.sample_rate != cfg.sample_rate:
        raise FrontendError(
            f"waveform rate {w.sample_rate} != config rate {cfg.sample_rate}"
        )
    frames = _frame_signal(w.samples, cfg)
    n_frames, win = frames.shape
    sr = cfg.sample_rate
    tau_min = max(2, int(sr / cfg.f0_ceil))
    tau_max = min(int(np.ceil(sr / cfg.f0_floor)), win - 2)

    # difference function d(tau) for all frames via FFT autocorrelation
    nfft = 1 << int(np.ceil(np.log2(2 * win)))
    spec = np.fft.rfft(frames, nfft, axis=1)
    ac = np.fft.irfft(spec * np.conj(spec), nfft, axis=1)[:, : tau_max + 2]
    csum = np.cumsum(frames**2, axis=1)
    total = csum[:, -1]
    taus = np.arange(tau_max + 2)
    energy_head = csum[:, win - 1 - taus]
    energy_tail = total[:, None] - np.where(taus > 0, csum[:, np.maximum(taus - 1, 0)], 0.0)
    diff = energy_head + energy_tail - 2.0 * ac
    diff[:, 0] = 0.0

    cum = np.cumsum(diff[:, 1:], axis=1)
    cmndf = np.ones_like(diff)
    cmndf[:, 1:] = diff[:, 1:] * np.arange(1, tau_max + 2) / np.maximum(cum, 1e-12)

    rms = np.sqrt(np.mean(frames**2, axis=1))
    hz = np.zeros(n_frames)
    voiced = np.zeros(n_frames, dtype=bool)
    for i in range(n_frames):
        if rms[i] < _SILENCE_RMS:
            continue
        c = cmndf[i]
        tau = 0
        for t in range(tau_min, tau_max + 1):
            if c[t] < cfg.voicing_threshold:
                while t + 1 <= tau_max and c[t + 1] < c[t]:
                    t += 1
                tau = t
                break
        if tau == 0:
            t = int(np.argmin(c[tau_min : tau_max + 1])) + tau_min
            if c[t] < _FALLBACK_CLARITY:
                tau = t
        if tau == 0:
            continue
        # parabolic refinement on the raw difference function
        left, mid, right = diff[i, tau - 1], diff[i, tau], diff[i, tau + 1]
        denom = left - 2.0 * mid + right
        delta = 0.5 * (left - right) / denom if abs(denom) > 1e-12 else 0.0
        delta = float(np.clip(delta, -1.0, 1.0))
        hz[i] = sr / (tau + delta)
        voiced[i] = True
    return F0Contour(hz=hz, voiced=voiced)


def normalize_f0(c: F0Contour) -> np.ndarray:
    """Voiced frames divided by their mean; unvoiced map to 0.

    Invariant under multiplicative scaling of the voiced values, so the
    result compares intonation shapes across speakers.
    """
    out = np.zeros(len(c.hz), dtype=np.float64)
    mask = np.asarray(c.voiced) > 0.5
    if not np.any(mask):
        return out
    mean = float(np.mean(c.hz[mask]))
    if mean <= 0.0:
        return out
    out[mask] = c.hz[mask] / mean
    return out
