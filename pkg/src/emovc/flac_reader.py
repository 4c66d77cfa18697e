"""Minimal pure-Python FLAC decoder.

No codec library is assumed; this reads the native FLAC container well
enough for dataset ingestion: constant, verbatim, fixed, and LPC
subframes, rice-coded residuals with escape partitions, wasted bits, and
all four stereo decorrelation modes, at 8/16/24-bit depths.  Frame CRCs
are consumed but not verified.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class FlacError(RuntimeError):
    """Malformed or unsupported FLAC stream."""


class _BitReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0  # bit offset

    def read_uint(self, n: int) -> int:
        end = self.pos + n
        if end > len(self.data) * 8:
            raise FlacError("unexpected end of stream")
        value = 0
        pos = self.pos
        while n > 0:
            byte = self.data[pos >> 3]
            bit_off = pos & 7
            avail = 8 - bit_off
            take = min(avail, n)
            chunk = (byte >> (avail - take)) & ((1 << take) - 1)
            value = (value << take) | chunk
            pos += take
            n -= take
        self.pos = pos
        return value

    def read_signed(self, n: int) -> int:
        v = self.read_uint(n)
        if v >= 1 << (n - 1):
            v -= 1 << n
        return v

    def read_unary(self) -> int:
        count = 0
        while self.read_uint(1) == 0:
            count += 1
        return count

    def read_rice(self, param: int) -> int:
        quotient = self.read_unary()
        remainder = self.read_uint(param) if param > 0 else 0
        value = (quotient << param) | remainder
        return (value >> 1) ^ -(value & 1)  # zigzag

    def align_to_byte(self) -> None:
        self.pos = (self.pos + 7) & ~7

    def skip_bytes(self, n: int) -> None:
        self.align_to_byte()
        self.pos += 8 * n


_FIXED_COEFS = {
    0: [],
    1: [1],
    2: [2, -1],
    3: [3, -3, 1],
    4: [4, -6, 4, -1],
}

_SAMPLE_RATES = {
    1: 88200, 2: 176400, 3: 192000, 4: 8000, 5: 16000, 6: 22050,
    7: 24000, 8: 32000, 9: 44100, 10: 48000, 11: 96000,
}

_SAMPLE_SIZES = {1: 8, 2: 12, 4: 16, 5: 20, 6: 24, 7: 32}


def _read_utf8_number(br: _BitReader) -> int:
    first = br.read_uint(8)
    if first < 0x80:
        return first
    n_ones = 0
    mask = 0x80
    while first & mask:
        n_ones += 1
        mask >>= 1
    if n_ones < 2 or n_ones > 7:
        raise FlacError("bad UTF-8 coded number in frame header")
    value = first & (0x7F >> n_ones)
    for _ in range(n_ones - 1):
        cont = br.read_uint(8)
        if cont & 0xC0 != 0x80:
            raise FlacError("bad UTF-8 continuation in frame header")
        value = (value << 6) | (cont & 0x3F)
    return value


def _decode_residual(br: _BitReader, block_size: int, order: int) -> list[int]:
    method = br.read_uint(2)
    if method > 1:
        raise FlacError(f"reserved residual coding method {method}")
    param_bits = 4 if method == 0 else 5
    escape = (1 << param_bits) - 1
    partition_order = br.read_uint(4)
    n_partitions = 1 << partition_order
    if block_size % n_partitions != 0:
        raise FlacError("block size not divisible by partition count")
    residual: list[int] = []
    for part in range(n_partitions):
        count = block_size // n_partitions
        if part == 0:
            count -= order
        param = br.read_uint(param_bits)
        if param == escape:
            raw_bits = br.read_uint(5)
            if raw_bits == 0:
                residual.extend([0] * count)
            else:
                residual.extend(br.read_signed(raw_bits) for _ in range(count))
        else:
            residual.extend(br.read_rice(param) for _ in range(count))
    return residual


def _decode_subframe(br: _BitReader, block_size: int, bps: int) -> np.ndarray:
    if br.read_uint(1) != 0:
        raise FlacError("subframe padding bit set")
    sf_type = br.read_uint(6)
    wasted = 0
    if br.read_uint(1) == 1:
        wasted = br.read_unary() + 1
    bps -= wasted

    if sf_type == 0:  # constant
        value = br.read_signed(bps)
        samples = [value] * block_size
    elif sf_type == 1:  # verbatim
        samples = [br.read_signed(bps) for _ in range(block_size)]
    elif 8 <= sf_type <= 12:  # fixed predictor
        order = sf_type - 8
        samples = [br.read_signed(bps) for _ in range(order)]
        residual = _decode_residual(br, block_size, order)
        coefs = _FIXED_COEFS[order]
        for res in residual:
            pred = sum(c * samples[-1 - j] for j, c in enumerate(coefs))
            samples.append(res + pred)
    elif sf_type >= 32:  # LPC
        order = (sf_type & 31) + 1
        samples = [br.read_signed(bps) for _ in range(order)]
        precision = br.read_uint(4)
        if precision == 15:
            raise FlacError("invalid LPC coefficient precision")
        precision += 1
        shift = br.read_signed(5)
        if shift < 0:
            raise FlacError("negative LPC shift")
        coefs = [br.read_signed(precision) for _ in range(order)]
        for res in _decode_residual(br, block_size, order):
            pred = sum(c * samples[-1 - j] for j, c in enumerate(coefs)) >> shift
            samples.append(res + pred)
    else:
        raise FlacError(f"reserved subframe type {sf_type}")

    out = np.asarray(samples, dtype=np.int64)
    if wasted:
        out <<= wasted
    return out


def _decode_frame(
    br: _BitReader, stream_rate: int, stream_bps: int
) -> tuple[np.ndarray, int]:
    sync = br.read_uint(14)
    if sync != 0b11111111111110:
        raise FlacError("lost frame sync")
    if br.read_uint(1) != 0:
        raise FlacError("reserved bit set in frame header")
    br.read_uint(1)  # blocking strategy
    bs_code = br.read_uint(4)
    sr_code = br.read_uint(4)
    ch_code = br.read_uint(4)
    ss_code = br.read_uint(3)
    if br.read_uint(1) != 0:
        raise FlacError("reserved bit set in frame header")
    _read_utf8_number(br)

    if bs_code == 0:
        raise FlacError("reserved block size code")
    elif bs_code == 1:
        block_size = 192
    elif bs_code <= 5:
        block_size = 576 << (bs_code - 2)
    elif bs_code == 6:
        block_size = br.read_uint(8) + 1
    elif bs_code == 7:
        block_size = br.read_uint(16) + 1
    else:
        block_size = 256 << (bs_code - 8)

    if sr_code == 0:
        pass
    elif sr_code in _SAMPLE_RATES:
        pass  # informational; STREAMINFO is authoritative
    elif sr_code == 12:
        br.read_uint(8)
    elif sr_code in (13, 14):
        br.read_uint(16)
    else:
        raise FlacError("invalid sample rate code")

    bps = stream_bps if ss_code == 0 else _SAMPLE_SIZES.get(ss_code)
    if bps is None:
        raise FlacError(f"reserved sample size code {ss_code}")

    br.read_uint(8)  # header CRC-8, unchecked

    if ch_code <= 7:
        channels = [
            _decode_subframe(br, block_size, bps) for _ in range(ch_code + 1)
        ]
        frame = np.stack(channels, axis=1)
    elif ch_code == 8:  # left/side
        left = _decode_subframe(br, block_size, bps)
        side = _decode_subframe(br, block_size, bps + 1)
        frame = np.stack([left, left - side], axis=1)
    elif ch_code == 9:  # right/side
        side = _decode_subframe(br, block_size, bps + 1)
        right = _decode_subframe(br, block_size, bps)
        frame = np.stack([right + side, right], axis=1)
    elif ch_code == 10:  # mid/side
        mid = _decode_subframe(br, block_size, bps)
        side = _decode_subframe(br, block_size, bps + 1)
        mid = (mid << 1) | (side & 1)
        frame = np.stack([(mid + side) >> 1, (mid - side) >> 1], axis=1)
    else:
        raise FlacError(f"reserved channel assignment {ch_code}")

    br.align_to_byte()
    br.read_uint(16)  # frame CRC-16, unchecked
    return frame, block_size


def decode_bytes(data: bytes) -> tuple[np.ndarray, int, int]:
    """Decode a FLAC stream to (samples [n, channels] int64, rate, bits)."""
    if data[:4] != b"fLaC":
        raise FlacError("missing fLaC stream marker")
    br = _BitReader(data)
    br.pos = 32

    sample_rate = channels = bps = total = None
    last = False
    while not last:
        last = br.read_uint(1) == 1
        block_type = br.read_uint(7)
        length = br.read_uint(24)
        if block_type == 0:  # STREAMINFO
            br.read_uint(16)  # min block
            br.read_uint(16)  # max block
            br.read_uint(24)  # min frame
            br.read_uint(24)  # max frame
            sample_rate = br.read_uint(20)
            channels = br.read_uint(3) + 1
            bps = br.read_uint(5) + 1
            total = br.read_uint(36)
            br.skip_bytes(16)  # md5
        else:
            br.skip_bytes(length)
    if sample_rate is None or sample_rate == 0:
        raise FlacError("missing or invalid STREAMINFO")
    if bps not in (8, 16, 24, 32):
        raise FlacError(f"unsupported bit depth {bps}")

    frames = []
    decoded = 0
    while br.pos < len(data) * 8 - 15 and (total == 0 or decoded < total):
        frame, n = _decode_frame(br, sample_rate, bps)
        if frame.shape[1] != channels:
            raise FlacError("channel count changed mid-stream")
        frames.append(frame)
        decoded += n
    if not frames:
        raise FlacError("stream contains no audio frames")
    samples = np.concatenate(frames, axis=0)
    if total:
        samples = samples[:total]
    return samples, sample_rate, bps


def decode_file(path: str | Path) -> tuple[np.ndarray, int, int]:
    return decode_bytes(Path(path).read_bytes())
