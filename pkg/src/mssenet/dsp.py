"""WAV decoding and the MFCC front end.

Pipeline: framing with a periodic Hamming window, 2048-point power
spectrum, HTK-style mel filterbank, log with a fixed floor, orthonormal
DCT-II, first 39 coefficients (c0 included).
"""

from __future__ import annotations

import hashlib
import json
import struct
import wave
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.fft

from .numerics import ConfigurationError

N_COEFFS = 39


class WavFormatError(ValueError):
    """The file is not a PCM/float WAV this decoder understands."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class FeatureRecordError(ValueError):
    """A cached feature record is malformed."""


class TooShortError(ValueError):
    """Signal is shorter than one analysis frame."""


@dataclass
class Utterance:
    samples: np.ndarray
    sample_rate: int
    label: int | None = None
    speaker: str | None = None
    source_path: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("an utterance needs a non-empty mono sample sequence")


@dataclass
class MfccMatrix:
    coeffs: np.ndarray
    frame_ms: float
    hop_ms: float
    sample_rate: int
    utterance_id: str = ""

    def __post_init__(self):
        if self.coeffs.ndim != 2 or self.coeffs.shape[1] != N_COEFFS:
            raise ValueError(f"MFCC matrix must be frames x {N_COEFFS}, got {self.coeffs.shape}")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("MFCC matrix contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.coeffs.shape[0]


@dataclass(frozen=True)
class DspConfig:
    frame_ms: float = 50.0
    hop_ms: float = 12.5
    n_filters: int = 40
    fft_size: int = 2048
    log_floor: float = 1e-10
    n_coeffs: int = N_COEFFS

    def __post_init__(self):
        if self.n_coeffs != N_COEFFS:
            raise ConfigurationError(f"the network consumes exactly {N_COEFFS} coefficients")
        if self.n_filters < self.n_coeffs + 1:
            raise ConfigurationError(
                f"{self.n_filters} mel filters cannot yield {self.n_coeffs} coefficients; need >= 40")
        if self.frame_ms <= 0 or self.hop_ms <= 0:
            raise ConfigurationError("frame and hop durations must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        """Stable hash of every setting that changes extracted features."""
        blob = json.dumps({"version": 1, **self.to_dict()}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MelFilterbank:
    weights: np.ndarray
    center_hz: np.ndarray
    sample_rate: int
    fft_size: int = 2048

    @property
    def n_filters(self) -> int:
        return self.weights.shape[0]


# ---------------------------------------------------------------- WAV I/O

_PCM, _FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE


def load_wav(path) -> Utterance:
    """Decode a PCM (16/24/32-bit int) or 32-bit float WAV to mono in [-1, 1].

    Multichannel audio is averaged; the native sample rate is kept.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[0:4] != b"RIFF":
        raise WavFormatError("missing RIFF signature", 0)
    if raw[8:12] != b"WAVE":
        raise WavFormatError("RIFF form type is not WAVE", 8)
    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = pos + 8
        if body + size > len(raw):
            if cid == b"data":
                size = len(raw) - body  # tolerate streaming writers that never patched the size
            else:
                raise WavFormatError(f"chunk {cid!r} runs past end of file", pos)
        if cid == b"fmt ":
            if size < 16:
                raise WavFormatError("fmt chunk too short", pos)
            tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", raw, body)
            if tag == _EXTENSIBLE:
                if size < 40:
                    raise WavFormatError("extensible fmt chunk too short", pos)
                (tag,) = struct.unpack_from("<H", raw, body + 24)
            fmt = (tag, channels, rate, block_align, bits, body)
        elif cid == b"data":
            data = (body, size)
        pos = body + size + (size & 1)
    if fmt is None:
        raise WavFormatError("no fmt chunk", len(raw))
    if data is None:
        raise WavFormatError("no data chunk", len(raw))
    tag, channels, rate, block_align, bits, fmt_at = fmt
    if channels < 1:
        raise WavFormatError("zero channels", fmt_at + 2)
    if rate == 0:
        raise WavFormatError("zero sample rate", fmt_at + 4)
    if tag == _PCM and bits in (16, 24, 32):
        pass
    elif tag == _FLOAT and bits == 32:
        pass
    else:
        raise WavFormatError(f"unsupported encoding (format tag {tag}, {bits} bits)", fmt_at)
    width = bits // 8
    start, size = data
    n_frames = size // (width * channels)
    if n_frames == 0:
        raise WavFormatError("data chunk holds no samples", start)
    buf = raw[start:start + n_frames * width * channels]
    if tag == _FLOAT:
        x = np.frombuffer(buf, dtype="<f4").astype(np.float64)
    elif bits == 16:
        x = np.frombuffer(buf, dtype="<i2") / 32768.0
    elif bits == 32:
        x = np.frombuffer(buf, dtype="<i4") / 2147483648.0
    else:
        b = np.frombuffer(buf, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v / 8388608.0
    x = x.reshape(n_frames, channels).mean(axis=1)
    return Utterance(x, int(rate), source_path=str(path))


def write_wav(path, samples, sample_rate: int, sample_format: str = "pcm16") -> None:
    """Write ``samples`` (``[N]`` or ``[N, channels]``, values in [-1, 1]).

    ``sample_format`` is one of ``pcm16``, ``pcm24``, ``pcm32``, ``float32``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    channels = x.shape[1]
    if sample_format == "pcm16":
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        width, tag = 2, _PCM
    elif sample_format == "pcm32":
        payload = np.clip(np.round(x * 2147483648.0), -2147483648, 2147483647).astype("<i4").tobytes()
        width, tag = 4, _PCM
    elif sample_format == "pcm24":
        v = np.clip(np.round(x * 8388608.0), -8388608, 8388607).astype(np.int32).reshape(-1)
        v = np.where(v < 0, v + (1 << 24), v).astype(np.uint32)
        payload = np.stack([v & 0xFF, (v >> 8) & 0xFF, (v >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
        width, tag = 3, _PCM
    elif sample_format == "float32":
        payload = x.astype("<f4").tobytes()
        width, tag = 4, _FLOAT
    else:
        raise ConfigurationError(f"unknown sample format {sample_format!r}")
    if tag == _PCM and width == 2:
        with wave.open(str(path), "wb") as w:
            w.setnchannels(channels)
            w.setsampwidth(2)
            w.setframerate(int(sample_rate))
            w.writeframes(payload)
        return
    fmt = struct.pack("<HHIIHH", tag, channels, int(sample_rate), int(sample_rate) * channels * width,
                      channels * width, width * 8)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload + (b"\0" if len(payload) & 1 else b"")
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# ---------------------------------------------------------------- spectral front end

def frame_params(sample_rate: int, frame_ms: float, hop_ms: float) -> tuple[int, int]:
    frame_len = int(round(frame_ms * sample_rate / 1000.0))
    hop = int(round(hop_ms * sample_rate / 1000.0))
    if frame_len < 1 or hop < 1:
        raise ConfigurationError(f"frame {frame_ms} ms / hop {hop_ms} ms too short at {sample_rate} Hz")
    return frame_len, hop


def n_frames(n_samples: int, frame_len: int, hop: int) -> int:
    if n_samples < frame_len:
        raise TooShortError(f"{n_samples} samples is shorter than one {frame_len}-sample frame")
    return (n_samples - frame_len) // hop + 1


def hamming(length: int) -> np.ndarray:
    """Periodic Hamming window."""
    n = np.arange(length)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / length)


def frame_and_window(u: Utterance, frame_ms: float = 50.0, hop_ms: float = 12.5,
                     window: bool = True) -> np.ndarray:
    frame_len, hop = frame_params(u.sample_rate, frame_ms, hop_ms)
    T = n_frames(u.samples.size, frame_len, hop)
    idx = hop * np.arange(T)[:, None] + np.arange(frame_len)[None, :]
    frames = u.samples[idx]
    if window:
        frames = frames * hamming(frame_len)
    return frames


def power_spectrum(frames: np.ndarray, fft_size: int = 2048) -> np.ndarray:
    """One-sided ``|FFT|^2`` of each zero-padded frame: ``[T, fft_size/2 + 1]``."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[1] > fft_size:
        raise ConfigurationError(f"frame length {frames.shape[1]} exceeds FFT size {fft_size}")
    spec = np.fft.rfft(frames, n=fft_size, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(sample_rate: int, n_filters: int = 40, fft_size: int = 2048) -> MelFilterbank:
    """Triangular filters, unit peak, centres uniform in mel between 0 Hz and Nyquist."""
    if n_filters < N_COEFFS + 1:
        raise ConfigurationError(f"{n_filters} filters cannot produce {N_COEFFS} coefficients")
    if sample_rate <= 0:
        raise ConfigurationError("sample rate must be positive")
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_filters + 2))
    bin_hz = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    rising = (bin_hz - lo) / (mid - lo)
    falling = (hi - bin_hz) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(weights.sum(axis=1) == 0)
    if empty.size:
        raise ConfigurationError(
            f"mel filters {empty.tolist()} cover no FFT bin at {sample_rate} Hz / {fft_size} points")
    return MelFilterbank(weights, edges_hz[1:-1], sample_rate, fft_size)


def mel_energies(u: Utterance, fb: MelFilterbank, cfg: DspConfig = DspConfig()) -> np.ndarray:
    if fb.sample_rate != u.sample_rate:
        raise ConfigurationError(f"filterbank built for {fb.sample_rate} Hz, audio is {u.sample_rate} Hz")
    frames = frame_and_window(u, cfg.frame_ms, cfg.hop_ms)
    return power_spectrum(frames, fb.fft_size) @ fb.weights.T


def dct_ortho(x: np.ndarray) -> np.ndarray:
    return scipy.fft.dct(x, type=2, norm="ortho", axis=-1)


def idct_ortho(c: np.ndarray) -> np.ndarray:
    return scipy.fft.idct(c, type=2, norm="ortho", axis=-1)


def extract_mfcc(u: Utterance, fb: MelFilterbank, cfg: DspConfig = DspConfig(),
                 utterance_id: str = "") -> MfccMatrix:
    energies = mel_energies(u, fb, cfg)
    coeffs = dct_ortho(np.log(energies + cfg.log_floor))[:, :cfg.n_coeffs]
    return MfccMatrix(coeffs.astype(np.float32), cfg.frame_ms, cfg.hop_ms, u.sample_rate, utterance_id)


# ---------------------------------------------------------------- feature records

RECORD_MAGIC = b"MSSE"
RECORD_VERSION = 1
_HEADER = struct.Struct("<4sIIIddI")


def write_feature_record(path, m: MfccMatrix) -> None:
    header = _HEADER.pack(RECORD_MAGIC, RECORD_VERSION, m.n_frames, m.coeffs.shape[1],
                          float(m.hop_ms), float(m.frame_ms), int(m.sample_rate))
    Path(path).write_bytes(header + np.ascontiguousarray(m.coeffs, dtype="<f4").tobytes())


def read_feature_record(path, utterance_id: str = "") -> MfccMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureRecordError("feature record truncated")
    magic, version, T, n_coeffs, hop_ms, frame_ms, rate = _HEADER.unpack_from(raw)
    if magic != RECORD_MAGIC:
        raise FeatureRecordError("bad feature record magic")
    if version != RECORD_VERSION:
        raise FeatureRecordError(f"unsupported feature record version {version}")
    expected = _HEADER.size + 4 * T * n_coeffs
    if len(raw) != expected:
        raise FeatureRecordError(f"feature record is {len(raw)} bytes, header implies {expected}")
    coeffs = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(T, n_coeffs).astype(np.float32)
    return MfccMatrix(coeffs, frame_ms, hop_ms, rate, utterance_id)
