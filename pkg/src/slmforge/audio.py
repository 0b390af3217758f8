"""Audio I/O, resampling, framing and spectral features (STFT, log-mel, MFCC).

Everything here is pure: functions never mutate their inputs, so buffers and
feature matrices can be shared read-only across threads.

WAV support covers RIFF little-endian containers with PCM16 or IEEE float32
samples. Multichannel files are downmixed by averaging, never rejected.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .errors import ConfigError, TruncatedWavError, UnsupportedWavError

FEATURE_KINDS = ("logmel", "mfcc", "hidden")


@dataclass
class AudioBuffer:
    """Mono audio: float64 samples in [-1, 1] plus a sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain non-finite values")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def slice_seconds(self, start_s: float, end_s: float) -> "AudioBuffer":
        i0 = max(0, int(round(start_s * self.sample_rate)))
        i1 = min(len(self.samples), int(round(end_s * self.sample_rate)))
        return AudioBuffer(self.samples[i0:i1].copy(), self.sample_rate)


@dataclass
class FeatureMatrix:
    """T x D feature frames with the hop (seconds per frame) that produced them."""

    data: np.ndarray
    frame_hop_s: float
    kind: str

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"feature data must be 2-D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature data contains non-finite values")
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SpectralConfig:
    frame_len_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    n_mels: int = 40
    n_mfcc: int = 13
    fmin_hz: float = 0.0
    fmax_hz: float | None = None  # None -> sample_rate / 2
    log_floor: float = 1e-10

    def frame_samples(self, sample_rate: int) -> int:
        return int(round(self.frame_len_ms * sample_rate / 1000.0))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.hop_ms * sample_rate / 1000.0))

    def validate(self, sample_rate: int) -> None:
        frame = self.frame_samples(sample_rate)
        hop = self.hop_samples(sample_rate)
        if frame <= 0 or hop <= 0:
            raise ConfigError("frame and hop must be at least one sample")
        if self.fft_size < frame:
            raise ConfigError(
                f"fft_size {self.fft_size} smaller than frame of {frame} samples"
            )
        fmax = self.fmax_hz if self.fmax_hz is not None else sample_rate / 2.0
        if not (0.0 <= self.fmin_hz < fmax <= sample_rate / 2.0):
            raise ConfigError(
                f"need 0 <= fmin < fmax <= rate/2, got fmin={self.fmin_hz}, fmax={fmax}"
            )
        if self.n_mfcc > self.n_mels:
            raise ConfigError(f"n_mfcc {self.n_mfcc} exceeds n_mels {self.n_mels}")
        if self.log_floor <= 0.0:
            raise ConfigError("log_floor must be positive")


# ---------------------------------------------------------------------------
# WAV I/O


def read_wav(path) -> AudioBuffer:
    """Read a RIFF/WAVE file into a mono AudioBuffer.

    PCM16 and IEEE float32 encodings are accepted; multichannel audio is
    downmixed by averaging. Raises FileNotFoundError for a missing file,
    UnsupportedWavError for containers/encodings outside that set, and
    TruncatedWavError when the data chunk is shorter than declared.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    return parse_wav_bytes(raw)


def parse_wav_bytes(raw: bytes) -> AudioBuffer:
    if len(raw) < 12 or raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise UnsupportedWavError("not a RIFF/WAVE container")

    fmt = None
    data = None
    declared = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4 : pos + 8])
        body = raw[pos + 8 : pos + 8 + size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise UnsupportedWavError("fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            declared = size
            data = body
        pos += 8 + size + (size % 2)

    if fmt is None or declared is None:
        raise UnsupportedWavError("missing fmt or data chunk")
    if len(data) < declared:
        raise TruncatedWavError(
            f"data chunk declares {declared} bytes but only {len(data)} present"
        )

    audio_format, n_channels, sample_rate, _byte_rate, _block_align, bits = fmt
    if n_channels < 1:
        raise UnsupportedWavError("zero channels")

    if audio_format == 1 and bits == 16:
        samples = np.frombuffer(data[:declared], dtype="<i2").astype(np.float64)
        samples /= 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(data[:declared], dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedWavError(
            f"unsupported encoding: format={audio_format}, bits={bits}"
        )

    if not np.all(np.isfinite(samples)):
        raise UnsupportedWavError("sample data contains non-finite values")

    if n_channels > 1:
        usable = (len(samples) // n_channels) * n_channels
        samples = samples[:usable].reshape(-1, n_channels).mean(axis=1)

    samples = np.clip(samples, -1.0, 1.0)
    return AudioBuffer(samples, sample_rate)


def wav_bytes(buf: AudioBuffer, encoding: str = "pcm16") -> bytes:
    """Serialize a buffer as a RIFF/WAVE byte string (PCM16 or float32)."""
    if encoding == "pcm16":
        fmt_code, bits = 1, 16
        clipped = np.clip(buf.samples, -1.0, 1.0)
        payload = (np.round(clipped * 32767.0)).astype("<i2").tobytes()
    elif encoding == "float32":
        fmt_code, bits = 3, 32
        payload = np.clip(buf.samples, -1.0, 1.0).astype("<f4").tobytes()
    else:
        raise ConfigError(f"unknown wav encoding {encoding!r}")

    block_align = bits // 8
    byte_rate = buf.sample_rate * block_align
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    fmt_chunk = b"fmt " + struct.pack(
        "<IHHIIHH", 16, fmt_code, 1, buf.sample_rate, byte_rate, block_align, bits
    )
    data_chunk = b"data" + struct.pack("<I", len(payload)) + payload
    return header + fmt_chunk + data_chunk


def write_wav(path, buf: AudioBuffer, encoding: str = "pcm16") -> None:
    with open(path, "wb") as fh:
        fh.write(wav_bytes(buf, encoding))


# ---------------------------------------------------------------------------
# Resampling and features


def resample(buf: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Linear-interpolation resampling; identical rates return a bit-exact copy.

    Output length is round(len * target / source). Linear interpolation is
    lossy above the toy scale this package targets; good enough for speech
    and for the synthetic test signals used throughout.
    """
    if target_rate <= 0:
        raise ConfigError(f"target_rate must be positive, got {target_rate}")
    if target_rate == buf.sample_rate:
        return AudioBuffer(buf.samples.copy(), buf.sample_rate)
    n_in = len(buf.samples)
    n_out = int(round(n_in * target_rate / buf.sample_rate))
    if n_in == 0 or n_out == 0:
        return AudioBuffer(np.zeros(n_out), target_rate)
    src_pos = np.arange(n_out) * (buf.sample_rate / target_rate)
    out = np.interp(src_pos, np.arange(n_in), buf.samples)
    return AudioBuffer(out, target_rate)


def frame_signal(samples: np.ndarray, frame: int, hop: int) -> np.ndarray:
    """Slice a 1-D signal into (T, frame) rows; T = 1 + (n - frame) // hop."""
    n = len(samples)
    if n < frame:
        return np.zeros((0, frame))
    n_frames = 1 + (n - frame) // hop
    idx = np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]
    return samples[idx]


def mel_scale(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int, fft_size: int, sample_rate: int, fmin: float, fmax: float
) -> np.ndarray:
    """Triangular mel filterbank over rfft bins, shape (n_mels, fft_size//2 + 1)."""
    mel_points = np.linspace(mel_scale(fmin), mel_scale(fmax), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    bank = np.zeros((n_mels, len(bin_freqs)))
    for m in range(n_mels):
        left, center, right = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (bin_freqs - left) / max(center - left, 1e-12)
        down = (right - bin_freqs) / max(right - center, 1e-12)
        bank[m] = np.maximum(0.0, np.minimum(up, down))
    return bank


def stft_magnitude(samples: np.ndarray, frame: int, hop: int, fft_size: int) -> np.ndarray:
    frames = frame_signal(samples, frame, hop)
    if frames.shape[0] == 0:
        return np.zeros((0, fft_size // 2 + 1))
    window = np.hanning(frame)
    return np.abs(np.fft.rfft(frames * window, n=fft_size, axis=1))


def log_mel(buf: AudioBuffer, cfg: SpectralConfig = SpectralConfig()) -> FeatureMatrix:
    """Hann-windowed magnitude STFT through a triangular mel bank, floored log.

    A buffer shorter than one frame yields an empty (0 x n_mels) matrix.
    """
    cfg.validate(buf.sample_rate)
    frame = cfg.frame_samples(buf.sample_rate)
    hop = cfg.hop_samples(buf.sample_rate)
    fmax = cfg.fmax_hz if cfg.fmax_hz is not None else buf.sample_rate / 2.0
    mag = stft_magnitude(buf.samples, frame, hop, cfg.fft_size)
    bank = mel_filterbank(cfg.n_mels, cfg.fft_size, buf.sample_rate, cfg.fmin_hz, fmax)
    mel_energy = mag @ bank.T
    out = np.log(np.maximum(mel_energy, cfg.log_floor))
    return FeatureMatrix(out, hop / buf.sample_rate, "logmel")


def standardize(features: FeatureMatrix, eps: float = 1e-8) -> FeatureMatrix:
    """Per-utterance, per-band standardization over time (speech CMVN).

    Raw log-mel sits far from zero (silence pinned at the log floor), which
    saturates randomly initialized front-ends; training pipelines apply this
    before the encoder. Constant bands come out (numerically) zero.
    """
    data = features.data
    if data.shape[0] == 0:
        return FeatureMatrix(data.copy(), features.frame_hop_s, features.kind)
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    return FeatureMatrix((data - mean) / (std + eps), features.frame_hop_s,
                         features.kind)


def mfcc(logmel_matrix: FeatureMatrix, n_mfcc: int) -> FeatureMatrix:
    """First n_mfcc coefficients of an orthonormal type-II DCT per log-mel frame."""
    if logmel_matrix.kind != "logmel":
        raise ConfigError(f"mfcc input must be logmel, got {logmel_matrix.kind!r}")
    if n_mfcc > logmel_matrix.dim:
        raise ConfigError(
            f"n_mfcc {n_mfcc} exceeds mel dimension {logmel_matrix.dim}"
        )
    coeffs = dct(logmel_matrix.data, type=2, norm="ortho", axis=1)[:, :n_mfcc]
    return FeatureMatrix(coeffs, logmel_matrix.frame_hop_s, "mfcc")
