"""Audio I/O and spectral features against independent DSP oracles."""

import struct

import numpy as np
import pytest
from scipy.fft import idct

from slmforge.audio import (
    AudioBuffer,
    FeatureMatrix,
    SpectralConfig,
    log_mel,
    mel_filterbank,
    mel_scale,
    mfcc,
    parse_wav_bytes,
    read_wav,
    resample,
    standardize,
    stft_magnitude,
    wav_bytes,
    write_wav,
)
from slmforge.errors import ConfigError, TruncatedWavError, UnsupportedWavError
from slmforge.synth import sine


# ---------------------------------------------------------------------------
# WAV I/O


def test_read_pcm16_mono_header_arithmetic(tmp_path):
    buf = sine(440.0, 1.0, 16000)
    path = tmp_path / "a.wav"
    write_wav(path, buf, "pcm16")
    out = read_wav(path)
    assert len(out.samples) == 16000
    assert out.sample_rate == 16000


def test_stereo_identical_channels_downmix_to_either(tmp_path):
    mono = sine(300.0, 0.25, 8000)
    pcm = (np.round(np.clip(mono.samples, -1, 1) * 32767.0)).astype("<i2")
    stereo = np.repeat(pcm, 2)
    payload = stereo.tobytes()
    raw = (
        b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
        + b"fmt " + struct.pack("<IHHIIHH", 16, 1, 2, 8000, 8000 * 4, 4, 16)
        + b"data" + struct.pack("<I", len(payload)) + payload
    )
    out = parse_wav_bytes(raw)
    assert np.array_equal(out.samples, pcm.astype(np.float64) / 32768.0)


def test_truncated_data_chunk_is_distinct_error():
    buf = sine(200.0, 0.1, 8000)
    raw = wav_bytes(buf)
    with pytest.raises(TruncatedWavError):
        parse_wav_bytes(raw[:-100])


def test_missing_file_raises_file_not_found():
    with pytest.raises(FileNotFoundError):
        read_wav("/nonexistent/nothing.wav")


def test_unsupported_encoding_is_distinct_error():
    payload = b"\x00" * 64
    raw = (
        b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
        + b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 8000, 8000 * 3, 3, 24)
        + b"data" + struct.pack("<I", len(payload)) + payload
    )
    with pytest.raises(UnsupportedWavError):
        parse_wav_bytes(raw)


def test_not_riff_is_unsupported():
    with pytest.raises(UnsupportedWavError):
        parse_wav_bytes(b"OGGS" + b"\x00" * 100)


def test_float32_round_trip(tmp_path):
    buf = sine(500.0, 0.2, 16000, amplitude=0.9)
    path = tmp_path / "f.wav"
    write_wav(path, buf, "float32")
    out = read_wav(path)
    assert np.max(np.abs(out.samples - buf.samples)) < 1e-6


# ---------------------------------------------------------------------------
# Resampling


def test_resample_identity_bit_exact():
    buf = sine(440.0, 0.5, 16000)
    out = resample(buf, 16000)
    assert out.samples.tobytes() == buf.samples.tobytes()


def test_resample_length_ratio():
    buf = AudioBuffer(np.zeros(32000), 32000)
    assert len(resample(buf, 16000).samples) == 16000


def test_resample_preserves_dominant_frequency_fft_oracle():
    buf = sine(440.0, 1.0, 32000)
    out = resample(buf, 16000)
    spectrum = np.abs(np.fft.rfft(out.samples))
    freqs = np.fft.rfftfreq(len(out.samples), d=1.0 / 16000)
    peak = freqs[np.argmax(spectrum)]
    bin_width = freqs[1] - freqs[0]
    assert abs(peak - 440.0) <= bin_width + 1e-9


def test_resample_rejects_bad_rate():
    with pytest.raises(ConfigError):
        resample(sine(100, 0.1), 0)


# ---------------------------------------------------------------------------
# log-mel


def test_log_mel_zero_signal_hits_log_floor():
    cfg = SpectralConfig()
    buf = AudioBuffer(np.zeros(16000), 16000)
    feats = log_mel(buf, cfg)
    assert np.all(feats.data == np.log(cfg.log_floor))


def test_log_mel_frame_count_formula():
    buf = AudioBuffer(np.zeros(16000), 16000)
    feats = log_mel(buf, SpectralConfig(frame_len_ms=25.0, hop_ms=10.0))
    assert feats.num_frames == 98


def test_log_mel_short_buffer_gives_empty_matrix():
    buf = AudioBuffer(np.zeros(100), 16000)
    feats = log_mel(buf, SpectralConfig())
    assert feats.num_frames == 0


def test_log_mel_peak_bin_matches_mel_arithmetic_oracle():
    cfg = SpectralConfig(n_mels=40)
    buf = sine(1000.0, 1.0, 16000)
    feats = log_mel(buf, cfg)
    mid = feats.data[feats.num_frames // 2]
    got = int(np.argmax(mid))

    # oracle: the triangle whose response at 1 kHz is largest, from the
    # mel-point arithmetic alone
    mel_points = np.linspace(mel_scale(cfg.fmin_hz), mel_scale(8000.0), cfg.n_mels + 2)
    hz = 700.0 * (10.0 ** (mel_points / 2595.0) - 1.0)
    responses = []
    for m in range(cfg.n_mels):
        left, center, right = hz[m], hz[m + 1], hz[m + 2]
        up = (1000.0 - left) / (center - left)
        down = (right - 1000.0) / (right - center)
        responses.append(max(0.0, min(up, down)))
    assert got == int(np.argmax(responses))


def test_log_mel_translation_consistency_one_hop_shift():
    cfg = SpectralConfig()
    rng = np.random.default_rng(8)
    base = 0.3 * rng.standard_normal(16000)
    hop = cfg.hop_samples(16000)
    a = log_mel(AudioBuffer(np.clip(base, -1, 1), 16000), cfg)
    b = log_mel(AudioBuffer(np.clip(np.concatenate([np.zeros(hop), base]), -1, 1), 16000), cfg)
    assert np.max(np.abs(b.data[1 : a.num_frames] - a.data[: a.num_frames - 1])) < 1e-6


def test_stft_of_zero_signal_is_identically_zero():
    mag = stft_magnitude(np.zeros(4000), 400, 160, 512)
    assert mag.shape[0] > 0
    assert np.all(mag == 0.0)


def test_filterbank_shape():
    bank = mel_filterbank(40, 512, 16000, 0.0, 8000.0)
    assert bank.shape == (40, 257)


# ---------------------------------------------------------------------------
# MFCC


def _logmel_fixture(data):
    return FeatureMatrix(np.asarray(data, dtype=np.float64), 0.01, "logmel")


def test_mfcc_constant_frame_dct_of_constant():
    n_mels = 16
    c = 0.7
    feats = _logmel_fixture(np.full((3, n_mels), c))
    out = mfcc(feats, n_mels)
    assert out.data[0, 0] == pytest.approx(c * np.sqrt(n_mels), abs=1e-9)
    assert np.max(np.abs(out.data[:, 1:])) < 1e-9


def test_mfcc_orthonormal_reconstruction():
    rng = np.random.default_rng(9)
    data = rng.standard_normal((5, 12))
    out = mfcc(_logmel_fixture(data), 12)
    back = idct(out.data, type=2, norm="ortho", axis=1)
    assert np.max(np.abs(back - data)) < 1e-6


def test_mfcc_matches_naive_dct_oracle():
    rng = np.random.default_rng(10)
    n = 10
    frame = rng.standard_normal(n)
    out = mfcc(_logmel_fixture(frame[None, :]), n).data[0]

    # direct-summation orthonormal DCT-II
    oracle = np.zeros(n)
    for k in range(n):
        acc = 0.0
        for i in range(n):
            acc += frame[i] * np.cos(np.pi * (i + 0.5) * k / n)
        scale = np.sqrt(1.0 / n) if k == 0 else np.sqrt(2.0 / n)
        oracle[k] = scale * acc
    assert np.max(np.abs(out - oracle)) < 1e-9


def test_mfcc_rejects_too_many_coefficients():
    with pytest.raises(ConfigError):
        mfcc(_logmel_fixture(np.zeros((2, 8))), 9)


def test_standardize_zero_mean_unit_variance_per_band():
    rng = np.random.default_rng(12)
    feats = _logmel_fixture(5.0 + 3.0 * rng.standard_normal((50, 6)))
    out = standardize(feats)
    assert np.max(np.abs(out.data.mean(axis=0))) < 1e-9
    assert np.max(np.abs(out.data.std(axis=0) - 1.0)) < 1e-6
    assert out.kind == feats.kind


def test_standardize_constant_band_stays_near_zero():
    data = np.zeros((10, 3))
    data[:, 1] = 4.2
    out = standardize(_logmel_fixture(data))
    assert np.max(np.abs(out.data[:, 1])) < 1e-6


def test_standardize_empty_matrix():
    out = standardize(_logmel_fixture(np.zeros((0, 4))))
    assert out.num_frames == 0


def test_mfcc_rejects_non_logmel_input():
    feats = FeatureMatrix(np.zeros((2, 8)), 0.01, "hidden")
    with pytest.raises(ConfigError):
        mfcc(feats, 4)
