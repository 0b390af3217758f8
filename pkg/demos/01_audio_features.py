#!/usr/bin/env python3
"""Walk through the audio front-end: WAV I/O, resampling, log-mel, MFCC."""

import tempfile
from pathlib import Path

import numpy as np

from slmforge.audio import SpectralConfig, log_mel, mfcc, read_wav, resample, write_wav
from slmforge.synth import sine

workdir = Path(tempfile.mkdtemp(prefix="slmforge-demo-"))

# a one-second 440 Hz tone at 32 kHz, round-tripped through a WAV file
buf = sine(440.0, 1.0, sample_rate=32000)
wav_path = workdir / "tone.wav"
write_wav(wav_path, buf)
loaded = read_wav(wav_path)
print(f"wrote/read {wav_path.name}: {len(loaded.samples)} samples @ {loaded.sample_rate} Hz")

# linear resampling to the canonical 16 kHz
down = resample(loaded, 16000)
print(f"resampled to {down.sample_rate} Hz -> {len(down.samples)} samples")
spectrum = np.abs(np.fft.rfft(down.samples))
freqs = np.fft.rfftfreq(len(down.samples), d=1 / 16000)
print(f"dominant frequency after resampling: {freqs[np.argmax(spectrum)]:.1f} Hz")

# log-mel features: 25 ms Hann frames, 10 ms hop, 40 triangular mel bands
cfg = SpectralConfig(n_mels=40, n_mfcc=13)
feats = log_mel(down, cfg)
print(f"log-mel matrix: {feats.data.shape} (frames x mels), hop {feats.frame_hop_s*1000:.0f} ms")
mid = feats.data[feats.num_frames // 2]
print(f"hottest mel band at frame {feats.num_frames // 2}: {int(np.argmax(mid))}")

# MFCCs are the orthonormal DCT of each log-mel frame
coeffs = mfcc(feats, 13)
print(f"mfcc matrix: {coeffs.data.shape}")
print(f"first frame, first four coefficients: {np.round(coeffs.data[0, :4], 3)}")
