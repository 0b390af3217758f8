#!/usr/bin/env python3
"""Run the curation funnel on synthetic recordings and inspect the manifest.

Each stage is shown on its own first (separation, VAD, diarization, quality
scoring), then the full pipeline writes a manifest with the rejection funnel
in its header.
"""

import tempfile
from pathlib import Path

from slmforge.audio import write_wav
from slmforge.curate import PipelineConfig, quality_score, run_pipeline, vad_segments, diarize
from slmforge.synth import concat_buffers, silence, sine, white_noise

workdir = Path(tempfile.mkdtemp(prefix="slmforge-demo-"))


def bursty(freq, bursts=10):
    """Tone bursts with short pauses, like phrases in running speech."""
    parts = [silence(0.5)]
    for _ in range(bursts):
        parts.extend([sine(freq, 0.3, amplitude=0.4), silence(0.08)])
    parts.append(silence(0.5))
    return concat_buffers(parts)


# VAD on a clean recording
buf = bursty(500.0)
spans = vad_segments(buf, PipelineConfig())
print(f"VAD on a {buf.duration_s:.1f} s recording -> {len(spans)} span(s):")
for span in spans:
    print(f"   [{span.start_s:.2f}, {span.end_s:.2f}] s")

# diarization: two alternating "speakers" with very different spectra
two_speaker = concat_buffers([bursty(400.0, 6), bursty(2500.0, 6)])
spans = vad_segments(two_speaker, PipelineConfig())
labeled = diarize(two_speaker, spans)
print("diarization labels:", [s.speaker for s in labeled])

# quality scoring: clean speech vs pure noise
print(f"quality (clean bursts):  {quality_score(bursty(600.0)):.2f}")
print(f"quality (white noise):   {quality_score(white_noise(3.0, amplitude=0.3)):.2f}")

# the full funnel over three files, one of them too short to keep
paths = []
for i, freq in enumerate((350.0, 900.0, 1800.0)):
    p = workdir / f"rec{i}.wav"
    write_wav(p, bursty(freq))
    paths.append(p)
short = workdir / "too_short.wav"
write_wav(short, concat_buffers([silence(0.5), sine(700.0, 1.0, amplitude=0.4), silence(0.5)]))
paths.append(short)

manifest = run_pipeline(paths, PipelineConfig())
manifest.write(workdir / "manifest.jsonl")
h = manifest.header
print(f"\npipeline: {h['n_candidates']} candidates -> {h['n_kept']} kept "
      f"({h['total_hours']*3600:.1f} s of audio)")
print(f"rejections: {h['rejected']}")
print(f"manifest written to {workdir / 'manifest.jsonl'}")
for rec in manifest.records:
    print(f"   {rec.id}: {rec.duration_s:.2f} s, quality {rec.quality_score:.2f}, "
          f"speaker {rec.speaker}")
