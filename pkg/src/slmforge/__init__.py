"""slmforge: a desk-scale, self-contained speech-LLM laboratory.

Curate raw audio into high-quality utterances, pretrain a small
masked-prediction speech encoder on KMeans pseudo-labels, fine-tune it for
speech recognition with CTC, fuse it into a small frozen language model
through a trainable aligner, build chain-of-thought instruction data, and
evaluate with WER / CER / chrF.
"""

__version__ = "0.1.0"

from .audio import AudioBuffer, FeatureMatrix, SpectralConfig, log_mel, mfcc, read_wav, resample, standardize, write_wav
from .curate import Manifest, PipelineConfig, SegmentRecord, Span, run_pipeline
from .metrics import cer, chrf, render_report, wer
from .tensor import Tensor, no_grad

__all__ = [
    "__version__",
    "AudioBuffer",
    "FeatureMatrix",
    "SpectralConfig",
    "log_mel",
    "mfcc",
    "read_wav",
    "resample",
    "standardize",
    "write_wav",
    "Manifest",
    "PipelineConfig",
    "SegmentRecord",
    "Span",
    "run_pipeline",
    "wer",
    "cer",
    "chrf",
    "render_report",
    "Tensor",
    "no_grad",
]
