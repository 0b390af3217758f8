"""CTC fine-tuning, CTC decoding, and transcription normalization.

The CTC loss is the standard forward algorithm in log space over the
blank-interleaved target; its gradient with respect to the log-probability
lattice is the negated state-posterior, computed by the alpha-beta
recursion, so it plugs directly into the autodiff graph as a custom op.
"""

from __future__ import annotations

import json
import logging
import re
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, GraphError
from .metrics import wer
from .nn import Adam, Linear, Module
from .pretrain import SpeechEncoder, SpeechEncoderConfig
from .tensor import Tensor

log = logging.getLogger(__name__)

BLANK = 0
BLANK_SYMBOL = "<blank>"

_NEG_INF = -np.inf


@dataclass
class Vocab:
    """Ordered symbol list with the blank reserved at index 0."""

    symbols: list

    def __post_init__(self):
        if not self.symbols or self.symbols[0] != BLANK_SYMBOL:
            raise ConfigError(f"vocab must start with {BLANK_SYMBOL!r}")
        if len(set(self.symbols)) != len(self.symbols):
            raise ConfigError("vocab symbols are not unique")

    def __len__(self):
        return len(self.symbols)

    @classmethod
    def from_texts(cls, texts) -> "Vocab":
        chars = sorted({c for text in texts for c in text})
        return cls([BLANK_SYMBOL] + chars)

    @classmethod
    def from_file(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        return cls(lines)

    def to_file(self, path) -> None:
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8")

    def encode(self, text: str) -> list:
        index = {s: i for i, s in enumerate(self.symbols)}
        out = []
        for ch in text:
            if ch not in index:
                raise ConfigError(f"symbol {ch!r} not in vocab")
            out.append(index[ch])
        return out

    def decode(self, ids) -> str:
        return "".join(self.symbols[i] for i in ids)


# ---------------------------------------------------------------------------
# CTC loss


def _extend_with_blanks(target):
    ext = [BLANK]
    for t in target:
        ext.append(int(t))
        ext.append(BLANK)
    return ext


def ctc_required_frames(target) -> int:
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _ctc_alpha(logp: np.ndarray, ext) -> np.ndarray:
    t_len, s_len = logp.shape[0], len(ext)
    alpha = np.full((t_len, s_len), _NEG_INF)
    alpha[0, 0] = logp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, t_len):
        for s in range(s_len):
            acc = alpha[t - 1, s]
            if s >= 1:
                acc = np.logaddexp(acc, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != BLANK and ext[s] != ext[s - 2]:
                acc = np.logaddexp(acc, alpha[t - 1, s - 2])
            alpha[t, s] = acc + logp[t, ext[s]]
    return alpha


def _ctc_beta(logp: np.ndarray, ext) -> np.ndarray:
    t_len, s_len = logp.shape[0], len(ext)
    beta = np.full((t_len, s_len), _NEG_INF)
    beta[t_len - 1, s_len - 1] = 0.0
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = 0.0
    for t in range(t_len - 2, -1, -1):
        for s in range(s_len):
            acc = beta[t + 1, s] + logp[t + 1, ext[s]]
            if s + 1 < s_len:
                acc = np.logaddexp(acc, beta[t + 1, s + 1] + logp[t + 1, ext[s + 1]])
            if s + 2 < s_len and ext[s + 2] != BLANK and ext[s + 2] != ext[s]:
                acc = np.logaddexp(acc, beta[t + 1, s + 2] + logp[t + 1, ext[s + 2]])
            beta[t, s] = acc
    return beta


def ctc_loss(log_probs: Tensor, target) -> Tensor:
    """Negative log probability of ``target`` under the CTC path sum.

    ``log_probs`` is a (T, V) lattice with blank at column 0; the target
    must contain no blanks. Raises (rather than returning infinity) when T
    is too short to emit the target.
    """
    target = [int(t) for t in target]
    if not isinstance(log_probs, Tensor):
        log_probs = Tensor(log_probs)
    if log_probs.data.ndim != 2:
        raise GraphError(f"log_probs must be (T, V), got {log_probs.data.shape}")
    t_len, v = log_probs.data.shape
    if any(t == BLANK for t in target):
        raise ConfigError("target contains the blank symbol")
    if any(not (0 < t < v) for t in target):
        raise ConfigError(f"target symbol out of range for vocab of {v}")
    required = ctc_required_frames(target)
    if t_len < max(required, 1):
        raise ConfigError(
            f"{t_len} frames cannot emit a target needing at least {required}"
        )

    ext = _extend_with_blanks(target)
    logp = log_probs.data
    alpha = _ctc_alpha(logp, ext)
    s_len = len(ext)
    total = alpha[t_len - 1, s_len - 1]
    if s_len > 1:
        total = np.logaddexp(total, alpha[t_len - 1, s_len - 2])
    loss = -total

    def backward(grad):
        if not log_probs.requires_grad:
            return
        beta = _ctc_beta(logp, ext)
        occupancy = alpha + beta - total  # log posterior per (t, state)
        gamma = np.zeros_like(logp)
        for s, sym in enumerate(ext):
            gamma[:, sym] += np.exp(occupancy[:, s])
        if log_probs.grad is None:
            log_probs.grad = np.zeros_like(logp)
        log_probs.grad += grad * (-gamma)

    from .tensor import _make

    return _make(np.asarray(loss), (log_probs,), backward, "ctc_loss")


# ---------------------------------------------------------------------------
# Decoding


def collapse_path(path) -> list:
    out = []
    prev = None
    for p in path:
        if p != prev and p != BLANK:
            out.append(int(p))
        prev = p
    return out


def ctc_greedy_decode(log_probs) -> list:
    """Per-frame argmax, collapse adjacent repeats, drop blanks."""
    data = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    return collapse_path(data.argmax(axis=1))


def ctc_beam_decode(log_probs, beam_width: int) -> list:
    """Prefix beam search over labelings; probabilities sum over all paths.

    beam_width = 1 is defined as the greedy decode of the collapsed best
    path. Ties at any pruning or at the end go to the lexicographically
    smaller prefix.
    """
    if beam_width < 1:
        raise ConfigError(f"beam_width must be >= 1, got {beam_width}")
    if beam_width == 1:
        return ctc_greedy_decode(log_probs)
    data = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    t_len, v = data.shape

    # prefix -> (log P ending in blank, log P ending in its last symbol)
    beams = {(): (0.0, _NEG_INF)}
    for t in range(t_len):
        nxt = {}

        def bump(prefix, pb=None, pnb=None):
            old_pb, old_pnb = nxt.get(prefix, (_NEG_INF, _NEG_INF))
            if pb is not None:
                old_pb = np.logaddexp(old_pb, pb)
            if pnb is not None:
                old_pnb = np.logaddexp(old_pnb, pnb)
            nxt[prefix] = (old_pb, old_pnb)

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            bump(prefix, pb=total + data[t, BLANK])
            if prefix:
                bump(prefix, pnb=pnb + data[t, prefix[-1]])
            for c in range(1, v):
                if prefix and c == prefix[-1]:
                    bump(prefix + (c,), pnb=pb + data[t, c])
                else:
                    bump(prefix + (c,), pnb=total + data[t, c])

        ranked = sorted(
            nxt.items(), key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0])
        )
        beams = dict(ranked[:beam_width])

    best = min(beams.items(), key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0]))
    return list(best[0])


# ---------------------------------------------------------------------------
# Transcription normalization


DEFAULT_PUNCTUATION = string.punctuation + "¡¿‘’“”…«»"


@dataclass
class NormalizationRules:
    lowercase: bool = True
    punctuation: str = DEFAULT_PUNCTUATION
    lexicon: dict = field(default_factory=dict)
    language: str = "en"


def load_lexicon(path, language: str = "en") -> NormalizationRules:
    """Load a digit-string -> words lexicon (plain JSON object)."""
    entries = json.loads(Path(path).read_text(encoding="utf-8"))
    bad = [k for k in entries if not k.isdigit()]
    if bad:
        raise ConfigError(f"lexicon keys must be digit strings, got {bad[:3]}")
    return NormalizationRules(lexicon=dict(entries), language=language)


def builtin_rules(language: str = "en") -> NormalizationRules:
    path = Path(__file__).parent / "data" / f"number_lexicon_{language}.json"
    if not path.exists():
        raise ConfigError(f"no built-in lexicon for language {language!r}")
    return load_lexicon(path, language)


def _verbalize_run(run: str, lexicon: dict) -> str:
    words = []
    i = 0
    while i < len(run):
        match = None
        for j in range(len(run), i, -1):
            if run[i:j] in lexicon:
                match = run[i:j]
                break
        if match is None:
            raise ConfigError(f"digit run {run!r} has no lexicon coverage")
        words.append(lexicon[match])
        i += len(match)
    return " ".join(words)


def normalize_text(text: str, rules: NormalizationRules) -> str:
    """Lowercase, strip punctuation, verbalize digit runs, collapse whitespace.

    Digit runs are replaced greedily by the longest lexicon key, falling
    back digit by digit; a run that cannot be covered at all raises an
    error naming it. The function is idempotent.
    """
    if rules.lowercase:
        text = text.lower()
    if rules.punctuation:
        text = text.translate(str.maketrans("", "", rules.punctuation))

    def sub(match):
        return " " + _verbalize_run(match.group(0), rules.lexicon) + " "

    text = re.sub(r"\d+", sub, text)
    return " ".join(text.split())


# ---------------------------------------------------------------------------
# Fine-tuning


class CtcModel(Module):
    """Pretrained speech encoder with a linear CTC head on its final layer.

    The pretraining-only parameters (mask embedding and masked-prediction
    head) take no part in fine-tuning and stay frozen.
    """

    def __init__(self, encoder: SpeechEncoder, vocab: Vocab, seed: int = 0):
        super().__init__()
        self.encoder = encoder
        self.head = Linear(encoder.cfg.dim, len(vocab), np.random.default_rng(seed + 17))
        object.__setattr__(self, "vocab", vocab)
        self._freeze_pretrain_only()

    def _pretrain_only(self):
        for name, p in self.encoder.named_parameters():
            if name == "mask_embed" or name.startswith("head."):
                yield p

    def _freeze_pretrain_only(self):
        for p in self._pretrain_only():
            p.freeze()

    def freeze_encoder(self):
        self.encoder.freeze()

    def unfreeze_encoder(self):
        self.encoder.unfreeze()
        self._freeze_pretrain_only()

    def log_probs(self, features: np.ndarray) -> Tensor:
        states = self.encoder.forward(features, mask=None)
        return T.log_softmax(self.head(self.encoder.final_norm(states[-1])))

    def transcribe(self, features: np.ndarray, beam_width: int = 1) -> str:
        with T.no_grad():
            lattice = self.log_probs(features)
        if beam_width <= 1:
            ids = ctc_greedy_decode(lattice)
        else:
            ids = ctc_beam_decode(lattice, beam_width)
        return self.vocab.decode(ids)


def save_asr_model(model: CtcModel, path, metadata_extra: dict | None = None) -> None:
    from .nn import save_checkpoint

    meta = {
        "kind": "asr",
        "encoder_cfg": model.encoder.cfg.to_json(),
        "n_classes": str(model.encoder.n_classes),
        "vocab": json.dumps(model.vocab.symbols, ensure_ascii=False),
    }
    meta.update(metadata_extra or {})
    save_checkpoint(model, path, meta)


def load_asr_model(path) -> CtcModel:
    from .nn import load_checkpoint, read_checkpoint

    _, meta = read_checkpoint(path)
    if meta.get("kind") != "asr":
        raise ConfigError(f"checkpoint kind {meta.get('kind')!r} is not an asr model")
    encoder = SpeechEncoder(
        SpeechEncoderConfig.from_json(meta["encoder_cfg"]), int(meta["n_classes"])
    )
    model = CtcModel(encoder, Vocab(json.loads(meta["vocab"])))
    load_checkpoint(path, model, strict=True)
    return model


@dataclass
class FinetuneConfig:
    steps: int = 2000
    lr: float = 3e-3
    batch_size: int = 2
    freeze_encoder_steps: int = 0
    eval_every: int = 50
    seed: int = 0


def finetune_ctc(encoder: SpeechEncoder, examples, vocab: Vocab,
                 cfg: FinetuneConfig = FinetuneConfig(), heldout=None,
                 stop_at_zero_wer: bool = False):
    """CTC fine-tuning over (features, transcript) pairs.

    Transcripts must already be normalized; a symbol outside the vocab is an
    error naming it. ``heldout`` pairs, when given, are scored with WER at
    every evaluation point. Returns (model, history) with history rows of
    (step, loss, train_wer_or_None).
    """
    encoded = []
    for features, transcript in examples:
        ids = vocab.encode(transcript)  # raises naming any unknown symbol
        encoded.append((np.asarray(features, dtype=np.float64), transcript, ids))

    model = CtcModel(encoder, vocab, seed=cfg.seed)
    if cfg.steps == 0:
        return model, []

    opt = Adam(model, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    if cfg.freeze_encoder_steps > 0:
        model.freeze_encoder()

    history = []
    step = 0
    while step < cfg.steps:
        if step == cfg.freeze_encoder_steps and cfg.freeze_encoder_steps > 0:
            model.unfreeze_encoder()
        picks = rng.choice(len(encoded), size=min(cfg.batch_size, len(encoded)),
                           replace=False)
        losses = []
        for i in picks:
            features, _, ids = encoded[i]
            lattice = model.log_probs(features)
            losses.append(ctc_loss(lattice, ids))
        loss = losses[0]
        for extra in losses[1:]:
            loss = loss + extra
        loss = loss / len(losses)
        opt.zero_grad()
        loss.backward()
        opt.step()
        step += 1

        if step % cfg.eval_every == 0 or step == cfg.steps:
            refs = [t for _, t, _ in encoded]
            hyps = [model.transcribe(f) for f, _, _ in encoded]
            train_wer = wer(refs, hyps)
            if heldout:
                held_refs = [t for _, t in heldout]
                held_hyps = [model.transcribe(np.asarray(f)) for f, _ in heldout]
                log.info("step %d heldout WER %.3f", step, wer(held_refs, held_hyps))
            history.append((step, loss.item(), train_wer))
            if stop_at_zero_wer and train_wer == 0.0:
                break
        else:
            history.append((step, loss.item(), None))
    return model, history
