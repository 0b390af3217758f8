"""The ``slmforge`` command line: one executable, nine subcommands.

Workflow order: curate -> pretrain -> finetune-asr -> transcribe ->
build-sft -> train-aligner -> infer -> eval / report.

Exit codes: 0 success, 1 usage error, 2 runtime error. Configuration merges
defaults < --config JSON < flags; the seed comes from SLMFORGE_SEED and is
overridden by --seed. Every artifact-producing subcommand embeds the fully
resolved config and its hash in the output, so identical config + seed
reproduce outputs byte-for-byte in deterministic mode.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .audio import SpectralConfig, log_mel, read_wav, resample, standardize
from .curate import Manifest, PipelineConfig, run_pipeline, trim_to_speech
from .errors import ConfigError, SlmforgeError
from .metrics import MetricRow, cer, chrf, render_report, wer
from .pretrain import (
    MaskSpec,
    PretrainConfig,
    SpeechEncoderConfig,
    continued_pretrain,
    load_encoder,
    save_encoder,
)
from . import asr as asr_mod
from . import slm as slm_mod

log = logging.getLogger("slmforge")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return cfg


def _resolve_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("SLMFORGE_SEED")
    return int(env) if env else 0


def _config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _records_with_audio(manifest: Manifest, spectral: SpectralConfig):
    """Yield (record, standardized logmel FeatureMatrix) per manifest record."""
    cache = {}
    for rec in manifest.records:
        if rec.source_path not in cache:
            cache[rec.source_path] = read_wav(rec.source_path)
        buf = resample(cache[rec.source_path], rec.sample_rate)
        seg = buf.slice_seconds(rec.offset_s, rec.offset_s + rec.duration_s)
        yield rec, standardize(log_mel(seg, spectral))


def _wav_features(path, sample_rate: int, spectral: SpectralConfig):
    # trim to the speech extent so decode-time features match the curated
    # segments models were trained on
    buf = trim_to_speech(resample(read_wav(path), sample_rate))
    return standardize(log_mel(buf, spectral))


# ---------------------------------------------------------------------------
# Subcommand handlers


def cmd_curate(args) -> int:
    overrides = _load_config(args.config)
    if args.sample_rate is not None:
        overrides["sample_rate"] = args.sample_rate
    allowed = set(PipelineConfig.__dataclass_fields__)
    unknown = [k for k in overrides if k not in allowed]
    if unknown:
        raise ConfigError(f"unknown curate config keys: {unknown}")
    cfg = PipelineConfig(**overrides)
    jobs = 1 if args.deterministic else args.jobs
    manifest = run_pipeline(args.paths, cfg, jobs=jobs)
    manifest.write(args.out)
    h = manifest.header
    print(
        f"curate: {h['n_kept']}/{h['n_candidates']} segments kept "
        f"({h['total_hours']:.4f} h), rejected {h['rejected']}, "
        f"{len(h['warnings'])} warnings -> {args.out}"
    )
    return 0


def cmd_pretrain(args) -> int:
    cfg_raw = _load_config(args.config)
    seed = _resolve_seed(args)
    spectral = SpectralConfig(n_mels=cfg_raw.get("n_mels", 40))
    manifest = Manifest.read(args.manifest)
    if not manifest.records:
        raise ConfigError(f"manifest {args.manifest} has no records")
    dataset = [features for _, features in _records_with_audio(manifest, spectral)]

    encoder_cfg = SpeechEncoderConfig(
        input_dim=spectral.n_mels,
        dim=cfg_raw.get("dim", 32),
        n_layers=cfg_raw.get("n_layers", 2),
        n_heads=cfg_raw.get("n_heads", 2),
    )
    train_cfg = PretrainConfig(
        epochs=cfg_raw.get("epochs", 33),
        lr=cfg_raw.get("lr", 0.0005),
        batch_seconds=cfg_raw.get("batch_seconds", 87.5),
        target_layer=cfg_raw.get("target_layer", 1),
        k=cfg_raw.get("k", 32),
        refresh_schedule=(tuple(cfg_raw["refresh_schedule"])
                          if "refresh_schedule" in cfg_raw else None),
        mask=MaskSpec(
            mask_prob=cfg_raw.get("mask_prob", 0.065),
            span_len=cfg_raw.get("span_len", 10),
        ),
    )
    encoder, history = continued_pretrain(
        dataset, train_cfg, encoder_cfg, seed=seed,
        init_checkpoint=args.init, max_steps=cfg_raw.get("max_steps"),
    )
    resolved = {"config": cfg_raw, "seed": seed}
    save_encoder(
        encoder, args.out,
        {"config": json.dumps(resolved, sort_keys=True),
         "config_hash": _config_hash(resolved)},
    )
    last = history[-1][1] if history else float("nan")
    print(f"pretrain: {len(history)} steps, final loss {last:.4f} -> {args.out}")
    return 0


def cmd_finetune_asr(args) -> int:
    cfg_raw = _load_config(args.config)
    seed = _resolve_seed(args)
    encoder = load_encoder(args.encoder)
    spectral = SpectralConfig(n_mels=encoder.cfg.input_dim)
    manifest = Manifest.read(args.manifest)

    rules = (asr_mod.load_lexicon(args.lexicon, args.language) if args.lexicon
             else asr_mod.builtin_rules(args.language))
    train, heldout = [], []
    for rec, features in _records_with_audio(manifest, spectral):
        if not rec.transcript:
            continue
        text = asr_mod.normalize_text(rec.transcript, rules)
        target = (heldout if rec.split == "test" else train)
        target.append((features.data, text))
    if not train:
        raise ConfigError("no records with transcripts to fine-tune on")

    vocab = (asr_mod.Vocab.from_file(args.vocab) if args.vocab
             else asr_mod.Vocab.from_texts([t for _, t in train + heldout]))
    cfg = asr_mod.FinetuneConfig(
        steps=cfg_raw.get("steps", 2000),
        lr=cfg_raw.get("lr", 3e-3),
        batch_size=cfg_raw.get("batch_size", 2),
        freeze_encoder_steps=cfg_raw.get("freeze_encoder_steps", 0),
        eval_every=cfg_raw.get("eval_every", 50),
        seed=seed,
    )
    model, history = asr_mod.finetune_ctc(encoder, train, vocab, cfg,
                                          heldout=heldout or None)
    resolved = {"config": cfg_raw, "seed": seed}
    asr_mod.save_asr_model(
        model, args.out,
        {"config": json.dumps(resolved, sort_keys=True),
         "config_hash": _config_hash(resolved)},
    )
    evals = [(s, w) for s, _, w in history if w is not None]
    tail = f", train WER {evals[-1][1]:.3f}" if evals else ""
    print(f"finetune-asr: {len(history)} steps{tail} -> {args.out}")
    return 0


def cmd_transcribe(args) -> int:
    model = asr_mod.load_asr_model(args.ckpt)
    spectral = SpectralConfig(n_mels=model.encoder.cfg.input_dim)
    features = _wav_features(args.wav, args.sample_rate, spectral)
    print(model.transcribe(features.data, beam_width=args.beam))
    return 0


def cmd_build_sft(args) -> int:
    manifest = Manifest.read(args.manifest)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    examples, tokenizer, skipped = slm_mod.build_instruction_dataset(
        manifest.records, modes
    )
    resolved = {"modes": modes}
    slm_mod.write_instruction_dataset(
        args.out, examples, tokenizer,
        {"config_hash": _config_hash(resolved), "modes": modes},
    )
    print(f"build-sft: {len(examples)} examples, {len(skipped)} skipped -> {args.out}")
    return 0


def cmd_train_aligner(args) -> int:
    cfg_raw = _load_config(args.config)
    seed = _resolve_seed(args)
    examples, tokenizer, _header = slm_mod.read_instruction_dataset(args.sft)
    if not examples:
        raise ConfigError(f"no examples in {args.sft}")
    encoder = load_encoder(args.encoder)
    spectral = SpectralConfig(n_mels=encoder.cfg.input_dim)
    manifest = Manifest.read(args.manifest)
    by_id = {rec.id: rec for rec in manifest.records}

    feature_cache = {}
    for rec, features in _records_with_audio(manifest, spectral):
        feature_cache[rec.id] = slm_mod.extract_multilayer_features(
            encoder, features.data
        )
    pairs = []
    for ex in examples:
        if ex.audio_id not in by_id:
            raise ConfigError(f"sft example references unknown audio id {ex.audio_id!r}")
        pairs.append((feature_cache[ex.audio_id], ex))

    lm_cfg = slm_mod.CausalLMConfig(
        vocab_size=tokenizer.vocab_size,
        dim=cfg_raw.get("d_lm", 64),
        n_layers=cfg_raw.get("lm_layers", 2),
        n_heads=cfg_raw.get("lm_heads", 2),
    )
    lm = slm_mod.CausalLM(lm_cfg, seed=seed)
    lm_steps = cfg_raw.get("lm_steps", 300)
    if lm_steps:
        corpus = slm_mod.lm_stand_in_sequences(
            examples, tokenizer, lambda aid: feature_cache[aid].shape[0]
        )
        slm_mod.train_lm(lm, corpus, steps=lm_steps,
                         lr=cfg_raw.get("lm_lr", 3e-3), seed=seed)
    lm.freeze()

    d_in = pairs[0][0].shape[1]
    aligner = slm_mod.SpeechAligner(d_in, lm_cfg.dim,
                                    hidden=cfg_raw.get("aligner_hidden"), seed=seed + 1)
    fusion_cfg = slm_mod.FusionTrainConfig(
        steps=cfg_raw.get("steps", 3000),
        lr=cfg_raw.get("lr", 1e-4),
        batch_size=cfg_raw.get("batch_size", 2),
        seed=seed,
    )
    history = slm_mod.train_aligner(lm, aligner, pairs, tokenizer, fusion_cfg)
    resolved = {"config": cfg_raw, "seed": seed}
    slm_mod.save_fusion(
        lm, aligner, tokenizer, args.out,
        metadata_extra={"config": json.dumps(resolved, sort_keys=True),
                        "config_hash": _config_hash(resolved)},
    )
    last = history[-1][1] if history else float("nan")
    print(f"train-aligner: {len(history)} steps, final loss {last:.4f} -> {args.out}")
    return 0


def cmd_infer(args) -> int:
    if args.cot in (None, "", "none"):
        mode = args.task
    else:
        mode = f"{args.cot}_{args.task}"
    if mode not in slm_mod.MODES:
        raise ConfigError(
            f"no mode for task {args.task!r} with CoT step {args.cot!r}"
        )
    lm, aligner, tokenizer, layer_sel = slm_mod.load_fusion(args.fusion)
    encoder = load_encoder(args.encoder)
    spectral = SpectralConfig(n_mels=encoder.cfg.input_dim)
    features = _wav_features(args.wav, args.sample_rate, spectral)
    result = slm_mod.generate_from_encoder(
        lm, aligner, encoder, features.data, mode, tokenizer,
        max_tokens=args.max_tokens, layer_sel=layer_sel,
    )
    parsed = slm_mod.parse_cot_output(result.text, mode)
    looping = slm_mod.detect_repetition_loop(result.text)
    print(f"RAW: {result.text!r}")
    for name, text in parsed.steps.items():
        print(f"STEP[{name}]: {text}")
    print(f"FINAL: {parsed.final}")
    flags = []
    if parsed.malformed:
        flags.append("malformed")
    if result.truncated:
        flags.append("truncated")
    if looping:
        flags.append("repetition-loop")
    if flags:
        print(f"FLAGS: {','.join(flags)}")
    return 0


def _read_lines(path):
    return Path(path).read_text(encoding="utf-8").splitlines()


def cmd_eval(args) -> int:
    refs = _read_lines(args.refs)
    hyps = _read_lines(args.hyps)
    if len(refs) != len(hyps):
        raise ConfigError(
            f"refs ({len(refs)} lines) and hyps ({len(hyps)} lines) differ"
        )
    if not args.no_normalize:
        rules = (asr_mod.load_lexicon(args.lexicon, args.language) if args.lexicon
                 else asr_mod.builtin_rules(args.language))
        refs = [asr_mod.normalize_text(t, rules) for t in refs]
        hyps = [asr_mod.normalize_text(t, rules) for t in hyps]

    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in metrics if m not in ("wer", "cer", "chrf")]
    if unknown:
        raise ConfigError(f"unknown metrics: {unknown}")
    row = MetricRow(name=args.name, n_utterances=len(refs),
                    n_ref_words=sum(len(r.split()) for r in refs))
    if "wer" in metrics:
        row.wer = wer(refs, hyps)
    if "cer" in metrics:
        row.cer = cer(refs, hyps)
    if "chrf" in metrics:
        row.chrf = chrf(refs, hyps)
    if args.external_scores:
        scores = json.loads(Path(args.external_scores).read_text(encoding="utf-8"))
        if "bs_f1" not in scores:
            raise ConfigError("external scores file must provide a 'bs_f1' value")
        row.bs_f1 = float(scores["bs_f1"])

    print(render_report([row]), end="")
    if args.out:
        resolved = {"metrics": metrics, "normalize": not args.no_normalize}
        payload = {
            "config": resolved,
            "config_hash": _config_hash(resolved),
            "rows": json.loads(render_report([row], fmt="json")),
        }
        Path(args.out).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return 0


def cmd_report(args) -> int:
    raw = json.loads(Path(args.rows).read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise ConfigError("rows file must hold a JSON array of row objects")
    rows = []
    for d in raw:
        known = {k: d[k] for k in ("name", "wer", "cer", "chrf", "bs_f1") if k in d}
        extra = {k: v for k, v in d.items()
                 if k not in ("name", "wer", "cer", "chrf", "bs_f1")}
        rows.append(MetricRow(extra=extra, **known))
    text = render_report(rows, fmt=args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="" if text.endswith("\n") else "\n")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> _Parser:
    parser = _Parser(prog="slmforge", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"slmforge {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="override SLMFORGE_SEED (default 0)")
        p.add_argument("--jobs", type=int, default=1, help="worker pool size")
        p.add_argument("--deterministic", action="store_true",
                       help="force single-threaded deterministic mode")
        p.add_argument("--config", default=None, help="JSON config file")

    p = sub.add_parser("curate", help="filter raw audio into a manifest of utterances")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--sample-rate", type=int, default=None)
    p.add_argument("paths", nargs="+", metavar="WAV")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("pretrain", help="masked-prediction pretraining of the encoder")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--init", default=None, help="checkpoint for continued pretraining")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune-asr", help="CTC fine-tuning on transcribed segments")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--vocab", default=None, help="symbol-per-line vocab file")
    p.add_argument("--lexicon", default=None, help="digit verbalization lexicon JSON")
    p.add_argument("--language", default="en")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune_asr)

    p = sub.add_parser("transcribe", help="decode one WAV with a fine-tuned model")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--sample-rate", type=int, default=16000)
    p.set_defaults(func=cmd_transcribe)

    p = sub.add_parser("build-sft", help="render chain-of-thought instruction data")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--modes", default="transcribe")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_sft)

    p = sub.add_parser("train-aligner", help="fusion training of the speech aligner")
    common(p)
    p.add_argument("--sft", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_aligner)

    p = sub.add_parser("infer", help="run the fused speech LM on one WAV")
    common(p)
    p.add_argument("--fusion", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--task", required=True, choices=["transcribe", "translate"])
    p.add_argument("--cot", default="none",
                   help="CoT step before the task: none|phonemize|translate|transcribe|paraphrase")
    p.add_argument("--max-tokens", type=int, default=200)
    p.add_argument("--sample-rate", type=int, default=16000)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score hypothesis lines against references")
    common(p)
    p.add_argument("--refs", required=True)
    p.add_argument("--hyps", required=True)
    p.add_argument("--metrics", default="wer,cer,chrf")
    p.add_argument("--external-scores", default=None,
                   help="JSON file supplying a bs_f1 value")
    p.add_argument("--out", default=None, help="write a JSON report here")
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--lexicon", default=None)
    p.add_argument("--language", default="en")
    p.add_argument("--name", default="system")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render a metric table from row data")
    common(p)
    p.add_argument("--rows", required=True, help="JSON array of row objects")
    p.add_argument("--format", default="text", choices=["text", "json"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SLMFORGE_LOGLEVEL", "WARNING"))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except (SlmforgeError, OSError, ValueError) as exc:
        print(f"slmforge {args.command}: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())
