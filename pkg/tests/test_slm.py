"""Fusion model: instruction data, aligner, splicing, generation, parsing."""

import numpy as np
import pytest

from conftest import finite_diff_grad, max_rel_error

from slmforge.curate import SegmentRecord
from slmforge.errors import ConfigError, GraphError
from slmforge.pretrain import SpeechEncoder, SpeechEncoderConfig
from slmforge.slm import (
    MODES,
    CausalLM,
    CausalLMConfig,
    CharTokenizer,
    ChatTemplate,
    FusionTrainConfig,
    SpeechAligner,
    build_instruction_dataset,
    completion_mask,
    detect_repetition_loop,
    extract_multilayer_features,
    fusion_loss,
    fusion_loss_on_example,
    generate,
    load_fusion,
    parse_cot_output,
    read_instruction_dataset,
    render_chat,
    rule_table_phonemizer,
    save_fusion,
    train_aligner,
    train_lm,
    write_instruction_dataset,
)
from slmforge.tensor import Tensor, tsum


def _record(id="r0", transcript="waaw", translation="yes"):
    return SegmentRecord(
        id=id, source_path="x.wav", offset_s=0.0, duration_s=4.0, speaker="S0",
        quality_score=4.0, sample_rate=16000, transcript=transcript,
        translation=translation,
    )


def _tok(texts):
    return CharTokenizer.from_texts(texts)


# ---------------------------------------------------------------------------
# Tokenizer and template


def test_special_markers_are_atomic_tokens():
    tok = _tok(["abc"])
    ids = tok.encode("<|user|>a<|audio|>b<|assistant|>c<|end|>")
    assert len(ids) == 7
    assert tok.decode(ids) == "<|user|>a<|audio|>b<|assistant|>c<|end|>"


def test_tokenizer_unknown_char_errors():
    tok = _tok(["abc"])
    with pytest.raises(ConfigError, match="'z'"):
        tok.encode("z")


def test_render_contains_exactly_one_placeholder_and_final():
    text = render_chat(ChatTemplate(), "Transcribe the audio.",
                       [("translate", "hello")], "waaw")
    assert text.count("<|audio|>") == 1
    assert "STEP[translate]: hello\n" in text
    assert "FINAL: waaw<|end|>" in text


def test_completion_mask_covers_assistant_tokens_only():
    template = ChatTemplate()
    text = render_chat(template, "Transcribe the audio.", [], "waaw")
    tok = _tok([text])
    ids = tok.encode(text)
    mask = completion_mask(ids, tok)
    start = ids.index(tok.token_id(template.assistant_marker))
    assert all(m == 0 for m in mask[: start + 1])
    assert all(m == 1 for m in mask[start + 1 :])
    assert tok.decode([i for i, m in zip(ids, mask) if m]) == "FINAL: waaw<|end|>"


# ---------------------------------------------------------------------------
# Instruction dataset


def test_transcribe_mode_renders_final_line_by_hand():
    # oracle: assemble the expected string manually
    examples, tok, skipped = build_instruction_dataset([_record()], ["transcribe"])
    assert skipped == []
    ex = examples[0]
    expected = ("<|user|><|audio|> Transcribe the audio.<|assistant|>"
                "FINAL: waaw<|end|>")
    assert ex.text == expected
    masked_text = tok.decode(
        [i for i, m in zip(tok.encode(ex.text), ex.loss_mask) if m]
    )
    assert masked_text == "FINAL: waaw<|end|>"


def test_missing_translation_skips_with_reason():
    rec = _record(translation=None)
    examples, _, skipped = build_instruction_dataset([rec], ["translate_transcribe"])
    assert examples == []
    assert skipped == [("r0", "translate_transcribe", "missing translation")]


def test_six_modes_one_complete_record_six_examples():
    examples, _, skipped = build_instruction_dataset([_record()], list(MODES))
    assert len(examples) == 6
    assert skipped == []
    assert {ex.mode for ex in examples} == set(MODES)


def test_mode_final_fields():
    examples, _, _ = build_instruction_dataset([_record()], list(MODES))
    finals = {ex.mode: ex.final for ex in examples}
    assert finals["transcribe"] == "waaw"
    assert finals["translate"] == "yes"
    assert finals["transcribe_translate"] == "yes"
    assert finals["phonemize_transcribe"] == "waaw"


def test_phonemizer_rule_table_applies():
    g2p = rule_table_phonemizer({"aa": "A:", "w": "U"})
    examples, _, _ = build_instruction_dataset(
        [_record()], ["phonemize_transcribe"], phonemizer=g2p
    )
    assert "STEP[phonemize]: UA:U" in examples[0].text


def test_dataset_file_round_trip(tmp_path):
    examples, tok, _ = build_instruction_dataset([_record()], ["transcribe", "translate"])
    path = tmp_path / "sft.jsonl"
    write_instruction_dataset(path, examples, tok, {"modes": ["transcribe", "translate"]})
    back, tok2, header = read_instruction_dataset(path)
    assert [ex.text for ex in back] == [ex.text for ex in examples]
    assert tok2.symbols == tok.symbols
    assert header["modes"] == ["transcribe", "translate"]


# ---------------------------------------------------------------------------
# Aligner


def test_aligner_zero_weights_bias_constant():
    aligner = SpeechAligner(6, 4, hidden=8, seed=0)
    aligner.fc1.weight.data[:] = 0.0
    aligner.fc1.bias.data[:] = 0.0
    aligner.fc2.weight.data[:] = 0.0
    aligner.fc2.bias.data[:] = 0.7
    out = aligner.align(np.random.default_rng(0).standard_normal((5, 6)))
    assert np.allclose(out.data, 0.7)
    assert out.data.shape == (5, 4)


def test_aligner_gradient_matches_finite_differences():
    aligner = SpeechAligner(5, 3, hidden=7, seed=1)
    feats = np.random.default_rng(1).standard_normal((4, 5))
    cot = np.random.default_rng(2).standard_normal((4, 3))

    loss = tsum(aligner.align(feats) * Tensor(cot))
    loss.backward()

    for name, p in aligner.named_parameters():
        base = p.data.copy()

        def f(x, p=p, base=base):
            p.data = x
            out = float((aligner.align(feats).data * cot).sum())
            p.data = base
            return out

        numeric = finite_diff_grad(f, base.copy())
        assert max_rel_error(p.grad, numeric) < 1e-4, name


def test_aligner_dim_mismatch():
    aligner = SpeechAligner(5, 3, seed=0)
    with pytest.raises(GraphError):
        aligner.align(np.zeros((4, 6)))


# ---------------------------------------------------------------------------
# Multi-layer features


ENC_CFG = SpeechEncoderConfig(input_dim=8, dim=16, n_layers=3, n_heads=2)


def test_multilayer_feature_dim_is_layers_times_dim():
    enc = SpeechEncoder(ENC_CFG, n_classes=4, seed=0)
    feats = np.random.default_rng(0).standard_normal((30, 8))
    out = extract_multilayer_features(enc, feats, layer_sel=[0, 1, 2, 3])
    assert out.shape == (enc.output_len(30), 4 * 16)


def test_single_layer_selection_equals_hidden_states():
    enc = SpeechEncoder(ENC_CFG, n_classes=4, seed=0)
    feats = np.random.default_rng(1).standard_normal((30, 8))
    out = extract_multilayer_features(enc, feats, layer_sel=[2])
    states = enc.forward(feats)
    assert np.array_equal(out, states[2].data)


def test_default_selection_all_transformer_layers_no_extra_downsampling():
    enc = SpeechEncoder(ENC_CFG, n_classes=4, seed=0)
    feats = np.random.default_rng(2).standard_normal((30, 8))
    out = extract_multilayer_features(enc, feats)
    assert out.shape == (enc.output_len(30), ENC_CFG.n_layers * 16)


def test_invalid_layer_index():
    enc = SpeechEncoder(ENC_CFG, n_classes=4, seed=0)
    with pytest.raises(ConfigError):
        extract_multilayer_features(enc, np.zeros((30, 8)), layer_sel=[7])


# ---------------------------------------------------------------------------
# Fusion loss


def _fusion_setup(seed=0):
    examples, tok, _ = build_instruction_dataset(
        [_record(), _record(id="r1", transcript="deedeet", translation="ok")],
        ["transcribe"],
    )
    lm = CausalLM(CausalLMConfig(vocab_size=tok.vocab_size, dim=16, n_layers=1,
                                 n_heads=2), seed=seed)
    lm.freeze()
    aligner = SpeechAligner(12, 16, hidden=8, seed=seed + 1)
    rng = np.random.default_rng(seed)
    speech = rng.standard_normal((5, 12))
    return lm, aligner, tok, examples, speech


def test_fused_sequence_length_arithmetic():
    lm, aligner, tok, examples, speech = _fusion_setup()
    ids = tok.encode(examples[0].text)
    t_prime = 5
    # probe through the logits row count of a forward pass
    from slmforge import tensor as T

    with T.no_grad():
        emb_parts = [
            lm.embed(np.asarray(ids[:1])),
            aligner.align(speech),
            lm.embed(np.asarray(ids[2:])),
        ]
        fused = T.concat(emb_parts, axis=0)
        logits = lm.forward_embeddings(fused)
    assert logits.data.shape[0] == len(ids) - 1 + t_prime


def test_fusion_loss_trains_only_aligner():
    lm, aligner, tok, examples, speech = _fusion_setup()
    enc_before = {n: p.data.copy() for n, p in lm.named_parameters()}
    loss = fusion_loss(lm, aligner, speech, tok.encode(examples[0].text),
                       examples[0].loss_mask, tok)
    loss.backward()
    for name, p in lm.named_parameters():
        assert p.grad is None
        assert p.data.tobytes() == enc_before[name].tobytes()
    assert any(p.grad is not None for p in aligner.parameters())


def test_fusion_loss_bit_invariant_to_masked_out_targets():
    lm, aligner, tok, examples, speech = _fusion_setup(seed=3)
    ids = tok.encode(examples[0].text)
    mask = examples[0].loss_mask

    def run(targets):
        aligner.zero_grad()
        loss = fusion_loss(lm, aligner, speech, ids, mask, tok,
                           targets_override=targets)
        loss.backward()
        grads = np.concatenate([p.grad.reshape(-1) for p in aligner.parameters()])
        return loss.item(), grads

    base_loss, base_grads = run(None)
    perturbed = list(ids)
    rng = np.random.default_rng(0)
    for j, m in enumerate(mask):
        if not m:
            perturbed[j] = int(rng.integers(0, tok.vocab_size))
    loss2, grads2 = run(perturbed)
    assert loss2 == base_loss
    assert np.array_equal(base_grads, grads2)


def test_fusion_loss_requires_single_placeholder():
    lm, aligner, tok, examples, speech = _fusion_setup()
    bad = tok.encode("FINAL: waaw<|end|>")
    with pytest.raises(GraphError, match="placeholder"):
        fusion_loss(lm, aligner, speech, bad, [1] * len(bad), tok)


def test_fusion_loss_on_example_runs_through_encoder():
    enc = SpeechEncoder(SpeechEncoderConfig(input_dim=8, dim=16, n_layers=2),
                        n_classes=4, seed=1)
    examples, tok, _ = build_instruction_dataset([_record()], ["transcribe"])
    lm = CausalLM(CausalLMConfig(vocab_size=tok.vocab_size, dim=16, n_layers=1,
                                 n_heads=2), seed=0)
    lm.freeze()
    aligner = SpeechAligner(2 * 16, 16, hidden=8, seed=2)
    feats = np.random.default_rng(3).standard_normal((20, 8))
    loss = fusion_loss_on_example(lm, aligner, enc, examples[0], feats, tok)
    assert np.isfinite(loss.item())


def test_lm_causality_future_tokens_do_not_change_past_logits():
    tok = _tok(["abcdef"])
    lm = CausalLM(CausalLMConfig(vocab_size=tok.vocab_size, dim=16, n_layers=2,
                                 n_heads=2), seed=5)
    from slmforge import tensor as T

    base = tok.encode("abcdef")
    changed = list(base)
    changed[-1] = tok.encode("a")[0]
    with T.no_grad():
        la = lm.forward_tokens(np.asarray(base)).data
        lb = lm.forward_tokens(np.asarray(changed)).data
    assert np.array_equal(la[:-1], lb[:-1])


def test_train_lm_reduces_loss():
    texts = ["FINAL: waaw<|end|>", "FINAL: deedeet<|end|>"]
    tok = _tok(texts)
    lm = CausalLM(CausalLMConfig(vocab_size=tok.vocab_size, dim=16, n_layers=1,
                                 n_heads=2), seed=0)
    history = train_lm(lm, [tok.encode(t) for t in texts], steps=60, lr=3e-3, seed=0)
    assert history[-1][1] < history[0][1]


def test_train_aligner_requires_frozen_lm():
    lm, aligner, tok, examples, speech = _fusion_setup()
    lm.unfreeze()
    with pytest.raises(ConfigError, match="frozen"):
        train_aligner(lm, aligner, [(speech, examples[0])], tok,
                      FusionTrainConfig(steps=1))


# ---------------------------------------------------------------------------
# Generation and parsing


def test_generate_max_tokens_zero_sets_truncation():
    lm, aligner, tok, examples, speech = _fusion_setup()
    out = generate(lm, aligner, speech, "transcribe", tok, max_tokens=0)
    assert out.text == ""
    assert out.truncated


def test_generate_deterministic():
    lm, aligner, tok, examples, speech = _fusion_setup(seed=7)
    a = generate(lm, aligner, speech, "transcribe", tok, max_tokens=10)
    b = generate(lm, aligner, speech, "transcribe", tok, max_tokens=10)
    assert a.text == b.text
    assert a.truncated == b.truncated


def test_parse_cot_step_and_final():
    parsed = parse_cot_output("STEP[translate]: hello\nFINAL: waaw")
    assert parsed.steps == {"translate": "hello"}
    assert parsed.final == "waaw"
    assert not parsed.malformed


def test_parse_cot_missing_final_falls_back():
    parsed = parse_cot_output("some rambling\nmore text")
    assert parsed.malformed
    assert parsed.final == "more text"


def test_parse_cot_empty_text():
    parsed = parse_cot_output("")
    assert parsed.malformed
    assert parsed.final == ""


def test_parse_of_render_is_identity_for_every_mode():
    records = [_record()]
    examples, tok, _ = build_instruction_dataset(records, list(MODES))
    for ex in examples:
        assistant = ex.text.split("<|assistant|>")[1].replace("<|end|>", "")
        parsed = parse_cot_output(assistant, ex.mode)
        assert not parsed.malformed
        assert parsed.final == ex.final


def test_repetition_loop_detection():
    assert detect_repetition_loop("ab ab ab ab", n=1, k=3)
    assert not detect_repetition_loop("the quick brown fox", n=1, k=3)


def test_repetition_loop_boundary_exactly_k():
    text_k = "x y " * 3  # 3 repeats of the 2-gram
    text_k1 = "x y " * 2
    assert detect_repetition_loop(text_k.strip(), n=2, k=3)
    assert not detect_repetition_loop(text_k1.strip(), n=2, k=3)


def test_repetition_loop_validates_params():
    with pytest.raises(ConfigError):
        detect_repetition_loop("a", n=0, k=3)
    with pytest.raises(ConfigError):
        detect_repetition_loop("a", n=1, k=1)


# ---------------------------------------------------------------------------
# Fusion checkpoints


def test_fusion_save_load_round_trip(tmp_path):
    lm, aligner, tok, examples, speech = _fusion_setup(seed=11)
    path = tmp_path / "fusion.ckpt"
    save_fusion(lm, aligner, tok, path, layer_sel=[1])
    lm2, aligner2, tok2, layer_sel = load_fusion(path)
    assert layer_sel == [1]
    assert tok2.symbols == tok.symbols
    a = generate(lm, aligner, speech, "transcribe", tok, max_tokens=8)
    b = generate(lm2, aligner2, speech, "transcribe", tok2, max_tokens=8)
    assert a.text == b.text
