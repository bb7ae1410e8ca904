import json

import numpy as np
import pytest

from igt.corpus import BOS, PAD, UNK, CorpusConfigError, CorpusSpec, bat_corpus_spec, build_vocab, generate_corpus
from igt.decode import (
    DecodeConfig,
    DriftReport,
    PromptResult,
    apply_repetition_penalty,
    bench_json,
    domain_counts,
    generate,
    is_drifted,
    next_logits,
    run_drift_bench,
    side_by_side,
    trajectory,
    trap_prompts,
)
from igt.gate import GateConfig
from igt.model import IdeaGatedLM, ModelConfig

LEX = {"A": {"owl", "moth", "pup"}, "B": {"joker", "cape", "robin"}}


class TestRepetitionPenalty:
    def test_example(self):
        out = apply_repetition_penalty(np.array([2.4, 2.3]), [0], 1.2)
        np.testing.assert_allclose(out, [2.0, 2.3])

    def test_negative_logit_is_multiplied(self):
        out = apply_repetition_penalty(np.array([-1.0, 0.5]), [0, 0], 1.5)
        np.testing.assert_allclose(out, [-1.5, 0.5])

    def test_rho_one_is_identity(self):
        z = np.array([1.0, -2.0, 3.0])
        assert np.array_equal(apply_repetition_penalty(z, [0, 1, 2], 1.0), z)

    def test_does_not_mutate_input(self):
        z = np.array([2.0, 1.0])
        apply_repetition_penalty(z, [0], 2.0)
        assert z.tolist() == [2.0, 1.0]


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(mode="beam"), dict(repetition_penalty=0.9), dict(mode="sample", temperature=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            DecodeConfig(**kw)


class TestClassifier:
    def test_on_topic(self):
        assert not is_drifted(["owl", "moth", "the", "pup"], "A", LEX)

    def test_all_other_domain(self):
        assert is_drifted(["joker"] * 20, "A", LEX)

    def test_tie_is_not_drift(self):
        assert not is_drifted(["owl", "joker"], "A", LEX)

    def test_window_counts_content_only(self):
        words = ["owl"] + ["the"] * 30 + ["joker", "cape"]
        assert domain_counts(words, LEX, ignore={"the"}, window=2) == {"A": 1, "B": 1}
        assert is_drifted(words, "A", LEX, ignore={"the"}, window=3)
        assert not is_drifted(words, "A", LEX, window=20)

    def test_trajectory(self):
        assert trajectory(["owl", "the", "cape"], LEX) == ["A", None, "B"]


@pytest.fixture(scope="module")
def small():
    spec = bat_corpus_spec(doc_count=30, doc_length=16)
    vocab = build_vocab(generate_corpus(spec))
    cfg = ModelConfig(V=vocab.size, d_model=16, n_layers=1, n_heads=2, context_len=64, lora_rank=2, idea_window=5)
    return spec, vocab, IdeaGatedLM(cfg, seed=0), IdeaGatedLM(cfg, seed=1)


class TestGenerate:
    def test_alpha_zero_rho_one_equals_plain_argmax(self, small):
        _, _, model, _ = small
        prompt = [BOS, 5, 6, 7]
        got = generate(model, prompt, DecodeConfig(alpha=0.0, repetition_penalty=1.0, max_new_tokens=6)).tokens
        ids = list(prompt)
        for _ in range(6):
            h = model.forward_hidden(ids)
            z = model.token_logits(h).data[-1].copy()
            z[[UNK, BOS, PAD]] = -np.inf
            ids.append(int(np.argmax(z)))
        assert got == ids[len(prompt):]

    def test_gate_changes_logits(self, small):
        _, _, model, _ = small
        a = next_logits(model, [BOS, 4, 5], 0.0, GateConfig())
        b = next_logits(model, [BOS, 4, 5], 0.5, GateConfig())
        assert not np.array_equal(a, b)

    def test_seeded_sampling_is_deterministic(self, small):
        _, _, model, _ = small
        cfg = DecodeConfig(mode="sample", seed=3, max_new_tokens=8)
        assert generate(model, [BOS, 4], cfg).tokens == generate(model, [BOS, 4], cfg).tokens

    def test_never_emits_specials(self, small):
        _, _, model, _ = small
        model.params["head.w"].data[:, BOS] += 100.0
        try:
            out = generate(model, [BOS, 4], DecodeConfig(max_new_tokens=5)).tokens
        finally:
            model.params["head.w"].data[:, BOS] -= 100.0
        assert not {UNK, BOS, PAD} & set(out)

    def test_truncates_at_context(self, small):
        _, _, model, _ = small
        gen = generate(model, [4] * 60, DecodeConfig(max_new_tokens=10))
        assert gen.truncated and len(gen.tokens) == 4

    def test_empty_prompt(self, small):
        with pytest.raises(ValueError):
            generate(small[2], [], DecodeConfig())


class TestTrapPrompts:
    def test_end_on_bridge_in_domain_context(self):
        spec = bat_corpus_spec()
        lex = spec.exclusive_lexicons()
        for p in trap_prompts(spec, 30, seed=2):
            assert p.words[-1] in spec.bridge_words
            assert p.domain == "animal"
            assert not set(p.words) & lex["comics"]

    def test_seeded(self):
        spec = bat_corpus_spec()
        assert trap_prompts(spec, 5, seed=1) == trap_prompts(spec, 5, seed=1)

    def test_needs_bridge_words(self):
        spec = bat_corpus_spec()
        bare = CorpusSpec(spec.domains, [], spec.glue_words)
        with pytest.raises(CorpusConfigError):
            trap_prompts(bare, 3)


class TestBench:
    def test_schema_and_determinism(self, small):
        spec, vocab, a, b = small
        cfg = DecodeConfig(max_new_tokens=8)
        r1 = run_drift_bench(a, b, vocab, spec, 4, cfg)
        r2 = run_drift_bench(a, b, vocab, spec, 4, cfg)
        out = json.loads(bench_json(*r1))
        assert {"baseline_drift_rate", "gated_drift_rate"} <= set(out)
        assert out["baseline"]["alpha"] == 0.0
        assert bench_json(*r1) == bench_json(*r2)
        assert "drift rate" in side_by_side(*r1)

    def test_gate_ablation_matches_baseline(self, small):
        spec, vocab, a, _ = small
        cfg = DecodeConfig(max_new_tokens=8, alpha=0.0)
        base, gated = run_drift_bench(a, a, vocab, spec, 4, cfg)
        assert [r.generation for r in base.results] == [r.generation for r in gated.results]
        assert base.drift_rate == gated.drift_rate

    def test_rate(self):
        r = DriftReport("gated", "A", 0, 0.5)
        for i, d in enumerate([True, False, False, True]):
            r.results.append(PromptResult(i, "p", "g", [], {}, d))
        assert r.drift_rate == 0.5 and r.to_dict()["generation_count"] == 4
