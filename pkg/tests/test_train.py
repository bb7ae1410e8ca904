import math

import numpy as np
import pytest

from igt import tensor as tt
from igt.corpus import BOS, bat_corpus_spec, build_vocab, generate_corpus, split_documents
from igt.gate import GateConfig
from igt.model import IdeaGatedLM, ModelConfig
from igt.objective import LossWeights
from igt.tensor import Tensor
from igt.train import (
    AdamWConfig,
    AdamWState,
    TrainConfig,
    TrainingDivergedError,
    TrainLog,
    adamw_step,
    clip_grads,
    eval_windows,
    evaluate_ppl,
    forward_losses,
    make_dataset,
    ppl_from_loss,
    prepare_arm,
    pretrain_backbone,
    sample_batch,
    stream,
    token_nll,
    train_arm,
)


def param(v, trainable=True):
    return Tensor(np.asarray(v, dtype=np.float32), requires_grad=trainable)


class TestAdamW:
    def test_zero_grad_no_decay_is_identity(self):
        p = {"w": param([[1.0, -2.0]])}
        adamw_step(p, {"w": np.zeros((1, 2), np.float32)}, AdamWState(), AdamWConfig(weight_decay=0.0))
        assert p["w"].data.tolist() == [[1.0, -2.0]]

    def test_first_step_closed_form(self):
        # m_hat / sqrt(v_hat) == 1 for the first step, so the update is -lr
        p = {"w": param([[0.5]])}
        adamw_step(p, {"w": np.ones((1, 1), np.float32)}, AdamWState(), AdamWConfig(lr=1e-2, weight_decay=0.0))
        assert abs(p["w"].data[0, 0] - (0.5 - 1e-2)) < 1e-7

    def test_pure_decay_shrinks(self):
        p = {"w": param([[2.0, 4.0]])}
        cfg = AdamWConfig(lr=0.1, weight_decay=0.5)
        adamw_step(p, {"w": np.zeros((1, 2), np.float32)}, AdamWState(), cfg)
        np.testing.assert_allclose(p["w"].data, [[2.0 * 0.95, 4.0 * 0.95]], rtol=1e-6)

    def test_one_dim_tensors_not_decayed(self):
        p = {"b": param([3.0])}
        adamw_step(p, {"b": np.zeros(1, np.float32)}, AdamWState(), AdamWConfig(lr=0.1, weight_decay=0.5))
        assert p["b"].data.tolist() == [3.0]

    def test_frozen_untouched(self):
        p = {"w": param([[1.0]], trainable=False)}
        adamw_step(p, {"w": np.ones((1, 1), np.float32)}, AdamWState(), AdamWConfig())
        assert p["w"].data.tolist() == [[1.0]]

    def test_two_steps_match_reference(self):
        cfg = AdamWConfig(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.1)
        p = {"w": param([[1.0]])}
        state = AdamWState()
        w, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate([0.3, -0.7], start=1):
            adamw_step(p, {"w": np.full((1, 1), g, np.float32)}, state, cfg)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w * (1 - 0.1 * 0.1)
            w -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert abs(p["w"].data[0, 0] - w) < 1e-6

    def test_nan_grad_names_step(self):
        p = {"w": param([[1.0]])}
        state = AdamWState(step=6)
        with pytest.raises(TrainingDivergedError, match="step 7"):
            adamw_step(p, {"w": np.full((1, 1), np.nan, np.float32)}, state, AdamWConfig())

    def test_clip(self):
        g = {"a": np.array([3.0, 4.0], np.float32)}
        assert clip_grads(g, 1.0) == 5.0
        assert abs(np.linalg.norm(g["a"]) - 1.0) < 1e-5
        g = {"a": np.array([0.3, 0.4], np.float32)}
        clip_grads(g, 1.0)
        assert g["a"].tolist() == pytest.approx([0.3, 0.4])


class TestData:
    def test_stream_prefixes_bos(self):
        assert stream([[5, 6], [7]]).tolist() == [BOS, 5, 6, BOS, 7]

    def test_sample_batch_shape_and_seed(self):
        data = np.arange(100)
        a = sample_batch(np.random.default_rng(0), data, 4, 10)
        assert a.shape == (4, 11)
        assert np.array_equal(a, sample_batch(np.random.default_rng(0), data, 4, 10))
        assert np.all(np.diff(a, axis=1) == 1)

    def test_eval_windows_tile(self):
        w = eval_windows(np.arange(25), 8)
        assert w.shape == (3, 9)
        assert w[1, 0] == w[0, -1]

    def test_empty_validation(self):
        with pytest.raises(ValueError):
            eval_windows(np.arange(3), 8)


class TestPerplexity:
    def test_reported_loss_to_ppl(self):
        assert abs(ppl_from_loss(2.05) - 7.77) < 0.01

    def test_uniform_model_gives_v(self):
        cfg = ModelConfig(V=12, d_model=8, n_heads=2, context_len=16, idea_window=4)
        m = IdeaGatedLM(cfg, seed=0)
        m.params["head.w"].data[:] = 0
        windows = np.random.default_rng(0).integers(0, 12, size=(3, 9))
        assert abs(evaluate_ppl(m, windows)["ppl"] / 12 - 1) < 1e-3

    def test_hand_scored_sequence(self):
        cfg = ModelConfig(V=8, d_model=8, n_heads=2, context_len=16, idea_window=4)
        m = IdeaGatedLM(cfg, seed=4)
        w = np.array([[3, 1, 4, 1]])
        h = m.forward_hidden(w[0, :-1]).data
        z = h.astype(np.float64) @ m.params["head.w"].data.astype(np.float64)
        logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
        manual = -np.mean([logp[0, 1], logp[1, 4], logp[2, 1]])
        assert abs(evaluate_ppl(m, w)["val_token_loss"] - manual) < 1e-5

    def test_token_nll_shape(self):
        cfg = ModelConfig(V=8, d_model=8, n_heads=2, context_len=16, idea_window=4)
        w = np.zeros((5, 7), dtype=int)
        assert token_nll(IdeaGatedLM(cfg), w, batch_size=2).shape == (5, 6)


def test_log_csv_round_trip(tmp_path):
    tl = TrainLog()
    tl.add_step(0, 0.0, 3.5, 3.0, 0.5, 1.25)
    tl.add_eval(0, 0.0, 2.05, 2.1)
    tl.save(tmp_path / "log.csv")
    back = TrainLog.load(tmp_path / "log.csv")
    assert back.rows[0]["L_total"] == 3.5 and back.evals()[0]["val_token_loss"] == 2.05
    assert back.to_csv() == tl.to_csv()


# ---------------------------------------------------------------------------
# small end-to-end runs


@pytest.fixture(scope="module")
def tiny():
    spec = bat_corpus_spec(doc_count=80, doc_length=24, seed=1)
    texts = generate_corpus(spec)
    vocab = build_vocab(texts)
    tr, va = split_documents(texts, seed=1, val_fraction=0.1)
    data = make_dataset(tr, va, vocab)
    mc = ModelConfig(V=vocab.size, d_model=16, n_layers=1, n_heads=2, context_len=24, lora_rank=2, idea_window=5)
    tc = TrainConfig(steps=20, batch_size=4, seq_len=16, lr=3e-3, eval_every=10, val_windows=4, seed=1)
    backbone, _ = pretrain_backbone(data, mc, tc)
    return data, backbone, tc


def _train(tiny, arm, **kw):
    data, backbone, tc = tiny
    cfg = TrainConfig(**{**tc.__dict__, "arm": arm, "lr": 1e-2, **kw})
    return train_arm(arm, backbone, data, cfg, GateConfig(ramp_steps=10))


class TestArms:
    def test_backbone_frozen_after_pretrain(self, tiny):
        assert not tiny[1].trainable()

    def test_deterministic(self, tiny):
        assert _train(tiny, "gated")[1].to_csv() == _train(tiny, "gated")[1].to_csv()

    def test_init_equivalence(self, tiny):
        base, gated = _train(tiny, "baseline")[1], _train(tiny, "gated")[1]
        assert base.steps()[0]["L_token"] == gated.steps()[0]["L_token"]

    def test_alpha_column(self, tiny):
        steps = _train(tiny, "gated")[1].steps()
        assert steps[0]["alpha"] == 0.0 and steps[10]["alpha"] == 0.5 and steps[5]["alpha"] == 0.25
        assert all(r["alpha"] == 0.0 for r in _train(tiny, "baseline")[1].steps())

    def test_baseline_has_no_idea_loss(self, tiny):
        assert all(r["L_total"] == r["L_token"] for r in _train(tiny, "baseline")[1].steps())

    def test_only_expected_groups_move(self, tiny):
        _, backbone, _ = tiny
        base, _ = _train(tiny, "baseline")
        gated, _ = _train(tiny, "gated")
        for m in (base, gated):
            assert m.fingerprint("backbone") == backbone.fingerprint("backbone")
            assert m.fingerprint("head") == backbone.fingerprint("head")
        fresh = prepare_arm(backbone, "gated", tiny[2].seed)
        assert base.fingerprint("idea") == fresh.fingerprint("idea")
        assert gated.fingerprint("idea") != fresh.fingerprint("idea")

    def test_gated_eval_logs_ungated_value(self, tiny):
        ev = _train(tiny, "gated")[1].evals()
        assert all("val_token_loss_ungated" in r for r in ev)
        assert ev[-1]["alpha"] == 0.5

    def test_missing_backbone_path(self, tiny, tmp_path):
        with pytest.raises(FileNotFoundError):
            train_arm("gated", tmp_path / "none.igt", tiny[0], tiny[2])

    def test_unknown_arm(self):
        with pytest.raises(ValueError):
            TrainConfig(arm="other")


@pytest.mark.parametrize("detach", [True, False])
def test_detach_switch_controls_lora_grad(tiny, detach):
    data, backbone, tc = tiny
    model = prepare_arm(backbone, "gated", 0)
    for k, t in model.group("lora").items():
        if k.endswith(".B"):
            t.data[:] = 0.1
    batch = sample_batch(np.random.default_rng(0), data.train_stream(), 2, 12)
    with tt.tape():
        losses = forward_losses(model, batch, 0.5, GateConfig(), data.idea_mask(), LossWeights(1.0), True, detach)
        tt.backward(losses.idea)
    lora_grads = [t.grad for t in model.group("lora").values()]
    if detach:
        assert all(g is None or not np.any(g) for g in lora_grads)
    else:
        assert any(g is not None and np.any(g) for g in lora_grads)


def test_random_init_ppl_near_v():
    cfg = ModelConfig(V=50, d_model=16, n_heads=2, context_len=32, idea_window=5)
    windows = np.random.default_rng(0).integers(0, 50, size=(4, 17))
    ppl = evaluate_ppl(IdeaGatedLM(cfg, seed=0), windows)["ppl"]
    assert 0.8 * 50 < ppl < 1.2 * 50


def test_pretrained_backbone_beats_unigram(tiny):
    from igt.train import unigram_ppl

    data, backbone, tc = tiny
    windows = eval_windows(data.val_stream(), tc.seq_len, tc.val_windows)
    assert evaluate_ppl(backbone, windows)["ppl"] < unigram_ppl(data.train_docs, windows, data.V)


def test_fresh_arm_matches_backbone_loss(tiny):
    data, backbone, tc = tiny
    windows = eval_windows(data.val_stream(), tc.seq_len, tc.val_windows)
    frozen = evaluate_ppl(backbone, windows)["val_token_loss"]
    for arm in ("baseline", "gated"):
        assert abs(evaluate_ppl(prepare_arm(backbone, arm, 0), windows)["val_token_loss"] - frozen) < 1e-5
