import math

import numpy as np
import pytest
import torch

from avsr.errors import NonFiniteGradient, NonFiniteLoss
from avsr.model import AvsrModel, ModalitySwitch
from avsr.toy import (
    ToyTaskSpec,
    featurize_utterances,
    generate_corpus,
    toy_model_config,
)
from avsr.training import (
    AdamMoments,
    DropoutPolicy,
    LrSchedule,
    TrainConfig,
    TrainingExample,
    adam_step,
    apply_modality_dropout,
    batch_gradient,
    evaluate_wer,
    lr_at,
    train,
)


class TestLrSchedule:
    def test_ramp_endpoints(self):
        s = LrSchedule.paper_default()
        assert s.lr_at(0) == 0.0
        assert s.lr_at(20_000) == 2e-3
        assert abs(s.lr_at(10_000) - 1e-3) < 1e-18

    def test_hold_then_strict_decay(self):
        s = LrSchedule.paper_default()
        assert s.lr_at(20_001) == 2e-3
        assert s.lr_at(70_000) == 2e-3
        samples = [s.lr_at(step) for step in range(70_001, 90_000, 1111)]
        assert all(a > b for a, b in zip(samples, samples[1:]))
        assert s.lr_at(70_000 + s.decay_half_life_steps) == pytest.approx(1e-3)

    def test_av_dropout_schedule_constant_until_100k(self):
        s = LrSchedule.paper_av_dropout()
        assert s.lr_at(20_000) == 4e-3
        assert s.lr_at(100_000) == 4e-3
        assert s.lr_at(100_001) < 4e-3

    def test_free_function(self):
        s = LrSchedule.paper_default()
        assert lr_at(5_000, s) == s.lr_at(5_000)

    def test_negative_step(self):
        with pytest.raises(ValueError):
            LrSchedule().lr_at(-1)


class TestDropoutPolicy:
    def test_no_dropout(self):
        rng = np.random.default_rng(0)
        switches = apply_modality_dropout(50, DropoutPolicy(0.0, 0.0), rng)
        assert all(sw == ModalitySwitch.BOTH for sw in switches)

    def test_always_drop_audio(self):
        rng = np.random.default_rng(0)
        switches = apply_modality_dropout(50, DropoutPolicy(1.0, 0.0), rng)
        assert all(sw == ModalitySwitch.VIDEO_ONLY for sw in switches)

    def test_binomial_band_and_never_both_off(self):
        rng = np.random.default_rng(99)
        policy = DropoutPolicy(p_drop_audio=0.3, p_drop_video=0.1)
        switches = apply_modality_dropout(10_000, policy, rng)
        audio_dropped = sum(not sw.audio_on for sw in switches)
        video_dropped = sum(not sw.video_on for sw in switches)
        assert all(sw.audio_on or sw.video_on for sw in switches)
        assert abs(audio_dropped - 3000) <= 150        # 99% band
        # video dropped only when audio kept: marginal (1 - 0.3) * 0.1
        assert abs(video_dropped - 700) <= 150

    def test_probability_validation(self):
        with pytest.raises(ValueError):
            DropoutPolicy(p_drop_audio=1.5)


class TestAdamStep:
    def make(self, value=1.0):
        params = {"w": torch.full((3,), value, dtype=torch.float64)}
        moments = AdamMoments.for_params(params)
        return params, moments

    def test_zero_gradient_freezes_weights_and_decays_moments(self):
        params, moments = self.make()
        # seed the moments with one real step, then feed zeros
        adam_step(params, {"w": torch.ones(3, dtype=torch.float64)}, moments, lr=0.0)
        m0 = moments.m["w"].clone()
        before = params["w"].clone()
        for _ in range(5):
            adam_step(params, {"w": torch.zeros(3, dtype=torch.float64)}, moments, lr=0.0)
        assert torch.equal(params["w"], before)
        assert moments.m["w"].abs().max() < m0.abs().max()

    def test_first_step_closed_form(self):
        params, moments = self.make(value=0.0)
        g = torch.tensor([0.5, -2.0, 1e-4], dtype=torch.float64)
        lr, eps = 1e-2, 1e-8
        adam_step(params, {"w": g.clone()}, moments, lr=lr, eps=eps)
        expected = -lr * g / (g.abs() + eps)
        torch.testing.assert_close(params["w"], expected, rtol=0, atol=1e-15)

    def test_constant_gradient_reaches_sign_step(self):
        params, moments = self.make(value=0.0)
        g = torch.tensor([0.3, -0.7, 2.0], dtype=torch.float64)
        lr = 1e-3
        prev = params["w"].clone()
        for _ in range(400):
            prev = params["w"].clone()
            adam_step(params, {"w": g.clone()}, moments, lr=lr)
        update = params["w"] - prev
        torch.testing.assert_close(
            update, -lr * torch.sign(g), rtol=1e-3, atol=1e-8
        )

    def test_non_finite_gradient_rejected(self):
        params, moments = self.make()
        bad = torch.tensor([1.0, float("nan"), 0.0], dtype=torch.float64)
        with pytest.raises(NonFiniteGradient):
            adam_step(params, {"w": bad}, moments, lr=1e-3)


def micro_spec(**kw):
    defaults = dict(
        num_train=8, num_heldout=4, symbols_per_utterance=2,
        video_frames_per_symbol=4, seed=3,
    )
    defaults.update(kw)
    return ToyTaskSpec(**defaults)


def micro_examples(spec):
    train_utts, held_utts = generate_corpus(spec)
    return featurize_utterances(train_utts, spec), featurize_utterances(held_utts, spec)


class TestBatchGradient:
    def test_accumulation_equals_single_large_batch(self):
        spec = micro_spec()
        train_ex, _ = micro_examples(spec)
        model = AvsrModel(toy_model_config(spec, dtype="float64"), seed=0)
        batch = train_ex[:6]
        switches = [ModalitySwitch.BOTH] * 3 + [ModalitySwitch.AUDIO_ONLY] * 3

        batch_gradient(model, batch, switches)
        accumulated = {
            n: p.grad.clone() for n, p in model.named_parameters() if p.grad is not None
        }

        # reference: one mean loss over every utterance, single backward
        model.zero_grad(set_to_none=False)
        dtype = model.config.torch_dtype()
        losses = []
        for ex, sw in zip(batch, switches):
            audio = torch.tensor(ex.audio_features[None], dtype=dtype)
            thumbs = (
                torch.tensor(ex.thumbnails[None], dtype=dtype) if sw.video_on else None
            )
            labels = torch.tensor(ex.label_ids[None], dtype=torch.int64)
            losses.append(model.full_loss(audio, thumbs, labels, sw))
        torch.stack(losses).mean().backward()
        for name, p in model.named_parameters():
            if p.grad is None:
                continue
            ref = p.grad
            acc = accumulated[name]
            scale = max(1.0, ref.abs().max().item())
            assert (acc - ref).abs().max().item() / scale < 1e-6, name


class TestTrainLoop:
    def test_bit_identical_reproducibility(self):
        spec = micro_spec()
        train_ex, held_ex = micro_examples(spec)
        cfg = TrainConfig(
            steps=8, batch_size=4, seed=11,
            schedule=LrSchedule(peak=2e-3, warmup_steps=4, hold_steps=100),
            train_switch=ModalitySwitch.AUDIO_ONLY, eval_every=100,
        )
        histories = []
        for _ in range(2):
            model = AvsrModel(toy_model_config(spec), seed=5)
            res = train(model, train_ex, held_ex, cfg, spec.inventory())
            histories.append(res.loss_history)
        assert histories[0] == histories[1]

    def test_dropout_changes_trajectory_but_stays_reproducible(self):
        spec = micro_spec()
        train_ex, held_ex = micro_examples(spec)
        base = dict(steps=6, batch_size=4, seed=2,
                    schedule=LrSchedule(peak=1e-3, warmup_steps=3, hold_steps=100),
                    eval_every=100)
        runs = {}
        for name, policy in (("none", DropoutPolicy()),
                             ("drop", DropoutPolicy(p_drop_audio=0.5))):
            model = AvsrModel(toy_model_config(spec), seed=5)
            cfg = TrainConfig(train_switch=ModalitySwitch.BOTH, dropout=policy, **base)
            runs[name] = train(model, train_ex, held_ex, cfg, spec.inventory()).loss_history
        assert runs["none"] != runs["drop"]

    def test_divergence_aborts(self):
        spec = micro_spec()
        train_ex, held_ex = micro_examples(spec)
        model = AvsrModel(toy_model_config(spec), seed=5)
        with torch.no_grad():
            model.joint.out_bias[0] = float("nan")
        cfg = TrainConfig(steps=2, batch_size=2, seed=0,
                          train_switch=ModalitySwitch.AUDIO_ONLY, eval_every=100)
        with pytest.raises(NonFiniteLoss):
            train(model, train_ex, held_ex, cfg, spec.inventory())

    def test_metrics_log_and_best_state(self):
        spec = micro_spec()
        train_ex, held_ex = micro_examples(spec)
        model = AvsrModel(toy_model_config(spec), seed=5)
        cfg = TrainConfig(steps=4, batch_size=4, seed=0,
                          schedule=LrSchedule(peak=1e-3, warmup_steps=2, hold_steps=10),
                          train_switch=ModalitySwitch.AUDIO_ONLY, eval_every=2)
        res = train(model, train_ex, held_ex, cfg, spec.inventory())
        assert len(res.metrics) == 4
        assert all(math.isfinite(r.loss) for r in res.metrics)
        assert res.metrics[1].heldout_wer is not None
        assert res.best_state
        assert math.isfinite(res.best_wer)
        model.load_state_dict(res.best_state)

    def test_multistyle_hook_runs(self):
        from avsr.toy import make_featurizer
        from avsr.audio_frontend import FrameRateMode

        spec = micro_spec()
        train_ex, held_ex = micro_examples(spec)
        model = AvsrModel(toy_model_config(spec), seed=5)
        cfg = TrainConfig(steps=3, batch_size=4, seed=0,
                          train_switch=ModalitySwitch.AUDIO_ONLY, eval_every=100,
                          multistyle_p=1.0)
        featurize = make_featurizer(spec, FrameRateMode.variable(spec.fps))
        res = train(model, train_ex, held_ex, cfg, spec.inventory(),
                    featurize_fn=featurize)
        assert all(math.isfinite(r.loss) for r in res.metrics)


class TestEvaluateWer:
    def test_untrained_model_reports(self):
        spec = micro_spec()
        _, held_ex = micro_examples(spec)
        model = AvsrModel(toy_model_config(spec), seed=5)
        rep = evaluate_wer(model, held_ex, spec.inventory(),
                           switch=ModalitySwitch.AUDIO_ONLY)
        assert rep.wer >= 0.0
        assert rep.num_ref_words == sum(len(e.transcript.split()) for e in held_ex)
