import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from uttdistill.checkpoint import load_arrays, state_checksum
from uttdistill.corpus import Batch, Waveform, load_manifest
from uttdistill.distill import (TRAIN_PRESETS, DistillError, EmaSchedule, MaskSpec, NonFiniteLoss, TrainConfig,
                                breakdown, ema_update, epoch_plans, expected_mask_fraction, init_state,
                                load_checkpoint, loss_frame, loss_utterance, lr_at_step, pretrain, read_loss_log,
                                sample_mask, save_checkpoint, tau_at_step, total_loss, train_step, utterance_pool)
from uttdistill.model import StudentOutput, TeacherTargets, preset


def _mask(indices, n):
    return MaskSpec(np.asarray(indices, dtype=np.int64), 0.5, 5, n)


def _loop_mask(n, p, l, rng):
    """Independent re-implementation: explicit loop over span starts."""
    masked = [False] * n
    for i in range(n):
        if rng.random() < p:
            for j in range(i, min(i + l, n)):
                masked[j] = True
    return masked


class TestSampleMask:
    def test_p0_empty(self, rng):
        m = sample_mask(50, 0.0, 5, rng)
        assert m.M == 0 and m.masked_indices.size == 0

    def test_p1_full(self, rng):
        m = sample_mask(10, 1.0, 5, rng)
        assert m.masked_indices.tolist() == list(range(10))

    def test_truncates_at_end(self):
        class Last:
            def random(self, n):
                out = np.ones(n)
                out[-2] = 0.0
                return out
        m = sample_mask(10, 0.5, 5, Last())
        assert m.masked_indices.tolist() == [8, 9]

    @pytest.mark.parametrize("n,p,l", [(6, 0.3, 3), (5, 0.5, 5), (7, 0.2, 2)])
    def test_closed_form_matches_enumeration(self, n, p, l):
        exact = 0.0
        for starts in itertools.product([0, 1], repeat=n):
            weight = math.prod(p if s else 1 - p for s in starts)
            covered = sum(any(starts[j] for j in range(max(0, i - l + 1), i + 1)) for i in range(n))
            exact += weight * covered / n
        assert expected_mask_fraction(n, p, l) == pytest.approx(exact, abs=1e-12)

    def test_monte_carlo_fraction(self):
        n, p, l, trials = 100, 0.5, 5, 10_000
        target = expected_mask_fraction(n, p, l)
        rng = np.random.default_rng(0)
        ours = np.mean([sample_mask(n, p, l, rng).M / n for _ in range(trials)])
        assert abs(ours - target) <= 0.02
        oracle_rng = np.random.default_rng(1)
        oracle = np.mean([sum(_loop_mask(n, p, l, oracle_rng)) / n for _ in range(2000)])
        assert abs(oracle - target) <= 0.02

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 200), st.floats(0, 1), st.integers(1, 10), st.integers(0, 2**31))
    def test_invariants(self, n, p, l, seed):
        m = sample_mask(n, p, l, np.random.default_rng(seed))
        idx = m.masked_indices
        assert np.all(np.diff(idx) > 0)
        assert idx.size == 0 or (idx[0] >= 0 and idx[-1] < n)
        assert m.M == idx.size

    def test_errors(self, rng):
        with pytest.raises(DistillError):
            sample_mask(0, 0.5, 5, rng)
        with pytest.raises(DistillError):
            sample_mask(5, 0.5, 0, rng)


class TestUtterancePool:
    def _targets(self, n=6, d=4, seed=0):
        return TeacherTargets(torch.from_numpy(np.random.default_rng(seed).standard_normal((n, d))))

    def test_token(self):
        u = torch.tensor([[1.0, 2.0, 3.0, 4.0]], dtype=torch.float64)
        out = StudentOutput(u, torch.zeros(6, 4, dtype=torch.float64))
        u_bar, _ = utterance_pool(out, self._targets(), "token")
        assert torch.equal(u_bar, u[0])

    def test_constant_teacher(self):
        frame = torch.tensor([0.5, -1.0, 2.0, 3.0], dtype=torch.float64)
        t = TeacherTargets(frame.expand(7, 4).clone())
        out = StudentOutput(torch.zeros(0, 4, dtype=torch.float64), torch.zeros(7, 4, dtype=torch.float64))
        _, y_bar = utterance_pool(out, t, "global")
        assert torch.equal(y_bar, frame)

    def test_chunk_mean(self):
        rows = np.random.default_rng(3).standard_normal((8, 5))
        out = StudentOutput(torch.from_numpy(rows), torch.zeros(6, 5, dtype=torch.float64))
        u_bar, _ = utterance_pool(out, self._targets(d=5), "chunk")
        expected = [math.fsum(rows[::-1, c]) / 8 for c in range(5)]
        np.testing.assert_allclose(u_bar.numpy(), expected, rtol=1e-6)

    def test_global_uses_frames(self):
        frames = torch.arange(12, dtype=torch.float64).reshape(3, 4)
        out = StudentOutput(torch.zeros(0, 4, dtype=torch.float64), frames)
        u_bar, _ = utterance_pool(out, self._targets(n=3), "global")
        assert torch.equal(u_bar, frames.mean(0))

    @pytest.mark.parametrize("variant,n_u", [("token", 2), ("chunk", 1), ("global", 1), ("token", 0)])
    def test_mismatch(self, variant, n_u):
        out = StudentOutput(torch.zeros(n_u, 4), torch.zeros(6, 4))
        with pytest.raises(DistillError):
            utterance_pool(out, self._targets(), variant)


class TestLosses:
    def test_utterance_zero(self):
        v = torch.tensor([1.0, 2.0, 3.0])
        assert loss_utterance(v, v.clone()).item() == 0.0

    def test_utterance_offset(self):
        y = torch.tensor([0.1, -2.0, 3.5, 4.0], dtype=torch.float64)
        assert loss_utterance(y + 0.5, y).item() == pytest.approx(0.25, abs=1e-15)

    def test_utterance_hand(self):
        u = torch.tensor([1.0, 0.0, -1.0, 2.0], dtype=torch.float64)
        y = torch.tensor([0.0, 2.0, 1.0, 2.0], dtype=torch.float64)
        # (1 + 4 + 4 + 0) / 4
        assert loss_utterance(u, y).item() == 2.25

    def test_utterance_dim_mismatch(self):
        with pytest.raises(DistillError):
            loss_utterance(torch.zeros(3), torch.zeros(4))

    def test_frame_reads_only_masked(self):
        ys = torch.zeros(4, 3)
        yt = torch.zeros(4, 3)
        yt[1] = 5.0
        yt[3] = -2.0
        res = loss_frame(ys, yt, _mask([0, 2], 4))
        assert res.value.item() == 0.0 and not res.empty_mask

    def test_frame_empty(self):
        res = loss_frame(torch.ones(4, 3), torch.zeros(4, 3), _mask([], 4))
        assert res.value.item() == 0.0 and res.empty_mask

    def test_frame_hand(self):
        ys = torch.tensor([[1.0, 2.0], [9.0, 9.0], [0.0, 1.0], [7.0, 7.0]], dtype=torch.float64)
        yt = torch.tensor([[0.0, 0.0], [0.0, 0.0], [2.0, 1.0], [0.0, 0.0]], dtype=torch.float64)
        # row 0: 1 + 4, row 2: 4 + 0 -> 9 over 2 frames x 2 dims
        assert loss_frame(ys, yt, _mask([0, 2], 4)).value.item() == 9 / 4

    def test_frame_shape_mismatch(self):
        with pytest.raises(DistillError):
            loss_frame(torch.zeros(4, 3), torch.zeros(5, 3), _mask([0], 4))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_frame_locality(self, seed):
        g = np.random.default_rng(seed)
        n = int(g.integers(2, 30))
        mask = sample_mask(n, 0.3, 3, g)
        ys, yt = torch.from_numpy(g.standard_normal((n, 4))), torch.from_numpy(g.standard_normal((n, 4)))
        perturbed = yt.clone()
        unmasked = np.setdiff1d(np.arange(n), mask.masked_indices)
        perturbed[unmasked] += torch.from_numpy(g.standard_normal((unmasked.size, 4)))
        a, b = loss_frame(ys, yt, mask).value, loss_frame(ys, perturbed, mask).value
        assert a.numpy().tobytes() == b.numpy().tobytes()

    def test_total_examples(self):
        assert total_loss(0.5, 0.25, 1.0) == 0.75
        assert total_loss(0.0, 0.1, 10.0) == 1.0
        assert breakdown(0.3, 0.7, 0.0).total == 0.3

    @settings(max_examples=100)
    @given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 100), st.floats(0, 10))
    def test_total_affine(self, l_frm, l_utt, alpha, delta):
        b = breakdown(l_frm, l_utt, alpha)
        assert b.total == b.l_frm + b.alpha * b.l_utt
        lhs = total_loss(l_frm, l_utt + delta, alpha) - total_loss(l_frm, l_utt, alpha)
        assert lhs == pytest.approx(alpha * delta, rel=1e-9, abs=1e-9)


class TestSchedules:
    def test_tau_endpoints_exact(self):
        s = EmaSchedule(0.999, 0.99999, 1000)
        assert tau_at_step(s, 0) == 0.999
        assert tau_at_step(s, 1000) == 0.99999
        assert tau_at_step(s, 5000) == 0.99999

    def test_tau_midpoint(self):
        assert tau_at_step(EmaSchedule(0.999, 0.99999, 1000), 500) == pytest.approx(0.999495, abs=1e-15)

    def test_tau_negative(self):
        with pytest.raises(DistillError):
            tau_at_step(EmaSchedule(), -1)

    def test_tau_invalid_schedule(self):
        with pytest.raises(DistillError):
            EmaSchedule(0.99, 0.9)

    def test_lr(self):
        total, peak, frac = 1000, 7.5e-5, 0.05
        assert lr_at_step(0, total, peak, frac) == 0.0
        assert lr_at_step(50, total, peak, frac) == peak
        assert abs(lr_at_step(total, total, peak, frac)) <= 1e-12
        assert lr_at_step(25, total, peak, frac) == pytest.approx(peak / 2)
        mid = 50 + (total - 50) // 2
        assert lr_at_step(mid, total, peak, frac) == pytest.approx(peak / 2, rel=1e-3)
        values = [lr_at_step(s, total, peak, frac) for s in range(50, total + 1)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestEma:
    def _pair(self, t_val, s_val):
        teacher = {"extractor.w": torch.tensor([t_val]), "blocks.0.w": torch.tensor([t_val])}
        student = {"extractor.w": torch.tensor([s_val]), "blocks.0.w": torch.tensor([s_val])}
        return teacher, student

    def test_scalar(self):
        t, s = self._pair(2.0, 4.0)
        ema_update(t, s, 0.5)
        assert t["blocks.0.w"].item() == 3.0 and t["extractor.w"].item() == 4.0

    def test_tau_one(self):
        t, s = self._pair(2.0, 4.0)
        ema_update(t, s, 1.0)
        assert t["blocks.0.w"].item() == 2.0 and t["extractor.w"].item() == 4.0

    def test_tau_zero(self):
        s_net = init_state(preset("tiny"), TrainConfig(), 10).student
        t_net = init_state(preset("tiny"), TrainConfig(seed=1), 10).teacher
        ema_update(t_net, s_net, 0.0)
        assert state_checksum(t_net) == state_checksum(s_net)

    def test_shape_mismatch(self):
        with pytest.raises(DistillError):
            ema_update({"a": torch.zeros(2)}, {"a": torch.zeros(3)}, 0.5)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 1), st.integers(0, 2**31))
    def test_contraction(self, tau, seed):
        g = np.random.default_rng(seed)
        t = {"blocks.w": torch.from_numpy(g.standard_normal(20))}
        s = {"blocks.w": torch.from_numpy(g.standard_normal(20))}
        before = (t["blocks.w"] - s["blocks.w"]).abs().clone()
        ema_update(t, s, tau)
        after = (t["blocks.w"] - s["blocks.w"]).abs()
        assert torch.all(after <= tau * before + 1e-12)


def _toy_batch(seed=0, n=2):
    g = np.random.default_rng(seed)
    waves = [Waveform(0.3 * g.standard_normal(int(g.integers(8000, 16000))).astype(np.float32)) for _ in range(n)]
    return Batch(waves, [f"toy{i}" for i in range(n)], 10**6)


class TestTrainStep:
    def test_zero_lr_freezes(self):
        state = init_state(preset("tiny"), TrainConfig(lr_peak=0.0, weight_decay=0.0), 10)
        before_s = state_checksum(state.student)
        before_t = {n: p.clone() for n, p in state.teacher.named_parameters()}
        state, losses = train_step(_toy_batch(), state)
        assert state_checksum(state.student) == before_s
        # teacher == student, so the EMA is a fixed point up to float32 rounding
        for n, p in state.teacher.named_parameters():
            torch.testing.assert_close(p, before_t[n], rtol=1e-6, atol=1e-7)
        assert state.step == 1 and math.isfinite(losses.total)

    def test_deterministic(self, tmp_path):
        cfg = TrainConfig(lr_peak=1e-3)
        state = init_state(preset("tiny"), cfg, 10)
        save_checkpoint(state, tmp_path / "s.ckpt")
        _, a = train_step(_toy_batch(), load_checkpoint(tmp_path / "s.ckpt"))
        _, b = train_step(_toy_batch(), load_checkpoint(tmp_path / "s.ckpt"))
        assert a == b

    def test_gradient_firewall(self):
        cfg = TrainConfig(lr_peak=1e-2, warmup_frac=0.1)
        state = init_state(preset("tiny"), cfg, 10)
        state.step = 5
        old_teacher = {n: p.clone() for n, p in state.teacher.named_parameters()}
        tau = tau_at_step(state.ema_schedule, state.step)
        state, _ = train_step(_toy_batch(), state)
        assert all(p.grad is None for p in state.teacher.parameters())
        for name, p in state.teacher.named_parameters():
            s = dict(state.student.named_parameters())[name].detach()
            if name.startswith("extractor."):
                assert torch.equal(p, s)
            else:
                torch.testing.assert_close(p, tau * old_teacher[name] + (1 - tau) * s)

    def test_student_moves(self):
        state = init_state(preset("tiny"), TrainConfig(lr_peak=1e-2, warmup_frac=0.1), 10)
        state.step = 2
        before = state_checksum(state.student)
        state, _ = train_step(_toy_batch(), state)
        assert state_checksum(state.student) != before

    def test_non_finite_names_utterance(self):
        state = init_state(preset("tiny"), TrainConfig(), 10)
        batch = _toy_batch(n=2)
        batch.waveforms[1].samples[100] = np.nan
        with pytest.raises(NonFiniteLoss, match="toy1"):
            train_step(batch, state)

    def test_update_freq_accumulates(self):
        state = init_state(preset("tiny"), TrainConfig(lr_peak=1e-2, update_freq=2, warmup_frac=0.1), 10)
        state, _ = train_step(_toy_batch(0), state)
        assert state.step == 0 and state.batches_seen == 1
        state, _ = train_step(_toy_batch(1), state)
        assert state.step == 1 and state.batches_seen == 2

    def test_loss_decreases(self, small_records):
        recs = small_records[:20]
        cfg = replace(TRAIN_PRESETS["desk"], epochs=25, token_budget=50000, seed=3)
        flat = [b for plan in epoch_plans(recs, cfg, 0) for b in plan][:50]
        assert len(flat) == 50
        state = init_state(preset("desk"), cfg, len(flat))
        totals = []
        for b in flat:
            state, losses = train_step(b, state)
            totals.append(losses.total)
        assert np.mean(totals[-10:]) < np.mean(totals[:10])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        state = init_state(preset("tiny", backbone_style="mae_decoder"), TrainConfig(lr_peak=1e-2), 10)
        state.step = 3
        state, _ = train_step(_toy_batch(), state)
        p1 = save_checkpoint(state, tmp_path / "a.ckpt")
        back = load_checkpoint(p1)
        p2 = save_checkpoint(back, tmp_path / "b.ckpt")
        assert p1.read_bytes() == p2.read_bytes()
        assert state_checksum(back.student) == state_checksum(state.student)
        assert back.step == state.step and back.model_cfg == state.model_cfg and back.train_cfg == state.train_cfg

    def test_endianness_recorded(self, tmp_path):
        state = init_state(preset("tiny"), TrainConfig(), 10)
        arrays, meta = load_arrays(save_checkpoint(state, tmp_path / "a.ckpt"))
        assert all(a.dtype.byteorder in ("<", "=", "|") for a in arrays.values())
        assert meta["tau_position"]["tau_start"] == 0.999


class TestPretrain:
    def _cfg(self, **kw):
        kw = {"epochs": 2, "token_budget": 60000, "checkpoint_every": 3, **kw}
        return replace(TRAIN_PRESETS["desk"], **kw)

    def test_zero_epochs(self, small_corpus, tmp_path):
        final = pretrain(small_corpus, preset("tiny"), self._cfg(epochs=0), tmp_path)
        a, _ = load_arrays(final)
        b, _ = load_arrays(tmp_path / "init.ckpt")
        assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)

    def test_resume_matches_uninterrupted(self, small_corpus, tmp_path):
        cfg = self._cfg()
        pretrain(small_corpus, preset("tiny"), cfg, tmp_path / "full")
        pretrain(small_corpus, preset("tiny"), cfg, tmp_path / "cut", stop_after=5)
        # simulate rows written after the last checkpoint before the crash
        with open(tmp_path / "cut" / "loss_log.tsv", "a") as fh:
            fh.write("6\t1\t1\t1\t1\t1\n")
        pretrain(small_corpus, preset("tiny"), cfg, tmp_path / "cut")
        full = (tmp_path / "full" / "loss_log.tsv").read_bytes()
        assert (tmp_path / "cut" / "loss_log.tsv").read_bytes() == full
        a, _ = load_arrays(tmp_path / "full" / "final.ckpt")
        b, _ = load_arrays(tmp_path / "cut" / "final.ckpt")
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_log_format(self, small_corpus, tmp_path):
        pretrain(small_corpus, preset("tiny"), self._cfg(epochs=1), tmp_path)
        lines = (tmp_path / "loss_log.tsv").read_text().splitlines()
        assert lines[0] == "step\tl_frm\tl_utt\ttotal\ttau\tlr"
        rows = read_loss_log(tmp_path / "loss_log.tsv")
        assert [r["step"] for r in rows] == list(range(1, len(rows) + 1))
        assert rows[0]["tau"] == 0.99 and rows[0]["lr"] == 0.0

    def test_config_change_refuses_resume(self, small_corpus, tmp_path):
        pretrain(small_corpus, preset("tiny"), self._cfg(epochs=1), tmp_path, stop_after=2)
        with pytest.raises(DistillError, match="different configuration"):
            pretrain(small_corpus, preset("tiny"), self._cfg(epochs=1, alpha=2.0), tmp_path)
