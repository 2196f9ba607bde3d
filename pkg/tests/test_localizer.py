import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from weakloc.localizer import (LocalizationResult, LocalizerConfig, align, combine, localize, peak_expand,
                               read_predictions, result_from_row, sharpen, write_predictions)
from weakloc.model import ForwardOutput, ModelConfig

distributions = st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=30).map(lambda x: np.array(x) / sum(x))


def output(alpha_a=None, alpha_v=None, w_a=0.5, w_v=0.5, label=1, scores=True):
    return ForwardOutput(
        logits=np.array([0.0, 1.0]), label=label,
        alpha_audio=None if alpha_a is None else np.asarray(alpha_a, dtype=float),
        alpha_visual=None if alpha_v is None else np.asarray(alpha_v, dtype=float),
        w_audio=w_a, w_visual=w_v, pooled_audio=None, pooled_visual=None, fused=np.zeros(1),
        scores_audio=np.zeros(1) if scores and alpha_a is not None else None,
        scores_visual=np.zeros(1) if scores and alpha_v is not None else None)


class TestConfig:
    @pytest.mark.parametrize("bad", [{"tau": 0.0}, {"tau": 1.5}, {"n_bins": 0}, {"audio_align": "mean"}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            LocalizerConfig(**bad)


class TestSharpen:
    def test_identity_at_tau_one(self):
        a = np.array([0.1, 0.2, 0.7])
        np.testing.assert_allclose(sharpen(a, 1.0), a, atol=1e-15)

    def test_hand_value(self):
        np.testing.assert_allclose(sharpen([0.2, 0.8], 0.5), [0.04 / 0.68, 0.64 / 0.68], atol=1e-12)
        np.testing.assert_allclose(sharpen([0.2, 0.8], 0.5), [0.0588, 0.9412], atol=1e-4)

    @pytest.mark.parametrize("tau", [0.05, 0.5, 1.0])
    def test_uniform_stays_uniform(self, tau):
        np.testing.assert_allclose(sharpen(np.full(7, 1 / 7), tau), np.full(7, 1 / 7), atol=1e-15)

    def test_no_underflow_at_small_tau(self):
        out = sharpen([1e-300, 1e-200, 1.0], 0.01)
        assert np.all(np.isfinite(out)) and out[2] == pytest.approx(1.0)

    def test_zero_mass_rejected(self):
        with pytest.raises(ValueError):
            sharpen([0.0, 0.0], 0.5)

    @settings(max_examples=100, deadline=None)
    @given(distributions, st.sampled_from([0.05, 0.25, 0.5, 1.0]))
    def test_order_and_argmax_preserved(self, a, tau):
        out = sharpen(a, tau)
        assert abs(out.sum() - 1) <= 1e-9
        assert int(np.argmax(out)) == int(np.argmax(a))
        i, j = np.argsort(a)[-2:]
        if a[j] > a[i] * (1 + 1e-9):
            assert out[j] > out[i]

    @settings(max_examples=60, deadline=None)
    @given(distributions)
    def test_peak_mass_monotone_in_tau(self, a):
        k = int(np.argmax(a))
        masses = [sharpen(a, tau)[k] for tau in (1.0, 0.5, 0.25, 0.05)]
        assert all(m2 >= m1 - 1e-12 for m1, m2 in zip(masses, masses[1:]))


class TestAlign:
    @pytest.mark.parametrize("method", ["maxpool", "interp"])
    def test_identity_resolution(self, method):
        a = np.array([0.1, 0.5, 0.2, 0.2])
        np.testing.assert_allclose(align(a, 4, method), a, atol=1e-15)

    def test_maxpool_hand_value(self):
        np.testing.assert_allclose(align([0.1, 0.9, 0.0, 0.0], 2, "maxpool"), [1.0, 0.0])

    def test_maxpool_bin_rule(self):
        # T=5 into N=2: timesteps 0,1,2 -> bin 0 (floor(t*2/5)), 3,4 -> bin 1
        np.testing.assert_allclose(align([0.1, 0.2, 0.3, 0.25, 0.15], 2, "maxpool"), [0.3 / 0.55, 0.25 / 0.55])

    def test_maxpool_upsampling_uses_nearest_timestep(self):
        np.testing.assert_allclose(align([0.25, 0.75], 4, "maxpool"), [0.125, 0.125, 0.375, 0.375])

    @pytest.mark.parametrize("method", ["maxpool", "interp"])
    def test_constant_stays_constant(self, method):
        np.testing.assert_allclose(align(np.full(13, 1 / 13), 50, method), np.full(50, 0.02), atol=1e-15)

    def test_interp_hand_value(self):
        # centers at 0.25, 0.75; bin centers 1/6, 1/2, 5/6
        np.testing.assert_allclose(align([0.0, 1.0], 3, "interp"), [0.0, 0.5, 1.0] / np.float64(1.5))


class TestCombine:
    def test_degenerate_weight(self):
        a = np.array([0.3, 0.7])
        np.testing.assert_array_equal(combine(a, [0.9, 0.1], 1.0, 0.0), a)

    def test_symmetric(self):
        np.testing.assert_array_equal(combine([1, 0], [0, 1], 0.5, 0.5), [0.5, 0.5])

    def test_convex_arithmetic(self):
        np.testing.assert_allclose(combine([0.8, 0.2], [0.2, 0.8], 0.75, 0.25), [0.65, 0.35])

    def test_single_modality(self):
        np.testing.assert_array_equal(combine(None, [0.2, 0.8], 0.0, 1.0), [0.2, 0.8])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            combine([0.5, 0.5], [1.0], 0.5, 0.5)

    @settings(max_examples=40, deadline=None)
    @given(distributions, st.floats(0, 1))
    def test_equal_inputs_ignore_weights(self, a, w):
        np.testing.assert_allclose(combine(a, a, w, 1 - w), a, atol=1e-15)


class TestPeakExpand:
    def test_mean_is_not_exceeded(self):
        start, end, peak = peak_expand([0.1, 0.6, 0.2, 0.05, 0.05], 5.0)
        assert (start, end, peak) == (1.0, 2.0, 1)

    def test_uniform_takes_first_bin(self):
        assert peak_expand(np.full(10, 0.1), 5.0) == (0.0, 0.5, 0)

    def test_contiguity(self):
        start, end, peak = peak_expand([0.4, 0.0, 0.4, 0.1, 0.1], 5.0)
        assert (start, end, peak) == (0.0, 1.0, 0)

    def test_expands_both_ways(self):
        assert peak_expand([0.0, 0.3, 0.4, 0.3, 0.0], 5.0) == (1.0, 4.0, 2)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=60), st.floats(0.5, 20))
    def test_interval_properties(self, beta, duration):
        b = np.array(beta)
        start, end, peak = peak_expand(b, duration)
        width = duration / len(b)
        assert 0 <= start < end <= duration
        assert start <= (peak + 0.5) * width <= end
        lo, hi = round(start / width), round(end / width) - 1
        inside = b[lo:hi + 1]
        others = [i for i in range(lo, hi + 1) if i != peak]
        assert all(b[i] > b.mean() for i in others)
        assert len(inside) == hi - lo + 1
        assert peak == int(np.argmax(b))


class TestLocalize:
    def test_audio_concentration(self):
        # 250 audio frames at 50 Hz; mass on frames covering 2.0-2.5 s
        alpha_a = np.full(250, 1e-4)
        alpha_a[100:125] = 1.0
        alpha_a /= alpha_a.sum()
        alpha_v = np.full(50, 1 / 50) + np.random.default_rng(0).uniform(0, 1e-4, 50)
        alpha_v /= alpha_v.sum()
        res = localize(output(alpha_a, alpha_v, 0.9, 0.1), LocalizerConfig(), 5.0)
        assert res.start_s < 2.5 and res.end_s > 2.0
        assert res.start_s >= 1.9 and res.end_s <= 2.6
        assert abs(res.beta.sum() - 1) <= 1e-5
        assert res.peak_bin == int(np.argmax(res.beta))

    def test_fallback_without_attention(self):
        res = localize(output(np.full(4, 0.25), np.full(2, 0.5)), LocalizerConfig(), 5.0,
                       ModelConfig(pooling="mean"))
        assert (res.start_s, res.end_s, res.fallback) == (0.0, 5.0, True)
        assert res.peak_time_s == 2.5

    def test_fallback_inferred_from_output(self):
        res = localize(output(np.full(4, 0.25), None, 1.0, 0.0, scores=False), LocalizerConfig(), 5.0)
        assert res.fallback

    def test_single_modality_beta(self):
        alpha = np.array([0.1, 0.3, 0.6])
        cfg = LocalizerConfig(n_bins=3)
        res = localize(output(alpha, None, 1.0, 0.0), cfg, 3.0)
        np.testing.assert_allclose(res.beta, sharpen(alpha, 0.5), atol=1e-15)

    def test_negative_prediction_flagged(self):
        res = localize(output([0.5, 0.5], [0.5, 0.5], label=0), LocalizerConfig(n_bins=2), 2.0)
        assert res.flagged

    def test_ten_bin_setting(self):
        alpha = np.zeros(250)
        alpha[10:20] = 0.1
        res = localize(output(alpha + 1e-9, None, 1.0, 0.0), LocalizerConfig(n_bins=10), 5.0)
        assert (res.start_s, res.end_s) == (0.0, 0.5)


class TestPredictionFile:
    def test_round_trip(self, tmp_path):
        a = LocalizationResult(1, 1.0, 2.0, np.array([0.25, 0.75]), 1, 4.0)
        b = LocalizationResult(0, 0.0, 5.0, None, None, 5.0, flagged=True, fallback=True)
        path = tmp_path / "p.jsonl"
        write_predictions([("a", a, 0.3, 0.7), ("b", b, 0.5, 0.5)], path)
        rows = read_predictions(path)
        assert [r["id"] for r in rows] == ["a", "b"]
        assert rows[0]["w_v"] == 0.7
        back = result_from_row(rows[0])
        assert (back.start_s, back.end_s, back.peak_bin, back.peak_time_s) == (1.0, 2.0, 1, 3.0)
        assert result_from_row(rows[1]).fallback

    def test_missing_field(self, tmp_path):
        path = tmp_path / "p.jsonl"
        path.write_text('{"id": "a", "label": 1}\n')
        with pytest.raises(ValueError, match="start_s"):
            read_predictions(path)


@settings(max_examples=40, deadline=None)
@given(distributions, distributions, st.floats(0, 1), st.integers(1, 60))
def test_pipeline_beta_normalized(alpha_a, alpha_v, w, n_bins):
    assume(alpha_a.max() > 0 and alpha_v.max() > 0)
    res = localize(output(alpha_a, alpha_v, w, 1 - w), LocalizerConfig(n_bins=n_bins), 5.0)
    assert abs(res.beta.sum() - 1) <= 1e-5
    assert 0 <= res.start_s <= res.end_s <= 5.0
