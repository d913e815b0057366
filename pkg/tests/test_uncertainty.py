"""MC inference: decomposition identities, bounds, sweep behavior."""

import numpy as np
import pytest

from bayeseg.rng import RngStream
from bayeseg.tensor import ShapeError
from bayeseg.uncertainty import (
    McConfig,
    decompose_uncertainty,
    mc_predict,
    mc_predict_batch,
    summarize,
    t_sweep,
)
from bayeseg.unet import ArchConfig, build_model


def tiny_model(seed=0):
    return build_model(ArchConfig(base_filters=2, depth=2, input_size=16,
                                  cbam_reduction=2), seed=seed)


def logit_cfg(**kw):
    kw.setdefault("variance_space", "logit")
    return McConfig(**kw)


class TestMcPredict:
    def test_t1_single_pair(self):
        model = tiny_model()
        img = RngStream(1, 71).uniform(0, 1, (16, 16))
        samples = mc_predict(model, img, McConfig(T=1, seed=0))
        assert len(samples) == 1
        assert samples[0][0].shape == (16, 16)

    def test_same_seed_identical(self):
        model = tiny_model()
        img = RngStream(2, 72).uniform(0, 1, (16, 16))
        a = mc_predict(model, img, McConfig(T=4, seed=9))
        b = mc_predict(model, img, McConfig(T=4, seed=9))
        for (ya, va), (yb, vb) in zip(a, b):
            assert (ya == yb).all() and (va == vb).all()

    def test_frozen_posteriors_collapse_samples(self):
        model = tiny_model()
        for layer in model.variational_layers().values():
            layer.posterior.rho.data[:] = -45.0
        img = RngStream(3, 73).uniform(0, 1, (16, 16))
        samples = mc_predict(model, img, McConfig(T=5, seed=0))
        base = samples[0][0]
        for y, _ in samples[1:]:
            np.testing.assert_allclose(y, base, atol=1e-6)

    def test_pass_index_defines_stream_not_order(self):
        model = tiny_model()
        img = RngStream(4, 74).uniform(0, 1, (16, 16))
        all_five = mc_predict(model, img, McConfig(T=5, seed=3))
        first_three = mc_predict(model, img, McConfig(T=3, seed=3))
        for t in range(3):
            assert (all_five[t][0] == first_three[t][0]).all()

    def test_batch_matches_probability_contract(self):
        model = tiny_model()
        imgs = RngStream(5, 75).uniform(0, 1, (3, 1, 16, 16))
        probs, lvars = mc_predict_batch(model, imgs, McConfig(T=4, seed=1))
        assert probs.shape == (4, 3, 16, 16)
        assert (probs >= 0).all() and (probs <= 1).all()
        assert (lvars > 0).all()


class TestDecomposition:
    def test_hand_computed_t2_case(self):
        y = [np.full((2, 2), 0.2), np.full((2, 2), 0.4)]
        v = [np.full((2, 2), 0.01), np.full((2, 2), 0.03)]
        res = decompose_uncertainty(list(zip(y, v)), logit_cfg(T=2))
        np.testing.assert_allclose(res.term1_map, 0.01, atol=1e-12)
        np.testing.assert_allclose(res.term2_map, 0.02, atol=1e-12)
        np.testing.assert_allclose(res.total_map, 0.03, atol=1e-12)
        assert res.mean_total == pytest.approx(0.03, abs=1e-12)

    def test_identical_samples_zero_spread(self):
        y = np.full((3, 3), 0.7)
        v = np.full((3, 3), 0.1)
        res = decompose_uncertainty([(y, v)] * 4, logit_cfg(T=4))
        np.testing.assert_allclose(res.term1_map, 0.0, atol=1e-15)

    def test_zero_predicted_variance_total_is_term1(self):
        rng = RngStream(6, 76)
        samples = [(rng.uniform(0, 1, (4, 4), dtype=np.float64), np.zeros((4, 4)))
                   for _ in range(5)]
        res = decompose_uncertainty(samples, logit_cfg(T=5))
        assert (res.total_map == res.term1_map).all()

    def test_exact_additivity(self):
        rng = RngStream(7, 77)
        samples = [(rng.uniform(0, 1, (6, 6), dtype=np.float64),
                    rng.uniform(0, 0.5, (6, 6), dtype=np.float64)) for _ in range(7)]
        res = decompose_uncertainty(samples, McConfig(T=7))
        assert (res.total_map == res.term1_map + res.term2_map).all()
        assert res.mean_total == res.mean_term1 + res.mean_term2

    def test_term1_bounded_by_quarter(self):
        rng = RngStream(8, 78)
        for _ in range(10):
            samples = [(rng.uniform(0, 1, (5, 5), dtype=np.float64),
                        np.zeros((5, 5))) for _ in range(6)]
            res = decompose_uncertainty(samples, logit_cfg(T=6))
            assert (res.term1_map >= 0).all()
            assert (res.term1_map <= 0.25 + 1e-12).all()

    def test_order_invariance(self):
        rng = RngStream(9, 79)
        samples = [(rng.uniform(0, 1, (4, 4), dtype=np.float64),
                    rng.uniform(0, 1, (4, 4), dtype=np.float64)) for _ in range(5)]
        res_fwd = decompose_uncertainty(samples, McConfig(T=5))
        res_rev = decompose_uncertainty(samples[::-1], McConfig(T=5))
        np.testing.assert_allclose(res_fwd.total_map, res_rev.total_map, atol=1e-15)

    def test_t_below_two_rejected(self):
        with pytest.raises(ValueError, match="T >= 2"):
            decompose_uncertainty([(np.zeros((2, 2)), np.zeros((2, 2)))], McConfig(T=2))

    def test_variance_space_probability_applies_delta_method(self):
        y = np.full((2, 2), 0.3)
        v = np.full((2, 2), 2.0)  # logit-space variance
        res = decompose_uncertainty([(y, v)] * 2, McConfig(T=2, variance_space="probability"))
        want = (0.3 * 0.7) ** 2 * 2.0
        np.testing.assert_allclose(res.term2_map, want, atol=1e-12)
        res_logit = decompose_uncertainty([(y, v)] * 2, logit_cfg(T=2))
        np.testing.assert_allclose(res_logit.term2_map, 2.0, atol=1e-12)

    def test_label_convention_swaps_names_not_numbers(self):
        rng = RngStream(10, 80)
        samples = [(rng.uniform(0, 1, (3, 3), dtype=np.float64),
                    rng.uniform(0, 1, (3, 3), dtype=np.float64)) for _ in range(4)]
        paper = decompose_uncertainty(samples, McConfig(T=4, label_convention="paper"))
        kg = decompose_uncertainty(samples, McConfig(T=4, label_convention="kendall_gal"))
        assert (paper.aleatoric_map == paper.term1_map).all()
        assert (kg.aleatoric_map == kg.term2_map).all()
        assert (paper.term1_map == kg.term1_map).all()


class TestSummarize:
    def _result(self):
        rng = RngStream(11, 81)
        samples = [(rng.uniform(0, 1, (4, 4), dtype=np.float64),
                    rng.uniform(0, 1, (4, 4), dtype=np.float64)) for _ in range(4)]
        return decompose_uncertainty(samples, McConfig(T=4))

    def test_constant_map_mean(self):
        y = [np.full((3, 3), 0.2), np.full((3, 3), 0.4)]
        v = [np.full((3, 3), 0.01), np.full((3, 3), 0.03)]
        res = decompose_uncertainty(list(zip(y, v)), logit_cfg(T=2))
        s = summarize(res)
        assert s["mean_total"] == pytest.approx(0.03, abs=1e-12)

    def test_linearity_of_means(self):
        s = summarize(self._result())
        assert s["mean_total"] == pytest.approx(s["mean_term1"] + s["mean_term2"],
                                                abs=1e-15)

    def test_masked_region_matches_loop(self):
        res = self._result()
        mask = np.zeros((4, 4), dtype=bool)
        mask[1:3, 1:3] = True
        s = summarize(res, mask)
        want = 0.0
        count = 0
        for i in range(4):
            for j in range(4):
                if mask[i, j]:
                    want += res.total_map[i, j]
                    count += 1
        assert s["mean_total"] == pytest.approx(want / count, abs=1e-9)

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError, match="empty mask"):
            summarize(self._result(), np.zeros((4, 4), dtype=bool))

    def test_mask_shape_checked(self):
        with pytest.raises(ShapeError):
            summarize(self._result(), np.zeros((2, 2), dtype=bool))


class TestTSweep:
    def test_single_repeat_rejected(self):
        model = tiny_model()
        img = RngStream(12, 82).uniform(0, 1, (16, 16))
        with pytest.raises(ValueError, match="repeats"):
            t_sweep(model, [img], t_values=(5,), repeats=1)

    def test_one_t_value_works(self):
        model = tiny_model()
        img = RngStream(13, 83).uniform(0, 1, (16, 16))
        rows = t_sweep(model, [img], t_values=(4,), repeats=3, cfg=McConfig(seed=2))
        assert len(rows) == 1 and rows[0]["T"] == 4
        assert rows[0]["var_term1"] >= 0

    def test_frozen_model_all_variances_zero(self):
        model = tiny_model()
        for layer in model.variational_layers().values():
            layer.posterior.rho.data[:] = -45.0
        img = RngStream(14, 84).uniform(0, 1, (16, 16))
        rows = t_sweep(model, [img], t_values=(3, 5), repeats=3, cfg=McConfig(seed=1))
        for row in rows:
            assert row["var_term1"] == pytest.approx(0.0, abs=1e-12)

    def test_variance_decreases_with_t(self):
        model = tiny_model(seed=6)
        imgs = [RngStream(15, 85 + i).uniform(0, 1, (16, 16)) for i in range(2)]
        rows = t_sweep(model, imgs, t_values=(3, 24), repeats=12, cfg=McConfig(seed=4))
        by_t = {r["T"]: r for r in rows}
        assert by_t[24]["var_term1"] < by_t[3]["var_term1"]
        assert by_t[24]["var_term2"] < by_t[3]["var_term2"]

    def test_mc_config_validation(self):
        with pytest.raises(ValueError):
            McConfig(T=0)
        with pytest.raises(ValueError):
            McConfig(variance_space="odds")
        with pytest.raises(ValueError):
            McConfig(label_convention="mine")
