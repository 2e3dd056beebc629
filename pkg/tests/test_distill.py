import math

import numpy as np
import pytest

from conftest import tiny_config
from melcompress import distill as ds
from melcompress import encoder as enc
from melcompress.numcore import ContractError, Tensor


def kl_oracle(t, s, tau):
    p = np.exp(t / tau) / np.exp(t / tau).sum()
    q = np.exp(s / tau) / np.exp(s / tau).sum()
    return tau**2 * float((p * (np.log(p) - np.log(q))).sum())


class TestKdLoss:
    def test_identical_logits(self):
        z = np.random.default_rng(0).standard_normal((5, 7))
        assert float(ds.kd_loss(z, Tensor(z.copy()), 2.0).data) == pytest.approx(0.0, abs=1e-15)

    def test_closed_form_two_classes(self):
        # teacher uniform, student (3/4, 1/4): KL = 0.5 ln(0.5/0.75) + 0.5 ln(0.5/0.25)
        got = float(ds.kd_loss(np.array([[0.0, 0.0]]), Tensor(np.array([[math.log(3), 0.0]])), 1.0).data)
        assert got == pytest.approx(0.5 * math.log(2 / 3) + 0.5 * math.log(2), abs=1e-12)

    def test_matches_oracle_with_temperature(self):
        rng = np.random.default_rng(1)
        t, s = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
        expected = np.mean([kl_oracle(t[i], s[i], 3.0) for i in range(4)])
        assert float(ds.kd_loss(t, Tensor(s), 3.0).data) == pytest.approx(expected, rel=1e-12)

    def test_high_temperature_is_quadratic(self):
        """tau^2 KL -> half the squared difference of centred logits over K as tau grows."""
        rng = np.random.default_rng(2)
        t, s = rng.standard_normal(5), rng.standard_normal(5)
        dc = (t - t.mean()) - (s - s.mean())
        limit = (dc**2).sum() / (2 * 5)
        got = float(ds.kd_loss(t[None], Tensor(s[None]), 100.0).data)
        assert got == pytest.approx(limit, rel=1e-2)

    def test_non_negative(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            assert float(ds.kd_loss(rng.standard_normal((3, 4)), Tensor(rng.standard_normal((3, 4)))).data) >= 0

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            ds.kd_loss(np.zeros((2, 3)), Tensor(np.zeros((2, 4))))


class TestStudent:
    def test_first_k_copy(self, tiny_weights):
        s = ds.build_student(tiny_weights, ds.DistillConfig(student_layers=1))
        assert s.config.n_layers == 1
        assert not any(n.startswith("layers.1.") for n in s.params)
        np.testing.assert_array_equal(s["layers.0.q.weight"].data, tiny_weights["layers.0.q.weight"].data)
        assert s.meta["student_of"] == tiny_weights.digest()

    def test_prefix_plus_classifier(self, tiny_corpus):
        teacher = enc.init_weights(tiny_config(n_layers=4), seed=0)
        s = ds.build_student(teacher, ds.DistillConfig(student_layers=2))
        u = tiny_corpus[0]
        taps = enc.encode_prefix(u, teacher, 2)
        expected = taps[2] @ teacher["classifier.weight"].data.T + teacher["classifier.bias"].data
        np.testing.assert_array_equal(enc.encode(u, s)[1], expected)

    def test_too_deep(self, tiny_weights):
        with pytest.raises(ContractError):
            ds.build_student(tiny_weights, ds.DistillConfig(student_layers=3))

    def test_bad_config(self):
        with pytest.raises(ContractError):
            ds.DistillConfig(init="zeros")
        with pytest.raises(ContractError):
            ds.DistillConfig(temperature=0.0)


class TestDistill:
    def test_full_depth_fixed_point(self, tiny_weights, tiny_corpus):
        cfg = ds.DistillConfig(student_layers=2, steps=40, learning_rate=1e-3, batch_size=4)
        student, log = ds.distill(tiny_weights, cfg, tiny_corpus)
        assert max(log.losses) < 1e-8

    def test_masked_inputs_fixed_point(self, tiny_weights, tiny_corpus):
        cfg = ds.DistillConfig(student_layers=2, steps=10, batch_size=4, mask_student_input=True)
        _, log = ds.distill(tiny_weights, cfg, tiny_corpus)
        assert max(log.losses) < 1e-8

    def test_teacher_unchanged(self, tiny_weights, tiny_corpus):
        before = tiny_weights.digest()
        ds.distill(tiny_weights, ds.DistillConfig(student_layers=1, steps=10, batch_size=4), tiny_corpus)
        assert tiny_weights.digest() == before

    def test_random_init_deterministic_and_learns(self, tiny_weights, tiny_corpus):
        cfg = ds.DistillConfig(student_layers=1, init="random", steps=60, learning_rate=3e-3, batch_size=4, seed=4)
        a, log_a = ds.distill(tiny_weights, cfg, tiny_corpus)
        b, log_b = ds.distill(tiny_weights, cfg, tiny_corpus)
        assert log_a.losses == log_b.losses
        assert a.digest() == b.digest()
        assert np.mean(log_a.losses[-10:]) < np.mean(log_a.losses[:10])

    def test_empty_corpus(self, tiny_weights):
        with pytest.raises(ContractError):
            ds.distill(tiny_weights, ds.DistillConfig(), [])
