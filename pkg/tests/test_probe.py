import math

import numpy as np
import pytest

from conftest import labelled_corpus
from melcompress import corpus as cc
from melcompress import numcore as nc
from melcompress import probe as pr
from melcompress.numcore import ContractError, Parameter


class TestWeightedFeatures:
    taps = np.random.default_rng(0).standard_normal((4, 6, 5))

    def test_dominant_layer(self):
        raw = np.zeros(4)
        raw[2] = 20.0
        out = pr.weighted_features(self.taps, Parameter(raw)).data
        np.testing.assert_allclose(out, self.taps[2], atol=1e-7)

    def test_uniform_is_mean(self):
        out = pr.weighted_features(self.taps, Parameter(np.full(4, 0.3))).data
        np.testing.assert_allclose(out, self.taps.mean(axis=0), atol=1e-14)

    def test_softmax_shift_invariant(self):
        raw = np.array([0.1, -2.0, 0.7, 1.5])
        a = pr.weighted_features(self.taps, Parameter(raw)).data
        b = pr.weighted_features(self.taps, Parameter(raw + 5.0)).data
        np.testing.assert_allclose(a, b, atol=1e-13)
        w = pr.softmax_weights(raw)
        assert w.sum() == pytest.approx(1.0) and np.all((w > 0) & (w < 1))

    def test_gradient_matches_finite_differences(self):
        raw = Parameter(np.array([0.2, -0.4, 0.1, 0.6]))
        W = np.random.default_rng(1).standard_normal((3, 5))
        y = np.array([0, 2, 1, 1, 0, 2])

        def loss():
            return nc.cross_entropy(nc.linear(pr.weighted_features(self.taps, raw), W), y, np.full(6, 1 / 6))

        nc.backward(loss())
        analytic = raw.grad.copy()
        numeric = np.zeros(4)
        for i in range(4):
            old = raw.data[i]
            raw.data[i] = old + 1e-5
            up = float(loss().data)
            raw.data[i] = old - 1e-5
            down = float(loss().data)
            raw.data[i] = old
            numeric[i] = (up - down) / 2e-5
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-10)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            pr.weighted_features(self.taps, Parameter(np.zeros(3)))


class TestSplit:
    def test_partition(self):
        tr, dv, te = pr.split_indices(50, (0.8, 0.1, 0.1), seed=3)
        assert (len(tr), len(dv), len(te)) == (40, 5, 5)
        assert sorted(np.concatenate([tr, dv, te]).tolist()) == list(range(50))

    def test_seeded(self):
        assert [a.tolist() for a in pr.split_indices(30, seed=1)] == [a.tolist() for a in pr.split_indices(30, seed=1)]


class TestTrainProbe:
    def test_chance_on_independent_labels(self, tiny_weights):
        utts = labelled_corpus(n=120, seed=2)
        rng = np.random.default_rng(9)
        shuffled = [cc.Utterance(u.features, rng.integers(0, 5, u.num_frames), u.seq_class, u.cluster_labels) for u in utts]
        res = pr.train_probe(tiny_weights, shuffled, "frame_state", pr.ProbeConfig(epochs=5, seed=1))
        _, _, test = pr.split_indices(120, seed=1)
        n = sum(shuffled[i].num_frames for i in test)
        sigma = math.sqrt(0.2 * 0.8 / n)
        print(f"shuffled-label accuracy {res.accuracy:.3f} over {n} frames, chance 0.2 +- {3 * sigma:.3f}")
        assert abs(res.accuracy - 0.2) <= 3 * sigma

    def test_noise_free_is_separable(self, tiny_weights):
        utts = labelled_corpus(n=60, noise=0.0, seed=4)
        res = pr.train_probe(tiny_weights, utts, "frame_state", pr.ProbeConfig(epochs=40, learning_rate=1e-2))
        assert res.accuracy >= 0.99

    def test_seq_class_task(self, tiny_weights):
        utts = labelled_corpus(n=60, noise=0.0, seed=4)
        res = pr.train_probe(tiny_weights, utts, "seq_class", pr.ProbeConfig(epochs=60, learning_rate=1e-2))
        assert 0.0 <= res.accuracy <= 1.0 and res.n_classes == 3

    def test_result_fields(self, tiny_weights, tiny_corpus):
        res = pr.train_probe(tiny_weights, tiny_corpus, "frame_state", pr.ProbeConfig(epochs=1), n_layers=1)
        assert res.n_layers == 1 and len(res.layer_weights) == 2
        assert sum(res.layer_weights) == pytest.approx(1.0)
        assert res.upstream_hash == tiny_weights.digest()

    def test_upstream_untouched(self, tiny_weights, tiny_corpus):
        before = tiny_weights.digest()
        pr.train_probe(tiny_weights, tiny_corpus, "frame_state", pr.ProbeConfig(epochs=2))
        assert tiny_weights.digest() == before

    def test_mutation_detected(self, tiny_weights, tiny_corpus, monkeypatch):
        real = pr.extract_taps

        def meddling(weights, *a, **kw):
            out = real(weights, *a, **kw)
            weights["classifier.bias"].data += 1.0
            return out

        monkeypatch.setattr(pr, "extract_taps", meddling)
        with pytest.raises(RuntimeError):
            pr.train_probe(tiny_weights, tiny_corpus, "frame_state", pr.ProbeConfig(epochs=1))

    def test_missing_labels(self, tiny_weights):
        utts = [cc.Utterance(np.ones((5, 8)))]
        with pytest.raises(pr.MissingLabelsError):
            pr.train_probe(tiny_weights, utts, "frame_state")
        with pytest.raises(pr.MissingLabelsError):
            pr.train_probe(tiny_weights, utts, "seq_class")

    def test_unknown_task(self, tiny_weights, tiny_corpus):
        with pytest.raises(ContractError):
            pr.train_probe(tiny_weights, tiny_corpus, "speaker")
