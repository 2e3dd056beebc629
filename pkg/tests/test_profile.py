from fractions import Fraction

import numpy as np
import pytest

from conftest import tiny_config
from melcompress import compress as cp
from melcompress import corpus as cc
from melcompress import encoder as enc
from melcompress import profile as pf
from melcompress.numcore import ContractError


def desk(**kw):
    return enc.init_weights(enc.EncoderConfig(**kw), seed=0)


def half_heads(w):
    H = w.config.n_heads
    return cp.remove_heads(w, {i: list(range(H // 2)) for i in range(w.config.n_layers)})


def half_ffn(w):
    f = w.config.ffn_dim
    return cp.remove_ffn_units(w, {i: list(range(f // 2)) for i in range(w.config.n_layers)})


class TestParams:
    def test_unpruned_all_nonzero(self, tiny_weights):
        pc = pf.count_params(tiny_weights)
        assert pc.nonzero == pc.total

    def test_closed_form_matches_walk(self):
        w = desk()
        assert pf.count_params(w).total == pf.block_params_closed_form(12, 96, 384)
        assert pf.block_params_closed_form(12, 96, 384) == 12 * (4 * 96 * 96 + 4 * 96 + 2 * 96 * 384 + 96 + 384 + 4 * 96)

    def test_half_density_exact(self, tiny_weights):
        pct = Fraction(100)
        sched = cp.WeightPruneSchedule()
        while pct > 50:
            pct, _ = cp.weight_prune_step(tiny_weights, sched, pct)
        pc = pf.count_params(tiny_weights)
        assert Fraction(pc.prunable_nonzero, pc.prunable_total) == Fraction(1, 2)


class TestMacs:
    def test_zero_layers(self):
        w = desk(n_layers=0)
        m = pf.macs_per_second(w)
        assert m.total == m.input_projection == 100 * 16 * 96

    def test_closed_form(self):
        m = pf.macs_per_second(desk())
        T, d, f = 100, 96, 384
        assert m.per_layer[0] == 4 * T * d * d + 2 * T * T * d + 2 * T * d * f
        assert m.total == T * 16 * d + 12 * m.per_layer[0]

    def test_frame_period_scaling(self):
        w = desk()
        a = pf.macs_per_second(w, 10)
        b = pf.macs_per_second(w, 20)
        assert a.attn_quadratic == 4 * b.attn_quadratic
        assert a.attn_proj == 2 * b.attn_proj and a.ffn == 2 * b.ffn and a.input_projection == 2 * b.input_projection

    @pytest.mark.parametrize("variant", ["dense", "heads", "ffn", "prefix6"])
    @pytest.mark.parametrize("period", [10, 20])
    def test_analytic_equals_instrumented(self, variant, period):
        w = desk(n_layers=8, d_model=32, n_heads=4, ffn_dim=64, input_dim=16 if period == 10 else 32, frame_period_ms=period)
        n_layers = None
        if variant == "heads":
            w = half_heads(w)
        elif variant == "ffn":
            w = half_ffn(w)
        elif variant == "prefix6":
            n_layers = 6
        m = pf.macs_per_second(w, n_layers=n_layers)
        counted = pf.instrumented_macs(w, n_layers=n_layers)
        assert counted["total"] == m.total
        assert counted["input_projection"] == m.input_projection
        assert counted["attn_proj"] == m.attn_proj
        assert counted["attn_scores"] + counted["attn_values"] == m.attn_quadratic
        assert counted["ffn"] == m.ffn

    def test_classifier_optional(self, tiny_weights):
        with_cls = pf.macs_per_second(tiny_weights, include_classifier=True)
        assert with_cls.classifier == 100 * 16 * 8
        assert pf.instrumented_macs(tiny_weights, include_classifier=True)["total"] == with_cls.total

    def test_head_halving_halves_attention(self):
        w = desk()
        a, b = pf.macs_per_second(w), pf.macs_per_second(half_heads(w))
        assert 2 * b.attn_proj == a.attn_proj and 2 * b.attn_quadratic == a.attn_quadratic
        assert b.ffn == a.ffn

    def test_prefix_accounting(self):
        w = desk()
        full, pre = pf.macs_per_second(w), pf.macs_per_second(w, n_layers=6)
        assert pre.total == full.input_projection + Fraction(6, 12) * (full.total - full.input_projection)

    def test_theoretical_counts_live_weights(self, tiny_weights):
        cp.weight_prune_step(tiny_weights, cp.WeightPruneSchedule(), 100)
        m = pf.macs_per_second(tiny_weights)
        live = sum(int(np.count_nonzero(tiny_weights[n].mask)) for n in tiny_weights.prunable_names() if n.endswith("weight"))
        assert m.theoretical == m.input_projection + m.attn_quadratic + 100 * live
        assert m.theoretical < m.total

    def test_bad_period(self, tiny_weights):
        with pytest.raises(ContractError):
            pf.macs_per_second(tiny_weights, 15)


class TestRtf:
    # long enough that attention, not per-call overhead, dominates the timing
    utts = cc.generate(cc.GeneratorSpec(length_range=(300, 300), seed=1), 4)

    def test_stats_shape(self, tiny_weights):
        u = cc.generate(cc.GeneratorSpec(dim=8, length_range=(20, 20)), 2)
        s = pf.measure_rtf(tiny_weights, u, repeats=3)
        assert len(s.samples) == 3 and s.q1 <= s.median <= s.q3 and s.median > 0

    def test_repeats_floor(self, tiny_weights):
        with pytest.raises(ContractError):
            pf.measure_rtf(tiny_weights, self.utts, repeats=2)

    def test_half_heads_faster(self):
        w = desk()
        dense = pf.measure_rtf(w, self.utts, repeats=9)
        pruned = pf.measure_rtf(half_heads(w), self.utts, repeats=9)
        assert pruned.median < dense.median

    def test_prefix_faster(self):
        w = desk()
        assert pf.measure_rtf(w, self.utts, 5, n_layers=6).median < pf.measure_rtf(w, self.utts, 5).median


class TestReport:
    def test_report_fields(self, tiny_weights):
        r = pf.make_report(tiny_weights)
        assert r.rtf is None and r.macs_per_sec == pf.macs_per_second(tiny_weights).total
        assert '"densities"' in r.to_json()

    def test_prefix_report_counts_prefix_blocks(self, tiny_weights):
        r = pf.make_report(tiny_weights, n_layers=1)
        assert r.params_total == pf.block_params_closed_form(1, 16, 32)
