import numpy as np
import pytest

from pvvlm.numerics import Tensor, tsum
from pvvlm.prompt import (
    PromptStats,
    PromptTemplate,
    compute_stats,
    detokenize,
    embed_text,
    init_soft_prompt,
    render_prompt,
    tokenize,
)
from conftest import MICRO_TEMPLATE


def brute_force_stats(window):
    """Independent oracle: full sort median, O(L^2) autocorrelation."""
    window = [float(v) for v in window]
    length = len(window)
    ordered = sorted(window)
    if length % 2 == 1:
        median = ordered[length // 2]
    else:
        median = 0.5 * (ordered[length // 2 - 1] + ordered[length // 2])
    diffs = sum(window[i + 1] - window[i] for i in range(length - 1))
    mean = sum(window) / length
    denom = sum((v - mean) ** 2 for v in window)
    rho = {}
    for k in range(1, length // 2 + 1):
        num = sum((window[t] - mean) * (window[t + k] - mean) for t in range(length - k))
        rho[k] = num / denom if denom > 0 else 0.0
    order = sorted(rho, key=lambda k: (-rho[k], k))
    return {
        "min": min(window),
        "max": max(window),
        "median": median,
        "trend": "upward" if diffs >= 0 else "downward",
        "top_lags": order[:5],
    }


class TestComputeStats:
    def test_simple_ascending(self):
        stats = compute_stats([1.0, 2.0, 3.0, 4.0])
        assert stats.min_val == 1.0 and stats.max_val == 4.0
        assert stats.median_val == 2.5
        assert stats.trend == "upward"

    def test_descending_trend(self):
        assert compute_stats([4.0, 3.0, 2.0, 1.0]).trend == "downward"

    def test_flat_window_trend_tie_is_upward(self):
        assert compute_stats([2.0, 2.0, 2.0, 2.0]).trend == "upward"

    def test_periodic_signal_lag(self):
        window = np.tile([0.0, 1.0, 0.0, -1.0], 8)  # period 4, L=32
        stats = compute_stats(window)
        assert stats.top_lags[0] == 4

    def test_too_short(self):
        with pytest.raises(ValueError, match="at least 4"):
            compute_stats([1.0, 2.0, 3.0])

    def test_against_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            length = int(rng.integers(4, 40))
            window = rng.uniform(0, 30, size=length)
            stats = compute_stats(window)
            oracle = brute_force_stats(window)
            assert stats.min_val == pytest.approx(oracle["min"])
            assert stats.max_val == pytest.approx(oracle["max"])
            assert stats.median_val == pytest.approx(oracle["median"])
            assert stats.trend == oracle["trend"]
            assert stats.top_lags == oracle["top_lags"]

    def test_lag_count_capped_at_five(self):
        stats = compute_stats(np.arange(30.0))
        assert len(stats.top_lags) == 5
        stats = compute_stats(np.arange(6.0))  # L//2 == 3 candidate lags
        assert len(stats.top_lags) == 3

    def test_invariants_enforced(self):
        with pytest.raises(ValueError, match="min <= median"):
            PromptStats(2.0, 1.0, 3.0, "upward", [1])
        with pytest.raises(ValueError, match="distinct"):
            PromptStats(0.0, 2.0, 1.0, "upward", [1, 1])


class TestRenderPrompt:
    def test_instruction_line(self):
        stats = compute_stats([1.0, 2.0, 3.0, 4.0])
        text = render_prompt(stats, 10, 20, MICRO_TEMPLATE)
        assert "forecast the next 10 steps given the previous 20 steps" in text

    def test_trend_sentence(self):
        stats = compute_stats([1.0, 2.0, 3.0, 4.0])
        text = render_prompt(stats, 10, 20, MICRO_TEMPLATE)
        assert "The overall trend is upward" in text

    def test_three_decimal_formatting(self):
        stats = compute_stats([1.23456, 2.0, 3.0, 4.98765])
        text = render_prompt(stats, 10, 20, MICRO_TEMPLATE)
        assert "1.235" in text and "4.988" in text

    def test_deterministic(self):
        stats = compute_stats([5.0, 1.0, 8.0, 2.0, 9.0, 3.0])
        a = render_prompt(stats, 20, 40, MICRO_TEMPLATE)
        b = render_prompt(stats, 20, 40, MICRO_TEMPLATE)
        assert a.encode() == b.encode()

    def test_unfilled_slot_rejected(self):
        tmpl = PromptTemplate("d", "i", "do ⟨Horizon⟩ ⟨bogus⟩", "s")
        stats = compute_stats([1.0, 2.0, 3.0, 4.0])
        with pytest.raises(ValueError, match="unfilled"):
            render_prompt(stats, 10, 20, tmpl)

    def test_default_template_renders(self):
        stats = compute_stats([1.0, 2.0, 3.0, 4.0])
        text = render_prompt(stats, 10, 20, PromptTemplate.default())
        assert "⟨" not in text

    def test_template_text_roundtrip(self):
        tmpl = PromptTemplate.from_text(MICRO_TEMPLATE.to_text())
        assert tmpl == MICRO_TEMPLATE


class TestTokenizer:
    def test_byte_values(self):
        assert list(tokenize("PV")) == [80, 86]

    def test_empty(self):
        assert len(tokenize("")) == 0

    def test_roundtrip(self):
        text = "Forecast 12.5 kW ⟨now⟩"
        assert detokenize(tokenize(text)) == text

    def test_ids_below_vocab(self):
        assert tokenize("any text at all").max() < 256


class TestEmbedText:
    def _table(self, d=6):
        rng = np.random.default_rng(0)
        return Tensor(rng.standard_normal((256, d)).astype(np.float32))

    def test_row_lookup(self):
        table = self._table()
        out = embed_text(np.array([0]), table)
        assert np.array_equal(out.data[0], table.data[0])

    def test_shape_contract(self):
        out = embed_text(tokenize("hello"), self._table(d=6))
        assert out.shape == (5, 6)

    def test_repeated_tokens_identical_rows(self):
        out = embed_text(np.array([65, 65]), self._table())
        assert np.array_equal(out.data[0], out.data[1])

    def test_out_of_range_id(self):
        with pytest.raises(ValueError, match="out of range"):
            embed_text(np.array([256]), self._table())

    def test_frozen_table_receives_no_grad(self):
        table = self._table()
        tsum(embed_text(np.array([1, 2]), table)).backward()
        assert table.grad is None


def test_soft_prompt_trainable():
    soft = init_soft_prompt(np.random.default_rng(0), 4, 8)
    assert soft.requires_grad and soft.shape == (4, 8)
    tsum(soft).backward()
    assert np.array_equal(soft.grad, np.ones((4, 8), dtype=np.float32))
