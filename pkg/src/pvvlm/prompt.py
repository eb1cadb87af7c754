"""Prompt path: window statistics, template rendering, byte tokenization.

The rendered prompt describes the raw kW input window (range, median,
trend, dominant lags) plus the task framing, and is tokenized at the byte
level (vocabulary 256) before the frozen embedding lookup. Soft prompts are
trainable embedding rows prepended ahead of the text.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .blocks import uniform_init
from .numerics import Tensor, embedding

VOCAB_SIZE = 256
MAX_TOP_LAGS = 5
_SLOT_RE = re.compile("⟨[^⟩]*⟩")  # <...> angle-bracket slots


@dataclass
class PromptStats:
    min_val: float
    max_val: float
    median_val: float
    trend: str  # "upward" | "downward"
    top_lags: list[int]

    def __post_init__(self):
        if not self.min_val <= self.median_val <= self.max_val:
            raise ValueError("min <= median <= max violated")
        if self.trend not in ("upward", "downward"):
            raise ValueError(f"trend must be upward/downward, got {self.trend!r}")
        if len(set(self.top_lags)) != len(self.top_lags) or any(k < 1 for k in self.top_lags):
            raise ValueError("lags must be distinct and >= 1")


def compute_stats(window: np.ndarray) -> PromptStats:
    """Window statistics for the prompt.

    Trend is upward iff the first-order differences sum to >= 0. Top lags
    are the <= 5 lags in [1, L//2] with the highest sample autocorrelation,
    ties broken toward the smaller lag.
    """
    window = np.asarray(window, dtype=np.float64)
    length = len(window)
    if length < 4:
        raise ValueError(f"window must have at least 4 values, got {length}")
    trend = "upward" if float(np.sum(np.diff(window))) >= 0 else "downward"
    centered = window - window.mean()
    denom = float(np.dot(centered, centered))
    max_lag = length // 2
    rho = np.zeros(max_lag + 1)
    if denom > 0:
        for k in range(1, max_lag + 1):
            rho[k] = float(np.dot(centered[:-k], centered[k:])) / denom
    order = sorted(range(1, max_lag + 1), key=lambda k: (-rho[k], k))
    return PromptStats(
        min_val=float(window.min()),
        max_val=float(window.max()),
        median_val=float(np.median(window)),
        trend=trend,
        top_lags=order[:MAX_TOP_LAGS],
    )


@dataclass
class PromptTemplate:
    """Four text blocks rendered into one prompt, joined by newlines."""

    dataset_description: str
    image_description: str
    instruction: str
    statistics_clause: str

    @classmethod
    def default(cls) -> "PromptTemplate":
        text = resources.files("pvvlm").joinpath("assets/prompt_template.txt").read_text("utf-8")
        return cls.from_text(text)

    @classmethod
    def from_text(cls, text: str) -> "PromptTemplate":
        blocks = [b.strip() for b in text.strip().split("\n\n") if b.strip()]
        if len(blocks) != 4:
            raise ValueError(f"template must have 4 blank-line-separated blocks, got {len(blocks)}")
        return cls(*blocks)

    @classmethod
    def from_file(cls, path: str | Path) -> "PromptTemplate":
        return cls.from_text(Path(path).read_text("utf-8"))

    def body(self) -> str:
        return "\n".join(
            (self.dataset_description, self.image_description, self.instruction, self.statistics_clause)
        )

    def to_text(self) -> str:
        """Serialized form (blank-line-separated blocks), parseable by from_text."""
        return "\n\n".join(
            (self.dataset_description, self.image_description, self.instruction, self.statistics_clause)
        )


def render_prompt(stats: PromptStats, horizon: int, input_size: int, tmpl: PromptTemplate) -> str:
    """Fill every template slot; numeric fields use 3 decimal places.

    Values are padded to a fixed width so the byte positions of the digits
    stay stable across samples (the frozen byte-level encoder has no
    tokenizer to re-align shifted text).
    """
    fills = {
        "⟨Horizon⟩": str(horizon),
        "⟨Input Size⟩": str(input_size),
        "⟨min_val⟩": f"{stats.min_val:9.3f}",
        "⟨max_val⟩": f"{stats.max_val:9.3f}",
        "⟨median_val⟩": f"{stats.median_val:9.3f}",
        "⟨trend⟩": stats.trend,
        "⟨lag_val⟩": ", ".join(f"{k:2d}" for k in stats.top_lags),
    }
    text = tmpl.body()
    for slot, value in fills.items():
        text = text.replace(slot, value)
    leftover = _SLOT_RE.findall(text)
    if leftover:
        raise ValueError(f"unfilled template slots: {leftover}")
    return text


def tokenize(text: str) -> np.ndarray:
    """Byte-level tokens: id == byte value, vocabulary 256."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def detokenize(tokens: np.ndarray) -> str:
    return bytes(int(t) for t in tokens).decode("utf-8")


def embed_text(tokens: np.ndarray, table: Tensor) -> Tensor:
    """Frozen row lookup: (T,) ids -> (T, d_llm)."""
    if table.shape[0] != VOCAB_SIZE:
        raise ValueError(f"embedding table must have {VOCAB_SIZE} rows, got {table.shape[0]}")
    return embedding(table, tokens)


def init_soft_prompt(rng: np.random.Generator, n_soft: int, d_llm: int) -> Tensor:
    """Trainable soft-prompt rows (n_soft, d_llm)."""
    return Tensor(uniform_init(rng, (n_soft, d_llm), d_llm), requires_grad=True)
