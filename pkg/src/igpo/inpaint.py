"""Hint construction and inpainting-style generation.

Ground-truth traces are cut into variable-length contiguous chunks (the
final-answer span is never chunked), a subset of chunks is promoted to
fixed hints, and generation then denoises only the remaining positions
while the hints stay frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Array
from .diffusion import SamplerConfig, generate
from .errors import InputError
from .model import ModelConfig

# counts every hint-guided generation; the GRPO baseline asserts it stays flat
_inpaint_calls = 0


def inpaint_call_count() -> int:
    return _inpaint_calls


def _bump_inpaint_counter() -> None:
    global _inpaint_calls
    _inpaint_calls += 1


@dataclass(frozen=True)
class GroundTruthTrace:
    """A verified reasoning trace plus the span holding its final answer."""

    tokens: Array  # (n,) int64, n <= completion budget
    answer_start: int  # answer span is [answer_start, len(tokens))

    def __post_init__(self):
        object.__setattr__(self, "tokens", np.asarray(self.tokens, dtype=np.int64))
        if self.tokens.ndim != 1 or self.tokens.size == 0:
            raise InputError("trace must be a nonempty 1-D token array")
        if not 0 <= self.answer_start < self.tokens.size:
            raise InputError("answer span must be a nonempty suffix of the trace")

    @property
    def reasoning_len(self) -> int:
        return self.answer_start


Chunk = tuple[int, int]  # (start, length)


def segment_trace(
    trace: GroundTruthTrace, s_min: int, s_max: int, rng: np.random.Generator
) -> list[Chunk]:
    """Cut [0, answer_start) into contiguous chunks with lengths ~ U[s_min, s_max].

    The walk is left to right; the final chunk is truncated to whatever
    remains (possibly shorter than s_min) so coverage is total. The answer
    span is never covered.
    """
    if not 1 <= s_min <= s_max:
        raise InputError("need 1 <= s_min <= s_max")
    remaining = trace.reasoning_len
    if remaining == 0:
        raise InputError("trace has no reasoning region to hint")
    chunks: list[Chunk] = []
    start = 0
    while remaining > 0:
        length = min(int(rng.integers(s_min, s_max + 1)), remaining)
        chunks.append((start, length))
        start += length
        remaining -= length
    return chunks


def build_hint_mask(
    chunks: list[Chunk], eta: float, completion_len: int, rng: np.random.Generator
) -> Array:
    """Select floor(eta * N) chunks uniformly and mark their positions.

    Returns a boolean vector over the completion region. eta=0 yields an
    all-zero mask (plain sampling); eta=1 marks every chunk.
    """
    if not 0.0 <= eta <= 1.0:
        raise InputError("eta must lie in [0, 1]")
    mask = np.zeros(completion_len, dtype=bool)
    n = len(chunks)
    k = int(np.floor(eta * n))
    if k == 0:
        return mask
    chosen = rng.choice(n, size=k, replace=False)
    for idx in chosen:
        start, length = chunks[idx]
        mask[start : start + length] = True
    return mask


def build_hint_initialization(
    trace: GroundTruthTrace, hint_mask: Array, completion_len: int, mask_token_id: int
) -> Array:
    """Hint-injected initial completion: trace tokens where hinted, MASK elsewhere.

    Positions at or beyond the trace length stay MASK even if the mask
    claims them.
    """
    hint_mask = np.asarray(hint_mask, dtype=bool)
    if hint_mask.shape != (completion_len,):
        raise InputError("hint mask length must equal the completion budget")
    init = np.full(completion_len, mask_token_id, dtype=np.int64)
    n = min(trace.tokens.size, completion_len)
    take = hint_mask[:n]
    init[:n][take] = trace.tokens[:n][take]
    return init


def generate_with_hints(
    params: dict[str, Array],
    config: ModelConfig,
    sampler: SamplerConfig,
    prompts: Array,
    hint_inits: Array,
    rngs: list[np.random.Generator] | None,
    record: bool = False,
):
    """Denoise with hint positions pre-committed at step 0.

    `hint_inits` is (batch, L) with MASK at free positions; hint tokens
    appear verbatim in the output because committed tokens are never
    rewritten.
    """
    hint_inits = np.asarray(hint_inits, dtype=np.int64)
    if hint_inits.ndim == 1:
        hint_inits = hint_inits[None, :]
    if hint_inits.shape[-1] != sampler.completion_len:
        raise InputError("hint region length must equal the completion budget")
    _bump_inpaint_counter()
    return generate(
        params,
        config,
        sampler,
        prompts,
        rngs=rngs,
        initial_completion=hint_inits,
        record=record,
    )
