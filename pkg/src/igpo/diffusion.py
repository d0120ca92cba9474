"""Forward masking corruption, the masked-diffusion training loss, and the
blockwise iterative denoising generator.

Generation decodes blocks left to right. Within a block, every step samples
candidates at all still-masked positions, commits the most confident ones
according to an equal-count schedule, and leaves the rest masked. Committed
tokens are never changed afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Tensor
from .errors import ConfigError, InputError
from .model import ModelConfig, forward_logits, token_distribution

T_MIN_DEFAULT = 0.02  # bounds the 1/t loss weight when drawing training times


@dataclass(frozen=True)
class SamplerConfig:
    completion_len: int  # L
    num_steps: int  # M, total denoising steps across all blocks
    block_len: int  # B
    temperature: float = 1.0

    def __post_init__(self):
        if min(self.completion_len, self.num_steps, self.block_len) < 1:
            raise ConfigError("sampler dimensions must be positive")
        if self.completion_len % self.block_len != 0:
            raise ConfigError("block_len must divide completion_len")
        if self.num_steps % (self.completion_len // self.block_len) != 0:
            raise ConfigError("num_steps must split evenly across blocks")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")

    @property
    def num_blocks(self) -> int:
        return self.completion_len // self.block_len

    @property
    def steps_per_block(self) -> int:
        return self.num_steps // self.num_blocks


@dataclass
class MaskedSequence:
    """Fixed-length token buffer split into a prompt and a completion region."""

    tokens: Array  # (prompt_len + completion_len,) int64
    prompt_len: int
    completion_len: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1:
            raise InputError("MaskedSequence tokens must be 1-D")
        if self.tokens.shape[0] != self.prompt_len + self.completion_len:
            raise InputError("token length must equal prompt_len + completion_len")

    @property
    def prompt(self) -> Array:
        return self.tokens[: self.prompt_len]

    @property
    def completion(self) -> Array:
        return self.tokens[self.prompt_len :]


def apply_forward_mask(
    tokens: Array, t: float, region: Array, mask_token_id: int, rng: np.random.Generator
) -> tuple[Array, Array]:
    """Independently replace each region position with MASK with probability t.

    Returns (corrupted tokens, boolean draw). t=0 is the identity and t=1
    masks the whole region exactly (uniform draws live in [0, 1)).
    """
    if not 0.0 <= t <= 1.0:
        raise InputError(f"timestep must lie in [0, 1], got {t}")
    tokens = np.asarray(tokens, dtype=np.int64)
    region = np.broadcast_to(np.asarray(region, dtype=bool), tokens.shape)
    if np.any((tokens == mask_token_id) & region):
        raise InputError("clean input already contains mask tokens inside the loss region")
    drawn = region & (rng.random(tokens.shape) < t)
    out = tokens.copy()
    out[drawn] = mask_token_id
    return out, drawn


@dataclass(frozen=True)
class NelboDraw:
    """The (t, mask) randomness of one loss evaluation, for exact replay."""

    t: Array  # (batch,)
    mask: Array  # (batch, seq) bool


def nelbo_from_logits(logits: Tensor, x0: Array, mask: Array, t: Array) -> Tensor:
    """1/t-weighted negative log-likelihood over masked positions, batch mean."""
    x0 = np.asarray(x0, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    t = np.asarray(t, dtype=np.float64)
    logp = ad.take_along_last(ad.log_softmax(logits), x0)  # (B, S)
    weights = np.where(mask, -1.0 / t[:, None], 0.0)
    return ad.tmean(ad.tsum(ad.mul(logp, weights), axis=-1))


def draw_nelbo_randomness(
    x0: Array,
    region: Array,
    rng: np.random.Generator,
    t_min: float = T_MIN_DEFAULT,
) -> NelboDraw:
    """Sample (t, mask) for a batch; empty masks are redrawn once per row.

    Timesteps are stratified across the batch (one draw per equal-width
    stratum of [t_min, 1), randomly assigned to rows): each row's marginal
    stays U[t_min, 1) while the batch-level spread of the 1/t loss weights
    is controlled.
    """
    x0 = np.asarray(x0)
    region = np.asarray(region, dtype=bool)
    bsz, seqlen = x0.shape
    quantiles = (rng.permutation(bsz) + rng.random(bsz)) / bsz
    t = t_min + (1.0 - t_min) * quantiles
    u = rng.random((bsz, seqlen))
    mask = region & (u < t[:, None])
    for i in range(bsz):
        if region[i].any() and not mask[i].any():
            retry = region[i] & (rng.random(seqlen) < t[i])
            mask[i] = retry  # may still be empty; the row then contributes 0
    return NelboDraw(t=t, mask=mask)


def nelbo_loss(
    params: dict[str, Tensor],
    config: ModelConfig,
    x0: Array,
    region: Array,
    rng: np.random.Generator | None = None,
    t_min: float = T_MIN_DEFAULT,
    draw: NelboDraw | None = None,
) -> tuple[Tensor, NelboDraw]:
    """Masked-diffusion NELBO over the given loss region (differentiable).

    Draws t ~ U[t_min, 1) per example and a Bernoulli(t) mask over the
    region, corrupts, and scores -(1/t) * sum of masked-token log-probs,
    averaged over the batch. Pass `draw` to replay a frozen draw.
    """
    x0 = np.asarray(x0, dtype=np.int64)
    if x0.ndim == 1:
        x0 = x0[None, :]
    region = np.broadcast_to(np.asarray(region, dtype=bool), x0.shape)
    if not region.any():
        raise InputError("loss region is empty")
    if draw is None:
        if rng is None:
            raise InputError("nelbo_loss needs an rng when no frozen draw is given")
        draw = draw_nelbo_randomness(x0, region, rng, t_min)
    x_t = x0.copy()
    x_t[draw.mask] = config.mask_token_id
    logits = forward_logits(params, config, x_t)
    return nelbo_from_logits(logits, x0, draw.mask, draw.t), draw


def spread_counts(total: int, steps: int) -> list[int]:
    """Split `total` into `steps` near-equal counts (differ by <= 1), largest first."""
    if steps < 1:
        raise ConfigError("steps must be positive")
    base, rem = divmod(total, steps)
    return [base + 1] * rem + [base] * (steps - rem)


def commit_schedule(completion_len: int, num_steps: int, block_len: int) -> list[list[int]]:
    """Per-block, per-step commit counts for hint-free generation."""
    cfg = SamplerConfig(completion_len=completion_len, num_steps=num_steps, block_len=block_len)
    per_block = spread_counts(cfg.block_len, cfg.steps_per_block)
    return [list(per_block) for _ in range(cfg.num_blocks)]


@dataclass
class StepRecord:
    """Snapshot of one denoising step, for invariant checks."""

    block: int
    step: int
    committed: list[np.ndarray]  # per row: absolute positions committed this step
    tokens: Array  # full (batch, seq) state after the step


def _sample_candidates(
    probs: Array, rng: np.random.Generator | None, temperature: float
) -> tuple[Array, Array]:
    """Draw one candidate per row of `probs` (n, V); returns (ids, confidence).

    Confidence is the probability the sampling distribution assigns to the
    drawn candidate. Temperature 0 bypasses the rng entirely (argmax path).
    """
    n, _ = probs.shape
    if temperature == 0.0:
        ids = probs.argmax(axis=-1)
    else:
        u = rng.random(n)
        cum = np.cumsum(probs, axis=-1)
        ids = np.minimum((cum < u[:, None]).sum(axis=-1), probs.shape[-1] - 1)
    conf = np.take_along_axis(probs, ids[:, None], axis=-1)[:, 0]
    return ids.astype(np.int64), conf


def generate(
    params: dict[str, Array],
    config: ModelConfig,
    sampler: SamplerConfig,
    prompts: Array,
    rngs: list[np.random.Generator] | None = None,
    initial_completion: Array | None = None,
    record: bool = False,
) -> Array | tuple[Array, list[StepRecord]]:
    """Blockwise iterative denoising; returns committed completions (batch, L).

    `initial_completion` may pre-commit positions (hint injection): non-mask
    entries stay fixed for the whole run and the per-block schedule is
    recomputed over the remaining masked positions. Each row consumes only
    its own rng stream, so batched and one-at-a-time generation agree
    bit-for-bit.
    """
    prompts = np.asarray(prompts, dtype=np.int64)
    if prompts.ndim == 1:
        prompts = prompts[None, :]
    bsz, prompt_len = prompts.shape
    L = sampler.completion_len
    if prompt_len + L > config.max_seq_len:
        raise InputError("prompt + completion exceeds max_seq_len")
    if np.any(prompts == config.mask_token_id):
        raise InputError("prompt must not contain mask tokens")
    if initial_completion is None:
        completion = np.full((bsz, L), config.mask_token_id, dtype=np.int64)
    else:
        completion = np.asarray(initial_completion, dtype=np.int64).copy()
        if completion.shape != (bsz, L):
            raise InputError(f"initial completion must have shape ({bsz}, {L})")
    if sampler.temperature > 0:
        if rngs is None or len(rngs) != bsz:
            raise InputError("one rng per batch row is required when temperature > 0")

    x = np.concatenate([prompts, completion], axis=1)
    lifted = ad.lift(params)
    steps_per_block = sampler.steps_per_block
    records: list[StepRecord] = []

    for block in range(sampler.num_blocks):
        lo = prompt_len + block * sampler.block_len
        hi = lo + sampler.block_len
        # per-row counts over the positions still masked in this block
        counts = []
        for r in range(bsz):
            n_masked = int((x[r, lo:hi] == config.mask_token_id).sum())
            counts.append(spread_counts(n_masked, steps_per_block))
        for step in range(steps_per_block):
            active = [r for r in range(bsz) if counts[r][step] > 0]
            if not active:
                if record:
                    records.append(StepRecord(block, step, [np.empty(0, int)] * bsz, x.copy()))
                continue
            with ad.no_grad():
                logits = forward_logits(lifted, config, x[active]).data
            logits[..., config.mask_token_id] = -1e30  # MASK is never a valid commit
            probs = token_distribution(logits, sampler.temperature)
            committed: list[np.ndarray] = [np.empty(0, dtype=int) for _ in range(bsz)]
            for j, r in enumerate(active):
                masked_pos = np.flatnonzero(x[r, lo:hi] == config.mask_token_id) + lo
                row_probs = probs[j, masked_pos]
                rng = rngs[r] if sampler.temperature > 0 else None
                cand, conf = _sample_candidates(row_probs, rng, sampler.temperature)
                order = np.lexsort((masked_pos, -conf))  # confidence desc, position asc
                take = order[: counts[r][step]]
                x[r, masked_pos[take]] = cand[take]
                committed[r] = masked_pos[take]
            if record:
                records.append(StepRecord(block, step, committed, x.copy()))

    out = x[:, prompt_len:]
    assert not np.any(out == config.mask_token_id), "generation left masked positions"
    if record:
        return out, records
    return out
