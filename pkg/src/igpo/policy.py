"""Group-relative policy optimization with elastic inpainting augmentation.

The sampler draws G completions per prompt; when every reward is zero the
group-relative advantages vanish and the policy gradient carries no signal.
In that all-wrong case (and only then) hint-guided inpainting generates a
second set of completions, and verified-correct ones replace up to
floor(lambda * G) of the originals, restoring reward variance. Log
probabilities come from a single-pass mean-field estimate (whole completion
masked, prompt clean), importance ratios default to the length-normalized
sequence form, and gradient updates at injected hint positions are
restricted to the highest-entropy fraction tau.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Tensor
from .diffusion import SamplerConfig, generate
from .errors import ConfigError, InputError
from .inpaint import (
    GroundTruthTrace,
    build_hint_initialization,
    build_hint_mask,
    generate_with_hints,
    segment_trace,
)
from .model import ModelConfig, forward_logits, position_entropy
from .optim import adam_update
from .rngs import KeyPart, derive_rng
from .tasks import ANSWER_CLOSE, PAD

RATIO_CLAMP = 30.0  # bound on log-ratios before exponentiation; overflow guard

RewardFn = Callable[[Array], int]


@dataclass(frozen=True)
class IGPOConfig:
    group_size: int = 8  # G
    inner_updates: int = 4  # mu
    clip_eps: float = 0.2  # epsilon
    kl_beta: float = 0.01  # beta
    eta_low: float = 0.2
    eta_high: float = 0.6
    replace_frac: float = 0.5  # lambda
    entropy_tau: float = 0.2  # tau
    chunk_min: int = 5
    chunk_max: int = 10
    ratio_mode: str = "sequence"  # "sequence" | "token"
    inpainting_enabled: bool = True

    def __post_init__(self):
        if self.group_size < 2:
            raise ConfigError("group size must be >= 2")
        if not 0.0 <= self.eta_low <= self.eta_high <= 1.0:
            raise ConfigError("need 0 <= eta_low <= eta_high <= 1")
        if not 0.0 < self.replace_frac < 1.0:
            raise ConfigError("replacement fraction must lie in (0, 1)")
        if not 0.0 < self.entropy_tau <= 1.0:
            raise ConfigError("entropy tau must lie in (0, 1]")
        if self.clip_eps <= 0:
            raise ConfigError("clip epsilon must be positive")
        if self.kl_beta < 0:
            raise ConfigError("kl beta must be >= 0")
        if not 1 <= self.chunk_min <= self.chunk_max:
            raise ConfigError("need 1 <= chunk_min <= chunk_max")
        if self.inner_updates < 1:
            raise ConfigError("inner updates must be >= 1")
        if self.ratio_mode not in ("sequence", "token"):
            raise ConfigError(f"unknown ratio mode '{self.ratio_mode}'")

    @property
    def max_replacements(self) -> int:
        return int(math.floor(self.replace_frac * self.group_size))


def group_advantages(rewards) -> Array:
    """Unnormalized group-relative advantages: A_i = r_i - mean(r)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        raise InputError("a rollout group needs at least 2 members")
    return rewards - rewards.mean()


def is_all_wrong(rewards) -> bool:
    """True iff every reward in the group is zero (the augmentation trigger)."""
    rewards = np.asarray(rewards)
    if rewards.size == 0:
        raise InputError("rewards must be nonempty")
    return bool(np.all(rewards == 0))


def completion_length(tokens: Array) -> int:
    """Loss-relevant length: up to the first </answer>, else trailing PADs trimmed."""
    tokens = np.asarray(tokens)
    closes = np.flatnonzero(tokens == ANSWER_CLOSE)
    if closes.size:
        return int(closes[0]) + 1
    nonpad = np.flatnonzero(tokens != PAD)
    return int(nonpad[-1]) + 1 if nonpad.size else 1


@dataclass
class RolloutGroup:
    """G completions for one prompt with rewards and inpainting provenance."""

    prompt_id: int
    prompt_tokens: Array  # (P,) padded prompt
    completions: Array  # (G, L)
    rewards: Array  # (G,) in {0, 1}
    inpainted: Array  # (G,) bool
    hint_masks: Array  # (G, L) bool; all-False rows for originals
    etas: Array  # (G,) realized hint ratio, nan for originals
    all_wrong_pre: bool
    replaced_count: int  # K

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.int64)
        self.inpainted = np.asarray(self.inpainted, dtype=bool)
        if np.any(self.inpainted & (self.rewards != 1)):
            raise InputError("only verified-correct inpainted members may enter a group")

    @property
    def group_size(self) -> int:
        return self.completions.shape[0]


@dataclass
class MeanFieldEstimate:
    """Single-pass log-probability estimate with the whole completion masked."""

    token_logps: Array  # (..., L) log-probs of the completion tokens
    entropies: Array  # (L,) per-position predictive entropy (shared across members)

    @property
    def sequence_logp(self) -> Array:
        return self.token_logps.sum(axis=-1)


def mean_field_input(prompt_tokens: Array, completion_len: int, mask_token_id: int) -> Array:
    prompt_tokens = np.asarray(prompt_tokens, dtype=np.int64)
    return np.concatenate(
        [prompt_tokens, np.full(completion_len, mask_token_id, dtype=np.int64)]
    )


def mean_field_logprob(
    params: dict[str, Array],
    config: ModelConfig,
    prompt_tokens: Array,
    completions: Array,
) -> MeanFieldEstimate:
    """Estimate per-token policy log-probs in one forward pass.

    The model sees [prompt; all-MASK completion region] -- no mask
    randomness anywhere, so the estimate is deterministic. `completions`
    may be (L,) or (G, L); members share the same forward pass because the
    input does not depend on the completion tokens.
    """
    completions = np.asarray(completions, dtype=np.int64)
    squeeze = completions.ndim == 1
    if squeeze:
        completions = completions[None, :]
    L = completions.shape[-1]
    x = mean_field_input(prompt_tokens, L, config.mask_token_id)
    with ad.no_grad():
        logits = forward_logits(ad.lift(params), config, x).data[0, -L:]
    lsm = logits - logits.max(axis=-1, keepdims=True)
    lsm = lsm - np.log(np.exp(lsm).sum(axis=-1, keepdims=True))
    token_logps = np.take_along_axis(lsm[None, :, :].repeat(completions.shape[0], 0),
                                     completions[..., None], axis=-1)[..., 0]
    est = MeanFieldEstimate(token_logps=token_logps, entropies=position_entropy(logits))
    if squeeze:
        est.token_logps = est.token_logps[0]
    return est


def entropy_filter(hint_positions: Array, entropies: Array, tau: float) -> Array:
    """Positions (among the given hint positions) kept learnable.

    Exactly max(1, ceil(tau * n)) of the n hint positions survive, picked
    by highest entropy with ties broken toward lower position index.
    """
    if not 0.0 < tau <= 1.0:
        raise ConfigError("tau must lie in (0, 1]")
    hint_positions = np.asarray(hint_positions, dtype=np.int64)
    entropies = np.asarray(entropies, dtype=np.float64)
    n = hint_positions.size
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if entropies.shape != hint_positions.shape:
        raise InputError("one entropy value per hint position is required")
    count = max(1, int(math.ceil(tau * n)))
    order = np.lexsort((hint_positions, -entropies))
    return np.sort(hint_positions[order[:count]])


def reverse_kl_estimate(logp_theta: Array, logp_ref: Array) -> float:
    """Nonnegative per-token k3 estimator exp(d) - d - 1, d = ref - theta, averaged."""
    logp_theta = np.asarray(logp_theta, dtype=np.float64)
    logp_ref = np.asarray(logp_ref, dtype=np.float64)
    if logp_theta.shape != logp_ref.shape:
        raise InputError("log-prob grids must align")
    d = logp_ref - logp_theta
    return float(np.mean(np.exp(d) - d - 1.0))


# -- sampling ---------------------------------------------------------------


def igpo_sample(
    params: dict[str, Array],
    config: ModelConfig,
    sampler: SamplerConfig,
    prompt_tokens: Array,
    trace: GroundTruthTrace,
    cfg: IGPOConfig,
    reward_fn: RewardFn,
    rng_key: tuple[KeyPart, ...],
    prompt_id: int = 0,
) -> RolloutGroup:
    """Sample a rollout group, inpainting-augmenting it only when all-wrong.

    Non-all-wrong groups return unchanged. In the all-wrong case the trace
    is chunked once, each member gets its own hint ratio eta ~ U[low, high]
    and hint mask, and K = min(#correct inpainted, floor(lambda G)) original
    members (chosen uniformly) are replaced by correct inpainted ones.
    """
    G = cfg.group_size
    L = sampler.completion_len
    prompt_tokens = np.asarray(prompt_tokens, dtype=np.int64)
    prompts = np.tile(prompt_tokens, (G, 1))
    rngs = [derive_rng(*rng_key, "rollout", i) for i in range(G)]
    completions = generate(params, config, sampler, prompts, rngs=rngs)
    rewards = np.array([reward_fn(completions[i]) for i in range(G)], dtype=np.int64)

    group = RolloutGroup(
        prompt_id=prompt_id,
        prompt_tokens=prompt_tokens,
        completions=completions,
        rewards=rewards,
        inpainted=np.zeros(G, dtype=bool),
        hint_masks=np.zeros((G, L), dtype=bool),
        etas=np.full(G, np.nan),
        all_wrong_pre=is_all_wrong(rewards),
        replaced_count=0,
    )
    if not group.all_wrong_pre or not cfg.inpainting_enabled:
        return group

    chunks = segment_trace(trace, cfg.chunk_min, cfg.chunk_max, derive_rng(*rng_key, "chunks"))
    hint_masks = np.zeros((G, L), dtype=bool)
    etas = np.zeros(G)
    inits = np.zeros((G, L), dtype=np.int64)
    for i in range(G):
        rng_h = derive_rng(*rng_key, "hint", i)
        etas[i] = rng_h.uniform(cfg.eta_low, cfg.eta_high)
        hint_masks[i] = build_hint_mask(chunks, etas[i], L, rng_h)
        inits[i] = build_hint_initialization(trace, hint_masks[i], L, config.mask_token_id)
    gen_rngs = [derive_rng(*rng_key, "inpaint", i) for i in range(G)]
    inpainted = generate_with_hints(params, config, sampler, prompts, inits, gen_rngs)
    for i in range(G):  # hints must survive denoising verbatim
        pos = np.flatnonzero(hint_masks[i])
        assert np.array_equal(inpainted[i][pos], trace.tokens[pos]), "hint token rewritten"
    inpaint_rewards = np.array([reward_fn(inpainted[i]) for i in range(G)], dtype=np.int64)

    correct = np.flatnonzero(inpaint_rewards == 1)
    K = min(correct.size, cfg.max_replacements)
    if K > 0:
        rng_r = derive_rng(*rng_key, "replace")
        winners = correct[rng_r.choice(correct.size, size=K, replace=False)]
        slots = rng_r.choice(G, size=K, replace=False)
        for slot, win in zip(slots, winners):
            group.completions[slot] = inpainted[win]
            group.rewards[slot] = 1
            group.inpainted[slot] = True
            group.hint_masks[slot] = hint_masks[win]
            group.etas[slot] = etas[win]
        group.replaced_count = int(K)
    if group.inpainted.sum() > cfg.max_replacements:
        raise InputError("replacement cap exceeded")
    return group


# -- loss ---------------------------------------------------------------------


@dataclass
class PreparedGroup:
    """Everything the inner updates need, frozen once per outer step."""

    group: RolloutGroup
    advantages: Array  # (G,)
    old_logps: Array  # (G, L) mean-field under pi_old
    ref_logps: Array  # (G, L) mean-field under pi_ref
    included: Array  # (G, L) bool: tokens that enter ratios, surrogate, KL
    lengths: Array  # (G,) trimmed completion lengths
    mf_input: Array  # (P + L,) ids of the shared mean-field forward input
    selected_hint_entropies: Array  # entropies at entropy-selected hint positions


def included_token_mask(
    group: RolloutGroup, cfg: IGPOConfig, entropies: Array
) -> tuple[Array, Array, Array]:
    """Token-inclusion mask per member plus trimmed lengths.

    Originals include every token up to their trimmed length. Inpainted
    members include their self-generated tokens plus only the
    entropy-selected hint positions.
    """
    G, L = group.completions.shape
    included = np.zeros((G, L), dtype=bool)
    lengths = np.zeros(G, dtype=np.int64)
    selected_entropies: list[float] = []
    for i in range(G):
        L_i = completion_length(group.completions[i])
        lengths[i] = L_i
        base = np.zeros(L, dtype=bool)
        base[:L_i] = True
        if not group.inpainted[i]:
            included[i] = base
            continue
        hints = group.hint_masks[i] & base
        included[i] = base & ~group.hint_masks[i]
        hint_pos = np.flatnonzero(hints)
        keep = entropy_filter(hint_pos, entropies[hint_pos], cfg.entropy_tau)
        included[i, keep] = True
        selected_entropies.extend(entropies[keep].tolist())
        if not included[i].any():  # safety net; cannot trigger with L_i >= 1
            included[i, 0] = True
    return included, lengths, np.asarray(selected_entropies)


def prepare_groups(
    params_old: dict[str, Array],
    params_ref: dict[str, Array],
    config: ModelConfig,
    groups: Sequence[RolloutGroup],
    cfg: IGPOConfig,
) -> list[PreparedGroup]:
    """Advantages, frozen mean-field estimates, and inclusion masks per group."""
    prepared = []
    for g in groups:
        adv = group_advantages(g.rewards)
        est_old = mean_field_logprob(params_old, config, g.prompt_tokens, g.completions)
        est_ref = mean_field_logprob(params_ref, config, g.prompt_tokens, g.completions)
        included, lengths, sel_ent = included_token_mask(g, cfg, est_old.entropies)
        prepared.append(
            PreparedGroup(
                group=g,
                advantages=adv,
                old_logps=est_old.token_logps,
                ref_logps=est_ref.token_logps,
                included=included,
                lengths=lengths,
                mf_input=mean_field_input(
                    g.prompt_tokens, g.completions.shape[1], config.mask_token_id
                ),
                selected_hint_entropies=sel_ent,
            )
        )
    return prepared


def igpo_loss(
    params: dict[str, Tensor],
    config: ModelConfig,
    prepared: Sequence[PreparedGroup],
    cfg: IGPOConfig,
) -> tuple[Tensor, dict]:
    """Clipped-surrogate loss with reverse-KL regularization (differentiable).

    Sequence mode shares one length-normalized ratio across a member's
    included tokens; token mode uses per-token ratios. The KL term is the
    per-token k3 estimator averaged over included tokens, then members,
    then groups. Gradients flow only through the current-policy log-probs.
    """
    if not prepared:
        raise InputError("need at least one group")
    L = prepared[0].group.completions.shape[1]
    inputs = np.stack([p.mf_input for p in prepared])
    logits = forward_logits(params, config, inputs)
    lsm = ad.log_softmax(logits[:, -L:, :])

    surrogates = []
    kls = []
    clip_hits = 0
    clip_total = 0
    for gi, p in enumerate(prepared):
        G = p.group.group_size
        comp = p.group.completions
        w = p.included.astype(np.float64)
        n_inc = w.sum(axis=1)
        lp = ad.take_along_last(ad.expand(lsm[gi], (G, L, lsm.shape[-1])), comp)
        adv = p.advantages

        if cfg.ratio_mode == "sequence":
            s = ad.tsum(ad.mul(ad.sub(lp, p.old_logps), w), axis=-1) / n_inc
            rho = ad.exp(ad.clip(s, -RATIO_CLAMP, RATIO_CLAMP))
            unclipped = ad.mul(rho, adv)
            clipped = ad.mul(ad.clip(rho, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), adv)
            member_surr = ad.minimum(unclipped, clipped)
            rho_vals = rho.data
            clip_hits += int(
                (((adv > 0) & (rho_vals > 1 + cfg.clip_eps))
                 | ((adv < 0) & (rho_vals < 1 - cfg.clip_eps))).sum()
            )
            clip_total += G
        else:
            d = ad.clip(ad.sub(lp, p.old_logps), -RATIO_CLAMP, RATIO_CLAMP)
            rho = ad.exp(d)
            adv_tok = np.repeat(adv[:, None], L, axis=1)
            unclipped = ad.mul(rho, adv_tok)
            clipped = ad.mul(ad.clip(rho, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), adv_tok)
            tok_surr = ad.mul(ad.minimum(unclipped, clipped), w)
            member_surr = ad.tsum(tok_surr, axis=-1) / n_inc
            rho_vals = rho.data
            hit = ((adv_tok > 0) & (rho_vals > 1 + cfg.clip_eps)) | (
                (adv_tok < 0) & (rho_vals < 1 - cfg.clip_eps)
            )
            clip_hits += int((hit & p.included).sum())
            clip_total += int(p.included.sum())

        surrogates.append(ad.tmean(member_surr))

        delta = ad.clip(ad.sub(p.ref_logps, lp), -RATIO_CLAMP, RATIO_CLAMP)
        k3 = ad.sub(ad.sub(ad.exp(delta), delta), 1.0)
        member_kl = ad.tsum(ad.mul(k3, w), axis=-1) / n_inc
        kls.append(ad.tmean(member_kl))

    policy_term = _mean_scalars(surrogates)
    kl_term = _mean_scalars(kls)
    loss = ad.add(ad.mul(policy_term, -1.0), ad.mul(kl_term, cfg.kl_beta))
    metrics = {
        "kl": float(kl_term.data),
        "clip_fraction": clip_hits / clip_total if clip_total else 0.0,
        "surrogate": float(policy_term.data),
    }
    return loss, metrics


def _mean_scalars(items: list[Tensor]) -> Tensor:
    total = items[0]
    for t in items[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(items))


# -- one outer RL step --------------------------------------------------------


@dataclass
class RlPrompt:
    """A prompt the policy trains on, with its trace and reward oracle."""

    prompt_id: int
    tokens: Array  # (P,) padded prompt
    trace: GroundTruthTrace
    reward_fn: RewardFn


def rl_step(
    params: dict[str, Array],
    params_old: dict[str, Array],
    params_ref: dict[str, Array],
    config: ModelConfig,
    sampler: SamplerConfig,
    prompts: Sequence[RlPrompt],
    cfg: IGPOConfig,
    opt_state,
    lr: float,
    rng_key: tuple[KeyPart, ...],
) -> dict:
    """Sample groups under pi_old, then run mu inner updates on pi_theta.

    Advantages, mean-field estimates under pi_old / pi_ref, and the
    entropy-filtered inclusion masks are computed once per outer step and
    held fixed across the inner updates. Returns step metrics.
    """
    groups = [
        igpo_sample(
            params_old,
            config,
            sampler,
            p.tokens,
            p.trace,
            cfg,
            p.reward_fn,
            rng_key=(*rng_key, "sample", p.prompt_id),
            prompt_id=p.prompt_id,
        )
        for p in prompts
    ]
    prepared = prepare_groups(params_old, params_ref, config, groups, cfg)

    kl_vals, clip_vals, losses = [], [], []
    for _ in range(cfg.inner_updates):
        leaves = ad.lift(params)
        loss, m = igpo_loss(leaves, config, prepared, cfg)
        ad.backward(loss)
        grads = ad.collect_gradients(leaves)
        adam_update(params, grads, opt_state, lr)
        kl_vals.append(m["kl"])
        clip_vals.append(m["clip_fraction"])
        losses.append(float(loss.data))

    sel_ent = (
        np.concatenate([p.selected_hint_entropies for p in prepared])
        if prepared
        else np.empty(0)
    )
    return {
        "mean_reward": float(np.mean([g.rewards.mean() for g in groups])),
        "all_wrong_pre": float(np.mean([g.all_wrong_pre for g in groups])),
        "all_wrong_post": float(np.mean([is_all_wrong(g.rewards) for g in groups])),
        "replaced_mean": float(np.mean([g.replaced_count for g in groups])),
        "clip_fraction": float(np.mean(clip_vals)),
        "kl": float(np.mean(kl_vals)),
        "loss": float(np.mean(losses)),
        "hint_entropy": float(sel_ent.mean()) if sel_ent.size else None,
    }
