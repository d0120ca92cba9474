"""Length-aligned supervised fine-tuning with the masked-diffusion loss.

Only the completion region is ever corrupted; prompts stay clean. Traces
are right-padded with PAD up to the generation budget and the PAD targets
are part of the loss, so the model learns to terminate. Examples over the
budget are rejected, never truncated: the training length, the RL sampling
length, and the evaluation length are the same L by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Tensor
from .diffusion import NelboDraw, T_MIN_DEFAULT, nelbo_loss
from .errors import ConfigError, LengthError, NumericalError
from .model import ModelConfig
from .optim import ScheduleConfig, adam_update, init_optimizer_state, lr_schedule
from .rngs import derive_rng
from .tasks import Problem, pad_prompt, pad_trace


@dataclass(frozen=True)
class SftConfig:
    epochs: int = 60
    batch_size: int = 32
    peak_lr: float = 2e-3
    warmup_steps: int = 100
    min_lr: float = 2e-4
    decay_frac: float = 0.1
    seed: int = 0
    prompt_len: int = 18
    completion_len: int = 64  # the shared SFT / RL / eval budget L
    grad_accum: int = 1
    t_min: float = T_MIN_DEFAULT

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.grad_accum < 1:
            raise ConfigError("epochs, batch size, and grad_accum must be positive")


def encode_example(problem: Problem, cfg: SftConfig) -> tuple[Array, Array]:
    """(padded prompt, padded trace); raises LengthError when over budget."""
    if problem.trace_tokens.size > cfg.completion_len:
        raise LengthError(
            f"trace of {problem.trace_tokens.size} tokens exceeds budget {cfg.completion_len}"
        )
    return (
        pad_prompt(problem.prompt_tokens, cfg.prompt_len),
        pad_trace(problem.trace_tokens, cfg.completion_len),
    )


def sft_loss(
    params: dict[str, Tensor],
    config: ModelConfig,
    prompts: Array,
    traces: Array,
    rng: np.random.Generator | None = None,
    t_min: float = T_MIN_DEFAULT,
    draw: NelboDraw | None = None,
) -> tuple[Tensor, NelboDraw]:
    """Masked-diffusion loss restricted to the completion region.

    `prompts` is (B, P) and `traces` is (B, L) PAD-padded; the loss region
    is exactly the completion columns, so no prompt position is ever masked.
    """
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    traces = np.atleast_2d(np.asarray(traces, dtype=np.int64))
    x0 = np.concatenate([prompts, traces], axis=1)
    region = np.zeros_like(x0, dtype=bool)
    region[:, prompts.shape[1] :] = True
    return nelbo_loss(params, config, x0, region, rng=rng, t_min=t_min, draw=draw)


def run_sft(
    cfg: SftConfig,
    problems: list[Problem],
    config: ModelConfig,
    params: dict[str, Array],
    eval_hook=None,
) -> tuple[dict[str, Array], list[dict]]:
    """Epochs of shuffled minibatch SFT with a warmup-stable-decay schedule.

    Mutates and returns `params`; the history has one record per epoch with
    the mean loss (and whatever `eval_hook(params, epoch)` returns under
    "eval"). Deterministic given (cfg, problems, params): every random draw
    is keyed by (seed, epoch, batch index).
    """
    if not problems:
        raise ConfigError("SFT dataset is empty")
    encoded = [encode_example(p, cfg) for p in problems]
    prompts = np.stack([e[0] for e in encoded])
    traces = np.stack([e[1] for e in encoded])
    n = len(problems)
    micro_per_epoch = max(1, n // cfg.batch_size)
    updates_per_epoch = max(1, -(-micro_per_epoch // cfg.grad_accum))  # ceil
    schedule = ScheduleConfig(
        mode="sft",
        peak_lr=cfg.peak_lr,
        total_steps=cfg.epochs * updates_per_epoch,
        warmup_steps=min(cfg.warmup_steps, cfg.epochs * updates_per_epoch),
        min_lr=cfg.min_lr,
        decay_frac=cfg.decay_frac,
    )
    opt = init_optimizer_state(params)
    history: list[dict] = []
    step = 0
    accum: dict[str, Array] | None = None
    accum_n = 0

    def flush():
        nonlocal accum, accum_n, step
        if accum_n == 0:
            return
        grads = {k: g / accum_n for k, g in accum.items()}
        adam_update(params, grads, opt, lr_schedule(step, schedule))
        step += 1
        accum, accum_n = None, 0

    for epoch in range(cfg.epochs):
        order = derive_rng("sft-shuffle", cfg.seed, epoch).permutation(n)
        epoch_losses = []
        for b in range(micro_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if idx.size == 0:
                continue
            rng = derive_rng("sft-mask", cfg.seed, epoch, b)
            leaves = ad.lift(params)
            try:
                loss, _ = sft_loss(
                    leaves, config, prompts[idx], traces[idx], rng=rng, t_min=cfg.t_min
                )
            except NumericalError as e:
                raise NumericalError(
                    f"SFT diverged at epoch {epoch} step {b}; "
                    f"last finite epoch-mean loss: "
                    f"{history[-1]['loss'] if history else 'n/a'}"
                ) from e
            ad.backward(loss)
            grads = ad.collect_gradients(leaves)
            if accum is None:
                accum, accum_n = grads, 1
            else:
                for k in accum:
                    accum[k] += grads[k]
                accum_n += 1
            if accum_n == cfg.grad_accum:
                flush()
            epoch_losses.append(float(loss.data))
        flush()  # leftover micro-batches still update once per epoch boundary
        record = {"epoch": epoch, "loss": float(np.mean(epoch_losses))}
        if eval_hook is not None:
            result = eval_hook(params, epoch)
            if result is not None:
                record["eval"] = result
        history.append(record)
    return params, history
