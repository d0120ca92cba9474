"""Experiment orchestration: run loops, evaluation, metrics, checkpoints.

Runs are pure functions of (config, seed): prompt selection, rollouts, and
eval sampling all draw from streams keyed on (seed, purpose, step), so a
metrics file can be reproduced bit-for-bit and a resumed run continues
exactly where the interrupted one left off.
"""

from __future__ import annotations

import copy
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Array
from .diffusion import SamplerConfig, generate
from .errors import CheckpointError, ConfigError, InputError
from .inpaint import inpaint_call_count
from .model import ModelConfig
from .optim import OptimizerState, ScheduleConfig, init_optimizer_state, lr_schedule
from .policy import IGPOConfig, RlPrompt, rl_step
from .rngs import derive_rng
from .sft import SftConfig, run_sft
from .tasks import DatasetBundle, Problem, load_dataset, pad_prompt, verify

CHECKPOINT_VERSION = 1

METRICS_COLUMNS = (
    "step",
    "mean_reward",
    "all_wrong_pre",
    "all_wrong_post",
    "replaced_mean",
    "clip_fraction",
    "kl",
    "hint_entropy",
    "eval_acc",
)
METRICS_HEADER = ",".join(METRICS_COLUMNS)


@dataclass
class StepMetrics:
    """One emitted training-step row."""

    step: int
    mean_reward: float
    all_wrong_pre: float
    all_wrong_post: float
    replaced_mean: float
    clip_fraction: float
    kl: float
    hint_entropy: float | None = None
    eval_acc: float | None = None

    def __post_init__(self):
        for name in ("mean_reward", "all_wrong_pre", "all_wrong_post", "clip_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InputError(f"{name}={v} outside [0, 1]")
        if self.all_wrong_post > self.all_wrong_pre:
            raise InputError("augmentation may only reduce the all-wrong fraction")

    def as_row(self) -> str:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, int):
                return str(v)
            return repr(float(v))

        return ",".join(fmt(getattr(self, c)) for c in METRICS_COLUMNS)


class MetricsWriter:
    """Append-only delimited metrics stream, flushed per row."""

    def __init__(self, path: str | Path, resume: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        exists = self.path.exists()
        self._fh: io.TextIOBase = open(self.path, "a" if resume and exists else "w")
        if not (resume and exists):
            self._fh.write(METRICS_HEADER + "\n")
            self._fh.flush()

    def write(self, metrics: StepMetrics) -> None:
        self._fh.write(metrics.as_row() + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_metrics(path: str | Path) -> list[dict]:
    rows = []
    with open(path) as f:
        header = f.readline().strip().split(",")
        if header != list(METRICS_COLUMNS):
            raise InputError(f"unexpected metrics header in {path}")
        for line in f:
            parts = line.rstrip("\n").split(",")
            row = {}
            for col, raw in zip(header, parts):
                if raw == "":
                    row[col] = None
                elif col == "step":
                    row[col] = int(raw)
                else:
                    row[col] = float(raw)
            rows.append(row)
    return rows


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    params: dict[str, Array],
    config: ModelConfig,
    opt_state: OptimizerState | None = None,
    step: int = 0,
    ref_params: dict[str, Array] | None = None,
) -> None:
    """Versioned binary checkpoint; load(save(x)) is bit-exact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(config),
        "step": int(step),
        "has_opt": opt_state is not None,
        "has_ref": ref_params is not None,
        "opt_step": opt_state.step if opt_state is not None else 0,
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for name, arr in params.items():
        arrays[f"param:{name}"] = arr
    if opt_state is not None:
        for name, arr in opt_state.m.items():
            arrays[f"optm:{name}"] = arr
        for name, arr in opt_state.v.items():
            arrays[f"optv:{name}"] = arr
    if ref_params is not None:
        for name, arr in ref_params.items():
            arrays[f"ref:{name}"] = arr
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    tmp.replace(path)


@dataclass
class Checkpoint:
    params: dict[str, Array]
    model_config: ModelConfig
    step: int
    opt_state: OptimizerState | None
    ref_params: dict[str, Array] | None


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except Exception as e:  # zipfile/format corruption
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if "__meta__" not in arrays:
        raise CheckpointError(f"checkpoint {path} lacks metadata")
    meta = json.loads(bytes(arrays["__meta__"]).decode())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')}")
    config = ModelConfig(**meta["model_config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError(
            f"checkpoint model config {config} does not match expected {expected_config}"
        )
    params = {k[6:]: arrays[k] for k in arrays if k.startswith("param:")}
    opt_state = None
    if meta["has_opt"]:
        opt_state = OptimizerState(
            m={k[5:]: arrays[k] for k in arrays if k.startswith("optm:")},
            v={k[5:]: arrays[k] for k in arrays if k.startswith("optv:")},
            step=meta["opt_step"],
        )
        if set(opt_state.m) != set(params) or set(opt_state.v) != set(params):
            raise CheckpointError("optimizer state does not cover the parameter set")
    ref = {k[4:]: arrays[k] for k in arrays if k.startswith("ref:")} if meta["has_ref"] else None
    for name, arr in params.items():
        if not np.isfinite(arr).all():
            raise CheckpointError(f"checkpoint parameter '{name}' contains non-finite values")
    return Checkpoint(params=params, model_config=config, step=meta["step"], opt_state=opt_state, ref_params=ref)


# -- evaluation ---------------------------------------------------------------

EVAL_BATCH = 64


def _batched_generate(params, config, sampler, prompts, rngs):
    outs = []
    for lo in range(0, prompts.shape[0], EVAL_BATCH):
        hi = min(lo + EVAL_BATCH, prompts.shape[0])
        outs.append(
            generate(
                params, config, sampler, prompts[lo:hi],
                rngs=rngs[lo:hi] if rngs is not None else None,
            )
        )
    return np.concatenate(outs, axis=0)


def evaluate(
    params: dict[str, Array],
    config: ModelConfig,
    sampler: SamplerConfig,
    problems: list[Problem],
    prompt_len: int,
    k: int = 1,
    temperature: float = 0.1,
    seed: int = 0,
    generate_fn=None,
) -> dict:
    """pass@1 (greedy), pass@k, and avg@k over a problem list.

    pass@1 always uses temperature 0; the k samples use `temperature` with
    one rng stream per (problem index, sample index), so results do not
    depend on batching or worker count.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    gen = generate_fn or _batched_generate
    prompts = np.stack([pad_prompt(p.prompt_tokens, prompt_len) for p in problems])
    answers = [p.answer for p in problems]

    greedy_sampler = replace(sampler, temperature=0.0)
    greedy = gen(params, config, greedy_sampler, prompts, None)
    pass1 = float(np.mean([verify(greedy[i], answers[i]) for i in range(len(problems))]))

    sample_sampler = replace(sampler, temperature=temperature)
    correct = np.zeros((len(problems), k), dtype=bool)
    for j in range(k):
        if temperature == 0.0:
            outs = greedy
        else:
            rngs = [derive_rng("eval", seed, i, j) for i in range(len(problems))]
            outs = gen(params, config, sample_sampler, prompts, rngs)
        correct[:, j] = [verify(outs[i], answers[i]) for i in range(len(problems))]
    return {
        "pass_at_1": pass1,
        "pass_at_k": float(correct.any(axis=1).mean()),
        "avg_at_k": float(correct.mean()),
        "k": k,
        "temperature": temperature,
    }


# -- run configuration ---------------------------------------------------------


@dataclass(frozen=True)
class RlConfig:
    steps: int = 100
    prompts_per_step: int = 4
    peak_lr: float = 3e-4
    warmup_steps: int = 5
    eval_every: int = 10
    eval_problems: int = 32
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.steps < 1 or self.prompts_per_step < 1:
            raise ConfigError("rl steps and prompts_per_step must be positive")
        if self.eval_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("cadences must be positive")


@dataclass
class RunConfig:
    mode: str  # sft | rl-grpo | rl-igpo | eval | compare
    data_dir: str
    out_dir: str
    seeds: tuple[int, ...] = (0,)
    checkpoint_in: str | None = None
    resume_from: str | None = None
    model: ModelConfig | None = None  # defaults to checkpoint's config
    sampler: SamplerConfig = field(
        default_factory=lambda: SamplerConfig(completion_len=64, num_steps=32, block_len=16, temperature=1.0)
    )
    igpo: IGPOConfig = field(default_factory=IGPOConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    compare_variants: tuple[str, ...] = ("grpo", "igpo")

    def __post_init__(self):
        if self.mode not in ("sft", "rl-grpo", "rl-igpo", "eval", "compare"):
            raise ConfigError(f"unknown mode '{self.mode}'")
        if self.mode == "compare" and len(self.seeds) < 2:
            raise ConfigError("compare mode needs at least 2 seeds")
        if not self.seeds:
            raise ConfigError("at least one seed is required")


VARIANTS = {
    "grpo": {"inpainting_enabled": False},
    "igpo": {},
    "igpo-full": {"eta_low": 1.0, "eta_high": 1.0},
}


def igpo_config_for_variant(base: IGPOConfig, variant: str) -> IGPOConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown compare variant '{variant}' (known: {sorted(VARIANTS)})")
    return replace(base, **VARIANTS[variant])


# -- RL run loop ----------------------------------------------------------------


def _rl_prompt_pool(bundle: DatasetBundle) -> list[RlPrompt]:
    pool = []
    prompt_len = bundle.config.prompt_len
    for i, p in enumerate(bundle.rl):
        pool.append(
            RlPrompt(
                prompt_id=i,
                tokens=pad_prompt(p.prompt_tokens, prompt_len),
                trace=p.trace,
                reward_fn=(lambda toks, ans=p.answer: verify(toks, ans)),
            )
        )
    return pool


def run_rl(
    cfg: RunConfig,
    seed: int,
    mode: str | None = None,
    out_dir: str | Path | None = None,
) -> dict:
    """Execute one RL run (grpo baseline or igpo) for one seed.

    Snapshots pi_old each outer step, holds pi_ref fixed at the phase
    initialization, appends one metrics row per step, and checkpoints on
    the configured cadence. Returns a summary dict with paths and final eval.
    """
    mode = mode or cfg.mode
    if mode not in ("rl-grpo", "rl-igpo"):
        raise ConfigError(f"run_rl cannot execute mode '{mode}'")
    igpo_cfg = cfg.igpo
    if mode == "rl-grpo":
        igpo_cfg = replace(igpo_cfg, inpainting_enabled=False)

    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = load_dataset(cfg.data_dir)
    pool = _rl_prompt_pool(bundle)
    if not pool:
        raise ConfigError("RL prompt pool is empty")
    hard_eval = bundle.eval_band("hard")[: cfg.rl.eval_problems]

    if cfg.resume_from:
        ck = load_checkpoint(cfg.resume_from, expected_config=cfg.model)
        if ck.opt_state is None or ck.ref_params is None:
            raise CheckpointError("resume checkpoint lacks optimizer state or reference params")
        params, opt, ref_params = ck.params, ck.opt_state, ck.ref_params
        start_step = ck.step
        model_cfg = ck.model_config
    else:
        if not cfg.checkpoint_in:
            raise ConfigError("rl mode needs --checkpoint (the SFT or base initialization)")
        ck = load_checkpoint(cfg.checkpoint_in, expected_config=cfg.model)
        params = copy.deepcopy(ck.params)
        ref_params = copy.deepcopy(ck.params)  # pi_ref frozen at initialization
        opt = init_optimizer_state(params)
        start_step = 0
        model_cfg = ck.model_config

    schedule = ScheduleConfig(
        mode="rl", peak_lr=cfg.rl.peak_lr, total_steps=cfg.rl.steps,
        warmup_steps=min(cfg.rl.warmup_steps, cfg.rl.steps),
    )
    metrics_path = out / "metrics.csv"
    writer = MetricsWriter(metrics_path, resume=start_step > 0)
    inpaint_calls_before = inpaint_call_count()

    final_eval = None
    for step in range(start_step + 1, cfg.rl.steps + 1):
        params_old = copy.deepcopy(params)
        rng = derive_rng("rl-prompts", seed, step)
        idx = rng.choice(len(pool), size=min(cfg.rl.prompts_per_step, len(pool)), replace=False)
        batch = [pool[i] for i in idx]
        lr = lr_schedule(step - 1, schedule)
        stats = rl_step(
            params, params_old, ref_params, model_cfg, cfg.sampler,
            batch, igpo_cfg, opt, lr, rng_key=("rl", seed, step),
        )
        eval_acc = None
        if hard_eval and (step % cfg.rl.eval_every == 0 or step == cfg.rl.steps):
            result = evaluate(
                params, model_cfg, cfg.sampler, hard_eval,
                prompt_len=bundle.config.prompt_len, k=1, temperature=0.0, seed=seed,
            )
            eval_acc = result["pass_at_1"]
            final_eval = eval_acc
        writer.write(
            StepMetrics(
                step=step,
                mean_reward=stats["mean_reward"],
                all_wrong_pre=stats["all_wrong_pre"],
                all_wrong_post=stats["all_wrong_post"],
                replaced_mean=stats["replaced_mean"],
                clip_fraction=stats["clip_fraction"],
                kl=stats["kl"],
                hint_entropy=stats["hint_entropy"],
                eval_acc=eval_acc,
            )
        )
        if step % cfg.rl.checkpoint_every == 0 or step == cfg.rl.steps:
            save_checkpoint(out / "checkpoint.npz", params, model_cfg, opt, step, ref_params)
        if mode == "rl-grpo" and inpaint_call_count() != inpaint_calls_before:
            raise ConfigError("baseline purity violated: inpainting ran in rl-grpo mode")
    writer.close()
    return {
        "metrics": str(metrics_path),
        "checkpoint": str(out / "checkpoint.npz"),
        "final_hard_eval": final_eval,
        "mode": mode,
        "seed": seed,
    }


# -- SFT run -------------------------------------------------------------------


def run_sft_mode(cfg: RunConfig, seed: int, out_dir: str | Path | None = None) -> dict:
    """Stage-1 training: SFT from random init (or --checkpoint) plus eval curve."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = load_dataset(cfg.data_dir)
    sft_cfg = replace(
        cfg.sft,
        seed=seed,
        prompt_len=bundle.config.prompt_len,
        completion_len=bundle.config.completion_len,
    )
    model_cfg = cfg.model
    if cfg.checkpoint_in:
        ck = load_checkpoint(cfg.checkpoint_in, expected_config=model_cfg)
        params, model_cfg = copy.deepcopy(ck.params), ck.model_config
    else:
        if model_cfg is None:
            raise ConfigError("sft mode needs a model config or an input checkpoint")
        from .model import init_params

        params = init_params(model_cfg, seed)
    easy_eval = bundle.eval_band("easy")[:32]

    def eval_hook(p, epoch):
        if (epoch + 1) % 10 != 0 and epoch != sft_cfg.epochs - 1:
            return None
        res = evaluate(
            p, model_cfg, cfg.sampler, easy_eval,
            prompt_len=bundle.config.prompt_len, k=1, temperature=0.0, seed=seed,
        )
        return res["pass_at_1"]

    params, history = run_sft(sft_cfg, bundle.sft, model_cfg, params, eval_hook=eval_hook)
    save_checkpoint(out / "checkpoint.npz", params, model_cfg, step=0)
    with open(out / "sft_history.json", "w") as f:
        json.dump(history, f, indent=2)
    return {"checkpoint": str(out / "checkpoint.npz"), "history": history}


# -- compare -------------------------------------------------------------------


def summarize_compare(run_dirs: dict[tuple[str, int], Path], out_path: Path) -> dict:
    """Merge per-seed metrics into mean +- standard error per step per variant."""
    variants: dict[str, list[list[dict]]] = {}
    for (variant, _seed), d in run_dirs.items():
        variants.setdefault(variant, []).append(read_metrics(Path(d) / "metrics.csv"))
    summary: dict = {"variants": {}}
    lines = ["variant,step,all_wrong_post_mean,all_wrong_post_sem,mean_reward_mean,mean_reward_sem"]
    for variant, runs in variants.items():
        n_steps = min(len(r) for r in runs)
        per_step = []
        for s in range(n_steps):
            post = np.array([r[s]["all_wrong_post"] for r in runs])
            rew = np.array([r[s]["mean_reward"] for r in runs])
            sem = lambda x: float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0
            per_step.append(
                {
                    "step": runs[0][s]["step"],
                    "all_wrong_post_mean": float(post.mean()),
                    "all_wrong_post_sem": sem(post),
                    "mean_reward_mean": float(rew.mean()),
                    "mean_reward_sem": sem(rew),
                }
            )
            lines.append(
                f"{variant},{per_step[-1]['step']},{per_step[-1]['all_wrong_post_mean']!r},"
                f"{per_step[-1]['all_wrong_post_sem']!r},{per_step[-1]['mean_reward_mean']!r},"
                f"{per_step[-1]['mean_reward_sem']!r}"
            )
        finals = [
            next((r[s]["eval_acc"] for s in range(len(r) - 1, -1, -1) if r[s]["eval_acc"] is not None), None)
            for r in runs
        ]
        summary["variants"][variant] = {
            "per_step": per_step,
            "mean_all_wrong_post": float(np.mean([p["all_wrong_post_mean"] for p in per_step])),
            "final_hard_eval": finals,
        }
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path.with_suffix(".csv"), "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(out_path.with_suffix(".json"), "w") as f:
        json.dump(summary, f, indent=2)
    return summary


def run_compare(cfg: RunConfig) -> dict:
    """Matched-seed runs for each variant, then a merged summary."""
    out = Path(cfg.out_dir)
    run_dirs: dict[tuple[str, int], Path] = {}
    for variant in cfg.compare_variants:
        igpo_cfg = igpo_config_for_variant(cfg.igpo, variant)
        mode = "rl-grpo" if variant == "grpo" else "rl-igpo"
        for seed in cfg.seeds:
            sub = out / f"{variant}-seed{seed}"
            run_cfg = replace(cfg, igpo=igpo_cfg)
            run_rl(run_cfg, seed=seed, mode=mode, out_dir=sub)
            run_dirs[(variant, seed)] = sub
    return summarize_compare(run_dirs, out / "summary")
