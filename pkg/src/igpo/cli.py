"""Command line entry points: make-data, sft, rl, eval, compare.

Configuration comes from an optional YAML file; any key can be overridden
with repeated `--set dotted.key=value` flags, and the common flags
(--data, --out, --seed, ...) override both.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import yaml

from .diffusion import SamplerConfig
from .errors import (
    CheckpointError,
    ConfigError,
    IgpoError,
    InputError,
    NumericalError,
)
from .harness import (
    RlConfig,
    RunConfig,
    evaluate,
    load_checkpoint,
    run_compare,
    run_rl,
    run_sft_mode,
)
from .model import ModelConfig
from .policy import IGPOConfig
from .sft import SftConfig
from .tasks import DatasetConfig, load_dataset, make_dataset, save_dataset

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 2, 3, 4, 5


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config file is not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping at the top level")
    return data


def _apply_sets(cfg: dict, sets: list[str]) -> dict:
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set expects dotted.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override non-mapping key {key!r}")
        node[parts[-1]] = value
    return cfg


def _build(dc_type, data: dict | None, name: str):
    data = data or {}
    known = {f.name for f in fields(dc_type)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    return dc_type(**data)


def build_run_config(cfg: dict, mode: str) -> RunConfig:
    model = _build(ModelConfig, cfg["model"], "model") if cfg.get("model") else None
    seeds = cfg.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    return RunConfig(
        mode=mode,
        data_dir=cfg.get("data", "data"),
        out_dir=cfg.get("out", "runs/out"),
        seeds=tuple(int(s) for s in seeds),
        checkpoint_in=cfg.get("checkpoint"),
        resume_from=cfg.get("resume"),
        model=model,
        sampler=_build(SamplerConfig, cfg.get("sampler"), "sampler")
        if cfg.get("sampler")
        else RunConfig.__dataclass_fields__["sampler"].default_factory(),
        igpo=_build(IGPOConfig, cfg.get("igpo"), "igpo"),
        sft=_build(SftConfig, cfg.get("sft"), "sft"),
        rl=_build(RlConfig, cfg.get("rl"), "rl"),
        compare_variants=tuple(cfg.get("variants", ("grpo", "igpo"))),
    )


def _merge_common_flags(cfg: dict, args: argparse.Namespace) -> dict:
    if getattr(args, "data", None):
        cfg["data"] = args.data
    if getattr(args, "out", None):
        cfg["out"] = args.out
    if getattr(args, "checkpoint", None):
        cfg["checkpoint"] = args.checkpoint
    if getattr(args, "resume", None):
        cfg["resume"] = args.resume
    if getattr(args, "seed", None):
        cfg["seeds"] = args.seed
    if getattr(args, "steps", None):
        cfg.setdefault("rl", {})["steps"] = args.steps
    return cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (dotted path), repeatable")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, action="append", help="run seed, repeatable")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="igpo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="generate the synthetic task splits")
    _add_common(p)

    p = sub.add_parser("sft", help="supervised fine-tuning (stage 1)")
    _add_common(p)
    p.add_argument("--checkpoint", help="optional warm-start checkpoint")

    p = sub.add_parser("rl", help="policy optimization (stage 2)")
    _add_common(p)
    p.add_argument("--checkpoint", help="initialization checkpoint (required unless resuming)")
    p.add_argument("--resume", help="resume from an RL checkpoint")
    p.add_argument("--algo", choices=["grpo", "igpo"], default="igpo")
    p.add_argument("--steps", type=int, help="total RL steps")

    p = sub.add_parser("eval", help="pass@1 / pass@k / avg@k on an eval band")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--band", choices=["easy", "hard", "all"], default="all")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--temperature", type=float, default=0.1)

    p = sub.add_parser("compare", help="matched-seed variant comparison")
    _add_common(p)
    p.add_argument("--checkpoint", help="shared initialization checkpoint")
    p.add_argument("--steps", type=int, help="total RL steps")
    p.add_argument("--variants", help="comma list from {grpo, igpo, igpo-full}")

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError,) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError,) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except IgpoError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _dispatch(args: argparse.Namespace) -> int:
    cfg = _load_config_file(args.config)
    cfg = _apply_sets(cfg, args.set)
    cfg = _merge_common_flags(cfg, args)

    if args.command == "make-data":
        ds_cfg = _build(DatasetConfig, cfg.get("dataset"), "dataset")
        seed = cfg.get("seeds", [0])[0]
        bundle = make_dataset(ds_cfg, seed)
        out = cfg.get("out") or cfg.get("data") or "data"
        save_dataset(bundle, out)
        print(f"wrote {len(bundle.sft)}/{len(bundle.rl)}/{len(bundle.eval)} "
              f"(sft/rl/eval) problems to {out}")
        return 0

    if args.command == "sft":
        run_cfg = build_run_config(cfg, "sft")
        for seed in run_cfg.seeds:
            out = Path(run_cfg.out_dir) if len(run_cfg.seeds) == 1 else Path(run_cfg.out_dir) / f"seed{seed}"
            result = run_sft_mode(run_cfg, seed, out_dir=out)
            final = result["history"][-1]
            print(f"seed {seed}: final epoch loss {final['loss']:.4f} "
                  f"eval {final.get('eval')} -> {result['checkpoint']}")
        return 0

    if args.command == "rl":
        mode = "rl-grpo" if args.algo == "grpo" else "rl-igpo"
        run_cfg = build_run_config(cfg, mode)
        for seed in run_cfg.seeds:
            out = Path(run_cfg.out_dir) if len(run_cfg.seeds) == 1 else Path(run_cfg.out_dir) / f"seed{seed}"
            result = run_rl(run_cfg, seed, out_dir=out)
            print(f"seed {seed}: final hard-band pass@1 {result['final_hard_eval']} "
                  f"-> {result['metrics']}")
        return 0

    if args.command == "eval":
        run_cfg = build_run_config(cfg, "eval")
        ck = load_checkpoint(cfg["checkpoint"], expected_config=run_cfg.model)
        bundle = load_dataset(run_cfg.data_dir)
        problems = bundle.eval_band(args.band)
        result = evaluate(
            ck.params, ck.model_config, run_cfg.sampler, problems,
            prompt_len=bundle.config.prompt_len, k=args.k,
            temperature=args.temperature, seed=run_cfg.seeds[0],
        )
        print(json.dumps({"band": args.band, "n": len(problems), **result}, indent=2))
        return 0

    if args.command == "compare":
        if args.variants:
            cfg["variants"] = [v.strip() for v in args.variants.split(",") if v.strip()]
        run_cfg = build_run_config(cfg, "compare")
        summary = run_compare(run_cfg)
        for variant, data in summary["variants"].items():
            print(f"{variant}: mean all-wrong(post) {data['mean_all_wrong_post']:.3f}, "
                  f"final hard eval per seed {data['final_hard_eval']}")
        return 0

    raise ConfigError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
