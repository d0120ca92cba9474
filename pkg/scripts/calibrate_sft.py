"""SFT calibration probe: train the denoiser on the toy corpus and report
easy/hard-band greedy accuracy per eval checkpoint.

Usage: python scripts/calibrate_sft.py [--embed 48] [--epochs 40] ...
"""

from __future__ import annotations

import argparse
import json
import time

from igpo.diffusion import SamplerConfig
from igpo.harness import evaluate, save_checkpoint
from igpo.model import ModelConfig, init_params, param_count
from igpo.sft import SftConfig, run_sft
from igpo.tasks import TOKENIZER, DatasetConfig, make_dataset


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--embed", type=int, default=48)
    ap.add_argument("--layers", type=int, default=2)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--sft-count", type=int, default=2048)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eval-every", type=int, default=5)
    ap.add_argument("--save", help="optional checkpoint output path")
    args = ap.parse_args()

    ds_cfg = DatasetConfig(sft_count=args.sft_count)
    bundle = make_dataset(ds_cfg, seed=args.seed)
    model_cfg = ModelConfig(
        vocab_size=TOKENIZER.vocab_size,
        embed_dim=args.embed,
        num_layers=args.layers,
        num_heads=4,
        max_seq_len=ds_cfg.prompt_len + ds_cfg.completion_len + 8,
    )
    print(f"model: {param_count(model_cfg)} params; corpus {len(bundle.sft)}")
    params = init_params(model_cfg, args.seed)
    sampler = SamplerConfig(completion_len=64, num_steps=32, block_len=16)
    easy = bundle.eval_band("easy")
    hard = bundle.eval_band("hard")

    t_start = time.time()

    def eval_hook(p, epoch):
        if (epoch + 1) % args.eval_every and epoch != args.epochs - 1:
            return None
        r_easy = evaluate(p, model_cfg, sampler, easy, ds_cfg.prompt_len, k=1, temperature=0.0)
        r_hard = evaluate(p, model_cfg, sampler, hard, ds_cfg.prompt_len, k=1, temperature=0.0)
        out = {"easy": r_easy["pass_at_1"], "hard": r_hard["pass_at_1"],
               "min": round((time.time() - t_start) / 60, 1)}
        print(f"epoch {epoch}: {json.dumps(out)}", flush=True)
        return out

    sft_cfg = SftConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        peak_lr=args.lr,
        warmup_steps=100,
        min_lr=args.lr / 10,
        seed=args.seed,
        prompt_len=ds_cfg.prompt_len,
        completion_len=ds_cfg.completion_len,
    )
    params, history = run_sft(sft_cfg, bundle.sft, model_cfg, params, eval_hook=eval_hook)
    losses = [h["loss"] for h in history]
    print(f"loss first/last: {losses[0]:.2f} -> {losses[-1]:.2f}; total {(time.time()-t_start)/60:.1f} min")
    if args.save:
        save_checkpoint(args.save, params, model_cfg)
        print(f"saved {args.save}")


if __name__ == "__main__":
    main()
