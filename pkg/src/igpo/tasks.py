"""Synthetic verifiable-reasoning tasks: chained modular arithmetic.

A problem is an expression like "47+8-9+3" evaluated left to right mod 100.
The ground-truth trace spells out one running-value update per step and
ends with the final value inside answer markers:

    <reasoning>47+8=55 -9=46 +3=49</reasoning><answer>49</answer>

Each step shows only the applied operation and the new value; the previous
value is never restated, so predicting a masked result requires actually
doing the arithmetic rather than copying a nearby echo of the same number.
Difficulty is the number of chained operations. Tokenization is symbol
level (digits, operators, '=', space, and the four structural markers each
map to a single id), which keeps the vocabulary tiny and removes tokenizer
confounds. Traces are concise by construction so every split fits the
generation budget used at RL and evaluation time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Array
from .errors import GenerationError, InputError, LengthError
from .inpaint import GroundTruthTrace
from .rngs import derive_rng

MODULUS = 100

PAD, MASK, REASON_OPEN, REASON_CLOSE, ANSWER_OPEN, ANSWER_CLOSE = range(6)

_SPECIAL_TEXT = {
    PAD: "<pad>",
    MASK: "<mask>",
    REASON_OPEN: "<reasoning>",
    REASON_CLOSE: "</reasoning>",
    ANSWER_OPEN: "<answer>",
    ANSWER_CLOSE: "</answer>",
}
_CHARS = "0123456789+-*= "


class Tokenizer:
    """Symbol-level tokenizer over the task alphabet; round-trip exact."""

    def __init__(self):
        self.id_to_text = dict(_SPECIAL_TEXT)
        for i, ch in enumerate(_CHARS):
            self.id_to_text[len(_SPECIAL_TEXT) + i] = ch
        self.text_to_id = {t: i for i, t in self.id_to_text.items()}
        # longest-first so marker strings win over single characters
        self._markers = sorted(
            (t for t in self.text_to_id if len(t) > 1), key=len, reverse=True
        )

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_text)

    def tokenize(self, text: str) -> Array:
        ids: list[int] = []
        pos = 0
        while pos < len(text):
            for marker in self._markers:
                if text.startswith(marker, pos):
                    ids.append(self.text_to_id[marker])
                    pos += len(marker)
                    break
            else:
                ch = text[pos]
                if ch not in self.text_to_id:
                    raise InputError(f"unknown symbol {ch!r} at position {pos}")
                ids.append(self.text_to_id[ch])
                pos += 1
        return np.asarray(ids, dtype=np.int64)

    def detokenize(self, ids) -> str:
        out = []
        for i in np.asarray(ids, dtype=np.int64).tolist():
            if i not in self.id_to_text:
                raise InputError(f"unknown token id {i}")
            out.append(self.id_to_text[i])
        return "".join(out)


TOKENIZER = Tokenizer()


@dataclass(frozen=True)
class Problem:
    prompt_text: str
    trace_text: str
    answer: int
    difficulty: int
    prompt_tokens: Array = field(repr=False)
    trace_tokens: Array = field(repr=False)
    answer_start: int  # index of ANSWER_OPEN inside trace_tokens

    @property
    def trace(self) -> GroundTruthTrace:
        return GroundTruthTrace(tokens=self.trace_tokens, answer_start=self.answer_start)


def generate_problem(difficulty: int, rng: np.random.Generator) -> Problem:
    """One chained-arithmetic problem with `difficulty` operations."""
    if difficulty < 1:
        raise InputError("difficulty must be >= 1")
    value = int(rng.integers(0, MODULUS))
    start = value
    prompt_parts = [str(value)]
    steps = []
    for j in range(difficulty):
        op = "+" if rng.integers(0, 2) == 0 else "-"
        operand = int(rng.integers(1, 10))
        nxt = (value + operand) % MODULUS if op == "+" else (value - operand) % MODULUS
        prefix = f"{start}" if j == 0 else ""
        steps.append(f"{prefix}{op}{operand}={nxt}")
        prompt_parts.append(f"{op}{operand}")
        value = nxt
    prompt_text = "".join(prompt_parts)
    trace_text = f"<reasoning>{' '.join(steps)}</reasoning><answer>{value}</answer>"
    trace_tokens = TOKENIZER.tokenize(trace_text)
    answer_start = int(np.flatnonzero(trace_tokens == ANSWER_OPEN)[0])
    return Problem(
        prompt_text=prompt_text,
        trace_text=trace_text,
        answer=value,
        difficulty=difficulty,
        prompt_tokens=TOKENIZER.tokenize(prompt_text),
        trace_tokens=trace_tokens,
        answer_start=answer_start,
    )


def extract_answer(tokens) -> int | None:
    """Parse the first <answer>...</answer> span as an integer, else None."""
    tokens = np.asarray(tokens, dtype=np.int64)
    opens = np.flatnonzero(tokens == ANSWER_OPEN)
    if opens.size == 0:
        return None
    start = opens[0] + 1
    closes = np.flatnonzero(tokens[start:] == ANSWER_CLOSE)
    if closes.size == 0:
        return None
    inner = tokens[start : start + closes[0]]
    try:
        text = TOKENIZER.detokenize(inner).strip()
    except InputError:
        return None
    if not text or not text.isdigit():
        return None
    return int(text)


def verify(completion_tokens, answer: int) -> int:
    """Binary exact-match reward; every malformed completion scores 0."""
    parsed = extract_answer(completion_tokens)
    return int(parsed is not None and parsed == answer)


def pad_prompt(prompt_tokens: Array, prompt_len: int) -> Array:
    """Left-pad with PAD so the completion region always starts at prompt_len."""
    n = prompt_tokens.size
    if n > prompt_len:
        raise LengthError(f"prompt of {n} tokens exceeds the {prompt_len}-token budget")
    out = np.full(prompt_len, PAD, dtype=np.int64)
    if n:
        out[prompt_len - n :] = prompt_tokens
    return out


def pad_trace(trace_tokens: Array, completion_len: int) -> Array:
    """Right-pad with PAD up to the generation budget."""
    n = trace_tokens.size
    if n > completion_len:
        raise LengthError(f"trace of {n} tokens exceeds the {completion_len}-token budget")
    out = np.full(completion_len, PAD, dtype=np.int64)
    out[:n] = trace_tokens
    return out


@dataclass(frozen=True)
class DatasetConfig:
    sft_count: int = 2048
    rl_count: int = 64
    eval_easy_count: int = 64
    eval_hard_count: int = 64
    sft_mix: tuple[tuple[int, float], ...] = ((1, 0.25), (2, 0.25), (3, 0.2), (4, 0.15), (6, 0.075), (7, 0.075))
    rl_mix: tuple[tuple[int, float], ...] = ((6, 0.5), (7, 0.5))
    easy_mix: tuple[tuple[int, float], ...] = ((1, 0.4), (2, 0.4), (3, 0.2))
    hard_mix: tuple[tuple[int, float], ...] = ((6, 0.5), (7, 0.5))
    prompt_len: int = 18
    completion_len: int = 64
    easy_max_difficulty: int = 3
    hard_min_difficulty: int = 6


@dataclass
class DatasetBundle:
    sft: list[Problem]
    rl: list[Problem]
    eval: list[Problem]
    config: DatasetConfig

    def eval_band(self, band: str) -> list[Problem]:
        if band == "easy":
            return [p for p in self.eval if p.difficulty <= self.config.easy_max_difficulty]
        if band == "hard":
            return [p for p in self.eval if p.difficulty >= self.config.hard_min_difficulty]
        if band == "all":
            return list(self.eval)
        raise InputError(f"unknown eval band '{band}'")


def _draw_split(
    count: int,
    mix: tuple[tuple[int, float], ...],
    cfg: DatasetConfig,
    rng: np.random.Generator,
    taken: set[str],
) -> list[Problem]:
    difficulties = [d for d, _ in mix]
    weights = np.asarray([w for _, w in mix], dtype=np.float64)
    weights /= weights.sum()
    problems = []
    for _ in range(count):
        d = int(rng.choice(difficulties, p=weights))
        for _attempt in range(1000):
            p = generate_problem(d, rng)
            if p.prompt_text in taken:
                continue
            if p.prompt_tokens.size > cfg.prompt_len or p.trace_tokens.size > cfg.completion_len:
                raise GenerationError(
                    f"difficulty {d} produced an over-budget problem; raise the budgets"
                )
            taken.add(p.prompt_text)
            problems.append(p)
            break
        else:
            raise GenerationError(
                f"could not draw a fresh difficulty-{d} problem after 1000 tries"
            )
    return problems


def make_dataset(config: DatasetConfig, seed: int) -> DatasetBundle:
    """Disjoint SFT / RL-prompt / eval splits, a pure function of (config, seed)."""
    rng = derive_rng("dataset", seed)
    taken: set[str] = set()
    sft = _draw_split(config.sft_count, config.sft_mix, config, rng, taken)
    rl = _draw_split(config.rl_count, config.rl_mix, config, rng, taken)
    eval_easy = _draw_split(config.eval_easy_count, config.easy_mix, config, rng, taken)
    eval_hard = _draw_split(config.eval_hard_count, config.hard_mix, config, rng, taken)
    for p in sft + rl + eval_easy + eval_hard:
        if verify(p.trace_tokens, p.answer) != 1:
            raise GenerationError("generated trace failed self-verification")
    return DatasetBundle(sft=sft, rl=rl, eval=eval_easy + eval_hard, config=config)


# -- serialization ---------------------------------------------------------

DATASET_FORMAT_VERSION = 1


def _problem_to_record(p: Problem) -> dict:
    return {
        "prompt": p.prompt_text,
        "trace": p.trace_text,
        "answer": p.answer,
        "difficulty": p.difficulty,
    }


def _problem_from_record(rec: dict) -> Problem:
    trace_tokens = TOKENIZER.tokenize(rec["trace"])
    opens = np.flatnonzero(trace_tokens == ANSWER_OPEN)
    if opens.size == 0:
        raise InputError("stored trace lacks an answer span")
    return Problem(
        prompt_text=rec["prompt"],
        trace_text=rec["trace"],
        answer=int(rec["answer"]),
        difficulty=int(rec["difficulty"]),
        prompt_tokens=TOKENIZER.tokenize(rec["prompt"]),
        trace_tokens=trace_tokens,
        answer_start=int(opens[0]),
    )


def save_dataset(bundle: DatasetBundle, out_dir: str | Path) -> None:
    """Write sft/rl/eval as line-delimited JSON plus a meta.json sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split in ("sft", "rl", "eval"):
        with open(out / f"{split}.jsonl", "w") as f:
            for p in getattr(bundle, split):
                f.write(json.dumps(_problem_to_record(p)) + "\n")
    meta = {"format_version": DATASET_FORMAT_VERSION, "config": _config_to_dict(bundle.config)}
    with open(out / "meta.json", "w") as f:
        json.dump(meta, f, indent=2)


def load_dataset(in_dir: str | Path) -> DatasetBundle:
    src = Path(in_dir)
    try:
        with open(src / "meta.json") as f:
            meta = json.load(f)
    except FileNotFoundError as e:
        raise InputError(f"no dataset at {src}") from e
    if meta.get("format_version") != DATASET_FORMAT_VERSION:
        raise InputError(f"unsupported dataset format: {meta.get('format_version')}")
    config = _config_from_dict(meta["config"])
    splits = {}
    for split in ("sft", "rl", "eval"):
        with open(src / f"{split}.jsonl") as f:
            splits[split] = [_problem_from_record(json.loads(line)) for line in f if line.strip()]
    return DatasetBundle(sft=splits["sft"], rl=splits["rl"], eval=splits["eval"], config=config)


def _config_to_dict(cfg: DatasetConfig) -> dict:
    d = cfg.__dict__.copy()
    for key in ("sft_mix", "rl_mix", "easy_mix", "hard_mix"):
        d[key] = [list(pair) for pair in d[key]]
    return d


def _config_from_dict(d: dict) -> DatasetConfig:
    kwargs = dict(d)
    for key in ("sft_mix", "rl_mix", "easy_mix", "hard_mix"):
        kwargs[key] = tuple((int(a), float(b)) for a, b in kwargs[key])
    return DatasetConfig(**kwargs)
