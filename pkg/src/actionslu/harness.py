"""Experiment orchestration: benchmark builds, ablations, throughput, reports.

Every run writes into a run directory containing the resolved config, CSV
reports (machine) and a markdown table (human).  All report content except
wall-clock measurements is byte-identical across reruns with the same config
and seed.
"""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import model as M
from . import training as T
from .autodiff import grad_check
from .data import (SyntheticLanguageSpec, TemplateGrammar, Vocabulary,
                   build_vocab, default_transfer_spec, generate_synthetic_pair)
from .decoding import DecodeConfig, greedy_decode
from .errors import InvalidInputError
from .labels import LabelSchema
from .metrics import evaluate
from .training import TrainConfig


# ---------------------------------------------------------------------------
# benchmark data
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkData:
    """Source train/dev/test splits plus the aligned target test split."""

    schema: LabelSchema
    vocab: Vocabulary
    train: list
    dev: list
    test_source: list
    test_target: list
    grammar: TemplateGrammar
    spec: SyntheticLanguageSpec


def build_benchmark(size: int = 2000, seed: int = 0,
                    grammar: TemplateGrammar | None = None,
                    spec: SyntheticLanguageSpec | None = None,
                    min_count: int = 1) -> BenchmarkData:
    grammar = grammar or TemplateGrammar()
    spec = spec or default_transfer_spec(grammar)
    source, target = generate_synthetic_pair(grammar, size, spec, seed=seed)
    order = np.random.default_rng(seed + 100).permutation(size)
    n_dev = max(1, size // 10)
    n_test = max(1, size // 10)
    test_idx = order[:n_test]
    dev_idx = order[n_test:n_test + n_dev]
    train_idx = order[n_test + n_dev:]
    train = [source[i] for i in train_idx]
    vocab = build_vocab(train, min_count=min_count)
    return BenchmarkData(schema=grammar.schema(), vocab=vocab, train=train,
                         dev=[source[i] for i in dev_idx],
                         test_source=[source[i] for i in test_idx],
                         test_target=[target[i] for i in test_idx],
                         grammar=grammar, spec=spec)


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def write_csv(path, fieldnames, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_history_csv(path, history) -> None:
    rows = [{"epoch": h.epoch, "slu_loss": h.slu_loss,
             "action_loss": h.action_loss, "total_loss": h.total_loss,
             "wall_seconds": h.wall_seconds} for h in history]
    write_csv(path, ["epoch", "slu_loss", "action_loss", "total_loss",
                     "wall_seconds"], rows)


def markdown_table(fieldnames, rows, bold_best: tuple = (),
                   higher_is_better: bool = True) -> str:
    """Rows -> GitHub table; the best value per bolded column is starred."""
    best = {}
    for col in bold_best:
        values = [row[col] for row in rows if isinstance(row[col], (int, float))]
        if values:
            best[col] = max(values) if higher_is_better else min(values)
    lines = ["| " + " | ".join(fieldnames) + " |",
             "| " + " | ".join("---" for _ in fieldnames) + " |"]
    for row in rows:
        cells = []
        for col in fieldnames:
            val = row[col]
            text = f"{val:.4f}" if isinstance(val, float) else str(val)
            if col in best and val == best[col]:
                text = f"**{text}**"
            cells.append(text)
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def prepare_run_dir(path, config: dict) -> Path:
    run_dir = Path(path)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    with open(run_dir / "config.resolved", "w", encoding="utf-8") as f:
        json.dump(config, f, indent=2, sort_keys=True)
        f.write("\n")
    return run_dir


# ---------------------------------------------------------------------------
# ablation suite
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    name: str
    train_alpha: float
    decode_alpha: float
    action_loss_mode: str = T.ACTION_BCE


DEFAULT_SUITE = (Variant("full", 0.125, 0.125),
                 Variant("wo_action", 0.0, 0.0))


@dataclass
class AblationResult:
    rows: list          # per (variant, seed, split) metric rows
    summary: list       # mean +/- sd per (variant, split)
    failures: list

    def to_markdown(self) -> str:
        fields = ["variant", "split", "intent_acc", "token_f1", "span_f1"]
        display = []
        for s in self.summary:
            display.append({
                "variant": s["variant"], "split": s["split"],
                "intent_acc": f'{s["intent_acc_mean"]:.4f} ± {s["intent_acc_sd"]:.4f}',
                "token_f1": f'{s["token_f1_mean"]:.4f} ± {s["token_f1_sd"]:.4f}',
                "span_f1": f'{s["span_f1_mean"]:.4f} ± {s["span_f1_sd"]:.4f}',
                "_span": s["span_f1_mean"],
            })
        # Bold the best span F1 per split by hand (values are formatted text).
        for split in {d["split"] for d in display}:
            group = [d for d in display if d["split"] == split]
            best = max(group, key=lambda d: d["_span"])
            best["span_f1"] = f'**{best["span_f1"]}**'
        for d in display:
            d.pop("_span")
        return markdown_table(fields, display)


def train_on_benchmark(bench: BenchmarkData, model_cfg: M.ModelConfig | None,
                       train_cfg: TrainConfig):
    if model_cfg is None:
        model_cfg = M.ModelConfig(vocab_size=len(bench.vocab))
    params, history = T.train(bench.train, bench.schema, bench.vocab,
                              model_cfg, train_cfg)
    return params, history


def run_ablation(seeds, bench_size: int = 2000,
                 suite=DEFAULT_SUITE,
                 model_cfg: M.ModelConfig | None = None,
                 train_cfg: TrainConfig | None = None,
                 bench_seed: int = 0,
                 grammar: TemplateGrammar | None = None,
                 spec: SyntheticLanguageSpec | None = None) -> AblationResult:
    """Train each variant on the same seeds; evaluate source and target splits."""
    if len(suite) < 1:
        raise InvalidInputError("ablation suite must name at least one variant")
    base_cfg = train_cfg or TrainConfig()
    bench = build_benchmark(size=bench_size, seed=bench_seed, grammar=grammar,
                            spec=spec)
    rows, failures = [], []
    for variant in suite:
        for seed in seeds:
            cfg = _replace_cfg(base_cfg, alpha=variant.train_alpha, seed=seed,
                               action_loss_mode=variant.action_loss_mode)
            try:
                params, _ = train_on_benchmark(bench, model_cfg, cfg)
                for split, corpus in (("source", bench.test_source),
                                      ("target", bench.test_target)):
                    report = evaluate(params, bench.vocab, corpus,
                                      alpha=variant.decode_alpha)
                    rows.append({"variant": variant.name, "seed": seed,
                                 "split": split, **report.row()})
            except Exception as exc:  # record, keep the table going
                failures.append({"variant": variant.name, "seed": seed,
                                 "error": repr(exc)})
    summary = summarize_ablation(rows)
    return AblationResult(rows=rows, summary=summary, failures=failures)


def _replace_cfg(cfg: TrainConfig, **kw) -> TrainConfig:
    data = asdict(cfg)
    data.update(kw)
    return TrainConfig(**data)


def summarize_ablation(rows) -> list:
    keys = sorted({(r["variant"], r["split"]) for r in rows})
    summary = []
    for variant, split in keys:
        group = [r for r in rows if r["variant"] == variant
                 and r["split"] == split]
        entry = {"variant": variant, "split": split, "n_seeds": len(group)}
        for metric in ("intent_acc", "token_f1", "span_f1"):
            values = [r[metric] for r in group]
            entry[f"{metric}_mean"] = statistics.fmean(values)
            entry[f"{metric}_sd"] = (statistics.stdev(values)
                                     if len(values) > 1 else 0.0)
        summary.append(entry)
    return summary


# ---------------------------------------------------------------------------
# throughput benchmark
# ---------------------------------------------------------------------------

def _decode_rates(params: M.ModelParams, prompts, cfg: DecodeConfig,
                  min_seconds: float) -> tuple:
    """(utterances/sec, tokens/sec) of greedy decoding for one setting."""
    n_utt = 0
    n_tok = 0
    start = time.perf_counter()
    while True:
        prompt = prompts[n_utt % len(prompts)]
        hyp = greedy_decode(params, prompt, cfg)
        n_utt += 1
        n_tok += len(hyp.tokens)
        elapsed = time.perf_counter() - start
        if elapsed >= min_seconds:
            return n_utt / elapsed, n_tok / elapsed


def throughput_ratios(params: M.ModelParams, prompts, settings,
                      steps_per_decode: int = 16, candidate_k: int = 8,
                      target_class: int = 0, min_seconds: float = 1.0,
                      repeats: int = 5, warmup: int = 2) -> list:
    """Median of per-repeat throughput ratios against the first setting.

    Each repeat times every setting back to back and forms the ratio within
    that repeat, so slow drift in background load cancels out of the ratio
    instead of biasing it.  Returns one ratio per non-baseline setting.
    """
    cfgs = [DecodeConfig(alpha=s.alpha, mode=s.mode,
                         max_length=steps_per_decode,
                         candidate_k=candidate_k, beam_width=1,
                         target_class=target_class, end_token=None)
            for s in settings]
    if len(cfgs) < 2:
        raise InvalidInputError("need a baseline plus at least one setting")
    for cfg in cfgs:
        for prompt in prompts[:warmup]:
            greedy_decode(params, prompt, cfg)
    ratios = [[] for _ in cfgs[1:]]
    for _ in range(repeats):
        base = _decode_rates(params, prompts, cfgs[0], min_seconds)[1]
        for idx, cfg in enumerate(cfgs[1:]):
            rate = _decode_rates(params, prompts, cfg, min_seconds)[1]
            ratios[idx].append(rate / base)
    return [statistics.median(r) for r in ratios]


@dataclass(frozen=True)
class BenchSetting:
    alpha: float
    mode: str = M.RESCORING
    label: str | None = None

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        return f"alpha={self.alpha:g}:{self.mode}"


def bench_inference(params: M.ModelParams, prompts, settings,
                    steps_per_decode: int = 16, candidate_k: int = 8,
                    target_class: int = 0, min_seconds: float = 10.0,
                    repeats: int = 5, warmup: int = 3) -> list:
    """Median-of-``repeats`` greedy-decoding throughput per setting.

    Decodes run for a fixed number of steps (no end token) so every setting
    does identical amounts of generation work per utterance.  Repeats are
    interleaved across settings so slow drift in machine load hits every
    setting evenly instead of biasing whichever ran last.
    """
    settings = list(settings)
    cfgs = [DecodeConfig(alpha=s.alpha, mode=s.mode,
                         max_length=steps_per_decode,
                         candidate_k=candidate_k, beam_width=1,
                         target_class=target_class, end_token=None)
            for s in settings]
    for cfg in cfgs:
        for prompt in prompts[:warmup]:
            greedy_decode(params, prompt, cfg)
    measures = [[] for _ in settings]
    for _ in range(repeats):
        for idx, cfg in enumerate(cfgs):
            measures[idx].append(_decode_rates(params, prompts, cfg,
                                               min_seconds))
    rows = []
    for setting, runs in zip(settings, measures):
        utt_rates = sorted(m[0] for m in runs)
        tok_rates = sorted(m[1] for m in runs)
        rows.append({"setting": setting.name, "alpha": setting.alpha,
                     "mode": setting.mode,
                     "utterances_per_sec": utt_rates[len(utt_rates) // 2],
                     "tokens_per_sec": tok_rates[len(tok_rates) // 2]})
    return rows


# ---------------------------------------------------------------------------
# full-loss gradient check
# ---------------------------------------------------------------------------

def gradcheck_full_loss(d_model: int = 16, seed: int = 0, vocab_size: int = 50,
                        length: int = 8, layers: int = 2, batch: int = 2,
                        eps: float = 1e-5, coords_per_tensor: int = 4,
                        alpha: float = 0.125) -> float:
    """Finite-difference check of the composite loss on a tiny random model."""
    grammar = TemplateGrammar()
    schema = grammar.schema()
    cfg = M.ModelConfig(vocab_size=vocab_size, d_model=d_model,
                        trunk_layers=layers, attention_heads=max(1, d_model // 8),
                        max_len=length)
    params = M.init_params(cfg, schema, seed=seed)
    rng = np.random.default_rng(seed + 1)
    ids = rng.integers(3, vocab_size, size=(batch, length))
    pool = np.broadcast_to(np.eye(length), (batch, length, length)).copy()
    batch_data = T.Batch(
        ids=ids,
        pad_mask=np.ones((batch, length)),
        word_pool=pool,
        word_mask=np.ones((batch, length)),
        slot_ids=rng.integers(0, schema.num_slots, size=(batch, length)),
        intent_ids=rng.integers(0, schema.num_intents, size=batch),
        lm_mask=np.zeros((batch, length)),
        lm_targets=np.zeros((batch, length), dtype=np.int64))
    tcfg = TrainConfig(alpha=alpha, seed=seed)

    def fn():
        return T.forward_losses(params, batch_data, tcfg,
                                use_gold_intent=True).total

    return grad_check(fn, params.all_tensors(), eps=eps,
                      max_coords_per_tensor=coords_per_tensor, seed=seed)
