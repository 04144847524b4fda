"""FastAPI service exposing the full experiment surface.

Each endpoint is a plain function taking a pydantic request and returning a
pydantic response, so the CLI can call handlers in-process without a server.
Every handler that produces artifacts writes them into the request's run
directory (``config.resolved``, CSV/markdown reports, checkpoints).
"""

from __future__ import annotations

import json
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from .. import harness as H
from .. import metrics as ME
from .. import model as M
from .. import training as T
from ..data import (SyntheticLanguageSpec, TemplateGrammar, Vocabulary,
                    build_vocab, default_transfer_spec, generate_synthetic_pair,
                    kshot_sample, load_conll, load_jsonl, write_jsonl)
from ..decoding import predict_slu, write_predictions_jsonl
from ..errors import ActionSLUError, InvalidInputError
from ..labels import LabelSchema
from . import schemas as S

app = FastAPI(title="actionslu", version=__version__)


@app.exception_handler(ActionSLUError)
async def _domain_error(request: Request, exc: ActionSLUError):
    return JSONResponse(status_code=400,
                        content={"error": type(exc).__name__,
                                 "detail": str(exc)})


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


# ---------------------------------------------------------------------------
# config assembly
# ---------------------------------------------------------------------------

def _grammar(data: S.DataConfigModel) -> TemplateGrammar:
    return TemplateGrammar(fillers_per_type=data.fillers_per_type,
                           lexicon_seed=data.lexicon_seed)


def _spec(model: S.TransferSpecModel,
          grammar: TemplateGrammar) -> SyntheticLanguageSpec:
    affix = model.affix_rules
    if affix is None:
        affix = dict(default_transfer_spec(grammar).affix_rules)
    return SyntheticLanguageSpec(word_order=model.word_order,
                                 affix_rules=affix,
                                 script_map=dict(model.script_map),
                                 lexicon_swap_ratio=model.lexicon_swap_ratio,
                                 seed=model.seed)


def _train_cfg(m: S.TrainConfigModel) -> T.TrainConfig:
    return T.TrainConfig(**m.model_dump())


def _model_cfg(m: S.ModelConfigModel, vocab_size: int) -> M.ModelConfig:
    ffn = m.ffn_hidden if m.ffn_hidden is not None else 4 * m.d_model
    return M.ModelConfig(vocab_size=vocab_size, d_model=m.d_model,
                         trunk_layers=m.trunk_layers,
                         attention_heads=m.attention_heads, max_len=m.max_len,
                         ffn_hidden=ffn, factored_action=m.factored_action)


def _load_corpus(path: str):
    p = Path(path)
    if not p.exists():
        raise InvalidInputError(f"corpus file not found: {path}")
    if p.suffix == ".conll":
        return load_conll(p)
    return load_jsonl(p)


def _schema_from_corpus(corpus) -> LabelSchema:
    intents = sorted({rec.intent for rec in corpus})
    types = sorted({tag[2:] for rec in corpus for tag in rec.slots
                    if tag != "O"})
    return LabelSchema.for_slot_types(tuple(intents), tuple(types))


def _vocab_sidecar(checkpoint_path: str) -> Path:
    return Path(checkpoint_path).with_suffix(".vocab.json")


def _load_vocab(checkpoint_path: str) -> Vocabulary:
    sidecar = _vocab_sidecar(checkpoint_path)
    if not sidecar.exists():
        raise InvalidInputError(
            f"missing vocabulary sidecar {sidecar}; it is written next to the "
            "checkpoint by the train endpoint")
    with open(sidecar, "r", encoding="utf-8") as f:
        return Vocabulary.from_json(json.load(f))


def _save_vocab(vocab: Vocabulary, checkpoint_path: str) -> None:
    with open(_vocab_sidecar(checkpoint_path), "w", encoding="utf-8") as f:
        json.dump(vocab.to_json(), f)
        f.write("\n")


def _metrics_model(report: ME.MetricsReport) -> S.MetricsModel:
    return S.MetricsModel(intent_accuracy=report.intent_accuracy,
                          token_precision=report.token_precision,
                          token_recall=report.token_recall,
                          token_f1=report.token_f1, span_f1=report.span_f1,
                          mode=report.mode,
                          zero_denominator=report.zero_denominator)


def _write_metrics_reports(run_dir: Path, report: ME.MetricsReport,
                           stem: str = "report"):
    fields = ["intent_accuracy", "token_precision", "token_recall",
              "token_f1", "span_f1", "mode"]
    row = {k: getattr(report, k) for k in fields}
    csv_path = run_dir / f"{stem}.csv"
    md_path = run_dir / f"{stem}.md"
    H.write_csv(csv_path, fields, [row])
    with open(md_path, "w", encoding="utf-8") as f:
        f.write(H.markdown_table(fields, [row]))
    return csv_path, md_path


# ---------------------------------------------------------------------------
# endpoints
# ---------------------------------------------------------------------------

@app.post("/gen-data", response_model=S.GenDataResponse)
def gen_data(req: S.GenDataRequest) -> S.GenDataResponse:
    grammar = _grammar(req.data)
    spec = _spec(req.data.transfer, grammar)
    run_dir = H.prepare_run_dir(req.run_dir, req.model_dump())
    source, target = generate_synthetic_pair(grammar, req.data.size, spec,
                                             seed=req.data.seed)
    source_path = run_dir / "source.jsonl"
    target_path = run_dir / "target.jsonl"
    write_jsonl(source, source_path)
    write_jsonl(target, target_path)
    schema = grammar.schema()
    return S.GenDataResponse(run_dir=str(run_dir),
                             source_path=str(source_path),
                             target_path=str(target_path),
                             n_records=len(source),
                             n_intents=schema.num_intents,
                             n_slot_labels=schema.num_slots)


@app.post("/train", response_model=S.TrainResponse)
def train(req: S.TrainRequest) -> S.TrainResponse:
    run_dir = H.prepare_run_dir(req.run_dir, req.model_dump())
    if req.corpus_path is not None:
        corpus = _load_corpus(req.corpus_path)
        schema = _schema_from_corpus(corpus)
        vocab = build_vocab(corpus, min_count=req.data.min_count)
    else:
        bench = H.build_benchmark(size=req.data.size, seed=req.data.seed,
                                  grammar=_grammar(req.data),
                                  spec=_spec(req.data.transfer,
                                             _grammar(req.data)),
                                  min_count=req.data.min_count)
        corpus, schema, vocab = bench.train, bench.schema, bench.vocab
    cfg = _train_cfg(req.train)
    params, history = T.train(corpus, schema, vocab,
                              _model_cfg(req.model, len(vocab)), cfg)
    ckpt_path = run_dir / "checkpoints" / "model.ckpt"
    M.save_checkpoint(params, ckpt_path)
    _save_vocab(vocab, ckpt_path)
    history_path = run_dir / "history.csv"
    H.write_history_csv(history_path, history)
    last = history[-1]
    return S.TrainResponse(run_dir=str(run_dir),
                           checkpoint_path=str(ckpt_path),
                           history_path=str(history_path),
                           epochs=len(history),
                           final_slu_loss=last.slu_loss,
                           final_action_loss=last.action_loss,
                           final_total_loss=last.total_loss)


@app.post("/eval", response_model=S.EvalResponse)
def eval_corpus(req: S.EvalRequest) -> S.EvalResponse:
    run_dir = H.prepare_run_dir(req.run_dir, req.model_dump())
    params = M.load_checkpoint(req.checkpoint_path)
    vocab = _load_vocab(req.checkpoint_path)
    corpus = _load_corpus(req.corpus_path)
    report = ME.evaluate(params, vocab, corpus, alpha=req.alpha,
                         mode=req.metrics_mode)
    csv_path, md_path = _write_metrics_reports(run_dir, report)
    return S.EvalResponse(run_dir=str(run_dir), report_csv=str(csv_path),
                          report_md=str(md_path),
                          metrics=_metrics_model(report))


@app.post("/decode", response_model=S.DecodeResponse)
def decode_corpus(req: S.DecodeRequest) -> S.DecodeResponse:
    run_dir = H.prepare_run_dir(req.run_dir, req.model_dump())
    params = M.load_checkpoint(req.checkpoint_path)
    vocab = _load_vocab(req.checkpoint_path)
    corpus = _load_corpus(req.corpus_path)
    predictions = [predict_slu(params, vocab, rec.tokens, alpha=req.alpha,
                               bio_repair=req.bio_repair) for rec in corpus]
    out_path = run_dir / "predictions.jsonl"
    write_predictions_jsonl(predictions, out_path)
    return S.DecodeResponse(run_dir=str(run_dir),
                            predictions_path=str(out_path),
                            n_utterances=len(predictions))


@app.post("/adapt", response_model=S.AdaptResponse)
def adapt_task(req: S.AdaptRequest) -> S.AdaptResponse:
    run_dir = H.prepare_run_dir(req.run_dir, req.model_dump())
    params = M.load_checkpoint(req.checkpoint_path)
    vocab = _load_vocab(req.checkpoint_path)
    corpus = _load_corpus(req.corpus_path)
    task = kshot_sample(corpus, req.k_shots, req.n_classes, seed=req.seed)
    cfg = _train_cfg(req.train)
    adapted, _ = T.adapt(params, task, vocab, cfg, alpha=req.alpha)
    report = ME.evaluate(adapted, vocab, list(task.query), alpha=req.alpha)
    csv_path, _ = _write_metrics_reports(run_dir, report, stem="adapt_report")
    return S.AdaptResponse(run_dir=str(run_dir), k_shots=task.k_shots,
                           n_classes=task.n_classes,
                           query_size=len(task.query),
                           metrics=_metrics_model(report),
                           report_csv=str(csv_path))


@app.post("/ablate", response_model=S.AblateResponse)
def ablate(req: S.AblateRequest) -> S.AblateResponse:
    run_dir = H.prepare_run_dir(req.run_dir, req.model_dump())
    if len(req.alphas) != 2:
        raise InvalidInputError("expected two alphas: [full, ablated]")
    suite = (H.Variant("full", req.alphas[0], req.alphas[0],
                       req.train.action_loss_mode),
             H.Variant("wo_action", req.alphas[1], req.alphas[1],
                       req.train.action_loss_mode))
    grammar = _grammar(req.data)
    spec = _spec(req.data.transfer, grammar)
    # Resolve the vocabulary once so the requested model config can be honored;
    # run_ablation rebuilds the identical benchmark from the same seed.
    probe = H.build_benchmark(size=req.data.size, seed=req.data.seed,
                              grammar=grammar, spec=spec)
    result = H.run_ablation(req.seeds, bench_size=req.data.size, suite=suite,
                            model_cfg=_model_cfg(req.model, len(probe.vocab)),
                            train_cfg=_train_cfg(req.train),
                            bench_seed=req.data.seed, grammar=grammar,
                            spec=spec)
    csv_path = run_dir / "ablation.csv"
    fields = ["variant", "seed", "split", "intent_acc", "token_f1", "span_f1"]
    H.write_csv(csv_path, fields, result.rows)
    md_path = run_dir / "ablation.md"
    with open(md_path, "w", encoding="utf-8") as f:
        f.write(result.to_markdown())
    summary = [S.AblationCellModel(**cell) for cell in result.summary]
    return S.AblateResponse(run_dir=str(run_dir), report_csv=str(csv_path),
                            report_md=str(md_path), summary=summary,
                            failures=result.failures)


@app.post("/bench", response_model=S.BenchResponse)
def bench(req: S.BenchRequest) -> S.BenchResponse:
    run_dir = H.prepare_run_dir(req.run_dir, req.model_dump())
    if req.checkpoint_path is not None:
        params = M.load_checkpoint(req.checkpoint_path)
        vocab = _load_vocab(req.checkpoint_path)
    else:
        bench_data = H.build_benchmark(size=200, seed=0)
        cfg = M.ModelConfig(vocab_size=len(bench_data.vocab),
                            factored_action=req.include_factored)
        params = M.init_params(cfg, bench_data.schema, seed=0)
        vocab = bench_data.vocab
    # A handful of short prompts drawn from the vocabulary itself.
    import numpy as np
    rng = np.random.default_rng(0)
    prompts = [rng.integers(3, len(vocab), size=3).tolist() for _ in range(8)]
    settings = [H.BenchSetting(alpha=a) for a in req.alphas]
    if req.include_factored:
        settings.append(H.BenchSetting(alpha=req.alphas[-1], mode=M.FACTORED,
                                       label="factored"))
    rows = H.bench_inference(params, prompts, settings,
                             steps_per_decode=req.steps_per_decode,
                             candidate_k=req.candidate_k,
                             min_seconds=req.min_seconds, repeats=req.repeats)
    csv_path = run_dir / "bench.csv"
    H.write_csv(csv_path, ["setting", "alpha", "mode", "utterances_per_sec",
                           "tokens_per_sec"], rows)
    return S.BenchResponse(run_dir=str(run_dir), report_csv=str(csv_path),
                           rows=[S.BenchRowModel(**row) for row in rows])


@app.post("/gradcheck", response_model=S.GradCheckResponse)
def gradcheck(req: S.GradCheckRequest) -> S.GradCheckResponse:
    err = H.gradcheck_full_loss(d_model=req.d_model, seed=req.seed,
                                vocab_size=req.vocab_size, length=req.length,
                                layers=req.trunk_layers, eps=req.eps,
                                coords_per_tensor=req.coords_per_tensor)
    return S.GradCheckResponse(max_relative_error=err,
                               tolerance=req.tolerance,
                               passed=bool(err < req.tolerance))
