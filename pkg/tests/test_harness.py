"""Benchmark builds, report emitters, ablations, and the throughput bench."""

import numpy as np
import pytest

import actionslu.harness as H
import actionslu.model as M
from actionslu.data import TemplateGrammar
from actionslu.errors import InvalidInputError
from actionslu.training import TrainConfig


class TestBuildBenchmark:
    def test_split_sizes_and_alignment(self):
        bench = H.build_benchmark(size=200, seed=0)
        assert len(bench.test_source) == 20
        assert len(bench.dev) == 20
        assert len(bench.train) == 160
        assert len(bench.test_target) == len(bench.test_source)
        # Target rows are transforms of the matching source rows.
        for src, tgt in zip(bench.test_source, bench.test_target):
            assert src.intent == tgt.intent
            assert len(src.tokens) == len(tgt.tokens)
            assert tgt.locale == "tgt"

    def test_deterministic(self):
        a = H.build_benchmark(size=100, seed=3)
        b = H.build_benchmark(size=100, seed=3)
        assert a.train == b.train
        assert a.test_target == b.test_target
        assert a.vocab.tokens == b.vocab.tokens

    def test_vocab_from_train_only(self):
        bench = H.build_benchmark(size=100, seed=1)
        train_words = {t for rec in bench.train for t in rec.tokens}
        for word in train_words:
            assert bench.vocab.id_of(word) is not None

    def test_splits_are_disjoint(self):
        bench = H.build_benchmark(size=100, seed=2)
        assert len(bench.train) + len(bench.dev) + len(bench.test_source) == 100


class TestReportEmitters:
    ROWS = [{"name": "a", "score": 0.25}, {"name": "b", "score": 0.5}]

    def test_write_csv_bytes_stable(self, tmp_path):
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        H.write_csv(p1, ["name", "score"], self.ROWS)
        H.write_csv(p2, ["name", "score"], self.ROWS)
        assert p1.read_bytes() == p2.read_bytes()
        lines = p1.read_text().splitlines()
        assert lines[0] == "name,score"
        assert lines[1] == "a,0.25"

    def test_markdown_bolds_best(self):
        table = H.markdown_table(["name", "score"], self.ROWS,
                                 bold_best=("score",))
        assert "**0.5000**" in table
        assert "**0.2500**" not in table

    def test_markdown_lower_is_better(self):
        table = H.markdown_table(["name", "score"], self.ROWS,
                                 bold_best=("score",), higher_is_better=False)
        assert "**0.2500**" in table

    def test_prepare_run_dir(self, tmp_path):
        run = H.prepare_run_dir(tmp_path / "run", {"b": 2, "a": 1})
        assert (run / "checkpoints").is_dir()
        text = (run / "config.resolved").read_text()
        assert text.index('"a"') < text.index('"b"')
        again = H.prepare_run_dir(tmp_path / "run2", {"b": 2, "a": 1})
        assert (run / "config.resolved").read_bytes() == \
            (again / "config.resolved").read_bytes()


class TestSummarize:
    def test_mean_and_sd(self):
        rows = [{"variant": "v", "split": "s", "seed": 0,
                 "intent_acc": 0.2, "token_f1": 0.4, "span_f1": 0.6},
                {"variant": "v", "split": "s", "seed": 1,
                 "intent_acc": 0.4, "token_f1": 0.4, "span_f1": 0.8}]
        (entry,) = H.summarize_ablation(rows)
        assert entry["n_seeds"] == 2
        np.testing.assert_allclose(entry["intent_acc_mean"], 0.3)
        np.testing.assert_allclose(entry["span_f1_mean"], 0.7)
        assert entry["token_f1_sd"] == 0.0

    def test_groups_by_variant_and_split(self):
        rows = [{"variant": v, "split": s, "seed": 0, "intent_acc": 0.1,
                 "token_f1": 0.1, "span_f1": 0.1}
                for v in ("a", "b") for s in ("source", "target")]
        assert len(H.summarize_ablation(rows)) == 4


class TestRunAblation:
    CFG = TrainConfig(epochs=1, batch_size=16, char_fallback_prob=0.0)
    MODEL = M.ModelConfig(vocab_size=1, d_model=16, trunk_layers=1,
                          attention_heads=2, max_len=64)

    def _model_cfg(self, bench):
        return M.ModelConfig(vocab_size=len(bench.vocab), d_model=16,
                             trunk_layers=1, attention_heads=2, max_len=64)

    def test_empty_suite_rejected(self):
        with pytest.raises(InvalidInputError):
            H.run_ablation([0], bench_size=10, suite=())

    def test_rows_cover_variants_seeds_splits(self):
        bench = H.build_benchmark(size=40, seed=0)
        result = H.run_ablation([0], bench_size=40,
                                model_cfg=self._model_cfg(bench),
                                train_cfg=self.CFG)
        assert not result.failures
        got = {(r["variant"], r["seed"], r["split"]) for r in result.rows}
        assert got == {(v, 0, s) for v in ("full", "wo_action")
                       for s in ("source", "target")}
        for row in result.rows:
            assert 0.0 <= row["span_f1"] <= 1.0

    def test_single_variant_degenerates_cleanly(self):
        bench = H.build_benchmark(size=40, seed=0)
        suite = (H.Variant("only", 0.0, 0.0),)
        result = H.run_ablation([0], bench_size=40, suite=suite,
                                model_cfg=self._model_cfg(bench),
                                train_cfg=self.CFG)
        assert {r["variant"] for r in result.rows} == {"only"}
        assert "| only |" in result.to_markdown()

    def test_failures_recorded_not_raised(self):
        tiny = M.ModelConfig(vocab_size=500, d_model=16, trunk_layers=1,
                             attention_heads=2, max_len=2)  # too short
        result = H.run_ablation([0], bench_size=40, model_cfg=tiny,
                                train_cfg=self.CFG)
        assert result.rows == []
        assert len(result.failures) == 2
        assert all("Error" in f["error"] for f in result.failures)

    def test_markdown_bolds_best_span_f1(self):
        rows = [{"variant": v, "split": "target", "seed": 0,
                 "intent_acc": 0.5, "token_f1": 0.5, "span_f1": f1}
                for v, f1 in (("full", 0.9), ("wo_action", 0.4))]
        result = H.AblationResult(rows=rows,
                                  summary=H.summarize_ablation(rows),
                                  failures=[])
        md = result.to_markdown()
        assert "**0.9000 ± 0.0000**" in md


class TestBenchInference:
    def test_rows_and_rates(self):
        schema = TemplateGrammar().schema()
        cfg = M.ModelConfig(vocab_size=30, d_model=16, trunk_layers=1,
                            attention_heads=2, max_len=32)
        params = M.init_params(cfg, schema, seed=0)
        prompts = [[3, 4, 5], [6, 7]]
        settings = (H.BenchSetting(alpha=0.0), H.BenchSetting(alpha=0.125))
        rows = H.bench_inference(params, prompts, settings,
                                 steps_per_decode=4, min_seconds=0.05,
                                 repeats=1, warmup=1)
        assert [r["setting"] for r in rows] == ["alpha=0:rescoring",
                                                "alpha=0.125:rescoring"]
        for row in rows:
            assert row["tokens_per_sec"] > 0
            assert row["utterances_per_sec"] > 0

    def test_label_override(self):
        s = H.BenchSetting(alpha=0.5, label="custom")
        assert s.name == "custom"


class TestGradcheckFullLoss:
    def test_small_model_passes(self):
        err = H.gradcheck_full_loss(d_model=8, vocab_size=20, length=4,
                                    layers=1, batch=1, coords_per_tensor=2)
        assert np.isfinite(err)
        assert err < 1e-3
