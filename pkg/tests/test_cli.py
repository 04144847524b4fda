"""CLI behavior: request assembly, exit codes, and in-process dispatch."""

import json

import pytest

from actionslu import cli
from actionslu.service import schemas as S


class TestOverrideParsing:
    def test_key_value_json_types(self):
        key, value = cli._parse_override("train.alpha=0.25")
        assert (key, value) == ("train.alpha", 0.25)
        key, value = cli._parse_override("data.transfer.word_order=identity")
        assert value == "identity"  # bare string survives
        _, value = cli._parse_override("flag=true")
        assert value is True

    def test_missing_equals_rejected(self):
        with pytest.raises(ValueError):
            cli._parse_override("justakey")

    def test_set_path_nested(self):
        body = {}
        cli._set_path(body, "a.b.c", 1)
        assert body == {"a": {"b": {"c": 1}}}

    def test_set_path_refuses_scalar_descent(self):
        with pytest.raises(ValueError):
            cli._set_path({"a": 3}, "a.b", 1)


class TestBuildRequest:
    def _args(self, **kw):
        ns = type("NS", (), {})()
        ns.config = kw.get("config")
        ns.run_dir = kw.get("run_dir")
        ns.set = kw.get("set")
        return ns

    def test_config_file_plus_overrides(self, tmp_path):
        cfg = tmp_path / "req.json"
        cfg.write_text(json.dumps({"run_dir": "from_file",
                                   "data": {"size": 99}}))
        req = cli.build_request("gen-data", self._args(
            config=str(cfg), run_dir="flag_wins",
            set=["data.seed=7"]))
        assert isinstance(req, S.GenDataRequest)
        assert req.run_dir == "flag_wins"
        assert req.data.size == 99
        assert req.data.seed == 7

    def test_missing_config_raises_with_path(self, tmp_path):
        from actionslu.errors import ActionSLUError
        with pytest.raises(ActionSLUError) as exc:
            cli.build_request("train", self._args(config=str(tmp_path / "x")))
        assert str(tmp_path / "x") in str(exc.value)


class TestExitCodes:
    def test_usage_error_is_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["no-such-command"])
        assert exc.value.code == 2

    def test_gradcheck_success_is_0(self, capsys):
        rc = cli.main(["gradcheck", "--set", "coords_per_tensor=2"])
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert out["passed"] is True

    def test_invalid_field_is_1(self, capsys):
        rc = cli.main(["gradcheck", "--set", "d_model=\"wide\""])
        assert rc == 1
        assert "invalid request" in capsys.readouterr().err

    def test_missing_config_file_is_1(self, capsys):
        rc = cli.main(["gradcheck", "--config", "/no/such/file.json"])
        assert rc == 1
        assert "/no/such/file.json" in capsys.readouterr().err

    def test_domain_error_is_1(self, tmp_path, capsys):
        rc = cli.main(["eval", "--run-dir", str(tmp_path),
                       "--set", "checkpoint_path=/nope.ckpt",
                       "--set", "corpus_path=/nope.jsonl"])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestInProcessDispatch:
    def test_gen_data_end_to_end(self, tmp_path, capsys):
        rc = cli.main(["gen-data", "--run-dir", str(tmp_path),
                       "--set", "data.size=5"])
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert out["n_records"] == 5
        assert (tmp_path / "source.jsonl").is_file()
        assert (tmp_path / "config.resolved").is_file()

    def test_rerun_source_is_byte_identical(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        cli.main(["gen-data", "--run-dir", str(a), "--set", "data.size=5"])
        cli.main(["gen-data", "--run-dir", str(b), "--set", "data.size=5"])
        capsys.readouterr()
        assert (a / "source.jsonl").read_bytes() == \
            (b / "source.jsonl").read_bytes()
        assert (a / "target.jsonl").read_bytes() == \
            (b / "target.jsonl").read_bytes()
