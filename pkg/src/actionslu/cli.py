"""Command-line client for the experiment service.

Each subcommand builds one service request (config file plus flag overrides)
and either calls the in-process handler directly — the default, no server
needed — or POSTs it to a running service when ``--server URL`` is given.

Exit codes: 0 success, 1 operational failure (bad input, missing file,
failed request), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys

from pydantic import ValidationError

from .errors import ActionSLUError
from .service import schemas as S

# subcommand -> (service path, request model, in-process handler name)
_COMMANDS = {
    "gen-data": ("/gen-data", S.GenDataRequest, "gen_data"),
    "train": ("/train", S.TrainRequest, "train"),
    "eval": ("/eval", S.EvalRequest, "eval_corpus"),
    "decode": ("/decode", S.DecodeRequest, "decode_corpus"),
    "adapt": ("/adapt", S.AdaptRequest, "adapt_task"),
    "ablate": ("/ablate", S.AblateRequest, "ablate"),
    "bench": ("/bench", S.BenchRequest, "bench"),
    "gradcheck": ("/gradcheck", S.GradCheckRequest, "gradcheck"),
}


def _set_path(obj: dict, dotted: str, value):
    """Assign ``a.b.c = value`` inside a nested dict, creating levels."""
    keys = dotted.split(".")
    for key in keys[:-1]:
        obj = obj.setdefault(key, {})
        if not isinstance(obj, dict):
            raise ValueError(f"cannot descend into {key!r}")
    obj[keys[-1]] = value


def _parse_override(text: str):
    key, sep, raw = text.partition("=")
    if not sep:
        raise ValueError(f"override {text!r} is not KEY=VALUE")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings are fine
    return key, value


def build_request(command: str, args: argparse.Namespace):
    """Merge config file, --set overrides, and common flags into the model."""
    _, model_cls, _ = _COMMANDS[command]
    body: dict = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                body = json.load(f)
        except FileNotFoundError:
            raise ActionSLUError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise ActionSLUError(f"config file {args.config} is not valid "
                                 f"JSON: {exc}")
    if getattr(args, "run_dir", None):
        body["run_dir"] = args.run_dir
    for text in args.set or []:
        key, value = _parse_override(text)
        _set_path(body, key, value)
    return model_cls(**body)


def _dispatch(command: str, request, server: str | None) -> dict:
    path, _, handler_name = _COMMANDS[command]
    if server:
        import httpx

        resp = httpx.post(server.rstrip("/") + path,
                          json=request.model_dump(), timeout=None)
        if resp.status_code != 200:
            raise ActionSLUError(f"service returned {resp.status_code}: "
                                 f"{resp.text}")
        return resp.json()
    from .service import app as service_app

    handler = getattr(service_app, handler_name)
    return handler(request).model_dump()


def _serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("actionslu.service.app:app", host=args.host, port=args.port)
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="actionslu",
        description="Intent + slot filling experiments with an "
                    "action-guided decoder")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in _COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} step")
        p.add_argument("--config", help="JSON file with the request body")
        p.add_argument("--run-dir", dest="run_dir",
                       help="run directory for artifacts")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a request field, dotted keys allowed "
                            "(e.g. --set train.alpha=0.125)")
        p.add_argument("--server", help="base URL of a running service; "
                                        "default is in-process execution")

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    if args.command == "serve":
        return _serve(args)
    try:
        request = build_request(args.command, args)
        result = _dispatch(args.command, request, args.server)
    except ValidationError as exc:
        print(f"error: invalid request: {exc}", file=sys.stderr)
        return 1
    except (ActionSLUError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    json.dump(result, sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
