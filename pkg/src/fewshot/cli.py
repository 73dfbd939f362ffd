"""Command-line client.

Subcommands build one payload (config file first, explicit flags on top)
and hand it to the shared command layer: in-process by default, or to a
running service when --server is given. Metrics stream to stdout as JSON
lines; the final summary or report prints as a JSON document.

Exit codes: 0 success, 1 config error, 2 data error, 3 runtime/numeric.
"""
from __future__ import annotations

import argparse
import json
import sys
import time

from . import commands
from .errors import ConfigError, DataError, FewshotError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage error: {message}")


def _emit(entry):
    print(json.dumps(entry, sort_keys=True), flush=True)


def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return cfg


def build_parser():
    parser = _Parser(prog="fewshot", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--seed", type=int)
        p.add_argument("--server", help="base URL of a running service; "
                                        "default is in-process execution")

    p = sub.add_parser("gen-data", help="write a synthetic PNG dataset")
    common(p)
    p.add_argument("--out", required=True, dest="out_dir",
                   help="dataset output directory")
    p.add_argument("--n-base", type=int, dest="n_base_classes")
    p.add_argument("--n-novel", type=int, dest="n_novel_classes")
    p.add_argument("--per-class", type=int, dest="examples_per_class")
    p.add_argument("--image-size", type=int)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--noise-std", type=float)

    p = sub.add_parser("pretrain", help="joint pretraining on base classes")
    common(p)
    p.add_argument("--data", required=True, dest="data_dir")
    p.add_argument("--out", required=True, dest="out_dir")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, dest="base_lr")
    p.add_argument("--decay-rate", type=float)
    p.add_argument("--decay-every", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--lambda", "--decode-weight", type=float, dest="decode_weight",
                   help="weight on the transform-decoding loss")
    p.add_argument("--magnitude", type=float, dest="transform_magnitude")
    p.add_argument("--mode", choices=["flat", "baseline", "naive_augment"])
    p.add_argument("--crop-pad", type=int)
    p.add_argument("--flip-prob", type=float)
    p.add_argument("--eval-each-epoch", action=argparse.BooleanOptionalAction,
                   default=None)

    p = sub.add_parser("finetune", help="imprint and fine-tune on novel classes")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, dest="data_dir")
    p.add_argument("--out", required=True, dest="out_dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--setting", choices=["all_classes", "novel_classes", "transfer"])
    p.add_argument("--k", type=int, dest="k_shot", help="support examples per class")
    p.add_argument("--init", choices=["imprint", "random"])
    p.add_argument("--freeze-encoder", action=argparse.BooleanOptionalAction,
                   default=None)

    p = sub.add_parser("evaluate", help="episodic protocol or fixed-split setting")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, dest="data_dir")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--protocol", choices=["episodic", "setting"])
    p.add_argument("--setting", choices=["all_classes", "novel_classes", "transfer"])
    p.add_argument("--n-way", type=int)
    p.add_argument("--k-shot", type=int)
    p.add_argument("--n-query", type=int)
    p.add_argument("--n-runs", type=int)
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--finetune-lr", type=float)
    p.add_argument("--finetune-batch-size", type=int)
    p.add_argument("--freeze-encoder", action=argparse.BooleanOptionalAction,
                   default=None)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


_SKIP_KEYS = {"command", "config", "server"}


def build_payload(args):
    file_cfg = _load_config_file(args.config)
    flags = {k: v for k, v in vars(args).items()
             if k not in _SKIP_KEYS and v is not None}
    return {**file_cfg, **flags}


_ENDPOINTS = {
    "gen-data": ("/datasets", False),
    "pretrain": ("/jobs/pretrain", True),
    "finetune": ("/jobs/finetune", True),
    "evaluate": ("/jobs/evaluate", True),
}

_RUNNERS = {
    "gen-data": commands.run_gen_data,
    "pretrain": commands.run_pretrain,
    "finetune": commands.run_finetune,
    "evaluate": commands.run_evaluate,
}


def _raise_remote(detail):
    if isinstance(detail, dict) and "exit_code" in detail:
        cls = {1: ConfigError, 2: DataError}.get(detail["exit_code"], FewshotError)
        raise cls(detail.get("error", "remote error"))
    raise FewshotError(str(detail))


def run_remote(client, command, payload, emit=_emit, poll_interval=0.2):
    """Drive a command on a running service through any httpx-style client."""
    path, is_job = _ENDPOINTS[command]
    resp = client.post(path, json=payload)
    if resp.status_code >= 400:
        try:
            _raise_remote(resp.json().get("detail"))
        except (ValueError, AttributeError):
            raise FewshotError(f"server error {resp.status_code}: {resp.text}")
    if not is_job:
        return resp.json()

    job_id = resp.json()["job_id"]
    emit({"event": "job", "job_id": job_id})
    offset = 0
    while True:
        page = client.get(f"/jobs/{job_id}/metrics",
                          params={"offset": offset}).json()
        for line in page["lines"]:
            emit(line)
        offset = page["next_offset"]
        if page["status"] in ("succeeded", "failed"):
            break
        time.sleep(poll_interval)
    info = client.get(f"/jobs/{job_id}").json()
    if info["status"] == "failed":
        _raise_remote({"error": info["error"], "exit_code": info["exit_code"]})
    return info["result"]


def _run_serve(args):
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command == "serve":
            return _run_serve(args)
        payload = build_payload(args)
        if args.server:
            import httpx

            with httpx.Client(base_url=args.server, timeout=30.0) as client:
                result = run_remote(client, args.command, payload)
        else:
            result = _RUNNERS[args.command](payload, emit=_emit)
        print(json.dumps(result, indent=2, sort_keys=True))
        return 0
    except FewshotError as exc:
        print(json.dumps({"error": str(exc), "error_type": type(exc).__name__}),
              file=sys.stderr)
        return exc.exit_code


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
