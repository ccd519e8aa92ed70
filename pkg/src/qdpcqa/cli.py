"""Command line client.

Every subcommand builds a request and sends it to the service, in-process by
default or to ``--server URL``.  Errors print the service's message and exit
with a nonzero status.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from typing import Optional, Sequence

import yaml

DATA_KEYS = ("source", "target", "synthetic", "data_seed", "out_dir")


def _client(server: Optional[str]):
    if server:
        import httpx
        return httpx.Client(base_url=server, timeout=None)
    with warnings.catch_warnings():
        # starlette flags its httpx-based test client as deprecated
        warnings.filterwarnings("ignore", message="Using `httpx`")
        from fastapi.testclient import TestClient
    from .service import create_app
    return TestClient(create_app(), raise_server_exceptions=False)


def _post(client, route: str, payload: dict) -> dict:
    resp = client.post(route, json=payload)
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        raise RuntimeError(f"{route} failed ({resp.status_code}): {detail}")
    return resp.json()


def _train_payload(args) -> dict:
    """Config file keys are TrainConfig fields; data keys may sit alongside."""
    with open(args.config) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"{args.config}: expected a key-value mapping")
    payload = {k: doc.pop(k) for k in DATA_KEYS if k in doc}
    payload["config"] = doc
    for k in ("source", "target", "out_dir"):
        if getattr(args, k) is not None:
            payload[k] = getattr(args, k)
    return payload


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qdpcqa", description=__doc__.splitlines()[0])
    p.add_argument("--server", help="base URL of a running service; in-process when omitted")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on source, adapt to target")
    t.add_argument("--config", required=True, help="flat YAML/JSON of training fields")
    t.add_argument("--source", help=".npz dataset (synthetic domains when omitted)")
    t.add_argument("--target", help=".npz dataset or image directory")
    t.add_argument("--out-dir", dest="out_dir")

    e = sub.add_parser("eval", help="score a target set with a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--target", required=True, help=".npz dataset or directory")
    e.add_argument("--out", help="per-sample prediction CSV")
    e.add_argument("--input-size", type=int, default=32)

    a = sub.add_parser("ablate", help="run an ablation suite on the synthetic benchmark")
    a.add_argument("--suite", required=True, choices=("sm", "stage", "align", "da", "alpha", "adapt"))
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--out-dir", default="runs/ablate")
    a.add_argument("--iters", type=int, help="override total iterations (warm-up kept at 1/6)")
    a.add_argument("--workers", type=int, default=1)

    pr = sub.add_parser("project", help="render a PLY point cloud to a stitched six-view image")
    pr.add_argument("--input", required=True)
    pr.add_argument("--out", required=True, help=".ppm or .png")
    pr.add_argument("--face-res", type=int, default=256)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--splat-radius", type=int, default=1)
    pr.add_argument("--mode", choices=("full", "train", "test"), default="full",
                    help="full stitched image, or a train/test crop of it")
    pr.add_argument("--side", type=int, default=224)

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "serve":
        import uvicorn
        uvicorn.run("qdpcqa.service.app:app", host=args.host, port=args.port)
        return 0
    try:
        client = _client(args.server)
        if args.command == "train":
            out = _post(client, "/train", _train_payload(args))
        elif args.command == "eval":
            out = _post(client, "/eval", dict(checkpoint=args.checkpoint, target=args.target,
                                              out=args.out, input_size=args.input_size))
        elif args.command == "ablate":
            out = _post(client, "/ablate", dict(suite=args.suite, seeds=args.seeds, out_dir=args.out_dir,
                                                total_iters=args.iters, workers=args.workers))
        else:
            out = _post(client, "/project", dict(input=args.input, out=args.out, face_res=args.face_res,
                                                 seed=args.seed, splat_radius=args.splat_radius,
                                                 mode=args.mode, side=args.side))
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit code 1
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(out, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
