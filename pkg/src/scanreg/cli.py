"""Command line client for the registration service.

Each subcommand posts one request to the HTTP API. Without ``--server`` the
app runs in-process over an ASGI transport, so no server process is needed;
with ``--server URL`` the same requests go to a remote instance. Either way
the service reads and writes files on the (shared) filesystem.

Exit codes: 0 success, 1 usage error, 2 data error, 3 registration produced
zero components.
"""

from __future__ import annotations

import argparse
import json
import sys

import httpx

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NO_COMPONENTS = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=3600.0)
    # in-process mode: drive the ASGI app through the synchronous bridge
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DeprecationWarning)
        from starlette.testclient import TestClient

    from .service import create_app
    return TestClient(create_app(), base_url="http://scanreg",
                      raise_server_exceptions=False)


def _overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise SystemExit(EXIT_USAGE)
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _post(args, route: str, payload: dict) -> dict:
    with _client(args.server) as client:
        try:
            response = client.post(route, json=payload)
        except httpx.HTTPError as exc:
            print(f"error: cannot reach service: {exc}", file=sys.stderr)
            raise SystemExit(EXIT_DATA)
    if response.status_code == 422:
        print(f"error: invalid request: {response.text}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)
    if response.status_code != 200:
        try:
            detail = response.json()
        except ValueError:
            detail = {"detail": response.text}
        print(f"error: {detail.get('detail', response.text)}", file=sys.stderr)
        raise SystemExit(EXIT_DATA)
    return response.json()


def _emit(data: dict) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config file (key = value lines)")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   help="override one config value (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scanreg",
                     description="incremental multiview point cloud registration")
    parser.add_argument("--server", help="URL of a running service; "
                                         "default runs in-process")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("graph", help="build and dump the verified scan graph")
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", required=True, help="graph dump path (JSON)")
    _add_config_flags(p)

    p = sub.add_parser("register", help="run incremental registration")
    p.add_argument("--graph", required=True, help="graph dump from 'graph'")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--baseline", choices=["incremental", "mst"],
                   default="incremental")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    _add_config_flags(p)

    p = sub.add_parser("refine", help="refine tracks of a registered model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model-dir", required=True,
                   help="directory written by 'register'")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--cell", type=float, help="quantization cell size")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--patch-radius", type=float)
    p.add_argument("--seed", type=int)
    _add_config_flags(p)

    p = sub.add_parser("eval", help="compare estimated poses to ground truth")
    p.add_argument("--poses", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", help="write the report here")
    p.add_argument("--format", choices=["json", "text"], default="json")
    p.add_argument("--recall-threshold", type=float, default=0.2)
    p.add_argument("--rotation-thresholds", help="comma separated degrees")
    p.add_argument("--translation-thresholds", help="comma separated meters")

    p = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--scene", choices=["room", "facade", "chain"], default="room")
    p.add_argument("--scans", type=int, default=8)
    p.add_argument("--overlap", type=float, default=0.6)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--outliers", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points-per-scan", type=int, default=4000)
    p.add_argument("--keypoints-per-scan", type=int, default=400)
    p.add_argument("--groups", type=int, default=1)
    p.add_argument("--dense", action="store_true",
                   help="also emit coordinate-level dense matches")
    p.add_argument("--no-matches", action="store_true")
    p.add_argument("--ply-format", choices=["binary", "ascii"], default="binary")

    p = sub.add_parser("export", help="write all registered clouds as one world-frame PLY")
    p.add_argument("--manifest", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--output", required=True)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service import create_app
        uvicorn.run(create_app(), host=args.host, port=args.port)
        return EXIT_OK

    if args.command == "graph":
        data = _post(args, "/graph", {
            "manifest": args.manifest, "output": args.output,
            "config": args.config, "overrides": _overrides(args.set)})
        _emit(data)
        return EXIT_OK

    if args.command == "register":
        overrides = _overrides(args.set)
        if args.seed is not None:
            overrides["seed"] = args.seed
        data = _post(args, "/register", {
            "graph": args.graph, "output_dir": args.output_dir,
            "config": args.config, "overrides": overrides,
            "baseline": args.baseline})
        _emit(data)
        return EXIT_OK if data["components"] > 0 else EXIT_NO_COMPONENTS

    if args.command == "refine":
        overrides = _overrides(args.set)
        if args.cell is not None:
            overrides["quantize_cell"] = args.cell
        if args.patch_size is not None:
            overrides["patch_size"] = args.patch_size
        if args.patch_radius is not None:
            overrides["patch_radius"] = args.patch_radius
        if args.seed is not None:
            overrides["seed"] = args.seed
        data = _post(args, "/refine", {
            "manifest": args.manifest, "model_dir": args.model_dir,
            "output_dir": args.output_dir, "config": args.config,
            "overrides": overrides})
        _emit(data)
        return EXIT_OK

    if args.command == "eval":
        payload = {
            "poses": args.poses, "ground_truth": args.ground_truth,
            "manifest": args.manifest, "output": args.output,
            "fmt": args.format, "recall_threshold": args.recall_threshold}
        if args.rotation_thresholds:
            payload["rotation_thresholds_deg"] = [
                float(t) for t in args.rotation_thresholds.split(",")]
        if args.translation_thresholds:
            payload["translation_thresholds"] = [
                float(t) for t in args.translation_thresholds.split(",")]
        _emit(_post(args, "/evaluate", payload))
        return EXIT_OK

    if args.command == "synth":
        data = _post(args, "/synth", {
            "output_dir": args.output_dir, "scene": args.scene,
            "n_scans": args.scans, "overlap": args.overlap,
            "noise_sigma": args.noise, "outlier_rate": args.outliers,
            "seed": args.seed, "points_per_scan": args.points_per_scan,
            "keypoints_per_scan": args.keypoints_per_scan,
            "n_groups": args.groups, "emit_keypoints": True,
            "emit_matches": not args.no_matches, "emit_dense": args.dense,
            "ply_format": args.ply_format})
        _emit(data)
        return EXIT_OK

    if args.command == "export":
        _emit(_post(args, "/export", {
            "manifest": args.manifest, "poses": args.poses,
            "output": args.output}))
        return EXIT_OK

    parser.error(f"unknown command {args.command!r}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
