"""Command-line client.

The client reads the run configuration and the files it points to, posts a
request to the service (in-process unless ``--server`` is given) and writes
the returned files atomically into the output folder.

Exit codes: 0 success, 1 usage or configuration error, 2 data validation
error, 3 non-convergence.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import yaml

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE = 0, 1, 2, 3
COMMANDS = ("fit", "select", "classify", "predict", "gof", "external", "simulate", "mc")

log = logging.getLogger("jlcm")


class UsageError(Exception):
    pass


# -- configuration -----------------------------------------------------------------
def _read_text(path: Path, what: str) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {path}") from None
    except OSError as exc:
        raise UsageError(f"cannot read {what} file {path}: {exc}") from None


def _read_doc(value, base: Path, what: str) -> dict:
    """A mapping given inline or as a YAML/JSON file path relative to ``base``."""
    if isinstance(value, dict):
        return value
    if not isinstance(value, str):
        raise UsageError(f"config key {what!r} must be a path or a mapping")
    path = base / value
    try:
        doc = yaml.safe_load(_read_text(path, what))
    except yaml.YAMLError as exc:
        raise UsageError(f"{what} file {path} is not valid YAML/JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{what} file {path} does not hold a mapping")
    return doc


def _tables(cfg: dict, base: Path) -> dict:
    data = cfg.get("data")
    if not isinstance(data, dict):
        raise UsageError("config needs a 'data' mapping with longitudinal and survival paths")
    out = {}
    for key in ("longitudinal", "survival", "covariates"):
        if data.get(key):
            out[key] = _read_text(base / data[key], f"{key} data")
    if "longitudinal" not in out or "survival" not in out:
        raise UsageError("data needs both 'longitudinal' and 'survival' paths")
    return out


def load_config(path: str | None) -> tuple[dict, Path]:
    if path is None:
        return {}, Path.cwd()
    p = Path(path)
    try:
        cfg = yaml.safe_load(_read_text(p, "config")) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"config file {p} is not valid YAML: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {p} does not hold a mapping")
    return cfg, p.parent


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name) or {}
    if not isinstance(sec, dict):
        raise UsageError(f"config key {name!r} must be a mapping")
    return sec


def build_request(command: str, args, cfg: dict, base: Path) -> dict:
    """Request payload for ``/v1/<command>``; flags override config values."""
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    jobs = args.jobs if args.jobs is not None else int(cfg.get("jobs", 1))
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    optimizer = _section(cfg, "optimizer")
    starts = getattr(args, "starts", None)
    if command in ("fit", "select"):
        if "model" not in cfg:
            raise UsageError("config needs a 'model' (path or mapping)")
        req = {"model": _read_doc(cfg["model"], base, "model"), "data": _tables(cfg, base), "seed": seed,
               "jobs": jobs, "optimizer": optimizer,
               "n_starts": starts if starts is not None else int(cfg.get("n_starts", 100))}
        if command == "fit":
            G = args.G if args.G is not None else cfg.get("G")
            if G is not None:
                req["G"] = int(G)
        else:
            rng = args.G_range or cfg.get("G_range")
            if not rng or len(rng) != 2:
                raise UsageError("select needs G_range: [min, max] (or --G-range MIN MAX)")
            req["G_range"] = [int(rng[0]), int(rng[1])]
        return req
    if command in ("simulate", "mc"):
        if "scenario" not in cfg and args.scenario is None:
            raise UsageError("config needs a 'scenario' (path or mapping)")
        scen = _read_doc(args.scenario if args.scenario is not None else cfg["scenario"],
                         Path.cwd() if args.scenario is not None else base, "scenario")
        if command == "simulate":
            sim = _section(cfg, "simulate")
            N = args.N if args.N is not None else sim.get("N")
            return {"scenario": scen, "seed": seed, **({"N": int(N)} if N is not None else {})}
        mc = _section(cfg, "mc")
        cache = args.cache if args.cache is not None else mc.get("cache_dir")
        if cache is not None and args.cache is None:
            cache = str(base / cache)
        return {"scenario": scen, "seed": seed, "jobs": jobs, "optimizer": optimizer,
                "replicates": args.replicates if args.replicates is not None else int(mc.get("replicates", 100)),
                "n_starts": starts if starts is not None else int(mc.get("n_starts", 30)),
                "cache_dir": cache}
    # commands working from a fit file
    fit_path = args.fit if args.fit is not None else cfg.get("fit")
    if fit_path is None:
        raise UsageError(f"{command} needs a fit file ('fit' in config or --fit)")
    fit_base = Path.cwd() if args.fit is not None else base
    fit_doc = _read_doc(fit_path, fit_base, "fit")
    if command == "classify":
        return {"fit": fit_doc, "data": _tables(cfg, base)}
    if command == "predict":
        pr = _section(cfg, "predict")
        req = {"fit": fit_doc, "grid": pr.get("grid") or {}, "covariates": pr.get("covariates") or {},
               "n_draws": int(pr.get("n_draws", 200)), "seed": seed}
        if cfg.get("data"):
            req["data"] = _tables(cfg, base)
        return req
    if command == "gof":
        g = _section(cfg, "gof")
        return {"fit": fit_doc, "data": _tables(cfg, base), "seed": seed,
                "bin_width": float(args.bins if args.bins is not None else g.get("bin_width", 1.0)),
                "knot_spacing": float(g.get("knot_spacing", 2.0)),
                "n_boot": int(args.n_boot if args.n_boot is not None else g.get("n_boot", 200))}
    if command == "external":
        ext = dict(_section(cfg, "external"))
        if args.case is not None:
            ext["case"] = args.case
        if not ext.get("table"):
            raise UsageError("external needs external.table (path to the external data)")
        ext["table"] = _read_text(base / ext["table"], "external data")
        return {"fit": fit_doc, "data": _tables(cfg, base), "external": ext}
    raise UsageError(f"unknown command {command!r}")


# -- transport ---------------------------------------------------------------------
async def _post_local(command: str, payload: dict):
    import httpx
    from .service import app
    transport = httpx.ASGITransport(app=app)
    async with httpx.AsyncClient(transport=transport, base_url="http://jlcm.local", timeout=None) as client:
        return await client.post(f"/v1/{command}", json=payload)


def post(command: str, payload: dict, server: str | None):
    """Returns ``(http_status, body)``."""
    import httpx
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            r = client.post(f"/v1/{command}", json=payload)
    else:
        r = asyncio.run(_post_local(command, payload))
    try:
        body = r.json()
    except ValueError:
        body = {"detail": {"kind": "server", "message": r.text}}
    return r.status_code, body


def write_outputs(out_dir: Path, files: dict[str, str]):
    """Each file goes to a temporary name in ``out_dir`` first, then is renamed."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        target = out_dir / name
        fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=f".{name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


# -- entry point -------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (YAML)")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("--out", help="output folder (default: config 'out' or current folder)")
    common.add_argument("--server", help="service URL; the service runs in-process when omitted")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="jlcm", description="Joint latent class models for markers and "
                                     "competing-cause survival.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("fit", parents=[common], help="fit one model")
    p.add_argument("--G", type=int, help="number of classes")
    p.add_argument("--starts", type=int, help="number of random starts")
    p = sub.add_parser("select", parents=[common], help="fit a range of class numbers")
    p.add_argument("--G-range", dest="G_range", type=int, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--starts", type=int)
    for name in ("classify", "predict", "gof", "external"):
        p = sub.add_parser(name, parents=[common], help=f"{name} from a fit file")
        p.add_argument("--fit", help="fit file (overrides config)")
        if name == "gof":
            p.add_argument("--bins", type=float, help="time bin width for marker summaries")
            p.add_argument("--n-boot", dest="n_boot", type=int)
        if name == "external":
            p.add_argument("--case", type=int, choices=(1, 2))
    p = sub.add_parser("simulate", parents=[common], help="draw a cohort from a scenario")
    p.add_argument("--scenario")
    p.add_argument("--N", type=int)
    p = sub.add_parser("mc", parents=[common], help="Monte Carlo study of a scenario")
    p.add_argument("--scenario")
    p.add_argument("--replicates", type=int)
    p.add_argument("--starts", type=int)
    p.add_argument("--cache", help="checkpoint folder for replicate records")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg, base = load_config(args.config)
        payload = build_request(args.command, args, cfg, base)
        out_dir = Path(args.out) if args.out else base / cfg.get("out", ".") if args.config else Path.cwd()
        status, body = post(args.command, payload, args.server)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if status != 200:
        detail = body.get("detail", {})
        if isinstance(detail, dict):
            kind, msg = detail.get("kind", "config"), detail.get("message", str(detail))
        else:
            kind, msg = "config", json.dumps(detail)
        print(f"error ({kind}): {msg}", file=sys.stderr)
        return EXIT_DATA if kind == "data" else EXIT_CONFIG
    for w in body.get("warnings", []):
        print(f"warning: {w}", file=sys.stderr)
    for m in body.get("messages", []):
        print(m, file=sys.stderr)
    write_outputs(out_dir, body.get("files", {}))
    for name in sorted(body.get("files", {})):
        log.info("wrote %s", out_dir / name)
    return EXIT_CONVERGENCE if body.get("status") == "not-converged" else EXIT_OK


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
