"""``vshuffle`` command line: train, stylize, sweep, pca, ablate-axis, verify, textures.

Every command takes an optional JSON run config (``--config``). Values are
resolved as CLI flag > config file > built-in default, checked against a
schema before any work, and the effective config is echoed into the
``run.json`` record written next to the outputs. Commands write only inside
their ``--out`` directory.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import itertools
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Optional, Sequence

import jsonschema
import numpy as np
import torch

from . import __version__
from .denoiser import DenoiserConfig, TrainingDivergedError, init_model, load_checkpoint, save_checkpoint, train
from .imageio import read_png, to_uint8, write_png

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
RUN_RECORD = "run.json"


class UsageError(Exception):
    """Bad flags or config; maps to exit code 2."""


# ---------------------------------------------------------------- defaults and schema

TRANSFER_DEFAULTS: dict[str, Any] = {
    "method": "vshuffle",
    "T": 200,
    "window": [0.2, 0.9],
    "alpha": 0.4,
    "beta": 0.24,
    "gamma": 0.75,
    "tau": None,
    "m": 1,
    "inner_steps": 10,
    "lr": 0.05,
    "blocks": [10, 11, 12, 13, 14, 15],
    "seed": 0,
    "axis": "s",
    "resample_policy": "per-timestep",
    "identity_shuffle": False,
}

DEFAULTS: dict[str, dict[str, Any]] = {
    "train": {
        "out": None,
        "seed": 0,
        "steps": 2000,
        "batch_size": 8,
        "lr": 2e-3,
        "data": None,
        "per_domain": 8,
        "denoiser": {f.name: f.default for f in fields(DenoiserConfig)},
    },
    "stylize": {"out": None, "checkpoint": None, "content": None, "styles": [], **TRANSFER_DEFAULTS},
    "sweep": {
        "out": None,
        "checkpoint": None,
        "content": None,
        "styles": [],
        "parallelism": 1,
        "base": dict(TRANSFER_DEFAULTS),
        "grid": {"method": ["vshuffle"], "beta": [0.24], "alpha": [0.4], "n": [1], "m": [1], "seed": [0]},
    },
    "pca": {"out": None, "checkpoint": None, "styles": [], "T": 200, "t": 100, "block": 12, "k": 3, "shuffle": False,
            "seed": 0, "axis": "s", "scale": 4},
    "ablate-axis": {"out": None, "checkpoint": None, "content": None, "styles": [], "axes": ["h", "s", "d"],
                    **TRANSFER_DEFAULTS},
    "textures": {"out": None, "seed": 0, "count": 4, "size": 32, "domains": None},
}

_num = {"type": "number"}
_int = {"type": "integer"}
_pos = {"type": "integer", "minimum": 1}
_str = {"type": ["string", "null"]}
_paths = {"type": "array", "items": {"type": "string"}}
_transfer_props = {
    "method": {"enum": ["styleid", "ad", "vshuffle"]},
    "T": _pos,
    "window": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
    "alpha": {"type": "number", "minimum": 0, "maximum": 1},
    "beta": {"type": "number", "minimum": 0},
    "gamma": {"type": "number", "minimum": 0, "maximum": 1},
    "tau": {"type": ["number", "null"], "exclusiveMinimum": 0},
    "m": _pos,
    "n": {"type": ["integer", "null"], "minimum": 1},
    "inner_steps": {"type": "integer", "minimum": 0},
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "blocks": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
    "seed": _int,
    "axis": {"enum": ["h", "s", "d"]},
    "resample_policy": {"enum": ["per-timestep", "per-inner-step"]},
    "identity_shuffle": {"type": "boolean"},
}


def _obj(props: dict, extra: bool = False) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": extra}


_io = {"out": _str, "checkpoint": _str, "content": _str, "styles": _paths}
SCHEMAS = {
    "train": _obj({
        "out": _str, "seed": _int, "steps": {"type": "integer", "minimum": 0}, "batch_size": _pos,
        "lr": {"type": "number", "exclusiveMinimum": 0}, "data": _str, "per_domain": _pos,
        "denoiser": _obj({f.name: _pos for f in fields(DenoiserConfig)}),
    }),
    "stylize": _obj({**_io, **_transfer_props}),
    "sweep": _obj({
        **_io,
        "parallelism": _pos,
        "base": _obj(_transfer_props),
        "grid": _obj({
            "method": {"type": "array", "items": {"enum": ["styleid", "ad", "vshuffle"]}},
            "beta": {"type": "array", "items": _num},
            "alpha": {"type": "array", "items": _num},
            "n": {"type": "array", "items": _pos},
            "m": {"type": "array", "items": _pos},
            "seed": {"type": "array", "items": _int},
        }),
    }),
    "pca": _obj({
        "out": _str, "checkpoint": _str, "styles": _paths, "T": _pos, "t": _pos,
        "block": {"type": "integer", "minimum": 0}, "k": _pos, "shuffle": {"type": "boolean"},
        "seed": _int, "axis": {"enum": ["h", "s", "d"]}, "scale": _pos,
    }),
    "ablate-axis": _obj({
        **_io, **_transfer_props,
        "axes": {"type": "array", "items": {"enum": ["h", "s", "d"]}, "minItems": 1},
    }),
    "textures": _obj({
        "out": _str, "seed": _int, "count": _pos, "size": _pos,
        "domains": {"type": ["array", "null"], "items": {"type": "string"}},
    }),
}


# ---------------------------------------------------------------- config resolution


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return data


def resolve_config(command: str, file_cfg: dict, flags: dict) -> dict:
    """Defaults, then the config file, then explicitly given flags; schema-checked."""
    schema = SCHEMAS[command]
    try:
        jsonschema.validate(file_cfg, schema)
    except jsonschema.ValidationError as exc:
        raise UsageError(f"config: {exc.message} at {'/'.join(map(str, exc.absolute_path)) or '<root>'}") from None
    cfg = _merge(DEFAULTS[command], file_cfg)
    cfg = _merge(cfg, {k: v for k, v in flags.items() if v is not None})
    try:
        jsonschema.validate(cfg, schema)
    except jsonschema.ValidationError as exc:
        raise UsageError(f"{exc.message} at {'/'.join(map(str, exc.absolute_path)) or '<root>'}") from None
    if not cfg.get("out"):
        raise UsageError("an output directory is required (--out or 'out' in the config)")
    return cfg


def dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- helpers


def _sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require_checkpoint(cfg: dict):
    ckpt = cfg.get("checkpoint")
    if not ckpt:
        raise UsageError("a checkpoint is required (--checkpoint)")
    if not Path(ckpt).is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")


def _require_images(paths: Sequence[str], what: str):
    for p in paths:
        if not Path(p).is_file():
            raise UsageError(f"{what} image not found: {p}")


def _load_images(paths: Sequence[str]) -> list[torch.Tensor]:
    return [read_png(p) for p in paths]


def _transfer_config(cfg: dict, n: Optional[int] = None):
    from .transfer import TransferConfig

    kw = {k: cfg[k] for k in TRANSFER_DEFAULTS}
    kw["window"] = tuple(kw["window"])
    kw["blocks"] = tuple(kw["blocks"])
    if n is not None:
        kw["n"] = n
    try:
        return TransferConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _inputs_record(cfg: dict) -> dict:
    rec = {}
    for key in ("checkpoint", "content"):
        if cfg.get(key):
            rec[key] = _sha256(cfg[key])
    if cfg.get("styles"):
        rec["styles"] = [_sha256(p) for p in cfg["styles"]]
    return rec


def _write_record(out: Path, command: str, cfg: dict, **extra) -> None:
    record = {"command": command, "version": __version__, "config": cfg, "inputs": _inputs_record(cfg), **extra}
    (out / RUN_RECORD).write_text(dump_json(record), encoding="utf-8")


def _upscale(img: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


# ---------------------------------------------------------------- commands


def cmd_train(cfg: dict) -> int:
    from .textures import default_training_set

    dcfg = DenoiserConfig(**cfg["denoiser"])
    if cfg["data"]:
        files = sorted(Path(cfg["data"]).glob("*.png"))
        if not files:
            raise UsageError(f"no PNG files in {cfg['data']}")
        data = torch.stack(_load_images(files))
        want = (dcfg.channels, dcfg.image_size, dcfg.image_size)
        if tuple(data.shape[1:]) != want:
            raise UsageError(f"training images are {tuple(data.shape[1:])}, denoiser expects {want}")
    else:
        data = default_training_set(cfg["seed"], dcfg.image_size, cfg["per_domain"])
    out = Path(cfg["out"])
    model = init_model(dcfg, cfg["seed"])
    try:
        model, report = train(model, data, cfg["steps"], cfg["seed"], cfg["batch_size"], cfg["lr"])
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.vshf")
    summary = {"steps": cfg["steps"], "images": int(data.shape[0])}
    if report.losses:
        summary.update(initial=report.initial, final=report.final)
        print(f"trained {cfg['steps']} steps on {data.shape[0]} images: "
              f"smoothed loss {report.initial:.4f} -> {report.final:.4f}")
        for i in range(0, len(report.losses), max(1, len(report.losses) // 10)):
            chunk = report.losses[i:i + max(1, len(report.losses) // 10)]
            print(f"  steps {i + 1:5d}-{i + len(chunk):5d}  mean loss {np.mean(chunk):.4f}")
    else:
        print("steps=0: wrote initial weights")
    _write_record(out, "train", cfg, summary=summary)
    print(out / "model.vshf")
    return EXIT_OK


def cmd_stylize(cfg: dict) -> int:
    from .transfer import run

    _require_checkpoint(cfg)
    if not cfg["content"]:
        raise UsageError("a content image is required (--content)")
    styles = cfg["styles"]
    if not styles:
        raise UsageError("at least one style image is required (--style)")
    if cfg["method"] != "vshuffle" and len(styles) != 1:
        raise UsageError(f"method {cfg['method']} requires exactly one style image (n=1); got {len(styles)}. "
                         "Only vshuffle accepts several styles.")
    _require_images([cfg["content"]], "content")
    _require_images(styles, "style")
    tc = _transfer_config(cfg, n=len(styles) if cfg["method"] == "vshuffle" else None)
    model = load_checkpoint(cfg["checkpoint"])
    content, style_imgs = read_png(cfg["content"]), _load_images(styles)
    res = run(model, content, style_imgs, tc)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "stylized.png", res.image_uint8)
    _write_record(out, "stylize", cfg, transfer=tc.to_dict(), output=_sha256(out / "stylized.png"),
                  timesteps=res.timesteps, losses=res.losses, transcript=res.transcript)
    # wall-clock time is kept apart so run.json stays byte-reproducible
    (out / "timing.json").write_text(dump_json({"elapsed_seconds": res.elapsed}), encoding="utf-8")
    print(f"{tc.method}: {len(res.timesteps)} timesteps in {res.elapsed:.1f}s -> {out / 'stylized.png'}")
    return EXIT_OK


def _sweep_grid(cfg: dict):
    grid = cfg["grid"]
    axes = ("method", "beta", "alpha", "n", "m", "seed")
    if any(len(grid.get(a, [])) == 0 for a in axes):
        raise UsageError("sweep grid is empty: every axis needs at least one value")
    base = {**cfg["base"]}
    configs = []
    for method, beta, alpha, n, m, seed in itertools.product(*(grid[a] for a in axes)):
        if method != "vshuffle" and n != 1:
            continue
        cell = {**base, "method": method, "beta": beta, "alpha": alpha, "m": m, "seed": seed}
        configs.append(_transfer_config(cell, n=n if method == "vshuffle" else None))
    if not configs:
        raise UsageError("sweep grid has no valid cells (non-vshuffle methods need n=1)")
    return configs


def cmd_sweep(cfg: dict) -> int:
    from .evalkit import run_sweep, sweep_csv, sweep_parallelism

    _require_checkpoint(cfg)
    if not cfg["content"] or not cfg["styles"]:
        raise UsageError("a content image and at least one style image are required")
    _require_images([cfg["content"]], "content")
    _require_images(cfg["styles"], "style")
    grid = _sweep_grid(cfg)
    need = max(c.n or 1 for c in grid)
    if need > len(cfg["styles"]):
        raise UsageError(f"grid asks for n={need} styles but only {len(cfg['styles'])} were given")
    model = load_checkpoint(cfg["checkpoint"])
    workers = sweep_parallelism(cfg["parallelism"])
    rows = run_sweep(grid, model, read_png(cfg["content"]), _load_images(cfg["styles"]), workers)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_bytes(sweep_csv(rows).encode("utf-8"))
    failed = [(i, r) for i, r in enumerate(rows) if r.error]
    _write_record(out, "sweep", cfg, cells=len(rows), failed=[{"cell": i, "error": r.error} for i, r in failed])
    for i, r in failed:
        print(f"cell {i} ({r.method} beta={r.beta} alpha={r.alpha} n={r.n} m={r.m} seed={r.seed}) failed: {r.error}",
              file=sys.stderr)
    print(f"{len(rows)} cells, {sum(r.pareto_flag for r in rows)} on the Pareto front -> {out / 'sweep.csv'}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_pca(cfg: dict) -> int:
    from .diffusion import Schedule
    from .evalkit import image_grid, pca_value_features
    from .losses import ShuffleSpec
    from .transfer import build_feature_cache

    _require_checkpoint(cfg)
    if not cfg["styles"]:
        raise UsageError("at least one image is required (--style)")
    _require_images(cfg["styles"], "style")
    if not 1 <= cfg["t"] <= cfg["T"]:
        raise UsageError(f"t must lie in 1..T={cfg['T']}")
    model = load_checkpoint(cfg["checkpoint"])
    if cfg["block"] >= model.config.num_attention_blocks:
        raise UsageError(f"block {cfg['block']} outside 0..{model.config.num_attention_blocks - 1}")
    sched = Schedule(cfg["T"])
    cache = build_feature_cache(model, None, _load_images(cfg["styles"]), sched, [cfg["t"]], [cfg["block"]])
    spec = ShuffleSpec(cfg["axis"], rng_seed=cfg["seed"]) if cfg["shuffle"] else None
    try:
        res = pca_value_features(cache, cfg["t"], cfg["block"], cfg["k"], spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    tiles = [_upscale(im, cfg["scale"]) for im in res.image]
    write_png(out / "pca.png", image_grid(tiles))
    _write_record(out, "pca", cfg, explained_variance_ratio=[float(r) for r in res.ratios])
    print("explained variance ratios:", " ".join(f"{r:.4f}" for r in res.ratios))
    return EXIT_OK


def cmd_ablate_axis(cfg: dict) -> int:
    from .evalkit import run_axis_ablation

    _require_checkpoint(cfg)
    if not cfg["content"] or len(cfg["styles"]) != 1:
        raise UsageError("ablate-axis needs one content image and exactly one style image")
    _require_images([cfg["content"]], "content")
    _require_images(cfg["styles"], "style")
    tc = _transfer_config({**cfg, "method": "vshuffle"}, n=1)
    model = load_checkpoint(cfg["checkpoint"])
    res = run_axis_ablation(model, read_png(cfg["content"]), read_png(cfg["styles"][0]), tc, tuple(cfg["axes"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "ablation.png", res.grid)
    for axis, r in res.results.items():
        write_png(out / f"axis_{axis}.png", r.image_uint8)
    metrics = {a: asdict(m) for a, m in res.metrics.items()}
    _write_record(out, "ablate-axis", cfg, metrics=metrics)
    for a, m in res.metrics.items():
        print(f"axis {a}: content_edge={m.content_proxy_edge:.4f} style_gram={m.style_proxy_gram:.4f}")
    return EXIT_OK


def cmd_textures(cfg: dict) -> int:
    from .textures import DOMAINS, make_texture_dataset

    names = cfg["domains"] or list(DOMAINS) + ["shapes"]
    unknown = [d for d in names if d not in DOMAINS and d != "shapes"]
    if unknown:
        raise UsageError(f"unknown texture domains {unknown}; choose from {list(DOMAINS) + ['shapes']}")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for j, name in enumerate(names):
        imgs = make_texture_dataset(name, cfg["count"], cfg["seed"] + j, cfg["size"])
        for i, im in enumerate(imgs):
            write_png(out / f"{name}_{i}.png", to_uint8(im))
    _write_record(out, "textures", cfg)
    print(f"wrote {len(names) * cfg['count']} images to {out}")
    return EXIT_OK


def cmd_verify(_args) -> int:
    from .verify import run_all

    results = run_all()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


COMMANDS = {
    "train": cmd_train,
    "stylize": cmd_stylize,
    "sweep": cmd_sweep,
    "pca": cmd_pca,
    "ablate-axis": cmd_ablate_axis,
    "textures": cmd_textures,
}


# ---------------------------------------------------------------- argument parsing


def _add_transfer_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=["styleid", "ad", "vshuffle"])
    p.add_argument("--T", type=int, help="number of inference timesteps")
    p.add_argument("--window", type=float, nargs=2, metavar=("T1", "T2"), help="mid-diffusion window as fractions of T")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float, help="query blend (styleid)")
    p.add_argument("--tau", type=float, help="attention temperature; default depends on method")
    p.add_argument("--m", type=int, help="shuffle draws per step")
    p.add_argument("--inner-steps", dest="inner_steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--blocks", type=int, nargs="+")
    p.add_argument("--seed", type=int)
    p.add_argument("--axis", choices=["h", "s", "d"])
    p.add_argument("--resample-policy", dest="resample_policy", choices=["per-timestep", "per-inner-step"])
    p.add_argument("--identity-shuffle", dest="identity_shuffle", action="store_const", const=True)


def _add_io_flags(p: argparse.ArgumentParser, content: bool = True) -> None:
    p.add_argument("--checkpoint")
    if content:
        p.add_argument("--content")
    p.add_argument("--style", dest="styles", action="append", help="style image; repeat for several")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vshuffle", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        if name != "verify":
            p.add_argument("--config", help="JSON run config")
            p.add_argument("--out", help="output directory")
        return p

    p = command("train", "train the micro denoiser on synthetic textures or a PNG folder")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--data", help="directory of training PNGs (default: built-in textures)")
    p.add_argument("--per-domain", dest="per_domain", type=int)

    p = command("stylize", "stylize one content image")
    _add_io_flags(p)
    _add_transfer_flags(p)

    p = command("sweep", "grid sweep over method/beta/alpha/n/m/seed, written as CSV")
    _add_io_flags(p)
    p.add_argument("--parallelism", type=int)

    p = command("pca", "PCA colouring of style value features")
    _add_io_flags(p, content=False)
    p.add_argument("--T", type=int)
    p.add_argument("--t", type=int, help="inference timestep")
    p.add_argument("--block", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--shuffle", action="store_const", const=True, help="shuffle values before PCA")
    p.add_argument("--seed", type=int)
    p.add_argument("--axis", choices=["h", "s", "d"])
    p.add_argument("--scale", type=int, help="nearest-neighbour upscaling of the PNG")

    p = command("ablate-axis", "shuffle along h, s and d and compare")
    _add_io_flags(p)
    _add_transfer_flags(p)
    p.add_argument("--axes", nargs="+", choices=["h", "s", "d"])

    p = command("textures", "write synthetic texture PNGs")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--domains", nargs="+")

    command("verify", "run the gradient and invariant oracle suite")
    return parser


def _flags(args: argparse.Namespace) -> dict:
    skip = {"command", "config"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if args.command == "verify":
        return cmd_verify(args)
    try:
        cfg = resolve_config(args.command, load_config_file(args.config), _flags(args))
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
