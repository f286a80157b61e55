"""Command line front end.

Four subcommands cover the pipeline: gen-data (sample sources, write a
dataset directory), train (fit the surrogate, write checkpoints + history),
eval-green (learned vs reference Green's function at probe points), and
solve (Green's-function quadrature solver for Dirichlet problems).

gen-data and train read a JSON run config; unknown keys anywhere in it are
rejected so typos fail loudly instead of silently using defaults. solve and
eval-green are flag-driven. Exit codes: 0 success, 2 bad config or flags,
3 training divergence, 4 I/O trouble. Report-writing paths also render a
figure next to each delimited file.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from .figures import plot_comparison, plot_contour, plot_history
from .grid import Field, RectDomain, atomic_write_bytes, build_grid, l2_error, write_field
from .greensolver import (
    LearnedProvider,
    ReferenceProvider,
    custom_case,
    evaluate_case,
    get_case,
    solve_bvp,
)
from .model import GreenUNet, UNetConfig
from .operator import COEFFICIENTS, build_stencil, custom_coefficients, get_coefficients
from .source import SourceConfig, build_dataset, input_channels, load_dataset, save_dataset
from .trainer import TrainConfig, TrainingDiverged, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

DEFAULT_PROBES = ((0.0, 0.0), (-0.75, -0.75), (0.5, 0.0))


class ConfigError(ValueError):
    pass


class IOFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# run config parsing
# ---------------------------------------------------------------------------

_TOP_KEYS = {"grid", "coeffs", "source", "variant", "data", "model", "train", "out_dir"}
_GRID_KEYS = {"x0", "y0", "L1", "L2", "n", "m"}
_COEFF_KEYS = {"name", "a", "r"}
_SOURCE_KEYS = {"sigma_factor", "margin_cells", "seed"}
_DATA_KEYS = {"train_count", "val_count", "ref_solver", "ref_tol", "train_references"}
_MODEL_KEYS = {"first_channels", "depth", "seed"}
_TRAIN_KEYS = {"loss", "k_strategy", "k", "epochs", "batch_size", "lr", "beta1",
               "beta2", "eps", "seed", "deterministic", "num_threads"}


def _check_keys(obj: dict, allowed: set, where: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")


def _require(obj: dict, keys: set, where: str) -> None:
    missing = sorted(keys - set(obj))
    if missing:
        raise ConfigError(f"missing keys in {where}: {', '.join(missing)}")


def load_run_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IOFailure(f"cannot read config {path}: {e}") from e
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    _check_keys(cfg, _TOP_KEYS, "config")
    return cfg


def parse_grid_section(cfg: dict):
    if "grid" not in cfg:
        raise ConfigError("config needs a 'grid' section")
    g = cfg["grid"]
    _check_keys(g, _GRID_KEYS, "grid")
    _require(g, _GRID_KEYS, "grid")
    domain = RectDomain(float(g["x0"]), float(g["y0"]), float(g["L1"]), float(g["L2"]))
    return build_grid(domain, int(g["n"]), int(g["m"]))


def parse_coeffs_section(cfg: dict):
    spec = cfg.get("coeffs", "laplace")
    if isinstance(spec, str):
        if spec not in COEFFICIENTS:
            raise ConfigError(f"unknown coefficients {spec!r}, expected one of "
                              f"{sorted(COEFFICIENTS)} or an object with a/r expressions")
        return get_coefficients(spec)
    _check_keys(spec, _COEFF_KEYS, "coeffs")
    _require(spec, {"a", "r"}, "coeffs")
    return custom_coefficients(spec["a"], spec["r"], spec.get("name", "custom"))


def parse_source_section(cfg: dict) -> SourceConfig:
    s = cfg.get("source", {})
    _check_keys(s, _SOURCE_KEYS, "source")
    return SourceConfig(float(s.get("sigma_factor", 2.0)), int(s.get("margin_cells", 2)),
                        int(s.get("seed", 0)))


def parse_variant(cfg: dict) -> int:
    variant = int(cfg.get("variant", 1))
    input_channels(variant)  # validates
    return variant


def parse_data_section(cfg: dict) -> dict:
    if "data" not in cfg:
        raise ConfigError("config needs a 'data' section")
    d = cfg["data"]
    _check_keys(d, _DATA_KEYS, "data")
    _require(d, {"train_count", "val_count"}, "data")
    out = {
        "train_count": int(d["train_count"]),
        "val_count": int(d["val_count"]),
        "ref_solver": d.get("ref_solver", "direct"),
        "ref_tol": float(d.get("ref_tol", 1e-10)),
        "train_references": bool(d.get("train_references", False)),
    }
    if out["train_count"] < 1 or out["val_count"] < 1:
        raise ConfigError("train_count and val_count must be >= 1")
    if out["ref_solver"] not in ("direct", "jacobi"):
        raise ConfigError(f"ref_solver must be direct or jacobi, got {out['ref_solver']!r}")
    return out


def parse_model_section(cfg: dict, variant: int, grid) -> UNetConfig:
    if "model" not in cfg:
        raise ConfigError("config needs a 'model' section")
    m = cfg["model"]
    _check_keys(m, _MODEL_KEYS, "model")
    _require(m, {"first_channels", "depth"}, "model")
    return UNetConfig(input_channels(variant), int(m["first_channels"]),
                      int(m["depth"]), grid.n, grid.m)


def parse_train_section(cfg: dict, threads: int | None) -> TrainConfig:
    if "train" not in cfg:
        raise ConfigError("config needs a 'train' section")
    t = dict(cfg["train"])
    _check_keys(t, _TRAIN_KEYS, "train")
    if threads is not None:
        t["num_threads"] = threads
    if "k" in t and t["k"] is not None:
        t["k"] = int(t["k"])
    return TrainConfig(**t)


def resolve_threads(args) -> int | None:
    if getattr(args, "threads", None) is not None:
        return args.threads
    env = os.environ.get("GREEN_SURROGATE_THREADS")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"GREEN_SURROGATE_THREADS must be an integer, got {env!r}")
    return None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    grid = parse_grid_section(cfg)
    coeffs = parse_coeffs_section(cfg)
    source = parse_source_section(cfg)
    variant = parse_variant(cfg)
    data = parse_data_section(cfg)

    out_dir = Path(args.out_dir or cfg.get("out_dir") or "")
    if not str(out_dir):
        raise ConfigError("no output directory: set --out-dir or config out_dir")
    if out_dir.exists():
        raise IOFailure(f"output directory {out_dir} already exists")

    train_ds = build_dataset(grid, coeffs, data["train_count"], source, variant,
                             with_references=data["train_references"],
                             ref_solver=data["ref_solver"], ref_tol=data["ref_tol"])
    val_ds = build_dataset(grid, coeffs, data["val_count"],
                           SourceConfig(source.sigma_factor, source.margin_cells,
                                        source.seed + 1),
                           variant, with_references=True,
                           ref_solver=data["ref_solver"], ref_tol=data["ref_tol"])

    tmp = out_dir.with_name(out_dir.name + f".tmp{os.getpid()}")
    try:
        save_dataset(tmp / "train", train_ds)
        save_dataset(tmp / "val", val_ds)
        os.replace(tmp, out_dir)
    except OSError as e:
        shutil.rmtree(tmp, ignore_errors=True)
        raise IOFailure(f"cannot write dataset to {out_dir}: {e}") from e
    print(f"train: {len(train_ds)} samples -> {out_dir / 'train'}")
    print(f"val: {len(val_ds)} samples -> {out_dir / 'val'}")
    return EXIT_OK


def _load_dataset_dir(path: Path):
    try:
        return load_dataset(path)
    except FileNotFoundError as e:
        raise IOFailure(f"dataset not found at {path}: {e}") from e
    except ValueError as e:
        raise IOFailure(f"broken dataset at {path}: {e}") from e


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    grid = parse_grid_section(cfg)
    coeffs = parse_coeffs_section(cfg)
    source = parse_source_section(cfg)
    variant = parse_variant(cfg)
    model_cfg = parse_model_section(cfg, variant, grid)
    train_cfg = parse_train_section(cfg, resolve_threads(args))

    out_dir = Path(args.out_dir or cfg.get("out_dir") or "")
    if not str(out_dir):
        raise ConfigError("no output directory: set --out-dir or config out_dir")

    if args.data is not None:
        base = Path(args.data)
        train_ds = _load_dataset_dir(base / "train")
        val_ds = _load_dataset_dir(base / "val")
        if train_ds.grid != grid or val_ds.grid != grid:
            raise ConfigError(f"dataset at {base} was generated for a different grid")
        if train_ds.coeffs_name != coeffs.name:
            raise ConfigError(f"dataset coefficients {train_ds.coeffs_name!r} do not "
                              f"match config {coeffs.name!r}")
    else:
        data = parse_data_section(cfg)
        with_train_refs = data["train_references"] or train_cfg.loss == "data"
        train_ds = build_dataset(grid, coeffs, data["train_count"], source, variant,
                                 with_references=with_train_refs,
                                 ref_solver=data["ref_solver"], ref_tol=data["ref_tol"])
        val_ds = build_dataset(grid, coeffs, data["val_count"],
                               SourceConfig(source.sigma_factor, source.margin_cells,
                                            source.seed + 1),
                               variant, with_references=True,
                               ref_solver=data["ref_solver"], ref_tol=data["ref_tol"])

    model_seed = int(cfg.get("model", {}).get("seed", 0))
    model = GreenUNet(model_cfg, seed=model_seed)
    stencil = build_stencil(grid, coeffs)
    result = train(model, stencil, train_ds, val_ds, train_cfg, out_dir=out_dir,
                   log=print)
    plot_history(result.history, out_dir / "history.png")
    print(f"best epoch {result.best_epoch} val_loss {result.best_val_loss!r}")
    print(f"wrote {result.best_path}, {result.final_path}, {result.history_path}")
    return EXIT_OK


def _parse_xi(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError(f"bad probe point {text!r}, expected 'x,y'")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise ConfigError(f"bad probe point {text!r}, expected two floats")


def _learned_provider(path: str, grid=None) -> LearnedProvider:
    p = Path(path)
    try:
        return LearnedProvider.from_checkpoint(p, grid=grid)
    except OSError as e:
        raise IOFailure(f"cannot read checkpoint {p}: {e}") from e
    except ValueError as e:
        raise IOFailure(f"unusable checkpoint {p}: {e}") from e


def cmd_eval_green(args) -> int:
    threads = resolve_threads(args)
    if threads is not None:
        torch.set_num_threads(threads)
    learned = _learned_provider(args.checkpoint)
    grid, coeffs = learned.grid, learned.coeffs
    reference = ReferenceProvider(grid, coeffs,
                                  sigma_factor=learned.source_cfg.sigma_factor,
                                  tol=args.tol, solver=args.solver)
    probes = [_parse_xi(x) for x in args.xi] if args.xi else list(DEFAULT_PROBES)

    out_dir = Path(args.out_dir) if args.out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    rows = ["xi1,xi2,e2"]
    for idx, xi in enumerate(probes):
        G_learned = learned.green_field(xi)
        G_ref = reference.green_field(xi)
        e2 = l2_error(G_learned, G_ref)
        print(f"xi=({xi[0]:g},{xi[1]:g}) e2 = {e2!r}")
        rows.append(f"{xi[0]!r},{xi[1]!r},{e2!r}")
        if out_dir is not None:
            write_field(out_dir / f"learned_{idx}.fgf", G_learned)
            write_field(out_dir / f"reference_{idx}.fgf", G_ref)
            plot_comparison(G_learned, G_ref, out_dir / f"green_{idx}.png",
                            labels=("learned", "reference"),
                            suptitle=f"G(., xi) at xi=({xi[0]:g},{xi[1]:g})")
    if out_dir is not None:
        atomic_write_bytes(out_dir / "report.csv", ("\n".join(rows) + "\n").encode())
        print(f"wrote {out_dir / 'report.csv'}")
    return EXIT_OK


def _parse_grid_flag(text: str, domain: RectDomain):
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ConfigError(f"bad grid {text!r}, expected NxM")
    try:
        n, m = int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigError(f"bad grid {text!r}, expected NxM")
    return build_grid(domain, n, m)


def _parse_domain_flag(text: str) -> RectDomain:
    parts = text.split(",")
    if len(parts) != 4:
        raise ConfigError(f"bad domain {text!r}, expected x0,y0,L1,L2")
    try:
        x0, y0, L1, L2 = (float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bad domain {text!r}, expected four floats")
    return RectDomain(x0, y0, L1, L2)


def cmd_solve(args) -> int:
    threads = resolve_threads(args)
    if threads is not None:
        torch.set_num_threads(threads)
    if (args.case is None) == (args.f_expr is None):
        raise ConfigError("pick exactly one of --case or --f-expr")

    domain = _parse_domain_flag(args.domain)

    # the problem
    if args.case is not None:
        bvp = get_case(args.case)
        if args.coeffs is not None and args.coeffs != bvp.coeffs.name:
            raise ConfigError(f"case {bvp.name!r} uses coefficients "
                              f"{bvp.coeffs.name!r}, not {args.coeffs!r}")
    else:
        if args.a_expr is not None or args.r_expr is not None:
            if args.a_expr is None or args.r_expr is None:
                raise ConfigError("custom coefficients need both --a-expr and --r-expr")
            coeffs = custom_coefficients(args.a_expr, args.r_expr, args.coeffs or "custom")
        else:
            coeffs = get_coefficients(args.coeffs or "laplace")
        bvp = custom_case(coeffs, args.f_expr, args.g_expr)

    # the provider
    if args.provider == "reference":
        grid = _parse_grid_flag(args.grid or "64x64", domain)
        provider = ReferenceProvider(grid, bvp.coeffs, sigma_factor=args.sigma_factor,
                                     tol=args.tol, solver=args.solver)
        provider_desc = "reference"
    elif args.provider.startswith("checkpoint:"):
        provider = _learned_provider(args.provider[len("checkpoint:"):])
        grid = provider.grid
        if args.grid is not None:
            requested = _parse_grid_flag(args.grid, domain)
            if requested != grid:
                raise ConfigError(
                    f"checkpoint was trained on {grid.n}x{grid.m} over its own domain; "
                    f"--grid/--domain disagree")
        if provider.coeffs.name != bvp.coeffs.name:
            raise ConfigError(f"checkpoint coefficients {provider.coeffs.name!r} do not "
                              f"match the problem's {bvp.coeffs.name!r}")
        provider_desc = args.provider
    else:
        raise ConfigError(f"bad provider {args.provider!r}, expected 'reference' or "
                          f"'checkpoint:<path>'")

    result = evaluate_case(provider, bvp, grid)
    u = result.u
    print(f"case {bvp.name} grid {grid.n}x{grid.m} provider {provider_desc}")

    if args.report is not None:
        if result.e2 is None:
            raise ConfigError("--report e2 needs a case with an exact solution")
        print(f"e2 = {result.e2!r}")

    if args.out is not None:
        out = Path(args.out)
        write_field(out, u)
        print(f"wrote {out}")
        if args.report is not None:
            report_path = out.with_suffix(".report.csv")
            atomic_write_bytes(report_path,
                               f"case,n,m,e2\n{bvp.name},{grid.n},{grid.m},{result.e2!r}\n".encode())
            plot_comparison(u, result.exact, out.with_suffix(".png"),
                            labels=("computed", "exact"), suptitle=bvp.name)
            print(f"wrote {report_path}")

    if args.contour is not None:
        cpath = Path(args.contour)
        x1, x2 = grid.x1(), grid.x2()
        lines = ["x,y,u"]
        for j in range(grid.m):
            for i in range(grid.n):
                lines.append(f"{float(x1[i])!r},{float(x2[j])!r},{float(u.values[i, j])!r}")
        atomic_write_bytes(cpath, ("\n".join(lines) + "\n").encode())
        plot_contour(u, cpath.with_suffix(".png"), title=f"u ({bvp.name})")
        print(f"wrote {cpath}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="green-surrogate",
        description="Learn Green's functions of 2D reaction-diffusion operators "
                    "and solve Dirichlet problems with them.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample sources and write a dataset directory")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out-dir", help="overrides config out_dir")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the surrogate")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--data", help="dataset directory from gen-data (default: generate in memory)")
    p.add_argument("--out-dir", help="overrides config out_dir")
    p.add_argument("--threads", type=int, help="torch thread cap (env GREEN_SURROGATE_THREADS)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-green",
                       help="compare a checkpoint's Green's function against the reference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--xi", action="append", help="probe point 'x,y'; repeatable")
    p.add_argument("--out-dir", help="write fields, figures and report.csv here")
    p.add_argument("--tol", type=float, default=1e-10, help="reference Jacobi tolerance")
    p.add_argument("--solver", choices=("auto", "direct", "jacobi"), default="auto")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_eval_green)

    p = sub.add_parser("solve", help="solve a Dirichlet problem via the Green's function")
    p.add_argument("--provider", default="reference",
                   help="'reference' or 'checkpoint:<path>'")
    p.add_argument("--case", help="named case: poisson-sin<k>, poisson-cos, rd1-gauss")
    p.add_argument("--f-expr", help="source term expression in x1, x2")
    p.add_argument("--g-expr", help="boundary value expression (default 0)")
    p.add_argument("--coeffs", help="coefficient set name (default laplace)")
    p.add_argument("--a-expr", help="custom diffusion coefficient expression")
    p.add_argument("--r-expr", help="custom reaction coefficient expression")
    p.add_argument("--grid", help="nodes NxM (reference provider; default 64x64)")
    p.add_argument("--domain", default="-1,-1,2,2", help="x0,y0,L1,L2")
    p.add_argument("--sigma-factor", type=float, default=0.5,
                   help="source width in mesh units (reference provider)")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--solver", choices=("auto", "direct", "jacobi"), default="auto")
    p.add_argument("--out", help="write the solution field here (FGF1)")
    p.add_argument("--report", choices=("e2",), help="print the error norm; with --out, "
                   "also write <out>.report.csv and a figure")
    p.add_argument("--contour", help="write x,y,u CSV (and a contour figure) here")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_solve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except IOFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
