"""Command-line front end.

Subcommands ``generate``, ``fit``, ``benchmark`` and ``export-smatrix`` read
an INI config file (see README) and write plain CSV, PGM and text outputs.
Every file is written atomically.

Exit codes: 0 success, 2 usage, 3 configuration, 4 data, 5 convergence.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import warnings
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from ._io import atomic_write_text, format_pgm, pgm_pixels, read_matrix, write_matrix
from .bench import DatasetSource, GridSearchSpec, MethodKind, MethodSpec, fit_method, run_benchmark
from .bench import support_similarity
from .core import (
    ConfigError, ConvergenceError, DataError, DimensionError, GroupStructure, GSMTLError,
    HyperParams, ProblemKind,
)
from .datagen import (
    KMeansConfig, Synthetic1Config, export_csv, format_groups, gen_synthetic1,
    gen_two_group_classification, kmeans_groups, load_csv, read_groups,
)
from .solver import SolverConfig

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE = 0, 2, 3, 4, 5

logger = logging.getLogger("gsmtl")

GENERATORS = ("synthetic1", "two_group")


class RunConfig:
    """Parsed INI configuration with paths resolved against the file's directory."""

    def __init__(self, parser: configparser.ConfigParser, base: Path, source: str = "<config>"):
        self.parser = parser
        self.base = base
        self.source = source

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err.strerror or err}") from None
        except configparser.Error as err:
            raise ConfigError(f"{path}: {err}") from None
        return cls(parser, path.resolve().parent, str(path))

    @classmethod
    def empty(cls) -> "RunConfig":
        return cls(configparser.ConfigParser(), Path.cwd())

    def get(self, section, key, default=None):
        if self.parser.has_option(section, key):
            return self.parser.get(section, key).strip()
        return default

    def number(self, section, key, default, cast=float):
        raw = self.get(section, key)
        if raw is None:
            return default
        try:
            return cast(float(raw)) if cast is int else cast(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a number") from None

    def numbers(self, section, key, default, cast=float):
        raw = self.get(section, key)
        if raw is None:
            return default
        try:
            return tuple(cast(float(v)) if cast is int else cast(v)
                         for v in raw.replace(";", ",").split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a list of numbers") from None

    def path(self, section, key):
        raw = self.get(section, key)
        if raw is None:
            return None
        p = Path(raw).expanduser()
        return p if p.is_absolute() else self.base / p

    def echo(self) -> str:
        lines = []
        for sec in self.parser.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in self.parser.items(sec, raw=True)]
            lines.append("")
        return "\n".join(lines)

    # ----------------------------------------------------------------------

    def seed(self, override=None) -> int:
        return int(override) if override is not None else self.number("run", "seed", 0, int)

    def dataset(self, section: str, seed: int):
        """``(data, groups_or_None)`` from a section with ``csv`` or ``generator``."""
        csv_path = self.path(section, "csv")
        generator = self.get(section, "generator")
        if (csv_path is None) == (generator is None):
            raise ConfigError(f"[{section}] needs exactly one of 'csv' or 'generator'")
        if csv_path is not None:
            return load_csv(csv_path, self.get(section, "kind", "regression")), None
        generator = generator.lower()
        if generator == "synthetic1":
            names = {f.name: f for f in fields(Synthetic1Config)}
            kwargs = {}
            for name in ("m", "g", "T", "n_per_task", "k_true", "feature_overlap"):
                if self.get(section, name) is not None:
                    kwargs[name] = self.number(section, name, None, int)
            for name in ("sigma", "label_noise"):
                if self.get(section, name) is not None:
                    kwargs[name] = self.number(section, name, None)
            assert set(kwargs) <= set(names)
            data, groups, _ = gen_synthetic1(Synthetic1Config(seed=seed, **kwargs))
            return data, groups
        if generator == "two_group":
            data, groups = gen_two_group_classification(
                T=self.number(section, "T", 29, int), d=self.number(section, "d", 9, int),
                n_per_task=self.number(section, "n_per_task", 40, int),
                margin=self.number(section, "margin", 1.0),
                noise=self.number(section, "noise", 0.1), seed=seed)
            return data, groups
        raise ConfigError(f"[{section}] unknown generator {generator!r}; "
                          f"expected one of {', '.join(GENERATORS)}")

    def groups(self, section: str, data, planted, seed: int) -> GroupStructure:
        """Resolve ``source`` = file:PATH | kmeans:G | singletons | all-tasks | planted."""
        source = self.get(section, "source") or self.get(section, "groups")
        if source is None:
            if planted is not None:
                return planted
            raise ConfigError(f"[{section}] needs a groups source")
        kind, _, arg = source.partition(":")
        kind = kind.strip().lower()
        T = data.n_tasks
        if kind == "file":
            p = Path(arg.strip()).expanduser()
            return read_groups(p if p.is_absolute() else self.base / p, T)
        if kind == "kmeans":
            try:
                g = int(arg)
            except ValueError:
                raise ConfigError(f"[{section}] kmeans needs a group count, got {source!r}") from None
            return kmeans_groups(data, KMeansConfig(g=g, seed=seed))
        if kind == "singletons":
            return GroupStructure.singletons(T)
        if kind in ("all-tasks", "all_tasks", "single"):
            return GroupStructure.single(T)
        if kind == "planted":
            if planted is None:
                raise ConfigError(f"[{section}] 'planted' groups need a generator dataset")
            return planted
        raise ConfigError(f"[{section}] unknown groups source {source!r}")

    def solver(self) -> SolverConfig:
        sec = "method"
        defaults = HyperParams()
        hp = HyperParams(
            mu=self.number(sec, "mu", defaults.mu), lam=self.number(sec, "lam", defaults.lam),
            k=self.number(sec, "k", defaults.k, int),
            outer_tol=self.number(sec, "outer_tol", defaults.outer_tol),
            outer_max_iter=self.number(sec, "outer_max_iter", defaults.outer_max_iter, int),
            inner_tol=self.number(sec, "inner_tol", defaults.inner_tol),
            inner_max_iter=self.number(sec, "inner_max_iter", defaults.inner_max_iter, int))
        base = SolverConfig()
        return SolverConfig(
            hp=hp, l_method=self.get(sec, "l_method", base.l_method),
            acceleration=self.get(sec, "acceleration", base.acceleration),
            projection=self.get(sec, "projection", base.projection),
            stl_reg=self.number(sec, "stl_reg", base.stl_reg))

    def grid(self) -> GridSearchSpec:
        base = GridSearchSpec()
        return GridSearchSpec(mu_grid=self.numbers("grid", "mu", base.mu_grid),
                              lambda_grid=self.numbers("grid", "lam", base.lambda_grid),
                              k_grid=self.numbers("grid", "k", None, int))

    def out_dir(self, override=None) -> Path:
        if override is not None:
            return Path(override)
        p = self.path("run", "out")
        if p is None:
            raise ConfigError("no output directory: pass --out or set [run] out")
        return p


# --------------------------------------------------------------------------
# helpers


def _prepare_out(out: Path) -> Path:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise ConfigError(f"cannot create output directory {out}: {err.strerror or err}") from None
    if not out.is_dir():
        raise ConfigError(f"output path {out} is not a directory")
    return out


def _write(path: Path, text: str):
    try:
        atomic_write_text(path, text)
    except OSError as err:
        raise ConfigError(f"cannot write {path}: {err.strerror or err}") from None


def _trace_csv(trace) -> str:
    return "iter,objective\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(trace))


# --------------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig, out: Path, seed: int) -> int:
    data, groups = cfg.dataset("data", seed)
    if cfg.get("data", "csv") is not None:
        raise ConfigError("[data] generate needs a 'generator', not a 'csv' source")
    if cfg.parser.has_section("groups"):
        groups = cfg.groups("groups", data, groups, seed)
    _prepare_out(out)
    try:
        export_csv(data, out / "data.csv")
    except OSError as err:
        raise ConfigError(f"cannot write {out / 'data.csv'}: {err.strerror or err}") from None
    _write(out / "groups.txt", format_groups(groups))
    manifest = (f"# generated dataset\nseed = {seed}\nkind = {data.kind.value}\n"
                f"tasks = {data.n_tasks}\nfeatures = {data.n_features}\n"
                f"samples = {int(data.sizes.sum())}\n\n# config\n{cfg.echo()}")
    _write(out / "manifest.txt", manifest)
    logger.info("wrote %s", out / "data.csv")
    return EXIT_OK


def cmd_fit(cfg: RunConfig, out: Path, seed: int) -> int:
    data, planted = cfg.dataset("data", seed)
    groups = cfg.groups("groups", data, planted, seed)
    solver = cfg.solver()
    spec = MethodSpec(cfg.get("method", "name", "GS_MTL"), groups)
    if spec.kind is MethodKind.STL:
        raise ConfigError("[method] fit writes a latent model; STL is available in benchmark")
    _prepare_out(out)
    pred = fit_method(spec, data, solver)
    model, report = pred.model, pred.report
    write_matrix(model.L, out / "L.csv")
    write_matrix(model.S, out / "S.csv")
    _write(out / "trace.csv", _trace_csv(report.objective_trace))
    summary = report.to_dict(timing=False)
    summary.update(method=spec.kind.value, seed=seed, mu=solver.hp.mu, lam=solver.hp.lam,
                   k=solver.hp.k, groups=[[int(t) + 1 for t in g] for g in groups.groups])
    _write(out / "report.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    logger.info("objective %.6g after %d outer iterations (converged=%s, %.2f s)",
                report.objective_trace[-1], report.outer_iterations, report.converged,
                report.wall_time)
    return EXIT_OK


def _benchmark_sources(cfg: RunConfig) -> list:
    sections = [s for s in cfg.parser.sections() if s.startswith("dataset")]
    if not sections:
        if not cfg.parser.has_section("data"):
            raise ConfigError("benchmark needs a [data] section or [dataset NAME] sections")
        sections = ["data"]
    sources = []
    for sec in sections:
        name = sec.partition(" ")[2].strip() or cfg.get(sec, "name") or (
            cfg.get(sec, "generator") or Path(cfg.get(sec, "csv", "data")).stem)
        gsec = sec if (cfg.get(sec, "source") or cfg.get(sec, "groups")) else "groups"

        def make(seed, sec=sec, gsec=gsec):
            data, planted = cfg.dataset(sec, seed)
            return data, cfg.groups(gsec, data, planted, seed)

        sources.append(DatasetSource(name, make))
    return sources


def cmd_benchmark(cfg: RunConfig, out: Path, seed_override) -> int:
    methods = [m.strip() for m in cfg.get("benchmark", "methods", "STL,MTL_FEAT,GO_MTL,GS_MTL")
               .split(",") if m.strip()]
    if not methods:
        raise ConfigError("[benchmark] methods is empty")
    methods = [MethodKind.parse(m) for m in methods]
    if seed_override is not None:
        seeds = [int(seed_override)]
    else:
        seeds = list(cfg.numbers("benchmark", "seeds", (cfg.seed(),), int))
    sources = _benchmark_sources(cfg)
    _prepare_out(out)
    result = run_benchmark(sources, methods, cfg.grid(), seeds, cfg.solver())
    _write(out / "benchmark.json", result.to_json())
    _write(out / "benchmark.txt", result.to_text())
    sys.stdout.write(result.to_text())
    return EXIT_OK


def cmd_export_smatrix(cfg: RunConfig, out: Path, s_path, groups_path) -> int:
    s_path = Path(s_path) if s_path is not None else cfg.path("model", "S")
    if s_path is None:
        raise ConfigError("no S matrix given: pass --s or set [model] S")
    S = read_matrix(s_path)
    T = S.shape[1]
    if groups_path is not None:
        groups = read_groups(groups_path, T)
    elif cfg.parser.has_section("groups"):
        groups = cfg.groups("groups", _Shape(T), None, 0)
    else:
        groups = None
    _prepare_out(out)
    write_matrix(np.abs(S), out / "S_abs.csv")
    pixels = pgm_pixels(S)
    _write(out / "S.pgm", format_pgm(pixels))
    top = float(np.max(np.abs(S))) if S.size else 0.0
    lines = [f"rows = {S.shape[0]}", f"cols = {T}", f"max_abs = {top!r}",
             "normalization = pixel = round(255 * |S| / max|S|), zero -> 0 (black)"]
    if top == 0:
        warnings.warn("S is identically zero; the image is blank", stacklevel=2)
        lines.append("error = S is identically zero; support statistics undefined")
    elif groups is None:
        lines.append("error = no groups given; support statistics skipped")
    else:
        try:
            within, across = support_similarity(S, groups)
            lines += [f"within = {within!r}", f"across = {across!r}",
                      f"difference = {within - across!r}"]
        except (ConfigError, DataError) as err:
            lines.append(f"error = {err}")
    _write(out / "stats.txt", "\n".join(lines) + "\n")
    return EXIT_OK


class _Shape:
    # stand-in carrying only n_tasks for group sources that need no data
    def __init__(self, T):
        self.n_tasks = T


# --------------------------------------------------------------------------
# entry point


def _global_flags(parser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="INI config file")
    parser.add_argument("--out", default=default, help="output directory")
    parser.add_argument("--seed", type=int, default=default, help="seed (overrides the config)")
    parser.add_argument("--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False,
                        help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gsmtl", description="Group-structured latent multi-task learning.")
    parser.add_argument("--version", action="version", version=f"gsmtl {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset and groups file")
    sub.add_parser("fit", parents=[common], help="fit L and S; write matrices, trace and report")
    sub.add_parser("benchmark", parents=[common], help="grid-searched comparison table")
    exp = sub.add_parser("export-smatrix", parents=[common],
                         help="|S| as CSV, PGM heatmap and support statistics")
    exp.add_argument("--s", dest="s_path", default=None, help="S matrix CSV")
    exp.add_argument("--groups", dest="groups_path", default=None, help="groups file")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig.empty()
        if args.command == "export-smatrix":
            return cmd_export_smatrix(cfg, cfg.out_dir(args.out), args.s_path, args.groups_path)
        if args.config is None:
            raise ConfigError(f"{args.command} needs --config")
        out = cfg.out_dir(args.out)
        if args.command == "generate":
            return cmd_generate(cfg, out, cfg.seed(args.seed))
        if args.command == "fit":
            return cmd_fit(cfg, out, cfg.seed(args.seed))
        return cmd_benchmark(cfg, out, args.seed)
    except ConfigError as err:
        print(f"gsmtl: configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DimensionError) as err:
        print(f"gsmtl: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except ConvergenceError as err:
        print(f"gsmtl: convergence failure: {err}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except GSMTLError as err:
        print(f"gsmtl: error: {err}", file=sys.stderr)
        return EXIT_CONFIG


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
