"""Command line entry point: ``divforge {kl-gauss,mi-gauss,sweep-lambda} [--config FILE] [--key value ...]``.

Every option can also be given in a flat ``key = value`` config file (UTF-8,
``#`` starts a comment).  Flags override the file.  The fully resolved
configuration is written to ``config.echo`` in the output directory, and
passing that file back with ``--config`` reproduces the run.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .data import gaussian_pair_for_kl
from .harness import (
    AllRunsDivergedError,
    DiscriminatorConfig,
    TrainConfig,
    kl_iterations,
    lambda_sweep,
    mi_staircase,
    repeat_experiment,
    summary_dict,
    write_runs_csv,
    write_summary_json,
    write_sweep_csv,
)

log = logging.getLogger("divforge")

EXPERIMENTS = ("kl-gauss", "mi-gauss", "sweep-lambda")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_OUTPUT = 3
EXIT_DIVERGED = 4


class ConfigError(ValueError):
    pass


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _iterations(text: str):
    return "auto" if text.strip() == "auto" else int(text)


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _fmt_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class Option:
    parse: Callable[[str], object]
    help: str
    experiments: tuple[str, ...] = EXPERIMENTS


# key -> option; defaults live in DEFAULTS so they can differ per experiment
OPTIONS: dict[str, Option] = {
    "discriminator": Option(str, "plain-mlp or rkhs"),
    "target-kl": Option(float, "KL(p||q) of the Gaussian pair, in nats", ("kl-gauss", "sweep-lambda")),
    "dim": Option(int, "dimension of each Gaussian (of x and of y for MI)"),
    "mi-levels": Option(_float_list, "comma-separated true MI values", ("mi-gauss",)),
    "values": Option(_float_list, "comma-separated lambda grid", ("sweep-lambda",)),
    "runs": Option(int, "seeds per configuration"),
    "seed": Option(int, "base seed; run i uses seed + i"),
    "m": Option(int, "samples per distribution (MI: size of the evaluation pool)"),
    "minibatch": Option(int, "minibatch size"),
    "iterations": Option(_iterations, "optimizer steps per run; auto picks by experiment"),
    "learning-rate": Option(float, "Adam step size"),
    "lambda": Option(float, "weight of the g-norm penalty", ("kl-gauss", "mi-gauss")),
    "eval-every": Option(int, "steps between evaluations"),
    "final-window-fraction": Option(float, "fraction of evaluations averaged into a run's estimate"),
    "n-w-draws-eval": Option(int, "feature draws averaged per evaluation"),
    "hidden": Option(_int_list, "hidden widths of the plain net and of phi"),
    "feature-dim": Option(int, "output width of phi"),
    "g-hidden": Option(_int_list, "hidden widths of g"),
    "activation": Option(str, "relu or leaky-relu"),
    "lip-phi": Option(float, "per-layer spectral norm target in phi"),
    "lip-g": Option(float, "per-layer spectral norm target in g"),
    "gamma": Option(float, "feature scale"),
    "features": Option(int, "number of random features D"),
    "w-policy": Option(str, "resample or fixed"),
    "out": Option(str, "output directory"),
}

_COMMON = {
    "discriminator": "rkhs",
    "runs": 10,
    "seed": 0,
    "m": 2500,
    "eval-every": 50,
    "final-window-fraction": 0.1,
    "n-w-draws-eval": 10,
    "activation": "relu",
    "lip-phi": 5.0,
    "lip-g": 5.0,
    "features": 500,
    "w-policy": "resample",
    "out": "results",
}
_KL = {
    "target-kl": 1.3,
    "dim": 2,
    "minibatch": 50,
    "iterations": "auto",
    "learning-rate": 5e-3,
    "hidden": [20, 20, 20],
    "feature-dim": 10,
    "g-hidden": [20, 20, 20],
    "gamma": 1.0,
}
DEFAULTS = {
    "kl-gauss": {**_COMMON, **_KL, "lambda": 0.005},
    "sweep-lambda": {**_COMMON, **_KL, "target-kl": 13.8, "runs": 5, "values": [1e-4, 1e-3, 1e-2, 1e-1]},
    "mi-gauss": {
        **_COMMON,
        "runs": 3,
        "dim": 20,
        "mi-levels": [2.0, 4.0],
        "m": 2000,
        "minibatch": 64,
        "iterations": "auto",
        "learning-rate": 5e-3,
        "lambda": 1e-5,
        "hidden": [64, 64],
        "feature-dim": 64,
        "g-hidden": [5, 5, 5],
        "gamma": 5.0,
    },
}


def keys_for(experiment: str) -> list[str]:
    return [k for k, opt in OPTIONS.items() if experiment in opt.experiments]


def parse_config_text(text: str, experiment: str, source: str = "config") -> dict:
    """Parse flat ``key = value`` lines; unknown keys raise ConfigError naming the key."""
    allowed = set(keys_for(experiment))
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("_", "-")
        if key == "experiment":
            if value != experiment:
                raise ConfigError(f"{source}:{lineno}: config is for {value!r}, not {experiment!r}")
            continue
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r} ({source}:{lineno})")
        out[key] = _parse_value(key, value)
    return out


def _parse_value(key: str, value: str):
    try:
        return OPTIONS[key].parse(value)
    except ValueError:
        raise ConfigError(f"invalid value for {key!r}: {value!r}") from None


def echo_text(experiment: str, resolved: dict) -> str:
    lines = [f"experiment = {experiment}"]
    lines += [f"{k} = {_fmt_value(resolved[k])}" for k in keys_for(experiment)]
    return "\n".join(lines) + "\n"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="divforge", description="Discriminator-based KL and MI estimation experiments.")
    sub = parser.add_subparsers(dest="experiment", metavar="{" + ",".join(EXPERIMENTS) + "}")
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="flat key = value file; flags override it")
        for key in keys_for(name):
            default = DEFAULTS[name][key]
            p.add_argument(f"--{key}", dest=key, default=None, metavar="VALUE",
                           help=f"{OPTIONS[key].help} (default: {_fmt_value(default)})")
    return parser


def resolve(experiment: str, file_values: dict, flag_values: dict) -> dict:
    resolved = dict(DEFAULTS[experiment])
    resolved.update(file_values)
    for key, raw in flag_values.items():
        if raw is not None:
            resolved[key] = _parse_value(key, raw)
    if resolved["iterations"] == "auto":
        # 3000 or 20000 steps by divergence size for Gaussian pairs, 10000 for MI
        if experiment == "mi-gauss":
            resolved["iterations"] = 10000
        else:
            resolved["iterations"] = kl_iterations(resolved["target-kl"])
    return resolved


def _configs(experiment: str, r: dict) -> tuple[DiscriminatorConfig, TrainConfig]:
    try:
        dcfg = DiscriminatorConfig(
            kind=r["discriminator"],
            hidden=tuple(r["hidden"]),
            feature_dim=r["feature-dim"],
            g_hidden=tuple(r["g-hidden"]),
            activation=r["activation"],
            lip_phi=r["lip-phi"],
            lip_g=r["lip-g"],
            gamma=r["gamma"],
            D=r["features"],
            w_policy=r["w-policy"],
        )
        cfg = TrainConfig(
            m=r["m"],
            minibatch=r["minibatch"],
            iterations=r["iterations"],
            learning_rate=r["learning-rate"],
            lam=r.get("lambda", 0.0),
            seed=r["seed"],
            eval_every=r["eval-every"],
            final_window_fraction=r["final-window-fraction"],
            n_w_draws_eval=r["n-w-draws-eval"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if r["runs"] < 2:
        raise ConfigError("runs must be >= 2")
    if r["seed"] < 0:
        raise ConfigError("seed must be non-negative")
    return dcfg, cfg


def _prepare_out(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".divforge-write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise PermissionError(f"output directory {str(path)!r} is not writable: {exc}") from exc


def run_experiment(experiment: str, r: dict, out: Path) -> None:
    dcfg, cfg = _configs(experiment, r)
    n = r["runs"]
    if experiment == "kl-gauss":
        p, q = gaussian_pair_for_kl(r["target-kl"], r["dim"])
        summary, records = repeat_experiment(p, q, dcfg, cfg, n)
        write_runs_csv(records, out / "runs.csv")
        write_summary_json(summary_dict(summary, experiment, cfg.lam if dcfg.kind == "rkhs" else 0.0),
                           out / "summary.json")
        print(f"KL {r['target-kl']}: mean {summary.mean:.4f} variance {summary.variance:.4g} "
              f"bias {summary.bias:+.4f} diverged {summary.n_diverged}/{n}")
    elif experiment == "sweep-lambda":
        p, q = gaussian_pair_for_kl(r["target-kl"], r["dim"])
        points = lambda_sweep(p, q, dcfg, cfg, r["values"], n)
        path = out / "runs.csv"
        for i, pt in enumerate(points):
            write_runs_csv(pt.records, path, first_run_id=i * n, append=i > 0)
        write_sweep_csv(points, out / "sweep.csv")
        payload = {
            "experiment": experiment,
            "points": [
                {**summary_dict(pt.summary, experiment, pt.lam), "median_g_norm": pt.median_g_norm,
                 "run_ids": list(range(i * n, (i + 1) * n))}
                for i, pt in enumerate(points)
            ],
        }
        write_summary_json(payload, out / "summary.json")
        for pt in points:
            print(f"lambda {pt.lam:g}: mean {pt.summary.mean:.4f} variance {pt.summary.variance:.4g}")
    else:
        levels = mi_staircase(r["dim"], r["mi-levels"], dcfg, cfg, n)
        path = out / "runs.csv"
        for i, lv in enumerate(levels):
            write_runs_csv(lv.records, path, first_run_id=i * n, append=i > 0)
        payload = {
            "experiment": experiment,
            "levels": [
                {**summary_dict(lv.summary, experiment, cfg.lam if dcfg.kind == "rkhs" else 0.0),
                 "rho": lv.rho, "run_ids": list(range(i * n, (i + 1) * n))}
                for i, lv in enumerate(levels)
            ],
        }
        write_summary_json(payload, out / "summary.json")
        for lv in levels:
            print(f"MI {lv.true_mi:g}: mean {lv.summary.mean:.4f} variance {lv.summary.variance:.4g}")


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.experiment is None:
        parser.print_usage(sys.stderr)
        print("divforge: error: a subcommand is required", file=sys.stderr)
        return EXIT_CONFIG
    experiment = args.experiment
    try:
        file_values = {}
        if args.config:
            try:
                text = Path(args.config).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config file: {exc}") from None
            file_values = parse_config_text(text, experiment, args.config)
        flags = {k: vars(args).get(k) for k in keys_for(experiment)}
        resolved = resolve(experiment, file_values, flags)
        _configs(experiment, resolved)
    except ConfigError as exc:
        print(f"divforge: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(resolved["out"])
    try:
        _prepare_out(out)
    except PermissionError as exc:
        print(f"divforge: error: {exc}", file=sys.stderr)
        return EXIT_OUTPUT
    (out / "config.echo").write_text(echo_text(experiment, resolved), encoding="utf-8")
    try:
        run_experiment(experiment, resolved, out)
    except AllRunsDivergedError as exc:
        print(f"divforge: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        # too few surviving runs to summarize
        print(f"divforge: error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
