"""Command-line experiment runner.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .config import ExperimentConfig, TOMLDecodeError, TargetSpec, load_config
from .errors import NumericalError
from .evaluation import (
    empirical_distribution,
    per_target_means,
    run_comparison,
    method_samples,
    to_clean,
)
from .guidance import tempered_target
from .smc import SmcConfig, run_smc, uniform_grid
from .verify import run_suite

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3, 4
THREADS_ENV = "DDSMC_THREADS"


class ConfigError(Exception):
    pass


def resolve_threads(flag: int | None, config_value: int) -> int:
    """--threads beats DDSMC_THREADS beats the config file; 0 means all cores."""
    value = config_value
    env = os.environ.get(THREADS_ENV)
    if env is not None:
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if flag is not None:
        value = flag
    if value < 0:
        raise ConfigError("thread count must be non-negative")
    return value or (os.cpu_count() or 1)


def _load(args) -> ExperimentConfig:
    if args.config is None:
        config = ExperimentConfig()
    else:
        try:
            config = load_config(args.config)
        except (TOMLDecodeError, ValidationError) as err:
            raise ConfigError(f"{args.config}: {err}") from None
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        config = config.model_copy(update={"seed": args.seed})
    return config


def _metadata(config: ExperimentConfig, command: str, threads: int) -> dict:
    return {
        "command": command,
        "config_hash": config.digest(),
        "seed": config.seed,
        "threads": threads,
        "config": config.model_dump(mode="json"),
    }


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _csv_text(meta: dict, header: list[str], rows) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={meta['config_hash']} seed={meta['seed']} command={meta['command']}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _write_table(out: Path, stem: str, fmt: str, meta: dict, header: list[str], rows) -> Path:
    rows = [list(r) for r in rows]
    if fmt == "json":
        path = out / f"{stem}.json"
        path.write_text(_dump_json({"metadata": meta,
                                    "rows": [dict(zip(header, r)) for r in rows]}),
                        encoding="utf-8")
    else:
        path = out / f"{stem}.csv"
        path.write_text(_csv_text(meta, header, rows), encoding="utf-8")
    return path


def _fmt(x: float) -> str:
    return repr(float(x))


def _require_target(config: ExperimentConfig) -> TargetSpec:
    if config.target is None:
        raise ConfigError("this command needs a [target] section")
    return config.target


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_verify(args, out: Path) -> int:
    results = run_suite(fault=args.inject_fault)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:32s} {r.detail}")
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    if args.out is not None:
        report = {"properties": [{"name": r.name, "ok": r.ok, "detail": r.detail}
                                 for r in results]}
        (out / "verify.json").write_text(_dump_json(report), encoding="utf-8")
    if failed:
        print(f"first failure: {failed[0].name}: {failed[0].detail}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_sample(args, out: Path) -> int:
    config = _load(args)
    threads = resolve_threads(args.threads, config.threads)
    spec = _require_target(config)
    model, corruption = spec.build(config.seed)
    s = config.smc
    smc_config = SmcConfig(s.num_particles, tuple(uniform_grid(s.steps)), s.alpha, s.beta,
                           s.proposal, s.ess_threshold, s.resampler, s.partial_size,
                           config.seed, threads)
    result = run_smc(smc_config, model, corruption)
    ens = result.ensemble
    meta = _metadata(config, "sample", threads)
    tokens = corruption.space.digits[ens.states]
    header = ["particle_id"] + [f"x{i}" for i in range(spec.num_dims)] + ["weight"]
    rows = ([i, *map(int, tok), _fmt(w)] for i, (tok, w) in enumerate(zip(tokens, ens.weights())))
    samples = _write_table(out, "samples", args.format, meta, header, rows)
    diagnostics = {
        "metadata": meta,
        "mask_token": corruption.space.mask_token,
        "ess_trace": [float(v) for v in result.ess_trace],
        "resample_events": list(result.resample_events),
    }
    (out / "diagnostics.json").write_text(_dump_json(diagnostics), encoding="utf-8")
    print(f"wrote {samples} and {out / 'diagnostics.json'}")
    return EXIT_OK


def cmd_table1(args, out: Path) -> int:
    config = _load(args)
    threads = resolve_threads(args.threads, config.threads)
    t = config.table1
    meta = _metadata(config, "table1", threads)
    summary, raw = [], []
    for num_dims, vocab_size in t.rows:
        results = run_comparison(num_dims, vocab_size, t.alphas, t.num_targets, t.num_samples,
                                 t.steps, ("smc", "guided"), config.seed, t.epsilon, t.spread,
                                 t.likelihood_range, t.beta, t.resampler, threads)
        smc, guided = per_target_means(results, "smc"), per_target_means(results, "guided")
        summary.append([num_dims, vocab_size, _fmt(smc.mean()), _fmt(smc.std()),
                        _fmt(guided.mean()), _fmt(guided.std()),
                        int((smc < guided).sum()), len(smc)])
        raw.extend([r.dimension, r.vocab_size, r.target_id, r.alpha, r.method, _fmt(r.kl),
                    r.sample_count, r.steps, r.seed] for r in results)
        print(f"dim={num_dims} V={vocab_size}: KL smc {smc.mean():.4f} +- {smc.std():.4f}, "
              f"guided {guided.mean():.4f} +- {guided.std():.4f}")
    head = ["dimension", "vocab_size", "kl_smc_mean", "kl_smc_std", "kl_guided_mean",
            "kl_guided_std", "targets_smc_better", "targets"]
    path = _write_table(out, "table1", args.format, meta, head, summary)
    raw_head = ["dimension", "vocab_size", "target_id", "alpha", "method", "kl", "samples",
                "steps", "seed"]
    raw_path = _write_table(out, "table1_trials", args.format, meta, raw_head, raw)
    print(f"wrote {path} and {raw_path}")
    return EXIT_OK


def cmd_figure_data(args, out: Path) -> int:
    config = _load(args)
    threads = resolve_threads(args.threads, config.threads)
    spec = _require_target(config)
    model, corruption = spec.build(config.seed)
    f = config.figure
    target = tempered_target(model, f.alpha)
    columns = {}
    for method in ("guided", "smc"):
        extra = {"beta": f.beta, "threads": threads} if method == "smc" else {}
        states, weights = method_samples(method, model, corruption, f.alpha, f.num_samples,
                                         f.steps, config.seed, **extra)
        clean = to_clean(states, corruption)
        keep = clean >= 0
        w = None if weights is None else weights[keep]
        columns[method] = empirical_distribution(clean[keep], corruption.clean_space, 0.0, w)
    meta = _metadata(config, "figure-data", threads)
    digits = corruption.clean_space.digits
    header = ["state"] + [f"x{i}" for i in range(spec.num_dims)] + ["target", "guided", "smc"]
    rows = ([x, *map(int, digits[x]), _fmt(target[x]), _fmt(columns["guided"][x]),
             _fmt(columns["smc"][x])] for x in range(target.size))
    path = _write_table(out, "figure", args.format, meta, header, rows)
    tv = {m: 0.5 * float(np.abs(columns[m] - target).sum()) for m in columns}
    print(f"TV to target: guided {tv['guided']:.4f}, smc {tv['smc']:.4f}; wrote {path}")
    return EXIT_OK


COMMANDS = {
    "verify": cmd_verify,
    "sample": cmd_sample,
    "table1": cmd_table1,
    "figure-data": cmd_figure_data,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML experiment file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, help="output directory (default: current)")
    common.add_argument("--threads", type=int,
                        help=f"worker threads, 0 = all cores (overrides ${THREADS_ENV})")
    common.add_argument("--format", choices=("csv", "json"), default="csv",
                        help="format of tabular outputs")
    parser = argparse.ArgumentParser(prog="ddsmc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    verify = sub.add_parser("verify", parents=[common], help="run the structural check suite")
    verify.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    sub.add_parser("sample", parents=[common], help="run SMC and write weighted particles")
    sub.add_parser("table1", parents=[common], help="KL comparison of SMC and guidance")
    sub.add_parser("figure-data", parents=[common], help="per-state masses for plotting")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    out = args.out or Path(".")
    try:
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, out)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        # Model-level validation (e.g. a likelihood vanishing on the support of p0).
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
