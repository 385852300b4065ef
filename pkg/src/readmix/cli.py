"""Command-line interface: ``readmix {fit,compare,simulate,diagnose}``.

Settings come from built-in defaults, then an optional ``--config`` JSON
file, then explicit flags.  The fully resolved configuration is written
next to every output (``config.json``) and embedded in the JSON outputs,
so ``readmix <cmd> --config OUT/config.json --out OTHER`` reproduces a run
byte for byte.

Exit codes: 0 success, 1 usage or I/O error, 2 fit-quality warning.

``loglik.bin`` layout (little-endian): 4-byte magic ``RMLL``, uint32
format version, uint32 draws S, uint32 trials N, then S*N float64 values
in row-major (draw, trial) order with chains concatenated.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import shutil
import struct
import sys
import tempfile
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diagnostics
from .data import DataError, load_csv, write_csv
from .loo import KHAT_BAD, compare_all, elpd_loo, format_table
from .models import Family, ModelSpec, PriorConfig, diffprob
from .sampler import SamplerConfig, sample
from .simulate import TABLE_PAIRS, Design, TrueParams, simulate_with_latent

RHAT_WARN = 1.05
LOGLIK_MAGIC = b"RMLL"
LOGLIK_VERSION = 1
_HEADER = struct.Struct("<4sIII")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FIT_WARNING = 2

DEFAULT_TRUTH = {
    Family.STANDARD: dict(beta_1=6.0, beta_2=-0.03, sigma_e=0.35, sigma_u=0.2, sigma_w=0.1),
    Family.HOMOGENEOUS: dict(beta=6.0, delta=0.3, prob_hi=0.35, prob_lo=0.15,
                             sigma_e=0.35, sigma_u=0.2, sigma_w=0.1),
    Family.HETEROGENEOUS: dict(beta=6.0, delta=0.3, prob_hi=0.35, prob_lo=0.15,
                               sigma_e=0.35, sigmap_e=0.6, sigma_u=0.2, sigma_w=0.1),
    Family.PERCOLATION: dict(beta=6.0, gamma=-0.2, prob_perc=0.3,
                             sigma_e=0.35, sigma_u=0.2, sigma_w=0.1),
}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Resolved settings of one command.  ``out`` is where outputs go and is
    deliberately not part of the echoed configuration."""

    command: str
    model: str | None = None
    data: str | None = None
    seed: int = 0
    chains: int = 4
    warmup: int = 1000
    draws: int = 1000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    jobs: int = 1
    plot: bool = False
    priors: dict = field(default_factory=dict)
    fits: list = field(default_factory=list)
    subjects: int = 40
    items: int = 24
    trials_per_cell: int = 1
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def sampler_config(self):
        return SamplerConfig(n_chains=self.chains, n_warmup=self.warmup, n_draws=self.draws,
                             target_accept=self.target_accept,
                             max_tree_depth=self.max_tree_depth, seed=self.seed,
                             n_jobs=self.jobs)

    def prior_config(self):
        return PriorConfig(**self.priors)


_CONFIG_FIELDS = {f.name for f in fields(RunConfig)}


def resolve_config(command, args):
    """Defaults <- JSON config file <- flags that were given explicitly."""
    values = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        loaded = loaded.get("config", loaded)
        unknown = set(loaded) - _CONFIG_FIELDS
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if loaded.get("command", command) != command:
            raise UsageError(f"config is for '{loaded['command']}', not '{command}'")
        values.update(loaded)
    for name in _CONFIG_FIELDS:
        flag = getattr(args, name, None)
        if flag is not None and flag != []:
            values[name] = flag
    if getattr(args, "param", None):
        values["params"] = {**values.get("params", {}), **_parse_params(args.param)}
    values["command"] = command
    cfg = RunConfig(**values)
    try:
        cfg.sampler_config()
        cfg.prior_config()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    if cfg.model is not None:
        try:
            cfg.model = Family(cfg.model).value
        except ValueError:
            raise UsageError(f"unknown model {cfg.model!r}") from None
    return cfg


def _parse_params(items):
    out = {}
    for item in items:
        name, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--param expects NAME=VALUE, got {item!r}")
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise UsageError(f"--param {name} needs a number, got {value!r}") from None
    return out


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


class _Staging:
    """Write outputs into a scratch directory and move them into place only
    once every file has been produced."""

    def __init__(self, out):
        self.out = Path(out)

    def __enter__(self):
        parent = self.out.parent
        parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".readmix-", dir=parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                self.out.mkdir(parents=True, exist_ok=True)
                for item in sorted(self.tmp.iterdir()):
                    os.replace(item, self.out / item.name)
        finally:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def write_loglik(path, ll):
    ll = np.ascontiguousarray(ll, dtype="<f8")
    s, n = ll.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(LOGLIK_MAGIC, LOGLIK_VERSION, s, n))
        fh.write(ll.tobytes())


def read_loglik(path):
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise DataError(f"{path}: truncated header")
        magic, version, s, n = _HEADER.unpack(header)
        if magic != LOGLIK_MAGIC:
            raise DataError(f"{path}: not a log-likelihood file")
        if version != LOGLIK_VERSION:
            raise DataError(f"{path}: unsupported format version {version}")
        body = fh.read()
    if len(body) != 8 * s * n:
        raise DataError(f"{path}: expected {s}x{n} values")
    return np.frombuffer(body, dtype="<f8").reshape(s, n)


def write_draws_csv(path, fit, extra=None):
    """Long format ``chain, iter, parameter, value`` with 1-based chain and iter."""
    names = list(fit.names)
    values = fit.values
    if extra:
        names += list(extra)
        values = np.concatenate([values] + [v[:, :, None] for v in extra.values()], axis=2)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("chain", "iter", "parameter", "value"))
        for c in range(values.shape[0]):
            for s in range(values.shape[1]):
                row = values[c, s]
                for k, name in enumerate(names):
                    writer.writerow((c + 1, s + 1, name, repr(float(row[k]))))


def plot_intervals(path, summary, names, title):
    """Forest plot of posterior medians with central 95% intervals."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "readmix", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5.0, 0.45 * len(names) + 1.2))
        ypos = np.arange(len(names))[::-1]
        for y, name in zip(ypos, names):
            row = summary[name]
            ax.plot([row["q2.5"], row["q97.5"]], [y, y], color="black", lw=1.5)
            ax.plot(row["median"], y, "o", color="black", ms=4)
        ax.axvline(0.0, color="grey", lw=0.8, ls=":")
        ax.set_yticks(ypos)
        ax.set_yticklabels(names)
        ax.set_xlabel("posterior median and 95% interval")
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def _quantity_summary(x):
    x = np.asarray(x, dtype=float)
    lo, med, hi = np.quantile(x, [0.025, 0.5, 0.975])
    try:
        r = diagnostics.rhat(x)
    except diagnostics.DiagnosticUnavailable:
        r = None
    try:
        e = diagnostics.ess(x)
    except diagnostics.DiagnosticUnavailable:
        e = math.nan
    return {
        "mean": float(x.mean()),
        "sd": float(x.std(ddof=1)) if x.size > 1 else 0.0,
        "q2.5": float(lo),
        "median": float(med),
        "q97.5": float(hi),
        "rhat": None if r is None or not math.isfinite(r) else float(r),
        "ess_bulk": None if not math.isfinite(e) else float(e),
    }


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_fit(args):
    cfg = resolve_config("fit", args)
    if cfg.model is None or cfg.data is None:
        raise UsageError("fit needs --model and --data")
    if not args.out:
        raise UsageError("fit needs --out")
    d = load_csv(cfg.data)
    spec = ModelSpec.for_data(cfg.model, d, cfg.prior_config())
    fit = sample(spec, d, cfg.sampler_config())

    params = {name: _quantity_summary(fit.get(name)) for name in spec.parameter_names}
    extra = {}
    if spec.family.is_overwriting:
        extra["diffprob"] = diffprob(fit, spec)
        params["diffprob"] = _quantity_summary(extra["diffprob"])
    random_effects = {name: _quantity_summary(fit.get(name))
                      for name in spec.draw_names[spec.n_named:]}

    hits = (fit.tree_depth >= fit.max_tree_depth).sum(axis=1)
    unconverged = sorted(
        name for name, row in {**params, **random_effects}.items()
        if row["rhat"] is not None and row["rhat"] > RHAT_WARN
    )
    summary = {
        "config": cfg.to_dict(),
        "model": spec.family.value,
        "data": {"path": cfg.data, "fingerprint": d.fingerprint(), "n_trials": len(d),
                 "n_subjects": d.n_subjects, "n_items": d.n_items,
                 "subject_labels": list(d.subject_labels),
                 "item_labels": list(d.item_labels)},
        "parameters": params,
        "random_effects": random_effects,
        "sampler": {
            "n_chains": fit.n_chains,
            "n_draws": fit.n_draws,
            "divergences": [int(x) for x in fit.divergences()],
            "warmup_divergences": [int(x) for x in fit.warmup_divergences],
            "max_tree_depth": fit.max_tree_depth,
            "tree_depth_hits": [int(x) for x in hits],
            "step_size": [float(x) for x in fit.step_size],
            "mean_accept_stat": [float(x) for x in fit.accept_stat.mean(axis=1)],
        },
        "converged": not unconverged,
        "warnings": [f"R-hat above {RHAT_WARN} for {name}" for name in unconverged],
    }
    with _Staging(args.out) as tmp:
        _dump_json(cfg.to_dict(), tmp / "config.json")
        _dump_json(summary, tmp / "summary.json")
        write_draws_csv(tmp / "draws.csv", fit, extra)
        write_loglik(tmp / "loglik.bin", fit.flat_loglik())
        if cfg.plot:
            names = list(params)
            plot_intervals(tmp / "intervals.svg", params, names, spec.family.value)

    _print_parameter_table(params)
    if unconverged:
        print("\nWARNING: the chains have not converged", file=sys.stderr)
        for line in summary["warnings"]:
            print(f"  {line}", file=sys.stderr)
        return EXIT_FIT_WARNING
    return EXIT_OK


def _print_parameter_table(params):
    print(f"{'parameter':<12}{'mean':>10}{'sd':>9}{'q2.5':>10}{'q97.5':>10}"
          f"{'rhat':>8}{'ess':>8}")
    for name, row in params.items():
        rhat = "n/a" if row["rhat"] is None else f"{row['rhat']:.3f}"
        ess = "n/a" if row["ess_bulk"] is None else f"{row['ess_bulk']:.0f}"
        print(f"{name:<12}{row['mean']:>10.4f}{row['sd']:>9.4f}{row['q2.5']:>10.4f}"
              f"{row['q97.5']:>10.4f}{rhat:>8}{ess:>8}")


def _load_fit_dir(path):
    path = Path(path)
    summary_path = path / "summary.json"
    loglik_path = path / "loglik.bin"
    for p in (summary_path, loglik_path):
        if not p.is_file():
            raise DataError(f"missing fit artifact {p}")
    with open(summary_path, encoding="utf-8") as fh:
        summary = json.load(fh)
    return summary, read_loglik(loglik_path)


def _loo_quiet(ll):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return elpd_loo(ll)


def cmd_compare(args):
    cfg = resolve_config("compare", args)
    if len(cfg.fits) < 2:
        raise UsageError("compare needs at least two fit directories")
    loaded = [_load_fit_dir(p) for p in cfg.fits]
    fingerprints = {s["data"]["fingerprint"] for s, _ in loaded}
    sizes = {ll.shape[1] for _, ll in loaded}
    if len(sizes) > 1 or len(fingerprints) > 1:
        raise DataError("datasets differ")

    labels = [s["model"] for s, _ in loaded]
    if len(set(labels)) < len(labels):
        labels = [f"{label}#{k + 1}" for k, label in enumerate(labels)]
    results = {label: _loo_quiet(ll) for label, (_, ll) in zip(labels, loaded)}
    if set(labels) <= {f.value for f in Family}:
        pairs = [(a.value, b.value) for a, b in TABLE_PAIRS
                 if a.value in results and b.value in results]
    else:
        pairs = None
    rows = compare_all(results, pairs)
    khat_counts = {label: r.n_bad_k for label, r in results.items()}
    print(format_table(rows, khat_counts))
    if args.out:
        report = {
            "config": cfg.to_dict(),
            "rows": [{"model_a": r.model_a, "model_b": r.model_b,
                      "elpd_diff": r.elpd_diff, "se_diff": r.se_diff} for r in rows],
            "models": {label: {"elpd_loo": r.elpd_loo, "se": r.se_elpd,
                               "n_khat_above": r.n_bad_k, "khat_max": float(r.khat.max())}
                       for label, r in results.items()},
        }
        with _Staging(args.out) as tmp:
            _dump_json(cfg.to_dict(), tmp / "config.json")
            _dump_json(report, tmp / "compare.json")
            (tmp / "compare.txt").write_text(format_table(rows, khat_counts) + "\n",
                                             encoding="utf-8")
    return EXIT_OK


def cmd_simulate(args):
    cfg = resolve_config("simulate", args)
    if cfg.model is None:
        raise UsageError("simulate needs --model")
    if not args.out:
        raise UsageError("simulate needs --out")
    family = Family(cfg.model)
    allowed = set(DEFAULT_TRUTH[family])
    unknown = set(cfg.params) - allowed
    if unknown:
        raise UsageError(f"{family.value} has no parameter {', '.join(sorted(unknown))}")
    try:
        truth = TrueParams(family, {**DEFAULT_TRUTH[family], **cfg.params})
        design = Design(cfg.subjects, cfg.items, cfg.trials_per_cell)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg.params = dict(truth.values)
    d, component = simulate_with_latent(family, truth, design, cfg.seed)
    report = {"config": cfg.to_dict(), "model": family.value, "truth": truth.truth(),
              "design": asdict(design), "seed": cfg.seed, "n_trials": len(d),
              "fingerprint": d.fingerprint()}
    with _Staging(args.out) as tmp:
        _dump_json(cfg.to_dict(), tmp / "config.json")
        write_csv(d, tmp / "data.csv")
        _dump_json(report, tmp / "truth.json")
        with open(tmp / "latent.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("trial", "condition", "component"))
            for k in range(len(d)):
                writer.writerow((k + 1, "+1" if d.condition[k] == 1 else "-1",
                                 int(component[k])))
    print(f"wrote {len(d)} trials to {Path(args.out) / 'data.csv'}")
    return EXIT_OK


def cmd_diagnose(args):
    if not args.fit_dir:
        raise UsageError("diagnose needs a fit directory")
    summary, ll = _load_fit_dir(args.fit_dir)
    params = summary["parameters"]
    _print_parameter_table(params)
    rows = list(params.values()) + list(summary.get("random_effects", {}).values())
    rhats = [r["rhat"] for r in rows if r["rhat"] is not None]
    sampler = summary["sampler"]
    n_draws = sampler["n_draws"]
    print()
    print(f"divergent transitions: {sum(sampler['divergences'])} "
          f"(per chain {sampler['divergences']})")
    hits = sampler["tree_depth_hits"]
    print(f"max tree depth {sampler['max_tree_depth']} reached in {sum(hits)} of "
          f"{n_draws * len(hits)} iterations (per chain {hits})")
    if rhats:
        print(f"largest R-hat: {max(rhats):.3f}")
    else:
        print("largest R-hat: n/a")

    loo = _loo_quiet(ll)
    k = loo.khat
    bins = [("k <= 0.5", k <= 0.5), ("0.5 < k <= 0.7", (k > 0.5) & (k <= KHAT_BAD)),
            ("0.7 < k <= 1", (k > KHAT_BAD) & (k <= 1)), ("k > 1", k > 1)]
    print(f"\nPareto k-hat over {k.size} trials:")
    for label, mask in bins:
        print(f"  {label:<16}{int(mask.sum()):>6}")
    print(f"elpd_loo: {loo.elpd_loo:.2f} (SE {loo.se_elpd:.2f})")
    if rhats and max(rhats) > RHAT_WARN:
        return EXIT_FIT_WARNING
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_sampler_flags(p):
    p.add_argument("--seed", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--draws", type=int)
    p.add_argument("--target-accept", dest="target_accept", type=float)
    p.add_argument("--max-tree-depth", dest="max_tree_depth", type=int)
    p.add_argument("--jobs", type=int, help="worker processes for chains")


def build_parser():
    models = [f.value for f in Family]
    parser = _Parser(prog="readmix", description="Mixture models of reading times.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit one model to a CSV of trials")
    p.add_argument("--model", choices=models)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--config")
    _add_sampler_flags(p)
    p.add_argument("--plot", action="store_const", const=True,
                   help="also write intervals.svg")

    p = sub.add_parser("compare", help="compare fits by PSIS-LOO")
    p.add_argument("fits", nargs="*")
    p.add_argument("--out")
    p.add_argument("--config")

    p = sub.add_parser("simulate", help="simulate a dataset from one model")
    p.add_argument("--model", choices=models)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--subjects", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--trials-per-cell", dest="trials_per_cell", type=int)
    p.add_argument("--param", action="append", metavar="NAME=VALUE",
                   help="true parameter value, repeatable")

    p = sub.add_parser("diagnose", help="convergence and k-hat report for a fit")
    p.add_argument("fit_dir", nargs="?")
    return parser


COMMANDS = {"fit": cmd_fit, "compare": cmd_compare, "simulate": cmd_simulate,
            "diagnose": cmd_diagnose}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, DataError, OSError) as exc:
        print(f"readmix {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
