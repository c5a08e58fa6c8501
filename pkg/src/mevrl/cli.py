"""``mevrl`` command line: one subcommand per experiment, CSV output.

Exit codes: 0 success, 2 configuration/usage error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import re
import sys
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import COMMON, ConfigError, Param, parse_overrides, read_config_file, resolve

# ---------------------------------------------------------------------------
# parameter tables
# ---------------------------------------------------------------------------

IID_DEFAULT = "me cve we te:0.05 te:0.10 te:0.15 ke:gauss:1"
TAB_ALGOS = ("q", "doubleq", "teq", "keq", "weq")

PARAMS: dict[str, tuple[Param, ...]] = {
    "iid-sweep": (
        Param("means", str, "0,0", "comma-separated means; the first is replaced by each gap value"),
        Param("sigma_sq", float, 100.0, "common variance"),
        Param("n", int, 100, "observations per variable"),
        Param("gap_lo", float, 0.0, "first value of mu1"),
        Param("gap_hi", float, 5.0, "last value of mu1"),
        Param("gap_points", int, 11, "number of mu1 values"),
        Param("estimators", str, IID_DEFAULT, "space-separated estimator ids"),
        Param("known_variance", bool, False, "feed the true variance to TE/KE/WE"),
    ),
    "noniid": (
        Param("rho", float, 0.0, "AR(1) coefficient"),
        Param("tau", float, 0.1, "exponential averaging rate"),
        Param("horizon", int, 100, "time steps T"),
        Param("mu", str, "1,0", "comma-separated true means"),
        Param("sigma_sq", float, 100.0, "stationary variance"),
        Param("estimators", str, "me de te:0.1 ke:gauss:1", "space-separated estimator ids"),
        Param("kde", bool, True, "also write kernel density curves"),
    ),
    "ads": (
        Param("n_customers", int, 0, "customers N; 0 runs the six-configuration grid"),
        Param("n_ads", int, 5, "number of ads M"),
        Param("hi", float, 0.05, "upper end of the click-rate interval"),
        Param("lo", float, 0.02, "lower end of the click-rate interval"),
        Param("estimators", str, "me de cve we te:0.1 ke:gauss:1", "space-separated estimator ids"),
    ),
    "analytic": (
        Param("mu1", float, 0.0, "mean of the first variable"),
        Param("mu2", float, 0.0, "mean of the second variable"),
        Param("var", float, 100.0, "common known variance"),
        Param("n", int, 100, "sample size of both variables"),
        Param("estimators", str, "me cve te:0.05 te:0.10 te:0.15 ke:gauss:1",
              "space-separated estimator ids"),
    ),
    "fit-kernel": (
        Param("family", str, "te", "kernel family", ("te", "gauss", "beta")),
        Param("gap_points", int, 51, "points in the gap grid"),
        Param("gap_hi", float, 5.0, "largest gap"),
        Param("sigma_sq", float, 100.0, "common known variance"),
        Param("n", int, 100, "sample size of both variables"),
    ),
    "simple-mdp": (
        Param("algo", str, "q", "learning algorithm", TAB_ALGOS),
        Param("alpha", float, 0.05, "TE significance level"),
        Param("kernel", str, "gauss:1", "KE kernel"),
        Param("gamma", float, 1.0, "discount factor"),
        Param("epsilon", float, 0.1, "exploration rate"),
        Param("tau", float, 0.1, "learning rate"),
        Param("episodes", int, 500, "episodes per run"),
        Param("per_run", bool, False, "write one row per run and episode"),
        Param("smooth", float, 0.0, "exponential smoothing weight for an extra smoothed file"),
    ),
    "cliff": (
        Param("algo", str, "q", "learning algorithm", TAB_ALGOS),
        Param("alpha", float, 0.05, "TE significance level"),
        Param("kernel", str, "gauss:1", "KE kernel"),
        Param("gamma", float, 1.0, "discount factor"),
        Param("exploration", str, "annealed", "epsilon schedule", ("constant", "annealed")),
        Param("epsilon", float, 0.1, "constant exploration rate"),
        Param("learning_rate", str, "poly", "learning-rate schedule", ("constant", "poly")),
        Param("tau", float, 0.1, "constant learning rate"),
        Param("episodes", int, 3000, "episodes per run"),
        Param("per_run", bool, False, "write one row per run and episode"),
        Param("smooth", float, 0.0, "exponential smoothing weight for an extra smoothed file"),
    ),
    "deep-train": (
        Param("env", str, "cliff", "environment", ("cliff", "maxbias")),
        Param("variant", str, "te-bdqn", "algorithm",
              ("dqn", "ddqn", "bdqn", "te-bdqn", "ke-bdqn", "ada-te-bdqn")),
        Param("alpha", float, 0.25, "TE significance level (initial value for Ada)"),
        Param("kernel", str, "gauss:1", "KE kernel"),
        Param("heads", int, 10, "bootstrap heads K"),
        Param("steps", int, 200_000, "environment steps"),
        Param("eval_every", int, 10_000, "steps between evaluations"),
        Param("lr", float, 1e-3, "Adam learning rate"),
        Param("target_period", int, 1000, "steps between target syncs"),
        Param("min_buffer", int, 5000, "replay fill before training"),
        Param("buffer_size", int, 100_000, "replay capacity"),
        Param("batch_size", int, 32, "minibatch size"),
        Param("gamma", float, 0.99, "discount factor"),
        Param("tau_ada", float, 1e-4, "alpha step size"),
        Param("t_ada", int, 32, "alpha roll-out length"),
        Param("checkpoint", str, "", "write final parameters of the last run here"),
        Param("smooth", float, 0.0, "exponential smoothing weight for an extra smoothed file"),
    ),
    "estimate-bias": (
        Param("checkpoint", str, "", "parameter file written by deep-train"),
        Param("env", str, "cliff", "environment", ("cliff", "maxbias")),
        Param("episodes", int, 3, "greedy episodes per head"),
        Param("gamma", float, 0.99, "discount factor"),
        Param("max_steps", int, 200, "episode cap"),
    ),
}

DEFAULT_RUNS = {"iid-sweep": 100_000, "noniid": 100_000, "ads": 2000, "simple-mdp": 10_000,
                "cliff": 100, "deep-train": 1}


def _params(cmd: str) -> tuple[Param, ...]:
    common = tuple(Param(p.name, p.kind, DEFAULT_RUNS.get(cmd) if p.name == "runs" else p.default,
                         p.help) for p in COMMON)
    return common + PARAMS[cmd]


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _estimator_list(text: str):
    from .harness import parse_estimator
    items = [t for t in re.split(r"[\s;]+", text) if t]
    if not items:
        raise ConfigError("no estimators given")
    return [parse_estimator(t) for t in items]


def _kernel(text: str):
    from .kernels import parse_kernel
    return parse_kernel(text)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

class Output:
    """Collects tables; the main table goes to ``<cmd>-<stamp>.csv``."""

    def __init__(self):
        self.tables: dict[str, tuple[list, list]] = {}
        self.lines: list[str] = []

    def table(self, suffix: str, header: list, rows):
        self.tables[suffix] = (list(header), [list(r) for r in rows])

    def say(self, text: str):
        self.lines.append(text)


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def exp_smooth(values, weight: float) -> np.ndarray:
    x = np.asarray(values, dtype=float)
    out = np.empty_like(x)
    acc = x[0] if x.size else 0.0
    for i, v in enumerate(x):
        acc = weight * acc + (1.0 - weight) * v
        out[i] = acc
    return out


def _smoothed_table(out: Output, header, rows, weight, keys):
    if weight <= 0 or not rows:
        return
    cols = list(zip(*rows))
    new_cols = [exp_smooth(c, weight) if h in keys else c for h, c in zip(header, cols)]
    out.table("smoothed", header, zip(*new_cols))


# ---------------------------------------------------------------------------
# subcommands: each returns a zero-argument runner after validating inputs
# ---------------------------------------------------------------------------

def _metric_cells(r):
    return [r.estimator, r.bias, r.variance, r.mse, r.mc_standard_error, r.runs]


METRIC_HEADER = ["name", "bias", "var", "mse", "se", "runs"]


def build_iid(c) -> Callable[[Output], None]:
    from .harness import IidSweepConfig, run_iid_sweep
    means = _floats(c["means"])
    if c["gap_points"] < 1:
        raise ConfigError("gap_points must be positive")
    grid = tuple(float(g) for g in np.linspace(c["gap_lo"], c["gap_hi"], c["gap_points"]))
    cfg = IidSweepConfig(len(means), means, c["sigma_sq"], (c["n"],) * len(means), grid,
                         c["runs"], c["seed"], c["known_variance"])
    specs = _estimator_list(c["estimators"])

    def run(out: Output):
        points = run_iid_sweep(cfg, specs, jobs=c["jobs"])
        out.table("", ["mu1"] + METRIC_HEADER,
                  ([p.mu1] + _metric_cells(r) for p in points for r in p.rows))
    return run


def build_noniid(c):
    from .harness import ArConfig, run_noniid_experiment
    cfg = ArConfig(c["rho"], c["tau"], c["horizon"], _floats(c["mu"]), c["sigma_sq"], c["runs"],
                   c["seed"])
    specs = _estimator_list(c["estimators"])

    def run(out: Output):
        values, rows, kdes = run_noniid_experiment(cfg, specs, jobs=c["jobs"], with_kde=c["kde"])
        out.table("", METRIC_HEADER + ["mean"], (_metric_cells(r) + [r.mean] for r in rows))
        for name, (x, f) in kdes.items():
            out.table("kde-" + re.sub(r"[^A-Za-z0-9.]+", "_", name).strip("_"), ["x", "density"],
                      zip(x, f))
    return run


def build_ads(c):
    from .harness import AdsConfig, default_ads_grid, run_internet_ads
    if c["n_customers"] == 0:
        configs = default_ads_grid(c["runs"], c["seed"])
    else:
        configs = [AdsConfig(c["n_customers"], c["n_ads"], c["hi"], c["lo"], c["runs"], c["seed"])]
    specs = _estimator_list(c["estimators"])

    def run(out: Output):
        rows = []
        for cfg in configs:
            for r in run_internet_ads(cfg, specs, jobs=c["jobs"]):
                rows.append([cfg.n_customers, cfg.n_ads, cfg.hi] + _metric_cells(r))
        out.table("", ["N", "M", "hi"] + METRIC_HEADER, rows)
    return run


def build_analytic(c):
    from . import analytic as an
    from .kernels import IndicatorAlpha
    if c["var"] <= 0 or c["n"] < 1:
        raise ConfigError("var must be positive and n >= 1")
    cfg = an.TwoGaussianConfig(c["mu1"], c["mu2"], c["var"], c["n"], c["n"])
    specs = _estimator_list(c["estimators"])

    def moments(spec):
        if spec.kind == "me":
            return an.me_moments_two_gaussians(cfg)
        if spec.kind == "ae":
            return an.ae_moments_two_gaussians(cfg)
        if spec.kind == "cve":
            return an.cve_moments_two_gaussians(cfg)
        if spec.kind == "te":
            return an.ke_moments_two_gaussians(cfg, IndicatorAlpha(spec.alpha))
        if spec.kind == "ke":
            return an.ke_moments_two_gaussians(cfg, spec.kernel)
        raise ConfigError(f"no analytic form for {spec.name}")

    def run(out: Output):
        rows = []
        for spec in specs:
            if spec.kind == "cve" and c["n"] < 2:
                print(f"warning: skipping {spec.name}, needs n >= 2", file=sys.stderr)
                continue
            m = moments(spec)
            rows.append([spec.name, m.expectation, m.variance, m.expectation - cfg.mev])
            out.say(f"{spec.name:>14s}  expectation {m.expectation:.6f}  variance "
                    f"{m.variance:.6f}  bias {m.expectation - cfg.mev:+.6f}")
        out.table("", ["name", "expectation", "variance", "bias"], rows)
    return run


def build_fit(c):
    from . import analytic as an
    grid = an.default_gap_grid(c["gap_points"], c["gap_hi"])
    base = an.TwoGaussianConfig(0.0, 0.0, c["sigma_sq"], c["n"], c["n"])

    def run(out: Output):
        fit = an.fit_min_bias_kernel(c["family"], grid, base)
        params = " ".join(f"{k}={v:.6g}" for k, v in fit.params.items())
        out.say(f"{c['family']}: {params}  objective {fit.objective:.6g}")
        out.table("", ["family", "param", "value", "objective"],
                  ([c["family"], k, v, fit.objective] for k, v in fit.params.items()))
    return run


def _tabular_cfg(c, **extra):
    from .tabular import TabularConfig
    if c["algo"] == "teq" and not (0.0 < c["alpha"] <= 0.5):
        raise ConfigError("alpha must lie in (0, 0.5]")
    kernel = _kernel(c["kernel"]) if c["algo"] == "keq" else None
    return TabularConfig(c["algo"], c["alpha"], kernel, c["gamma"], epsilon=c["epsilon"],
                         tau=c["tau"], episodes=c["episodes"], **extra)


def _tabular_output(out: Output, log, c, summary_cols):
    if c["per_run"]:
        rows = list(log.rows())
        header = list(rows[0]) if rows else []
        out.table("", header, (list(r.values()) for r in rows))
        return
    header = ["episode"] + [name for name, _ in summary_cols]
    cols = [np.arange(1, log.episodes + 1)] + [fn(log) for _, fn in summary_cols]
    rows = list(zip(*cols))
    out.table("", header, rows)
    _smoothed_table(out, header, rows, c["smooth"], set(header[1:]))


def build_simple_mdp(c):
    from .envs import MaxBiasMDP
    from .tabular import train_tabular
    cfg = _tabular_cfg(c)
    if c["runs"] < 1:
        raise ConfigError("runs must be positive")

    def run(out: Output):
        log = train_tabular(MaxBiasMDP(), cfg, c["runs"], c["seed"], retained_state=MaxBiasMDP.B)
        _tabular_output(out, log, c, [
            ("left_fraction", lambda l: l.left_fraction()),
            ("q_a_left", lambda l: l.q_start_first.mean(axis=0)),
            ("retained_b", lambda l: l.retained.mean(axis=0)),
            ("return", lambda l: l.returns.mean(axis=0)),
        ])
    return run


def build_cliff(c):
    from .envs import CliffWalk
    from .tabular import train_tabular
    cfg = _tabular_cfg(c, exploration=c["exploration"], learning_rate=c["learning_rate"])
    if c["runs"] < 1:
        raise ConfigError("runs must be positive")

    def run(out: Output):
        log = train_tabular(CliffWalk(), cfg, c["runs"], c["seed"])
        _tabular_output(out, log, c, [
            ("return", lambda l: l.returns.mean(axis=0)),
            ("q_start_max", lambda l: l.q_start.mean(axis=0)),
            ("length", lambda l: l.lengths.mean(axis=0)),
        ])
    return run


def build_deep(c):
    from .deep import DeepConfig, train_deep
    from .envs import make_env
    kernel = _kernel(c["kernel"]) if c["variant"] == "ke-bdqn" else None
    cfg = DeepConfig(c["variant"], c["alpha"], kernel, c["heads"], batch_size=c["batch_size"],
                     gamma=c["gamma"], target_period=c["target_period"],
                     buffer_size=c["buffer_size"], min_buffer=c["min_buffer"],
                     learning_rate=c["lr"], total_steps=c["steps"], eval_every=c["eval_every"],
                     tau_ada=c["tau_ada"], t_ada=c["t_ada"])
    if c["runs"] < 1:
        raise ConfigError("runs must be positive")

    def run(out: Output):
        rows = []
        agent = None
        for r in range(c["runs"]):
            log, agent = train_deep(make_env(c["env"]), cfg, seed=c["seed"] + r, return_agent=True)
            rows += [[r] + list(row.values()) for row in log.rows()]
        header = ["run", "step", "eval_return", "bias_estimate", "alpha", "loss"]
        out.table("", header, rows)
        if c["runs"] == 1:
            _smoothed_table(out, header, rows, c["smooth"], {"eval_return", "bias_estimate"})
        if c["checkpoint"] and agent is not None:
            agent.net.save(c["checkpoint"])
            out.say(f"checkpoint written to {c['checkpoint']}")
    return run


def build_estimate_bias(c):
    from .deep import estimate_bias
    from .envs import make_env
    from .nn import EnsembleNet
    if not c["checkpoint"]:
        raise ConfigError("--checkpoint is required")
    if not Path(c["checkpoint"]).exists():
        raise ConfigError(f"checkpoint not found: {c['checkpoint']}")

    def run(out: Output):
        env = make_env(c["env"])
        net = EnsembleNet.load(c["checkpoint"])
        if net.layer_sizes[0] != env.n_states:
            raise RuntimeError("checkpoint input width does not match the environment")
        q = net(env.encode_batch(np.arange(env.n_states)))
        q = np.where(env.action_mask()[:, None, :], q, -1e300)
        rng = np.random.default_rng(c["seed"])
        bias = estimate_bias([q[:, k] for k in range(net.heads)], env, c["episodes"], c["gamma"],
                             c["max_steps"], rng)
        out.say(f"estimated bias {bias:.6f}")
        out.table("", ["checkpoint", "heads", "bias"], [[c["checkpoint"], net.heads, bias]])
    return run


BUILDERS = {
    "iid-sweep": build_iid,
    "noniid": build_noniid,
    "ads": build_ads,
    "analytic": build_analytic,
    "fit-kernel": build_fit,
    "simple-mdp": build_simple_mdp,
    "cliff": build_cliff,
    "deep-train": build_deep,
    "estimate-bias": build_estimate_bias,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mevrl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mevrl {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True
    for cmd in BUILDERS:
        p = sub.add_parser(cmd, help=f"run the {cmd} experiment")
        p.add_argument("--config", help="INI file with a [%s] section, or a resolved JSON" % cmd)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any key")
        for param in _params(cmd):
            extra = {"choices": param.choices} if param.choices else {}
            p.add_argument(param.flag, dest=param.name, default=None, help=param.help,
                           metavar=param.kind.__name__.upper(), **extra)
    return parser


def _output_dir(value: str | None) -> Path:
    return Path(value or os.environ.get("MEVRL_OUT") or "mevrl-out")


def _stamp_path(outdir: Path, cmd: str) -> Path:
    stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
    path = outdir / f"{cmd}-{stamp}.csv"
    i = 1
    while path.exists():
        path = outdir / f"{cmd}-{stamp}-{i}.csv"
        i += 1
    return path


def resolved_record(cmd: str, values: dict) -> dict:
    record = {"subcommand": cmd, "version": __version__}
    record.update({k: v for k, v in values.items() if k != "out"})
    return record


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    cmd = args.command
    params = _params(cmd)
    try:
        file_values = read_config_file(args.config, cmd) if args.config else {}
        flags = parse_overrides(args.set)
        flags.update({p.name: getattr(args, p.name) for p in params
                      if getattr(args, p.name) is not None})
        values = resolve(params, file_values, flags)
        runner = BUILDERS[cmd](values)
    except (ConfigError, ValueError) as exc:
        print(f"mevrl {cmd}: error: {exc}", file=sys.stderr)
        return 2

    out = Output()
    try:
        runner(out)
        outdir = _output_dir(values["out"])
        outdir.mkdir(parents=True, exist_ok=True)
        main_path = _stamp_path(outdir, cmd)
        for suffix, (header, rows) in out.tables.items():
            path = main_path if not suffix else main_path.with_name(
                f"{main_path.stem}-{suffix}.csv")
            write_csv(path, header, rows)
        record = resolved_record(cmd, values)
        (outdir / "resolved-config.json").write_text(json.dumps(record, indent=2, sort_keys=True)
                                                     + "\n")
    except Exception as exc:  # runtime failure
        print(f"mevrl {cmd}: failed: {exc}", file=sys.stderr)
        return 1
    for line in out.lines:
        print(line)
    print(f"wrote {main_path}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
