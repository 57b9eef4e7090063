"""Command-line interface: prediction regions, simulations and figure tables as CSV.

Every command writes a header row, data rows with reals at 9 significant
digits, then two comment lines::

    # config=key=value;key=value;...
    # rows=N seed=S

The ``config`` line lists every option, so feeding those pairs back through
``--config FILE`` (one ``key=value`` per line) reproduces the output.

Exit status: 0 on success, 2 on usage errors, 3 on numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import re
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from .conformal import ConformalConfig, NormalPrior, conformal_region, level_for_alpha
from .core import FabError
from .figures import FIGURES, figure_data
from .normal import NormalFabConfig, fab_interval_1d, fab_region_2d
from .regression import (
    RegressionFabConfig,
    equivariant_interval_reg,
    fab_interval_reg,
    fab_interval_reg_t,
    split_variance_estimates,
)
from .simulate import (
    ConformalProcedure,
    EstVarNormalProcedure,
    NormalProcedure,
    RegressionProcedure,
    estimate_coverage,
    estimate_risk,
)
from .specfun import DomainError

__all__ = ["main", "run", "build_parser", "UsageError"]

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    """Invalid option values detected after parsing."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- option types ------------------------------------------------------------


def _real(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def _positive_or_inf(text: str) -> float:
    val = math.inf if text.strip().lower() in ("inf", "infinity") else _real(text)
    if not val > 0:
        raise argparse.ArgumentTypeError("must be positive or 'inf'")
    return val


def _reals(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def _theta(text: str):
    return "prior" if text.strip() == "prior" else _reals(text)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Fraction):
        return f"{float(value):.9g}"
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.9g}"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _echo(value) -> str:
    # full precision so the trailer reproduces the run exactly
    if isinstance(value, (tuple, list)):
        return ",".join(_echo(v) for v in value)
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


# -- parser ----------------------------------------------------------------


def _common(p: argparse.ArgumentParser, seed=True):
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.add_argument("--config", help="file of key=value lines mirroring the options")
    if seed:
        p.add_argument("--seed", type=int, default=0)


def _normal_opts(p, p_dim: bool):
    p.add_argument("--k", type=_real, default=1.0, help="variance ratio of X to Y")
    p.add_argument("--sigma2", type=_reals, default=(1.0,),
                   help="scalar variance, or p*p matrix entries row by row")
    p.add_argument("--mu", type=_reals, default=(0.0,), help="prior mean (scalar broadcasts)")
    p.add_argument("--lambda", dest="lam", type=_positive_or_inf, default=1.0, help="prior variance factor or 'inf'")
    p.add_argument("--alpha", type=_real, default=0.1)
    if p_dim:
        p.add_argument("--p", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fabpred", description="FAB prediction regions with exact frequentist coverage.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("normal-interval", help="FAB interval for a scalar normal mean")
    p.add_argument("--x", type=_real, required=True)
    _normal_opts(p, p_dim=False)
    p.add_argument("--resolution", type=int, default=2048)
    _common(p, seed=False)

    p = sub.add_parser("normal-region2d", help="area of a bivariate FAB region")
    p.add_argument("--x", type=_reals, required=True, help="x1,x2")
    _normal_opts(p, p_dim=False)
    p.add_argument("--grid-n", type=int, default=512)
    _common(p, seed=False)

    p = sub.add_parser("regress-interval", help="FAB interval for a new regression response")
    p.add_argument("--design", required=True, help="CSV file with the n x p design matrix U")
    p.add_argument("--response", required=True, help="CSV file or comma list with the n responses")
    p.add_argument("--v", type=_reals, required=True, help="covariates of the new observation")
    p.add_argument("--tau2", type=_positive_or_inf, default=1.0, help="prior beta ~ N(0, tau2 I)")
    p.add_argument("--sigma2", default="1.0", help="known noise variance or 'estimated'")
    p.add_argument("--split-df", type=int, default=None, help="residual df given to the shift scale")
    p.add_argument("--alpha", type=_real, default=0.1)
    p.add_argument("--resolution", type=int, default=2048)
    _common(p, seed=False)

    p = sub.add_parser("conformal", help="conformal region with the posterior predictive score")
    p.add_argument("--data", type=_reals, required=True)
    level = p.add_mutually_exclusive_group(required=True)
    level.add_argument("--k-level", type=int)
    level.add_argument("--alpha", type=_real)
    p.add_argument("--m", type=_real, default=0.0)
    p.add_argument("--lambda", dest="lam", type=_positive_or_inf, default=1.0)
    p.add_argument("--sigma2", type=_real, default=1.0)
    p.add_argument("--score", choices=("postpred", "neg_abs_dev_baseline"), default="postpred")
    p.add_argument("--resolution", type=int, default=2048)
    _common(p, seed=False)

    for name, helptext in (("coverage", "Monte Carlo coverage"), ("risk", "Monte Carlo expected region size")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", choices=("normal", "normal-estvar", "regression", "conformal"), required=True)
        p.add_argument("--kind", default="fab", help="fab, fab_t, equivariant or bayes")
        p.add_argument("--theta", type=_theta, default=(0.0,), help="parameter vector or 'prior'")
        p.add_argument("--reps", type=int, default=10_000)
        _normal_opts(p, p_dim=True)
        p.add_argument("--nu", type=int, default=10, help="df of the variance estimate (normal-estvar)")
        p.add_argument("--design", help="CSV design matrix (regression)")
        p.add_argument("--v", type=_reals, help="target covariates (regression)")
        p.add_argument("--tau2", type=_positive_or_inf, default=1.0)
        p.add_argument("--estimated", action="store_true", help="regression noise variance is estimated")
        p.add_argument("--split-df", type=int, default=None)
        p.add_argument("--n", type=int, default=5, help="sample size (conformal)")
        p.add_argument("--k-level", type=int, default=1)
        p.add_argument("--m", type=_real, default=0.0)
        p.add_argument("--score", choices=("postpred", "neg_abs_dev_baseline"), default="postpred")
        _common(p)

    p = sub.add_parser("figure", help="tidy table behind a figure")
    p.add_argument("--which", choices=FIGURES, required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a figure setting (repeatable); lists are comma-separated")
    p.add_argument("--full-scale", action="store_true", help="fig4: every design row, 1000 replicates")
    _common(p)
    return parser


# -- config files ----------------------------------------------------------


def _read_config(path: str) -> list[str]:
    argv: list[str] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = key.strip(), value.strip()
        if key in ("config", "out", "command"):
            continue
        flag = "--" + key.replace("_", "-")
        if value in ("true", "false"):
            if value == "true":
                argv.append(flag)
        elif value == "None":
            continue
        elif key == "set":
            argv += [f"--set={item}" for item in value.split("|") if item]
        else:
            # the joined form keeps values such as "-1,2" from parsing as flags
            argv.append(f"{flag}={value}")
    return argv


_NEGATIVE = re.compile(r"^-(\d|\.\d|inf)", re.IGNORECASE)


def _join_negative_values(argv: list[str]) -> list[str]:
    """Turn ``--flag -1,2`` into ``--flag=-1,2``; argparse would read ``-1,2`` as an option."""
    out: list[str] = []
    for tok in argv:
        if out and out[-1].startswith("--") and "=" not in out[-1] and _NEGATIVE.match(tok):
            out[-1] = f"{out[-1]}={tok}"
        else:
            out.append(tok)
    return out


def _parse(argv: list[str]) -> argparse.Namespace:
    argv = _join_negative_values(argv)
    # the config file may supply required options, so find it before full parsing
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv[1:])
    if known.config and argv and not argv[0].startswith("-"):
        try:
            # config values first so that explicit flags win
            argv = [argv[0]] + _read_config(known.config) + argv[1:]
        except OSError as exc:
            raise UsageError(f"cannot read config {known.config}: {exc}") from None
    return build_parser().parse_args(argv)


def _config_line(ns: argparse.Namespace) -> str:
    skip = {"command", "config", "out"}
    items = []
    for key, value in sorted(vars(ns).items()):
        if key in skip:
            continue
        name = "lambda" if key == "lam" else key.replace("_", "-")
        if key == "set":
            value = "|".join(value)
        items.append(f"{name}={_echo(value)}")
    return ";".join(items)


# -- commands --------------------------------------------------------------


def _check_alpha(alpha):
    if alpha is not None and not 0.0 < alpha < 1.0:
        raise UsageError(f"--alpha must lie in (0, 1), got {alpha}")


def _sigma(values, p):
    if len(values) == 1:
        return values[0]
    if len(values) != p * p:
        raise UsageError(f"--sigma2 needs 1 or {p * p} numbers")
    return np.array(values).reshape(p, p)


def _normal_cfg(ns, p):
    if len(ns.mu) not in (1, p):
        raise UsageError(f"--mu needs 1 or {p} numbers")
    mu = np.broadcast_to(np.array(ns.mu), (p,))
    return NormalFabConfig(p=p, k=ns.k, sigma=_sigma(ns.sigma2, p), mu=mu, lam=ns.lam, alpha=ns.alpha)


def _load_matrix(path):
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read matrix from {path}: {exc}") from None


def _is_file(text: str) -> bool:
    try:
        return Path(text).is_file()
    except OSError:  # e.g. a long inline list
        return False


def _load_vector(text):
    if _is_file(text):
        return np.loadtxt(text, delimiter=",", ndmin=1).ravel()
    try:
        return np.array(_reals(text))
    except argparse.ArgumentTypeError as exc:
        raise UsageError(str(exc)) from None


def _cmd_normal_interval(ns):
    res = fab_interval_1d(ns.x, _normal_cfg(ns, 1), ns.resolution)
    return ("lo", "hi", "width"), [(lo, hi, hi - lo) for lo, hi in res.intervals], None, []


def _cmd_normal_region2d(ns):
    if len(ns.x) != 2:
        raise UsageError("--x needs two numbers")
    res = fab_region_2d(ns.x, _normal_cfg(ns, 2), grid_n=ns.grid_n)
    return ("area", "err_bound", "n_cells"), [(res.total_measure, res.err_bound, res.n_cells)], None, []


def _cmd_regress_interval(ns):
    U = _load_matrix(ns.design)
    x = _load_vector(ns.response)
    if x.size != U.shape[0]:
        raise UsageError(f"response has {x.size} values but the design has {U.shape[0]} rows")
    estimated = ns.sigma2.strip().lower() == "estimated"
    sigma2 = None if estimated else _real(ns.sigma2)
    cfg = RegressionFabConfig.from_tau2(U, np.array(ns.v), ns.tau2, sigma2=sigma2, alpha=ns.alpha)
    if estimated:
        sp = split_variance_estimates(x, U, ns.split_df)
        if math.isinf(ns.tau2):
            lo, hi = equivariant_interval_reg(x, cfg, sp.sigma_hat2, sp.nu)
            res_int = ((float(lo), float(hi)),)
        else:
            res_int = fab_interval_reg_t(x, cfg, sp.sigma_hat2, sp.nu, sp.sigma_tilde2, ns.resolution).intervals
        source = f"split(nu={sp.nu};tilde_df={sp.tilde_df})"
    else:
        res_int = fab_interval_reg(x, cfg, ns.resolution).intervals
        source = "known"
    return ("lo", "hi", "width", "sigma_source"), [(lo, hi, hi - lo, source) for lo, hi in res_int], None, []


def _cmd_conformal(ns):
    n = len(ns.data)
    try:
        k = ns.k_level if ns.k_level is not None else level_for_alpha(ns.alpha, n)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not 0 <= k <= n:
        raise UsageError(f"--k-level must lie in [0, {n}]")
    cfg = ConformalConfig(ns.data, k, NormalPrior(ns.m, ns.lam, ns.sigma2))
    res = conformal_region(cfg, ns.score, ns.resolution)
    rows = [(i, lo, hi) for i, (lo, hi) in enumerate(res.intervals)]
    extra = [f"alpha={_fmt(cfg.alpha)}"]
    if cfg.has_ties:
        extra.append("ties=true")
    return ("seg_index", "lo", "hi"), rows, None, extra


def _procedure(ns):
    if ns.model == "normal":
        return NormalProcedure(_normal_cfg(ns, ns.p), ns.kind)
    if ns.model == "normal-estvar":
        return EstVarNormalProcedure(_normal_cfg(ns, 1), nu=ns.nu)
    if ns.model == "regression":
        if ns.design is None or ns.v is None:
            raise UsageError("--model regression needs --design and --v")
        U = _load_matrix(ns.design)
        cfg = RegressionFabConfig.from_tau2(U, np.array(ns.v), ns.tau2, sigma2=None if ns.estimated else 1.0,
                                            alpha=ns.alpha)
        noise = ns.sigma2[0]
        tau2 = None if math.isinf(ns.tau2) else ns.tau2
        return RegressionProcedure(cfg, ns.kind, noise_var=noise, split_df=ns.split_df, prior_tau2=tau2)
    return ConformalProcedure(ns.n, ns.k_level, NormalPrior(ns.m, ns.lam, ns.sigma2[0]), ns.score,
                              noise_var=ns.sigma2[0])


def _cmd_sim(ns):
    try:
        proc = _procedure(ns)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    theta = ns.theta
    if not isinstance(theta, str):
        theta = float(theta[0]) if ns.model == "conformal" else np.array(theta)
    fn = estimate_coverage if ns.command == "coverage" else estimate_risk
    rep = fn(proc, theta, ns.reps, ns.seed)
    rows = [(rep.quantity, rep.estimate, rep.std_error, rep.n_reps, rep.seed)]
    return ("quantity", "estimate", "std_error", "n_reps", "seed"), rows, ns.seed, [f"digest={rep.config_digest}"]


def _coerce(text: str):
    if "," in text:
        return tuple(float(t) for t in text.split(",") if t.strip())
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none",):
        return None
    if low in ("inf", "infinity"):
        return math.inf
    try:
        return int(text)
    except ValueError:
        return float(text)


def _cmd_figure(ns):
    overrides = {}
    for item in ns.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            overrides[key.strip()] = _coerce(value.strip())
        except ValueError:
            raise UsageError(f"--set {key}: not a number: {value!r}") from None
    if ns.full_scale:
        if ns.which != "fig4":
            raise UsageError("--full-scale applies to fig4 only")
        overrides["full_scale"] = True
    try:
        table = figure_data(ns.which, overrides, ns.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return table.columns, table.rows, ns.seed, []


_COMMANDS = {
    "normal-interval": ("fab_interval_1d", _cmd_normal_interval),
    "normal-region2d": ("fab_region_2d", _cmd_normal_region2d),
    "regress-interval": ("fab_interval_reg", _cmd_regress_interval),
    "conformal": ("conformal_region", _cmd_conformal),
    "coverage": ("estimate_coverage", _cmd_sim),
    "risk": ("estimate_risk", _cmd_sim),
    "figure": ("figure_data", _cmd_figure),
}


def _render(columns, rows, config, seed, extra) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    for line in extra:
        buf.write(f"# {line}\n")
    buf.write(f"# config={config}\n")
    buf.write(f"# rows={len(rows)} seed={'none' if seed is None else seed}\n")
    return buf.getvalue()


def run(argv: list[str] | None = None, stdout=None, stderr=None) -> int:
    """Run one command; returns the exit status instead of exiting."""
    argv = list(sys.argv[1:] if argv is None else argv)
    stdout = sys.stdout if stdout is None else stdout
    stderr = sys.stderr if stderr is None else stderr
    try:
        ns = _parse(argv)
        _check_alpha(getattr(ns, "alpha", None))
        op, fn = _COMMANDS[ns.command]
        try:
            columns, rows, seed, extra = fn(ns)
        except (FabError, DomainError, np.linalg.LinAlgError) as exc:
            stderr.write(f"fabpred {ns.command}: {op} failed: {exc}\n")
            return EXIT_NUMERIC
    except UsageError as exc:
        stderr.write(f"{exc}\n")
        build_parser().print_usage(stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    text = _render(columns, rows, _config_line(ns), seed, extra)
    if ns.out:
        Path(ns.out).write_text(text)
    else:
        stdout.write(text)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
