"""Command-line experiment runner.

Every invocation writes into ``<out-dir>/<experiment>/<timestamp>-<seed>/``
a ``manifest.json`` listing each file it produced.  Exit codes: 0 pass,
2 verification failure, 1 execution error, 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FAIL = 2
EXIT_USAGE = 64
SCHEMA_VERSION = 1
CACHE_ENV = "HYPOBRIDGE_CACHE_DIR"
SUBCOMMANDS = ("bracket-check", "heat-solve", "kde", "simulate", "bridge", "ccdist", "verify", "report")


class UsageError(Exception):
    pass


def tool_version():
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


# --------------------------------------------------------------------------
# configuration


def parse_value(text):
    """JSON literal when it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config(text):
    cfg = json.loads(text) if text.strip() else {}
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    return cfg


def dump_config(cfg):
    return json.dumps(cfg, indent=2, sort_keys=True)


def apply_overrides(cfg, pairs):
    out = dict(cfg)
    for p in pairs or ():
        if "=" not in p:
            raise UsageError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def parse_point(text):
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    try:
        return tuple(float(v) for v in str(text).split(","))
    except ValueError as e:
        raise UsageError(f"bad point {text!r}") from e


def parse_times(text):
    return parse_point(text)


# --------------------------------------------------------------------------
# output plumbing


class Run:
    """Output directory of one invocation and its manifest."""

    def __init__(self, out_dir, experiment, seed, cfg, cmd):
        stamp = time.strftime("%Y%m%dT%H%M%S")
        base = Path(out_dir) / experiment
        path = base / f"{stamp}-{seed}"
        i = 1
        while path.exists():
            path = base / f"{stamp}-{seed}-{i}"
            i += 1
        path.mkdir(parents=True)
        self.dir = path
        self.started = time.time()
        self.manifest = {
            "schema_version": SCHEMA_VERSION,
            "experiment": experiment,
            "subcommand": cmd,
            "model": cfg.get("model"),
            "config": cfg,
            "seed": seed,
            "tool_version": tool_version(),
            "inputs": {},
            "outputs": [],
            "accounting": {},
        }

    def file(self, name):
        p = self.dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.manifest["outputs"].append(name)
        return p

    def external(self, path):
        """Register an output written outside the run directory."""
        self.manifest["outputs"].append(str(Path(path).resolve()))

    def input(self, path):
        h = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        self.manifest["inputs"][str(path)] = h

    def close(self, status):
        self.manifest["status"] = status
        self.manifest["wall_clock_s"] = round(time.time() - self.started, 3)
        with open(self.dir / "manifest.json", "w", newline="\n") as fh:
            fh.write(json.dumps(self.manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return self.dir / "manifest.json"


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    return str(o)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def write_json(path, obj):
    with open(path, "w", newline="\n") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _system(cfg):
    from .models import MODEL_NAMES, make_model

    name = cfg.get("model")
    if name not in MODEL_NAMES:
        raise UsageError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
    return make_model(name, cfg.get("drift"))


def _kernel_path(run, cfg, tag):
    """Cache location: --kernel-cache, else $HYPOBRIDGE_CACHE_DIR, else run/cache."""
    if cfg.get("kernel_cache"):
        return Path(cfg["kernel_cache"]), True
    env = os.environ.get(CACHE_ENV)
    if env:
        Path(env).mkdir(parents=True, exist_ok=True)
        return Path(env) / f"{tag}.npz", True
    return run.dir / "cache" / f"{tag}.npz", False


def _cached_kernel(run, cfg, tag, build):
    from .heatkernel import load_kernel, save_kernel

    path, external = _kernel_path(run, cfg, tag)
    if path.exists():
        run.input(path)
        return load_kernel(path)
    k = build()
    path.parent.mkdir(parents=True, exist_ok=True)
    save_kernel(path, k)
    if external:
        run.external(path)
    else:
        run.manifest["outputs"].append(str(path.relative_to(run.dir)))
    return k


def _kernel_tag(kind, cfg, keys):
    blob = json.dumps({k: cfg.get(k) for k in keys}, sort_keys=True)
    return f"{kind}-{cfg['model']}-{hashlib.sha256(blob.encode()).hexdigest()[:12]}"


def _kernel_summary(run, k):
    from .heatkernel import kernel_max

    rows = [(float(t), float(m), float(kernel_max(k, t))) for t, m in zip(k.times, k.mass)]
    write_csv(run.file("kernel_summary.csv"), ["t", "mass", "max_value"], rows)
    dev = float(np.max(np.abs(k.mass - 1)))
    run.manifest["accounting"]["max_mass_deviation"] = dev
    return dev


# --------------------------------------------------------------------------
# subcommands


def cmd_bracket_check(run, cfg):
    from .models import hormander_level

    sys_ = _system(cfg)
    n = int(cfg.get("grid", 9))
    sp = sys_.space
    if sp.periodic:
        axes = [np.arange(n) / n * p for p in sp.period]
    else:
        axes = [np.linspace(-1, 1, n)] * sp.dimension
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, sp.dimension)
    lv = np.atleast_1d(hormander_level(sys_, pts, max_level=int(cfg.get("max_level", 3))))
    names = ["x", "y", "z"][: sp.dimension]
    write_csv(run.file("levels.csv"), [*names, "level"], [(*map(float, p), int(l)) for p, l in zip(pts, lv)])
    counts = {str(k): int(np.sum(lv == k)) for k in np.unique(lv)}
    run.manifest["accounting"]["level_counts"] = counts
    for k, c in counts.items():
        print(f"level {k}: {c} points")
    return EXIT_OK if np.all(lv > 0) else EXIT_FAIL


def cmd_heat_solve(run, cfg):
    from .heatkernel import solve_heat_grid

    sys_ = _system(cfg)
    if not sys_.space.periodic:
        raise UsageError("heat-solve needs a torus model; use kde otherwise")
    times = parse_times(cfg.get("times", "0.1,0.2"))
    src = parse_point(cfg.get("source", "0,0"))
    tag = _kernel_tag("grid", cfg, ["model", "drift", "source", "times", "n", "argument"])
    k = _cached_kernel(
        run, cfg, tag, lambda: solve_heat_grid(sys_, src, times, n=int(cfg.get("n", 64)), argument=cfg.get("argument", "second"))
    )
    dev = _kernel_summary(run, k)
    return EXIT_OK if dev <= 1e-3 else EXIT_FAIL


def cmd_kde(run, cfg):
    from .heatkernel import mc_kde_kernel

    sys_ = _system(cfg)
    times = parse_times(cfg.get("times", "0.1,0.2"))
    src = parse_point(cfg.get("source", ",".join(["0"] * sys_.space.dimension)))
    tag = _kernel_tag("kde", cfg, ["model", "drift", "source", "times", "paths", "dt", "seed", "bandwidth", "debias", "argument"])

    def build():
        return mc_kde_kernel(
            sys_,
            src,
            times,
            n_paths=int(cfg.get("paths", 20000)),
            seed=int(cfg["seed"]),
            dt=float(cfg.get("dt", 1e-3)),
            argument=cfg.get("argument", "second"),
            bandwidth=cfg.get("bandwidth", "scott"),
            debias=bool(cfg.get("debias", False)),
            jobs=int(cfg["jobs"]),
        )

    k = _cached_kernel(run, cfg, tag, build)
    _kernel_summary(run, k)
    write_csv(run.file("bandwidth.csv"), ["t", *[f"h{i}" for i in range(k.dim)]], [(t, *h) for t, h in zip(k.times, k.bandwidth)])
    return EXIT_OK


def cmd_simulate(run, cfg):
    from .bridge import save_ensemble, save_paths_csv
    from .sde import simulate_diffusion

    sys_ = _system(cfg)
    x0 = parse_point(cfg.get("from", ",".join(["0"] * sys_.space.dimension)))
    ens = simulate_diffusion(
        sys_, x0, float(cfg.get("T", 1.0)), float(cfg.get("dt", 1e-3)), int(cfg["seed"]), n_paths=int(cfg.get("paths", 1000)), jobs=int(cfg["jobs"])
    )
    save_paths_csv(run.file("paths.csv"), ens, every=int(cfg.get("every", 10)))
    save_ensemble(run.file("ensemble.npz"), ens, {"model": cfg["model"], "config": cfg})
    run.manifest["outputs"].append("ensemble.npz.json")
    return EXIT_OK


def cmd_bridge(run, cfg):
    from .bridge import BridgeConfig, save_ensemble, save_paths_csv, simulate_bridge
    from .suites import bridge_kernel

    sys_ = _system(cfg)
    bc = BridgeConfig(
        parse_point(cfg.get("from")),
        parse_point(cfg.get("to")),
        dt=float(cfg.get("dt", 1e-3)),
        eps=float(cfg.get("eps", 0.05)),
        n_paths=int(cfg.get("paths", 1000)),
        seed=int(cfg["seed"]),
        pinning=cfg.get("pinning", "linear"),
    )
    tag = _kernel_tag("bridge", cfg, ["model", "drift", "to", "dt", "eps", "seed", "n"])
    k = _cached_kernel(run, cfg, tag, lambda: bridge_kernel(sys_, bc.z0, bc, seed=bc.seed + 1, n=int(cfg.get("n", 64)), jobs=int(cfg["jobs"])))
    ens = simulate_bridge(bc, sys_, k, jobs=int(cfg["jobs"]))
    save_paths_csv(run.file("paths.csv"), ens, every=int(cfg.get("every", 10)))
    save_ensemble(run.file("ensemble.npz"), ens, {"model": cfg["model"], "config": cfg})
    run.manifest["outputs"].append("ensemble.npz.json")
    fail = ens.failure_fraction
    run.manifest["accounting"].update(
        failure_fraction=fail,
        first_attempt_failures=ens.meta.get("first_attempt_failures"),
        clamped_step_fraction=ens.meta.get("clamped_step_fraction"),
    )
    print(f"failure fraction {fail:.4f}")
    return EXIT_OK if fail < 0.1 else EXIT_FAIL


def cmd_ccdist(run, cfg):
    from .ccdist import cc_distance_batch

    sys_ = _system(cfg)
    if cfg.get("pairs"):
        run.input(cfg["pairs"])
        P = np.loadtxt(cfg["pairs"], delimiter=",", ndmin=2)
        d = sys_.space.dimension
        X, Y = P[:, :d], P[:, d : 2 * d]
    else:
        X = np.array([parse_point(cfg.get("from"))])
        Y = np.array([parse_point(cfg.get("to"))])
    nseg, rest = int(cfg.get("segments", 32)), int(cfg.get("restarts", 8))
    dist, res, _, _ = cc_distance_batch(sys_, X, Y, n_segments=nseg, restarts=rest, seed=int(cfg["seed"]))
    rows = [(" ".join(repr(float(v)) for v in x), " ".join(repr(float(v)) for v in y), d, r, nseg, rest) for x, y, d, r in zip(X, Y, dist, res)]
    write_csv(run.file("ccdist.csv"), ["x", "y", "d_upper", "endpoint_residual", "n_segments", "restarts"], rows)
    unreachable = int(np.sum(~np.isfinite(dist)))
    run.manifest["accounting"]["unreachable"] = unreachable
    for r in rows:
        print(f"{r[0]} -> {r[1]}: d <= {r[2]:.6g} (residual {r[3]:.2e})")
    return EXIT_OK if unreachable == 0 else EXIT_FAIL


def cmd_verify(run, cfg):
    from .suites import run_suite
    from .verify import reports_to_csv

    suite = cfg.get("suite", "baseline")
    reps = run_suite(suite, cfg)
    out = {"schema_version": SCHEMA_VERSION, "suite": suite, "seed": cfg["seed"], "reports": [r.to_dict() for r in reps]}
    write_json(run.file("reports.json"), out)
    with open(run.file("reports.csv"), "w", newline="") as fh:
        fh.write(reports_to_csv(reps))
    failed = [r.statistic for r in reps if not r.passed]
    run.manifest["accounting"]["failed_checks"] = failed
    for r in reps:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.statistic}")
    return EXIT_OK if not failed else EXIT_FAIL


def _report_files(paths):
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(p.rglob("reports.json")))
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(p)
    return files


def merge_reports(paths):
    """Consolidate report artifacts; returns (summary, sweep rows, check rows)."""
    from .verify import rederive_pass

    docs, bad = [], []
    for f in _report_files(paths):
        doc = json.loads(Path(f).read_text())
        if doc.get("schema_version") != SCHEMA_VERSION:
            bad.append(str(f))
        docs.append((str(f), doc))
    if bad:
        raise ValueError(f"schema version mismatch (expected {SCHEMA_VERSION}): {', '.join(bad)}")
    groups, sweeps, checks = {}, [], []
    for f, doc in docs:
        seed = str(doc.get("seed"))
        for r in doc.get("reports", []):
            passed = rederive_pass(r)
            groups.setdefault(seed, []).append(
                {"source": f, "suite": doc.get("suite"), "statistic": r["statistic"], "estimate": r["estimate"], "passed": passed}
            )
            for row in r.get("sweep", []):
                sweeps.append((seed, r["statistic"], *[row.get(k) for k in ("eps", "estimate", "se")]))
            for c in r["checks"]:
                checks.append((seed, r["statistic"], c["name"], c["value"], c["op"], c["threshold"]))
    summary = {
        "schema_version": SCHEMA_VERSION,
        "n_reports": sum(len(v) for v in groups.values()),
        "groups": groups,
        "all_passed": all(x["passed"] for v in groups.values() for x in v),
    }
    return summary, sweeps, checks


def cmd_report(run, cfg):
    paths = cfg.get("artifacts") or []
    for f in _report_files(paths):
        run.input(f)
    summary, sweeps, checks = merge_reports(paths)
    write_json(run.file("summary.json"), summary)
    write_csv(run.file("eps_sweeps.csv"), ["seed", "statistic", "eps", "estimate", "se"], sweeps)
    write_csv(run.file("checks.csv"), ["seed", "statistic", "check", "value", "op", "threshold"], checks)
    print(f"{summary['n_reports']} reports in {len(summary['groups'])} seed group(s)")
    return EXIT_OK


COMMANDS = {
    "bracket-check": cmd_bracket_check,
    "heat-solve": cmd_heat_solve,
    "kde": cmd_kde,
    "simulate": cmd_simulate,
    "bridge": cmd_bridge,
    "ccdist": cmd_ccdist,
    "verify": cmd_verify,
    "report": cmd_report,
}


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    common = _Parser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", help="JSON configuration file")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a configuration key")
    g.add_argument("--seed", type=int)
    g.add_argument("--jobs", type=int)
    g.add_argument("--out-dir", dest="out_dir")
    g.add_argument("--experiment")
    g.add_argument("--kernel-cache", dest="kernel_cache", help="kernel file to reuse, or create when missing")

    p = _Parser(prog="hypobridge", description="Hypoelliptic bridge simulation and verification.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_, *opts):
        s = sub.add_parser(name, parents=[common], help=help_)
        for o in opts:
            s.add_argument(o, dest=o.lstrip("-").replace("-", "_"))
        return s

    add("bracket-check", "bracket levels over a point grid", "--model", "--grid", "--max-level")
    add("heat-solve", "grid heat kernel (torus models)", "--model", "--source", "--times", "--n", "--argument")
    add("kde", "Monte Carlo KDE heat kernel", "--model", "--source", "--times", "--paths", "--dt", "--bandwidth", "--argument")
    add("simulate", "unconditioned diffusion paths", "--model", "--from", "--T", "--dt", "--paths")
    add("bridge", "bridge paths pinned at a target", "--model", "--from", "--to", "--paths", "--dt", "--eps", "--pinning", "--n")
    add("ccdist", "sub-Riemannian distance upper bounds", "--model", "--from", "--to", "--pairs", "--segments", "--restarts")
    v = add("verify", "run a verification suite", "--model")
    v.add_argument("--suite", choices=("baseline", "heisenberg", "grushin", "full"))
    r = sub.add_parser("report", parents=[common], help="merge report artifacts")
    r.add_argument("artifacts", nargs="*")
    return p


_GLOBAL_KEYS = ("config", "set", "command", "out_dir", "experiment")


def resolve_config(args):
    """Configuration file, then explicit flags, then --set overrides."""
    cfg = {}
    if args.config:
        cfg = parse_config(Path(args.config).read_text())
    for k, v in vars(args).items():
        if k in _GLOBAL_KEYS or v is None or v == []:
            continue
        cfg[k] = parse_value(v) if isinstance(v, str) and k not in ("model", "from", "to", "source", "times", "pairs", "kernel_cache", "suite") else v
    cfg = apply_overrides(cfg, args.set)
    cfg.setdefault("seed", 0)
    cfg.setdefault("jobs", 1)
    return cfg


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(SUBCOMMANDS))
        cfg = resolve_config(args)
        if args.command not in ("report", "verify"):
            _system(cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR

    out_dir = args.out_dir or cfg.get("out_dir") or "out"
    experiment = args.experiment or cfg.get("experiment") or args.command
    run = Run(out_dir, experiment, cfg["seed"], cfg, args.command)
    status = EXIT_ERROR
    try:
        status = COMMANDS[args.command](run, cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        status = EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - reported through the exit code
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        status = EXIT_ERROR
    finally:
        path = run.close(status)
    print(f"manifest: {path}")
    return status


if __name__ == "__main__":
    sys.exit(main())
