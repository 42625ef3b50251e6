"""Command line experiment runner.

    spdelab <subcommand> [--config PATH] [--out PATH] [--seed N] [--workers N]

Subcommands: gram, simulate, ito-check, energy-check, qv, isometry,
convergence.  Exit status is 0 on success, 2 when a verification check
fails and 1 for usage or configuration errors.  See ``docs/config.md`` for
the JSON schema.
"""
import argparse
import csv
import dataclasses
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import problems as gallery
from .bform import BForm, b_gram_schmidt, b_parseval, hs_norm_sq
from .errors import SpdeLabError
from .integrator import SolverConfig, default_workers, run_chunks, solve_path
from .itolab import LEDGER_TERMS, energy_inequality_check, expected_energy_check, pathwise_ledger
from .noise import NoiseModel, dyadic_partitions, ito_integral, quadratic_variation, sample_increments
from .rng import path_seed

SCHEMA_VERSION = 1
SUBCOMMANDS = ("gram", "simulate", "ito-check", "energy-check", "qv", "isometry", "convergence")

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config

PROBLEM_KEYS = {
    "ou": {"name", "d", "lambda", "sigma", "u0", "T"},
    "porous_media": {"name", "n", "L", "p", "noise", "u0", "T"},
    "degenerate_plaplacian": {"name", "n", "L", "p", "b", "noise", "u0", "T"},
    "zero_b": {"name", "d", "u0", "T"},
}
NOISE_KEYS = {"modes", "sigma", "decay"}
OPTION_KEYS = {
    "kappa", "slack", "min_level", "max_level", "n_seeds", "scale", "tolerance",
    "level", "dts", "band", "base_level",
}
TOP_KEYS = {"schema", "problem", "solver", "n_paths", "master_seed", "t_checks", "out", "options"}
SOLVER_KEYS = {f.name for f in dataclasses.fields(SolverConfig)}


@dataclasses.dataclass
class ExperimentConfig:
    problem: dict
    solver: dict = dataclasses.field(default_factory=dict)
    n_paths: int = 1
    master_seed: int = 0
    t_checks: list = dataclasses.field(default_factory=list)
    out: str = None
    options: dict = dataclasses.field(default_factory=dict)
    schema: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        _reject_unknown(data, TOP_KEYS, "")
        if data.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(f"schema: unsupported version {data.get('schema')!r}")
        if "problem" not in data:
            raise ConfigError("problem: missing")
        prob = data["problem"]
        if not isinstance(prob, dict) or prob.get("name") not in PROBLEM_KEYS:
            raise ConfigError(f"problem.name: expected one of {sorted(PROBLEM_KEYS)}")
        _reject_unknown(prob, PROBLEM_KEYS[prob["name"]], "problem.")
        if isinstance(prob.get("noise"), dict):
            _reject_unknown(prob["noise"], NOISE_KEYS, "problem.noise.")
        solver = data.get("solver", {})
        _reject_unknown(solver, SOLVER_KEYS, "solver.")
        options = data.get("options", {})
        _reject_unknown(options, OPTION_KEYS, "options.")
        return cls(
            problem=dict(prob),
            solver=dict(solver),
            n_paths=int(data.get("n_paths", 1)),
            master_seed=int(data.get("master_seed", 0)),
            t_checks=list(data.get("t_checks", [])),
            out=data.get("out"),
            options=dict(options),
            schema=SCHEMA_VERSION,
        )

    def to_dict(self):
        return dataclasses.asdict(self)

    def solver_config(self, seed=None):
        kw = dict(self.solver)
        if "radius_base" in kw:
            kw["radius_base"] = tuple(kw["radius_base"])
        if seed is not None:
            kw["seed"] = seed
        try:
            return SolverConfig(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"solver: {exc}") from exc


def _reject_unknown(data, allowed, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected an object")
    for key in data:
        if key not in allowed:
            raise ConfigError(f"{prefix}{key}: unknown key")


def _profile(grid, spec):
    if spec is None:
        return gallery.sine_profile(grid)
    if isinstance(spec, dict):
        return gallery.sine_profile(grid, spec.get("amplitude", 1.0), spec.get("mode", 1))
    return np.asarray(spec, dtype=float)


def build_problem(spec):
    name = spec["name"]
    try:
        if name == "ou":
            d = int(spec.get("d", 1))
            return gallery.make_ou(
                d, float(spec.get("lambda", 1.0)), float(spec.get("sigma", 1.0)),
                spec.get("u0", [1.0] * d), float(spec.get("T", 1.0)),
            )
        if name == "zero_b":
            d = int(spec.get("d", 1))
            return gallery.make_zero_b(d, u0=spec.get("u0", [1.0] * d), T=float(spec.get("T", 1.0)))
        grid = gallery.Grid1D(int(spec.get("n", 32)), float(spec.get("L", 1.0)))
        nz = spec.get("noise", {})
        noise = gallery.sine_noise(
            grid, int(nz.get("modes", 8)), float(nz.get("sigma", 1.0)), float(nz.get("decay", 1.0))
        )
        u0 = _profile(grid, spec.get("u0"))
        p = float(spec.get("p", 3.0))
        T = float(spec.get("T", 1.0))
        if name == "porous_media":
            return gallery.make_porous_media(grid, p, noise, u0, T)
        b = spec.get("b", "half")
        if b == "half":
            weight = gallery.half_weight(grid)
        elif b == "one":
            weight = np.ones(grid.n)
        else:
            weight = np.asarray(b, dtype=float)
        return gallery.make_degenerate_plaplacian(grid, p, weight, noise, u0, T)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"problem: {exc}") from exc


# ------------------------------------------------------------------ output


def fmt(x):
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    if path is None:
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def report(name, passed, detail):
    print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    return passed


# ------------------------------------------------------------- subcommands


def cmd_gram(args, cfg, workers):
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    dim = args.dim
    rank = args.rank if args.rank is not None else int(rng.integers(0, dim + 1))
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    lam = np.zeros(dim)
    lam[:rank] = rng.uniform(0.1, 10.0, rank)
    form = BForm(q @ np.diag(lam) @ q.T)
    basis = b_gram_schmidt(form, rng.standard_normal((dim, dim)))
    gram = basis.gram()
    rows = [(i, j, gram[i, j]) for i in range(len(basis)) for j in range(len(basis))]
    write_csv(args.out, ["i", "j", "pairing"], rows)
    dev = float(np.abs(gram - np.eye(len(basis))).max()) if len(basis) else 0.0
    x = rng.standard_normal(dim)
    _, _, res = b_parseval(form, basis, x)
    ok = report("gram", dev < 1e-8 and len(basis) == rank,
                f"rank {len(basis)}/{rank}, max |<Be_i,e_j> - delta_ij| = {dev:.2e}, parseval residual {res:.2e}")
    return ok


def cmd_simulate(args, cfg, workers):
    problem = build_problem(cfg.problem)
    path = solve_path(problem, cfg.solver_config(args.seed))
    d = problem.dim
    rows = [(t, *u) for t, u in zip(path.times, path.states)]
    write_csv(args.out, ["t"] + [f"u_{i}" for i in range(d)], rows)
    finite = bool(np.all(np.isfinite(path.states)))
    return report("simulate", finite, f"{path.times.size - 1} steps, dim {d}, seed {path.seed}")


def cmd_ito_check(args, cfg, workers):
    problem = build_problem(cfg.problem)
    sc = cfg.solver_config()
    t_checks = cfg.t_checks or [problem.T]
    rep = expected_energy_check(
        problem, sc, cfg.n_paths, _master(args, cfg), t_checks,
        kappa=float(cfg.options.get("kappa", 0.0)), workers=workers,
    )
    led = rep.mean_ledger
    rows = [(t, *(led[k][j] for k in LEDGER_TERMS)) for j, t in enumerate(rep.times)]
    write_csv(args.out, ["t", *LEDGER_TERMS], rows)
    ok = True
    for c in rep.checks:
        ok &= report(
            f"ito-check t={c.t:g}", c.passed,
            f"E lhs {c.lhs.mean:.6g}, E rhs {c.rhs.mean:.6g}, diff {c.difference.mean:.3e} "
            f"(3SE+allowance {3 * c.difference.se + c.allowance:.3e}), "
            f"martingale {c.martingale.mean:.3e} (3SE {3 * c.martingale.se:.3e})",
        )
    return ok


def cmd_energy_check(args, cfg, workers):
    problem = build_problem(cfg.problem)
    rep = energy_inequality_check(
        problem, cfg.solver_config(), cfg.n_paths, _master(args, cfg),
        slack=float(cfg.options.get("slack", 0.0)), workers=workers,
    )
    rows = [
        ("lhs", rep.lhs.mean, rep.lhs.se),
        ("rhs", rep.rhs.mean, rep.rhs.se),
        ("difference", rep.difference.mean, rep.difference.se),
        ("slack", rep.slack, 0.0),
    ]
    write_csv(args.out, ["quantity", "mean", "se"], rows)
    return report("energy-check", rep.passed,
                  f"LHS {rep.lhs.mean:.6g} <= RHS {rep.rhs.mean:.6g} (margin {rep.margin:.3e})")


def cmd_qv(args, cfg, workers):
    problem = build_problem(cfg.problem)
    opts = cfg.options
    lo, hi = int(opts.get("min_level", 6)), int(opts.get("max_level", 14))
    n_seeds = int(opts.get("n_seeds", 100))
    scale = float(opts.get("scale", 1.0))
    tol = float(opts.get("tolerance", 0.05))
    T = problem.T
    parts = dyadic_partitions(T, lo, hi)
    noise = problem.noise
    phi = scale * noise.phi_at(0.0)
    target = T * scale**2 * hs_norm_sq(noise, problem.w_mass)
    master = _master(args, cfg)

    def one(i):
        seed = path_seed(master, i)

        def sampler(part):
            dw = sample_increments(noise, part, seed, base_level=hi)
            return ito_integral(phi, dw)[1]

        est = quadratic_variation(sampler, parts, problem.w_mass, [T])
        return np.array([e[0] for _, e in est.per_level])

    per_seed = _map(one, range(n_seeds), workers)
    mean = np.mean(np.stack(per_seed), axis=0)
    write_csv(args.out, ["level", "t", "qv_mean"], [(p.level, T, m) for p, m in zip(parts, mean)])
    rel = abs(mean[-1] - target) / target
    return report("qv", rel <= tol, f"level {hi}: {mean[-1]:.6g} vs {target:.6g} (rel err {rel:.3e})")


def cmd_isometry(args, cfg, workers):
    level = int(cfg.options.get("level", 10))
    n = cfg.n_paths
    part = dyadic_partitions(1.0, level, level)[0]
    noise = NoiseModel(np.eye(1), np.eye(1))
    z = part.times[:-1, None, None] * np.ones((1, 1, 1))
    master = _master(args, cfg)
    chunk = 4096

    def one(start):
        stop = min(start + chunk, n)
        dw = np.stack([sample_increments(noise, part, path_seed(master, i)) for i in range(start, stop)])
        return ito_integral(z, dw)[0][:, 0] ** 2

    sq = np.concatenate(_map(one, range(0, n, chunk), workers))
    mean = float(sq.mean())
    se = float(sq.std(ddof=1) / math.sqrt(n))
    exact = 1.0 / 3.0
    bound = 3 * se + 2 * part.mesh
    write_csv(args.out, ["quantity", "value"],
              [("mc_mean", mean), ("se", se), ("exact", exact), ("bound", bound)])
    return report("isometry", abs(mean - exact) <= bound,
                  f"E I^2 = {mean:.6g} +- {se:.2e}, exact 1/3, |diff| {abs(mean - exact):.3e} <= {bound:.3e}")


def cmd_convergence(args, cfg, workers):
    problem = build_problem(cfg.problem)
    opts = cfg.options
    dts = sorted((float(x) for x in opts.get("dts", [2.0**-8, 2.0**-9])), reverse=True)
    band = opts.get("band", [1.3, 3.5])
    base = float(min(dts)) / 2 ** int(opts.get("base_level", 5))
    seed = args.seed if args.seed is not None else cfg.solver.get("seed", 0)
    rows, res = [], []
    for dt in dts:
        refine = int(round(dt / base))
        sc = dataclasses.replace(cfg.solver_config(seed), dt=dt, brownian_refine=refine)
        path = solve_path(problem, sc)
        led = pathwise_ledger(path, problem, sc.epsilon)
        res.append(led.max_abs_residual())
    ratios = [a / b for a, b in zip(res, res[1:])]
    for k, dt in enumerate(dts):
        rows.append((dt, res[k], ratios[k - 1] if k else float("nan")))
    write_csv(args.out, ["dt", "max_abs_residual", "ratio"], rows)
    ok = all(band[0] <= r <= band[1] for r in ratios)
    return report("convergence", ok,
                  "ratios " + ", ".join(f"{r:.3f}" for r in ratios) + f" (band {band[0]}..{band[1]})")


def _master(args, cfg):
    return args.seed if args.seed is not None else cfg.master_seed


def _map(fn, items, workers):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


COMMANDS = {
    "gram": cmd_gram,
    "simulate": cmd_simulate,
    "ito-check": cmd_ito_check,
    "energy-check": cmd_energy_check,
    "qv": cmd_qv,
    "isometry": cmd_isometry,
    "convergence": cmd_convergence,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="spdelab", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--out", help="CSV output path (overrides config 'out')")
    parser.add_argument("--seed", type=int, help="seed (master seed for ensembles)")
    parser.add_argument("--workers", type=int, help="worker threads; results do not depend on it")
    parser.add_argument("--dim", type=int, default=4, help="gram: form dimension")
    parser.add_argument("--rank", type=int, help="gram: rank of the random form")
    return parser


def load_config(path, command):
    if path is None:
        if command in ("gram", "isometry"):
            return ExperimentConfig(problem={"name": "ou"}, n_paths=100000)
        raise ConfigError(f"{command} needs --config")
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = load_config(args.config, args.command)
        if args.out is None:
            args.out = cfg.out
        workers = args.workers if args.workers is not None else default_workers()
        if workers < 1:
            raise ConfigError("--workers must be at least 1")
        if args.command == "gram" and args.dim < 1:
            raise ConfigError("--dim must be positive")
        ok = COMMANDS[args.command](args, cfg, workers)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SpdeLabError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK if ok else EXIT_FAIL


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
