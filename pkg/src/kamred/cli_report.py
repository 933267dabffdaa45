"""Batch front door: config parsing, subcommand dispatch, result emission.

Exit codes: 0 success, 2 validation error, 3 numerical failure (resonance
certificate, bound violation, non-contraction), 4 I/O error.  Every run
writes a manifest echoing the resolved configuration, the seed and the
library versions, so each number in a report is reproducible from its
manifest alone; outputs are byte-stable for identical (config, seed).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys

import numpy as np
import scipy

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .basis_spectra import (
    PotentialSpec,
    SobolevFrame,
    check_asymptotics,
    harmonic_ladder,
    solve_h0,
)
from .diophantine import DiophantineParams, excluded_measure
from .errors import (
    BoundViolationError,
    KamredError,
    NonContractionError,
    QuadratureError,
    ResidualError,
    ResonanceError,
    ValidationError,
)
from .kamcore import (
    KamSchedule,
    banded_selfadjoint_family,
    lemma_suite,
    resonant_web_family,
    run_kam,
)
from .propagator import EvolutionRun, build_w_modes, evolve

LEDGER_COLUMNS = [
    "stage",
    "r_l",
    "sigma_l",
    "eps1_measured",
    "eps1_scheduled",
    "gamma_l",
    "K_l",
    "min_divisor",
    "offdiag_norm",
]

TRACE_COLUMNS = ["t", "l2", "h1", "h2", "leakage", "unitarity_defect"]

MEASURE_COLUMNS = ["gamma", "tau", "n", "samples", "excluded_fraction", "ci95"]


def _fmt(x) -> str:
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        return f"{x:.17g}"
    return str(x)


def emit_report(rows, columns, path):
    """Write rows (dicts) as CSV with 17-significant-digit floats."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])


def write_manifest(path, config: dict, seed):
    manifest = {
        "config": config,
        "seed": seed,
        "versions": {
            "kamred": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_SCHEMA = {
    "schema": int,
    "l": int,
    "n": int,
    "N": int,
    "eps": float,
    "omega": list,
    "gamma": float,
    "tau": float,
    "kmax": int,
    "seed": int,
    "basis": str,
    "lipschitz_h": float,
    "w_terms": list,
    "w_random": dict,
    "schedule": dict,
    "evolve": dict,
    "output": dict,
}

_SCHEDULE_KEYS = {"r", "theta", "max_stages", "tol", "d2", "d3"}
_EVOLVE_KEYS = {"t_final", "dt", "s_values", "psi0", "stride", "check_error"}
_OUTPUT_KEYS = {"ledger", "state", "trace", "manifest"}
_WTERM_KEYS = {"a", "b", "k", "coeff"}
_WRANDOM_KEYS = {"kind", "band", "kmax_box", "scale"}


class RunConfig:
    """Validated run configuration; unknown keys are hard errors."""

    def __init__(self, raw: dict):
        for key in raw:
            if key not in _SCHEMA:
                raise ValidationError(f"unknown config key: {key!r}")
        if raw.get("schema", 1) != 1:
            raise ValidationError("unsupported schema version")
        self.l = int(raw.get("l", 1))
        self.n = int(raw.get("n", 1))
        self.N = int(raw.get("N", 32))
        self.eps = float(raw.get("eps", 1e-3))
        self.omega = np.asarray(raw.get("omega", [1.5] * self.n), dtype=float)
        self.gamma = float(raw.get("gamma", 0.05))
        self.tau = float(raw.get("tau", 2.5))
        self.kmax = int(raw.get("kmax", 6))
        self.seed = int(raw.get("seed", 0))
        self.basis = raw.get("basis", "ladder")
        self.lipschitz_h = raw.get("lipschitz_h")
        if self.lipschitz_h is not None:
            self.lipschitz_h = float(self.lipschitz_h)
        if self.l < 1:
            raise ValidationError("l must be >= 1")
        if self.basis not in ("ladder", "oscillator"):
            raise ValidationError("basis must be 'ladder' or 'oscillator'")
        if self.omega.shape != (self.n,):
            raise ValidationError("omega length must equal n")
        if np.any(self.omega < 1.0) or np.any(self.omega > 2.0):
            raise ValidationError("omega must lie in [1, 2]^n")

        self.w_terms = []
        for t in raw.get("w_terms", []):
            for key in t:
                if key not in _WTERM_KEYS:
                    raise ValidationError(f"unknown w_terms key: {key!r}")
            self.w_terms.append(
                (int(t["a"]), int(t["b"]), tuple(int(c) for c in t["k"]), float(t["coeff"]))
            )
        self.w_random = raw.get("w_random")
        if self.w_random is not None:
            for key in self.w_random:
                if key not in _WRANDOM_KEYS:
                    raise ValidationError(f"unknown w_random key: {key!r}")
            if self.w_terms:
                raise ValidationError("w_terms and w_random are mutually exclusive")

        sched = raw.get("schedule", {})
        for key in sched:
            if key not in _SCHEDULE_KEYS:
                raise ValidationError(f"unknown schedule key: {key!r}")
        self.schedule = KamSchedule(
            r=float(sched.get("r", 1.0)),
            theta=float(sched.get("theta", 0.5)),
            gamma0=self.gamma,
            tau=self.tau,
            d2=float(sched.get("d2", 0.5)),
            d3=float(sched.get("d3", 0.5)),
            kbox=self.kmax,
            max_stages=int(sched.get("max_stages", 12)),
            tol=float(sched.get("tol", 1e-13)),
        )

        ev = raw.get("evolve", {})
        for key in ev:
            if key not in _EVOLVE_KEYS:
                raise ValidationError(f"unknown evolve key: {key!r}")
        self.evolve_opts = {
            "t_final": float(ev.get("t_final", 100.0)),
            "dt": float(ev.get("dt", 1e-3)),
            "s_values": tuple(float(s) for s in ev.get("s_values", [1.0, 2.0])),
            "psi0": ev.get("psi0", "mix"),
            "stride": int(ev.get("stride", 0)),
            "check_error": bool(ev.get("check_error", False)),
        }

        out = raw.get("output", {})
        for key in out:
            if key not in _OUTPUT_KEYS:
                raise ValidationError(f"unknown output key: {key!r}")
        self.output = {
            "ledger": out.get("ledger", "ledger.csv"),
            "state": out.get("state", "state.json"),
            "trace": out.get("trace", "trace.csv"),
            "manifest": out.get("manifest", "manifest.json"),
        }
        self.raw = raw

    @classmethod
    def from_toml(cls, path) -> "RunConfig":
        with open(path, "rb") as f:
            return cls(tomllib.load(f))

    def frame(self) -> SobolevFrame:
        return SobolevFrame(1.0, 0.0)

    def spectral_data(self):
        """(lam0, modes, d) for the configured basis and perturbation."""
        if self.basis == "ladder":
            if self.l != 1:
                raise ValidationError("the model ladder is a degree-1 object")
            lam0 = harmonic_ladder(self.N)
            basis = None
            d = 1.0
        else:
            pot = PotentialSpec.pure_power(self.l)
            basis = solve_h0(pot, self.N, refine=2)
            lam0 = basis.lambda_v
            d = 2.0 * self.l / (self.l + 1.0)
        if self.w_random is not None:
            kind = self.w_random.get("kind", "banded")
            if kind == "banded":
                modes = banded_selfadjoint_family(
                    self.N,
                    self.n,
                    seed=self.seed,
                    band=float(self.w_random.get("band", 8.0)),
                    kmax_box=int(self.w_random.get("kmax_box", 1)),
                )
            elif kind == "web":
                modes = resonant_web_family(self.N, self.n, seed=self.seed)
            else:
                raise ValidationError("w_random.kind must be 'banded' or 'web'")
            modes = modes.scale(float(self.w_random.get("scale", 1.0)))
        elif self.w_terms:
            modes = build_w_modes(self.w_terms, self.n, self.N, basis=basis)
        else:
            raise ValidationError("no perturbation configured (w_terms or w_random)")
        return lam0, modes, d

    def initial_state(self) -> np.ndarray:
        kind = self.evolve_opts["psi0"]
        if kind == "ground":
            psi = np.zeros(self.N, dtype=complex)
            psi[0] = 1.0
            return psi
        if kind == "mix":
            psi = np.exp(-0.35 * np.arange(self.N)).astype(complex)
            return psi / np.linalg.norm(psi)
        raise ValidationError("psi0 must be 'ground' or 'mix'")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_spectrum(args) -> int:
    if args.coeffs:
        coeffs = tuple(float(c) for c in args.coeffs.split(","))
        pot = PotentialSpec(l=args.l, coeffs=coeffs)
    else:
        pot = PotentialSpec.pure_power(args.l)
    basis = solve_h0(pot, args.n, refine=args.refine)
    basis.to_json(args.out)
    lo = max(2, int(0.2 * args.n))
    hi = max(lo + 5, int(0.6 * args.n))
    summary = {}
    if hi <= args.n:
        c_fit, dev = check_asymptotics(basis, args.l, (lo, hi))
        summary = {"c_fit": c_fit, "max_rel_dev": dev, "fit_range": [lo, hi]}
    write_manifest(
        args.out + ".manifest.json",
        {
            "command": "spectrum",
            "l": args.l,
            "n": args.n,
            "coeffs": list(pot.coeffs),
            "refine": args.refine,
            "asymptotics": summary,
        },
        seed=None,
    )
    print(f"spectrum: N={args.n} eigenpairs written to {args.out}")
    return 0


def _cmd_measure(args) -> int:
    params = DiophantineParams(gamma=args.gamma, tau=args.tau, Kmax=args.kmax, n=args.n)
    frac, ci = excluded_measure(
        params, predicate=args.set, samples=args.samples, seed=args.seed
    )
    rows = [
        {
            "gamma": args.gamma,
            "tau": args.tau,
            "n": args.n,
            "samples": args.samples,
            "excluded_fraction": frac,
            "ci95": ci,
        }
    ]
    emit_report(rows, MEASURE_COLUMNS, args.out)
    write_manifest(
        args.out + ".manifest.json",
        {
            "command": "measure",
            "set": args.set,
            "gamma": args.gamma,
            "tau": args.tau,
            "n": args.n,
            "kmax": args.kmax,
            "samples": args.samples,
        },
        seed=args.seed,
    )
    print(f"measure: excluded fraction {frac:.6g} +- {ci:.2g} -> {args.out}")
    return 0


def _cmd_reduce(args) -> int:
    cfg = RunConfig.from_toml(args.config)
    lam0, modes, d = cfg.spectral_data()
    P0 = modes.scale(cfg.eps)
    result = run_kam(
        lam0,
        P0,
        cfg.omega,
        cfg.schedule,
        cfg.frame(),
        d=d,
        lipschitz_h=cfg.lipschitz_h,
    )
    emit_report(result.ledger, LEDGER_COLUMNS, cfg.output["ledger"])
    state = {
        "lambda_inf": result.lambda_inf.tolist(),
        "deviations": result.deviations.tolist(),
        "converged": result.converged,
        "floor_reached": result.floor_reached,
        "chain_manifest": [
            {
                "stage": i + 1,
                "kmax": X.kmax(),
                "modes": len(X.modes),
            }
            for i, X in enumerate(result.chain.generators)
        ],
    }
    with open(cfg.output["state"], "w") as f:
        json.dump(state, f, indent=2, sort_keys=True)
    write_manifest(cfg.output["manifest"], cfg.raw, seed=cfg.seed)
    print(
        f"reduce: {len(result.ledger) - 1} stages, final eps1 = "
        f"{result.ledger[-1]['eps1_measured']:.3e} -> {cfg.output['ledger']}"
    )
    return 0


def _cmd_evolve(args) -> int:
    cfg = RunConfig.from_toml(args.config)
    lam0, modes, _d = cfg.spectral_data()
    run = EvolutionRun(
        omega=cfg.omega,
        eps=cfg.eps,
        T_final=cfg.evolve_opts["t_final"],
        dt=cfg.evolve_opts["dt"],
        psi0=cfg.initial_state(),
        s_values=cfg.evolve_opts["s_values"],
        sample_stride=cfg.evolve_opts["stride"],
    )
    trace = evolve(run, lam0, modes, check_error=cfg.evolve_opts["check_error"])
    out_path = args.out or cfg.output["trace"]
    rows = []
    s_list = cfg.evolve_opts["s_values"]
    for i, t in enumerate(trace.times):
        rows.append(
            {
                "t": float(t),
                "l2": float(trace.l2[i]),
                "h1": float(trace.hs[s_list[0]][i]) if s_list else float("nan"),
                "h2": float(trace.hs[s_list[1]][i]) if len(s_list) > 1 else float("nan"),
                "leakage": float(trace.leakage[i]),
                "unitarity_defect": abs(float(trace.l2[i]) - 1.0),
            }
        )
    emit_report(rows, TRACE_COLUMNS, out_path)
    write_manifest(cfg.output["manifest"], cfg.raw, seed=cfg.seed)
    print(f"evolve: {len(rows)} samples -> {out_path}")
    return 0


def _cmd_verify(args) -> int:
    report = lemma_suite(seed=args.seed, trials=args.trials)
    for name, info in report.checks.items():
        line = ", ".join(f"{k}={_fmt(v)}" for k, v in info.items())
        print(f"verify {name}: PASS ({line})")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(
                {"checks": report.checks, "violations": report.violations},
                f,
                indent=2,
                sort_keys=True,
            )
        write_manifest(
            args.out + ".manifest.json",
            {"command": "verify", "trials": args.trials},
            seed=args.seed,
        )
    return 0 if report.ok else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kamred",
        description="Reducibility laboratory for quasiperiodically forced oscillators",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("spectrum", help="eigenpairs of the unperturbed operator")
    p.add_argument("--l", type=int, required=True)
    p.add_argument("--n", type=int, required=True, help="number of eigenpairs")
    p.add_argument("--coeffs", type=str, default="")
    p.add_argument("--refine", type=int, default=3)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=_cmd_spectrum)

    p = sub.add_parser("measure", help="Monte-Carlo excluded-frequency measure")
    p.add_argument("--set", choices=["omega0", "omega1"], default="omega0")
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--kmax", type=int, default=50)
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=_cmd_measure)

    p = sub.add_parser("reduce", help="run the quadratic reduction loop")
    p.add_argument("--config", type=str, required=True)
    p.set_defaults(func=_cmd_reduce)

    p = sub.add_parser("evolve", help="integrate the forced Schrodinger flow")
    p.add_argument("--config", type=str, required=True)
    p.add_argument("--out", type=str, default="")
    p.set_defaults(func=_cmd_evolve)

    p = sub.add_parser("verify", help="randomized verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--out", type=str, default="")
    p.set_defaults(func=_cmd_verify)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        return args.func(args)
    except ResonanceError as exc:
        print(f"resonance certificate: {json.dumps(exc.certificate())}", file=sys.stderr)
        return 3
    except (BoundViolationError, NonContractionError, ResidualError, QuadratureError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValidationError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 2
    except KamredError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(dispatch())
