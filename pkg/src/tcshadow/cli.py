"""Command-line entry point.

Every subcommand writes a JSON report (``schema: 1``) and exits with
0 on success, 1 when a certificate fails, 2 on bad input and 3 when a solver
does not converge.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import counterexample as cx
from .cps import default_lambda_prime, dual_value_via_cps, find_cps, is_martingale
from .dual_solver import (
    Deflator,
    deflator_dual_value,
    dual_value,
    extract_deflator,
    verify_deflator,
    verify_local_shadow,
    verify_optimality_relations,
    verify_trade_alignment,
)
from .event_tree import TreeValidationError, load_market, market_from_dict, market_to_dict
from .portfolio import Strategy, expected_utility, is_admissible, parse_utility
from .primal_solver import NoCPSError, SolverError, solve_frictional
from .shadow import ShadowCandidate, candidate_from_dual, verify_shadow

SCHEMA = 1
OUT_DIR_ENV = "TCSHADOW_OUT_DIR"
EXIT_OK, EXIT_CERT, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2, 3


class InputError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    market: str | None = None
    utility: str = "log"
    x: float = 1.0
    y: float | None = None
    lambda_prime: float | None = None
    gap_tol: float = 1e-8
    value_tol: float = 1e-7
    N: int = 30
    out: str | None = None
    seed: int = 0
    samples: int = 100
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        for name in ("gap_tol", "value_tol"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if not (self.x > 0 and math.isfinite(self.x)):
            raise InputError("x must be positive")
        if self.y is not None and not self.y > 0:
            raise InputError("y must be positive")

    def public(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k not in ("extra", "out")}
        d.update(self.extra)
        return d


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def _out_path(cfg: RunConfig) -> Path:
    if cfg.out:
        return Path(cfg.out)
    return Path(os.environ.get(OUT_DIR_ENV, ".")) / f"{cfg.command}-report.json"


def write_report(report: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(report), indent=2, sort_keys=True) + "\n")


def _load(cfg: RunConfig):
    if not cfg.market:
        raise InputError("--market is required")
    try:
        return load_market(cfg.market)
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"cannot read market {cfg.market}: {exc}") from exc


# -- subcommands -------------------------------------------------------------------

def _solve(cfg: RunConfig, timings: dict) -> tuple[dict, bool]:
    market = _load(cfg)
    u = parse_utility(cfg.utility)
    t = time.perf_counter()
    cps = find_cps(market, cfg.lambda_prime)
    timings["cps"] = time.perf_counter() - t
    t = time.perf_counter()
    primal = solve_frictional(market, u, cfg.x, lam_prime=cfg.lambda_prime, gap_tol=cfg.gap_tol)
    timings["primal"] = time.perf_counter() - t
    t = time.perf_counter()
    defl = extract_deflator(market, u, primal)
    dual = dual_value(market, u, defl.y, yhat=defl.y)
    timings["dual"] = time.perf_counter() - t
    t = time.perf_counter()
    drep = verify_deflator(market, defl, seed=cfg.seed)
    orep = verify_optimality_relations(market, u, cfg.x, primal, dual, seed=cfg.seed)
    orep_extracted = verify_optimality_relations(market, u, cfg.x, primal, defl, seed=cfg.seed)
    arep = verify_trade_alignment(market, primal, defl)
    lrep = verify_local_shadow(market, u, cfg.x, primal, defl, samples=cfg.samples, seed=cfg.seed)
    verdict = verify_shadow(market, u, cfg.x, candidate_from_dual(market, defl), primal=primal,
                            deflator=defl, value_tol=cfg.value_tol)
    timings["certificates"] = time.perf_counter() - t
    ok = (drep.ok and orep_extracted.ok and orep.checks["conjugacy"]["ok"] and arep.ok
          and lrep.ok and cps.feasible)
    report = {
        "market": market_to_dict(market),
        "utility": u.spec(),
        "x": cfg.x,
        "primal": primal.to_dict(),
        "deflator": defl.to_dict(market.tree),
        "dual": {"value": dual.value, "y": dual.y, "status": dual.status},
        "certificates": {
            "deflator": drep.to_dict(),
            "optimality_relations": orep_extracted.to_dict(),
            "dual_program_relations": orep.to_dict(),
            "trade_alignment": arep.to_dict(),
            "local_shadow": lrep.to_dict(),
        },
        "cps": cps.to_dict(),
        "shadow": verdict.to_dict(market.tree),
        "ok": ok,
    }
    return report, ok


def _dual(cfg: RunConfig, timings: dict) -> tuple[dict, bool]:
    market = _load(cfg)
    u = parse_utility(cfg.utility)
    y = cfg.y
    if y is None:
        primal = solve_frictional(market, u, cfg.x, lam_prime=cfg.lambda_prime, gap_tol=cfg.gap_tol)
        y = extract_deflator(market, u, primal).y
    t = time.perf_counter()
    dual = dual_value(market, u, y)
    cps_value, _ = dual_value_via_cps(market, u, y)
    timings["dual"] = time.perf_counter() - t
    drep = verify_deflator(market, dual.deflator, seed=cfg.seed)
    agree = abs(dual.value - cps_value) < 1e-6
    report = {
        "market": market_to_dict(market), "utility": u.spec(), "y": y,
        "dual": {"value": dual.value, "status": dual.status, "value_via_cps": cps_value,
                 "agree": agree},
        "deflator": dual.deflator.to_dict(market.tree),
        "certificates": {"deflator": drep.to_dict()},
    }
    ok = drep.ok and agree
    report["ok"] = ok
    return report, ok


def _cps(cfg: RunConfig, timings: dict) -> tuple[dict, bool]:
    market = _load(cfg)
    lp = default_lambda_prime(market.lam) if cfg.lambda_prime is None else cfg.lambda_prime
    t = time.perf_counter()
    res = find_cps(market, lp)
    timings["cps"] = time.perf_counter() - t
    report = {"market": market_to_dict(market), "cps": res.to_dict(),
              "system": None if res.system is None else res.system.to_dict(market.tree)}
    report["ok"] = res.feasible
    return report, res.feasible


def _shadow(cfg: RunConfig, timings: dict) -> tuple[dict, bool]:
    market = _load(cfg)
    u = parse_utility(cfg.utility)
    t = time.perf_counter()
    primal = solve_frictional(market, u, cfg.x, lam_prime=cfg.lambda_prime, gap_tol=cfg.gap_tol)
    defl = extract_deflator(market, u, primal)
    cand_path = cfg.extra.get("candidate")
    if cand_path:
        try:
            data = json.loads(Path(cand_path).read_text())
            price = np.array([float(data["price"][nid]) for nid in market.tree.ids])
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise InputError(f"cannot read candidate {cand_path}: {exc}") from exc
        cand = ShadowCandidate(price, str(cand_path))
    else:
        cand = candidate_from_dual(market, defl)
    verdict = verify_shadow(market, u, cfg.x, cand, primal=primal, deflator=defl,
                            value_tol=cfg.value_tol)
    timings["shadow"] = time.perf_counter() - t
    report = {"market": market_to_dict(market), "utility": u.spec(), "x": cfg.x,
              "shadow": verdict.to_dict(market.tree),
              "note": "the candidate is derived from one dual minimizer; uniqueness is not claimed"}
    # a negative verdict is a finding, not a failed certificate
    report["ok"] = True
    return report, True


def _counterexample(cfg: RunConfig, timings: dict) -> tuple[dict, bool]:
    e = cfg.extra
    try:
        params = cx.CounterexampleParams(lam=e["lam"], epsilon=e["epsilon"], q0=e["q0"],
                                         q1=e["q1"], N=cfg.N)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    t = time.perf_counter()
    cert = cx.verify_nonexistence(params, seed=cfg.seed)
    timings["certificate"] = time.perf_counter() - t
    market = cx.build_market(params)
    report = {"certificate": cert.to_dict(), "market": market_to_dict(market),
              "ok": cert.ok}
    if e.get("market_out"):
        Path(e["market_out"]).write_text(json.dumps(market_to_dict(market), indent=2) + "\n")
    return report, cert.ok


def verify_report(report: dict, tol: float = 1e-9) -> list[str]:
    """Re-check the market, strategy, value and deflator embedded in a solve report."""
    problems = []
    try:
        market = market_from_dict(report["market"])
        u = parse_utility(report["utility"])
        x = float(report["x"])
        primal = report["primal"]
        strat = Strategy.from_dict(primal["strategy"], market.tree)
        defl = Deflator.from_dict(report["deflator"], market.tree)
        value = float(primal["value"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed report: {exc}") from exc
    if not is_admissible(strat, market, x):
        problems.append("strategy is not admissible")
    ev = expected_utility(strat, market, u)
    if not abs(ev - value) <= tol * max(1.0, abs(value)):
        problems.append(f"reported value {value} differs from recomputed {ev}")
    if not verify_deflator(market, defl, k=10).ok:
        problems.append("deflator fails its certificate")
    gap = deflator_dual_value(market, u, defl) + x * defl.y - ev
    bound = float(primal.get("gap_rounding_bound") or 0.0)
    if not abs(gap) <= 1e-8 * max(1.0, abs(ev)) + bound:
        problems.append(f"duality gap {gap:.3e} too large")
    if not report.get("ok", False):
        problems.append("report records a failed certificate")
    return problems


def _verify(cfg: RunConfig, timings: dict) -> tuple[dict, bool]:
    path = cfg.extra.get("report")
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, TypeError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read report {path}: {exc}") from exc
    if data.get("schema") != SCHEMA:
        raise InputError(f"unsupported report schema {data.get('schema')!r}")
    if data.get("command") != "solve":
        raise InputError("only solve reports can be verified")
    problems = verify_report(data)
    return {"verified": path, "problems": problems, "ok": not problems}, not problems


COMMANDS = {
    "solve": _solve,
    "dual": _dual,
    "cps-check": _cps,
    "shadow-check": _shadow,
    "counterexample": _counterexample,
    "verify": _verify,
}


def run(cfg: RunConfig) -> tuple[int, dict]:
    """Execute one subcommand, write its report and return the exit code."""
    timings: dict = {}
    start = time.perf_counter()
    try:
        cfg.validate()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            body, ok = COMMANDS[cfg.command](cfg, timings)
        code = EXIT_OK if ok else EXIT_CERT
    except (InputError, TreeValidationError, NoCPSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        body, code = {"error": str(exc), "ok": False}, EXIT_INPUT
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        body, code = {"error": str(exc), "ok": False}, EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        body, code = {"error": str(exc), "ok": False}, EXIT_INPUT
    timings["total"] = time.perf_counter() - start
    report = {"schema": SCHEMA, "command": cfg.command, "config": cfg.public(),
              "exit_code": code, **body, "timings": timings}
    write_report(report, _out_path(cfg))
    if code == EXIT_CERT:
        print("certificate failure; see report", file=sys.stderr)
    return code, report


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tcshadow", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, market=True):
        if market:
            p.add_argument("--market", required=True, help="market JSON file")
        p.add_argument("--out", help=f"report path (default ${OUT_DIR_ENV}/<command>-report.json)")
        p.add_argument("--seed", type=int, default=0, help="seed for sampled checks")

    def solver_opts(p):
        p.add_argument("--utility", default="log", help="log or power:<p>")
        p.add_argument("--x", type=float, default=1.0, help="initial capital")
        p.add_argument("--lambda-prime", type=float, default=None,
                       help="spread for the robust no-arbitrage check (default lambda/2)")
        p.add_argument("--gap-tol", type=float, default=1e-8)
        p.add_argument("--value-tol", type=float, default=1e-7)

    p = sub.add_parser("solve", help="solve, certify and report")
    common(p)
    solver_opts(p)
    p.add_argument("--samples", type=int, default=100, help="local shadow samples")

    p = sub.add_parser("dual", help="dual value at y")
    common(p)
    solver_opts(p)
    p.add_argument("--y", type=float, default=None, help="dual scale (default: u'(x))")

    p = sub.add_parser("cps-check", help="consistent price system feasibility")
    common(p)
    p.add_argument("--lambda-prime", type=float, default=None)

    p = sub.add_parser("shadow-check", help="shadow price verdict")
    common(p)
    solver_opts(p)
    p.add_argument("--candidate", help="JSON {\"price\": {node: value}}; default from the dual")

    p = sub.add_parser("counterexample", help="non-existence certificate")
    common(p, market=False)
    p.add_argument("--lambda", dest="lam", type=float, default=0.2)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--q0", type=float, default=0.1)
    p.add_argument("--q1", type=float, default=0.1)
    p.add_argument("--N", type=int, default=30)
    p.add_argument("--market-out", help="also write the truncated market JSON here")

    p = sub.add_parser("verify", help="re-check a solve report")
    common(p, market=False)
    p.add_argument("--report", required=True)
    return ap


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    known = {f for f in RunConfig.__dataclass_fields__ if f != "extra"}
    kw = {k: v for k, v in vars(ns).items() if k in known and v is not None}
    extra = {k: v for k, v in vars(ns).items() if k not in known}
    return RunConfig(**kw, extra=extra)


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    code, _ = run(config_from_args(ns))
    return code


if __name__ == "__main__":
    sys.exit(main())
