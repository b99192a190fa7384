"""Command-line interface: verification runs, communication sweeps,
single-run simulation reports, and analytic cost tables.

Every command is deterministic: a fixed seed produces byte-identical CSV
and JSON, so outputs can be diffed across runs and machines.

Exit codes: 0 success, 1 verification failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys

import numpy as np

from .attention import MaskKind, reference_attention, reference_attention_grad
from .costmodel import (COMM_STRATEGIES, CostParams, FabricParams, PRESETS,
                        comm_cost, estimate_time, memory_cost,
                        predicted_total_words, reconcile, total_step_cost)
from .errors import ConfigError, InfeasibleStrategyError
from .linalg import Precision
from .mesh import PHASE_BWD, PHASE_FWD
from .strategies import STRATEGY_NAMES, DistAttnConfig, run_backward, run_forward

ORACLE_MAX_N = 4096
SWEEP_SCHEMA = ("strategy", "n", "h", "p", "mask", "phase", "words_measured",
                "words_predicted", "match", "score_elems_min", "score_elems_max",
                "note")
COST_SCHEMA = ("strategy", "b", "n", "h", "m", "l", "p", "words_per_layer",
               "schedule_words", "feasible", "step_linear_words",
               "step_attention_words", "dominant_term", "memory_words",
               "memory_simplified", "time_latency_s", "time_bandwidth_s",
               "time_compute_s", "time_total_s")

_TOLERANCES = {
    Precision.DOUBLE: (1e-9, 1e-8),
    Precision.SINGLE: (2e-3, 2e-2),
}


def _precision_from_env() -> Precision:
    raw = os.environ.get("ATTN2D_PRECISION", "double").strip().lower()
    try:
        return Precision(raw)
    except ValueError:
        raise ConfigError(
            f"ATTN2D_PRECISION must be 'single' or 'double', got {raw!r}") from None


def _gen_inputs(n: int, h: int, seed: int, dtype):
    """Seeded uniform [-1, 1] tensors, drawn in a fixed order."""
    rng = np.random.default_rng(seed)
    draws = [rng.uniform(-1.0, 1.0, size=(n, h)) for _ in range(4)]
    q, k, v, d_out = (a.astype(dtype) for a in draws)
    return q, k, v, d_out


def _combo_problem(strategy: str, n: int, p: int) -> str | None:
    """Reason a (strategy, n, p) combination cannot run, or None."""
    import math
    if n % p != 0:
        return f"p={p} does not divide n={n}"
    side = math.isqrt(p)
    if side * side != p:
        return f"p={p} is not a perfect square"
    if strategy == "ring" and p > 1 and n % (2 * p) != 0:
        return f"ring layout needs 2*p={2 * p} to divide n={n}"
    return None


def _expected_scores(n: int, mask: MaskKind) -> int:
    return n * (n + 1) // 2 if mask is MaskKind.CAUSAL else n * n


def _run_case(strategy: str, cfg: DistAttnConfig, seed: int, with_oracle: bool):
    """One forward+backward rollout with ledger reconciliation and
    (optionally) dense-oracle error measurement."""
    q, k, v, d_out = _gen_inputs(cfg.n, cfg.h, seed, cfg.dtype)
    fwd = run_forward(strategy, cfg, q, k, v)
    bwd = run_backward(strategy, cfg, fwd.saved, d_out)
    rec_fwd = reconcile(fwd.ledger, strategy, cfg.n, cfg.h, cfg.p, phases=(PHASE_FWD,))
    rec_bwd = reconcile(bwd.ledger, strategy, cfg.n, cfg.h, cfg.p, phases=(PHASE_BWD,))
    out = {
        "fwd": fwd, "bwd": bwd,
        "reconcile_fwd": rec_fwd, "reconcile_bwd": rec_bwd,
        "score_total_fwd": sum(fwd.score_elements.values()),
        "score_total_bwd": sum(bwd.score_elements.values()),
        "score_expected": _expected_scores(cfg.n, cfg.mask),
        "errors": None,
    }
    if with_oracle and cfg.n <= ORACLE_MAX_N:
        o_ref = reference_attention(q, k, v, cfg.mask_spec, cfg.scale)
        dq_ref, dk_ref, dv_ref = reference_attention_grad(
            q, k, v, d_out, cfg.mask_spec, cfg.scale)
        out["errors"] = {
            "forward": float(np.abs(fwd.o - o_ref).max()),
            "dq": float(np.abs(bwd.dq - dq_ref).max()),
            "dk": float(np.abs(bwd.dk - dk_ref).max()),
            "dv": float(np.abs(bwd.dv - dv_ref).max()),
        }
    return out


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

_VERIFY_MATRIX = tuple(
    (n, p, h)
    for (n, p) in ((8, 1), (8, 4), (16, 4), (32, 4), (32, 16), (64, 16))
    for h in ((4,) if n < 64 else (4, 8))
)


def cmd_verify(args) -> int:
    precision = _precision_from_env()
    tol_fwd, tol_bwd = _TOLERANCES[precision]
    names = [args.strategy] if args.strategy else list(STRATEGY_NAMES)
    for name in names:
        if name not in STRATEGY_NAMES:
            raise ConfigError(f"unknown strategy {name!r}")
    failures = 0
    cases = 0
    injected = args.inject_fault
    for strategy in names:
        for n, p, h in _VERIFY_MATRIX:
            if args.max_n and n > args.max_n:
                continue
            problem = _combo_problem(strategy, n, p)
            if problem:
                print(f"SKIP strategy={strategy} n={n} p={p} h={h}: {problem}")
                continue
            for mask in (MaskKind.NONE, MaskKind.CAUSAL):
                cases += 1
                cfg = DistAttnConfig(n=n, h=h, p=p, mask=mask, precision=precision)
                res = _run_case(strategy, cfg, seed=args.seed, with_oracle=True)
                if injected:
                    # Deliberately corrupt one measured count to prove the
                    # reconciler trips on tampered ledgers.
                    res["fwd"].ledger.charge_send(
                        next(iter(res["fwd"].saved)), PHASE_FWD, "injected_fault", 1)
                    res["reconcile_fwd"] = reconcile(
                        res["fwd"].ledger, strategy, cfg.n, cfg.h, cfg.p,
                        phases=(PHASE_FWD,))
                    injected = False
                errs = res["errors"]
                checks = {
                    "forward_error": errs["forward"] <= tol_fwd,
                    "grad_error": max(errs["dq"], errs["dk"], errs["dv"]) <= tol_bwd,
                    "ledger_fwd": res["reconcile_fwd"].ok,
                    "ledger_bwd": res["reconcile_bwd"].ok,
                    "score_count": (res["score_total_fwd"] == res["score_expected"]
                                    and res["score_total_bwd"] == res["score_expected"]),
                }
                ok = all(checks.values())
                status = "PASS" if ok else "FAIL"
                detail = (f"max_fwd={errs['forward']:.3e} "
                          f"max_bwd={max(errs['dq'], errs['dk'], errs['dv']):.3e}")
                if not ok:
                    bad = ",".join(k for k, good in checks.items() if not good)
                    detail += f" failed={bad}"
                    failures += 1
                print(f"{status} strategy={strategy} n={n} p={p} h={h} "
                      f"mask={mask.value} {detail}")
    print(f"verified {cases} cases, {failures} failures")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _parse_int_list(raw: str, what: str) -> list[int]:
    if raw is None or raw.strip() == "":
        return []
    try:
        return [int(tok) for tok in raw.split(",") if tok.strip() != ""]
    except ValueError:
        raise ConfigError(f"{what} must be a comma-separated integer list, got {raw!r}") from None


def cmd_sweep(args) -> int:
    precision = _precision_from_env()
    names = [tok for tok in args.strategies.split(",") if tok]
    for name in names:
        if name not in STRATEGY_NAMES:
            raise ConfigError(f"unknown strategy {name!r}")
    n_list = _parse_int_list(args.n, "--n")
    p_list = _parse_int_list(args.p, "--p")
    mask = MaskKind(args.mask)
    buf = io.StringIO()
    buf.write("# attn2d sweep schema v1\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_SCHEMA)
    for strategy in sorted(names):
        for n in sorted(n_list):
            for p in sorted(p_list):
                problem = _combo_problem(strategy, n, p)
                if problem:
                    writer.writerow([strategy, n, args.h, p, mask.value,
                                     "", "", "", "skipped", "", "", problem])
                    continue
                cfg = DistAttnConfig(n=n, h=args.h, p=p, mask=mask, precision=precision)
                res = _run_case(strategy, cfg, seed=args.seed, with_oracle=False)
                for phase, side in ((PHASE_FWD, "fwd"), (PHASE_BWD, "bwd")):
                    run = res["fwd"] if side == "fwd" else res["bwd"]
                    measured = run.ledger.words_sent(phase=phase)
                    predicted = predicted_total_words(strategy, n, args.h, p, phase)
                    scores = list(run.score_elements.values())
                    writer.writerow([
                        strategy, n, args.h, p, mask.value, phase,
                        measured, predicted,
                        "yes" if measured == predicted else "no",
                        min(scores), max(scores), "",
                    ])
    text = buf.getvalue()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _coord_key(coord) -> str:
    return f"{coord.r},{coord.c}"


def _peaks_dict(peaks: dict) -> dict:
    out: dict[str, dict[str, int]] = {}
    for (coord, stream), peak in peaks.items():
        out.setdefault(_coord_key(coord), {})[stream] = peak
    return out


def cmd_simulate(args) -> int:
    precision = _precision_from_env()
    if args.strategy not in STRATEGY_NAMES:
        raise ConfigError(f"unknown strategy {args.strategy!r}")
    mask = MaskKind(args.mask)
    cfg = DistAttnConfig(n=args.n, h=args.h, p=args.p, mask=mask,
                         scale=args.scale, precision=precision)
    problem = _combo_problem(args.strategy, args.n, args.p)
    if problem:
        raise ConfigError(problem)
    res = _run_case(args.strategy, cfg, seed=args.seed, with_oracle=True)
    fwd, bwd = res["fwd"], res["bwd"]
    grads = np.concatenate([bwd.dq.ravel(), bwd.dk.ravel(), bwd.dv.ravel()])
    report = {
        "config": {
            "strategy": args.strategy, "n": cfg.n, "h": cfg.h, "p": cfg.p,
            "mask": cfg.mask.value, "precision": precision.value,
            "scale": cfg.scale, "seed": args.seed,
        },
        "output_sha256": hashlib.sha256(np.ascontiguousarray(fwd.o).tobytes()).hexdigest(),
        "grads_sha256": hashlib.sha256(np.ascontiguousarray(grads).tobytes()).hexdigest(),
        "max_error": res["errors"],
        "ledger": {"forward": fwd.ledger.to_dict(), "backward": bwd.ledger.to_dict()},
        "reconcile_ok": {"forward": res["reconcile_fwd"].ok,
                         "backward": res["reconcile_bwd"].ok},
        "score_elements": {_coord_key(c): int(s) for c, s in fwd.score_elements.items()},
        "score_expected_total": res["score_expected"],
        "saved_state_words": {_coord_key(c): st.words for c, st in fwd.saved.items()},
        "buffer_peaks": {"forward": _peaks_dict(fwd.buffer_peaks),
                         "backward": _peaks_dict(bwd.buffer_peaks)},
    }
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------------

def cmd_cost(args) -> int:
    if args.preset:
        try:
            preset = PRESETS[args.preset]
        except KeyError:
            raise ConfigError(
                f"unknown preset {args.preset!r}; choices: {', '.join(PRESETS)}") from None
        b, h, m, l = args.b, preset.h, preset.m, preset.l
        n_list = _parse_int_list(args.n, "--n") or [131072]
        header_note = (f"# preset {preset.name}: l={preset.l} m={preset.m} "
                       f"h={preset.h} hidden={preset.hidden}\n")
    else:
        fields = _parse_int_list(args.params, "--params")
        if len(fields) != 5:
            raise ConfigError("--params expects b,n,h,m,l (five integers)")
        b, n0, h, m, l = fields
        n_list = _parse_int_list(args.n, "--n") or [n0]
        header_note = f"# explicit params: b={b} h={h} m={m} l={l}\n"
    p_list = _parse_int_list(args.p, "--p")
    if not p_list:
        raise ConfigError("--p must list at least one processor count")
    fabric = None
    if args.alpha or args.beta:
        fabric = FabricParams(alpha=args.alpha, beta=args.beta,
                              flops_rate=args.flops_rate)

    buf = io.StringIO()
    buf.write("# attn2d cost schema v1\n")
    buf.write(header_note)
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COST_SCHEMA)
    for n in sorted(n_list):
        for p in sorted(p_list):
            params = CostParams(b=b, n=n, h=h, m=m, l=l, p=p)
            step = total_step_cost(params)
            for strategy in COMM_STRATEGIES:
                try:
                    cost = comm_cost(strategy, params)
                except InfeasibleStrategyError:
                    writer.writerow([strategy, b, n, h, m, l, p, "", "", "no",
                                     "", "", "", "", "", "", "", "", ""])
                    continue
                mem = memory_cost(strategy, params)
                times = ["", "", "", ""]
                if fabric is not None:
                    est = estimate_time(strategy, params, fabric, causal=args.causal)
                    times = [est.latency_s, est.bandwidth_s, est.compute_s, est.total_s]
                writer.writerow([
                    strategy, b, n, h, m, l, p,
                    cost.asymptotic_words,
                    cost.schedule_words if cost.schedule_words is not None else "",
                    "yes",
                    step.linear_words, step.attention_words, step.dominant,
                    mem.total_words, "yes" if mem.simplified else "no",
                    *times,
                ])
    text = buf.getvalue()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attn2d",
        description="Deterministic simulator for distributed exact attention.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_verify = sub.add_parser("verify", help="run the oracle-equivalence matrix")
    p_verify.add_argument("--strategy", default=None,
                          help="restrict to one strategy")
    p_verify.add_argument("--max-n", type=int, default=None,
                          help="skip cases with more tokens than this")
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--inject-fault", action="store_true",
                          help=argparse.SUPPRESS)
    p_verify.set_defaults(func=cmd_verify)

    p_sweep = sub.add_parser("sweep", help="measured vs predicted words over a grid")
    p_sweep.add_argument("--strategies", required=True,
                         help="comma-separated strategy names")
    p_sweep.add_argument("--n", required=True, help="comma-separated token counts")
    p_sweep.add_argument("--p", required=True, help="comma-separated processor counts")
    p_sweep.add_argument("--h", type=int, default=4, help="head dimension")
    p_sweep.add_argument("--mask", choices=["none", "causal"], default="none")
    p_sweep.add_argument("--seed", type=int, default=0)
    p_sweep.add_argument("--out", default=None, help="CSV output path (default stdout)")
    p_sweep.set_defaults(func=cmd_sweep)

    p_sim = sub.add_parser("simulate", help="one forward+backward run, JSON report")
    p_sim.add_argument("--strategy", required=True)
    p_sim.add_argument("--n", type=int, required=True)
    p_sim.add_argument("--p", type=int, required=True)
    p_sim.add_argument("--h", type=int, required=True)
    p_sim.add_argument("--mask", choices=["none", "causal"], default="none")
    p_sim.add_argument("--scale", type=float, default=1.0)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--json", default=None, help="JSON output path (default stdout)")
    p_sim.set_defaults(func=cmd_simulate)

    p_cost = sub.add_parser("cost", help="analytic cost tables")
    group = p_cost.add_mutually_exclusive_group(required=True)
    group.add_argument("--preset", default=None,
                       help=f"model preset: {', '.join(PRESETS)}")
    group.add_argument("--params", default=None, help="explicit b,n,h,m,l")
    p_cost.add_argument("--p", required=True, help="comma-separated processor counts")
    p_cost.add_argument("--n", default=None, help="comma-separated context lengths")
    p_cost.add_argument("--b", type=int, default=1, help="batch size (presets only)")
    p_cost.add_argument("--alpha", type=float, default=0.0, help="seconds per message")
    p_cost.add_argument("--beta", type=float, default=0.0, help="seconds per word")
    p_cost.add_argument("--flops-rate", type=float, default=1e12,
                        help="scalar ops per second for the time estimate")
    p_cost.add_argument("--causal", action="store_true",
                        help="use causal score counts in the time estimate")
    p_cost.add_argument("--out", default=None, help="CSV output path (default stdout)")
    p_cost.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
