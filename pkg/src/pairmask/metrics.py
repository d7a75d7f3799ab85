"""Faithfulness metrics for attribution reports.

All metrics read the attributions only through their ordering (descending,
ties broken toward the lower word index) and realize word removal as
zero-masking the embedding row, matching the mask semantics used while
fitting. Per-example work parallelizes across processes; reductions happen
in example order so results are bit-stable for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateModelError
from .explainers import AttributionReport
from .models import PairExample

METRICS = ("aopc", "posthoc", "degradation", "recovery")


@dataclass(frozen=True)
class MetricConfig:
    removal_depth: int = 10                                  # AOPC removes top 1..U words
    v_grid: tuple[int, ...] = tuple(range(1, 11))            # post-hoc accuracy keep sizes
    rho_grid: tuple[int, ...] = tuple(range(0, 101, 10))     # degradation percentages
    recovery_topk: int = 2

    def __post_init__(self):
        if self.removal_depth < 1:
            raise ContractError("removal depth must be >= 1")
        for name, grid in (("v_grid", self.v_grid), ("rho_grid", self.rho_grid)):
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ContractError(f"{name} must be strictly increasing")
        if not self.rho_grid or self.rho_grid[0] != 0 or self.rho_grid[-1] != 100:
            raise ContractError("rho grid must start at 0 and end at 100")
        if self.recovery_topk < 1:
            raise ContractError("recovery top-k must be >= 1")


@dataclass
class DegradationCurves:
    """Normalized probability curves for most/least-relevant-first removal."""

    rho_grid: tuple[int, ...]
    morf: np.ndarray
    lerf: np.ndarray
    p_full: float    # averaged p(y | x)
    p_empty: float   # averaged p(y | fully masked x)

    def __post_init__(self):
        self.morf = np.asarray(self.morf, dtype=np.float64)
        self.lerf = np.asarray(self.lerf, dtype=np.float64)
        for curve in (self.morf, self.lerf):
            if curve.shape != (len(self.rho_grid),):
                raise ContractError("curve length does not match the rho grid")
            if curve[0] != 1.0 or curve[-1] != 0.0:
                raise ContractError("curves must start at exactly 1 and end at exactly 0")


def order_desc(theta: np.ndarray) -> np.ndarray:
    """Word indices by descending attribution, ties toward the lower index."""
    theta = np.asarray(theta)
    return np.lexsort((np.arange(theta.shape[0]), -theta))


def order_asc(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta)
    return np.lexsort((np.arange(theta.shape[0]), theta))


def _check_pairing(examples, reports) -> None:
    if len(examples) != len(reports) or not examples:
        raise ContractError("need one report per example and at least one example")
    for ex, rep in zip(examples, reports):
        if (rep.n1, rep.n2) != (len(ex.tokens1), len(ex.tokens2)):
            raise ContractError(
                f"report for example {rep.example_id} does not match its example "
                f"({rep.n1}+{rep.n2} vs {len(ex.tokens1)}+{len(ex.tokens2)} words)")


def _p_masked(model, example: PairExample, y: int, zero_idx) -> float:
    mask = np.ones(example.n_words)
    mask[list(zero_idx)] = 0.0
    return float(model.predict_proba(example, mask)[y])


# ---------------------------------------------------------------------------
# per-example measurements (top-level so process pools can run them)
# ---------------------------------------------------------------------------


def _measure_example(model, example: PairExample, report: AttributionReport,
                     cfg: MetricConfig, wanted: tuple[str, ...]) -> dict:
    y = report.predicted_label
    n = example.n_words
    desc = order_desc(report.theta)
    out: dict = {}
    needs_model = any(m in wanted for m in ("aopc", "posthoc", "degradation"))
    p_full = float(model.predict_proba(example)[y]) if needs_model else 0.0

    if "aopc" in wanted:
        drops = 0.0
        for u in range(1, cfg.removal_depth + 1):
            drops += p_full - _p_masked(model, example, y, desc[:min(u, n)])
        out["aopc"] = drops / (cfg.removal_depth + 1)

    if "posthoc" in wanted:
        hits = []
        for v in cfg.v_grid:
            mask = np.zeros(n)
            mask[desc[:min(v, n)]] = 1.0
            hits.append(int(np.argmax(model.predict_proba(example, mask))) == y)
        out["posthoc"] = np.asarray(hits, dtype=np.float64)

    if "degradation" in wanted:
        asc = order_asc(report.theta)
        p_empty = _p_masked(model, example, y, range(n))
        morf, lerf = [], []
        for rho in cfg.rho_grid:
            count = 0 if rho == 0 else min(n, max(1, (rho * n) // 100))
            if count == 0:
                morf.append(p_full)
                lerf.append(p_full)
            elif count == n:
                morf.append(p_empty)
                lerf.append(p_empty)
            else:
                morf.append(_p_masked(model, example, y, desc[:count]))
                lerf.append(_p_masked(model, example, y, asc[:count]))
        out["degradation"] = (np.asarray(morf), np.asarray(lerf), p_full, p_empty)

    if "recovery" in wanted:
        gold = example.flat_rationale()
        if gold is None:
            raise ContractError(
                f"example {report.example_id} has no gold rationale; "
                "recovery needs planted data")
        out["recovery"] = float(gold <= set(int(i) for i in desc[:cfg.recovery_topk]))
    return out


def _measure_chunk(args) -> list[dict]:
    model, triples, cfg, wanted = args
    return [_measure_example(model, ex, rep, cfg, wanted) for ex, rep in triples]


def _measure(model, examples, reports, cfg: MetricConfig,
             wanted: tuple[str, ...], workers: int = 1) -> list[dict]:
    _check_pairing(examples, reports)
    triples = list(zip(examples, reports))
    if workers <= 1 or len(triples) < 4:
        return [_measure_example(model, ex, rep, cfg, wanted) for ex, rep in triples]
    size = max(1, len(triples) // max(1, 4 * workers))
    tasks = [(model, triples[i:i + size], cfg, wanted) for i in range(0, len(triples), size)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        out: list[dict] = []
        for part in pool.map(_measure_chunk, tasks):
            out.extend(part)
    return out


# ---------------------------------------------------------------------------
# public metrics
# ---------------------------------------------------------------------------


def aopc(model, examples, reports, removal_depth: int = 10, workers: int = 1) -> float:
    """Mean drop in the predicted class probability over top-1..U removals."""
    cfg = MetricConfig(removal_depth=removal_depth)
    rows = _measure(model, examples, reports, cfg, ("aopc",), workers)
    return float(np.mean([r["aopc"] for r in rows]))


def posthoc_accuracy(model, examples, reports, v: int, workers: int = 1) -> float:
    """Fraction of predictions unchanged when only the top-v words are kept."""
    if v < 1:
        raise ContractError("v must be >= 1")
    cfg = MetricConfig(v_grid=(v,))
    rows = _measure(model, examples, reports, cfg, ("posthoc",), workers)
    return float(np.mean([r["posthoc"][0] for r in rows]))


def posthoc_curve(model, examples, reports, v_grid=None, workers: int = 1) -> dict[int, float]:
    cfg = MetricConfig(v_grid=tuple(v_grid) if v_grid else MetricConfig().v_grid)
    rows = _measure(model, examples, reports, cfg, ("posthoc",), workers)
    acc = np.mean([r["posthoc"] for r in rows], axis=0)
    return {int(v): float(a) for v, a in zip(cfg.v_grid, acc)}


def _normalize_curves(rows, cfg: MetricConfig) -> DegradationCurves:
    morf = np.mean([r["degradation"][0] for r in rows], axis=0)
    lerf = np.mean([r["degradation"][1] for r in rows], axis=0)
    # per example the rho=0 entry is p(y|x) and rho=100 is p(y|empty), so the
    # averaged endpoints are read off the curves themselves; that makes
    # S(0) = 1 and S(100) = 0 exact regardless of float summation order
    p_full, p_empty = float(morf[0]), float(morf[-1])
    denom = p_full - p_empty
    if abs(denom) < 1e-9:
        raise DegenerateModelError(
            "model output barely depends on the input; degradation undefined")
    return DegradationCurves(cfg.rho_grid, (morf - p_empty) / denom,
                             (lerf - p_empty) / denom, p_full, p_empty)


def degradation_curves(model, examples, reports, rho_grid=None,
                       workers: int = 1) -> DegradationCurves:
    """Average probabilities over examples first, then normalize.

    S(rho) = (mean p(y|x_rho) - mean p(y|empty)) / (mean p(y|x) - mean p(y|empty)).
    """
    cfg = MetricConfig(rho_grid=tuple(rho_grid) if rho_grid else MetricConfig().rho_grid)
    rows = _measure(model, examples, reports, cfg, ("degradation",), workers)
    return _normalize_curves(rows, cfg)


def degradation_score(curves: DegradationCurves) -> float:
    """Trapezoidal integral of (LeRF - MoRF) / 100 over the percentage grid."""
    return float(np.trapezoid(curves.lerf - curves.morf,
                              x=np.asarray(curves.rho_grid, dtype=np.float64)) / 100.0)


def rationale_recovery(reports, examples, topk: int = 2, workers: int = 1) -> float:
    """Fraction of examples whose top-k attributed words cover the gold set."""
    cfg = MetricConfig(recovery_topk=topk)
    rows = _measure(None, examples, reports, cfg, ("recovery",), workers)
    return float(np.mean([r["recovery"] for r in rows]))


# ---------------------------------------------------------------------------
# one-pass evaluation used by the CLI
# ---------------------------------------------------------------------------


@dataclass
class MethodEvaluation:
    aopc: float | None = None
    posthoc: dict[int, float] | None = None
    curves: DegradationCurves | None = None
    degradation_score: float | None = None
    recovery: float | None = None
    n_examples: int = 0
    extras: dict = field(default_factory=dict)


def evaluate_reports(model, examples, reports, cfg: MetricConfig | None = None,
                     metrics=METRICS, workers: int = 1) -> dict[str, MethodEvaluation]:
    """Group reports by method tag and compute each requested metric per group."""
    cfg = cfg or MetricConfig()
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise ContractError(f"unknown metrics {bad}; choose from {METRICS}")
    groups: dict[str, list[AttributionReport]] = {}
    for rep in reports:
        groups.setdefault(rep.method, []).append(rep)

    results: dict[str, MethodEvaluation] = {}
    for method in sorted(groups):
        reps = sorted(groups[method], key=lambda r: r.example_id)
        for rep in reps:
            if not 0 <= rep.example_id < len(examples):
                raise ContractError(
                    f"report references unknown example id {rep.example_id}")
        exs = [examples[r.example_id] for r in reps]
        wanted = tuple(m for m in METRICS if m in metrics)
        rows = _measure(model, exs, reps, cfg, wanted, workers)
        ev = MethodEvaluation(n_examples=len(reps))
        if "aopc" in wanted:
            ev.aopc = float(np.mean([r["aopc"] for r in rows]))
        if "posthoc" in wanted:
            acc = np.mean([r["posthoc"] for r in rows], axis=0)
            ev.posthoc = {int(v): float(a) for v, a in zip(cfg.v_grid, acc)}
        if "degradation" in wanted:
            ev.curves = _normalize_curves(rows, cfg)
            ev.degradation_score = degradation_score(ev.curves)
        if "recovery" in wanted:
            ev.recovery = float(np.mean([r["recovery"] for r in rows]))
        results[method] = ev
    return results
