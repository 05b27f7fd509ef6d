"""Monte-Carlo targeting experiment on users' final sessions.

Every user gets a purchase probability from one of four scorers; each trial
targets user ``u`` with probability ``p_u``. A targeted user who transacts
in the final session is a true positive. Profit at a per-target cost ``c``
is ``revenue(TP) - (TP + FP) * c``; the breaking cost point is the ``c``
where that is zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyPopulation, MissingParams, NoTargets
from .features import REVENUE_INDEX, TRANSACTION_CLASS, Normalizer
from .model import ModelParams, predict

DEFAULT_TRIALS = 200
LOG_FLOOR = 1.0  # display floor for non-positive profits on the log plot


class ScorerKind(str, Enum):
    RANDOM = "random"
    STATISTICAL = "statistical"
    MODEL_LINEAR = "linear"
    MODEL_TIME_DECAY = "timedecay"


@dataclass
class ScoringMethod:
    kind: ScorerKind
    params: ModelParams | None = None
    normalizer: Normalizer | None = None
    noise_halfwidth: float = 0.05

    def __post_init__(self):
        self.kind = ScorerKind(self.kind)
        if self.kind in (ScorerKind.MODEL_LINEAR, ScorerKind.MODEL_TIME_DECAY) and self.params is None:
            raise MissingParams(f"{self.kind.value} scorer needs trained parameters")

    @property
    def label(self) -> str:
        return {
            ScorerKind.RANDOM: "Random",
            ScorerKind.STATISTICAL: "Statistical",
            ScorerKind.MODEL_LINEAR: "Linear",
            ScorerKind.MODEL_TIME_DECAY: "Time decaying",
        }[self.kind]


def score_users(method: ScoringMethod, journeys: Sequence, rng=None) -> np.ndarray:
    """Purchase probability per user for the final session.

    ``journeys`` are raw (unnormalized) encodings; model scorers apply their
    own normalizer. The statistical scorer only looks at sessions before the
    last one.
    """
    rng = np.random.default_rng(rng)
    n = len(journeys)
    if method.kind is ScorerKind.RANDOM:
        return rng.uniform(0.0, 1.0, size=n)
    if method.kind is ScorerKind.STATISTICAL:
        base = np.array(
            [float(np.mean(j.class_ids[:-1] == TRANSACTION_CLASS)) if len(j.class_ids) > 1 else 0.0 for j in journeys]
        )
        noise = rng.uniform(-method.noise_halfwidth, method.noise_halfwidth, size=n)
        return np.clip(base + noise, 0.0, 1.0)
    if method.params is None:
        raise MissingParams(f"{method.kind.value} scorer needs trained parameters")
    inputs = method.normalizer.transform(journeys) if method.normalizer is not None else list(journeys)
    return np.array([p[-1, TRANSACTION_CLASS] for p in predict(method.params, inputs)])


def final_session_outcomes(journeys: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """``(bought_last, revenue_last)`` from raw encodings."""
    bought = np.array([j.class_ids[-1] == TRANSACTION_CLASS for j in journeys], dtype=bool)
    revenue = np.array([float(j.session_vecs[-1][REVENUE_INDEX]) for j in journeys])
    return bought, revenue


def profit(revenue_tp, tp, fp, cost):
    return revenue_tp - (tp + fp) * cost


def breaking_point(tp_revenue_sum: float, tp: float, fp: float) -> float:
    """Per-target cost at which the campaign breaks even."""
    if tp + fp <= 0:
        raise NoTargets("breaking point undefined when nobody is targeted")
    return tp_revenue_sum / (tp + fp)


@dataclass
class TargetingOutcome:
    tp_mean: float
    tp_std: float
    fp_mean: float
    fp_std: float
    tp_pct: float
    fp_pct: float
    tp_pct_std: float
    fp_pct_std: float
    bp_mean: float
    bp_std: float
    trials: int
    n_buyers: int
    n_nonbuyers: int
    zero_target_trials: int = 0
    tp: np.ndarray = field(default=None, repr=False)
    fp: np.ndarray = field(default=None, repr=False)
    revenue_tp: np.ndarray = field(default=None, repr=False)
    bp: np.ndarray = field(default=None, repr=False)


def _ratio(num, den):
    return num / den if den else float("nan")


def summarize_trials(tp, fp, revenue_tp, n_buyers: int, n_nonbuyers: int) -> TargetingOutcome:
    """Aggregate per-trial counts. Trials that target nobody contribute a breaking point of 0."""
    tp = np.asarray(tp, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    revenue_tp = np.asarray(revenue_tp, dtype=np.float64)
    targeted = tp + fp
    bp = np.where(targeted > 0, revenue_tp / np.where(targeted > 0, targeted, 1.0), 0.0)
    return TargetingOutcome(
        tp_mean=float(tp.mean()),
        tp_std=float(tp.std()),
        fp_mean=float(fp.mean()),
        fp_std=float(fp.std()),
        tp_pct=_ratio(float(tp.mean()), n_buyers),
        fp_pct=_ratio(float(fp.mean()), n_nonbuyers),
        tp_pct_std=_ratio(float(tp.std()), n_buyers),
        fp_pct_std=_ratio(float(fp.std()), n_nonbuyers),
        bp_mean=float(bp.mean()),
        bp_std=float(bp.std()),
        trials=len(tp),
        n_buyers=int(n_buyers),
        n_nonbuyers=int(n_nonbuyers),
        zero_target_trials=int((targeted == 0).sum()),
        tp=tp,
        fp=fp,
        revenue_tp=revenue_tp,
        bp=bp,
    )


def simulate_targeting(p, bought_last, revenue_last, trials: int = DEFAULT_TRIALS, seed: int = 0) -> TargetingOutcome:
    """Bernoulli targeting per user and trial.

    Trial ``k`` draws from its own stream seeded by ``(seed, k)`` so any
    subset of trials can be recomputed independently.
    """
    p = np.asarray(p, dtype=np.float64)
    bought = np.asarray(bought_last, dtype=bool)
    revenue = np.asarray(revenue_last, dtype=np.float64)
    if p.size == 0:
        raise EmptyPopulation("no users to target")
    if not (p.shape == bought.shape == revenue.shape):
        raise ValueError("p, bought_last and revenue_last must be aligned")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if ((p < 0) | (p > 1)).any():
        raise ValueError("probabilities must lie in [0, 1]")
    tp = np.empty(trials)
    fp = np.empty(trials)
    rev = np.empty(trials)
    for k in range(trials):
        targeted = np.random.default_rng([seed, k]).random(p.size) < p
        hit = targeted & bought
        tp[k] = hit.sum()
        fp[k] = (targeted & ~bought).sum()
        rev[k] = revenue[hit].sum()
    return summarize_trials(tp, fp, rev, int(bought.sum()), int((~bought).sum()))


# --- profit curves -------------------------------------------------------------------


@dataclass
class ProfitCurve:
    method: str
    costs: np.ndarray
    mean_profit: np.ndarray


def default_cost_grid(n: int = 120, lo: float = 0.1, hi: float = 1000.0) -> np.ndarray:
    return np.geomspace(lo, hi, n)


def profit_curve(outcome: TargetingOutcome, costs, method: str = "") -> ProfitCurve:
    costs = np.asarray(costs, dtype=np.float64)
    if costs.size == 0:
        raise ValueError("cost grid is empty")
    if (np.diff(costs) < 0).any():
        raise ValueError("cost grid must be sorted ascending")
    per_trial = profit(outcome.revenue_tp[:, None], outcome.tp[:, None], outcome.fp[:, None], costs[None, :])
    return ProfitCurve(method, costs, per_trial.mean(axis=0))


def write_curves_csv(curves: Sequence[ProfitCurve], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "cost", "mean_profit"])
        for c in curves:
            for cost, value in zip(c.costs, c.mean_profit):
                w.writerow([c.method, repr(float(cost)), repr(float(value))])


def read_curves_csv(path) -> list:
    grouped: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            grouped.setdefault(row["method"], []).append((float(row["cost"]), float(row["mean_profit"])))
    return [ProfitCurve(m, np.array([c for c, _ in pts]), np.array([v for _, v in pts])) for m, pts in grouped.items()]


def render_plots(curves: Sequence[ProfitCurve], out_dir, floor: float = LOG_FLOOR) -> dict:
    """Write ``profit_linear.svg``, ``profit_log.svg`` and ``profit_curves.csv``.

    On the log plot profits at or below ``floor`` are drawn at ``floor``;
    the CSV always holds the unclamped values.
    """
    if not curves:
        raise ValueError("nothing to plot")
    for c in curves:
        if len(c.costs) == 0:
            raise ValueError(f"curve {c.method!r} has an empty cost grid")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"table": out / "profit_curves.csv"}
    write_curves_csv(curves, paths["table"])
    with matplotlib.rc_context({"svg.hashsalt": "gajourney", "svg.fonttype": "none"}):
        for scale in ("linear", "log"):
            fig, ax = plt.subplots(figsize=(6.4, 4.2))
            for c in curves:
                y = np.maximum(c.mean_profit, floor) if scale == "log" else c.mean_profit
                style = {"marker": "o"} if len(c.costs) == 1 else {}
                ax.plot(c.costs, y, label=c.method, **style)
            if scale == "log":
                ax.set_xscale("log")
                ax.set_yscale("log")
            else:
                ax.axhline(0.0, color="grey", linewidth=0.8)
            ax.set_xlabel("cost per targeted user")
            ax.set_ylabel("mean profit")
            ax.set_title(f"Revenue per targeting cost ({scale} scale)")
            ax.legend()
            fig.tight_layout()
            paths[scale] = out / f"profit_{scale}.svg"
            fig.savefig(paths[scale], format="svg", metadata={"Date": None})
            plt.close(fig)
    return paths


# --- experiment runner and reporting ----------------------------------------------------------


def run_experiment(journeys: Sequence, methods: Sequence[ScoringMethod], trials: int = DEFAULT_TRIALS,
                   seed: int = 0) -> dict:
    """Score, simulate and summarise every method on the same population.

    Scores are drawn once per method (from a stream derived from ``seed``
    and the method's position); trials then resample targeting decisions.
    """
    if not journeys:
        raise EmptyPopulation("no users to target")
    bought, revenue = final_session_outcomes(journeys)
    results = {}
    for m_index, method in enumerate(methods):
        p = score_users(method, journeys, np.random.default_rng([seed, 10_000 + m_index]))
        results[method.label] = simulate_targeting(p, bought, revenue, trials, seed)
    return results


def format_table(outcomes: dict) -> str:
    """Text table with one row per method: TP, TP%, FP, FP%, breaking point (mean and std)."""
    header = ["method", "tp_mean", "tp_std", "tp_pct", "tp_pct_std", "fp_mean", "fp_std", "fp_pct",
              "fp_pct_std", "bp_mean", "bp_std", "trials", "zero_target_trials", "buyers", "non_buyers"]
    lines = [",".join(header)]
    for name, o in outcomes.items():
        cells = [name, o.tp_mean, o.tp_std, 100 * o.tp_pct, 100 * o.tp_pct_std, o.fp_mean, o.fp_std,
                 100 * o.fp_pct, 100 * o.fp_pct_std, o.bp_mean, o.bp_std, o.trials, o.zero_target_trials,
                 o.n_buyers, o.n_nonbuyers]
        lines.append(",".join(c if isinstance(c, str) else (str(c) if isinstance(c, int) else f"{c:.4f}") for c in cells))
    return "\n".join(lines) + "\n"


def format_pretty(outcomes: dict) -> str:
    rows = [f"{'Method':<14} {'True positives':>18} {'TP%':>18} {'False positives':>20} {'FP%':>16} {'Breaking cost':>18}"]
    for name, o in outcomes.items():
        rows.append(
            f"{name:<14} {o.tp_mean:>8.2f} (± {o.tp_std:6.2f}) {100 * o.tp_pct:>7.2f}% (± {100 * o.tp_pct_std:5.2f}%)"
            f" {o.fp_mean:>9.2f} (± {o.fp_std:6.2f}) {100 * o.fp_pct:>6.2f}% (± {100 * o.fp_pct_std:4.2f}%)"
            f" {o.bp_mean:>8.2f} (± {o.bp_std:6.2f})"
        )
    return "\n".join(rows) + "\n"


def bootstrap_mean_difference(a, b, n_boot: int = 10_000, seed: int = 0, confidence: float = 0.95) -> float:
    """One-sided lower confidence bound on ``mean(a) - mean(b)`` by resampling each sample independently."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    rng = np.random.default_rng(seed)
    ma = a[rng.integers(0, a.size, size=(n_boot, a.size))].mean(axis=1)
    mb = b[rng.integers(0, b.size, size=(n_boot, b.size))].mean(axis=1)
    return float(np.quantile(ma - mb, 1.0 - confidence))
