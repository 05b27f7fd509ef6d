"""Numeric encodings of journeys plus the descriptive statistics behind them.

Encodings (raw, before normalization):

* user, dim 5: ``[returning, is_mobile, is_tablet, browser_rpt, device_rpt]``
* session, dim 11: the numeric session columns in table order
* hit, dim 3: ``[minute_of_day / 1440, time_on_page_s, product_detail_view]``
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import EmptyStages, InsufficientRows, NotFitted, ZeroTransactionsGlobally
from .ingest import STAGE_TOKENS, Journey, RawHitRow, RawSessionRow, RawUserRow

USER_DIM = 5
SESSION_DIM = 11
HIT_DIM = 3

SESSION_FEATURES = (
    "duration_s",
    "unique_pageviews",
    "transactions",
    "revenue",
    "unique_purchases",
    "days_since_last_session",
    "site_search_used",
    "results_pageviews",
    "total_unique_searches",
    "search_depth",
    "search_refinements",
)
USER_FEATURES = ("returning", "is_mobile", "is_tablet", "browser_rpt", "device_rpt")
HIT_FEATURES = ("day_fraction", "time_on_page_s", "product_detail_view")

REVENUE_INDEX = SESSION_FEATURES.index("revenue")

CLASS_NAMES = (
    "All Visits",
    "Product View",
    "Add to Cart",
    "Checkout",
    "Product View -> Checkout",
    "Transaction",
)
TRANSACTION_CLASS = 5


# --- revenue per transaction ------------------------------------------------


@dataclass
class RptStats:
    browser_rpt: dict
    device_rpt: dict
    global_browser_rpt: float
    global_device_rpt: float
    zero_transactions: bool = False

    def browser(self, name: str) -> float:
        return self.browser_rpt.get(name, self.global_browser_rpt)

    def device(self, name: str) -> float:
        return self.device_rpt.get(name, self.global_device_rpt)

    def to_dict(self) -> dict:
        return {
            "browser_rpt": dict(sorted(self.browser_rpt.items())),
            "device_rpt": dict(sorted(self.device_rpt.items())),
            "global_browser_rpt": self.global_browser_rpt,
            "global_device_rpt": self.global_device_rpt,
            "zero_transactions": self.zero_transactions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RptStats":
        return cls(
            browser_rpt=dict(d["browser_rpt"]),
            device_rpt=dict(d["device_rpt"]),
            global_browser_rpt=float(d["global_browser_rpt"]),
            global_device_rpt=float(d["global_device_rpt"]),
            zero_transactions=bool(d.get("zero_transactions", False)),
        )


def _category_totals(journeys, attr: str):
    revenue = defaultdict(float)
    transactions = defaultdict(int)
    users = defaultdict(int)
    for j in journeys:
        key = getattr(j.user, attr)
        users[key] += 1
        revenue[key] += 0.0
        for s, _ in j.sessions:
            # revenue on a session without transactions is not attributable
            if s.transactions > 0:
                revenue[key] += s.revenue
                transactions[key] += s.transactions
    return users, revenue, transactions


def compute_rpt_stats(journeys: Sequence[Journey], strict: bool = False) -> RptStats:
    """Revenue per transaction for every browser and device name.

    Categories without transactions fall back to the global
    transaction-weighted mean. With no transactions at all every value is 0
    and ``zero_transactions`` is set; ``strict=True`` raises instead.
    """
    if not journeys:
        raise ValueError("compute_rpt_stats needs at least one journey")
    out = {}
    global_values = {}
    for attr in ("browser_name", "device_name"):
        _, revenue, txns = _category_totals(journeys, attr)
        total_txn = sum(txns.values())
        total_rev = sum(revenue.values())
        global_rpt = total_rev / total_txn if total_txn else 0.0
        out[attr] = {k: (revenue[k] / txns[k] if txns[k] else global_rpt) for k in sorted(revenue)}
        global_values[attr] = global_rpt
    zero = not any(s.transactions for j in journeys for s, _ in j.sessions)
    if zero and strict:
        raise ZeroTransactionsGlobally("no transactions in any session")
    return RptStats(
        browser_rpt=out["browser_name"],
        device_rpt=out["device_name"],
        global_browser_rpt=global_values["browser_name"],
        global_device_rpt=global_values["device_name"],
        zero_transactions=zero,
    )


def category_histograms(journeys: Sequence[Journey]) -> dict:
    """Per-browser and per-device ``(users, revenue, transactions, rpt)`` tables.

    ``rpt`` is NaN-free: categories without transactions report the same
    fallback value :func:`compute_rpt_stats` would assign.
    """
    if not journeys:
        raise ValueError("category_histograms needs at least one journey")
    stats = compute_rpt_stats(journeys)
    tables = {}
    for attr, label in (("browser_name", "browser"), ("device_name", "device")):
        users, revenue, txns = _category_totals(journeys, attr)
        lookup = stats.browser if label == "browser" else stats.device
        tables[label] = [
            {
                "category": k,
                "users": users[k],
                "revenue": revenue[k],
                "transactions": txns[k],
                "revenue_per_transaction": lookup(k),
            }
            for k in sorted(users)
        ]
    return tables


# --- shopping stage -----------------------------------------------------------


def map_shopping_stage(stages) -> int:
    """Collapse a session's stage set into one of the six path classes (deepest wins)."""
    stages = frozenset(stages)
    if not stages:
        raise EmptyStages("a session must record at least one shopping stage")
    unknown = stages.difference(STAGE_TOKENS)
    if unknown:
        raise ValueError(f"unknown stage tokens {sorted(unknown)}")
    if "TRANSACTION" in stages:
        return 5
    view = "PRODUCT_VIEW" in stages
    cart = "ADD_TO_CART" in stages
    checkout = "CHECKOUT" in stages
    if view and checkout and not cart:
        return 4
    if view and cart and checkout:
        return 3
    if view and cart:
        return 2
    if view:
        return 1
    return 0


# --- encodings ----------------------------------------------------------------


def encode_user(row: RawUserRow, stats: RptStats) -> np.ndarray:
    return np.array(
        [
            1.0 if row.user_type == "Returning" else 0.0,
            1.0 if row.device_category == "mobile" else 0.0,
            1.0 if row.device_category == "tablet" else 0.0,
            stats.browser(row.browser_name),
            stats.device(row.device_name),
        ]
    )


def encode_session(row: RawSessionRow) -> np.ndarray:
    return np.array([float(getattr(row, name)) for name in SESSION_FEATURES])


def encode_hit(row: RawHitRow) -> np.ndarray:
    return np.array(
        [row.minute_of_day / 1440.0, row.time_on_page_s, 1.0 if row.product_detail_view else 0.0]
    )


@dataclass
class EncodedJourney:
    client_id: str
    user_vec: np.ndarray
    session_vecs: np.ndarray  # (N, 11)
    hit_vecs: list  # N arrays of shape (n_hits, 3)
    class_ids: np.ndarray  # (N,)

    @property
    def n_sessions(self) -> int:
        return len(self.class_ids)

    def with_vectors(self, user_vec, session_vecs, hit_vecs) -> "EncodedJourney":
        return EncodedJourney(self.client_id, user_vec, session_vecs, hit_vecs, self.class_ids)


def encode_journey(journey: Journey, stats: RptStats) -> EncodedJourney:
    return EncodedJourney(
        client_id=journey.client_id,
        user_vec=encode_user(journey.user, stats),
        session_vecs=np.stack([encode_session(s) for s, _ in journey.sessions]),
        hit_vecs=[np.stack([encode_hit(h) for h in hits]) for _, hits in journey.sessions],
        class_ids=np.array([map_shopping_stage(s.shopping_stages) for s, _ in journey.sessions], dtype=np.int64),
    )


def encode_journeys(journeys: Sequence[Journey], stats: RptStats) -> list:
    return [encode_journey(j, stats) for j in journeys]


# --- normalization --------------------------------------------------------------


class NormMethod(str, Enum):
    MINMAX = "minmax"
    STANDARDIZE = "standard"

    @classmethod
    def parse(cls, value) -> "NormMethod":
        if isinstance(value, cls):
            return value
        key = str(value).lower()
        aliases = {"minmax": cls.MINMAX, "min-max": cls.MINMAX, "standard": cls.STANDARDIZE,
                   "standardize": cls.STANDARDIZE, "standardization": cls.STANDARDIZE}
        if key not in aliases:
            raise ValueError(f"unknown normalization {value!r}")
        return aliases[key]


def _scale_stats(x: np.ndarray, method: NormMethod):
    if method is NormMethod.MINMAX:
        lo, hi = x.min(axis=0), x.max(axis=0)
        return lo, hi - lo
    return x.mean(axis=0), x.std(axis=0)


@dataclass
class Normalizer:
    """Affine per-dimension transform ``(x - shift) / scale``; zero scale maps to 0."""

    method: NormMethod
    shift: dict = field(default_factory=dict)
    scale: dict = field(default_factory=dict)

    def _apply(self, space: str, x: np.ndarray) -> np.ndarray:
        if space not in self.shift:
            raise NotFitted(f"normalizer has no statistics for {space!r}")
        scale = self.scale[space]
        safe = np.where(scale > 0, scale, 1.0)
        return np.where(scale > 0, (x - self.shift[space]) / safe, 0.0)

    def transform(self, journeys: Sequence[EncodedJourney]) -> list:
        return [
            j.with_vectors(
                self._apply("user", j.user_vec),
                self._apply("session", j.session_vecs),
                [self._apply("hit", h) for h in j.hit_vecs],
            )
            for j in journeys
        ]

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "shift": {k: v.tolist() for k, v in self.shift.items()},
            "scale": {k: v.tolist() for k, v in self.scale.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(
            method=NormMethod.parse(d["method"]),
            shift={k: np.asarray(v, dtype=np.float64) for k, v in d["shift"].items()},
            scale={k: np.asarray(v, dtype=np.float64) for k, v in d["scale"].items()},
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Normalizer":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def fit_normalizer(journeys: Sequence[EncodedJourney], method="minmax") -> Normalizer:
    """Fit on the training split only."""
    if not journeys:
        raise ValueError("cannot fit a normalizer on zero journeys")
    method = NormMethod.parse(method)
    spaces = {
        "user": np.stack([j.user_vec for j in journeys]),
        "session": np.concatenate([j.session_vecs for j in journeys]),
        "hit": np.concatenate([h for j in journeys for h in j.hit_vecs]),
    }
    norm = Normalizer(method)
    for name, x in spaces.items():
        norm.shift[name], norm.scale[name] = _scale_stats(x, method)
    return norm


def apply_normalizer(normalizer: Normalizer | None, journeys: Sequence[EncodedJourney]) -> list:
    if normalizer is None:
        raise NotFitted("apply_normalizer called without a fitted normalizer")
    return normalizer.transform(journeys)


# --- correlation ------------------------------------------------------------------


def pearson_correlation_matrix(rows) -> np.ndarray:
    """Pearson correlation between columns; constant columns correlate 0 with everything else."""
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InsufficientRows("need at least two rows")
    centered = x - x.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    live = norms > 0
    z = np.zeros_like(centered)
    z[:, live] = centered[:, live] / norms[live]
    r = np.clip(z.T @ z, -1.0, 1.0)
    r = (r + r.T) / 2
    np.fill_diagonal(r, 1.0)
    return r


def journey_feature_rows(journeys: Sequence[EncodedJourney]) -> tuple[list, np.ndarray]:
    """One row per session: user, session and mean-hit features plus the class id (last column)."""
    names = list(USER_FEATURES) + list(SESSION_FEATURES) + ["mean_" + h for h in HIT_FEATURES] + ["class_id"]
    rows = []
    for j in journeys:
        for i in range(j.n_sessions):
            rows.append(np.concatenate([j.user_vec, j.session_vecs[i], j.hit_vecs[i].mean(axis=0), [j.class_ids[i]]]))
    return names, np.asarray(rows)
