"""Synthetic GA-shaped corpora with planted, recoverable structure.

Each user draws an archetype, then walks a Markov chain over the six path
classes across sessions, so earlier sessions carry real information about
later ones. Session and hit fields are drawn conditionally on the class.
Revenue per transaction is ``browser_rpt * device_multiplier * noise`` with
mean-one lognormal noise and device multipliers normalised to a
share-weighted mean of one, which makes both the per-browser and the
per-device revenue-per-transaction values recoverable from the tables.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidConfig
from .ingest import RawHitRow, RawSessionRow, RawUserRow, STAGE_TOKENS, format_cell, write_table

ARCHETYPES = ("browser", "researcher", "buyer")

CLASS_STAGES = (
    ("ALL_VISITS",),
    ("ALL_VISITS", "PRODUCT_VIEW"),
    ("ALL_VISITS", "PRODUCT_VIEW", "ADD_TO_CART"),
    ("ALL_VISITS", "PRODUCT_VIEW", "ADD_TO_CART", "CHECKOUT"),
    ("ALL_VISITS", "PRODUCT_VIEW", "CHECKOUT"),
    ("ALL_VISITS", "PRODUCT_VIEW", "ADD_TO_CART", "CHECKOUT", "TRANSACTION"),
)

# rows: previous class, columns: next class
DEFAULT_TRANSITIONS = {
    "browser": [
        [0.62, 0.28, 0.04, 0.02, 0.02, 0.02],
        [0.45, 0.38, 0.08, 0.03, 0.03, 0.03],
        [0.35, 0.30, 0.12, 0.06, 0.05, 0.12],
        [0.30, 0.25, 0.10, 0.08, 0.05, 0.22],
        [0.35, 0.30, 0.08, 0.05, 0.07, 0.15],
        [0.55, 0.30, 0.05, 0.03, 0.03, 0.04],
    ],
    "researcher": [
        [0.35, 0.45, 0.08, 0.04, 0.04, 0.04],
        [0.20, 0.50, 0.14, 0.05, 0.05, 0.06],
        [0.15, 0.35, 0.22, 0.10, 0.06, 0.12],
        [0.12, 0.28, 0.15, 0.15, 0.08, 0.22],
        [0.15, 0.35, 0.10, 0.08, 0.14, 0.18],
        [0.30, 0.45, 0.10, 0.05, 0.05, 0.05],
    ],
    "buyer": [
        [0.25, 0.30, 0.12, 0.08, 0.05, 0.20],
        [0.15, 0.30, 0.15, 0.10, 0.05, 0.25],
        [0.10, 0.20, 0.15, 0.12, 0.05, 0.38],
        [0.08, 0.15, 0.12, 0.12, 0.05, 0.48],
        [0.10, 0.20, 0.10, 0.08, 0.12, 0.40],
        [0.25, 0.30, 0.12, 0.08, 0.05, 0.20],
    ],
}

# browser -> (share, planted revenue per transaction)
DEFAULT_BROWSERS = {
    "Chrome": (0.55, 110.0),
    "Safari": (0.25, 200.0),
    "Firefox": (0.12, 80.0),
    "Edge": (0.08, 140.0),
}

# device name -> (category, share, revenue multiplier before normalisation)
DEFAULT_DEVICES = {
    "(not set)": ("desktop", 0.50, 1.0),
    "Apple iPhone": ("mobile", 0.22, 1.3),
    "Samsung Galaxy S9": ("mobile", 0.18, 0.7),
    "Apple iPad": ("tablet", 0.10, 1.1),
}

# per-class shape of the session: hit-count factor, detail-view rate, mean seconds on page
_HIT_FACTOR = (0.6, 1.0, 1.4, 1.8, 1.6, 2.2)
_VIEW_RATE = (0.0, 0.45, 0.5, 0.55, 0.5, 0.6)
_TIME_ON_PAGE = (20.0, 45.0, 60.0, 75.0, 65.0, 90.0)
_SEARCH_RATE = {"browser": 0.2, "researcher": 0.6, "buyer": 0.3}

_EPOCH_MS = 1_577_836_800_000  # 2020-01-01T00:00:00Z
_TOKEN_ALPHABET = np.array(list("abcdefghijklmnopqrstuvwxyz0123456789"))
MAX_SESSIONS = 30
MAX_HITS = 40


@dataclass
class SynthConfig:
    n_users: int = 1000
    archetype_mix: dict = field(default_factory=lambda: {"browser": 0.55, "researcher": 0.30, "buyer": 0.15})
    sessions_per_user: float = 4.0
    hits_per_session: float = 4.0
    browsers: dict = field(default_factory=lambda: dict(DEFAULT_BROWSERS))
    devices: dict = field(default_factory=lambda: dict(DEFAULT_DEVICES))
    transitions: dict = field(default_factory=lambda: {k: [list(r) for r in v] for k, v in DEFAULT_TRANSITIONS.items()})
    initial: dict | None = None  # archetype -> initial class distribution; None = stationary
    revenue_sigma: float = 0.35
    days_between_mean: float = 3.0
    empty_user_rate: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_users < 1:
            raise InvalidConfig("n_users must be >= 1")
        if self.sessions_per_user < 1 or self.hits_per_session < 1 or self.days_between_mean < 1:
            raise InvalidConfig("sessions_per_user, hits_per_session and days_between_mean must be >= 1")
        mix = self.archetype_mix
        if any(k not in ARCHETYPES for k in mix) or any(v < 0 for v in mix.values()):
            raise InvalidConfig(f"archetype_mix keys must be among {ARCHETYPES} with non-negative weights")
        if not np.isclose(sum(mix.values()), 1.0):
            raise InvalidConfig("archetype_mix must sum to 1")
        for name, matrix in self.transitions.items():
            m = np.asarray(matrix, dtype=float)
            if m.shape != (6, 6) or (m < 0).any() or not np.allclose(m.sum(axis=1), 1.0):
                raise InvalidConfig(f"transition matrix for {name!r} must be 6x6 row-stochastic")
        for arch in mix:
            if mix[arch] > 0 and arch not in self.transitions:
                raise InvalidConfig(f"no transition matrix for archetype {arch!r}")
        for label, catalog, idx in (("browser", self.browsers, 0), ("device", self.devices, 1)):
            shares = [v[idx] for v in catalog.values()]
            if not catalog or any(s < 0 for s in shares) or not np.isclose(sum(shares), 1.0):
                raise InvalidConfig(f"{label} shares must be non-negative and sum to 1")
        if any(v[0] not in ("desktop", "mobile", "tablet") for v in self.devices.values()):
            raise InvalidConfig("device categories must be desktop, mobile or tablet")
        if not 0 <= self.empty_user_rate < 1:
            raise InvalidConfig("empty_user_rate must lie in [0, 1)")
        if self.revenue_sigma < 0:
            raise InvalidConfig("revenue_sigma must be non-negative")

    def to_dict(self) -> dict:
        return {
            "n_users": self.n_users,
            "archetype_mix": self.archetype_mix,
            "sessions_per_user": self.sessions_per_user,
            "hits_per_session": self.hits_per_session,
            "browsers": {k: list(v) for k, v in self.browsers.items()},
            "devices": {k: list(v) for k, v in self.devices.items()},
            "transitions": self.transitions,
            "initial": self.initial,
            "revenue_sigma": self.revenue_sigma,
            "days_between_mean": self.days_between_mean,
            "empty_user_rate": self.empty_user_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "browsers" in d:
            d["browsers"] = {k: tuple(v) for k, v in d["browsers"].items()}
        if "devices" in d:
            d["devices"] = {k: tuple(v) for k, v in d["devices"].items()}
        return cls(**d)


@dataclass
class SynthTruth:
    archetypes: dict  # client_id -> archetype
    classes: dict  # client_id -> list of class ids in session order
    planted_browser_rpt: dict
    planted_device_rpt: dict
    empty_users: list


@dataclass
class SynthTables:
    users: list
    sessions: list
    hits: list


def stationary_distribution(matrix) -> np.ndarray:
    """Left fixed point of a row-stochastic matrix, via a linear solve."""
    p = np.asarray(matrix, dtype=np.float64)
    n = p.shape[0]
    a = np.vstack([p.T - np.eye(n), np.ones(n)])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, rhs, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def planted_rpt(config: SynthConfig) -> tuple[dict, dict]:
    """Per-browser and per-device revenue per transaction implied by the catalogs."""
    mult = _device_multipliers(config)
    browser = {name: float(rpt) for name, (_, rpt) in config.browsers.items()}
    mean_browser = sum(share * rpt for share, rpt in config.browsers.values())
    device = {name: float(mean_browser * mult[name]) for name in config.devices}
    return browser, device


def _device_multipliers(config: SynthConfig) -> dict:
    weighted = sum(share * m for _, share, m in config.devices.values())
    return {name: m / weighted for name, (_, _, m) in config.devices.items()}


def _geometric(rng, mean: float, cap: int) -> int:
    return int(min(rng.geometric(1.0 / mean), cap))


def _token(rng, n: int = 12) -> str:
    return "".join(rng.choice(_TOKEN_ALPHABET, size=n))


class _UserDraw:
    """Everything sampled for one user, from that user's private stream."""

    def __init__(self, config: SynthConfig, rng, archetype_names, archetype_probs, browsers, devices, mult):
        self.rng = rng
        self.archetype = archetype_names[rng.choice(len(archetype_names), p=archetype_probs)]
        b_names = list(browsers)
        self.browser = b_names[rng.choice(len(b_names), p=[browsers[b][0] for b in b_names])]
        d_names = list(devices)
        self.device = d_names[rng.choice(len(d_names), p=[devices[d][1] for d in d_names])]
        self.empty = bool(rng.random() < config.empty_user_rate)
        n_sessions = _geometric(rng, config.sessions_per_user, MAX_SESSIONS)
        trans = np.asarray(config.transitions[self.archetype], dtype=float)
        init = (config.initial or {}).get(self.archetype)
        init = stationary_distribution(trans) if init is None else np.asarray(init, dtype=float)
        classes = [int(rng.choice(6, p=init))]
        for _ in range(n_sessions - 1):
            classes.append(int(rng.choice(6, p=trans[classes[-1]])))
        self.classes = classes
        self.returning = n_sessions > 1 and rng.random() < 0.85
        self.client_number = int(rng.integers(10**8, 10**9))
        self.start_ms = _EPOCH_MS + int(rng.integers(0, 60)) * 86_400_000 + int(rng.integers(0, 1440)) * 60_000
        self.rpt = browsers[self.browser][1] * mult[self.device]


def generate(config: SynthConfig) -> tuple[SynthTables, SynthTruth]:
    config.validate()
    archetype_names = [a for a in ARCHETYPES if config.archetype_mix.get(a, 0) > 0]
    archetype_probs = np.array([config.archetype_mix[a] for a in archetype_names])
    archetype_probs = archetype_probs / archetype_probs.sum()
    mult = _device_multipliers(config)
    browser_rpt, device_rpt = planted_rpt(config)
    # mean-one lognormal noise on each transaction's value
    mu = -0.5 * config.revenue_sigma**2

    users, sessions, hits = [], [], []
    truth = SynthTruth({}, {}, browser_rpt, device_rpt, [])
    seen_clients, seen_sessions = set(), set()
    for child in np.random.SeedSequence(config.seed).spawn(config.n_users):
        rng = np.random.default_rng(child)
        u = _UserDraw(config, rng, archetype_names, archetype_probs, config.browsers, config.devices, mult)
        client_id = f"{u.client_number}.{u.start_ms // 1000}"
        while client_id in seen_clients:
            client_id = f"{u.client_number + 1}.{u.start_ms // 1000}"
            u.client_number += 1
        seen_clients.add(client_id)
        category = config.devices[u.device][0]
        users.append(RawUserRow(client_id, "Returning" if u.returning else "New", category, u.browser, u.device))
        truth.archetypes[client_id] = u.archetype
        if u.empty:
            truth.classes[client_id] = []
            truth.empty_users.append(client_id)
            continue
        truth.classes[client_id] = list(u.classes)

        ts = u.start_ms
        for k, cls in enumerate(u.classes):
            if k == 0:
                days = 0
            else:
                days = int(rng.geometric(1.0 / config.days_between_mean)) - 1
                ts += days * 86_400_000 + int(rng.integers(30, 600)) * 60_000
            session_id = f"{_token(rng)}.{ts}"
            while session_id in seen_sessions:
                session_id = f"{_token(rng)}.{ts}"
            seen_sessions.add(session_id)
            s_row, h_rows = _draw_session(rng, config, u, client_id, session_id, ts, days, cls, mu)
            sessions.append(s_row)
            hits.extend(h_rows)
    return SynthTables(users, sessions, hits), truth


def _draw_session(rng, config, u, client_id, session_id, ts, days, cls, mu):
    n_hits = _geometric(rng, max(1.0, config.hits_per_session * _HIT_FACTOR[cls]), MAX_HITS)
    mean_time = _TIME_ON_PAGE[cls]
    times = np.round(rng.lognormal(np.log(mean_time) - 0.32, 0.8, size=n_hits), 1)
    views = rng.random(n_hits) < _VIEW_RATE[cls]
    if cls >= 1 and not views.any():
        views[rng.integers(n_hits)] = True
    start_minute = (ts // 60_000) % 1440
    elapsed = np.concatenate([[0.0], np.cumsum(times[:-1])])
    minutes = np.minimum(start_minute + (elapsed // 60).astype(int), 1439)
    hit_rows = [
        RawHitRow(client_id, session_id, int(m), float(t), bool(v)) for m, t, v in zip(minutes, times, views)
    ]

    transactions = 0
    revenue = 0.0
    purchases = 0
    if cls == 5:
        transactions = 1 + int(rng.poisson(0.15))
        values = u.rpt * rng.lognormal(mu, config.revenue_sigma, size=transactions)
        revenue = float(round(values.sum(), 2))
        purchases = transactions + int(rng.poisson(0.5))

    searched = bool(rng.random() < _SEARCH_RATE[u.archetype])
    if searched:
        uniques = 1 + int(rng.poisson(0.8))
        results = uniques + int(rng.poisson(1.0))
        depth = int(rng.poisson(1.0 + cls * 0.5))
        refinements = int(rng.binomial(uniques - 1, 0.5)) if uniques > 1 else 0
    else:
        uniques = results = depth = refinements = 0

    session = RawSessionRow(
        client_id=client_id,
        session_id=session_id,
        duration_s=float(round(times.sum(), 1)),
        unique_pageviews=int(n_hits - rng.binomial(n_hits - 1, 0.15)) if n_hits > 1 else 1,
        transactions=transactions,
        revenue=revenue,
        unique_purchases=purchases,
        days_since_last_session=days,
        site_search_used=searched,
        results_pageviews=results,
        total_unique_searches=uniques,
        search_depth=depth,
        search_refinements=refinements,
        shopping_stages=frozenset(CLASS_STAGES[cls]),
    )
    return session, hit_rows


# --- writers ----------------------------------------------------------------------


def write_corpus(tables: SynthTables, truth: SynthTruth, out_dir) -> dict:
    """Write users/sessions/hits CSVs, ``truth.csv`` and ``planted.json``. Returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for kind in ("users", "sessions", "hits"):
        path = out / f"{kind}.csv"
        with open(path, "w", newline="") as fh:
            write_table(kind, getattr(tables, kind), fh)
        paths[kind] = path
    paths["truth"] = out / "truth.csv"
    with open(paths["truth"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "archetype", "n_sessions", "class_ids"])
        for cid in sorted(truth.archetypes):
            classes = truth.classes[cid]
            w.writerow([cid, truth.archetypes[cid], len(classes), "|".join(map(str, classes))])
    paths["planted"] = out / "planted.json"
    paths["planted"].write_text(
        json.dumps(
            {
                "browser_rpt": truth.planted_browser_rpt,
                "device_rpt": truth.planted_device_rpt,
                "empty_users": truth.empty_users,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    return paths


def read_truth(path) -> dict:
    """``client_id -> (archetype, [class ids])`` from a truth.csv."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ids = [int(c) for c in row["class_ids"].split("|") if c]
            out[row["client_id"]] = (row["archetype"], ids)
    return out


_GA_REPORT_COLUMNS = {
    "users": (
        ["ga:clientId", "ga:userType", "ga:deviceCategory", "ga:browser", "ga:mobileDeviceInfo"],
        [],
    ),
    "sessions": (
        ["ga:clientId", "ga:sessionId", "ga:daysSinceLastSession", "ga:searchUsed", "ga:shoppingStage"],
        [
            ("ga:sessionDuration", "TIME"),
            ("ga:uniquePageviews", "INTEGER"),
            ("ga:transactions", "INTEGER"),
            ("ga:transactionRevenue", "CURRENCY"),
            ("ga:uniquePurchases", "INTEGER"),
            ("ga:searchResultViews", "INTEGER"),
            ("ga:searchUniques", "INTEGER"),
            ("ga:searchDepth", "INTEGER"),
            ("ga:searchRefinements", "INTEGER"),
        ],
    ),
    "hits": (
        ["ga:clientId", "ga:sessionId", "ga:dateHourMinute"],
        [("ga:timeOnPage", "TIME"), ("ga:productDetailViews", "INTEGER")],
    ),
}


def _ga_date(ts_ms: int, minute_of_day: int) -> str:
    import datetime as _dt

    day = _dt.datetime.fromtimestamp(ts_ms / 1000, tz=_dt.timezone.utc).strftime("%Y%m%d")
    return f"{day}{minute_of_day // 60:02d}{minute_of_day % 60:02d}"


def ga_report(kind: str, rows) -> dict:
    """Render canonical rows as a Reporting-API-v4 style report.

    Sessions are emitted once per shopping stage, as GA does.
    """
    dims, metrics = _GA_REPORT_COLUMNS[kind]
    out_rows = []
    for r in rows:
        if kind == "users":
            d = [r.client_id, f"{r.user_type} Visitor", r.device_category, r.browser_name, r.device_name]
            out_rows.append({"dimensions": d, "metrics": [{"values": []}]})
        elif kind == "sessions":
            m = [
                format_cell(r.duration_s), str(r.unique_pageviews), str(r.transactions), format_cell(r.revenue),
                str(r.unique_purchases), str(r.results_pageviews), str(r.total_unique_searches),
                str(r.search_depth), str(r.search_refinements),
            ]
            search = "Visits With Site Search" if r.site_search_used else "Visits Without Site Search"
            for stage in (t for t in STAGE_TOKENS if t in r.shopping_stages):
                d = [r.client_id, r.session_id, str(r.days_since_last_session), search, stage]
                out_rows.append({"dimensions": d, "metrics": [{"values": list(m)}]})
        else:
            ts = int(r.session_id.rpartition(".")[2])
            d = [r.client_id, r.session_id, _ga_date(ts, r.minute_of_day)]
            m = [format_cell(r.time_on_page_s), "1" if r.product_detail_view else "0"]
            out_rows.append({"dimensions": d, "metrics": [{"values": m}]})
    return {
        "reports": [
            {
                "columnHeader": {
                    "dimensions": dims,
                    "metricHeader": {"metricHeaderEntries": [{"name": n, "type": t} for n, t in metrics]},
                },
                "data": {"rows": out_rows, "rowCount": len(out_rows)},
            }
        ]
    }


def write_ga_reports(tables: SynthTables, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for kind in ("users", "sessions", "hits"):
        paths[kind] = out / f"{kind}.json"
        paths[kind].write_text(json.dumps(ga_report(kind, getattr(tables, kind)), indent=1) + "\n")
    return paths
