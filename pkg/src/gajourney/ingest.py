"""Parsing of exported analytics tables and the user/session/hit join.

Canonical interchange is one comma-delimited file per table (see the
``*_COLUMNS`` tuples below). A second reader accepts Reporting-API-v4
shaped JSON reports and maps GA dimension/metric names onto the same rows.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, fields
from typing import IO, Iterable

from .errors import BadValue, DuplicateKey, MalformedHeader, MissingColumn, ShapeMismatch

log = logging.getLogger(__name__)

USER_TYPES = ("New", "Returning")
DEVICE_CATEGORIES = ("desktop", "mobile", "tablet")
STAGE_TOKENS = ("ALL_VISITS", "PRODUCT_VIEW", "ADD_TO_CART", "CHECKOUT", "TRANSACTION")

USER_COLUMNS = ("client_id", "user_type", "device_category", "browser_name", "device_name")
SESSION_COLUMNS = (
    "client_id",
    "session_id",
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
    "shopping_stages",
)
HIT_COLUMNS = ("client_id", "session_id", "minute_of_day", "time_on_page_s", "product_detail_view")


@dataclass(frozen=True)
class RawUserRow:
    client_id: str
    user_type: str
    device_category: str
    browser_name: str
    device_name: str


@dataclass(frozen=True)
class RawSessionRow:
    client_id: str
    session_id: str
    duration_s: float
    unique_pageviews: int
    transactions: int
    revenue: float
    unique_purchases: int
    days_since_last_session: int
    site_search_used: bool
    results_pageviews: int
    total_unique_searches: int
    search_depth: int
    search_refinements: int
    shopping_stages: frozenset

    @property
    def timestamp_ms(self) -> int:
        return session_timestamp(self.session_id)


@dataclass(frozen=True)
class RawHitRow:
    client_id: str
    session_id: str
    minute_of_day: int
    time_on_page_s: float
    product_detail_view: bool


@dataclass
class Journey:
    user: RawUserRow
    sessions: list  # list[tuple[RawSessionRow, list[RawHitRow]]]

    @property
    def client_id(self) -> str:
        return self.user.client_id


@dataclass
class DropReport:
    sessions_without_hits: int = 0
    sessions_without_user: int = 0
    orphan_hits: int = 0
    duplicate_users: int = 0
    users_without_sessions: int = 0
    hits_in: int = 0
    hits_attached: int = 0

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


ROW_TYPES = {"users": RawUserRow, "sessions": RawSessionRow, "hits": RawHitRow}
COLUMNS = {"users": USER_COLUMNS, "sessions": SESSION_COLUMNS, "hits": HIT_COLUMNS}


def session_timestamp(session_id: str) -> int:
    """Millisecond timestamp embedded after the last ``.`` of a session id."""
    _, sep, suffix = session_id.rpartition(".")
    if not sep or not suffix.isdigit():
        raise ValueError(f"session_id {session_id!r} has no numeric timestamp suffix")
    return int(suffix)


# --- cell coercion --------------------------------------------------------


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise ValueError("negative")
    return value


def _nonneg_float(text: str) -> float:
    value = float(text)
    if not math.isfinite(value) or value < 0:
        raise ValueError("negative or non-finite")
    return value


def _flag(text: str) -> bool:
    if text not in ("0", "1"):
        raise ValueError("expected 0 or 1")
    return text == "1"


def _nonempty(text: str) -> str:
    if not text:
        raise ValueError("empty")
    return text


def _choice(options):
    def coerce(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {options}")
        return text

    return coerce


def _minute(text: str) -> int:
    value = int(text)
    if not 0 <= value <= 1439:
        raise ValueError("minute_of_day outside [0, 1439]")
    return value


def _stages(text: str) -> frozenset:
    tokens = [t for t in text.split("|") if t]
    for t in tokens:
        if t not in STAGE_TOKENS:
            raise ValueError(f"unknown stage token {t!r}")
    return frozenset(tokens)


def _session_key(text: str) -> str:
    session_timestamp(_nonempty(text))
    return text


_COERCE = {
    "users": {
        "client_id": _nonempty,
        "user_type": _choice(USER_TYPES),
        "device_category": _choice(DEVICE_CATEGORIES),
        "browser_name": str,
        "device_name": str,
    },
    "sessions": {
        "client_id": _nonempty,
        "session_id": _session_key,
        "duration_s": _nonneg_float,
        "unique_pageviews": _nonneg_int,
        "transactions": _nonneg_int,
        "revenue": _nonneg_float,
        "unique_purchases": _nonneg_int,
        "days_since_last_session": _nonneg_int,
        "site_search_used": _flag,
        "results_pageviews": _nonneg_int,
        "total_unique_searches": _nonneg_int,
        "search_depth": _nonneg_int,
        "search_refinements": _nonneg_int,
        "shopping_stages": _stages,
    },
    "hits": {
        "client_id": _nonempty,
        "session_id": _session_key,
        "minute_of_day": _minute,
        "time_on_page_s": _nonneg_float,
        "product_detail_view": _flag,
    },
}


def _build_row(kind: str, cells: dict, line: int):
    values = {}
    for name, coerce in _COERCE[kind].items():
        try:
            values[name] = coerce(cells[name])
        except (ValueError, TypeError) as exc:
            raise BadValue(line, name, str(exc)) from None
    if kind == "sessions" and values["transactions"] > 0 and values["unique_purchases"] < 1:
        raise BadValue(line, "unique_purchases", "transactions > 0 requires unique_purchases >= 1")
    return ROW_TYPES[kind](**values)


def _check_kind(kind: str) -> None:
    if kind not in COLUMNS:
        raise ValueError(f"unknown table kind {kind!r}")


def _check_unique_sessions(rows) -> None:
    seen = set()
    for row in rows:
        if row.session_id in seen:
            raise DuplicateKey(f"session_id {row.session_id!r} repeated")
        seen.add(row.session_id)


def parse_table(kind: str, source) -> list:
    """Parse one canonical delimited table.

    ``source`` may be a binary or text stream, or raw ``bytes``/``str``.
    Line numbers in :class:`BadValue` are 1-based file lines (header = 1).
    """
    _check_kind(kind)
    reader = csv.reader(_text_stream(source))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != COLUMNS[kind]:
        raise MalformedHeader(f"{kind} header must be {','.join(COLUMNS[kind])}; got {header}")
    rows = []
    for lineno, record in enumerate(reader, start=2):
        if not record:
            continue
        if len(record) != len(COLUMNS[kind]):
            raise BadValue(lineno, "*", f"expected {len(COLUMNS[kind])} cells, got {len(record)}")
        rows.append(_build_row(kind, dict(zip(COLUMNS[kind], record)), lineno))
    if kind == "sessions":
        _check_unique_sessions(rows)
    return rows


def _text_stream(source) -> IO[str]:
    if isinstance(source, bytes):
        return io.StringIO(source.decode("utf-8"), newline="")
    if isinstance(source, str):
        return io.StringIO(source, newline="")
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source, encoding="utf-8", newline="")


def format_cell(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, frozenset):
        return "|".join(t for t in STAGE_TOKENS if t in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_table(kind: str, rows: Iterable, stream: IO[str]) -> None:
    """Inverse of :func:`parse_table`; floats are written with ``repr`` so they round-trip."""
    _check_kind(kind)
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(COLUMNS[kind])
    for row in rows:
        writer.writerow([format_cell(getattr(row, c)) for c in COLUMNS[kind]])


# --- GA Reporting v4 JSON --------------------------------------------------

# GA name -> canonical field. Several aliases map to the same field because
# client/session ids are custom dimensions whose index differs per property.
GA_NAME_MAP = {
    "users": {
        "ga:clientId": "client_id",
        "ga:dimension1": "client_id",
        "ga:userType": "user_type",
        "ga:deviceCategory": "device_category",
        "ga:browser": "browser_name",
        "ga:mobileDeviceInfo": "device_name",
    },
    "sessions": {
        "ga:clientId": "client_id",
        "ga:dimension1": "client_id",
        "ga:dimension2": "session_id",
        "ga:sessionId": "session_id",
        "ga:sessionDuration": "duration_s",
        "ga:uniquePageviews": "unique_pageviews",
        "ga:transactions": "transactions",
        "ga:transactionRevenue": "revenue",
        "ga:uniquePurchases": "unique_purchases",
        "ga:daysSinceLastSession": "days_since_last_session",
        "ga:searchUsed": "site_search_used",
        "ga:searchResultViews": "results_pageviews",
        "ga:searchUniques": "total_unique_searches",
        "ga:searchDepth": "search_depth",
        "ga:searchRefinements": "search_refinements",
        "ga:shoppingStage": "shopping_stages",
    },
    "hits": {
        "ga:clientId": "client_id",
        "ga:dimension1": "client_id",
        "ga:dimension2": "session_id",
        "ga:sessionId": "session_id",
        "ga:dateHourMinute": "minute_of_day",
        "ga:timeOnPage": "time_on_page_s",
        "ga:productDetailViews": "product_detail_view",
    },
}

_GA_USER_TYPES = {"New Visitor": "New", "Returning Visitor": "Returning"}
_GA_SEARCH_USED = {"Visits With Site Search": "1", "Visits Without Site Search": "0"}


def _ga_cell(name: str, value: str) -> str:
    """Translate GA display values into canonical cell text."""
    if name == "user_type":
        return _GA_USER_TYPES.get(value, value)
    if name == "device_category":
        return value.lower()
    if name == "site_search_used":
        return _GA_SEARCH_USED.get(value, value)
    if name == "minute_of_day" and len(value) == 12 and value.isdigit():
        # yyyyMMddHHmm
        return str(int(value[8:10]) * 60 + int(value[10:12]))
    if name == "product_detail_view":
        try:
            return "1" if float(value) > 0 else "0"
        except ValueError:
            return value
    if name in ("unique_pageviews", "transactions", "unique_purchases", "days_since_last_session",
                "results_pageviews", "total_unique_searches", "search_depth", "search_refinements"):
        # GA renders integer metrics as "3" but occasionally as "3.0"
        try:
            f = float(value)
        except ValueError:
            return value
        return str(int(f)) if f.is_integer() else value
    return value


def parse_ga_report_json(source, kind: str) -> tuple[list, int]:
    """Parse a Reporting-API-v4 report into canonical rows.

    Accepts either a bare report object or ``{"reports": [report]}``.
    Returns ``(rows, n_ignored_columns)``. Because GA emits one row per
    shopping stage, repeated session rows are merged by unioning their
    stages; all other session fields are taken from the first occurrence.
    """
    _check_kind(kind)
    if isinstance(source, (bytes, str)):
        doc = json.loads(source)
    else:
        doc = json.load(source)
    if "reports" in doc:
        if len(doc["reports"]) != 1:
            raise ShapeMismatch("expected exactly one report per file")
        doc = doc["reports"][0]

    header = doc.get("columnHeader", {})
    dim_names = list(header.get("dimensions", []))
    metric_names = [m["name"] for m in header.get("metricHeader", {}).get("metricHeaderEntries", [])]
    raw_rows = doc.get("data", {}).get("rows") or []

    mapping = GA_NAME_MAP[kind]
    columns = [mapping.get(n) for n in dim_names + metric_names]
    ignored = sum(c is None for c in columns)
    if ignored:
        log.warning("ignoring %d unmapped GA column(s) for %s", ignored, kind)
    if not raw_rows:
        return [], ignored

    stages_in_header = "shopping_stages" in columns
    required = [c for c in COLUMNS[kind] if not (kind == "sessions" and c == "shopping_stages")]
    missing = [c for c in required if c not in columns]
    if missing:
        raise MissingColumn(f"{kind} report lacks {', '.join(missing)}")

    n_dims, n_metrics = len(dim_names), len(metric_names)
    out = []
    by_session: dict = {}
    for i, r in enumerate(raw_rows):
        dims = r.get("dimensions", [])
        metrics = r.get("metrics", [{}])[0].get("values", []) if r.get("metrics") else []
        if len(dims) != n_dims or len(metrics) != n_metrics:
            raise ShapeMismatch(f"row {i}: {len(dims)}+{len(metrics)} values for {n_dims}+{n_metrics} columns")
        cells = {}
        for name, value in zip(columns, list(dims) + list(metrics)):
            if name is not None and name not in cells:
                cells[name] = _ga_cell(name, str(value))
        if kind == "sessions" and not stages_in_header:
            cells["shopping_stages"] = "ALL_VISITS"
        # line numbers count data rows from 1 in the JSON path
        row = _build_row(kind, cells, i + 1)
        if kind == "sessions":
            prev = by_session.get(row.session_id)
            if prev is not None:
                merged = _replace_stages(out[prev], out[prev].shopping_stages | row.shopping_stages)
                out[prev] = merged
                continue
            by_session[row.session_id] = len(out)
        out.append(row)
    return out, ignored


def _replace_stages(row: RawSessionRow, stages: frozenset) -> RawSessionRow:
    values = {f.name: getattr(row, f.name) for f in fields(row)}
    values["shopping_stages"] = stages
    return RawSessionRow(**values)


# --- join -------------------------------------------------------------------


def _session_order(row: RawSessionRow):
    return (row.timestamp_ms, row.session_id)


def join_journeys(users, sessions, hits) -> tuple[list, DropReport]:
    """Assemble one :class:`Journey` per client with at least one usable session.

    Output is sorted by client_id, sessions by embedded timestamp (ties by
    full session_id), and hits by minute_of_day with input order kept on
    ties. Nothing here raises: anomalies are tallied in the drop report.
    """
    report = DropReport()
    user_by_id: dict = {}
    for u in users:
        if u.client_id in user_by_id:
            report.duplicate_users += 1
        user_by_id[u.client_id] = u

    report.hits_in = len(hits)
    hits_by_session = defaultdict(list)
    for h in hits:
        hits_by_session[(h.client_id, h.session_id)].append(h)

    sessions_by_client = defaultdict(list)
    for s in sessions:
        sessions_by_client[s.client_id].append(s)

    attached_keys = set()
    journeys = []
    for client_id in sorted(sessions_by_client):
        user = user_by_id.get(client_id)
        client_sessions = sorted(sessions_by_client[client_id], key=_session_order)
        if user is None:
            report.sessions_without_user += len(client_sessions)
            continue
        assembled = []
        for s in client_sessions:
            session_hits = hits_by_session.get((client_id, s.session_id), [])
            if not session_hits:
                report.sessions_without_hits += 1
                continue
            attached_keys.add((client_id, s.session_id))
            # sorted() is stable, so equal minutes keep input order
            assembled.append((s, sorted(session_hits, key=lambda h: h.minute_of_day)))
        if assembled:
            journeys.append(Journey(user=user, sessions=assembled))

    report.users_without_sessions = sum(1 for cid in user_by_id if cid not in sessions_by_client)
    report.hits_attached = sum(len(hits_by_session[k]) for k in attached_keys)
    report.orphan_hits = report.hits_in - report.hits_attached
    return journeys, report


def load_directory(path) -> tuple[list, DropReport]:
    """Read ``users.csv``, ``sessions.csv`` and ``hits.csv`` from a directory and join them."""
    from pathlib import Path

    root = Path(path)
    tables = {}
    for kind in ("users", "sessions", "hits"):
        with open(root / f"{kind}.csv", "rb") as fh:
            tables[kind] = parse_table(kind, fh)
    return join_journeys(tables["users"], tables["sessions"], tables["hits"])
