import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gajourney.errors import EmptyStages, InsufficientRows, NotFitted, ZeroTransactionsGlobally
from gajourney.features import (
    HIT_DIM,
    SESSION_DIM,
    USER_DIM,
    EncodedJourney,
    Normalizer,
    RptStats,
    apply_normalizer,
    category_histograms,
    compute_rpt_stats,
    encode_hit,
    encode_journeys,
    encode_session,
    encode_user,
    fit_normalizer,
    map_shopping_stage,
    pearson_correlation_matrix,
)
from gajourney.ingest import STAGE_TOKENS, Journey, RawHitRow, RawSessionRow, RawUserRow, join_journeys
from gajourney.synthgen import CLASS_STAGES, SynthConfig, generate


def session(client, sid, revenue=0.0, transactions=0, **kw):
    values = dict(
        duration_s=0.0, unique_pageviews=0, unique_purchases=1 if transactions else 0, days_since_last_session=0,
        site_search_used=False, results_pageviews=0, total_unique_searches=0, search_depth=0,
        search_refinements=0, shopping_stages=frozenset({"ALL_VISITS"}),
    )
    values.update(kw)
    return RawSessionRow(client, sid, revenue=revenue, transactions=transactions, **values)


def journey(client, browser, device, sessions, category="desktop", user_type="New"):
    hit = RawHitRow(client, "x.1", 0, 1.0, False)
    return Journey(RawUserRow(client, user_type, category, browser, device), [(s, [hit]) for s in sessions])


class TestRpt:
    def test_single_browser(self):
        j = journey("a", "Chrome", "d", [session("a", "s.1", 100, 1), session("a", "s.2", 50, 1)])
        assert compute_rpt_stats([j]).browser_rpt["Chrome"] == pytest.approx(75.0)

    def test_zero_transaction_category_falls_back(self):
        js = [
            journey("a", "Chrome", "d", [session("a", "s.1", 100, 1), session("a", "s.2", 50, 1)]),
            journey("b", "Lynx", "d", [session("b", "s.3")]),
        ]
        stats = compute_rpt_stats(js)
        assert stats.global_browser_rpt == pytest.approx(75.0)
        assert stats.browser_rpt["Lynx"] == pytest.approx(75.0)
        assert stats.browser("never-seen") == pytest.approx(75.0)

    def test_no_transactions_anywhere(self):
        js = [journey("a", "Chrome", "d", [session("a", "s.1")])]
        stats = compute_rpt_stats(js)
        assert stats.zero_transactions
        assert stats.browser_rpt == {"Chrome": 0.0} and stats.device_rpt == {"d": 0.0}
        with pytest.raises(ZeroTransactionsGlobally):
            compute_rpt_stats(js, strict=True)

    def test_conservation_and_brute_force(self, small_journeys):
        stats = compute_rpt_stats(small_journeys)
        for attr, table in (("browser_name", stats.browser_rpt), ("device_name", stats.device_rpt)):
            total_rev, weighted = 0.0, 0.0
            for key in table:
                rev = sum(s.revenue for j in small_journeys if getattr(j.user, attr) == key
                          for s, _ in j.sessions if s.transactions > 0)
                txn = sum(s.transactions for j in small_journeys if getattr(j.user, attr) == key for s, _ in j.sessions)
                if txn:
                    assert table[key] == pytest.approx(rev / txn, rel=1e-12)
                weighted += table[key] * txn
                total_rev += rev
            assert weighted == pytest.approx(total_rev, rel=1e-6)

    def test_recovers_planted_values(self):
        # buyer-heavy corpus of roughly 10k sessions
        cfg = SynthConfig(n_users=2500, archetype_mix={"buyer": 1.0}, seed=5)
        tables, truth = generate(cfg)
        assert len(tables.sessions) >= 9000
        journeys, _ = join_journeys(tables.users, tables.sessions, tables.hits)
        stats = compute_rpt_stats(journeys)
        for name, planted in truth.planted_browser_rpt.items():
            assert stats.browser_rpt[name] == pytest.approx(planted, rel=0.05), name
        for name, planted in truth.planted_device_rpt.items():
            assert stats.device_rpt[name] == pytest.approx(planted, rel=0.05), name
        assert truth.planted_browser_rpt["Safari"] == 200.0

    def test_round_trip_dict(self, small_journeys):
        stats = compute_rpt_stats(small_journeys)
        assert RptStats.from_dict(stats.to_dict()) == stats


class TestHistograms:
    def test_single_category(self):
        j = journey("a", "Chrome", "d", [session("a", "s.1", 100, 1), session("a", "s.2", 50, 1)])
        hist = category_histograms([j])
        assert hist["browser"] == [
            {"category": "Chrome", "users": 1, "revenue": 150.0, "transactions": 2, "revenue_per_transaction": 75.0}
        ]

    def test_empty_revenue(self):
        hist = category_histograms([journey("a", "Chrome", "d", [session("a", "s.1")])])
        assert hist["device"][0]["revenue"] == 0.0
        assert hist["device"][0]["revenue_per_transaction"] == 0.0

    def test_consistent_with_rpt_stats(self, small_journeys):
        hist = category_histograms(small_journeys)
        stats = compute_rpt_stats(small_journeys)
        assert sum(r["users"] for r in hist["browser"]) == len(small_journeys)
        for row in hist["browser"]:
            assert row["revenue_per_transaction"] == stats.browser(row["category"])

    def test_planted_share_distribution(self):
        cfg = SynthConfig(n_users=3000, seed=2)
        tables, _ = generate(cfg)
        journeys, _ = join_journeys(tables.users, tables.sessions, tables.hits)
        counts = {r["category"]: r["users"] for r in category_histograms(journeys)["browser"]}
        n = len(journeys)
        for name, (share, _) in cfg.browsers.items():
            sigma = math.sqrt(n * share * (1 - share))
            assert abs(counts[name] - n * share) <= 3 * sigma


def precedence_oracle(stages):
    """First matching rule, written as (required, forbidden) pairs in priority order."""
    rules = [
        (5, {"TRANSACTION"}, set()),
        (4, {"PRODUCT_VIEW", "CHECKOUT"}, {"ADD_TO_CART"}),
        (3, {"PRODUCT_VIEW", "ADD_TO_CART", "CHECKOUT"}, set()),
        (2, {"PRODUCT_VIEW", "ADD_TO_CART"}, set()),
        (1, {"PRODUCT_VIEW"}, set()),
    ]
    for cls, required, forbidden in rules:
        if required <= stages and not (forbidden & stages):
            return cls
    return 0


class TestShoppingStage:
    def test_all_visits(self):
        assert map_shopping_stage({"ALL_VISITS"}) == 0

    def test_fourth_path(self):
        assert map_shopping_stage({"ALL_VISITS", "PRODUCT_VIEW", "ADD_TO_CART", "CHECKOUT"}) == 3

    def test_transaction_wins(self):
        assert map_shopping_stage({"TRANSACTION", "ADD_TO_CART", "PRODUCT_VIEW"}) == 5

    def test_listed_paths_in_order(self):
        for cls, path in enumerate(CLASS_STAGES):
            assert map_shopping_stage(set(path)) == cls

    def test_all_31_subsets(self):
        subsets = [set(c) for r in range(1, 6) for c in itertools.combinations(STAGE_TOKENS, r)]
        assert len(subsets) == 31
        for s in subsets:
            assert map_shopping_stage(s) == precedence_oracle(s), s

    def test_empty(self):
        with pytest.raises(EmptyStages):
            map_shopping_stage(set())


class TestEncoding:
    stats = RptStats({"Chrome": 75.0}, {}, 75.0, 0.0)

    def test_returning_desktop(self):
        row = RawUserRow("a", "Returning", "desktop", "Chrome", "(not set)")
        np.testing.assert_array_equal(encode_user(row, self.stats), [1, 0, 0, 75, 0])

    def test_new_tablet(self):
        stats = RptStats({}, {}, 0.0, 0.0)
        row = RawUserRow("a", "New", "tablet", "Edge", "iPad")
        np.testing.assert_array_equal(encode_user(row, stats), [0, 0, 1, 0, 0])

    def test_sessions(self):
        np.testing.assert_array_equal(encode_session(session("a", "s.1")), np.zeros(11))
        row = session("a", "s.1", duration_s=120.0, unique_pageviews=3)
        np.testing.assert_array_equal(encode_session(row), [120, 3] + [0] * 9)

    def test_hits(self):
        np.testing.assert_array_equal(encode_hit(RawHitRow("a", "s.1", 720, 30.0, True)), [0.5, 30, 1])
        np.testing.assert_array_equal(encode_hit(RawHitRow("a", "s.1", 0, 0.0, False)), [0, 0, 0])

    def test_synthgen_echo(self, small_journeys):
        stats = compute_rpt_stats(small_journeys)
        for j, e in zip(small_journeys, encode_journeys(small_journeys, stats)):
            assert e.user_vec.shape == (USER_DIM,)
            assert e.session_vecs.shape == (len(j.sessions), SESSION_DIM)
            for (s, hits), vec, hvecs in zip(j.sessions, e.session_vecs, e.hit_vecs):
                assert vec.tolist() == [s.duration_s, s.unique_pageviews, s.transactions, s.revenue,
                                        s.unique_purchases, s.days_since_last_session, float(s.site_search_used),
                                        s.results_pageviews, s.total_unique_searches, s.search_depth,
                                        s.search_refinements]
                assert hvecs.shape == (len(hits), HIT_DIM)
                assert hvecs[:, 0].tolist() == [h.minute_of_day / 1440 for h in hits]
                assert hvecs[:, 1].tolist() == [h.time_on_page_s for h in hits]


def _encoded(user_rows, session_rows, hit_rows):
    return EncodedJourney("x", np.asarray(user_rows[0], float), np.asarray(session_rows, float),
                          [np.asarray(hit_rows, float)], np.zeros(len(session_rows), dtype=int))


class TestNormalizer:
    def test_minmax_two_values(self):
        a = _encoded([[0] * 5], [[0] * 11], [[0, 0, 0]])
        b = _encoded([[10] * 5], [[10] * 11], [[10, 10, 10]])
        norm = fit_normalizer([a, b], "minmax")
        out = norm.transform([a, b])
        assert out[0].user_vec.tolist() == [0] * 5 and out[1].user_vec.tolist() == [1] * 5

    @pytest.mark.parametrize("method", ["minmax", "standard"])
    def test_constant_dimension(self, method):
        a = _encoded([[5] * 5], [[5] * 11], [[5, 5, 5]])
        out = fit_normalizer([a, a], method).transform([a, a])
        assert out[0].user_vec.tolist() == [0] * 5
        assert out[1].hit_vecs[0].tolist() == [[0, 0, 0]]

    def test_standardized_moments(self, small_journeys):
        enc = encode_journeys(small_journeys, compute_rpt_stats(small_journeys))
        out = fit_normalizer(enc, "standard").transform(enc)
        sessions = np.concatenate([j.session_vecs for j in out])
        # recompute moments directly
        for d in range(sessions.shape[1]):
            col = sessions[:, d]
            mean = sum(col) / len(col)
            std = math.sqrt(sum((c - mean) ** 2 for c in col) / len(col))
            assert abs(mean) < 1e-9
            assert std == pytest.approx(1.0, abs=1e-9) or std == 0.0

    def test_minmax_in_unit_interval(self, small_journeys):
        enc = encode_journeys(small_journeys, compute_rpt_stats(small_journeys))
        out = fit_normalizer(enc, "minmax").transform(enc)
        for j in out:
            for arr in [j.user_vec, j.session_vecs, *j.hit_vecs]:
                assert ((arr >= 0) & (arr <= 1)).all()

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (6, 11), elements=st.floats(-1e6, 1e6, allow_nan=False)))
    def test_minmax_property(self, sessions):
        j = EncodedJourney("x", np.zeros(5), sessions, [np.zeros((1, 3))] * 6, np.zeros(6, dtype=int))
        out = fit_normalizer([j], "minmax").transform([j])[0]
        assert ((out.session_vecs >= 0) & (out.session_vecs <= 1 + 1e-12)).all()

    def test_not_fitted(self, small_journeys):
        enc = encode_journeys(small_journeys[:2], compute_rpt_stats(small_journeys))
        with pytest.raises(NotFitted):
            Normalizer("minmax").transform(enc)
        with pytest.raises(NotFitted):
            apply_normalizer(None, enc)

    def test_save_load(self, tmp_path, small_journeys):
        enc = encode_journeys(small_journeys, compute_rpt_stats(small_journeys))
        norm = fit_normalizer(enc, "standard")
        norm.save(tmp_path / "n.json")
        again = Normalizer.load(tmp_path / "n.json")
        a, b = norm.transform(enc[:3]), again.transform(enc[:3])
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.session_vecs, y.session_vecs)


def two_pass_pearson(x):
    n, d = x.shape
    r = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            mi = sum(x[:, i]) / n
            mj = sum(x[:, j]) / n
            cov = sum((x[k, i] - mi) * (x[k, j] - mj) for k in range(n))
            vi = sum((x[k, i] - mi) ** 2 for k in range(n))
            vj = sum((x[k, j] - mj) ** 2 for k in range(n))
            r[i, j] = cov / math.sqrt(vi * vj)
    return r


class TestPearson:
    def test_self(self):
        x = np.array([1.0, 2.0, 4.0, 7.0])
        assert pearson_correlation_matrix(np.c_[x, x])[0, 1] == pytest.approx(1.0, abs=1e-12)

    def test_negated(self):
        x = np.array([1.0, 2.0, 4.0, 7.0])
        assert pearson_correlation_matrix(np.c_[x, -x])[0, 1] == pytest.approx(-1.0, abs=1e-12)

    def test_against_two_pass(self):
        x = np.random.default_rng(0).normal(size=(100, 4))
        np.testing.assert_allclose(pearson_correlation_matrix(x), two_pass_pearson(x), atol=1e-12)

    def test_constant_column(self):
        x = np.c_[np.arange(5.0), np.full(5, 3.0)]
        r = pearson_correlation_matrix(x)
        assert r[0, 1] == 0.0 and r[1, 1] == 1.0

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(2, 20), st.integers(1, 6)), elements=st.floats(-1e3, 1e3)))
    def test_symmetric_unit_diagonal(self, x):
        r = pearson_correlation_matrix(x)
        np.testing.assert_allclose(r, r.T, atol=1e-12)
        np.testing.assert_allclose(np.diag(r), 1.0, atol=1e-12)
        assert (np.abs(r) <= 1.0).all()

    def test_insufficient_rows(self):
        with pytest.raises(InsufficientRows):
            pearson_correlation_matrix([[1.0, 2.0]])
