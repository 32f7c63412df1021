import math
from collections import Counter

import numpy as np
import pytest

from clickpredict.encoding import ConfigurationError
from clickpredict.sessions import sessionize
from clickpredict.synth import (PageGraph, SiteModel, build_page_graph, check_graph, generate_events, generate_raw,
                               generate_sessions)


def skewness(x):
    x = np.asarray(x, dtype=np.float64)
    d = x - x.mean()
    return float((d**3).mean() / (d**2).mean() ** 1.5)


def inter_event_seconds(events):
    gaps = []
    for s in sessionize(events):
        ts = np.array([e.timestamp for e in s.events])
        gaps.extend(np.diff(ts) / 1000.0)
    return np.array(gaps)


class TestGenerator:
    def test_deterministic_archive(self, tmp_path):
        site = SiteModel(n_users=300, seed=4)
        generate_sessions(site, tmp_path / "a.jsonl", tmp_path / "a.tsv")
        generate_sessions(site, tmp_path / "b.jsonl", tmp_path / "b.tsv")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()

    def test_seed_changes_output(self):
        assert generate_raw(SiteModel(n_users=50, seed=1))[0] != generate_raw(SiteModel(n_users=50, seed=2))[0]

    def test_bot_fraction_binomial(self):
        _, truth = generate_raw(SiteModel(n_users=10_000, bot_fraction=0.1, seed=3))
        bots = sum(t.is_bot for t in truth)
        assert abs(bots - 1000) < 3 * math.sqrt(10_000 * 0.1 * 0.9)

    def test_bots_have_bot_agents_and_never_buy(self, small_site):
        _, events, truth = small_site
        bots = {t.anonymous_id for t in truth if t.is_bot}
        assert bots
        assert all(e.user_agent_summary.is_bot for e in events if e.anonymous_id in bots)
        assert not any(t.purchased for t in truth if t.is_bot)

    def test_truth_matches_events(self, small_site):
        cfg, events, truth = small_site
        clicks = Counter(e.anonymous_id for e in events if e.event_type == "click")
        buys = Counter(e.anonymous_id for e in events if e.event_type == "positive")
        for t in truth:
            assert clicks[t.anonymous_id] == t.click_count
            assert buys[t.anonymous_id] == int(t.purchased)
            if not t.is_bot:
                assert t.propensity == cfg.synth.propensity(t.click_count, t.time_on_site_s)

    def test_realized_rates_follow_propensity(self, small_site):
        _, _, truth = small_site
        humans = [t for t in truth if not t.is_bot]
        p = np.array([t.propensity for t in humans])
        y = np.array([t.purchased for t in humans], dtype=float)
        for chunk in np.array_split(np.argsort(p), 5):
            se = math.sqrt(max(p[chunk].mean() * (1 - p[chunk].mean()), 1e-4) / len(chunk))
            assert abs(y[chunk].mean() - p[chunk].mean()) < 4 * se

    def test_engaged_users_buy_far_more(self, small_site):
        _, _, truth = small_site
        humans = [t for t in truth if not t.is_bot]
        base = np.mean([t.purchased for t in humans])
        engaged = [t for t in humans if t.click_count > 10 and t.time_on_site_s > 60]
        assert len(engaged) > 50
        assert np.mean([t.purchased for t in engaged]) > 2 * base
        expected = np.mean([t.propensity for t in engaged])
        se = math.sqrt(expected * (1 - expected) / len(engaged))
        assert abs(np.mean([t.purchased for t in engaged]) - expected) < 4 * se

    def test_propensity_in_unit_interval(self):
        site = SiteModel()
        for clicks in (0, 1, 10, 10**6):
            for tos in (0.0, 60.0, 1e9):
                assert 0.0 <= site.propensity(clicks, tos) <= 1.0

    def test_dwell_heavy_tailed(self, small_site):
        assert skewness(inter_event_seconds(small_site[1])) > 2

    def test_refresh_spike(self):
        events, _ = generate_events(SiteModel(n_users=400, refresh_spike_prob=0.2, seed=5))
        gaps = inter_event_seconds(events)
        near = np.sum(np.abs(gaps - 3600) < 30)
        assert near > 0.05 * np.sum(gaps > 10)


class TestPageGraph:
    def test_connected_from_entry(self):
        for seed in range(20):
            graph = build_page_graph(SiteModel(seed=seed), np.random.default_rng(seed))
            check_graph(graph)
            assert all(np.isclose(w.sum(), 1.0) for w in graph.weights)

    def test_disconnected_rejected(self):
        graph = PageGraph(["/", "/a", "/b"], [np.array([1]), np.array([0]), np.array([0])])
        with pytest.raises(ConfigurationError):
            check_graph(graph)

    def test_too_small(self):
        with pytest.raises(ConfigurationError):
            generate_raw(SiteModel(n_pages=1))
