import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clickpredict.encoding import (BucketSpec, ConfigurationError, EncoderConfig, EncodingError,
                                   build_combined_buckets, encode_instance, fnv1a_64, hash_buckets,
                                   linear_bucket_vector, normalize, one_hot)
from clickpredict.examples import drop_types, make_instance

from conftest import make_event


def random_url_strings(rng, k):
    return {f"/{rng.choice(['p', 'c', 'cart', 'search'])}/{rng.integers(10**9)}?q={rng.integers(10**6)}"
            for _ in range(k)}


class TestHashBuckets:
    def test_fnv_reference_values(self):
        # published FNV-1a 64-bit test vectors
        assert fnv1a_64("") == 0xCBF29CE484222325
        assert fnv1a_64("a") == 0xAF63DC4C8601EC8C
        assert fnv1a_64("foobar") == 0x85944171F73967E8

    def test_empty_set(self):
        assert np.array_equal(hash_buckets([], 100), np.zeros(100))

    def test_single_string_sets_one_or_two_bits(self):
        v = hash_buckets(["a"], 100)
        i, j = fnv1a_64("a") % 100, fnv1a_64("a" + "some_fixed_string") % 100
        assert v.sum() == (1 if i == j else 2)
        assert v[i] == v[j] == 1

    def test_permutation_invariant(self):
        s = ["x", "y", "zz", "path:/cart"]
        assert np.array_equal(hash_buckets(s), hash_buckets(s[::-1]))

    def test_salt_changes_second_probe(self):
        assert not np.array_equal(hash_buckets(["abc", "def"], 100, "s1"), hash_buckets(["abc", "def"], 100, "s2"))

    def test_sparsity_matches_ideal_hash_within_3_se(self):
        n, k, trials = 100, 10, 1000
        rng = np.random.default_rng(1)
        zeros = np.array([1 - hash_buckets(random_url_strings(rng, k), n).mean() for _ in range(trials)])
        m = 2 * k
        q1, q2 = (1 - 1 / n) ** m, (1 - 2 / n) ** m
        mean_z = n * q1
        var_z = n * (n - 1) * q2 + n * q1 - mean_z**2
        se = math.sqrt(var_z) / n / math.sqrt(trials)
        assert abs(zeros.mean() - q1) < 3 * se

    def test_n_too_small(self):
        with pytest.raises(ConfigurationError):
            hash_buckets(["a"], 1)


class TestOneHotAndNormalize:
    def test_first_value(self):
        assert one_hot("a", ["a", "b", "c", "d"]).tolist() == [1, 0, 0, 0]

    def test_oov_slot(self):
        assert one_hot("zz", ["a", "b"], oov=True).tolist() == [0, 0, 1]

    def test_oov_without_slot(self):
        with pytest.raises(EncodingError):
            one_hot("zz", ["a", "b"])

    def test_empty_vocab(self):
        with pytest.raises(EncodingError):
            one_hot("a", [])

    @pytest.mark.parametrize("x,expected", [(0, 0.0), (100, 1.0), (42, 0.42), (-5, 0.0), (150, 1.0)])
    def test_normalize(self, x, expected):
        assert normalize(x, 0, 100) == pytest.approx(expected, abs=1e-15)

    def test_empty_range(self):
        with pytest.raises(ConfigurationError):
            normalize(1, 5, 5)


def scan_oracle(value, start, end, n):
    """Count edges <= value using exact rational edges, then clamp."""
    v = Fraction(value)
    s, e = Fraction(start), Fraction(end)
    count = sum(1 for i in range(n) if s + (e - s) * i / (n - 1) <= v)
    return min(max(count - 1, 0), n - 1)


class TestLinearBuckets:
    @pytest.mark.parametrize("value,index", [(42, 4), (0, 0), (100, 10), (-3, 0), (1e6, 10), (49.999, 4), (50, 5)])
    def test_reference_cases(self, value, index):
        v = linear_bucket_vector(value, 0, 100, 11)
        assert v.shape == (11,)
        assert v.sum() == 1 and v[index] == 1

    def test_matches_digitize_on_integer_grid(self):
        edges = np.arange(0, 101, 10)
        for value in np.linspace(0, 100, 1001):
            assert np.argmax(linear_bucket_vector(value, 0, 100, 11)) == np.digitize(value, edges) - 1

    def test_random_against_scan_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(2000):
            start = float(rng.uniform(-100, 100))
            end = start + float(rng.uniform(0.1, 500))
            n = int(rng.integers(2, 40))
            value = float(rng.uniform(start - 50, end + 50))
            assert np.argmax(linear_bucket_vector(value, start, end, n)) == scan_oracle(value, start, end, n)

    @pytest.mark.parametrize("start,end,n", [(0, 100, 1), (5, 5, 4), (10, 0, 4)])
    def test_invalid(self, start, end, n):
        with pytest.raises(ConfigurationError):
            linear_bucket_vector(1, start, end, n)


class TestCombinedBuckets:
    def test_worked_example(self):
        spec = build_combined_buckets(1, 5, 100, 10)
        p = 20 ** (1 / 5)
        expected = [0, 1, 2, 3, 4, 5] + [5 * p**i for i in range(1, 6)]
        assert spec.edges == pytest.approx(expected, rel=1e-12)
        assert spec.edges[6:] == pytest.approx([9.1028, 16.5723, 30.1709, 54.9280, 100.0], abs=1e-4)

    def test_default_dwell_spec(self):
        spec = build_combined_buckets(5, 60, 7200, 30)
        assert spec.n_buckets == 31
        assert spec.edges[12] == 60 and spec.edges[-1] == 7200

    def test_boundary_conditions_random(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            s_l = float(rng.choice([0.5, 1, 2, 5]))
            k = int(rng.integers(1, 30))
            c_l = s_l * k
            c_n = c_l * float(rng.uniform(1.5, 500))
            n = k + int(rng.integers(1, 40))
            edges = np.array(build_combined_buckets(s_l, c_l, c_n, n).edges)
            p = (c_n / c_l) ** (1 / (n - k))
            # the geometric sequence at i = 0 is the linear cutoff, at i = N - k the outer cutoff
            assert math.isclose(c_l * p**0, edges[k], rel_tol=1e-9)
            assert math.isclose(edges[-1], c_n, rel_tol=1e-9)
            assert math.isclose(c_l * p ** (n - k), c_n, rel_tol=1e-9)
            assert edges[0] == 0 and np.all(np.diff(edges) > 0)

    @pytest.mark.parametrize("args", [(1, 5, 5, 10), (0, 5, 100, 10), (2, 5, 100, 10), (1, 60, 7200, 30)])
    def test_invalid(self, args):
        with pytest.raises(ConfigurationError):
            build_combined_buckets(*args)

    def test_bucket_spec_must_increase(self):
        with pytest.raises(ConfigurationError):
            BucketSpec((0.0, 1.0, 1.0))

    def test_peak_narrow_tail_wide(self):
        spec = build_combined_buckets(5, 60, 7200, 30)
        e = np.array(spec.edges)

        def width(value):
            i = int(np.argmax(spec.vector(value)))
            return e[i + 1] - e[i]

        assert width(22.0) == 5
        assert width(3000.0) > 500


class TestEncodeInstance:
    cfg = EncoderConfig.for_max_len(40)

    def test_dimensions(self):
        assert self.cfg.event_vector_dim == 137
        assert self.cfg.metadata_vector_dim == 5

    def test_all_blank(self):
        seq, meta = encode_instance(make_instance([], [], 40), self.cfg, 40)
        assert seq.shape == (40, 137) and not seq.any() and not meta.any()

    def test_identical_events_differ_only_in_dwell(self):
        inst = make_instance([make_event(0), make_event(30_000)], [], 40)
        seq, _ = encode_instance(inst, self.cfg, 40)
        a, b = seq[-2], seq[-1]
        static = 100 + 6
        assert np.array_equal(a[:static], b[:static])
        assert not np.array_equal(a[static:], b[static:])

    def test_layout(self):
        inst = make_instance([make_event(0, kind="click")], [], 40)
        row = encode_instance(inst, self.cfg, 40)[0][-1]
        assert row[100:106].tolist() == [0, 1, 0, 0, 0, 0]
        assert row[106:].sum() == 1 and row[106] == 1  # first event has zero dwell

    def test_length_mismatch(self):
        with pytest.raises(EncodingError):
            encode_instance(make_instance([make_event(0)], [], 10), self.cfg, 40)

    def test_config_round_trip(self):
        assert EncoderConfig.from_dict(self.cfg.to_dict()) == self.cfg
        bad = dict(self.cfg.to_dict(), event_vector_dim=99)
        with pytest.raises(EncodingError):
            EncoderConfig.from_dict(bad)


kinds = st.sampled_from(["page", "click", "scroll", "log"])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(kinds, st.integers(0, 10**7), st.text(max_size=8)), max_size=50))
def test_encoder_outputs_in_unit_interval(spec):
    t, evs = 0, []
    for kind, gap, path in spec:
        t += gap
        evs.append(make_event(t + 1, kind=kind, path="/" + path))
    cfg = EncoderConfig.for_max_len(40)
    seq, meta = encode_instance(make_instance(evs, [drop_types(["log"])], 40), cfg, 40)
    assert seq.shape == (40, cfg.event_vector_dim)
    assert np.all((seq >= 0) & (seq <= 1)) and np.all((meta >= 0) & (meta <= 1))
