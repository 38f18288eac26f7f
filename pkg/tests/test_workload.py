import random
from collections import Counter

import pytest
from scipy import stats

from epochcc.errors import ConfigError
from epochcc.workload import WorkloadSpec, ZipfSampler, base_dataset, engines_of, gen_workload


@pytest.mark.parametrize("n,s", [(50, 0.99), (20, 1.5), (100, 0.5)])
def test_zipf_matches_pmf(n, s):
    z = ZipfSampler(n, s)
    rng = random.Random(11)
    draws = 40000
    hist = Counter(z.sample(rng) for _ in range(draws))
    assert min(hist) >= 1 and max(hist) <= n
    pmf = stats.zipfian.pmf(range(1, n + 1), s, n)
    observed = [hist.get(k, 0) for k in range(1, n + 1)]
    _, p = stats.chisquare(observed, pmf * draws)
    assert p > 1e-3


def test_zipf_large_n_needs_no_table():
    z = ZipfSampler(10**9, 0.99)
    rng = random.Random(1)
    assert all(1 <= z.sample(rng) <= 10**9 for _ in range(100))


@pytest.mark.parametrize("kw", [dict(kind="tpcc"), dict(distribution="normal"), dict(rows=0),
                                dict(cross_model=1.5), dict(read_fraction=-0.1)])
def test_spec_validation(kw):
    with pytest.raises(ConfigError):
        WorkloadSpec(**kw)


def test_generator_is_seeded():
    spec = WorkloadSpec(kind="ycsb-a")
    a, b = gen_workload(spec, 3), gen_workload(spec, 3)
    assert [next(a) for _ in range(50)] == [next(b) for _ in range(50)]
    c = gen_workload(spec, 4)
    assert [next(a) for _ in range(50)] != [next(c) for _ in range(50)]


def test_read_mix():
    for kind, want in (("ycsb-a", 0.5), ("ycsb-b", 0.95)):
        g = gen_workload(WorkloadSpec(kind=kind, distribution="uniform"), 1)
        ops = [op for _ in range(500) for op in next(g).ops]
        frac = sum(op.kind == "read" for op in ops) / len(ops)
        assert abs(frac - want) < 0.03


def test_cross_model_plans_touch_both_engines():
    spec = WorkloadSpec(cross_model=1.0)
    assert engines_of(spec) == ("kv", "table")
    plan = next(gen_workload(spec, 1))
    assert plan.cross and {op.engine for op in plan.ops} == {"kv", "table"}


def test_inserts_use_fresh_keys():
    spec = WorkloadSpec(rows=10, read_fraction=0.0, insert_fraction=1.0)
    g = gen_workload(spec, 1)
    keys = [op.key for _ in range(20) for op in next(g).ops]
    assert len(set(keys)) == len(keys)
    assert not set(keys) & set(base_dataset(spec)["kv"])


def test_tpcc_lite_shapes():
    g = gen_workload(WorkloadSpec(kind="tpcc-lite", rows=100), 2)
    kinds = Counter(next(g).ops[0].kind for _ in range(200))
    assert set(kinds) == {"new_order", "rmw"}
