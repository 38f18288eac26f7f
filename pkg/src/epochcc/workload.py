"""Seed-deterministic transaction streams.

``ycsb-a`` is 50% reads, ``ycsb-b`` 95% reads, over ``rows`` preloaded keys
drawn uniformly or from a zipf law (rejection-inversion sampling, exponent
``theta``). ``tpcc-lite`` is a small two-table NewOrder/Payment-shaped mix
on the table engine. It is not TPC-C and makes no conformance claim.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Iterator, Optional

from .errors import ConfigError


@dataclass(frozen=True)
class Op:
    kind: str            # read | update | rmw | insert | delete | new_order
    key: bytes
    engine: str = "kv"
    arg: bytes = b""     # new_order: key prefix of the order row


@dataclass(frozen=True)
class TxnPlan:
    ops: tuple
    cross: bool = False  # split by engine into a two-member group


@dataclass
class WorkloadSpec:
    kind: str = "ycsb-a"
    rows: int = 1000
    ops: int = 10
    read_fraction: Optional[float] = None
    distribution: str = "zipf"
    theta: float = 0.99
    insert_fraction: float = 0.0
    delete_fraction: float = 0.0
    cross_model: float = 0.0
    districts: int = 10

    def __post_init__(self):
        if self.kind not in ("ycsb-a", "ycsb-b", "tpcc-lite"):
            raise ConfigError(f"unknown workload {self.kind!r}")
        if self.distribution not in ("zipf", "uniform"):
            raise ConfigError(f"unknown distribution {self.distribution!r}")
        if self.rows < 1 or self.ops < 1:
            raise ConfigError("rows and ops must be positive")
        for name in ("insert_fraction", "delete_fraction", "cross_model"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be within [0, 1]")
        if self.read_fraction is not None and not 0.0 <= self.read_fraction <= 1.0:
            raise ConfigError("read_fraction must be within [0, 1]")

    @property
    def reads(self) -> float:
        if self.read_fraction is not None:
            return self.read_fraction
        return 0.95 if self.kind == "ycsb-b" else 0.5


class ZipfSampler:
    """Rejection-inversion sampling of ranks 1..n with P(k) ~ k^-s.

    No table is built, so n may be large. Rank 1 is the most frequent.
    """

    def __init__(self, n: int, s: float):
        if n < 1 or s <= 0:
            raise ConfigError("zipf needs n >= 1 and s > 0")
        self.n = n
        self.s = s
        self.h_x1 = self._H(1.5) - 1.0
        self.h_n = self._H(n + 0.5)
        self.cut = 2.0 - self._Hinv(self._H(2.5) - self._h(2.0))

    def _h(self, x):
        return math.exp(-self.s * math.log(x))

    def _H(self, x):
        lx = math.log(x)
        return _expm1_over(lx * (1.0 - self.s)) * lx

    def _Hinv(self, x):
        t = max(x * (1.0 - self.s), -1.0)
        return math.exp(_log1p_over(t) * x)

    def sample(self, rng: random.Random) -> int:
        while True:
            u = self.h_n + rng.random() * (self.h_x1 - self.h_n)
            x = self._Hinv(u)
            k = min(max(int(x + 0.5), 1), self.n)
            if k - x <= self.cut or u >= self._H(k + 0.5) - self._h(k):
                return k


def _expm1_over(x):
    return math.expm1(x) / x if abs(x) > 1e-8 else 1.0 + x / 2.0


def _log1p_over(x):
    return math.log1p(x) / x if abs(x) > 1e-8 else 1.0 - x / 2.0


def kv_key(i: int) -> bytes:
    return b"user%08d" % i


def table_key(i: int) -> bytes:
    return b"stock:%08d" % i


def base_dataset(spec: WorkloadSpec) -> dict:
    """{engine: {key: value}} preloaded before the run."""
    if spec.kind == "tpcc-lite":
        t = {b"warehouse:1": b"0"}
        for d in range(1, spec.districts + 1):
            t[b"district:%02d" % d] = b"0"
        for c in range(spec.rows):
            t[b"customer:%06d" % c] = b"0"
        return {"table": t}
    out = {"kv": {kv_key(i): b"v0" for i in range(spec.rows)}}
    if spec.cross_model:
        out["table"] = {table_key(i): b"v0" for i in range(spec.rows)}
    return out


def engines_of(spec: WorkloadSpec) -> tuple:
    return tuple(sorted(base_dataset(spec)))


class Generator:
    def __init__(self, spec: WorkloadSpec, seed: int):
        self.spec = spec
        self.rng = random.Random(f"workload:{seed}")
        self.zipf = ZipfSampler(spec.rows, spec.theta) if spec.distribution == "zipf" else None
        self.next_insert = spec.rows

    def rank(self) -> int:
        if self.zipf is not None:
            return self.zipf.sample(self.rng) - 1
        return self.rng.randrange(self.spec.rows)

    def __iter__(self) -> Iterator[TxnPlan]:
        return self

    def __next__(self) -> TxnPlan:
        if self.spec.kind == "tpcc-lite":
            return self._tpcc()
        return self._ycsb()

    def _ycsb(self) -> TxnPlan:
        spec, rng = self.spec, self.rng
        cross = spec.cross_model > 0 and rng.random() < spec.cross_model
        ops = []
        for i in range(spec.ops):
            engine = "table" if cross and i % 2 else "kv"
            keyf = table_key if engine == "table" else kv_key
            r = rng.random()
            if r < spec.reads:
                ops.append(Op("read", keyf(self.rank()), engine))
                continue
            w = rng.random()
            if w < spec.insert_fraction:
                ops.append(Op("insert", keyf(self.next_insert), engine))
                self.next_insert += 1
            elif w < spec.insert_fraction + spec.delete_fraction:
                ops.append(Op("delete", keyf(self.rank()), engine))
            else:
                ops.append(Op("update", keyf(self.rank()), engine))
        return TxnPlan(tuple(ops), cross)

    def _tpcc(self) -> TxnPlan:
        spec, rng = self.spec, self.rng
        d = rng.randrange(1, spec.districts + 1)
        district = b"district:%02d" % d
        if rng.random() < 0.5:
            # NewOrder: bump the district counter and insert the order row
            ops = [Op("new_order", district, "table", b"order:%02d" % d)]
            for _ in range(max(0, spec.ops - 2)):
                ops.append(Op("read", b"customer:%06d" % self.rank(), "table"))
        else:
            # Payment
            ops = [Op("rmw", b"warehouse:1", "table"), Op("rmw", district, "table"),
                   Op("rmw", b"customer:%06d" % self.rank(), "table")]
        return TxnPlan(tuple(ops))


def gen_workload(spec: WorkloadSpec, seed: int) -> Generator:
    return Generator(spec, seed)
