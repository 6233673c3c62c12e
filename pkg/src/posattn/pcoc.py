"""Simulator for synchronous machines with oracle-driven communication.

``N`` machines each hold ``s`` memory slots. In every round each machine asks
the oracle, with nothing but ``(round, machine)``, which sources and memory
positions to receive. Received values land at the same position they came
from; positions nothing was received into read as 0. Each machine then
applies its local function to the received vector and the result replaces
its memory.

Rounds, machines and memory positions are 1-based throughout, matching the
oracle's signature; memory arrays are 0-based numpy arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

LOCAL_OPS = ("min", "max", "sum", "identity", "zero")


class InvalidInstanceError(ValueError):
    pass


@dataclass(frozen=True)
class LocalFn:
    """A supported local function.

    ``min``, ``max`` and ``sum`` reduce the whole received vector and write the
    result to every slot; ``identity`` passes the received vector through;
    ``zero`` clears the memory.
    """

    op: str

    def __post_init__(self):
        if self.op not in LOCAL_OPS:
            raise ValueError(f"unknown local op {self.op!r}; expected one of {LOCAL_OPS}")

    def __call__(self, mem: np.ndarray) -> np.ndarray:
        if self.op == "identity":
            return mem.copy()
        if self.op == "zero":
            return np.zeros_like(mem)
        reduce = {"min": np.min, "max": np.max, "sum": np.sum}[self.op]
        return np.full_like(mem, reduce(mem))


IDENTITY = LocalFn("identity")


@dataclass
class PCOCInstance:
    """Machines, rounds, memory size, routing table and local functions.

    ``routes[(r, i)]`` lists ``(j, positions)``: machine ``i`` receives the
    given positions of machine ``j`` in round ``r``. Missing keys mean no
    communication (routes) or the identity (local functions).
    """

    N: int
    R: int
    s: int
    routes: dict[tuple[int, int], list[tuple[int, frozenset[int]]]] = field(default_factory=dict)
    local_fns: dict[tuple[int, int], Callable[[np.ndarray], np.ndarray]] = field(default_factory=dict)
    name: str = "custom"

    def rcv(self, r: int, i: int) -> list[tuple[int, frozenset[int]]]:
        """The oracle: sources and positions machine ``i`` receives in round ``r``."""
        return self.routes.get((r, i), [])

    def local_fn(self, r: int, i: int):
        return self.local_fns.get((r, i), IDENTITY)

    def add_route(self, r: int, dest: int, src: int, positions) -> None:
        self.routes.setdefault((r, dest), []).append((src, frozenset(positions)))

    def describe(self) -> dict:
        return {
            "name": self.name,
            "N": self.N,
            "R": self.R,
            "s": self.s,
            "routes": [
                {"round": r, "dest": i, "src": j, "positions": sorted(K)}
                for (r, i), lst in sorted(self.routes.items())
                for j, K in lst
            ],
            "local_fns": [
                {"round": r, "machine": i, "op": getattr(fn, "op", repr(fn))}
                for (r, i), fn in sorted(self.local_fns.items())
            ],
        }


def from_description(doc: dict) -> PCOCInstance:
    """Inverse of :meth:`PCOCInstance.describe` for instances with named local ops."""
    P = PCOCInstance(int(doc["N"]), int(doc["R"]), int(doc["s"]), name=doc.get("name", "custom"))
    for e in doc.get("routes", []):
        P.add_route(int(e["round"]), int(e["dest"]), int(e["src"]), e["positions"])
    for e in doc.get("local_fns", []):
        P.local_fns[(int(e["round"]), int(e["machine"]))] = LocalFn(e["op"])
    return P


@dataclass
class ValidationReport:
    ok: bool
    kind: str = ""
    where: tuple = ()
    message: str = ""

    def __bool__(self) -> bool:
        return self.ok


def validate(instance: PCOCInstance) -> ValidationReport:
    """Check index ranges, the per-round send/receive budget and no-collision.

    Returns a report naming the first violation; never raises.
    """
    P = instance
    if P.N < 1 or P.s < 1 or P.R < 0:
        return ValidationReport(False, "shape", (P.N, P.R, P.s), f"bad sizes N={P.N} R={P.R} s={P.s}")
    for (r, i), lst in sorted(P.routes.items()):
        if not (1 <= r <= P.R and 1 <= i <= P.N):
            return ValidationReport(False, "range", (r, i), f"route key (round {r}, machine {i}) out of range")
        for j, K in lst:
            if not 1 <= j <= P.N:
                return ValidationReport(False, "range", (r, i, j), f"round {r}: machine {i} receives from unknown machine {j}")
            if not K or min(K) < 1 or max(K) > P.s:
                return ValidationReport(False, "range", (r, i, j), f"round {r}: bad position set {sorted(K)} from {j} to {i}")
    for r in range(1, P.R + 1):
        sent = np.zeros(P.N + 1, dtype=int)
        for i in range(1, P.N + 1):
            received = sum(len(K) for _, K in P.rcv(r, i))
            if received > P.s:
                return ValidationReport(
                    False, "budget", (r, i), f"round {r}: machine {i} receives {received} > s={P.s} values"
                )
            taken: dict[int, int] = {}
            for j, K in P.rcv(r, i):
                sent[j] += len(K)
                for z in sorted(K):
                    if z in taken:
                        return ValidationReport(
                            False,
                            "collision",
                            (i, z),
                            f"round {r}: machines {taken[z]} and {j} both deliver position {z} to machine {i}",
                        )
                    taken[z] = j
        over = np.flatnonzero(sent > P.s)
        if over.size:
            j = int(over[0])
            return ValidationReport(False, "budget", (r, j), f"round {r}: machine {j} sends {sent[j]} > s={P.s} values")
    return ValidationReport(True)


def initial_memory(instance: PCOCInstance, x) -> np.ndarray:
    """One input value per machine, written to every memory slot."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != instance.N:
        raise ValueError(f"expected {instance.N} input values, got {x.size}")
    return np.repeat(x[:, None], instance.s, axis=1)


def run(instance: PCOCInstance, x, trace: bool = False):
    """Execute every round; returns the (N, s) memory array, plus a trace if asked."""
    report = validate(instance)
    if not report:
        raise InvalidInstanceError(report.message)
    P = instance
    mem = initial_memory(P, x)
    log = []
    for r in range(1, P.R + 1):
        new = np.empty_like(mem)
        deliveries = []
        for i in range(1, P.N + 1):
            got = np.zeros(P.s)
            for j, K in P.rcv(r, i):
                for z in sorted(K):
                    got[z - 1] = mem[j - 1, z - 1]
                    if trace:
                        deliveries.append(
                            {"source": j, "dest": i, "position": z, "value": float(mem[j - 1, z - 1])}
                        )
            new[i - 1] = P.local_fn(r, i)(got)
        mem = new
        if trace:
            log.append({"round": r, "deliveries": deliveries, "memory": mem.tolist()})
    return (mem, log) if trace else mem


def trace_json(log: list[dict]) -> str:
    return json.dumps(log, indent=1)


# --------------------------------------------------------------------------
# reference algorithms


def num_rounds(N: int) -> int:
    return math.ceil(math.log2(N)) if N > 1 else 0


def build_tree_reduce(N: int, op: str = "min", cumulative: bool = False) -> PCOCInstance:
    """Binary-tree reduction over ``s = 2`` slots in ceil(log2 N) rounds.

    In round ``r`` a combining machine ``i`` takes slot 1 from itself and slot 2
    from machine ``i - 2**(r-1)``, then writes ``op`` of the two to both slots.
    The cumulative variant combines at every ``i > 2**(r-1)`` (a prefix scan,
    so machine ``i`` ends with the reduction of ``x[1..i]``); the plain
    variant only at machines a multiple of ``2**r`` away from ``N``, so
    machine ``N`` ends with the full reduction. Idle machines receive only
    their own slot 1 and sum what they received, which copies that value
    into both slots (slot 2 reads as 0).
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    if op not in ("min", "sum", "max"):
        raise ValueError(f"tree reduction supports min, max and sum, got {op!r}")
    kind = "cumulative" if cumulative else "tree"
    P = PCOCInstance(N=N, R=num_rounds(N), s=2, name=f"{kind}_{op}_{N}")
    for r in range(1, P.R + 1):
        stride = 2 ** (r - 1)
        for i in range(1, N + 1):
            partner = i - stride
            combines = partner >= 1 and (cumulative or (N - i) % (2 * stride) == 0)
            if combines:
                P.add_route(r, i, i, {1})
                P.add_route(r, i, partner, {2})
                P.local_fns[(r, i)] = LocalFn(op)
            else:
                P.add_route(r, i, i, {1})
                P.local_fns[(r, i)] = LocalFn("sum")
    return P


def odd_even_rounds(N: int) -> int:
    return 1 if N == 2 else N


def build_odd_even_sort(N: int) -> PCOCInstance:
    """Odd-even transposition sort by adjacent compare-exchange.

    Rounds alternate between pairs (1,2),(3,4),... and (2,3),(4,5),...; the
    lower machine of a pair keeps the min, the higher the max. N rounds are
    needed for every input once N >= 3 (N - 1 rounds leave e.g. [4,3,2,1]
    as [1,3,2,4]); N = 2 needs one.
    """
    if N < 2:
        raise ValueError("odd-even sort needs N >= 2")
    P = PCOCInstance(N=N, R=odd_even_rounds(N), s=2, name=f"odd_even_sort_{N}")
    for r in range(1, P.R + 1):
        first = 1 if r % 2 == 1 else 2
        paired = set()
        for lo in range(first, N, 2):
            hi = lo + 1
            P.add_route(r, lo, lo, {1})
            P.add_route(r, lo, hi, {2})
            P.add_route(r, hi, hi, {1})
            P.add_route(r, hi, lo, {2})
            P.local_fns[(r, lo)] = LocalFn("min")
            P.local_fns[(r, hi)] = LocalFn("max")
            paired.update((lo, hi))
        for i in range(1, N + 1):
            if i not in paired:
                P.add_route(r, i, i, {1})
                P.local_fns[(r, i)] = LocalFn("sum")
    return P


BUILDERS = {
    "tree_min": lambda N: build_tree_reduce(N, "min", cumulative=False),
    "tree_sum": lambda N: build_tree_reduce(N, "sum", cumulative=False),
    "cumulative_min": lambda N: build_tree_reduce(N, "min", cumulative=True),
    "cumulative_sum": lambda N: build_tree_reduce(N, "sum", cumulative=True),
    "odd_even_sort": build_odd_even_sort,
}
