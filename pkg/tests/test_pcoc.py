import inspect
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from posattn import pcoc
from posattn.pcoc import (
    BUILDERS,
    InvalidInstanceError,
    LocalFn,
    PCOCInstance,
    build_odd_even_sort,
    build_tree_reduce,
    from_description,
    initial_memory,
    run,
    validate,
)
from posattn.tasks import task_oracle


def truncated(P: PCOCInstance, rounds: int) -> PCOCInstance:
    Q = PCOCInstance(P.N, rounds, P.s, name=P.name)
    Q.routes = {k: v for k, v in P.routes.items() if k[0] <= rounds}
    Q.local_fns = {k: v for k, v in P.local_fns.items() if k[0] <= rounds}
    return Q


# -- validation ----------------------------------------------------------------


def test_tree_min_instance_validates():
    assert validate(build_tree_reduce(4, "min"))


@pytest.mark.parametrize("name", sorted(BUILDERS))
@pytest.mark.parametrize("N", [2, 3, 5, 8, 13, 32])
def test_every_builtin_validates(name, N):
    report = validate(BUILDERS[name](N))
    assert report.ok, report.message


def test_collision_is_reported_at_destination_and_position():
    P = PCOCInstance(N=3, R=1, s=2)
    P.add_route(1, 3, 1, {1})
    P.add_route(1, 3, 2, {1})
    report = validate(P)
    assert not report and report.kind == "collision" and report.where == (3, 1)


def test_receive_budget_is_reported():
    P = PCOCInstance(N=3, R=1, s=2)
    P.add_route(1, 2, 1, {1, 2})
    P.add_route(1, 2, 3, {1})
    report = validate(P)
    assert report.kind == "budget" and report.where == (1, 2)


def test_send_budget_is_reported():
    P = PCOCInstance(N=4, R=1, s=1)
    for dest in (2, 3):
        P.add_route(1, dest, 1, {1})
    report = validate(P)
    assert report.kind == "budget" and report.where == (1, 1)


@pytest.mark.parametrize(
    "route", [(2, 1, 1, {1}), (1, 5, 1, {1}), (1, 1, 0, {1}), (1, 1, 2, {3})]
)
def test_out_of_range_routes_are_reported(route):
    P = PCOCInstance(N=4, R=1, s=2)
    P.add_route(*route)
    assert validate(P).kind == "range"


def test_validate_never_raises_on_garbage():
    assert validate(PCOCInstance(N=0, R=1, s=1)).kind == "shape"


@given(st.sampled_from(["cumulative_min", "tree_sum", "odd_even_sort"]), st.integers(3, 12), st.data())
def test_injected_collision_is_caught(name, N, data):
    P = BUILDERS[name](N)
    r = data.draw(st.integers(1, P.R))
    dest = data.draw(st.integers(1, N))
    taken = [(j, z) for j, K in P.rcv(r, dest) for z in K]
    if not taken:
        return
    j, z = data.draw(st.sampled_from(taken))
    other = data.draw(st.sampled_from([k for k in range(1, N + 1) if k != j]))
    P.routes[(r, dest)] = [(src, K) for src, K in P.rcv(r, dest)] + [(other, frozenset({z}))]
    report = validate(P)
    assert not report.ok and report.kind in ("collision", "budget")


def test_oracle_sees_only_round_and_machine():
    assert list(inspect.signature(PCOCInstance.rcv).parameters) == ["self", "r", "i"]


def test_invalid_instance_is_refused():
    P = PCOCInstance(N=2, R=1, s=1)
    P.add_route(1, 1, 1, {1})
    P.add_route(1, 1, 2, {1})
    with pytest.raises(InvalidInstanceError):
        run(P, [1.0, 2.0])


# -- execution -----------------------------------------------------------------


def test_zero_rounds_leave_initial_placement():
    P = PCOCInstance(N=3, R=0, s=2)
    x = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(run(P, x), initial_memory(P, x))
    np.testing.assert_array_equal(run(P, x)[:, 0], x)


def test_unreceived_positions_read_zero():
    P = PCOCInstance(N=2, R=1, s=2)
    P.add_route(1, 1, 2, {2})
    mem = run(P, [3.0, 7.0])
    np.testing.assert_array_equal(mem, [[0.0, 7.0], [0.0, 0.0]])


def test_received_data_lands_at_its_source_position():
    P = PCOCInstance(N=2, R=1, s=3)
    P.add_route(1, 1, 2, {3})
    P.local_fns[(1, 2)] = LocalFn("zero")
    mem = run(P, [1.0, 4.0])
    np.testing.assert_array_equal(mem, [[0.0, 0.0, 4.0], [0.0, 0.0, 0.0]])


@pytest.mark.parametrize("op,expected", [("min", [1.0, 1.0]), ("max", [4.0, 4.0]), ("sum", [5.0, 5.0])])
def test_local_functions_reduce_the_received_vector(op, expected):
    np.testing.assert_array_equal(LocalFn(op)(np.array([1.0, 4.0])), expected)


def test_unknown_local_op_is_rejected():
    with pytest.raises(ValueError):
        LocalFn("median")


def test_tree_min_last_machine_holds_minimum():
    P = build_tree_reduce(8, "min")
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.uniform(-2, 2, 8)
        assert run(P, x)[-1, 0] == x.min()


def test_single_machine_tree_is_identity():
    P = build_tree_reduce(1, "min")
    assert P.R == 0
    np.testing.assert_array_equal(run(P, [0.25])[:, 0], [0.25])


def test_tree_sum_of_four():
    assert run(build_tree_reduce(4, "sum"), [1.0, 2.0, 3.0, 4.0])[-1, 0] == 10.0


def test_cumulative_min_of_four():
    np.testing.assert_array_equal(run(build_tree_reduce(4, "min", True), [2.0, 1.0, 3.0, 0.0])[:, 0], [2, 1, 1, 0])


def test_round_counts():
    for N in range(1, 40):
        assert build_tree_reduce(N).R == (int(np.ceil(np.log2(N))) if N > 1 else 0)


@pytest.mark.parametrize("N", [2, 4, 8, 16, 32])
def test_cumulative_min_matches_oracle(N):
    P = build_tree_reduce(N, "min", cumulative=True)
    rng = np.random.default_rng(N)
    for _ in range(1000):
        x = rng.uniform(-2, 2, N)
        np.testing.assert_array_equal(run(P, x)[:, 0], task_oracle("cumulative_min", x))


@pytest.mark.parametrize("N", [2, 4, 8, 16, 32])
def test_cumulative_sum_matches_oracle(N):
    # Multiples of 2^-10 keep every partial sum exact, whatever the order.
    P = build_tree_reduce(N, "sum", cumulative=True)
    rng = np.random.default_rng(N)
    for _ in range(1000):
        x = rng.integers(-2048, 2049, N) / 1024.0
        np.testing.assert_array_equal(run(P, x)[:, 0], task_oracle("cumulative_sum", x))
    x = rng.uniform(-2, 2, N)
    np.testing.assert_allclose(run(P, x)[:, 0], task_oracle("cumulative_sum", x), atol=1e-12, rtol=0)


def test_two_machine_sort():
    np.testing.assert_array_equal(run(build_odd_even_sort(2), [5.0, 1.0])[:, 0], [1.0, 5.0])
    assert build_odd_even_sort(2).R == 1


def test_sort_example_after_three_rounds():
    P = truncated(build_odd_even_sort(4), 3)
    np.testing.assert_array_equal(run(P, [3.0, 1.0, 4.0, 2.0])[:, 0], [1, 2, 3, 4])


def test_reverse_sorted_four_needs_four_rounds():
    full = build_odd_even_sort(4)
    np.testing.assert_array_equal(run(full, [4.0, 3.0, 2.0, 1.0])[:, 0], [1, 2, 3, 4])
    # N - 1 = 3 rounds are one short for this input.
    np.testing.assert_array_equal(run(truncated(full, 3), [4.0, 3.0, 2.0, 1.0])[:, 0], [1, 3, 2, 4])


@pytest.mark.parametrize("N", range(2, 9))
def test_sort_matches_oracle(N):
    P = build_odd_even_sort(N)
    rng = np.random.default_rng(N)
    for _ in range(1000):
        x = rng.uniform(-2, 2, N)
        np.testing.assert_array_equal(run(P, x)[:, 0], task_oracle("sorting", x))


@given(st.integers(2, 9), st.integers(0, 10**6))
def test_sorted_input_is_a_fixed_point(N, seed):
    x = np.sort(np.random.default_rng(seed).uniform(-2, 2, N))
    np.testing.assert_array_equal(run(build_odd_even_sort(N), x)[:, 0], x)


def test_trace_lists_deliveries_and_memories():
    P = build_tree_reduce(4, "min", cumulative=True)
    mem, log = run(P, [2.0, 1.0, 3.0, 0.0], trace=True)
    assert [e["round"] for e in log] == [1, 2]
    np.testing.assert_array_equal(log[-1]["memory"], mem)
    d = log[0]["deliveries"]
    assert {"source": 1, "dest": 2, "position": 2, "value": 2.0} in d
    assert len(d) == sum(len(K) for i in range(1, 5) for _, K in P.rcv(1, i))
    assert json.loads(pcoc.trace_json(log)) == log


@pytest.mark.parametrize("name", sorted(BUILDERS))
def test_description_round_trip(name):
    P = BUILDERS[name](6)
    Q = from_description(json.loads(json.dumps(P.describe())))
    assert Q.describe() == P.describe()
    x = np.random.default_rng(0).uniform(-2, 2, 6)
    np.testing.assert_array_equal(run(P, x), run(Q, x))
