"""Newton power-flow oracle tests, including hand-computed fixtures."""

import math

import numpy as np
import pytest

from chanceopf import acpf, grid

TWO_BUS = """
function mpc = twobus
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0  0  0 0 1 1 0 0 1 1.1 0.9;
    2 1 {pd} {qd} 0 0 1 1 0 0 1 1.1 0.9;
];
mpc.gen = [
    1 0 0 {qmax} {qmin} 1 100 1 300 0;
];
mpc.branch = [
    1 2 0 0.1 0 0 0 0 0 0 1 -360 360;
];
mpc.gencost = [
    2 0 0 2 10 0;
];
"""


TWO_BUS_TWO_GEN = """
function mpc = twobus2g
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0  0  0 0 1 1 0 0 1 1.1 0.9;
    2 2 {pd} {qd} 0 0 1 1 0 0 1 1.1 0.9;
];
mpc.gen = [
    1 0 0 30000 -30000 1 100 1 300 0;
    2 0 0 {qmax2} {qmin2} 1 100 1 100 0;
];
mpc.branch = [
    1 2 0 0.1 0 0 0 0 0 0 1 -360 360;
];
mpc.gencost = [
    2 0 0 2 10 0;
    2 0 0 2 10 0;
];
"""


def two_bus(pd=0.0, qd=0.0, qmax=300.0, qmin=-300.0):
    text = TWO_BUS.format(pd=pd * 100, qd=qd * 100, qmax=qmax * 100, qmin=qmin * 100)
    return grid.parse_case(text, name="twobus")


def two_bus_two_gen(pd, qd, qmax2, qmin2=-100.0):
    text = TWO_BUS_TWO_GEN.format(pd=pd * 100, qd=qd * 100, qmax2=qmax2 * 100, qmin2=qmin2 * 100)
    return grid.parse_case(text, name="twobus2g")


def builtin(name):
    from importlib import resources

    return grid.parse_case(
        resources.files("chanceopf").joinpath(f"data/{name}.m").read_text(), name=name
    )


def flat_inputs(net, pg_bus=None, vset=1.0):
    n = net.n_bus
    p_load = np.zeros(n)
    q_load = np.zeros(n)
    for d in net.loads:
        p_load[net.bus_index(d.bus)] += d.p
        q_load[net.bus_index(d.bus)] += d.q
    if pg_bus is None:
        pg_bus = np.zeros(n)
    return acpf.inputs_from_dispatch(net, pg_bus, np.full(n, vset), p_load, q_load)


def test_no_load_flat_solution():
    net = two_bus()
    res = acpf.newton_acpf(net, flat_inputs(net))
    assert res.converged
    np.testing.assert_allclose(res.e, [1.0, 1.0], atol=1e-10)
    np.testing.assert_allclose(res.f, [0.0, 0.0], atol=1e-10)
    flows = acpf.branch_flows(net, res.e, res.f)
    for arr in flows.values():
        np.testing.assert_allclose(arr, 0.0, atol=1e-9)


def test_two_bus_hand_solution():
    # y = -10j, slack V1 = 1: P2 = 10 f2, Q2 = -10 e2 + 10 (e2^2 + f2^2)
    # with S2 = -(0.5 + 0.2j): f2 = -0.05, e2 = (1 + sqrt(0.91)) / 2
    net = two_bus(pd=0.5, qd=0.2)
    res = acpf.newton_acpf(net, flat_inputs(net))
    assert res.converged and res.mismatch <= 1e-8
    assert abs(res.f[1] + 0.05) <= 1e-9
    assert abs(res.e[1] - (1 + math.sqrt(0.91)) / 2) <= 1e-9
    # slack picks up the load plus series loss (g = 0, so no loss here)
    assert abs(res.pg_slack - 0.5) <= 1e-8


def test_pv_bus_holds_voltage_within_limits():
    net = two_bus_two_gen(pd=0.5, qd=0.2, qmax2=1.0)
    res = acpf.newton_acpf(net, flat_inputs(net))
    assert res.converged
    assert abs(res.vm[1] - 1.0) <= 1e-9
    assert () == res.switched_to_pq


def test_pv_to_pq_switch_on_q_limit():
    # the bus-2 unit can only push 0.05 pu reactive: it must hit the limit
    net = two_bus_two_gen(pd=0.5, qd=0.2, qmax2=0.05)
    res = acpf.newton_acpf(net, flat_inputs(net))
    assert res.converged
    assert res.switched_to_pq == (1,)
    assert res.vm[1] < 1.0 - 1e-4          # PQ behavior: voltage sags
    assert abs(res.qg[1] - 0.05) <= 1e-7   # pinned at the limit
    # with switching disabled the bus would hold voltage instead
    res_hold = acpf.newton_acpf(net, flat_inputs(net), switching=False)
    assert res_hold.converged
    assert abs(res_hold.vm[1] - 1.0) <= 1e-9
    assert res_hold.qg[1] > 0.05


def test_injections_equal_flow_sums():
    # Ybus injections must equal branch-flow sums plus shunt terms, including taps
    net = builtin("case14")
    rng = np.random.default_rng(2)
    e = 1.0 + 0.05 * rng.standard_normal(net.n_bus)
    f = 0.05 * rng.standard_normal(net.n_bus)
    p, q = acpf.bus_injections(acpf.build_ybus(net), e, f)
    flows = acpf.branch_flows(net, e, f)
    w = e * e + f * f
    p_sum = np.zeros(net.n_bus)
    q_sum = np.zeros(net.n_bus)
    for idx, br in enumerate(net.branches):
        i, j = net.bus_index(br.from_bus), net.bus_index(br.to_bus)
        p_sum[i] += flows["p_f"][idx]
        q_sum[i] += flows["q_f"][idx]
        p_sum[j] += flows["p_t"][idx]
        q_sum[j] += flows["q_t"][idx]
    for idx, bus in enumerate(net.buses):
        p_sum[idx] += bus.gs * w[idx]
        q_sum[idx] -= bus.bs * w[idx]
    np.testing.assert_allclose(p, p_sum, atol=1e-12)
    np.testing.assert_allclose(q, q_sum, atol=1e-12)


def test_case5_mean_load_converges():
    net = builtin("case5")
    pg = np.zeros(net.n_bus)
    pg[net.bus_index(1)] = 2.1
    pg[net.bus_index(3)] = 3.2
    pg[net.bus_index(5)] = 4.6
    res = acpf.newton_acpf(net, flat_inputs(net, pg))
    assert res.converged and res.mismatch <= 1e-8
    assert 0.0 < res.pg_slack < 1.0        # covers the 0.1 pu gap plus losses
    assert np.all(res.vm > 0.85)


@pytest.mark.parametrize("name,gen_p", [
    ("case14", {1: 0.0, 2: 0.4, 3: 0.0, 6: 0.0, 8: 0.0}),
    ("case30", {1: 0.0, 2: 0.6, 22: 0.22, 27: 0.27, 23: 0.19, 13: 0.37}),
    ("case57", {1: 0.0, 2: 0.0, 3: 0.4, 6: 0.0, 8: 4.5, 9: 0.0, 12: 3.1}),
])
def test_shipped_cases_solve_from_flat(name, gen_p):
    net = builtin(name)
    pg = np.zeros(net.n_bus)
    for bus_id, val in gen_p.items():
        pg[net.bus_index(bus_id)] = val
    res = acpf.newton_acpf(net, flat_inputs(net, pg))
    assert res.converged and res.mismatch <= 1e-8
    assert np.all(res.vm > 0.8) and np.all(res.vm < 1.2)


def test_contingency_view_power_flow():
    net = builtin("case5")
    view = grid.apply_contingency(net, grid.Contingency("branch", 4))
    pg = np.zeros(net.n_bus)
    pg[net.bus_index(1)] = 2.1
    pg[net.bus_index(3)] = 3.2
    pg[net.bus_index(5)] = 4.6
    res = acpf.newton_acpf(view, flat_inputs(net, pg))
    assert res.converged
    # flows recomputed on 5 branches only
    flows = acpf.branch_flows(view, res.e, res.f)
    assert len(flows["p_f"]) == 5
