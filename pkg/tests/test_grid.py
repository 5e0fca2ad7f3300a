"""Case parsing, per-unit derivation, and contingency-view tests."""

import math

import pytest

from chanceopf import grid
from chanceopf.grid import Contingency, GridError

MINI_CASE = """
function mpc = mini
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0   0  0 0 1 1 0 0 1 1.1 0.9;
    2 1 50 10  0 0 1 1 0 0 1 1.1 0.9;
];
mpc.gen = [
    1 0 0 30 -30 1 100 1 100 0;
];
mpc.branch = [
    1 2 0 0.1 0 0 0 0 0 0 1 -360 360;
];
mpc.gencost = [
    2 0 0 2 10 0;
];
"""


def builtin(name):
    from importlib import resources

    return resources.files("chanceopf").joinpath(f"data/{name}.m").read_text()


def test_parse_mini_case():
    net = grid.parse_case(MINI_CASE, name="mini")
    assert net.n_bus == 2
    assert len(net.loads) == 1
    assert net.loads[0].p == 0.5 and net.loads[0].q == 0.1
    br = net.branches[0]
    assert br.g == 0.0
    assert abs(br.b + 10.0) < 1e-12
    # linear cost converted to per-unit power
    assert net.generators[0].c1 == 10 * 100
    assert net.generators[0].c2 == 0.0


def test_parse_case5_counts():
    net = grid.parse_case(builtin("case5"), name="case5")
    assert net.n_bus == 5
    assert len(net.branches) == 6
    assert len(net.generators) == 5
    assert net.buses[net.ref_index].id == 4


@pytest.mark.parametrize("name,nbus,nbr,ngen", [
    ("case14", 14, 20, 5),
    ("case30", 30, 41, 6),
    ("case57", 57, 80, 7),
])
def test_parse_shipped_cases(name, nbus, nbr, ngen):
    net = grid.parse_case(builtin(name), name=name)
    assert net.n_bus == nbus
    assert len(net.branches) == nbr
    assert len(net.generators) == ngen


@pytest.mark.parametrize("name", ["case5", "case14", "case30", "case57"])
def test_series_admittance_inverts_impedance(name):
    net = grid.parse_case(builtin(name), name=name)
    for br in net.branches:
        y = 1.0 / complex(br.r, br.x)
        assert abs(br.g - y.real) <= 1e-12
        assert abs(br.b - y.imag) <= 1e-12


@pytest.mark.parametrize("name", ["case5", "case14", "case30", "case57"])
def test_serialize_round_trip(name):
    net = grid.parse_case(builtin(name), name=name)
    again = grid.parse_case(grid.serialize_case(net), name=name)
    assert again == net


def test_tap_components():
    net = grid.parse_case(builtin("case14"), name="case14")
    tapped = [br for br in net.branches if br.tap != 1.0]
    assert len(tapped) == 3
    for br in net.branches:
        assert abs(br.t_re**2 + br.t_im**2 - br.tap**2) <= 1e-12


def test_current_rating_conversion():
    net = grid.parse_case(builtin("case5"), name="case5")
    br = net.branches[0]          # 400 MVA, vmin 0.9
    want = (4.0 / 0.9) ** 2
    assert abs(br.imax2(0.9, net.base_mva) - want) <= 1e-12
    unrated = net.branches[1]
    assert unrated.imax2(0.9, net.base_mva) is None


def test_two_reference_buses_rejected():
    bad = MINI_CASE.replace("2 1 50", "2 3 50")
    with pytest.raises(GridError, match="reference"):
        grid.parse_case(bad)


def test_missing_block_rejected():
    bad = MINI_CASE.replace("mpc.gencost", "mpc.costs")
    with pytest.raises(GridError, match="gencost"):
        grid.parse_case(bad)


def test_zero_impedance_rejected():
    bad = MINI_CASE.replace("1 2 0 0.1", "1 2 0 0")
    with pytest.raises(GridError, match="impedance"):
        grid.parse_case(bad)


def test_syntax_error_reports_line():
    bad = MINI_CASE.replace("1 2 0 0.1 0", "1 2 oops 0.1 0")
    with pytest.raises(GridError, match=r"line \d+"):
        grid.parse_case(bad)


# ---------------------------------------------------------------------------
# participation and uncertainty

def test_participation_normalized():
    net = grid.parse_case(builtin("case5"), name="case5")
    resp = [g for g in net.generators if g.responding]
    assert abs(sum(g.alpha for g in resp) - 1.0) <= 1e-12
    assert all(g.alpha == 0 for g in net.generators if not g.responding)


def test_with_uncertainty_per_load_and_shared():
    net = grid.parse_case(builtin("case5"), name="case5")
    per = grid.with_uncertainty(net, grid.GAUSSIAN, 0.1, "per-load")
    assert per.germ_count == 3
    assert sorted(d.germ_dim for d in per.loads) == [0, 1, 2]
    shared = grid.with_uncertainty(net, grid.UNIFORM, 0.1, "shared")
    assert shared.germ_count == 1
    assert all(d.germ_dim == 0 for d in shared.loads)
    assert all(d.sigma == 0.1 for d in shared.loads)
    # base net untouched
    assert all(d.germ_dim is None for d in net.loads)


def test_with_uncertainty_validation():
    net = grid.parse_case(builtin("case5"), name="case5")
    with pytest.raises(GridError):
        grid.with_uncertainty(net, "lognormal", 0.1)
    with pytest.raises(GridError):
        grid.with_uncertainty(net, grid.GAUSSIAN, -0.1)
    with pytest.raises(GridError):
        grid.with_uncertainty(net, grid.GAUSSIAN, 0.1, "per-bus")


# ---------------------------------------------------------------------------
# contingencies

def test_labels_round_trip():
    c = Contingency.from_label("b30")
    assert c.kind == "branch" and c.element_id == 30 and c.label == "b30"
    assert Contingency.from_label("g3").kind == "gen"
    with pytest.raises(GridError):
        Contingency.from_label("x9")


def test_gen_outage_view():
    net = grid.parse_case(builtin("case5"), name="case5")
    view = grid.apply_contingency(net, Contingency("gen", 4))
    assert len(view.generators) == 4
    assert all(g.id != 4 for g in view.generators)
    resp = [g for g in view.generators if g.responding]
    assert abs(sum(g.alpha for g in resp) - 1.0) <= 1e-12
    # base untouched; a second view agrees on shared elements
    assert len(net.generators) == 5
    other = grid.apply_contingency(net, Contingency("gen", 1))
    assert view.branches == other.branches == net.branches


def test_branch_outage_view():
    net = grid.parse_case(builtin("case5"), name="case5")
    view = grid.apply_contingency(net, Contingency("branch", 6))
    assert len(view.branches) == 5
    assert all(br.id != 6 for br in view.branches)
    assert view.generators == net.generators


def test_islanding_outage_rejected():
    net = grid.parse_case(builtin("case30"), name="case30")
    # branch 34 is the only path to bus 26
    with pytest.raises(GridError, match="islands"):
        grid.apply_contingency(net, Contingency("branch", 34))


def test_default_contingencies_case5():
    net = grid.parse_case(builtin("case5"), name="case5")
    cons = grid.default_contingencies(net)
    labels = [c.label for c in cons]
    # ref-bus unit g4 excluded; all 6 branches keep the ring connected
    assert labels == ["g1", "g2", "g3", "g5", "b1", "b2", "b3", "b4", "b5", "b6"]


def test_default_contingencies_case30_excludes_islanding():
    net = grid.parse_case(builtin("case30"), name="case30")
    cons = grid.default_contingencies(net)
    gens = [c for c in cons if c.kind == "gen"]
    brs = [c for c in cons if c.kind == "branch"]
    assert len(gens) == 5             # 6 units minus the reference unit
    assert len(brs) == 38             # 41 branches minus 3 radial spurs
    excluded = {"b13", "b16", "b34"}
    assert excluded.isdisjoint({c.label for c in brs})


def test_contingencies_from_labels_validates():
    net = grid.parse_case(builtin("case30"), name="case30")
    cons = grid.contingencies_from_labels(net, ["g3", "b30"])
    assert [c.label for c in cons] == ["g3", "b30"]
    with pytest.raises(GridError):
        grid.contingencies_from_labels(net, ["b34"])      # islanding
    with pytest.raises(GridError):
        grid.contingencies_from_labels(net, ["g99"])


def test_imax2_positive_when_rated():
    for name in ("case5", "case14", "case30"):
        net = grid.parse_case(builtin(name), name=name)
        for br in net.branches:
            vmin = net.buses[net.bus_index(br.from_bus)].vmin
            j = br.imax2(vmin, net.base_mva)
            assert j is None or j > 0
