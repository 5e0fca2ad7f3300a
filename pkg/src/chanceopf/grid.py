"""Network data model, case-file parsing, and contingency views.

Case files use the MATPOWER-style matrix text format (bus/gen/branch/gencost
blocks).  All electrical quantities are converted to per-unit on the system
MVA base at parse time; cost coefficients are converted to per-unit power so
the objective keeps the file's currency units per hour.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace

GAUSSIAN = "gaussian"
UNIFORM = "uniform"


class GridError(ValueError):
    """Malformed case file or inconsistent network data."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class Bus:
    id: int                  # external bus number from the case file
    is_ref: bool
    gs: float                # shunt conductance, per-unit
    bs: float                # shunt susceptance, per-unit
    vmin: float
    vmax: float

    def __post_init__(self):
        if not 0.0 < self.vmin <= self.vmax:
            raise GridError(f"bus {self.id}: voltage bounds must satisfy 0 < vmin <= vmax")


@dataclass(frozen=True)
class Branch:
    id: int                  # 1-based row number in the case file
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charge: float          # total line charging susceptance
    rate_a: float            # MVA rating, 0 = unrated
    tap: float               # off-nominal tap magnitude t_m (1.0 if none)
    shift_deg: float
    g: float                 # series conductance
    b: float                 # series susceptance
    g_fr: float = 0.0
    g_to: float = 0.0
    b_fr: float = 0.0        # half of charging at each end
    b_to: float = 0.0

    @property
    def t_re(self) -> float:
        return self.tap * math.cos(math.radians(self.shift_deg))

    @property
    def t_im(self) -> float:
        return self.tap * math.sin(math.radians(self.shift_deg))

    @property
    def label(self) -> str:
        return f"b{self.id}"

    def imax2(self, vmin_from: float, base_mva: float) -> float | None:
        """Squared current rating: MVA rating divided by the lowest voltage."""
        if self.rate_a <= 0:
            return None
        imax = self.rate_a / base_mva / vmin_from
        return imax * imax


@dataclass(frozen=True)
class Generator:
    id: int                  # 1-based row number in the case file
    bus: int
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    c2: float                # cost in currency / (pu-power)^2 / h
    c1: float
    c0: float
    alpha: float = 0.0       # participation factor over responding units
    responding: bool = False

    def __post_init__(self):
        if self.pmin > self.pmax or self.qmin > self.qmax:
            raise GridError(f"generator {self.id}: bounds out of order")

    @property
    def label(self) -> str:
        return f"g{self.id}"


@dataclass(frozen=True)
class Load:
    id: int
    bus: int
    p: float                 # nominal active demand, per-unit
    q: float
    family: str = GAUSSIAN
    sigma: float = 0.0       # std dev as fraction of nominal
    germ_dim: int | None = None

    def __post_init__(self):
        if self.sigma < 0:
            raise GridError(f"load {self.id}: sigma must be >= 0")


@dataclass(frozen=True)
class Contingency:
    kind: str                # "gen" | "branch"
    element_id: int          # 1-based row number of the outaged element

    def __post_init__(self):
        if self.kind not in ("gen", "branch"):
            raise GridError(f"unknown contingency kind {self.kind!r}")

    @property
    def label(self) -> str:
        return ("g" if self.kind == "gen" else "b") + str(self.element_id)

    @classmethod
    def from_label(cls, label: str) -> "Contingency":
        m = re.fullmatch(r"([gb])(\d+)", label.strip())
        if not m:
            raise GridError(f"contingency label {label!r} is not gN or bN")
        return cls(kind="gen" if m.group(1) == "g" else "branch", element_id=int(m.group(2)))


@dataclass(frozen=True)
class Network:
    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]

    def __post_init__(self):
        refs = [b.id for b in self.buses if b.is_ref]
        if len(refs) != 1:
            raise GridError(f"exactly one reference bus required, found {refs}")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise GridError("duplicate bus ids")
        known = set(ids)
        for br in self.branches:
            if br.from_bus not in known or br.to_bus not in known:
                raise GridError(f"branch {br.id} references unknown bus")
        for g in self.generators:
            if g.bus not in known:
                raise GridError(f"generator {g.id} references unknown bus")
        for d in self.loads:
            if d.bus not in known:
                raise GridError(f"load {d.id} references unknown bus")

    # -- lookups ----------------------------------------------------------

    def bus_index(self, bus_id: int) -> int:
        for i, b in enumerate(self.buses):
            if b.id == bus_id:
                return i
        raise GridError(f"unknown bus id {bus_id}")

    @property
    def ref_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.is_ref)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def branch_by_id(self, element_id: int) -> Branch:
        for br in self.branches:
            if br.id == element_id:
                return br
        raise GridError(f"unknown branch id {element_id}")

    def gen_by_id(self, element_id: int) -> Generator:
        for g in self.generators:
            if g.id == element_id:
                return g
        raise GridError(f"unknown generator id {element_id}")

    @property
    def germ_count(self) -> int:
        dims = {d.germ_dim for d in self.loads if d.germ_dim is not None}
        return len(dims)


@dataclass(frozen=True)
class NetworkView:
    """Base network with one element outaged; never mutates the base."""

    base: Network
    outage: Contingency | None = None

    @property
    def branches(self) -> tuple[Branch, ...]:
        if self.outage is not None and self.outage.kind == "branch":
            return tuple(br for br in self.base.branches if br.id != self.outage.element_id)
        return self.base.branches

    @property
    def generators(self) -> tuple[Generator, ...]:
        if self.outage is not None and self.outage.kind == "gen":
            out = self.outage.element_id
            gens = []
            survivors = [g for g in self.base.generators if g.id != out and g.responding]
            total = sum(g.pmax for g in survivors)
            for g in self.base.generators:
                if g.id == out:
                    continue
                if g.responding and total > 0:
                    g = replace(g, alpha=g.pmax / total)
                gens.append(g)
            return tuple(gens)
        return self.base.generators

    @property
    def buses(self) -> tuple[Bus, ...]:
        return self.base.buses

    @property
    def loads(self) -> tuple[Load, ...]:
        return self.base.loads

    @property
    def base_mva(self) -> float:
        return self.base.base_mva

    def bus_index(self, bus_id: int) -> int:
        return self.base.bus_index(bus_id)

    @property
    def ref_index(self) -> int:
        return self.base.ref_index

    @property
    def n_bus(self) -> int:
        return self.base.n_bus


# ---------------------------------------------------------------------------
# parsing

_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\];", re.DOTALL)
_SCALAR_RE = re.compile(r"mpc\.(\w+)\s*=\s*([0-9eE+.\-]+)\s*;")


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_matrix(body: str, first_line: int, name: str) -> list[list[float]]:
    rows = []
    for off, raw in enumerate(body.split("\n")):
        line = raw.strip().rstrip(";").strip()
        if not line:
            continue
        try:
            rows.append([float(tok) for tok in line.replace(",", " ").split()])
        except ValueError as exc:
            raise GridError(f"block {name}: {exc}", line=first_line + off) from None
    return rows


def parse_case(text: str, name: str = "case") -> Network:
    """Parse a MATPOWER-style case file into a per-unit Network."""
    clean = _strip_comments(text)

    matrices: dict[str, tuple[list[list[float]], int]] = {}
    base_mva = None
    for match in _SCALAR_RE.finditer(clean):
        if match.group(1) == "baseMVA":
            base_mva = float(match.group(2))
    for match in _MATRIX_RE.finditer(clean):
        first_line = clean[: match.start(2)].count("\n") + 1
        matrices[match.group(1)] = (_parse_matrix(match.group(2), first_line, match.group(1)), first_line)

    if base_mva is None:
        raise GridError("missing mpc.baseMVA")
    if base_mva <= 0:
        raise GridError("baseMVA must be positive")
    for block in ("bus", "gen", "branch", "gencost"):
        if block not in matrices:
            raise GridError(f"missing required block mpc.{block}")

    bus_rows, bus_line = matrices["bus"]
    buses, loads = [], []
    n_ref = 0
    for off, row in enumerate(bus_rows):
        if len(row) < 13:
            raise GridError("bus row needs 13 columns", line=bus_line + off)
        bus_id, btype = int(row[0]), int(row[1])
        if btype == 3:
            n_ref += 1
        buses.append(Bus(
            id=bus_id, is_ref=(btype == 3),
            gs=row[4] / base_mva, bs=row[5] / base_mva,
            vmax=row[11], vmin=row[12],
        ))
        pd, qd = row[2] / base_mva, row[3] / base_mva
        if pd != 0.0 or qd != 0.0:
            loads.append(Load(id=len(loads) + 1, bus=bus_id, p=pd, q=qd))
    if n_ref != 1:
        raise GridError(f"exactly one reference bus required, found {n_ref}")

    gen_rows, gen_line = matrices["gen"]
    cost_rows, cost_line = matrices["gencost"]
    if len(cost_rows) != len(gen_rows):
        raise GridError("gencost row count differs from gen row count", line=cost_line)
    generators = []
    for off, (row, cost) in enumerate(zip(gen_rows, cost_rows)):
        if len(row) < 10:
            raise GridError("gen row needs 10 columns", line=gen_line + off)
        status = int(row[7])
        if status == 0:
            continue
        if int(cost[0]) != 2:
            raise GridError("only polynomial gencost (model 2) is supported", line=cost_line + off)
        ncost = int(cost[3])
        coeffs = cost[4:4 + ncost]
        if ncost == 3:
            c2, c1, c0 = coeffs
        elif ncost == 2:
            c2, (c1, c0) = 0.0, coeffs
        elif ncost == 1:
            c2, c1, c0 = 0.0, 0.0, coeffs[0]
        else:
            raise GridError("gencost degree above quadratic is not supported", line=cost_line + off)
        generators.append(Generator(
            id=off + 1, bus=int(row[0]),
            pmin=row[9] / base_mva, pmax=row[8] / base_mva,
            qmin=row[4] / base_mva, qmax=row[3] / base_mva,
            c2=c2 * base_mva * base_mva, c1=c1 * base_mva, c0=c0,
        ))

    br_rows, br_line = matrices["branch"]
    branches = []
    for off, row in enumerate(br_rows):
        if len(row) < 11:
            raise GridError("branch row needs 11 columns", line=br_line + off)
        if int(row[10]) == 0:
            continue
        r, x = row[2], row[3]
        denom = r * r + x * x
        if denom == 0.0:
            raise GridError("zero-impedance branch", line=br_line + off)
        tap = row[8] if row[8] != 0.0 else 1.0
        if tap <= 0:
            raise GridError("tap magnitude must be positive", line=br_line + off)
        branches.append(Branch(
            id=off + 1, from_bus=int(row[0]), to_bus=int(row[1]),
            r=r, x=x, b_charge=row[4], rate_a=row[5],
            tap=tap, shift_deg=row[9],
            g=r / denom, b=-x / denom,
            b_fr=row[4] / 2.0, b_to=row[4] / 2.0,
        ))

    net = Network(
        name=name, base_mva=base_mva,
        buses=tuple(buses), branches=tuple(branches),
        generators=tuple(generators), loads=tuple(loads),
    )
    return with_participation(net)


def with_participation(net: Network) -> Network:
    """Responding set = units with positive capacity; alpha proportional to it."""
    total = sum(g.pmax for g in net.generators if g.pmax > 0)
    gens = tuple(
        replace(g, responding=g.pmax > 0, alpha=(g.pmax / total if g.pmax > 0 and total > 0 else 0.0))
        for g in net.generators
    )
    return replace(net, generators=gens)


def with_uncertainty(net: Network, family: str, sigma: float, germ_mode: str = "per-load") -> Network:
    """Attach an uncertainty spec to every load.

    germ_mode "per-load" gives each load its own germ dimension; "shared"
    drives every load from one germ (fully correlated fleet).  P and Q of one
    load always share a dimension.
    """
    if family not in (GAUSSIAN, UNIFORM):
        raise GridError(f"unsupported family {family!r}")
    if sigma < 0:
        raise GridError("sigma must be >= 0")
    if germ_mode not in ("per-load", "shared"):
        raise GridError(f"unknown germ mode {germ_mode!r}")
    loads = tuple(
        replace(d, family=family, sigma=sigma,
                germ_dim=(i if germ_mode == "per-load" else 0))
        for i, d in enumerate(net.loads)
    )
    return replace(net, loads=loads)


# ---------------------------------------------------------------------------
# serialization

def _fmt(v: float) -> str:
    return format(v, ".17g")


def serialize_case(net: Network) -> str:
    """Emit the network back in case-file form; parsing it reproduces net."""
    base = net.base_mva
    load_by_bus: dict[int, Load] = {d.bus: d for d in net.loads}
    out = [f"function mpc = {net.name}", "mpc.version = '2';", f"mpc.baseMVA = {_fmt(base)};"]

    out.append("mpc.bus = [")
    for b in net.buses:
        d = load_by_bus.get(b.id)
        pd = d.p * base if d else 0.0
        qd = d.q * base if d else 0.0
        btype = 3 if b.is_ref else 1
        out.append("\t" + "\t".join([
            str(b.id), str(btype), _fmt(pd), _fmt(qd), _fmt(b.gs * base), _fmt(b.bs * base),
            "1", "1", "0", "0", "1", _fmt(b.vmax), _fmt(b.vmin),
        ]) + ";")
    out.append("];")

    out.append("mpc.gen = [")
    for g in net.generators:
        out.append("\t" + "\t".join([
            str(g.bus), "0", "0", _fmt(g.qmax * base), _fmt(g.qmin * base),
            "1", _fmt(base), "1", _fmt(g.pmax * base), _fmt(g.pmin * base),
        ]) + ";")
    out.append("];")

    out.append("mpc.branch = [")
    for br in net.branches:
        tap = 0.0 if (br.tap == 1.0 and br.shift_deg == 0.0) else br.tap
        out.append("\t" + "\t".join([
            str(br.from_bus), str(br.to_bus), _fmt(br.r), _fmt(br.x), _fmt(br.b_charge),
            _fmt(br.rate_a), "0", "0", _fmt(tap), _fmt(br.shift_deg), "1", "-360", "360",
        ]) + ";")
    out.append("];")

    out.append("mpc.gencost = [")
    for g in net.generators:
        out.append("\t" + "\t".join([
            "2", "0", "0", "3",
            _fmt(g.c2 / (base * base)), _fmt(g.c1 / base), _fmt(g.c0),
        ]) + ";")
    out.append("];")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# topology and contingencies

def _connected(net: Network | NetworkView, skip_branch_id: int | None = None) -> bool:
    n = net.n_bus
    adj: list[list[int]] = [[] for _ in range(n)]
    for br in net.branches:
        if br.id == skip_branch_id:
            continue
        i, j = net.bus_index(br.from_bus), net.bus_index(br.to_bus)
        adj[i].append(j)
        adj[j].append(i)
    seen = [False] * n
    stack = [net.ref_index]
    seen[net.ref_index] = True
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    return all(seen)


def apply_contingency(net: Network, contingency: Contingency) -> NetworkView:
    """Read-only view with one element removed; refuses islanding outages."""
    if contingency.kind == "gen":
        net.gen_by_id(contingency.element_id)
    else:
        net.branch_by_id(contingency.element_id)
        if not _connected(net, skip_branch_id=contingency.element_id):
            raise GridError(f"outage {contingency.label} islands part of the network")
    return NetworkView(base=net, outage=contingency)


def default_contingencies(net: Network) -> tuple[Contingency, ...]:
    """Every generator except the largest reference-bus unit, then every
    branch whose outage keeps the network connected."""
    ref_bus = net.buses[net.ref_index].id
    ref_units = [g for g in net.generators if g.bus == ref_bus]
    skip_gen = max(ref_units, key=lambda g: g.pmax).id if ref_units else None
    out = [Contingency("gen", g.id) for g in net.generators if g.id != skip_gen]
    for br in net.branches:
        if _connected(net, skip_branch_id=br.id):
            out.append(Contingency("branch", br.id))
    return tuple(out)


def contingencies_from_labels(net: Network, labels) -> tuple[Contingency, ...]:
    out = []
    for label in labels:
        c = Contingency.from_label(label)
        apply_contingency(net, c)  # validates existence and connectivity
        out.append(c)
    return tuple(out)
