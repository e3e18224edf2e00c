"""MATPOWER case files, a JSON mirror, and the catalog of congestion edits."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Union

from .grid_model import Branch, Bus, BusKind, CostCurve, Generator, Network, NetworkError


class CaseFormatError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


_MATRICES = ("bus", "gen", "branch", "gencost")
_MIN_COLUMNS = {"bus": 13, "gen": 10, "branch": 11, "gencost": 4}
_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")


def _strip_comment(line: str) -> str:
    # no string literals carry '%' in the supported subset
    return line.split("%", 1)[0]


def _read_matrix(lines, start, first_rest, name):
    """Collect rows from ``[`` to ``];``; returns (rows, next line index)."""
    rows = []
    body = first_rest.split("[", 1)[1]
    i = start
    while True:
        text = _strip_comment(body)
        closed = "]" in text
        if closed:
            text = text.split("]", 1)[0]
        for chunk in text.split(";"):
            tokens = chunk.replace(",", " ").split()
            if tokens:
                try:
                    rows.append((i + 1, [float(tok) for tok in tokens]))
                except ValueError as exc:
                    raise CaseFormatError(f"mpc.{name}: non-numeric entry ({exc})", i + 1) from None
        if closed:
            return rows, i + 1
        i += 1
        if i >= len(lines):
            raise CaseFormatError(f"mpc.{name}: unterminated matrix", start + 1)
        body = lines[i]


def parse_matpower_case(text: str, name: str = "network") -> Network:
    lines = text.splitlines()
    base_mva = None
    mats: dict = {}
    i = 0
    while i < len(lines):
        m = _ASSIGN.match(_strip_comment(lines[i]))
        if not m:
            i += 1
            continue
        field, rest = m.group(1), m.group(2)
        if field == "baseMVA":
            try:
                base_mva = float(rest.strip().rstrip(";").strip())
            except ValueError:
                raise CaseFormatError("baseMVA is not a number", i + 1) from None
            i += 1
        elif field in _MATRICES:
            if "[" not in rest:
                raise CaseFormatError(f"mpc.{field} must be a literal matrix", i + 1)
            mats[field], i = _read_matrix(lines, i, lines[i], field)
        else:
            i += 1
    if base_mva is None:
        raise CaseFormatError("missing mpc.baseMVA")
    for fld in ("bus", "gen", "branch"):
        if fld not in mats:
            raise CaseFormatError(f"missing mpc.{fld}")
    for fld, rows in mats.items():
        for ln, row in rows:
            if len(row) < _MIN_COLUMNS[fld]:
                raise CaseFormatError(f"mpc.{fld} row has {len(row)} columns, need {_MIN_COLUMNS[fld]}", ln)

    buses = []
    for ln, r in mats["bus"]:
        try:
            kind = BusKind(int(r[1]))
        except ValueError:
            raise CaseFormatError(f"invalid bus type {r[1]:g}", ln) from None
        buses.append(
            Bus(
                id=int(r[0]), kind=kind, p_load=r[2], q_load=r[3], gs=r[4], bs=r[5],
                area=int(r[6]), vm=r[7], va=r[8], base_kv=r[9], zone=int(r[10]),
                v_max=r[11], v_min=r[12],
            )
        )
    known = {b.id for b in buses}

    def check_bus(bus_id, ln):
        if bus_id not in known:
            raise CaseFormatError(f"unknown bus reference {bus_id}", ln)
        return bus_id

    gens = []
    for ln, r in mats["gen"]:
        gens.append(
            Generator(
                bus=check_bus(int(r[0]), ln), p=r[1], q=r[2], q_max=r[3], q_min=r[4],
                v_set=r[5], m_base=r[6], in_service=r[7] > 0, p_max=r[8], p_min=r[9],
            )
        )
    branches = []
    for ln, r in mats["branch"]:
        branches.append(
            Branch(
                from_bus=check_bus(int(r[0]), ln), to_bus=check_bus(int(r[1]), ln),
                r=r[2], x=r[3], b=r[4], rate_a=r[5], rate_b=r[6], rate_c=r[7],
                tap=r[8], shift=r[9], in_service=r[10] > 0,
                ang_min=r[11] if len(r) > 11 else -360.0,
                ang_max=r[12] if len(r) > 12 else 360.0,
            )
        )
    costs = []
    for ln, r in mats.get("gencost", []):
        if int(r[0]) != 2:
            raise CaseFormatError("only polynomial cost curves (model 2) are supported", ln)
        n = int(r[3])
        coeffs = r[4:4 + n]
        if len(coeffs) != n:
            raise CaseFormatError(f"gencost row declares {n} coefficients, found {len(coeffs)}", ln)
        if n > 3 and any(c != 0 for c in coeffs[: n - 3]):
            raise CaseFormatError("polynomial costs above degree 2 are not supported", ln)
        padded = [0.0] * max(0, 3 - n) + list(coeffs[-3:])
        costs.append(CostCurve(a=padded[0], b=padded[1], c=padded[2], startup=r[1], shutdown=r[2]))
    if not costs:
        costs = [CostCurve() for _ in gens]
    if len(costs) != len(gens):
        raise CaseFormatError(f"{len(costs)} cost rows for {len(gens)} generators")
    try:
        return Network(base_mva=base_mva, buses=buses, branches=branches, generators=gens, costs=costs, name=name)
    except NetworkError as exc:
        raise CaseFormatError(str(exc)) from None


def _num(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def serialize_case(net: Network) -> str:
    """MATPOWER text; floats are written with repr so parsing is exact."""
    out = [f"function mpc = {re.sub(r'[^0-9A-Za-z_]', '_', net.name)}", "mpc.version = '2';", ""]
    out.append(f"mpc.baseMVA = {_num(net.base_mva)};")
    out += ["", "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin", "mpc.bus = ["]
    for b in net.buses:
        vals = [b.id, int(b.kind), b.p_load, b.q_load, b.gs, b.bs, b.area, b.vm, b.va, b.base_kv, b.zone, b.v_max, b.v_min]
        out.append("\t" + "\t".join(_num(v) for v in vals) + ";")
    out += ["];", "", "%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin", "mpc.gen = ["]
    for g in net.generators:
        vals = [g.bus, g.p, g.q, g.q_max, g.q_min, g.v_set, g.m_base, int(g.in_service), g.p_max, g.p_min]
        out.append("\t" + "\t".join(_num(v) for v in vals) + ";")
    out += ["];", "", "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\tangmin\tangmax", "mpc.branch = ["]
    for br in net.branches:
        vals = [br.from_bus, br.to_bus, br.r, br.x, br.b, br.rate_a, br.rate_b, br.rate_c,
                br.tap, br.shift, int(br.in_service), br.ang_min, br.ang_max]
        out.append("\t" + "\t".join(_num(v) for v in vals) + ";")
    out += ["];", "", "%\t2\tstartup\tshutdown\tn\tc2\tc1\tc0", "mpc.gencost = ["]
    for c in net.costs:
        vals = [2, c.startup, c.shutdown, 3, c.a, c.b, c.c]
        out.append("\t" + "\t".join(_num(v) for v in vals) + ";")
    out += ["];", ""]
    return "\n".join(out)


def network_to_json(net: Network) -> str:
    data = {
        "name": net.name,
        "base_mva": net.base_mva,
        "buses": [dict(asdict(b), kind=int(b.kind)) for b in net.buses],
        "branches": [asdict(b) for b in net.branches],
        "generators": [asdict(g) for g in net.generators],
        "costs": [asdict(c) for c in net.costs],
    }
    return json.dumps(data, indent=1)


def network_from_json(text: str) -> Network:
    d = json.loads(text)
    return Network(
        base_mva=d["base_mva"],
        buses=[Bus(**dict(b, kind=BusKind(b["kind"]))) for b in d["buses"]],
        branches=[Branch(**b) for b in d["branches"]],
        generators=[Generator(**g) for g in d["generators"]],
        costs=[CostCurve(**c) for c in d["costs"]],
        name=d.get("name", "network"),
    )


# --- edits ---------------------------------------------------------------
# Element numbers are 1-based row positions in the case matrices.


def _branch(net, line):
    if not 1 <= line <= len(net.branches):
        raise IndexError(f"branch {line} does not exist (case has {len(net.branches)})")
    return net.branches[line - 1]


def _gen(net, gen):
    if not 1 <= gen <= len(net.generators):
        raise IndexError(f"generator {gen} does not exist (case has {len(net.generators)})")
    return net.generators[gen - 1]


def _with_branch(net, line, br):
    branches = list(net.branches)
    branches[line - 1] = br
    return replace(net, branches=branches)


def _with_gen(net, gen, g=None, cost=None):
    gens, costs = list(net.generators), list(net.costs)
    if g is not None:
        gens[gen - 1] = g
    if cost is not None:
        costs[gen - 1] = cost
    return replace(net, generators=gens, costs=costs)


@dataclass(frozen=True)
class SetBranchLimit:
    line: int
    mva: float

    def apply(self, net):
        return _with_branch(net, self.line, replace(_branch(net, self.line), rate_a=self.mva))


@dataclass(frozen=True)
class AddBranchLimit:
    """Raise the existing limit of a branch by ``mva`` (not idempotent)."""

    line: int
    mva: float

    def apply(self, net):
        br = _branch(net, self.line)
        return _with_branch(net, self.line, replace(br, rate_a=br.rate_a + self.mva))


@dataclass(frozen=True)
class ScaleBranchLimits:
    factor: float

    def apply(self, net):
        f = self.factor
        branches = [replace(b, rate_a=b.rate_a * f, rate_b=b.rate_b * f, rate_c=b.rate_c * f) for b in net.branches]
        return replace(net, branches=branches)


@dataclass(frozen=True)
class SetAllBranchLimits:
    mva: float

    def apply(self, net):
        return replace(net, branches=[replace(b, rate_a=self.mva) for b in net.branches])


@dataclass(frozen=True)
class SetGenCost:
    gen: int
    a: float
    b: float
    c: float

    def apply(self, net):
        _gen(net, self.gen)
        old = net.costs[self.gen - 1]
        return _with_gen(net, self.gen, cost=replace(old, a=self.a, b=self.b, c=self.c))


@dataclass(frozen=True)
class SetGenDispatch:
    """Fix the scheduled output Pg used by the market-clearing flow."""

    gen: int
    p_mw: float

    def apply(self, net):
        return _with_gen(net, self.gen, replace(_gen(net, self.gen), p=self.p_mw))


@dataclass(frozen=True)
class SetGenLimits:
    gen: int
    p_min: float
    p_max: float

    def apply(self, net):
        return _with_gen(net, self.gen, replace(_gen(net, self.gen), p_min=self.p_min, p_max=self.p_max))


@dataclass(frozen=True)
class MoveGen:
    gen: int
    bus: int

    def apply(self, net):
        if self.bus not in net.bus_lookup:
            raise IndexError(f"bus {self.bus} does not exist")
        return _with_gen(net, self.gen, replace(_gen(net, self.gen), bus=self.bus))


@dataclass(frozen=True)
class MoveLoad:
    """Shift the whole load of ``from_bus`` onto ``to_bus``."""

    from_bus: int
    to_bus: int

    def apply(self, net):
        pos = net.bus_lookup
        for b in (self.from_bus, self.to_bus):
            if b not in pos:
                raise IndexError(f"bus {b} does not exist")
        buses = list(net.buses)
        src, dst = buses[pos[self.from_bus]], buses[pos[self.to_bus]]
        if self.from_bus != self.to_bus:
            buses[pos[self.to_bus]] = replace(dst, p_load=dst.p_load + src.p_load, q_load=dst.q_load + src.q_load)
            buses[pos[self.from_bus]] = replace(src, p_load=0.0, q_load=0.0)
        return replace(net, buses=buses)


@dataclass(frozen=True)
class CaseModification:
    case_name: str
    edits: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "edits", tuple(self.edits))


def apply_modifications(net: Network, mod: CaseModification) -> Network:
    out = net
    for edit in mod.edits:
        out = edit.apply(out)
    return replace(out, name=mod.case_name) if mod.edits else out


# --- built-in catalog ----------------------------------------------------

CASE_FILES = {
    "case9": "case9.m",
    "case39": "case39.m",
    "case118": "pglib_opf_case118_ieee.m",
    "case300": "case300.m",
    "case793": "pglib_opf_case793_goc.m",
    "case1354": "pglib_opf_case1354_pegase.m",
    "case2383": "case2383wp.m",
}


def builtin_catalog() -> list:
    case9 = (
        [SetGenCost(1, 0, 30, 0), SetGenCost(2, 0, 25, 0), SetGenCost(3, 0, 20, 0)]
        + [SetGenLimits(k, 0.0, 315.0) for k in (1, 2, 3)]
        # market clearing puts the whole load on the generator at bus 1
        + [SetGenDispatch(2, 0.0), SetGenDispatch(3, 0.0)]
        + [SetBranchLimit(1, 70.0), SetBranchLimit(2, 40.0)]
    )
    case2383 = [
        AddBranchLimit(line, mva)
        for line, mva in zip((24, 169, 292, 321, 322, 1381), (100, 200, 200, 100, 10, 10))
    ]
    return [
        ("case9", CaseModification("case9", case9)),
        ("case39", CaseModification("case39", [SetBranchLimit(1, 100.0), SetBranchLimit(4, 90.0)])),
        ("case300", CaseModification("case300", [SetAllBranchLimits(1000.0)])),
        ("case118", CaseModification("case118")),
        ("case793", CaseModification("case793", [ScaleBranchLimits(1.4)])),
        ("case1354", CaseModification("case1354")),
        ("case2383", CaseModification("case2383", case2383)),
    ]


def lookup(case_name: str) -> CaseModification:
    for name, mod in builtin_catalog():
        if name == case_name:
            return mod
    raise KeyError(f"unknown catalog case {case_name!r}")


def read_builtin_text(case_name: str) -> str:
    if case_name not in CASE_FILES:
        raise KeyError(f"unknown catalog case {case_name!r}")
    return resources.files(__package__).joinpath("data", CASE_FILES[case_name]).read_text()


def load_builtin(case_name: str, modified: bool = True) -> Network:
    net = parse_matpower_case(read_builtin_text(case_name), name=case_name)
    return apply_modifications(net, lookup(case_name)) if modified else net


def load_case(source: Union[str, Path]) -> Network:
    """Catalog name (with edits) or path to a ``.m`` / ``.json`` file."""
    if str(source) in CASE_FILES:
        return load_builtin(str(source))
    path = Path(source)
    text = path.read_text()
    if path.suffix == ".json":
        return network_from_json(text)
    return parse_matpower_case(text, name=path.stem)


def catalog_names() -> Iterable[str]:
    return [name for name, _ in builtin_catalog()]
