"""End-to-end run: case → power flow → congestions → coalition OPFs → allocation."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import ipm
from .case_io import load_case
from .congestion import DEFAULT_TOLERANCE, CongestionSet, detect_congestions
from .grid_model import Network
from .opf import LimitMask, OpfProblem, OpfSolution, solve_opf
from .power_flow import PowerFlowSolution, ac_power_flow, dc_power_flow
from .shapley import MAX_PLAYERS, Allocation, OpfGame, shapley_values


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class RunConfig:
    case: Union[str, Path]
    formulation: str = "dc"
    pf_tolerance: float = 1e-8
    opf_tolerance: float = 1e-8
    congestion_tolerance: float = DEFAULT_TOLERANCE
    max_players: int = MAX_PLAYERS
    workers: int = 1
    warm_start: bool = True
    market_dispatch: str = "case"  # or "unconstrained_opf"
    cache_path: Optional[Union[str, Path]] = None

    def __post_init__(self):
        if self.formulation not in ("dc", "ac"):
            raise ValueError("formulation must be 'dc' or 'ac'")
        if min(self.pf_tolerance, self.opf_tolerance) <= 0 or self.congestion_tolerance < 0:
            raise ValueError("tolerances must be positive")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.market_dispatch not in ("case", "unconstrained_opf"):
            raise ValueError("market_dispatch must be 'case' or 'unconstrained_opf'")


@dataclass
class Artifacts:
    network: Network
    power_flow: PowerFlowSolution
    congestion: CongestionSet
    game: OpfGame
    grand_solution: OpfSolution
    allocation: Allocation
    provenance: dict


@dataclass
class AllocationReport:
    case: str
    formulation: str
    n_buses: int
    n_lines: int
    players: list  # 1-based line numbers
    total_cost: float
    redispatch_cost: float
    shapley: list  # $/h, aligned with players
    stage_seconds: dict
    total_seconds: float
    artifacts: Optional[Artifacts] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "artifacts"}

    @classmethod
    def from_dict(cls, d: dict) -> "AllocationReport":
        return cls(**{k: d[k] for k in d if k != "artifacts"})


def run_pipeline(cfg: RunConfig) -> AllocationReport:
    stages: dict = {}
    t_start = time.perf_counter()

    def timed(name, fn):
        t = time.perf_counter()
        try:
            return fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, str(exc)) from exc
        finally:
            stages[name] = time.perf_counter() - t

    net = timed("load", lambda: load_case(cfg.case))
    options = ipm.IpmOptions(
        tol_feasibility=cfg.opf_tolerance,
        tol_stationarity=cfg.opf_tolerance,
        tol_complementarity=cfg.opf_tolerance,
    )

    def market_network():
        if cfg.market_dispatch == "case":
            return net
        sol = solve_opf(OpfProblem(net, LimitMask.none(), cfg.formulation), options=options)
        if not sol.ok:
            raise RuntimeError(f"unconstrained dispatch OPF ended with status {sol.status}")
        gens = list(net.generators)
        for pos, p in zip(net.arrays.gen_index, sol.pg):
            gens[pos] = replace(gens[pos], p=float(p))
        return replace(net, generators=gens)

    def power_flow():
        market = market_network()
        if cfg.formulation == "dc":
            return dc_power_flow(market)
        sol = ac_power_flow(market, tol=cfg.pf_tolerance)
        if not sol.converged:
            raise RuntimeError(f"AC power flow did not converge (mismatch {sol.max_mismatch:.3g} pu)")
        return sol

    pf = timed("power_flow", power_flow)
    congestion = timed("congestion", lambda: detect_congestions(net, pf, cfg.congestion_tolerance))
    game = OpfGame(net, congestion, cfg.formulation, options=options, warm_start=cfg.warm_start)
    cache_file = Path(cfg.cache_path) if cfg.cache_path else None
    if cache_file and cache_file.exists():
        try:
            game.import_cache(cache_file.read_text())
        except ValueError:
            pass  # cache from another game; start fresh and overwrite it
    try:
        allocation = timed(
            "shapley", lambda: shapley_values(game, max_players=cfg.max_players, workers=cfg.workers)
        )
    finally:
        if cache_file and game.cache:
            cache_file.write_text(game.export_cache())
    total = time.perf_counter() - t_start
    provenance = {
        "congestion": f"{congestion.source}:{pf.formulation}",
        "characteristic": f"opf:{cfg.formulation}",
        "market_dispatch": cfg.market_dispatch,
    }
    return AllocationReport(
        case=net.name,
        formulation=cfg.formulation,
        n_buses=len(net.buses),
        n_lines=len(net.branches),
        players=list(allocation.players),
        total_cost=allocation.total_cost,
        redispatch_cost=allocation.redispatch_cost,
        shapley=[float(v) for v in allocation.values],
        stage_seconds=stages,
        total_seconds=total,
        artifacts=Artifacts(net, pf, congestion, game, game.grand_solution, allocation, provenance),
    )


def format_duration(seconds: float) -> str:
    s = int(round(seconds))
    return f"{s // 3600}:{s % 3600 // 60:02d}:{s % 60:02d}"


def _money(v: float) -> str:
    text = f"{v:.1f}"
    return "0.0" if text == "-0.0" else text


_COLUMNS = ["Case", "Buses", "Lines", "Congested Lines", "Total system costs ($)",
            "Total redispatch costs ($)", "Shapley Values ($)", "Runtime"]


def _row(r: AllocationReport) -> list:
    return [
        r.case,
        str(r.n_buses),
        str(r.n_lines),
        "(" + ",".join(str(p) for p in r.players) + ")",
        _money(r.total_cost),
        _money(r.redispatch_cost),
        "(" + ",".join(_money(v) for v in r.shapley) + ")",
        format_duration(r.total_seconds),
    ]


def emit_report(report: Optional[AllocationReport], fmt: str = "table") -> str:
    """Render one report (or just the header when ``report`` is None)."""
    rows = [] if report is None else [_row(report)]
    if fmt == "json":
        return json.dumps(report.to_dict() if report else {}, indent=1, sort_keys=True)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_COLUMNS)
        w.writerows(rows)
        return buf.getvalue()
    if fmt != "table":
        raise ValueError(f"unknown report format {fmt!r}")
    widths = [max([len(c)] + [len(r[i]) for r in rows]) for i, c in enumerate(_COLUMNS)]
    lines = [" | ".join(c.ljust(w) for c, w in zip(_COLUMNS, widths))]
    lines.append("-+-".join("-" * w for w in widths))
    lines += [" | ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


def report_from_json(text: str) -> AllocationReport:
    return AllocationReport.from_dict(json.loads(text))


def export_graph(net: Network, solution: Union[PowerFlowSolution, OpfSolution], players=()) -> str:
    """Graphviz DOT: green buses inject, red buses consume, edge width follows loading."""
    a = net.arrays
    gen_bus = np.bincount(a.gen_bus, weights=solution.pg, minlength=a.n_bus)
    net_inj = gen_bus - a.p_load * a.base_mva
    on = a.in_service
    if getattr(solution, "formulation", "dc") == "dc":
        mag = np.abs(solution.flows.p_from)
    else:
        mag = np.maximum(solution.flows.s_from, solution.flows.s_to)
    peak = float(mag[on].max(initial=0.0)) or 1.0
    highlight = set(players)
    out = [f'graph "{net.name}" {{', "  node [shape=circle style=filled fontsize=10];"]
    for i, bus in enumerate(net.buses):
        color = "green" if net_inj[i] > 0 else "red" if net_inj[i] < 0 else "gray"
        out.append(f'  {bus.id} [fillcolor={color} label="{bus.id}"];')
    for k, br in enumerate(net.branches):
        if not br.in_service:
            continue
        width = 0.5 + 5.0 * mag[k] / peak
        color = "orange" if (k + 1) in highlight else "blue"
        out.append(
            f'  {br.from_bus} -- {br.to_bus} [color={color} penwidth={width:.2f} '
            f'label="{k + 1}: {mag[k]:.1f}" tooltip="line {k + 1}"];'
        )
    out.append("}")
    return "\n".join(out) + "\n"
