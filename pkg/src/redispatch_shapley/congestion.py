"""Players of the redispatch game: lines overloaded by the market-clearing flow."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .grid_model import Network
from .power_flow import PowerFlowSolution

DEFAULT_TOLERANCE = 1e-4


@dataclass(frozen=True)
class Congestion:
    branch: int  # 0-based position in Network.branches
    limit: float  # MVA (MW for DC)
    flow: float
    overload: float

    @property
    def line(self) -> int:
        """1-based line number as used in case files and reports."""
        return self.branch + 1


@dataclass(frozen=True)
class CongestionSet:
    players: tuple
    formulation: str
    source: str = "power_flow"

    def __iter__(self) -> Iterator[Congestion]:
        return iter(self.players)

    def __len__(self) -> int:
        return len(self.players)

    @property
    def branches(self) -> tuple:
        return tuple(c.branch for c in self.players)

    @property
    def lines(self) -> tuple:
        return tuple(c.line for c in self.players)


def detect_congestions(net: Network, pf: PowerFlowSolution, tolerance_rel: float = DEFAULT_TOLERANCE) -> CongestionSet:
    """Limited in-service branches whose worse-end flow exceeds limit·(1 + tolerance_rel)."""
    if not pf.converged:
        raise ValueError("congestion detection needs a converged power flow")
    if tolerance_rel < 0:
        raise ValueError("tolerance_rel must be non-negative")
    limits = np.array([br.rate_a for br in net.branches])
    on = np.array([br.in_service for br in net.branches], dtype=bool)
    flow = pf.loading()
    over = np.flatnonzero(on & (limits > 0) & (flow > limits * (1 + tolerance_rel)))
    players = tuple(
        Congestion(branch=int(k), limit=float(limits[k]), flow=float(flow[k]), overload=float(flow[k] - limits[k]))
        for k in over
    )
    return CongestionSet(players=players, formulation=pf.formulation)
