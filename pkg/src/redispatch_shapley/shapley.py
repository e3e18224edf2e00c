"""Exact Shapley allocation of redispatch cost over congested lines.

Coalitions are bitmasks over the ordered player list: bit k set means the
k-th player's limit is enforced. The characteristic value of a coalition is
the optimal cost with limits enforced on every non-player line plus the
coalition's players.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import ipm
from .congestion import CongestionSet
from .grid_model import Network
from .opf import LimitMask, OpfProblem, OpfSolution, solve_opf

log = logging.getLogger(__name__)

MAX_PLAYERS = 20


class PlayerCapExceeded(ValueError):
    pass


class CharacteristicFailure(RuntimeError):
    def __init__(self, coalition: int, status: str, detail: str = ""):
        super().__init__(f"characteristic solve failed for coalition {coalition:#b}: {status} {detail}".rstrip())
        self.coalition = coalition
        self.status = status


def coalition_weights(n_players: int) -> np.ndarray:
    """w[s] = s!(n-s-1)!/n! for coalitions of size s not containing the player."""
    n = n_players
    return np.array(
        [float(Fraction(math.factorial(s) * math.factorial(n - s - 1), math.factorial(n))) for s in range(n)]
    )


def _popcount(masks: np.ndarray) -> np.ndarray:
    counts = np.zeros_like(masks)
    m = masks.copy()
    while np.any(m):
        counts += m & 1
        m >>= 1
    return counts


def shapley_from_values(values: Sequence[float], n_players: int) -> np.ndarray:
    """Shapley values from a full table ``values[mask]`` of 2**n entries."""
    v = np.asarray(values, dtype=float)
    if v.shape != (1 << n_players,):
        raise ValueError(f"need {1 << n_players} characteristic values, got {v.shape}")
    if n_players == 0:
        return np.zeros(0)
    w = coalition_weights(n_players)
    masks = np.arange(1 << n_players, dtype=np.int64)
    sizes = _popcount(masks)
    psi = np.zeros(n_players)
    for k in range(n_players):
        without = masks[(masks >> k) & 1 == 0]
        psi[k] = float(np.sum(w[sizes[without]] * (v[without | (1 << k)] - v[without])))
    return psi


@dataclass
class Game:
    """Memoized characteristic function over coalitions of ``players``."""

    players: tuple
    characteristic: Callable[[int], float]
    formulation: str = ""
    cache: dict = field(default_factory=dict)

    def __post_init__(self):
        self.players = tuple(self.players)
        self._lock = threading.Lock()

    @property
    def n_players(self) -> int:
        return len(self.players)

    @property
    def grand(self) -> int:
        return (1 << self.n_players) - 1

    def value(self, coalition: int) -> float:
        if coalition < 0 or coalition > self.grand:
            raise ValueError(f"coalition {coalition:#b} is not a subset of the players")
        with self._lock:
            if coalition in self.cache:
                return self.cache[coalition]
        v = float(self.characteristic(coalition))
        with self._lock:
            self.cache.setdefault(coalition, v)
        return v

    def evaluate_all(self, workers: int = 1) -> None:
        todo = [m for m in range(self.grand + 1) if m not in self.cache]
        if workers <= 1:
            for mask in todo:
                self.value(mask)
            return
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(self.value, todo))

    def export_cache(self) -> str:
        return json.dumps(
            {
                "players": list(self.players),
                "formulation": self.formulation,
                "values": {str(k): v for k, v in sorted(self.cache.items())},
            },
            indent=1,
        )

    def import_cache(self, text: str) -> int:
        """Load previously computed values; returns how many were taken."""
        data = json.loads(text)
        if tuple(data["players"]) != self.players or data.get("formulation", "") != self.formulation:
            raise ValueError("cache belongs to a different game")
        with self._lock:
            for k, v in data["values"].items():
                mask = int(k)
                if 0 <= mask <= self.grand:
                    self.cache[mask] = float(v)
        return len(data["values"])


def characteristic_cost(game: Game, coalition: int) -> float:
    return game.value(coalition)


@dataclass
class Allocation:
    players: tuple  # 1-based line numbers
    values: np.ndarray  # $/h per player
    total_cost: float  # all limits enforced
    baseline_cost: float  # player limits dropped
    formulation: str = ""

    @property
    def redispatch_cost(self) -> float:
        return self.total_cost - self.baseline_cost

    def as_dict(self) -> dict:
        return dict(zip(self.players, (float(v) for v in self.values)))


def shapley_values(game: Game, max_players: int = MAX_PLAYERS, workers: int = 1) -> Allocation:
    n = game.n_players
    if n > max_players:
        raise PlayerCapExceeded(f"{n} players exceed the enumeration cap of {max_players}")
    game.evaluate_all(workers)
    table = np.array([game.value(m) for m in range(1 << n)])
    psi = shapley_from_values(table, n)
    alloc = Allocation(
        players=game.players,
        values=psi,
        total_cost=float(table[-1]),
        baseline_cost=float(table[0]),
        formulation=game.formulation,
    )
    tol = 1e-6 * max(1.0, abs(alloc.total_cost))
    for line, v in zip(alloc.players, psi):
        if v < -tol:
            log.warning("negative Shapley value %.6g for line %s", v, line)
    return alloc


def group_by_operator(alloc: Allocation, zone_map: Mapping) -> dict:
    """Sum Shapley values per operator; ``zone_map`` maps line number → operator."""
    totals: dict = {}
    for line, v in zip(alloc.players, alloc.values):
        if line not in zone_map:
            raise KeyError(f"line {line} has no operator")
        op = zone_map[line]
        totals[op] = totals.get(op, 0.0) + float(v)
    return totals


# --- OPF-backed games ------------------------------------------------------


def coalition_mask(net: Network, congestion: CongestionSet, coalition: int) -> LimitMask:
    """Limits on every non-player line plus the players selected by ``coalition``."""
    players = congestion.branches
    dropped = [b for k, b in enumerate(players) if not (coalition >> k) & 1]
    return LimitMask.all_limits(net).without(dropped)


_WORKER: dict = {}


def _worker_init(net, congestion, formulation, options, warm_x):
    _WORKER.update(net=net, congestion=congestion, formulation=formulation, options=options, warm_x=warm_x)


def _worker_solve(coalition: int):
    w = _WORKER
    problem = OpfProblem(w["net"], coalition_mask(w["net"], w["congestion"], coalition), w["formulation"])
    sol = solve_opf(problem, start=w["warm_x"], options=w["options"])
    return coalition, sol.status, sol.objective, sol.kkt


class OpfGame(Game):
    """Characteristic values from masked OPF solves.

    The grand coalition is solved first; with ``warm_start`` every other
    coalition starts from its primal solution.
    """

    def __init__(
        self,
        net: Network,
        congestion: CongestionSet,
        formulation: str,
        options: ipm.IpmOptions = ipm.IpmOptions(),
        warm_start: bool = True,
    ):
        self.net = net
        self.congestion = congestion
        self.options = options
        self.warm_start = warm_start
        self.grand_solution: Optional[OpfSolution] = None
        self.statuses: dict = {}
        super().__init__(players=congestion.lines, characteristic=self._solve, formulation=formulation)

    def problem(self, coalition: int) -> OpfProblem:
        return OpfProblem(self.net, coalition_mask(self.net, self.congestion, coalition), self.formulation)

    def _warm_x(self):
        if self.warm_start and self.grand_solution is not None:
            return self.grand_solution.x
        return None

    def _solve(self, coalition: int) -> float:
        if coalition == self.grand and self.grand_solution is not None:
            sol = self.grand_solution
        else:
            sol = solve_opf(self.problem(coalition), start=self._warm_x(), options=self.options)
        self.statuses[coalition] = sol.status
        if not sol.ok:
            raise CharacteristicFailure(coalition, sol.status)
        return sol.objective

    def solve_grand(self) -> OpfSolution:
        if self.grand_solution is None:
            sol = solve_opf(self.problem(self.grand), options=self.options)
            self.statuses[self.grand] = sol.status
            if not sol.ok:
                raise CharacteristicFailure(self.grand, sol.status)
            self.grand_solution = sol
        return self.grand_solution

    def evaluate_all(self, workers: int = 1) -> None:
        self.solve_grand()
        if self.grand not in self.cache:
            self.value(self.grand)
        todo = [m for m in range(self.grand + 1) if m not in self.cache]
        if workers <= 1 or len(todo) <= 1:
            for m in todo:
                self.value(m)
            return
        init = (self.net, self.congestion, self.formulation, self.options, self._warm_x())
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init, initargs=init) as pool:
            for coalition, status, objective, _ in pool.map(_worker_solve, todo):
                self.statuses[coalition] = status
                if status != ipm.OPTIMAL:
                    raise CharacteristicFailure(coalition, status)
                with self._lock:
                    self.cache[coalition] = float(objective)
