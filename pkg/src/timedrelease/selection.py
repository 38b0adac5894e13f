"""Greedy peer selection over registered working windows.

Selection runs backwards from ``t_r + T_t``. Each round takes the window that
covers ``point + T_t`` (strictly, ``t_b < point + T_t < t_e``), starts strictly
before ``point`` and has the earliest ``t_b``; that ``t_b`` becomes the next
point. It stops once a chosen window starts at or before ``t_s``. Ties on
``t_b`` go to the lexicographically smallest owner.

Instance files hold one window per line::

    owner,start_hour,end_hour,deposit_eth,registered_at
"""

from __future__ import annotations

import io
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .core import Money, TimeWindow, eth, fmt_eth


class NoFeasibleRoute(Exception):
    pass


@dataclass(frozen=True)
class RegisteredWindow:
    owner: str
    window: TimeWindow
    unfrozen_deposit: Money
    registered_at: int = 0
    public_key: object = None


@dataclass(frozen=True)
class SelectionRequest:
    t_s: int
    t_r: int
    transfer_hours: int
    deposit: Money
    registration_deadline: int | None = None

    def __post_init__(self):
        if self.t_s >= self.t_r:
            raise ValueError("setup time must precede release time")
        if self.transfer_hours < 1:
            raise ValueError("transfer period is at least one hour")

    @property
    def deadline(self) -> int:
        return self.t_s if self.registration_deadline is None else self.registration_deadline


@dataclass(frozen=True)
class RouteHop:
    owner: str
    window: TimeWindow
    segment: TimeWindow


@dataclass(frozen=True)
class RoutePlan:
    hops: tuple[RouteHop, ...]
    t_s: int
    t_r: int
    transfer_hours: int

    def __len__(self) -> int:
        return len(self.hops)

    @property
    def owners(self) -> list[str]:
        return [h.owner for h in self.hops]

    def handoff_starts(self) -> list[int]:
        """Hour at which hop i receives the package (first hop: t_s), plus t_r
        for the recipient."""
        starts = [self.t_s] + [h.segment.begin for h in self.hops[1:]]
        return starts[: len(self.hops)] + [self.t_r]

    def storage_ranges(self) -> list[tuple[int, int]]:
        """1-based inclusive storage-hour ranges of [t_s, t_r) held by each hop."""
        a = self.handoff_starts()
        return [(a[i] - self.t_s + 1, a[i + 1] - self.t_s) for i in range(len(self.hops))]

    @classmethod
    def from_windows(cls, chain: Sequence[tuple[str, TimeWindow]], t_s: int, t_r: int,
                     transfer_hours: int) -> "RoutePlan":
        """Build a plan from an explicit sender-side-first chain, checking that it
        is a valid cover."""
        _check_chain([w for _, w in chain], t_s, t_r, transfer_hours)
        owners = [o for o, _ in chain]
        if len(set(owners)) != len(owners):
            raise NoFeasibleRoute("an owner appears twice on the route")
        hops = []
        for i, (owner, w) in enumerate(chain):
            end = chain[i + 1][1].begin + transfer_hours if i + 1 < len(chain) else t_r + transfer_hours
            hops.append(RouteHop(owner, w, TimeWindow(w.begin, end)))
        return cls(tuple(hops), t_s, t_r, transfer_hours)


def _covers(w: TimeWindow, t: int) -> bool:
    return w.begin < t < w.end


def _check_chain(chain: Sequence[TimeWindow], t_s, t_r, transfer) -> None:
    if not chain:
        return
    if chain[0].begin > t_s:
        raise NoFeasibleRoute("first window starts after setup time")
    point = t_r
    for w in reversed(chain):
        if not (_covers(w, point + transfer) and w.begin < point):
            raise NoFeasibleRoute(f"window [{w.begin}, {w.end}) does not cover hour {point + transfer}")
        point = w.begin
    for w in chain[1:]:
        if w.begin <= t_s:
            raise NoFeasibleRoute("route continues past a window that already covers setup time")


def eligible(windows: Iterable[RegisteredWindow], req: SelectionRequest) -> list[RegisteredWindow]:
    return [w for w in windows
            if w.registered_at < req.deadline and w.unfrozen_deposit >= req.deposit]


def select_peers(windows: Iterable[RegisteredWindow], req: SelectionRequest) -> RoutePlan:
    pool = eligible(windows, req)
    transfer = req.transfer_hours
    point = req.t_r
    used: set[str] = set()
    chosen: list[RegisteredWindow] = []
    while True:
        target = point + transfer
        best = None
        for w in pool:
            tb = w.window.begin
            if tb < target < w.window.end and tb < point and w.owner not in used:
                if best is None or (tb, w.owner) < (best.window.begin, best.owner):
                    best = w
        if best is None:
            raise NoFeasibleRoute(f"no eligible window covers hour {target}")
        chosen.append(best)
        used.add(best.owner)
        point = best.window.begin
        if point <= req.t_s:
            break
    chosen.reverse()
    return RoutePlan.from_windows([(w.owner, w.window) for w in chosen], req.t_s, req.t_r, transfer)


def min_hop_oracle(windows: Iterable[RegisteredWindow], req: SelectionRequest) -> int:
    """Exhaustive branch-and-bound over all valid chains; for tests only."""
    pool = sorted(eligible(windows, req), key=lambda w: (w.window.begin, w.owner))
    transfer = req.transfer_hours
    best = len(pool) + 1

    def search(point: int, used: frozenset, depth: int) -> None:
        nonlocal best
        if depth + 1 >= best:
            return
        for w in pool:
            tb = w.window.begin
            if w.owner in used or not (tb < point and tb < point + transfer < w.window.end):
                continue
            if tb <= req.t_s:
                best = depth + 1
                return
            search(tb, used | {w.owner}, depth + 1)

    search(req.t_r, frozenset(), 0)
    if best > len(pool):
        raise NoFeasibleRoute("no chain of windows covers the storage window")
    return best


def generate_instance(seed: int, n: int, horizon: int = 1200, mean_start: float = 300.0,
                      mean_len: float = 15.0, std_len: float = 5.0,
                      deposit: Money = eth(5), registered_at: int = 0) -> list[RegisteredWindow]:
    """Random working windows: exponential start times (resampled until inside
    the horizon) and normal lengths clamped to at least one hour."""
    rng = random.Random(seed)
    out = []
    for i in range(n):
        start = int(rng.expovariate(1.0 / mean_start))
        while start >= horizon:
            start = int(rng.expovariate(1.0 / mean_start))
        length = max(1, round(rng.gauss(mean_len, std_len)))
        end = min(start + length, horizon)
        out.append(RegisteredWindow(f"P{i:03d}", TimeWindow(start, end), deposit, registered_at))
    return out


def format_instance(windows: Iterable[RegisteredWindow]) -> str:
    buf = io.StringIO()
    for w in windows:
        buf.write(f"{w.owner},{w.window.begin},{w.window.end},{fmt_eth(w.unfrozen_deposit)},{w.registered_at}\n")
    return buf.getvalue()


def parse_instance(text: str) -> list[RegisteredWindow]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 5:
            raise ValueError(f"line {lineno}: expected 5 fields, got {len(parts)}")
        owner, start, end, deposit, reg = parts
        try:
            out.append(RegisteredWindow(owner, TimeWindow(int(start), int(end)), eth(deposit), int(reg)))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return out


def read_instance(path: str | Path) -> list[RegisteredWindow]:
    return parse_instance(Path(path).read_text())
