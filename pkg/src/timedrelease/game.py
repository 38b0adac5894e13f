"""Game-theoretic analysis of enforcement and reporting.

Terminal payoffs are never written down by hand: every action profile is
turned into a scenario and replayed through the harness, and a player's
payoff is the change in everything it holds (spendable plus frozen).

Enforcement game: the sender picks ``s`` (submit) or ``s-bar``; every peer and
the recipient pick ``sv`` (submit and verify) or ``sv-bar`` (neither). Nobody
observes earlier moves, so each player has one information set and a pure
strategy is a single action. The tree lists the sender, the peers in path
order and the recipient level by level.

Bar types (``p_bar`` / ``r_bar``) gain ``v`` when they sit on the package
instead of forwarding it; plain types gain nothing from doing so.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .core import Money, TimeWindow, eth, fmt_eth
from .economics import ParamViolation
from .harness import Behavior, ScenarioSpec, Transfer, run_scenario

SUBMIT, WITHHOLD = "s", "s-bar"
SERVE, ABSTAIN = "sv", "sv-bar"
SENDER_ACTIONS = (SUBMIT, WITHHOLD)
PLAYER_ACTIONS = (SERVE, ABSTAIN)

_T_S, _HOP, _TRANSFER = 10, 4, 2


@dataclass(frozen=True)
class GameParams:
    v: Money
    c: Money      # a peer's cost of storing and forwarding
    r: Money      # remuneration per peer
    d: Money      # deposit
    a: Money      # reporting award
    p_bar: bool = True
    r_bar: bool = True

    def __post_init__(self):
        for name in ("v", "c", "r", "a"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.d <= 0:
            raise ValueError("deposit must be positive")
        if self.a > self.d:
            raise ValueError("award cannot exceed the deposit")

    def with_types(self, p_bar: bool, r_bar: bool) -> "GameParams":
        return GameParams(self.v, self.c, self.r, self.d, self.a, p_bar, r_bar)

    def describe(self) -> dict[str, str]:
        return {"v": fmt_eth(self.v), "c": fmt_eth(self.c), "r": fmt_eth(self.r),
                "d": fmt_eth(self.d), "a": fmt_eth(self.a),
                "types": ("P-bar" if self.p_bar else "P") + ("R-bar" if self.r_bar else "R")}


def default_game_params(c: Money = eth("0.005")) -> GameParams:
    """v = 3, d = 3.6, a = 0.3 and the smallest per-peer payment of the
    evaluation (0.010), with a service cost below it."""
    return GameParams(v=eth(3), c=c, r=eth("0.010"), d=eth("3.6"), a=eth("0.3"))


def players_for(peer_count: int) -> tuple[str, ...]:
    return ("S", *(f"P{i}" for i in range(1, peer_count + 1)), "R")


def actions_for(player: str) -> tuple[str, str]:
    return SENDER_ACTIONS if player == "S" else PLAYER_ACTIONS


# -- scenarios --------------------------------------------------------------------

def _chain_windows(peers: Sequence[str]) -> tuple[dict, int]:
    """Windows forming a valid route with a handoff every few hours."""
    k = len(peers)
    t_r = _T_S + _HOP * max(k, 1)
    windows = {}
    for i, p in enumerate(peers):
        begin = _T_S + _HOP * i
        nxt = _T_S + _HOP * (i + 1) if i + 1 < k else t_r
        windows[p] = (TimeWindow(begin, nxt + _TRANSFER + 1),)
    return windows, t_r


def _base_spec(peers: Sequence[str], params: GameParams, behaviors: Mapping[str, Behavior],
               others: Sequence[str] = (), costs: Mapping[str, Money] | None = None,
               extra_balance: Mapping[str, Money] | None = None, transfers=()) -> ScenarioSpec:
    windows, t_r = _chain_windows(peers)
    k = len(peers)
    costs = dict(costs if costs is not None else {p: params.c for p in peers})
    cushion = eth(1)
    balances = {"S": params.d + params.r * k + cushion, "R": params.d + cushion}
    for p in peers:
        balances[p] = params.d + costs.get(p, 0)
    for name, amount in (extra_balance or {}).items():
        balances[name] = balances.get(name, 0) + amount
    return ScenarioSpec(
        peers=tuple(peers), others=tuple(others), balances=balances, v=params.v,
        t_s=_T_S, t_r=t_r, windows=windows, route=tuple(peers),
        remuneration_override=(params.r,) * k, deposit_override=params.d, award_override=params.a,
        peer_deposits={p: params.d for p in peers}, costs={p: c for p, c in costs.items() if c},
        behaviors=dict(behaviors), transfer_hours=_TRANSFER, auto_verify=False,
        transfers=tuple(transfers),
    )


def enforcement_scenario(profile: Sequence[str], params: GameParams) -> ScenarioSpec:
    players = players_for(len(profile) - 2)
    behaviors = {}
    for who, act in zip(players, profile):
        if act not in actions_for(who):
            raise ValueError(f"{who} cannot play {act!r}")
        if act in (WITHHOLD, ABSTAIN):
            gains = False if who == "S" else (params.r_bar if who == "R" else params.p_bar)
            behaviors[who] = Behavior("abstain", realizes_value=gains)
    return _base_spec(players[1:-1], params, behaviors)


@functools.lru_cache(maxsize=1 << 16)
def payoff_by_replay(profile: tuple[str, ...], params: GameParams) -> tuple[Money, ...]:
    """Payoffs (S, P1..Pk, R) of an action profile, by running the contract."""
    spec = enforcement_scenario(profile, params)
    res = run_scenario(spec, record_trace=False)
    return tuple(res.payoff(p) for p in players_for(len(profile) - 2))


# -- game tree ----------------------------------------------------------------------

@dataclass
class Node:
    id: int
    history: tuple[str, ...]
    player: str | None = None            # None at terminals
    infoset: str | None = None
    children: dict[str, int] = field(default_factory=dict)
    payoff: tuple[Money, ...] | None = None


@dataclass
class GameTree:
    players: tuple[str, ...]
    params: GameParams
    nodes: list[Node]

    @property
    def choice_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.player is not None]

    @property
    def terminals(self) -> list[Node]:
        return [n for n in self.nodes if n.player is None]

    def infosets(self) -> dict[str, list[Node]]:
        out: dict[str, list[Node]] = {}
        for n in self.choice_nodes:
            out.setdefault(n.infoset, []).append(n)
        return out

    def actions(self, player: str) -> tuple[str, ...]:
        return actions_for(player)

    def profiles(self):
        return itertools.product(*(actions_for(p) for p in self.players))

    def outcome(self, profile: Sequence[str]) -> tuple[Money, ...]:
        node = self.nodes[0]
        while node.player is not None:
            node = self.nodes[node.children[profile[self.players.index(node.player)]]]
        return node.payoff


def build_enforcement_game(params: GameParams, peer_count: int) -> GameTree:
    if peer_count < 0:
        raise ValueError("peer_count must be non-negative")
    players = players_for(peer_count)
    nodes = [Node(0, ())]
    frontier = [0]
    for player in players:
        nxt = []
        for nid in frontier:
            node = nodes[nid]
            node.player, node.infoset = player, f"{player}:0"
            for act in actions_for(player):
                child = Node(len(nodes), node.history + (act,))
                nodes.append(child)
                node.children[act] = child.id
                nxt.append(child.id)
        frontier = nxt
    for nid in frontier:
        nodes[nid].payoff = payoff_by_replay(nodes[nid].history, params)
    return GameTree(players, params, nodes)


def enumerate_nash(game: GameTree) -> list[tuple[str, ...]]:
    """All pure profiles with no profitable unilateral deviation."""
    out = []
    for prof in game.profiles():
        base = game.outcome(prof)
        stable = True
        for i, player in enumerate(game.players):
            for alt in actions_for(player):
                if alt == prof[i]:
                    continue
                dev = prof[:i] + (alt,) + prof[i + 1:]
                if game.outcome(dev)[i] > base[i]:
                    stable = False
                    break
            if not stable:
                break
        if stable:
            out.append(tuple(prof))
    return out


def profitable_deviations(game: GameTree, profile: Sequence[str]) -> list[tuple[str, str, Money]]:
    """(player, action, gain) for every strictly profitable unilateral deviation."""
    profile = tuple(profile)
    base = game.outcome(profile)
    out = []
    for i, player in enumerate(game.players):
        for alt in actions_for(player):
            if alt != profile[i]:
                gain = game.outcome(profile[:i] + (alt,) + profile[i + 1:])[i] - base[i]
                if gain > 0:
                    out.append((player, alt, gain))
    return out


def check_dominance(game: GameTree, player: str, action_a: str, action_b: str) -> bool:
    """True iff ``action_a`` is never worse than ``action_b`` and sometimes better."""
    acts = actions_for(player)
    if action_a not in acts or action_b not in acts:
        raise ValueError(f"{player} has actions {acts}")
    i = game.players.index(player)
    others = [actions_for(p) for j, p in enumerate(game.players) if j != i]
    strict = False
    for rest in itertools.product(*others):
        pa = rest[:i] + (action_a,) + rest[i:]
        pb = rest[:i] + (action_b,) + rest[i:]
        ua, ub = game.outcome(pa)[i], game.outcome(pb)[i]
        if ua < ub:
            return False
        strict = strict or ua > ub
    return strict


def honest_profile(peer_count: int) -> tuple[str, ...]:
    return (SUBMIT,) + (SERVE,) * (peer_count + 1)


def analyze_bayesian_variants(params: GameParams, peer_count: int = 1) -> dict:
    """Equilibria of the game for each of the four type combinations."""
    if params.d <= params.v:
        raise ParamViolation("the type analysis assumes a deposit above v")
    report = {}
    honest = honest_profile(peer_count)
    for p_bar, r_bar in itertools.product((False, True), repeat=2):
        label = ("P-bar" if p_bar else "P") + ("R-bar" if r_bar else "R")
        game = build_enforcement_game(params.with_types(p_bar, r_bar), peer_count)
        eq = enumerate_nash(game)
        report[label] = {"equilibria": eq, "honest_is_equilibrium": honest in eq}
    report["all_honest"] = all(v["honest_is_equilibrium"] for v in report.values())
    return report


# -- release-ahead bribery ---------------------------------------------------------

ACCEPT, REJECT = "accept", "reject"
REPORT, SILENT = "report", "silent"


def bribery_scenario(params: GameParams, bribe: Money, peer_action: str, adv_action: str) -> ScenarioSpec:
    """One peer; an outside adversary pays it to hand over the recipient-only
    ciphertext before release."""
    behaviors = {"A": Behavior("honest", report="always" if adv_action == REPORT else "never")}
    transfers = ()
    if peer_action == ACCEPT:
        hour = _T_S + 1
        behaviors["P1"] = Behavior("release_ahead", target="A", hour=hour, beneficiary="A",
                                   realizes_value=False)
        if bribe:
            transfers = (Transfer(hour, "A", "P1", bribe),)
    return _base_spec(["P1"], params, behaviors, others=["A"],
                      extra_balance={"A": bribe + eth(1)}, transfers=transfers)


def analyze_release_bribery_game(params: GameParams, bribe: Money) -> dict:
    """Payoff table (peer, adversary), best responses and equilibria.

    The adversary moves after seeing whether the peer handed over the
    ciphertext, so the table is solved by backward induction; the plain Nash
    set is reported alongside.
    """
    if bribe < 0:
        raise ValueError("bribe must be non-negative")
    table = {}
    for pa, aa in itertools.product((ACCEPT, REJECT), (REPORT, SILENT)):
        res = run_scenario(bribery_scenario(params, bribe, pa, aa), record_trace=False)
        table[(pa, aa)] = (res.payoff("P1"), res.payoff("A"))
    adv_best = {pa: max((REPORT, SILENT), key=lambda aa: (table[(pa, aa)][1], aa == REPORT))
                for pa in (ACCEPT, REJECT)}
    peer_best = max((REJECT, ACCEPT), key=lambda pa: (table[(pa, adv_best[pa])][0], pa == REJECT))
    nash = [(pa, aa) for pa, aa in table
            if table[(pa, aa)][0] >= table[(_other(pa), aa)][0]
            and table[(pa, aa)][1] >= table[(pa, _other(aa))][1]]
    return {"payoffs": table, "adversary_best": adv_best, "peer_best": peer_best,
            "equilibrium": (peer_best, adv_best[peer_best]), "nash": nash}


def _other(action: str) -> str:
    return {ACCEPT: REJECT, REJECT: ACCEPT, REPORT: SILENT, SILENT: REPORT}[action]


# -- drop dispute -----------------------------------------------------------------------

HONEST, FAKE = "honest", "fake"
FORWARD, DROP = "forward", "drop"
KEEP, DENY = "accept", "deny"
DISPUTE_PLAYERS = ("S", "P1", "P2")
DISPUTE_ACTIONS = {"S": (HONEST, FAKE), "P1": (FORWARD, DROP), "P2": (KEEP, DENY)}


def dispute_scenario(params: GameParams, profile: Sequence[str], p2_reports: bool = True) -> ScenarioSpec:
    """Two peers and a recipient. Peers run at zero margin (cost equals
    remuneration), so serving honestly is worth exactly nothing to them."""
    s_act, p1_act, p2_act = profile
    behaviors = {}
    if s_act == FAKE:
        behaviors["S"] = Behavior("fake_commitment", hop=2)
    if p1_act == DROP:
        behaviors["P1"] = Behavior("drop")
    if p2_act == DENY:
        behaviors["P2"] = Behavior("deny")
    elif not p2_reports:
        behaviors["P2"] = Behavior("honest", report="never")
    return _base_spec(["P1", "P2"], params, behaviors, costs={"P1": params.r, "P2": params.r})


@functools.lru_cache(maxsize=1 << 14)
def dispute_payoffs(params: GameParams, profile: tuple[str, ...], p2_reports: bool = True) -> tuple[Money, ...]:
    res = run_scenario(dispute_scenario(params, profile, p2_reports), record_trace=False)
    return tuple(res.payoff(p) for p in DISPUTE_PLAYERS)


def analyze_drop_dispute_game(params: GameParams) -> dict:
    """Payoff matrix, the second peer's reporting dominance and the equilibria.

    Raises ParamViolation (carrying the found deviation) unless nobody dropping
    is a strict equilibrium, which at zero margin means d > v + a.
    """
    profiles = list(itertools.product(*(DISPUTE_ACTIONS[p] for p in DISPUTE_PLAYERS)))
    # reporting versus staying silent, for an honest second peer, across everything upstream
    diffs = [dispute_payoffs(params, (s, p1, KEEP), True)[2] - dispute_payoffs(params, (s, p1, KEEP), False)[2]
             for s, p1 in itertools.product(DISPUTE_ACTIONS["S"], DISPUTE_ACTIONS["P1"])]
    report_dominant = all(x >= 0 for x in diffs) and any(x > 0 for x in diffs)
    matrix = {prof: dispute_payoffs(params, prof) for prof in profiles}

    def deviations(prof, strict):
        out = []
        for i, who in enumerate(DISPUTE_PLAYERS):
            for alt in DISPUTE_ACTIONS[who]:
                if alt == prof[i]:
                    continue
                dev = prof[:i] + (alt,) + prof[i + 1:]
                gain = matrix[dev][i] - matrix[prof][i]
                if gain > 0 or (not strict and gain == 0):
                    out.append((who, alt, gain))
        return out

    equilibria = [prof for prof in profiles if not deviations(prof, strict=True)]
    no_drop = (HONEST, FORWARD, KEEP)
    weak = deviations(no_drop, strict=False)
    result = {"payoffs": matrix, "report_dominant": report_dominant,
              "equilibria": equilibria, "no_drop_strict": not weak}
    if weak:
        who, alt, gain = max(weak, key=lambda x: x[2])
        err = ParamViolation(f"nobody dropping is not a strict equilibrium: {who} playing {alt} "
                             f"changes its payoff by {fmt_eth(gain)} (needs d > v + a)")
        err.deviation = (who, alt, gain)
        err.analysis = result
        raise err
    return result
