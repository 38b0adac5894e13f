"""Deterministic scenario runner.

A scenario registers peers, sets up one service and then walks the hours at
which anything can happen. Within an hour the phases run in this order::

    SETUP     registrations, service setup, side payments
    SENDER    commitments and the first handoff
    HANDOFF   peers forward the package to their successor
    SUBMIT    receivers peel their layer, verify certificates, set whisper keys
    REPORT    early releases, release and drop reports, award claims
    VERIFY    automatic verification at deadline hours

and inside a phase participants act in path order. Only hours where some
action or deadline falls are visited; the result is the same as stepping
every hour.

A faulty participant that ends up holding the package without forwarding it
(at its handoff hour, or when the service terminates first) is credited the
off-chain value ``v`` if its behavior realizes value. A release-ahead credits
``v`` to its beneficiary at the moment of the leak.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .contract import Contract, ContractError, ServiceDraft, ServiceStatus
from .core import AccountId, Ledger, Money, Role, TimeWindow, eth, fmt_eth
from .crypto import (OnionPackage, WhisperNetwork, build_onion, get_scheme, open_whisper_key,
                     peel, seal_whisper_key)
from .economics import (PricingParams, default_params, plan_remuneration,
                        report_award, required_deposit)
from .selection import RegisteredWindow, RoutePlan, SelectionRequest, select_peers

SETUP, SENDER, HANDOFF, SUBMIT, REPORT, VERIFY = range(6)
PHASES = ("SETUP", "SENDER", "HANDOFF", "SUBMIT", "REPORT", "VERIFY")

NETWORK = "network"   # external sink for service costs

KINDS = ("honest", "drop", "release_ahead", "skip_certificate", "skip_whisper_key",
         "skip_verification", "abstain", "fake_commitment", "deny")


class SpecError(ValueError):
    pass


class TraceCorrupt(Exception):
    pass


@dataclass(frozen=True)
class Behavior:
    kind: str = "honest"
    target: str | None = None        # release_ahead: who receives the leaked ciphertext
    hour: int | None = None          # release_ahead: when
    hop: int | None = None           # fake_commitment: path position whose commitment is faked
    report: str = "always"           # always | never
    realizes_value: bool | None = None
    beneficiary: str | None = None   # release_ahead: who gains v (default the leaker)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown behavior {self.kind!r}")
        if self.report not in ("always", "never"):
            raise SpecError("report policy is 'always' or 'never'")
        if self.kind == "release_ahead" and (self.target is None or self.hour is None):
            raise SpecError("release_ahead needs a target and an hour")

    @property
    def faulty(self) -> bool:
        return self.kind not in ("honest", "skip_verification")

    @property
    def gains_value(self) -> bool:
        return self.faulty if self.realizes_value is None else self.realizes_value

    @property
    def forwards(self) -> bool:
        return self.kind not in ("drop", "skip_whisper_key", "abstain", "deny")

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind}
        for key in ("target", "hour", "hop", "realizes_value", "beneficiary"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        if self.report != "always":
            out["report"] = self.report
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "Behavior":
        unknown = set(data) - {"kind", "target", "hour", "hop", "report", "realizes_value", "beneficiary"}
        if unknown:
            raise SpecError(f"unknown behavior keys {sorted(unknown)}")
        return cls(**data)


HONEST = Behavior()


@dataclass(frozen=True)
class Transfer:
    hour: int
    src: str
    dst: str
    amount: Money


@dataclass(frozen=True)
class ScenarioSpec:
    peers: tuple[str, ...]
    balances: Mapping[str, Money]
    v: Money
    t_s: int
    t_r: int
    windows: Mapping[str, tuple[TimeWindow, ...]]
    sender: str = "S"
    recipient: str = "R"
    others: tuple[str, ...] = ()
    pricing: PricingParams = field(default_factory=default_params)
    remuneration_override: tuple[Money, ...] | None = None
    deposit_override: Money | None = None
    award_override: Money | None = None
    peer_deposits: Mapping[str, Money] = field(default_factory=dict)
    costs: Mapping[str, Money] = field(default_factory=dict)
    behaviors: Mapping[str, Behavior] = field(default_factory=dict)
    transfers: tuple[Transfer, ...] = ()
    transfer_hours: int = 5
    seed: int = 0
    route: tuple[str, ...] | None = None
    scheme: str = "test"
    auto_verify: bool = True
    run_service: bool = True
    registration_hour: int = 0
    registration_deadline: int | None = None
    setup_hour: int | None = None
    sender_payment: Money | None = None
    recipient_payment: Money | None = None

    def __post_init__(self):
        names = [self.sender, self.recipient, *self.peers, *self.others]
        if len(set(names)) != len(names):
            raise SpecError("participant names must be distinct")
        if NETWORK in names or any("#" in n for n in names):
            raise SpecError(f"participant names may not be {NETWORK!r} or contain '#'")
        for n in self.balances:
            if n not in names:
                raise SpecError(f"balance for unknown participant {n!r}")
        for n in list(self.behaviors) + list(self.costs) + list(self.peer_deposits) + list(self.windows):
            if n not in names:
                raise SpecError(f"unknown participant {n!r}")
        if self.t_s >= self.t_r:
            raise SpecError("t_s must precede t_r")
        if self.transfer_hours < 1:
            raise SpecError("transfer_hours must be at least 1")
        if self.registration_hour > self.start_hour:
            raise SpecError("peers must register before setup")
        if self.start_hour > self.t_s:
            raise SpecError("setup must happen by t_s")
        for t in self.transfers:
            if t.src not in names or t.dst not in names:
                raise SpecError(f"transfer between unknown accounts {t.src!r} -> {t.dst!r}")
        try:
            get_scheme(self.scheme)
        except ValueError as exc:
            raise SpecError(str(exc)) from None
        if self.route is not None:
            for p in self.route:
                if p not in self.peers:
                    raise SpecError(f"route names unknown peer {p!r}")
                if not self.windows.get(p):
                    raise SpecError(f"route peer {p!r} has no window")

    @property
    def start_hour(self) -> int:
        return self.t_s if self.setup_hour is None else self.setup_hour

    def participants(self) -> list[str]:
        return [self.sender, *self.peers, self.recipient, *self.others]

    def behavior(self, who: str) -> Behavior:
        return self.behaviors.get(who, HONEST)

    # -- JSON form -----------------------------------------------------------

    def to_dict(self) -> dict:
        out: dict[str, Any] = {
            "participants": {"sender": self.sender, "recipient": self.recipient,
                             "peers": list(self.peers), "others": list(self.others)},
            "balances_eth": {k: fmt_eth(v) for k, v in self.balances.items()},
            "v_eth": fmt_eth(self.v),
            "pricing": self.pricing.to_config(),
            "remuneration_override": (None if self.remuneration_override is None
                                      else [fmt_eth(x) for x in self.remuneration_override]),
            "deposit_eth": None if self.deposit_override is None else fmt_eth(self.deposit_override),
            "award_eth": None if self.award_override is None else fmt_eth(self.award_override),
            "peer_deposits_eth": {k: fmt_eth(v) for k, v in self.peer_deposits.items()},
            "costs_eth": {k: fmt_eth(v) for k, v in self.costs.items()},
            "behaviors": {k: b.to_dict() for k, b in self.behaviors.items()},
            "transfers": [{"hour": t.hour, "from": t.src, "to": t.dst, "amount_eth": fmt_eth(t.amount)}
                          for t in self.transfers],
            "transfer_hours": self.transfer_hours,
            "seed": self.seed,
            "t_s": self.t_s,
            "t_r": self.t_r,
            "windows": {k: [[w.begin, w.end] for w in ws] for k, ws in self.windows.items()},
            "route": None if self.route is None else list(self.route),
            "scheme": self.scheme,
            "auto_verify": self.auto_verify,
            "run_service": self.run_service,
            "registration_hour": self.registration_hour,
            "registration_deadline": self.registration_deadline,
            "setup_hour": self.setup_hour,
            "sender_payment_eth": None if self.sender_payment is None else fmt_eth(self.sender_payment),
            "recipient_payment_eth": None if self.recipient_payment is None else fmt_eth(self.recipient_payment),
        }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ScenarioSpec":
        known = set(cls(peers=(), balances={}, v=0, t_s=0, t_r=1, windows={}).to_dict())
        unknown = set(data) - known
        if unknown:
            raise SpecError(f"unknown scenario keys {sorted(unknown)}")
        try:
            parts = data["participants"]
            money = lambda x: None if x is None else eth(x)   # noqa: E731
            kw: dict[str, Any] = dict(
                sender=parts.get("sender", "S"),
                recipient=parts.get("recipient", "R"),
                peers=tuple(parts.get("peers", ())),
                others=tuple(parts.get("others", ())),
                balances={k: eth(v) for k, v in data.get("balances_eth", {}).items()},
                v=eth(data["v_eth"]),
                t_s=int(data["t_s"]),
                t_r=int(data["t_r"]),
                windows={k: tuple(TimeWindow(int(b), int(e)) for b, e in ws)
                         for k, ws in data.get("windows", {}).items()},
                pricing=PricingParams.from_config(data.get("pricing") or {}),
                remuneration_override=(None if data.get("remuneration_override") is None
                                       else tuple(eth(x) for x in data["remuneration_override"])),
                deposit_override=money(data.get("deposit_eth")),
                award_override=money(data.get("award_eth")),
                peer_deposits={k: eth(v) for k, v in data.get("peer_deposits_eth", {}).items()},
                costs={k: eth(v) for k, v in data.get("costs_eth", {}).items()},
                behaviors={k: Behavior.from_dict(v) for k, v in data.get("behaviors", {}).items()},
                transfers=tuple(Transfer(int(t["hour"]), t["from"], t["to"], eth(t["amount_eth"]))
                                for t in data.get("transfers", ())),
                transfer_hours=int(data.get("transfer_hours", 5)),
                seed=int(data.get("seed", 0)),
                route=None if data.get("route") is None else tuple(data["route"]),
                scheme=data.get("scheme", "test"),
                auto_verify=bool(data.get("auto_verify", True)),
                run_service=bool(data.get("run_service", True)),
                registration_hour=int(data.get("registration_hour", 0)),
                registration_deadline=data.get("registration_deadline"),
                setup_hour=data.get("setup_hour"),
                sender_payment=money(data.get("sender_payment_eth")),
                recipient_payment=money(data.get("recipient_payment_eth")),
            )
        except SpecError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise SpecError(f"malformed scenario: {exc!r}") from None
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioSpec":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpecError(f"scenario is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise SpecError("scenario must be a JSON object")
        return cls.from_dict(data)


@dataclass
class RunResult:
    finals: dict[str, Money]
    initial: dict[str, Money]
    status: str
    guilty: str | None
    locked_delta: Money
    inflows: list[tuple[str, Money, str]]
    route: list[str]
    trace: list[dict]
    conserved: bool

    def payoff(self, who: str) -> Money:
        return self.finals[who] - self.initial[who]

    def summary(self) -> dict:
        """Everything except the trace, in a JSON-friendly form."""
        return {
            "finals": {k: fmt_eth(v) for k, v in self.finals.items()},
            "status": self.status,
            "guilty": self.guilty,
            "locked_delta": fmt_eth(self.locked_delta),
            "inflows": [[w, fmt_eth(a), r] for w, a, r in self.inflows],
            "route": self.route,
            "conserved": self.conserved,
        }

    def trace_lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True, separators=(",", ":")) for r in self.trace]


def _chain(prev: str, record: dict) -> str:
    body = json.dumps(record, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256((prev + body).encode()).hexdigest()


class _Run:
    def __init__(self, spec: ScenarioSpec, record_trace: bool):
        self.spec = spec
        self.scheme = get_scheme(spec.scheme)
        self.rng = random.Random(spec.seed)
        self.phase = SETUP
        self.hour = spec.registration_hour
        self.trace: list[dict] = []
        self._prev_hash = ""
        self.record_trace = record_trace
        if record_trace:
            self._append({"type": "header", "spec": spec.to_dict()})

        roles = {spec.sender: Role.SENDER, spec.recipient: Role.RECIPIENT}
        funds = {}
        for name in spec.participants():
            funds[AccountId(name, roles.get(name, Role.PEER if name in spec.peers else Role.EXTERNAL))] = \
                spec.balances.get(name, 0)
        funds[AccountId(NETWORK)] = 0
        self.contract = Contract(Ledger.genesis(funds), self.scheme,
                                 self._on_event if record_trace else None)
        self.keys = {}
        for name in spec.participants():
            self.keys[name] = self.scheme.generate_keypair(self.rng)
        self.net = WhisperNetwork()
        self.sid: int | None = None
        self.holding: dict[str, Any] = {}      # name -> package or secret held and not yet passed on
        self.forwarded: set[str] = set()
        self.channels: dict[str, bytes] = {}     # outgoing whisper channel per peer
        self._counter = 0
        self.credited: set[str] = set()
        self.needs_report: set[str] = set()
        self.leaked: dict[str, bytes] = {}     # target -> evidence
        self.secret: bytes | None = None
        self.received_secret: bytes | None = None

    # -- trace --------------------------------------------------------------

    def _append(self, record: dict) -> None:
        record["prev"] = self._prev_hash
        self._prev_hash = record["hash"] = _chain(self._prev_hash, record)
        self.trace.append(record)

    def _on_event(self, ev: dict) -> None:
        ev = dict(ev)
        ev["type"] = "event"
        ev["phase"] = PHASES[self.phase]
        ev["seq"] = len(self.trace)
        self._append(ev)

    def _call(self, fn: str, *args, caller, **kw):
        """Contract call whose refusal is part of the run, not a crash."""
        try:
            result = getattr(self.contract, fn)(*args, now=self.hour, caller=caller, **kw)
        except ContractError:
            return None
        self._after_call()
        return result

    # -- value and costs -------------------------------------------------------

    @property
    def svc(self):
        return self.contract.service(self.sid) if self.sid is not None else None

    def _active(self) -> bool:
        return self.svc is not None and self.svc.status is ServiceStatus.ACTIVE

    def _credit(self, who: str, reason: str) -> None:
        if who in self.credited or self.spec.v == 0:
            return
        self.credited.add(who)
        acct = self.contract.account(who)
        self.contract.external(self.hour, "inflow", who,
                               lambda led: led.record_inflow(acct, self.spec.v, reason), reason)

    def _after_call(self) -> None:
        svc = self.svc
        if svc is None or not svc.status.terminal:
            return
        sb = self.spec.behavior(self.spec.sender)
        if sb.kind == "fake_commitment" and sb.gains_value and svc.status is not ServiceStatus.COMPLETED:
            self._credit(self.spec.sender, "fake commitments")
        # anyone still sitting on the package without having forwarded it keeps the data
        for who in list(self.holding):
            b = self.spec.behavior(who)
            if b.faulty and b.gains_value and who not in self.forwarded:
                self._credit(who, "withheld package")

    # -- stages -----------------------------------------------------------------

    def register(self) -> None:
        spec = self.spec
        for p in spec.peers:
            if p not in spec.windows:
                continue
            deposit = spec.peer_deposits.get(p, spec.balances.get(p, 0) - spec.costs.get(p, 0))
            self._call("new_peer", list(spec.windows[p]), self.keys[p].public, deposit, caller=p)

    def plan_route(self) -> RoutePlan:
        spec = self.spec
        if spec.route is not None:
            chain = [(p, self._window_for(p)) for p in spec.route]
            return RoutePlan.from_windows(chain, spec.t_s, spec.t_r, spec.transfer_hours)
        d = self.deposit()
        pool = []
        for name, rec in self.contract.peers.items():
            unfrozen = self.contract.ledger.spendable(rec.deposit_account)
            for w in rec.windows:
                pool.append(RegisteredWindow(name, w, unfrozen, rec.registered_at, rec.public_key))
        req = SelectionRequest(spec.t_s, spec.t_r, spec.transfer_hours, d, spec.registration_deadline)
        return select_peers(pool, req)

    def _window_for(self, p: str) -> TimeWindow:
        ws = self.spec.windows[p]
        return ws[0] if len(ws) == 1 else max(ws, key=lambda w: w.length)

    def deposit(self) -> Money:
        spec = self.spec
        return spec.deposit_override if spec.deposit_override is not None else required_deposit(spec.v, spec.pricing)

    def award(self) -> Money:
        spec = self.spec
        return spec.award_override if spec.award_override is not None else report_award(spec.v, spec.pricing)

    def setup(self) -> None:
        spec = self.spec
        route = self.plan_route()
        if spec.route is not None:
            # explicit routes may name peers whose first window is not the one used
            for hop in route.hops:
                if hop.owner not in self.contract.peers:
                    raise SpecError(f"route peer {hop.owner} is not registered")
        for name in spec.behaviors:
            b = spec.behavior(name)
            if b.kind == "release_ahead" and (not route.owners or name != route.owners[-1]):
                raise SpecError("release_ahead applies to the last route peer only")
        if spec.remuneration_override is not None:
            if len(spec.remuneration_override) != len(route):
                raise SpecError(f"remuneration_override has {len(spec.remuneration_override)} entries "
                                f"for a {len(route)}-hop route")
            payments = tuple(spec.remuneration_override)
            total = sum(payments)
        else:
            plan = plan_remuneration(spec.v, route.storage_ranges(), spec.pricing)
            payments, total = plan.payments, plan.charged
        d, a = self.deposit(), self.award()
        draft = ServiceDraft(spec.sender, spec.recipient, route, spec.v, d, a, payments, total)
        p_s = spec.sender_payment if spec.sender_payment is not None else d + total + 1
        p_r = spec.recipient_payment if spec.recipient_payment is not None else d + 1
        svc = self._call("sender_sign", draft, p_s, caller=spec.sender)
        if svc is None:
            raise SpecError(f"{spec.sender} cannot fund the service payment {fmt_eth(p_s)}")
        self.sid = svc.id
        self._call("recipient_sign", self.sid, p_r, caller=spec.recipient)
        self._call("setup", self.sid, caller=None)

    def sender_start(self) -> None:
        spec, svc = self.spec, self.svc
        b = spec.behavior(spec.sender)
        if b.kind in ("abstain", "skip_certificate"):
            return
        route = svc.route
        hops = [(p, self.contract.peers[p].public_key) for p in route.owners]
        self.secret = self.rng.randbytes(16)
        build = build_onion(self.secret, hops, (spec.recipient, self.keys[spec.recipient].public),
                            self.scheme, self.rng)
        commitments = [c.commitment for c in build.certificates]
        if b.kind == "fake_commitment":
            pos = b.hop if b.hop is not None else 1
            if not 1 <= pos <= len(commitments):
                raise SpecError("fake_commitment hop is out of range")
            real = commitments[pos - 1]
            fake = real
            while fake == real:
                fake = self.scheme.hash(self.rng.randbytes(self.scheme.nonce_size))
            commitments[pos - 1] = fake
        first = route.owners[0] if route.owners else spec.recipient
        channel = self.rng.randbytes(16)
        env = seal_whisper_key(channel, first, self.keys[first].public, self.scheme, self.rng)
        self._call("set_cert", self.sid, commitments, build.innermost_hash, env, caller=spec.sender)
        self.net.post(channel, build.package)
        self.forwarded.add(spec.sender)

    def _incoming_envelope(self, pos: int):
        svc = self.svc
        if pos == 1:
            return svc.sender_envelope
        rec = svc.whispers.get(pos - 1)
        return rec[1] if rec else None

    def receive(self, who: str, pos: int) -> None:
        svc, spec = self.svc, self.spec
        b = spec.behavior(who)
        env = self._incoming_envelope(pos)
        pkg = None
        if env is not None and env.receiver == who:
            channel = open_whisper_key(env, self.keys[who].private, self.scheme)
            pkg = self.net.fetch(channel)
        if pkg is None:
            if b.kind not in ("abstain", "deny"):
                self.needs_report.add(who)
            return
        cert, inner = peel(pkg, self.keys[who].private, self.scheme)
        self.holding[who] = inner
        is_recipient = pos == svc.k + 1
        if is_recipient:
            self.received_secret = inner
        committed = svc.commitments[pos - 1] if svc.commitments else None
        if b.kind in ("abstain", "deny"):
            return
        if committed != self.scheme.hash(cert.nonce):
            self.needs_report.add(who)
            return
        if b.kind != "skip_certificate":
            self._call("verify_cert", self.sid, cert.nonce, caller=who)
        if not is_recipient and b.kind != "skip_whisper_key" and self._active():
            succ = svc.path()[pos + 1]
            channel = self.rng.randbytes(16)
            env = seal_whisper_key(channel, succ, self.keys[succ].public, self.scheme, self.rng)
            self._call("set_whisper_key", self.sid, env, caller=who)
            self.channels[who] = channel
        if b.kind != "skip_verification" and self._active():
            self._call("verification", self.sid, caller=who)

    def handoff(self, who: str) -> None:
        b = self.spec.behavior(who)
        if who not in self.holding or who in self.forwarded:
            return
        if b.forwards and who in self.channels:
            self.net.post(self.channels[who], self.holding[who])
            self.forwarded.add(who)
            cost = self.spec.costs.get(who, 0)
            if cost:
                src, dst = self.contract.account(who), self.contract.account(NETWORK)
                self.contract.external(self.hour, "service_cost", who,
                                       lambda led: led.transfer(src, dst, cost), "store and forward")
        elif b.gains_value:
            self._credit(who, "withheld package")

    def leak(self, who: str) -> None:
        b = self.spec.behavior(who)
        inner = self.holding.get(who)
        if not isinstance(inner, OnionPackage):
            return
        self.leaked[b.target] = inner.ciphertext
        if b.beneficiary is not None or b.gains_value:
            self._credit(b.beneficiary or who, f"early release by {who}")

    def report_release(self, who: str) -> None:
        if self.spec.behavior(who).report != "always" or who not in self.leaked:
            return
        if self._call("release_report", self.sid, self.leaked.pop(who), caller=who) is not None:
            self._call("release_award", self.sid, caller=who)

    def report_drop(self, who: str, pos: int) -> None:
        svc, b = self.svc, self.spec.behavior(who)
        pred = svc.path()[pos - 1]
        if b.kind == "deny":
            pass
        elif who not in self.needs_report or b.report != "always":
            return
        elif not self._predecessor_clean(pos - 1):
            return
        if self._call("drop_report", self.sid, pred, caller=who) is not None:
            self._call("drop_award", self.sid, caller=who)
            if b.kind == "deny" and b.gains_value and who in self.holding:
                self._credit(who, "withheld package")

    def _predecessor_clean(self, pos: int) -> bool:
        svc = self.svc
        if pos == 0:
            return svc.commitments is not None
        sch = svc.schedule[pos - 1]
        return svc.item_ok(pos, sch.d1, "cert") and svc.item_ok(pos, sch.d2, "whisper")

    # -- main loop ----------------------------------------------------------------

    def run(self) -> RunResult:
        spec = self.spec
        initial = {n: self.contract.ledger.holdings(n) for n in spec.participants()}
        queue: list[tuple[int, int, int, int, str, Any]] = []

        def at(hour: int, phase: int, order: int, action: str, arg: Any = None) -> None:
            heapq.heappush(queue, (hour, phase, order, self._seq(), action, arg))

        at(spec.registration_hour, SETUP, 0, "register")
        if spec.run_service:
            at(spec.start_hour, SETUP, 1, "setup")
        for i, t in enumerate(spec.transfers):
            at(t.hour, SETUP, 2 + i, "transfer", t)

        while queue:
            self.hour, self.phase, _, _, action, arg = heapq.heappop(queue)
            if action == "register":
                self.register()
            elif action == "transfer":
                src, dst = self.contract.account(arg.src), self.contract.account(arg.dst)
                self.contract.external(self.hour, "side_payment", arg.src,
                                       lambda led: led.transfer(src, dst, arg.amount), f"to {arg.dst}")
            elif action == "setup":
                self.setup()
                if self._active():
                    for item in self._service_agenda():
                        at(*item)
            elif not self._active():
                continue
            elif action == "sender":
                self.sender_start()
            elif action == "handoff":
                self.handoff(arg)
            elif action == "receive":
                self.receive(*arg)
            elif action == "leak":
                self.leak(arg)
            elif action == "report_release":
                self.report_release(arg)
            elif action == "report_drop":
                self.report_drop(*arg)
            elif action == "verify":
                self._call("verification", self.sid, caller=None)
        return self._result(initial)

    def _seq(self) -> int:
        self._counter += 1
        return self._counter

    def _service_agenda(self):
        spec, svc = self.spec, self.svc
        path = svc.path()
        route = svc.route
        a = route.handoff_starts()
        T = spec.transfer_hours
        yield spec.t_s, SENDER, 0, "sender", None
        for pos in range(1, svc.k + 2):
            who = path[pos]
            yield a[pos - 1], SUBMIT, pos, "receive", (who, pos)
            d1 = svc.schedule[pos - 1].d1 if pos <= svc.k else svc.recipient_deadline
            yield d1 - 1, REPORT, 100 + pos, "report_drop", (who, pos)
            if pos <= svc.k:
                yield a[pos], HANDOFF, pos, "handoff", who
        for name in spec.participants():
            b = spec.behavior(name)
            if b.kind == "release_ahead":
                yield b.hour, REPORT, 0, "leak", name
                order = path.index(b.target) if b.target in path else len(path)
                yield b.hour, REPORT, 1 + order, "report_release", b.target
        if spec.auto_verify:
            deadlines = {svc.commit_deadline, svc.recipient_deadline}
            for sch in svc.schedule:
                deadlines.update(sch)
            for h in sorted(deadlines):
                yield h, VERIFY, 0, "verify", None
        else:
            yield svc.recipient_deadline, VERIFY, 0, "verify", None

    def _result(self, initial) -> RunResult:
        spec = self.spec
        led = self.contract.ledger
        svc = self.svc
        finals = {n: led.holdings(n) for n in spec.participants()}
        if not spec.run_service:
            status = "NotRun"
        else:
            status = svc.status.value
        res = RunResult(
            finals=finals,
            initial=initial,
            status=status,
            guilty=svc.guilty if svc else None,
            locked_delta=led.locked_pool,
            inflows=[(i.who.name, i.amount, i.reason) for i in led.inflows],
            route=svc.route.owners if svc else [],
            trace=self.trace,
            conserved=led.is_conserved(),
        )
        if self.record_trace:
            self._append({"type": "result", **res.summary()})
        return res


def run_scenario(spec: ScenarioSpec, record_trace: bool = True) -> RunResult:
    return _Run(spec, record_trace).run()


def replay_trace(lines: Iterable[str]) -> RunResult:
    """Check a trace's hash chain and ledger deltas, then re-run its spec and
    require the same events and finals."""
    records = []
    for n, line in enumerate(lines):
        line = line.strip()
        if not line:
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError:
            raise TraceCorrupt(f"line {n + 1} is not JSON") from None
    if not records or records[0].get("type") != "header":
        raise TraceCorrupt("trace does not start with a header")
    prev = ""
    for n, rec in enumerate(records):
        body = {k: v for k, v in rec.items() if k != "hash"}
        if rec.get("prev") != prev or _chain(prev, body) != rec.get("hash"):
            raise TraceCorrupt(f"hash chain broken at record {n}")
        prev = rec["hash"]
    try:
        spec = ScenarioSpec.from_dict(records[0]["spec"])
    except SpecError as exc:
        raise TraceCorrupt(f"header spec unreadable: {exc}") from None
    rebuilt = {n: spec.balances.get(n, 0) for n in spec.participants()}
    for rec in records[1:]:
        for name, change in rec.get("delta", {}).items():
            if name.startswith("@"):
                continue
            owner = name.split("#", 1)[0]
            if owner in rebuilt:
                rebuilt[owner] += change[0] + change[1]
    result = run_scenario(spec)
    if rebuilt != result.finals:
        raise TraceCorrupt("ledger deltas do not add up to the final balances")
    if result.trace_lines() != [json.dumps(r, sort_keys=True, separators=(",", ":")) for r in records]:
        raise TraceCorrupt("re-running the scenario gives a different trace")
    return result


# -- the five evaluation conditions --------------------------------------------------

REFERENCE_PAYMENTS = ("0.010", "0.017", "0.026", "0.035", "0.040")


def reference_spec(behaviors: Mapping[str, Behavior] | None = None, run_service: bool = True) -> ScenarioSpec:
    """Five peers, everyone holding 5 ETH, v = 3 ETH, service from hour 100 to 1100."""
    peers = tuple(f"P{i}" for i in range(1, 6))
    t_s, t_r = 100, 1100
    rel = [(0, 250), (240, 460), (450, 690), (680, 900), (890, 1010)]
    windows = {p: (TimeWindow(t_s + b, t_s + e),) for p, (b, e) in zip(peers, rel)}
    return ScenarioSpec(
        peers=peers,
        balances={n: eth(5) for n in ("S", "R", *peers)},
        v=eth(3), t_s=t_s, t_r=t_r, windows=windows,
        remuneration_override=tuple(eth(x) for x in REFERENCE_PAYMENTS),
        behaviors=dict(behaviors or {}),
        transfer_hours=5, run_service=run_service,
    )


@dataclass(frozen=True)
class Condition:
    name: str
    spec: ScenarioSpec
    expected: Mapping[str, Money]     # finals that must match exactly
    locked_delta: Money | None = None


def condition_suite() -> list[Condition]:
    e = eth
    c4_hour = 1000
    return [
        Condition("condition 1: registration only", reference_spec(run_service=False),
                  {n: e(5) for n in ("S", "P1", "P2", "P3", "P4", "P5", "R")}, 0),
        Condition("condition 2: all honest", reference_spec(),
                  {"S": e("7.872"), "P1": e("5.010"), "P2": e("5.017"), "P3": e("5.026"),
                   "P4": e("5.035"), "P5": e("5.040"), "R": e(5)}, 0),
        Condition("condition 3: P2 withholds its whisper key",
                  reference_spec({"P2": Behavior("skip_whisper_key")}),
                  {"S": e("8.489"), "P1": e("5.010"), "P2": e("4.4"), "P3": e("5.026"),
                   "P4": e("5.035"), "P5": e("5.040"), "R": e(5)}, 0),
        Condition("condition 4: P5 releases early to P1, who reports",
                  reference_spec({"P5": Behavior("release_ahead", target="P1", hour=c4_hour)}),
                  {"S": e("8.212"), "P1": e("5.310"), "P2": e("5.017"), "P3": e("5.026"),
                   "P4": e("5.035"), "P5": e("4.4"), "R": e(5)}, 0),
        Condition("condition 5: P4 drops, P5 reports the dispute",
                  reference_spec({"P4": Behavior("drop")}),
                  {"S": e("1.347"), "P1": e("5.010"), "P2": e("5.017"), "P3": e("5.026"),
                   "P4": e("4.4"), "P5": e("1.7"), "R": e(5)}, e("10.5")),
    ]


def check_condition(cond: Condition, result: RunResult | None = None) -> list[str]:
    """Mismatch descriptions; empty when the run reproduces the expectation."""
    result = result or run_scenario(cond.spec, record_trace=False)
    problems = []
    for who, want in cond.expected.items():
        got = result.finals[who]
        if got != want:
            problems.append(f"{who}: expected {fmt_eth(want)}, got {fmt_eth(got)}")
    if cond.locked_delta is not None and result.locked_delta != cond.locked_delta:
        problems.append(f"locked pool: expected {fmt_eth(cond.locked_delta)}, got {fmt_eth(result.locked_delta)}")
    if not result.conserved:
        problems.append("ledger not conserved")
    return problems


__all__ = ["Behavior", "Condition", "RunResult", "ScenarioSpec", "SpecError", "TraceCorrupt",
           "Transfer", "check_condition", "condition_suite", "replay_trace", "run_scenario",
           "reference_spec"]
