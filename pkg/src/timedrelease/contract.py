"""The enforcement contract as a single serialized state machine.

Every public call takes the logical hour ``now`` and the ``caller`` name,
validates before touching state, and emits one event record (time, function,
caller, args digest, status before/after, ledger delta) to ``on_event``.

Path positions: 0 is the sender, 1..k are the route peers and k+1 is the
recipient. Deadlines for peer ``i`` with handoff hours ``a_i`` (``a_1 = t_s``,
``a_{k+1} = t_r``)::

    d_1 = min(a_i + T_t, a_{i+1})    certificate
    d_2 = a_{i+1}                    whisper key for the successor
    d_3 = a_{i+1} + T_t              handoff

The sender's commitments are due by ``d_1`` of the first peer (``t_r + T_t``
when there are no peers) and the recipient's certificate by ``t_r + T_t``.
A submission counts only if made strictly before its deadline.

When a verification finds failed items, the participant earliest on the path
among them is judged guilty: a missing certificate downstream of a missing
whisper key is a consequence, not a second fault.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

from .core import AccountId, Ledger, Money, TimeWindow, fmt_eth
from .crypto import PublicKey, Scheme, WhisperEnvelope, verify_certificate
from .selection import RoutePlan


class ContractError(Exception):
    pass


class AlreadyRegistered(ContractError):
    pass


class ZeroDeposit(ContractError):
    pass


class NotRegistered(ContractError):
    pass


class NotOwner(ContractError):
    pass


class WithdrawExceedsUnfrozen(ContractError):
    pass


class InsufficientBalance(ContractError):
    pass


class UnknownService(ContractError):
    pass


class NotSender(ContractError):
    pass


class NotParticipant(ContractError):
    pass


class MalformedSubmission(ContractError):
    pass


class ServiceClosed(ContractError):
    """The service is not Active (or not Proposed, for setup)."""


class NotOnRoute(ContractError):
    pass


class DepositAlreadyReleased(ContractError):
    pass


class BadEvidence(ContractError):
    pass


class TooLate(ContractError):
    pass


class NoPendingAward(ContractError):
    pass


class ServiceStatus(str, enum.Enum):
    PROPOSED = "Proposed"
    ACTIVE = "Active"
    COMPLETED = "Completed"
    TERMINATED_GUILTY = "TerminatedGuilty"
    DISPUTE_CLOSED = "DisputeClosed"
    REJECTED = "Rejected"

    @property
    def terminal(self) -> bool:
        return self not in (ServiceStatus.PROPOSED, ServiceStatus.ACTIVE)


class Submission(str, enum.Enum):
    ACCEPTED = "accepted"
    HASH_MISMATCH = "hash_mismatch"
    LATE = "late"


class HopSchedule(NamedTuple):
    d1: int
    d2: int
    d3: int


@dataclass
class PeerRecord:
    account: AccountId
    windows: list[TimeWindow]
    public_key: PublicKey | None
    registered_at: int
    # (service id, segment) pairs that stay enforced whatever the window list says
    assignments: list[tuple[int, TimeWindow]] = field(default_factory=list)

    @property
    def deposit_account(self) -> AccountId:
        return self.account.deposit_account()


@dataclass(frozen=True)
class ServiceDraft:
    sender: str
    recipient: str
    route: RoutePlan
    v: Money
    deposit: Money
    award: Money
    payments: tuple[Money, ...]
    remuneration: Money          # r-hat, at least sum(payments)

    def __post_init__(self):
        if len(self.payments) != len(self.route):
            raise ValueError("one payment per route hop")
        if self.remuneration < sum(self.payments):
            raise ValueError("remuneration does not cover the per-hop payments")
        if self.deposit <= 0 or self.award < 0 or self.v < 0:
            raise ValueError("deposit must be positive, award and value non-negative")
        if self.award > self.deposit:
            raise ValueError("award cannot exceed one deposit")


@dataclass
class Service:
    id: int
    draft: ServiceDraft
    status: ServiceStatus = ServiceStatus.PROPOSED
    sender_payment: Money = 0
    recipient_payment: Money | None = None
    escrow: Money = 0
    schedule: tuple[HopSchedule, ...] = ()
    commit_deadline: int = 0
    recipient_deadline: int = 0
    commitments: tuple[bytes, ...] | None = None
    commit_time: int | None = None
    innermost_hash: bytes | None = None
    sender_envelope: WhisperEnvelope | None = None
    certs: dict = field(default_factory=dict)      # position -> (time, valid)
    whispers: dict = field(default_factory=dict)   # position -> (time, envelope)
    released: set = field(default_factory=set)     # peer positions already unfrozen and paid
    guilty: str | None = None
    outcome: str = ""
    pending_award: tuple[str, Money] | None = None
    award_kind: str | None = None

    # -- route helpers -----------------------------------------------------

    @property
    def route(self) -> RoutePlan:
        return self.draft.route

    @property
    def k(self) -> int:
        return len(self.draft.route)

    def path(self) -> list[str]:
        return [self.draft.sender] + self.route.owners + [self.draft.recipient]

    def position(self, who: str) -> int | None:
        path = self.path()
        return path.index(who) if who in path else None

    def items(self) -> list[tuple[int, int, str]]:
        """(position, deadline, kind) for every required submission."""
        out = [(0, self.commit_deadline, "commitments")]
        for i, sch in enumerate(self.schedule, 1):
            out.append((i, sch.d1, "cert"))
            out.append((i, sch.d2, "whisper"))
        out.append((self.k + 1, self.recipient_deadline, "cert"))
        return out

    def item_ok(self, pos: int, deadline: int, kind: str) -> bool:
        if kind == "commitments":
            return self.commit_time is not None and self.commit_time < deadline
        if kind == "cert":
            rec = self.certs.get(pos)
            return rec is not None and rec[1] and rec[0] < deadline
        rec = self.whispers.get(pos)
        return rec is not None and rec[0] < deadline and rec[1].receiver == self.path()[pos + 1]


def compute_schedule(route: RoutePlan) -> tuple[tuple[HopSchedule, ...], int, int]:
    """Per-hop deadlines plus the sender's and recipient's deadlines."""
    T = route.transfer_hours
    a = route.handoff_starts()
    sched = tuple(HopSchedule(min(a[i] + T, a[i + 1]), a[i + 1], a[i + 1] + T) for i in range(len(route)))
    recipient = route.t_r + T
    commit = sched[0].d1 if sched else recipient
    return sched, commit, recipient


def _digest(args) -> str:
    return hashlib.sha256(repr(args).encode()).hexdigest()[:16]


def _logged(fn):
    name = fn.__name__

    def wrapper(self, *args, now: int, caller: str | None, **kw):
        before = self.ledger
        service = self._services.get(args[0]) if args and isinstance(args[0], int) else None
        st_before = service.status.value if service else None
        try:
            result = fn(self, *args, now=now, caller=caller, **kw)
        except ContractError as exc:
            self._emit(now, name, caller, args, kw, st_before, st_before, {}, type(exc).__name__)
            raise
        if service is None and isinstance(result, Service):
            service = result
        st_after = service.status.value if service else None
        if self.on_event is not None:
            self._emit(now, name, caller, args, kw, st_before, st_after, self.ledger.delta(before), None)
        return result

    wrapper.__name__ = name
    wrapper.__doc__ = fn.__doc__
    return wrapper


class Contract:
    """Holds the ledger, the peer registry and all services."""

    def __init__(self, ledger: Ledger, scheme: Scheme,
                 on_event: Callable[[dict], None] | None = None):
        self.ledger = ledger
        self.scheme = scheme
        self.on_event = on_event
        self.peers: dict[str, PeerRecord] = {}
        self._services: dict[int, Service] = {}
        self._next_id = 1
        self._names: dict[str, AccountId] = {}

    # -- plumbing ----------------------------------------------------------

    def _emit(self, now, name, caller, args, kw, st_before, st_after, delta, error):
        if self.on_event is None:
            return
        rec = {"time": now, "function": name, "caller": caller,
               "args": _digest((args, sorted(kw.items()))),
               "status_before": st_before, "status_after": st_after, "delta": delta}
        if error:
            rec["error"] = error
        self.on_event(rec)

    def external(self, now: int, kind: str, caller: str | None,
                 op: Callable[[Ledger], Ledger], note: str = "") -> None:
        """Apply a ledger change that happens outside the contract (value
        realized off-chain, service costs, side payments) and log it like a
        contract call."""
        before = self.ledger
        self.ledger = op(before)
        if self.on_event is not None:
            self._emit(now, kind, caller, (note,), {}, None, None, self.ledger.delta(before), None)

    def account(self, name: str) -> AccountId:
        acct = self._names.get(name)
        if acct is None or acct not in self.ledger:
            self._names = {a.name: a for a in self.ledger.balances}
            acct = self._names.get(name)
            if acct is None:
                raise NotParticipant(f"no account named {name!r}")
        return acct

    def service(self, service_id: int) -> Service:
        try:
            return self._services[service_id]
        except KeyError:
            raise UnknownService(str(service_id)) from None

    def _active(self, service_id: int) -> Service:
        svc = self.service(service_id)
        if svc.status is not ServiceStatus.ACTIVE:
            raise ServiceClosed(f"service {service_id} is {svc.status.value}")
        return svc

    # -- registration --------------------------------------------------------

    @_logged
    def new_peer(self, windows: Sequence[TimeWindow], public_key: PublicKey | None,
                 deposit: Money, *, now: int, caller: str) -> PeerRecord:
        if caller in self.peers:
            raise AlreadyRegistered(caller)
        if deposit <= 0:
            raise ZeroDeposit(caller)
        acct = self.account(caller)
        if self.ledger.spendable(acct) < deposit:
            raise WithdrawExceedsUnfrozen(f"{caller} cannot fund a {fmt_eth(deposit)} deposit")
        rec = PeerRecord(acct, list(windows), public_key, now)
        self.ledger = self.ledger.open(rec.deposit_account).transfer(acct, rec.deposit_account, deposit)
        self.peers[caller] = rec
        return rec

    def _own_record(self, peer: str, caller: str) -> PeerRecord:
        if peer not in self.peers:
            raise NotRegistered(peer)
        if caller != peer:
            raise NotOwner(f"{caller} does not own {peer}")
        return self.peers[peer]

    @_logged
    def update_balance(self, peer: str, change: Money, *, now: int, caller: str) -> PeerRecord:
        """Top up (positive ``change``) or withdraw from the unfrozen deposit."""
        rec = self._own_record(peer, caller)
        if change >= 0:
            if self.ledger.spendable(rec.account) < change:
                raise WithdrawExceedsUnfrozen(f"{peer} cannot add {fmt_eth(change)}")
            self.ledger = self.ledger.transfer(rec.account, rec.deposit_account, change)
        else:
            if self.ledger.spendable(rec.deposit_account) < -change:
                raise WithdrawExceedsUnfrozen(
                    f"{peer} has {fmt_eth(self.ledger.spendable(rec.deposit_account))} unfrozen")
            self.ledger = self.ledger.transfer(rec.deposit_account, rec.account, -change)
        return rec

    @_logged
    def update_window(self, peer: str, windows: Sequence[TimeWindow], *, now: int, caller: str) -> PeerRecord:
        rec = self._own_record(peer, caller)
        rec.windows = list(windows)
        return rec

    @_logged
    def update_pub_key(self, peer: str, public_key: PublicKey, *, now: int, caller: str) -> PeerRecord:
        rec = self._own_record(peer, caller)
        rec.public_key = public_key
        return rec

    # -- setup ---------------------------------------------------------------

    def _check_funds(self, who: str, payment: Money) -> None:
        if payment < 0:
            raise MalformedSubmission("payment must be non-negative")
        if self.ledger.spendable(self.account(who)) < payment:
            raise InsufficientBalance(f"{who} cannot pay {fmt_eth(payment)}")

    @_logged
    def sender_sign(self, draft: ServiceDraft, payment: Money, *, now: int, caller: str) -> Service:
        if caller != draft.sender:
            raise NotSender(caller)
        self.account(draft.recipient)
        self._check_funds(caller, payment)
        self.ledger = self.ledger.escrow_in(self.account(caller), payment)
        svc = Service(self._next_id, draft, sender_payment=payment, escrow=payment)
        self._services[svc.id] = svc
        self._next_id += 1
        return svc

    @_logged
    def recipient_sign(self, service_id: int, payment: Money, *, now: int, caller: str) -> Service:
        svc = self.service(service_id)
        if svc.status is not ServiceStatus.PROPOSED:
            raise ServiceClosed(f"service {service_id} is {svc.status.value}")
        if caller != svc.draft.recipient:
            raise NotParticipant(f"{caller} is not the recipient")
        if svc.recipient_payment is not None:
            raise MalformedSubmission("recipient already signed")
        self._check_funds(caller, payment)
        self.ledger = self.ledger.escrow_in(self.account(caller), payment)
        svc.recipient_payment = payment
        svc.escrow += payment
        return svc

    def _reject(self, svc: Service, reason: str) -> Service:
        led = self.ledger.escrow_out(self.account(svc.draft.sender), svc.sender_payment)
        if svc.recipient_payment:
            led = led.escrow_out(self.account(svc.draft.recipient), svc.recipient_payment)
        self.ledger = led
        svc.escrow = 0
        svc.status = ServiceStatus.REJECTED
        svc.outcome = reason
        return svc

    @_logged
    def setup(self, service_id: int, *, now: int, caller: str | None) -> Service:
        """Freeze deposits and hold the remuneration, or reject with full refunds."""
        svc = self.service(service_id)
        if svc.status is not ServiceStatus.PROPOSED:
            raise ServiceClosed(f"service {service_id} is {svc.status.value}")
        dr = svc.draft
        d = dr.deposit
        if svc.recipient_payment is None:
            return self._reject(svc, "MissingSignature")
        if now > dr.route.t_s:
            return self._reject(svc, "setup after the storage window opened")
        if not svc.sender_payment > d + dr.remuneration:
            return self._reject(svc, "InsufficientPayment: sender")
        if not svc.recipient_payment > d:
            return self._reject(svc, "InsufficientPayment: recipient")
        for owner in dr.route.owners:
            rec = self.peers.get(owner)
            if rec is None:
                return self._reject(svc, f"{owner} is not a registered peer")
            if self.ledger.spendable(rec.deposit_account) < d:
                return self._reject(svc, f"{owner} has too little unfrozen deposit")
        sender, recipient = self.account(dr.sender), self.account(dr.recipient)
        led = self.ledger
        for owner in dr.route.owners:
            led = led.freeze(self.peers[owner].deposit_account, d)
        led = led.escrow_to_frozen(sender, d).escrow_to_frozen(recipient, d)
        led = led.escrow_out(sender, svc.sender_payment - d - dr.remuneration)
        led = led.escrow_out(recipient, svc.recipient_payment - d)
        self.ledger = led
        svc.escrow = dr.remuneration
        for hop in dr.route.hops:
            self.peers[hop.owner].assignments.append((svc.id, hop.segment))
        svc.schedule, svc.commit_deadline, svc.recipient_deadline = compute_schedule(dr.route)
        svc.status = ServiceStatus.ACTIVE
        return svc

    # -- enforcement -----------------------------------------------------------

    @_logged
    def set_cert(self, service_id: int, commitments: Sequence[bytes], innermost_hash: bytes,
                 envelope: WhisperEnvelope, *, now: int, caller: str) -> Submission:
        svc = self._active(service_id)
        if caller != svc.draft.sender:
            raise NotSender(caller)
        if svc.commitments is not None:
            raise MalformedSubmission("commitments already set")
        if len(commitments) != svc.k + 1:
            raise MalformedSubmission(f"expected {svc.k + 1} commitments, got {len(commitments)}")
        svc.commitments = tuple(commitments)
        svc.innermost_hash = innermost_hash
        svc.sender_envelope = envelope
        svc.commit_time = now
        return Submission.ACCEPTED if now < svc.commit_deadline else Submission.LATE

    def _deadline(self, svc: Service, pos: int, kind: str) -> int:
        if pos == svc.k + 1:
            return svc.recipient_deadline
        return svc.schedule[pos - 1].d1 if kind == "cert" else svc.schedule[pos - 1].d2

    @_logged
    def verify_cert(self, service_id: int, nonce: bytes, *, now: int, caller: str) -> Submission:
        svc = self._active(service_id)
        pos = svc.position(caller)
        if not pos:
            raise NotParticipant(f"{caller} holds no certificate in service {service_id}")
        prev = svc.certs.get(pos)
        if prev is not None and prev[1]:
            raise MalformedSubmission("certificate already verified")
        valid = (svc.commitments is not None
                 and verify_certificate(nonce, svc.commitments[pos - 1], self.scheme))
        svc.certs[pos] = (now, valid)
        if not valid:
            return Submission.HASH_MISMATCH
        return Submission.ACCEPTED if now < self._deadline(svc, pos, "cert") else Submission.LATE

    @_logged
    def set_whisper_key(self, service_id: int, envelope: WhisperEnvelope, *,
                        now: int, caller: str) -> Submission:
        svc = self._active(service_id)
        pos = svc.position(caller)
        if not pos or pos > svc.k:
            raise NotParticipant(f"{caller} is not a route peer of service {service_id}")
        if pos in svc.whispers:
            raise MalformedSubmission("whisper key already set")
        svc.whispers[pos] = (now, envelope)
        return Submission.ACCEPTED if now < self._deadline(svc, pos, "whisper") else Submission.LATE

    @_logged
    def verification(self, service_id: int, *, now: int, caller: str | None) -> bool:
        """True if every submission due by ``now`` was made on time and valid.

        False terminates the service against the earliest failing participant
        on the path. ``caller=None`` is the automatic check at deadline hours.
        """
        svc = self._active(service_id)
        if caller is not None and svc.position(caller) in (None, 0):
            raise NotParticipant(f"{caller} may not trigger verification")
        items = svc.items()
        failing = [pos for pos, dl, kind in items if dl <= now and not svc.item_ok(pos, dl, kind)]
        if failing:
            guilty = svc.path()[min(failing)]
            self._settle_guilty(svc, guilty)
            return False
        if all(svc.item_ok(pos, dl, kind) for pos, dl, kind in items):
            self._settle_success(svc)
            return True
        self._progressive_release(svc)
        return True

    # -- settlement ----------------------------------------------------------------

    def _release_peer(self, svc: Service, pos: int) -> None:
        rec = self.peers[svc.path()[pos]]
        pay = svc.draft.payments[pos - 1]
        self.ledger = (self.ledger.unfreeze(rec.deposit_account, svc.draft.deposit)
                       .escrow_out(rec.account, pay))
        svc.escrow -= pay
        svc.released.add(pos)

    def _progressive_release(self, svc: Service) -> None:
        """Return deposit and pay a peer once its successor's certificate checks out."""
        for pos in range(1, svc.k + 1):
            if pos in svc.released:
                continue
            sch = svc.schedule[pos - 1]
            if (svc.item_ok(pos, sch.d1, "cert") and svc.item_ok(pos, sch.d2, "whisper")
                    and svc.item_ok(pos + 1, self._deadline(svc, pos + 1, "cert"), "cert")):
                self._release_peer(svc, pos)

    def _close(self, svc: Service, excluded: set[str]) -> None:
        """Unfreeze and pay everyone not in ``excluded``; leftover escrow to the sender."""
        d = svc.draft.deposit
        path = svc.path()
        for pos in range(1, svc.k + 1):
            if pos not in svc.released and path[pos] not in excluded:
                self._release_peer(svc, pos)
        led = self.ledger
        for who in (svc.draft.sender, svc.draft.recipient):
            if who not in excluded:
                led = led.unfreeze(self.account(who), d)
        held = svc.pending_award[1] if svc.pending_award else 0
        led = led.escrow_out(self.account(svc.draft.sender), svc.escrow - held)
        self.ledger = led
        svc.escrow = held

    def _confiscate(self, svc: Service, who: str) -> None:
        acct = self.peers[who].deposit_account if who in self.peers and who in svc.route.owners \
            else self.account(who)
        if self.ledger.frozen(acct) < svc.draft.deposit:
            raise DepositAlreadyReleased(who)
        self.ledger = self.ledger.confiscate(acct, svc.draft.deposit)
        svc.escrow += svc.draft.deposit

    def _settle_guilty(self, svc: Service, guilty: str) -> None:
        self._confiscate(svc, guilty)
        d = svc.draft.deposit
        if guilty == svc.draft.sender:
            self.ledger = self.ledger.lock(d)
            svc.escrow -= d
        svc.guilty = guilty
        svc.outcome = "guilty"
        self._close(svc, {guilty})
        svc.status = ServiceStatus.TERMINATED_GUILTY

    def _settle_success(self, svc: Service) -> None:
        self._close(svc, set())
        if svc.draft.v > 0:
            self.ledger = self.ledger.record_inflow(self.account(svc.draft.sender), svc.draft.v,
                                                    f"service {svc.id} released")
        svc.outcome = "completed"
        svc.status = ServiceStatus.COMPLETED

    # -- reporting -----------------------------------------------------------------

    @_logged
    def release_report(self, service_id: int, evidence: bytes, *, now: int, caller: str) -> Service:
        """Report early release; the evidence is the recipient-only ciphertext."""
        svc = self._active(service_id)
        if now >= svc.route.t_r:
            raise TooLate(f"release reports close at hour {svc.route.t_r}")
        if svc.k == 0:
            raise NotOnRoute("no route peer holds the recipient-only ciphertext")
        if svc.innermost_hash is None or self.scheme.hash(evidence) != svc.innermost_hash:
            raise BadEvidence("evidence does not match the committed hash")
        last = svc.route.owners[-1]
        if svc.k in svc.released:
            raise DepositAlreadyReleased(last)
        self.ledger = self.ledger.open(AccountId(caller))
        self._confiscate(svc, last)
        svc.pending_award = (caller, svc.draft.award)
        svc.award_kind = "release"
        svc.guilty = last
        svc.outcome = f"release reported by {caller}"
        self._close(svc, {last})
        svc.status = ServiceStatus.TERMINATED_GUILTY
        return svc

    @_logged
    def drop_report(self, service_id: int, suspect: str, *, now: int, caller: str) -> Service:
        """The hop after ``suspect`` disputes a drop. Sender, suspect and
        reporter each lose their deposit; the reporter gets the award back and
        the rest is locked."""
        svc = self._active(service_id)
        rpos, spos = svc.position(caller), svc.position(suspect)
        if not rpos or spos is None or rpos != spos + 1:
            raise NotOnRoute(f"{caller} does not directly follow {suspect}")
        if spos in svc.released:
            raise DepositAlreadyReleased(suspect)
        implicated = list(dict.fromkeys([svc.draft.sender, suspect, caller]))
        d = svc.draft.deposit
        for who in implicated:
            acct = self.peers[who].deposit_account if who in svc.route.owners else self.account(who)
            if self.ledger.frozen(acct) < d:
                raise DepositAlreadyReleased(who)
        for who in implicated:
            self._confiscate(svc, who)
        award = svc.draft.award
        locked = len(implicated) * d - award
        self.ledger = self.ledger.lock(locked)
        svc.escrow -= locked
        svc.pending_award = (caller, award)
        svc.award_kind = "drop"
        svc.guilty = suspect
        svc.outcome = f"drop disputed by {caller}"
        self._close(svc, set(implicated))
        svc.status = ServiceStatus.DISPUTE_CLOSED
        return svc

    def _pay_award(self, service_id: int, kind: str, caller: str) -> Money:
        svc = self.service(service_id)
        if svc.pending_award is None or svc.award_kind != kind:
            raise NoPendingAward(f"no {kind} award pending on service {service_id}")
        who, amount = svc.pending_award
        if caller != who:
            raise NotParticipant(f"the award belongs to {who}")
        self.ledger = self.ledger.escrow_out(self.account(who), amount)
        svc.escrow -= amount
        svc.pending_award = None
        return amount

    @_logged
    def release_award(self, service_id: int, *, now: int, caller: str) -> Money:
        return self._pay_award(service_id, "release", caller)

    @_logged
    def drop_award(self, service_id: int, *, now: int, caller: str) -> Money:
        return self._pay_award(service_id, "drop", caller)


FUNCTIONS = ("new_peer", "update_balance", "update_window", "update_pub_key",
             "sender_sign", "recipient_sign", "setup", "set_cert", "verify_cert",
             "set_whisper_key", "verification", "release_report", "release_award",
             "drop_report", "drop_award")

