import random

import pytest

from timedrelease.contract import (AlreadyRegistered, BadEvidence, Contract, DepositAlreadyReleased,
                                   InsufficientBalance, MalformedSubmission, NotOnRoute, NotOwner, NotParticipant, NotSender,
                                   ServiceClosed, ServiceDraft, ServiceStatus, Submission, TooLate,
                                   UnknownService, WithdrawExceedsUnfrozen, ZeroDeposit, compute_schedule)
from timedrelease.core import AccountId, Ledger, Role, TimeWindow, eth
from timedrelease.crypto import TestScheme, WhisperEnvelope, build_onion, peel
from timedrelease.selection import RoutePlan

SCHEME = TestScheme()
D = eth("3.6")
A = eth("0.3")
PAY = (eth("0.010"), eth("0.017"))
W1, W2 = TimeWindow(0, 22), TimeWindow(18, 35)


class World:
    """A two-peer service from hour 10 to 30 with a two-hour transfer period."""

    def __init__(self, peer_deposit=eth(5), events=None):
        rng = random.Random(0)
        names = ["S", "P1", "P2", "R", "X"]
        roles = {"S": Role.SENDER, "R": Role.RECIPIENT}
        self.ids = {n: AccountId(n, roles.get(n, Role.PEER)) for n in names}
        self.c = Contract(Ledger.genesis({a: eth(5) for a in self.ids.values()}), SCHEME, on_event=events)
        self.keys = {n: SCHEME.generate_keypair(rng) for n in names}
        for p, w in (("P1", W1), ("P2", W2)):
            self.c.new_peer([w], self.keys[p].public, peer_deposit, now=0, caller=p)
        self.route = RoutePlan.from_windows([("P1", W1), ("P2", W2)], 10, 30, 2)
        self.draft = ServiceDraft("S", "R", self.route, eth(3), D, A, PAY, sum(PAY))
        self.onion = build_onion(b"secret", [(p, self.keys[p].public) for p in ("P1", "P2")],
                                 ("R", self.keys["R"].public), SCHEME, rng)

    def sign(self, sender_pay=None, recipient_pay=None):
        sp = sender_pay if sender_pay is not None else D + sum(PAY) + 1
        svc = self.c.sender_sign(self.draft, sp, now=1, caller="S")
        self.c.recipient_sign(svc.id, recipient_pay if recipient_pay is not None else D + 1, now=1, caller="R")
        return svc

    def start(self):
        svc = self.sign()
        self.c.setup(svc.id, now=2, caller=None)
        return svc

    def env(self, receiver):
        return WhisperEnvelope(receiver, b"k")

    def commit(self, sid, now=5):
        return self.c.set_cert(sid, [x.commitment for x in self.onion.certificates],
                               self.onion.innermost_hash, self.env("P1"), now=now, caller="S")

    def cert(self, sid, who, now):
        pos = ["P1", "P2", "R"].index(who)
        return self.c.verify_cert(sid, self.onion.certificates[pos].nonce, now=now, caller=who)

    def holdings(self, name):
        return self.c.ledger.holdings(name)


def run_honest(w, svc):
    c = w.c
    w.commit(svc.id)
    w.cert(svc.id, "P1", 11)
    c.set_whisper_key(svc.id, w.env("P2"), now=15, caller="P1")
    w.cert(svc.id, "P2", 19)
    c.set_whisper_key(svc.id, w.env("R"), now=28, caller="P2")
    w.cert(svc.id, "R", 31)
    return c.verification(svc.id, now=31, caller=None)


def test_schedule():
    sched, commit, rec = compute_schedule(RoutePlan.from_windows([("P1", W1), ("P2", W2)], 10, 30, 2))
    assert [tuple(s) for s in sched] == [(12, 18, 20), (20, 30, 32)]
    assert commit == 12 and rec == 32


def test_registration():
    w = World()
    assert w.c.ledger.frozen(w.ids["P1"].deposit_account()) == 0
    assert w.c.ledger.spendable(w.ids["P1"].deposit_account()) == eth(5)
    with pytest.raises(AlreadyRegistered):
        w.c.new_peer([W1], None, eth(1), now=0, caller="P1")
    with pytest.raises(ZeroDeposit):
        w.c.new_peer([W1], None, 0, now=0, caller="X")
    with pytest.raises(NotOwner):
        w.c.update_window("P1", [W2], now=0, caller="P2")


def test_setup_freezes_deposits():
    w = World()
    svc = w.start()
    assert svc.status is ServiceStatus.ACTIVE
    led = w.c.ledger
    for p in ("P1", "P2"):
        assert led.frozen(w.ids[p].deposit_account()) == D
    assert led.frozen(w.ids["S"]) == D and led.frozen(w.ids["R"]) == D
    assert led.escrow == sum(PAY)
    assert led.is_conserved()


def test_withdraw_rules():
    w = World()
    w.start()
    dep = w.ids["P1"].deposit_account()
    w.c.update_balance("P1", -eth("1.4"), now=3, caller="P1")
    assert w.c.ledger.spendable(dep) == 0 and w.c.ledger.frozen(dep) == D
    with pytest.raises(WithdrawExceedsUnfrozen):
        w.c.update_balance("P1", -1, now=3, caller="P1")


def test_rejections_refund():
    w = World(peer_deposit=eth("3.5"))
    before = w.c.ledger
    svc = w.sign()
    w.c.setup(svc.id, now=2, caller=None)
    assert svc.status is ServiceStatus.REJECTED
    assert w.c.ledger.balances == before.balances


@pytest.mark.parametrize("sender_pay,recipient_pay", [(D + sum(PAY), D + 1), (D + sum(PAY) + 1, D)])
def test_payment_threshold_is_strict(sender_pay, recipient_pay):
    w = World()
    svc = w.sign(sender_pay, recipient_pay)
    w.c.setup(svc.id, now=2, caller=None)
    assert svc.status is ServiceStatus.REJECTED


def test_missing_recipient_signature():
    w = World()
    svc = w.c.sender_sign(w.draft, D + sum(PAY) + 1, now=1, caller="S")
    w.c.setup(svc.id, now=2, caller=None)
    assert svc.status is ServiceStatus.REJECTED and svc.outcome == "MissingSignature"
    assert w.holdings("S") == eth(5)
    with pytest.raises(UnknownService):
        w.c.recipient_sign(99, D + 1, now=1, caller="R")
    with pytest.raises(NotSender):
        w.c.sender_sign(w.draft, 1, now=1, caller="R")


def test_signers_must_afford_their_payment():
    w = World()
    with pytest.raises(InsufficientBalance):
        w.c.sender_sign(w.draft, eth(6), now=1, caller="S")
    svc = w.c.sender_sign(w.draft, D + sum(PAY) + 1, now=1, caller="S")
    with pytest.raises(InsufficientBalance):
        w.c.recipient_sign(svc.id, eth(6), now=1, caller="R")
    w.c.setup(svc.id, now=2, caller=None)
    assert svc.status is ServiceStatus.REJECTED and w.holdings("S") == eth(5)


def test_honest_run_pays_everyone():
    w = World()
    svc = w.start()
    assert run_honest(w, svc) is True
    assert svc.status is ServiceStatus.COMPLETED
    assert w.holdings("P1") == eth(5) + PAY[0]
    assert w.holdings("P2") == eth(5) + PAY[1]
    assert w.holdings("R") == eth(5)
    assert w.holdings("S") == eth(5) - sum(PAY) + eth(3)
    assert w.c.ledger.escrow == 0 and w.c.ledger.is_conserved()
    with pytest.raises(ServiceClosed):
        w.c.verification(svc.id, now=32, caller=None)


def test_progressive_release():
    w = World()
    svc = w.start()
    w.commit(svc.id)
    w.cert(svc.id, "P1", 11)
    w.c.set_whisper_key(svc.id, w.env("P2"), now=15, caller="P1")
    w.cert(svc.id, "P2", 19)
    assert w.c.verification(svc.id, now=19, caller="P2") is True
    assert svc.released == {1}
    assert w.holdings("P1") == eth(5) + PAY[0]


def test_wrong_commitment_count():
    w = World()
    svc = w.start()
    with pytest.raises(MalformedSubmission):
        w.c.set_cert(svc.id, [b"\x00\x01"], b"", w.env("P1"), now=5, caller="S")


def test_missing_commitments_sender_guilty():
    w = World()
    svc = w.start()
    assert w.c.verification(svc.id, now=11, caller=None) is True   # nothing due yet
    assert w.c.verification(svc.id, now=12, caller=None) is False
    assert svc.guilty == "S" and svc.status is ServiceStatus.TERMINATED_GUILTY
    assert w.c.ledger.locked_pool == D
    assert w.holdings("P1") == eth(5) + PAY[0]
    assert w.holdings("S") == eth(5) - D - sum(PAY)


def test_hash_mismatch_and_late():
    w = World()
    svc = w.start()
    w.commit(svc.id)
    nonce_r = w.onion.certificates[2].nonce
    assert w.c.verify_cert(svc.id, nonce_r, now=11, caller="P1") is Submission.HASH_MISMATCH
    assert w.cert(svc.id, "P1", 12) is Submission.LATE
    assert w.c.verification(svc.id, now=12, caller=None) is False
    assert svc.guilty == "P1"
    # guilty peer's deposit goes to the sender
    assert w.holdings("P1") == eth(5) - D
    assert w.holdings("S") == eth(5) - sum(PAY) + D + PAY[0]


def test_skipped_whisper_key_blames_that_peer():
    w = World()
    svc = w.start()
    w.commit(svc.id)
    w.cert(svc.id, "P1", 11)
    assert w.c.verification(svc.id, now=18, caller=None) is False
    assert svc.guilty == "P1"


def test_release_report():
    w = World()
    svc = w.start()
    w.commit(svc.id)
    with pytest.raises(BadEvidence):
        w.c.release_report(svc.id, b"random bytes", now=20, caller="X")
    assert svc.status is ServiceStatus.ACTIVE
    with pytest.raises(TooLate):
        w.c.release_report(svc.id, b"x", now=30, caller="X")
    # find the recipient-only ciphertext by peeling the two peer layers
    _, pkg = peel(w.onion.package, w.keys["P1"].private, SCHEME)
    _, pkg = peel(pkg, w.keys["P2"].private, SCHEME)
    inner = pkg.ciphertext
    w.c.release_report(svc.id, inner, now=20, caller="X")
    assert svc.guilty == "P2" and svc.status is ServiceStatus.TERMINATED_GUILTY
    assert w.c.release_award(svc.id, now=21, caller="X") == A
    assert w.holdings("X") == eth(5) + A
    assert w.holdings("S") == eth(5) - sum(PAY) + (D - A) + PAY[1]
    assert w.holdings("P2") == eth(5) - D
    assert w.c.ledger.escrow == 0 and w.c.ledger.is_conserved()


def test_drop_report():
    w = World()
    svc = w.start()
    w.commit(svc.id)
    w.cert(svc.id, "P1", 11)
    with pytest.raises(NotOnRoute):
        w.c.drop_report(svc.id, "P1", now=19, caller="R")
    w.c.drop_report(svc.id, "P1", now=19, caller="P2")
    assert svc.status is ServiceStatus.DISPUTE_CLOSED
    assert w.c.ledger.locked_pool == 3 * D - A
    w.c.drop_award(svc.id, now=19, caller="P2")
    assert w.holdings("P2") == eth(5) - D + A
    assert w.holdings("R") == eth(5)
    assert w.c.ledger.escrow == 0 and w.c.ledger.is_conserved()
    with pytest.raises(ServiceClosed):
        w.c.drop_report(svc.id, "P1", now=19, caller="P2")


def test_drop_report_after_release():
    w = World()
    svc = w.start()
    w.commit(svc.id)
    w.cert(svc.id, "P1", 11)
    w.c.set_whisper_key(svc.id, w.env("P2"), now=15, caller="P1")
    w.cert(svc.id, "P2", 19)
    w.c.verification(svc.id, now=19, caller=None)
    with pytest.raises(DepositAlreadyReleased):
        w.c.drop_report(svc.id, "P1", now=20, caller="P2")


def test_outsider_cannot_verify():
    w = World()
    svc = w.start()
    with pytest.raises(NotParticipant):
        w.c.verification(svc.id, now=5, caller="X")


def test_shrunk_window_keeps_assignment():
    w = World()
    svc = w.start()
    w.c.update_window("P2", [TimeWindow(100, 110)], now=3, caller="P2")
    assert w.c.peers["P2"].windows == [TimeWindow(100, 110)]
    assert (svc.id, w.route.hops[1].segment) in w.c.peers["P2"].assignments
    w.commit(svc.id)
    w.cert(svc.id, "P1", 11)
    w.c.set_whisper_key(svc.id, w.env("P2"), now=15, caller="P1")
    assert w.c.verification(svc.id, now=20, caller=None) is False
    assert svc.guilty == "P2"


def test_event_log_records_every_call():
    events = []
    w = World(events=events.append)
    svc = w.start()
    run_honest(w, svc)
    names = [e["function"] for e in events]
    assert names[:2] == ["new_peer", "new_peer"]
    assert names[-1] == "verification"
    last = events[-1]
    assert last["status_before"] == "Active" and last["status_after"] == "Completed"
    assert set(last) >= {"time", "function", "caller", "args", "delta"}
    with pytest.raises(ServiceClosed):
        w.c.set_cert(svc.id, [], b"", w.env("P1"), now=40, caller="S")
    assert events[-1]["error"] == "ServiceClosed" and events[-1]["delta"] == {}
