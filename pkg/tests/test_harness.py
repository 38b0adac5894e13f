import json

import pytest

from timedrelease.core import eth
from timedrelease.harness import (KINDS, Behavior, ScenarioSpec, SpecError, TraceCorrupt, Transfer,
                                  check_condition, condition_suite, reference_spec, replay_trace,
                                  run_scenario)

PEERS = ("P1", "P2", "P3", "P4", "P5")


@pytest.mark.parametrize("cond", condition_suite(), ids=lambda c: c.name.split(":")[0])
def test_reference_conditions(cond):
    assert check_condition(cond) == []


def test_honest_run_details():
    res = run_scenario(reference_spec())
    assert res.status == "Completed" and res.guilty is None
    assert res.route == list(PEERS)
    assert res.inflows == [("S", eth(3), "service 1 released")]
    assert res.conserved


def test_runs_are_deterministic():
    spec = reference_spec({"P3": Behavior("drop")})
    assert run_scenario(spec).trace_lines() == run_scenario(spec).trace_lines()


def test_trace_replays_and_detects_tampering():
    lines = run_scenario(reference_spec({"P2": Behavior("skip_whisper_key")})).trace_lines()
    assert replay_trace(lines).finals["P2"] == eth("4.4")
    # change one ledger delta
    recs = [json.loads(x) for x in lines]
    for rec in recs:
        if rec.get("delta"):
            name = next(iter(rec["delta"]))
            if isinstance(rec["delta"][name], list):
                rec["delta"][name][0] += 1
                break
    with pytest.raises(TraceCorrupt):
        replay_trace([json.dumps(r) for r in recs])
    with pytest.raises(TraceCorrupt):
        replay_trace(lines[1:])
    with pytest.raises(TraceCorrupt):
        replay_trace(lines[:3] + ["{not json"])


def test_trace_records_carry_phase_and_chain():
    res = run_scenario(reference_spec())
    header, *events, result = res.trace
    assert header["type"] == "header" and result["type"] == "result"
    assert all(e["prev"] for e in events)
    assert {e["phase"] for e in events} >= {"SETUP", "SENDER", "SUBMIT", "VERIFY"}
    costly = run_scenario(ScenarioSpec.from_dict({**reference_spec().to_dict(), "costs_eth": {"P1": "0.001"}}))
    assert "HANDOFF" in {e.get("phase") for e in costly.trace}


def test_json_round_trip():
    spec = reference_spec({"P5": Behavior("release_ahead", target="P1", hour=1000)})
    again = ScenarioSpec.from_json(spec.to_json())
    assert again == spec
    assert run_scenario(again).finals == run_scenario(spec).finals


@pytest.mark.parametrize("bad", [
    {"v_eth": "3"},                                                        # no participants
    {"participants": {"peers": ["P1"]}, "v_eth": "3", "t_s": 5, "t_r": 1},
    {"participants": {}, "v_eth": "3", "t_s": 1, "t_r": 5, "colour": "red"},
    {"participants": {}, "v_eth": "3", "t_s": 1, "t_r": 5, "behaviors": {"Q": {"kind": "drop"}}},
    {"participants": {"peers": ["P1"]}, "v_eth": "3", "t_s": 1, "t_r": 5,
     "behaviors": {"P1": {"kind": "teleport"}}},
    {"participants": {}, "v_eth": "3", "t_s": 1, "t_r": 5, "scheme": "rsa"},
])
def test_bad_specs(bad):
    with pytest.raises(SpecError):
        ScenarioSpec.from_json(json.dumps(bad))


def test_release_ahead_needs_target():
    with pytest.raises(SpecError):
        Behavior("release_ahead")


def test_real_scheme_matches_test_scheme():
    spec = reference_spec({"P3": Behavior("skip_certificate")})
    real = ScenarioSpec.from_dict({**spec.to_dict(), "scheme": "real"})
    assert run_scenario(real, record_trace=False).finals == run_scenario(spec, record_trace=False).finals


def test_side_payments_and_costs():
    base = reference_spec()
    spec = ScenarioSpec.from_dict({**base.to_dict(),
                                   "costs_eth": {"P1": "0.001"},
                                   "transfers": [{"hour": 100, "from": "R", "to": "P2", "amount_eth": "0.5"}]})
    res = run_scenario(spec)
    assert res.finals["P1"] == eth("5.009")
    assert res.finals["P2"] == eth("5.517") and res.finals["R"] == eth("4.5")
    assert res.conserved


FAULTS = ["drop", "skip_certificate", "skip_whisper_key", "abstain", "deny"]


@pytest.mark.parametrize("kind", FAULTS)
@pytest.mark.parametrize("who", PEERS)
def test_misbehaving_peer_strictly_loses(kind, who):
    honest = run_scenario(reference_spec(), record_trace=False)
    res = run_scenario(reference_spec({who: Behavior(kind)}), record_trace=False)
    assert res.conserved
    assert res.payoff(who) < honest.payoff(who)
    assert res.status != "Completed"


@pytest.mark.parametrize("kind", FAULTS)
@pytest.mark.parametrize("who", PEERS)
def test_innocents_never_lose(kind, who):
    res = run_scenario(reference_spec({who: Behavior(kind)}), record_trace=False)
    implicated = {who}
    if res.status == "DisputeClosed":
        # sender, suspect and reporter all put their deposits on the line
        path = ["S", *PEERS, "R"]
        implicated |= {"S", res.guilty, path[path.index(res.guilty) + 1]}
    for name in ("S", *PEERS, "R"):
        if name not in implicated:
            assert res.payoff(name) >= 0, (name, res.summary())


def test_missing_commitments_blame_sender():
    res = run_scenario(reference_spec({"S": Behavior("abstain")}), record_trace=False)
    assert res.guilty == "S" and res.status == "TerminatedGuilty"
    assert res.locked_delta == eth("3.6")
    for p in PEERS:
        assert res.payoff(p) > 0


def test_fake_commitment_ends_in_dispute():
    honest = run_scenario(reference_spec(), record_trace=False)
    res = run_scenario(reference_spec({"S": Behavior("fake_commitment", hop=2)}), record_trace=False)
    assert res.status == "DisputeClosed" and res.guilty == "P1"
    assert res.payoff("S") < honest.payoff("S")
    assert res.locked_delta == 3 * eth("3.6") - eth("0.3")


def test_skipped_verification_is_harmless():
    res = run_scenario(reference_spec({"P2": Behavior("skip_verification")}), record_trace=False)
    assert res.status == "Completed"


def test_every_behavior_kind_conserves():
    for kind in KINDS:
        who = "P3"
        if kind == "release_ahead":
            b, who = Behavior(kind, target="P1", hour=900), "P5"
        elif kind == "fake_commitment":
            b, who = Behavior(kind, hop=1), "S"
        else:
            b = Behavior(kind)
        assert run_scenario(reference_spec({who: b}), record_trace=False).conserved


def test_silent_reporter_lets_leak_pass():
    spec = reference_spec({"P5": Behavior("release_ahead", target="P1", hour=1000),
                           "P1": Behavior("honest", report="never")})
    res = run_scenario(spec, record_trace=False)
    assert res.status == "Completed"
    assert res.finals["P5"] == eth("5.040") + eth(3)


def test_registration_only():
    res = run_scenario(reference_spec(run_service=False))
    assert res.status == "NotRun"
    assert all(v == eth(5) for v in res.finals.values())


def test_transfer_to_unknown_account_rejected():
    with pytest.raises(SpecError):
        ScenarioSpec(peers=(), balances={}, v=1, t_s=1, t_r=5, windows={},
                     transfers=(Transfer(1, "S", "Z", 1),))


def test_direct_service_without_peers():
    spec = ScenarioSpec(peers=(), balances={"S": eth(5), "R": eth(5)}, v=eth(3), t_s=10, t_r=50,
                        windows={}, route=())
    res = run_scenario(spec)
    assert res.status == "Completed" and res.route == []
    assert res.finals == {"S": eth(8), "R": eth(5)}


def test_removed_event_detected():
    lines = run_scenario(reference_spec()).trace_lines()
    with pytest.raises(TraceCorrupt):
        replay_trace(lines[:10] + lines[11:])
