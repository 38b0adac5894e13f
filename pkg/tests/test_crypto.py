import random

import pytest
from hypothesis import given, settings, strategies as st

from timedrelease.crypto import (DecryptFailure, OnionPackage, RealScheme, TestScheme, WhisperNetwork,
                                 build_onion, get_scheme, make_certificates, mix16, open_whisper_key,
                                 peel, seal_whisper_key, verify_certificate)

SCHEMES = [TestScheme(), RealScheme()]


def keys(scheme, names, rng):
    return {n: scheme.generate_keypair(rng) for n in names}


def peel_all(pkg, order, kp, scheme):
    certs = []
    cur = pkg
    for name in order:
        cert, cur = peel(cur, kp[name].private, scheme)
        certs.append(cert)
    return certs, cur


@pytest.mark.parametrize("scheme", SCHEMES, ids=lambda s: s.tag)
def test_empty_route_single_layer(scheme):
    rng = random.Random(1)
    kp = keys(scheme, ["R"], rng)
    build = build_onion(b"secret", [], ("R", kp["R"].public), scheme, rng)
    assert build.innermost_hash == scheme.hash(build.package.ciphertext)
    cert, out = peel(build.package, kp["R"].private, scheme)
    assert out == b"secret" and cert.holder == "R"


@pytest.mark.parametrize("scheme", SCHEMES, ids=lambda s: s.tag)
def test_three_hop_round_trip(scheme):
    rng = random.Random(2)
    names = ["P1", "P2", "P3", "R"]
    kp = keys(scheme, names, rng)
    build = build_onion(b"k" * 16, [(n, kp[n].public) for n in names[:3]], ("R", kp["R"].public), scheme, rng)
    certs, out = peel_all(build.package, names, kp, scheme)
    assert out == b"k" * 16
    assert [c.holder for c in certs] == names
    for got, published in zip(certs, build.certificates):
        assert got == published
        assert verify_certificate(got.nonce, published.commitment, scheme)


@pytest.mark.parametrize("scheme", SCHEMES, ids=lambda s: s.tag)
def test_innermost_layer_matches_commitment(scheme):
    rng = random.Random(3)
    names = ["P1", "P2", "R"]
    kp = keys(scheme, names, rng)
    build = build_onion(b"xyz", [(n, kp[n].public) for n in names[:2]], ("R", kp["R"].public), scheme, rng)
    _, inner = peel_all(build.package, names[:2], kp, scheme)
    assert scheme.hash(inner.ciphertext) == build.innermost_hash


@pytest.mark.parametrize("scheme", SCHEMES, ids=lambda s: s.tag)
def test_wrong_key_and_out_of_order(scheme):
    rng = random.Random(4)
    names = ["P1", "P2", "R"]
    kp = keys(scheme, names + ["X"], rng)
    build = build_onion(b"abc", [(n, kp[n].public) for n in names[:2]], ("R", kp["R"].public), scheme, rng)
    with pytest.raises(DecryptFailure):
        peel(build.package, kp["P2"].private, scheme)
    with pytest.raises(DecryptFailure):
        peel(build.package, kp["X"].private, scheme)


@pytest.mark.parametrize("scheme", SCHEMES, ids=lambda s: s.tag)
def test_bit_flip_detected(scheme):
    rng = random.Random(5)
    kp = keys(scheme, ["R"], rng)
    build = build_onion(b"abc", [], ("R", kp["R"].public), scheme, rng)
    ct = bytearray(build.package.ciphertext)
    ct[-1] ^= 1
    with pytest.raises(DecryptFailure):
        peel(OnionPackage(scheme.tag, bytes(ct)), kp["R"].private, scheme)


def test_package_scheme_mismatch():
    rng = random.Random(6)
    t = TestScheme()
    kp = t.generate_keypair(rng)
    build = build_onion(b"a", [], ("R", kp.public), t, rng)
    with pytest.raises(DecryptFailure):
        peel(build.package, kp.private, RealScheme())


def test_test_hash_binds_every_nonce():
    # exhaustive: the 16-bit mixer is a bijection, so no two nonces share a commitment
    assert len({mix16(x) for x in range(1 << 16)}) == 1 << 16
    t = TestScheme()
    commits = {t.hash(x.to_bytes(2, "big")) for x in range(1 << 16)}
    assert len(commits) == 1 << 16


def test_certificate_checks():
    t = TestScheme()
    nonce = b"\x12\x34"
    c = t.hash(nonce)
    assert verify_certificate(nonce, c, t)
    assert not verify_certificate(b"\x12\x35", c, t)
    # every single-bit flip of this nonce is rejected
    for bit in range(16):
        flipped = (int.from_bytes(nonce, "big") ^ (1 << bit)).to_bytes(2, "big")
        assert not verify_certificate(flipped, c, t)


def test_certificates_distinct():
    t = TestScheme()
    certs = make_certificates([f"P{i}" for i in range(300)], t, random.Random(7))
    assert len({c.nonce for c in certs}) == 300


@pytest.mark.parametrize("scheme", SCHEMES, ids=lambda s: s.tag)
def test_package_serialization(scheme):
    rng = random.Random(8)
    kp = keys(scheme, ["P1", "R"], rng)
    build = build_onion(b"key", [("P1", kp["P1"].public)], ("R", kp["R"].public), scheme, rng)
    data = build.package.to_bytes()
    assert OnionPackage.from_bytes(data) == build.package
    for bad in (data[:3], b"XXXX" + data[4:], data + b"\x00"):
        with pytest.raises(DecryptFailure):
            OnionPackage.from_bytes(bad)


@pytest.mark.parametrize("scheme", SCHEMES, ids=lambda s: s.tag)
def test_whisper_key_delivery(scheme):
    rng = random.Random(9)
    kp = keys(scheme, ["P2", "X"], rng)
    env = seal_whisper_key(b"channel-key", "P2", kp["P2"].public, scheme, rng)
    assert open_whisper_key(env, kp["P2"].private, scheme) == b"channel-key"
    with pytest.raises(DecryptFailure):
        open_whisper_key(env, kp["X"].private, scheme)
    net = WhisperNetwork()
    net.post(b"channel-key", "pkg")
    assert net.fetch(b"channel-key") == "pkg"
    assert net.fetch(b"other") is None


def test_seeded_builds_are_reproducible():
    t = RealScheme()

    def build(seed):
        rng = random.Random(seed)
        kp = keys(t, ["P1", "R"], rng)
        return build_onion(b"key", [("P1", kp["P1"].public)], ("R", kp["R"].public), t, rng)

    assert build(11).package == build(11).package
    assert build(11).package != build(12).package


def test_unknown_scheme():
    assert get_scheme("real").tag == "real"
    with pytest.raises(ValueError):
        get_scheme("rsa")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 6), st.binary(min_size=1, max_size=64), st.integers(0, 2**32))
def test_round_trip_property(hops, secret, seed):
    t = TestScheme()
    rng = random.Random(seed)
    names = [f"P{i}" for i in range(1, hops + 1)] + ["R"]
    kp = keys(t, names, rng)
    build = build_onion(secret, [(n, kp[n].public) for n in names[:-1]], ("R", kp["R"].public), t, rng)
    certs, out = peel_all(build.package, names, kp, t)
    assert out == secret
    assert all(verify_certificate(c.nonce, p.commitment, t) for c, p in zip(certs, build.certificates))
