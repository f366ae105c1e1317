import json
import random
import socket
import threading

import pytest

from enclavesim import crypto, wire
from enclavesim.attestation import PcsDatabase, VerificationPolicy, quote_generate
from enclavesim.channel import (
    AttestationCertificate,
    ChannelError,
    HandshakeError,
    attester_handshake,
    bind_report_data,
    verifier_handshake,
)

NOW = 1_700_000_000
MRE = b"\x11" * 32
MRS = b"\x22" * 32


@pytest.fixture(scope="module")
def env():
    pcs = PcsDatabase.create(now=NOW)
    platform, chain = pcs.register(tcb_level=5, now=NOW)
    verifier_key = crypto.sign_generate()
    policy = VerificationPolicy(accepted_root=pcs.root_public_key,
                                expected_mr_enclave=MRE, min_isv_svn=1, min_tcb_level=1)
    return {
        "pcs": pcs,
        "platform": platform,
        "chain": chain,
        "verifier_key": verifier_key,
        "policy": policy,
    }


def provider_for(env, mre=MRE, mrs=MRS, svn=3):
    def provide(report_data):
        quote = quote_generate(env["platform"], mre, mrs, svn, report_data)
        return quote, env["chain"]
    return provide


class SideResult:
    def __init__(self):
        self.value = None
        self.error = None


def run_verifier(env, conn, policy=None):
    result = SideResult()

    def go():
        try:
            result.value = verifier_handshake(
                conn, policy or env["policy"], env["pcs"].current_crl(), NOW,
                env["verifier_key"])
        except Exception as exc:
            result.error = exc

    thread = threading.Thread(target=go)
    thread.start()
    return thread, result


def handshake_pair(env, *, provider=None, policy=None, pin=None):
    a_sock, v_sock = socket.socketpair()
    thread, ver = run_verifier(env, v_sock, policy)
    att = SideResult()
    try:
        att.value = attester_handshake(a_sock, provider or provider_for(env),
                                       pin if pin is not None else env["verifier_key"].public)
    except Exception as exc:
        att.error = exc
    thread.join()
    return att, ver


# -- happy path -----------------------------------------------------------

def test_honest_handshake_establishes_channel(env):
    att, ver = handshake_pair(env)
    assert att.error is None and ver.error is None
    chan_a = att.value
    chan_v, result = ver.value
    assert result.ok
    chan_a.send(wire.REC_APP, b"hello")
    assert chan_v.recv() == (wire.REC_APP, b"hello")
    chan_v.send(wire.REC_APP, b"hi back")
    assert chan_a.recv() == (wire.REC_APP, b"hi back")
    chan_a.close(), chan_v.close()


def test_key_separation(env):
    att, ver = handshake_pair(env)
    chan_a, (chan_v, _) = att.value, ver.value
    assert chan_a._send_key != chan_a._recv_key
    att2, ver2 = handshake_pair(env)
    assert att2.value._send_key != chan_a._send_key
    for c in (chan_a, chan_v, att2.value, ver2.value[0]):
        c.close()


def test_record_roundtrip_many_random_payloads(env):
    att, ver = handshake_pair(env)
    chan_a, (chan_v, _) = att.value, ver.value
    rng = random.Random(59)
    sent = [rng.randbytes(rng.randint(0, 64 * 1024)) for _ in range(100)]

    def pump():
        for payload in sent:
            chan_a.send(wire.REC_APP, payload)

    t = threading.Thread(target=pump)
    t.start()
    for payload in sent:
        assert chan_v.recv() == (wire.REC_APP, payload)
    t.join()
    chan_a.close(), chan_v.close()


# -- authentication failures ------------------------------------------------

def test_non_pinned_verifier_key_rejected(env):
    rogue = crypto.sign_generate()
    att, ver = handshake_pair(env, pin=rogue.public)
    assert isinstance(att.error, HandshakeError)
    assert att.error.kind == "peer_auth_failed"


def test_policy_mismatch_reported_to_both_sides(env):
    att, ver = handshake_pair(env, provider=provider_for(env, mre=b"\x99" * 32))
    assert isinstance(ver.error, HandshakeError)
    assert ver.error.kind == "attestation_failed"
    assert ver.error.reason == "mr_enclave_mismatch"
    assert isinstance(att.error, HandshakeError)
    assert att.error.kind == "attestation_failed"
    assert att.error.reason == "mr_enclave_mismatch"


def test_revoked_platform_rejected(env):
    pcs = env["pcs"]
    victim, chain = pcs.register(tcb_level=5, now=NOW)

    def provide(report_data):
        return quote_generate(victim, MRE, MRS, 3, report_data), chain

    pcs.revoke(victim.platform_id)
    att, ver = handshake_pair(env, provider=provide)
    assert att.error.kind == "attestation_failed"
    assert att.error.reason == "revoked"


def test_verifier_fail_closed_no_v1_after_bad_quote(env):
    # play the attester by hand and watch every frame the verifier emits
    a_sock, v_sock = socket.socketpair()
    thread, ver = run_verifier(env, v_sock)
    eph = crypto.dh_generate()
    quote = quote_generate(env["platform"], b"\x99" * 32, MRS, 3,
                           bind_report_data(eph.public))
    cert = AttestationCertificate(eph.public, quote, env["chain"])
    wire.send_frame(a_sock, wire.HS_A1, cert.encode())
    frames = []
    try:
        while True:
            frames.append(wire.recv_frame(a_sock))
    except (wire.ConnectionClosedError, OSError):
        pass
    thread.join()
    a_sock.close()
    assert isinstance(ver.error, HandshakeError)
    types = [t for t, _ in frames]
    assert wire.HS_V1 not in types
    assert types == [wire.HS_ERROR]


def test_relay_adversary_caught_by_binding(env):
    # adversary forwards the victim's genuine certificate but swaps in its
    # own ephemeral key, hoping to terminate the key agreement itself
    a_sock, v_sock = socket.socketpair()
    thread, ver = run_verifier(env, v_sock)

    victim_eph = crypto.dh_generate()
    genuine = AttestationCertificate(
        victim_eph.public,
        quote_generate(env["platform"], MRE, MRS, 3, bind_report_data(victim_eph.public)),
        env["chain"])

    mitm_eph = crypto.dh_generate()
    tampered = AttestationCertificate(mitm_eph.public, genuine.quote, genuine.cert_chain)
    wire.send_frame(a_sock, wire.HS_A1, tampered.encode())
    frame_type, payload = wire.recv_frame(a_sock)
    thread.join()
    a_sock.close()
    assert frame_type == wire.HS_ERROR
    assert json.loads(payload)["kind"] == "binding_mismatch"
    assert isinstance(ver.error, HandshakeError)
    assert ver.error.kind == "binding_mismatch"


def test_crl_provider_failure_fails_closed(env):
    def broken_provider(pid):
        raise RuntimeError("PCS unreachable")

    a_sock, v_sock = socket.socketpair()
    result = SideResult()

    def go():
        try:
            result.value = verifier_handshake(v_sock, env["policy"],
                                              broken_provider, NOW,
                                              env["verifier_key"])
        except Exception as exc:
            result.error = exc

    t = threading.Thread(target=go)
    t.start()
    att = SideResult()
    try:
        att.value = attester_handshake(a_sock, provider_for(env),
                                       env["verifier_key"].public)
    except Exception as exc:
        att.error = exc
    t.join()
    assert isinstance(result.error, HandshakeError)
    assert result.error.kind == "attestation_failed"
    assert "crl_unavailable" in (result.error.reason or "")
    assert isinstance(att.error, HandshakeError)


# -- in-transit corruption ---------------------------------------------------

class FlippingProxy:
    """Forwards frames between two sockets, flipping one payload byte of the
    n-th frame it sees."""

    def __init__(self, flip_frame_index: int, flip_offset: int):
        self.flip_frame_index = flip_frame_index
        self.flip_offset = flip_offset
        self.count = 0
        self.lock = threading.Lock()

    def pump(self, src, dst):
        try:
            while True:
                frame_type, payload = wire.recv_frame(src)
                with self.lock:
                    index = self.count
                    self.count += 1
                if index == self.flip_frame_index and payload:
                    buf = bytearray(payload)
                    buf[self.flip_offset % len(buf)] ^= 0x40
                    payload = bytes(buf)
                wire.send_frame(dst, frame_type, payload)
        except (wire.ConnectionClosedError, OSError):
            try:
                dst.shutdown(socket.SHUT_WR)
            except OSError:
                pass


def test_any_flipped_handshake_message_detected(env):
    # frames in order: A1, V1, Finished(A), Finished(V)
    rng = random.Random(61)
    for frame_index in range(4):
        for _ in range(3):
            a_outer, a_inner = socket.socketpair()
            v_inner, v_outer = socket.socketpair()
            proxy = FlippingProxy(frame_index, rng.randrange(1 << 16))
            threads = [
                threading.Thread(target=proxy.pump, args=(a_inner, v_inner), daemon=True),
                threading.Thread(target=proxy.pump, args=(v_inner, a_inner), daemon=True),
            ]
            for t in threads:
                t.start()
            thread, ver = run_verifier(env, v_outer)
            att = SideResult()
            try:
                att.value = attester_handshake(a_outer, provider_for(env),
                                               env["verifier_key"].public)
            except Exception as exc:
                att.error = exc
            thread.join()
            assert att.error is not None or ver.error is not None, \
                f"flip of frame {frame_index} went unnoticed"
            for s in (a_outer, v_outer, a_inner, v_inner):
                s.close()


# -- record layer -------------------------------------------------------------

def test_replayed_record_rejected(env):
    att, ver = handshake_pair(env)
    chan_a, (chan_v, _) = att.value, ver.value
    raw = chan_a._sock  # capture what goes over the wire by resealing manually
    # send one record, capture its bytes by re-serializing an identical frame
    chan_a.send(wire.REC_APP, b"first")
    assert chan_v.recv() == (wire.REC_APP, b"first")
    # replay: reseal the same plaintext under the already-used sequence 1... the
    # attacker instead captures frame bytes; emulate by resealing seq=1 after
    # the counter advanced
    chan_a.send(wire.REC_APP, b"second")
    assert chan_v.recv() == (wire.REC_APP, b"second")
    sealed_old = crypto.aead_seal(chan_a._send_key, (1).to_bytes(12, "big"),
                                  bytes([wire.REC_APP]) + (1).to_bytes(8, "big"),
                                  b"second")
    wire.send_frame(raw, wire.REC_APP, sealed_old)
    with pytest.raises(ChannelError) as exc:
        chan_v.recv()
    assert exc.value.kind == "replay"
    chan_a.close(), chan_v.close()


def test_reordered_record_classified(env):
    att, ver = handshake_pair(env)
    chan_a, (chan_v, _) = att.value, ver.value
    # seal sequence 3 while the receiver expects 1
    sealed_future = crypto.aead_seal(chan_a._send_key, (3).to_bytes(12, "big"),
                                     bytes([wire.REC_APP]) + (3).to_bytes(8, "big"),
                                     b"early")
    wire.send_frame(chan_a._sock, wire.REC_APP, sealed_future)
    with pytest.raises(ChannelError) as exc:
        chan_v.recv()
    assert exc.value.kind == "out_of_order"
    chan_a.close(), chan_v.close()


def test_tampered_record_rejected(env):
    att, ver = handshake_pair(env)
    chan_a, (chan_v, _) = att.value, ver.value
    sealed = crypto.aead_seal(chan_a._send_key, (1).to_bytes(12, "big"),
                              bytes([wire.REC_APP]) + (1).to_bytes(8, "big"),
                              b"payload")
    buf = bytearray(sealed)
    buf[0] ^= 0x01
    wire.send_frame(chan_a._sock, wire.REC_APP, bytes(buf))
    with pytest.raises(ChannelError) as exc:
        chan_v.recv()
    assert exc.value.kind == "auth"
    chan_a.close(), chan_v.close()


def test_max_record_size_enforced(env):
    att, ver = handshake_pair(env)
    chan_a, (chan_v, _) = att.value, ver.value
    with pytest.raises(wire.WireError):
        chan_a.send(wire.REC_APP, b"\x00" * (wire.MAX_PAYLOAD + 1))
    chan_a.close(), chan_v.close()
