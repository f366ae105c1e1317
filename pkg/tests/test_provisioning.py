import socket
import threading

import pytest

from enclavesim import crypto
from enclavesim.attestation import PcsDatabase, VerificationPolicy, quote_generate
from enclavesim.channel import HandshakeError
from enclavesim.pfs import IntegrityError, WrongKeyError
from enclavesim.provisioning import (
    KeyServer,
    KeyVault,
    ProvisionDeniedError,
    ProvisioningClient,
    VaultError,
    client_request_key,
    vault_load,
    vault_save,
)

NOW = 1_700_000_000
MRE = b"\x11" * 32
MRS = b"\x22" * 32
SECRET = bytes(range(32))


@pytest.fixture(scope="module")
def env():
    pcs = PcsDatabase.create(now=NOW)
    platform, chain = pcs.register(tcb_level=5, now=NOW)
    return {"pcs": pcs, "platform": platform, "chain": chain}


def provider_for(env, mre=MRE):
    def provide(report_data):
        return quote_generate(env["platform"], mre, MRS, 3, report_data), env["chain"]
    return provide


def make_vault(env, secret_mre=MRE):
    vault = KeyVault()
    vault.add_secret("pfs-master", SECRET, VerificationPolicy(
        accepted_root=env["pcs"].root_public_key, expected_mr_enclave=secret_mre,
        min_isv_svn=1, min_tcb_level=1))
    return vault


@pytest.fixture()
def server(env):
    session_policy = VerificationPolicy(
        accepted_root=env["pcs"].root_public_key, min_isv_svn=1, min_tcb_level=1)
    srv = KeyServer(make_vault(env), session_policy, crypto.sign_generate(),
                    crl_provider=lambda pid: env["pcs"].current_crl(),
                    now_source=lambda: NOW, idle_timeout=5.0).start()
    yield srv
    srv.stop()


# -- vault ----------------------------------------------------------------

def test_vault_roundtrip(tmp_path, env):
    path = tmp_path / "vault.pfs"
    vault_save(make_vault(env), path, "hunter2")
    again = vault_load(path, "hunter2")
    assert again.names() == ["pfs-master"]
    assert again.get("pfs-master")["secret"] == SECRET
    assert again.get("pfs-master")["policy"].expected_mr_enclave == MRE


def test_vault_wrong_passphrase(tmp_path, env):
    path = tmp_path / "vault.pfs"
    vault_save(make_vault(env), path, "hunter2")
    with pytest.raises(WrongKeyError):
        vault_load(path, "hunter3")


def test_vault_tamper_detected(tmp_path, env):
    path = tmp_path / "vault.pfs"
    vault_save(make_vault(env), path, "hunter2")
    raw = bytearray(path.read_bytes())
    raw[600] ^= 0x01  # inside the first node, past the header
    path.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        vault_load(path, "hunter2")


def test_vault_name_and_secret_bounds(env):
    vault = KeyVault()
    policy = VerificationPolicy(accepted_root=b"\x00" * 32, expected_mr_enclave=MRE)
    with pytest.raises(VaultError):
        vault.add_secret("", b"x", policy)
    with pytest.raises(VaultError):
        vault.add_secret("x" * 129, b"x", policy)
    with pytest.raises(VaultError):
        vault.add_secret("ok", b"", policy)
    with pytest.raises(VaultError):
        vault.add_secret("ok", b"x" * 4097, policy)


def test_vault_policy_must_pin_an_identity():
    vault = KeyVault()
    with pytest.raises(VaultError, match="constrain"):
        vault.add_secret("k", b"v", VerificationPolicy(accepted_root=b"\x00" * 32))


# -- end to end ------------------------------------------------------------

def test_grant_end_to_end(env, server):
    got = client_request_key(server.address, "pfs-master", provider_for(env),
                             server.public_key)
    assert got == SECRET
    assert server.audit_log[-1]["outcome"] == "granted"
    assert server.audit_log[-1]["secret_name"] == "pfs-master"


def test_unknown_secret_denied(env, server):
    with pytest.raises(ProvisionDeniedError) as exc:
        client_request_key(server.address, "no-such-key", provider_for(env),
                           server.public_key)
    assert exc.value.reason == "unknown_secret"


def test_per_secret_policy_stricter_than_session(env):
    # session policy admits any measurement; the secret pins another one
    session_policy = VerificationPolicy(
        accepted_root=env["pcs"].root_public_key, min_isv_svn=1, min_tcb_level=1)
    srv = KeyServer(make_vault(env, secret_mre=b"\x55" * 32), session_policy,
                    crypto.sign_generate(),
                    crl_provider=lambda pid: env["pcs"].current_crl(),
                    now_source=lambda: NOW).start()
    try:
        with pytest.raises(ProvisionDeniedError) as exc:
            client_request_key(srv.address, "pfs-master", provider_for(env),
                               srv.public_key)
        assert exc.value.reason == "policy_mismatch"
        assert srv.audit_log[-1]["outcome"] == "denied:policy_mismatch"
    finally:
        srv.stop()


def test_session_policy_gate_blocks_handshake(env):
    session_policy = VerificationPolicy(
        accepted_root=env["pcs"].root_public_key, expected_mr_enclave=b"\x66" * 32)
    srv = KeyServer(make_vault(env), session_policy, crypto.sign_generate(),
                    crl_provider=lambda pid: env["pcs"].current_crl(),
                    now_source=lambda: NOW).start()
    try:
        with pytest.raises(HandshakeError) as exc:
            client_request_key(srv.address, "pfs-master", provider_for(env),
                               srv.public_key)
        assert exc.value.kind == "attestation_failed"
        assert exc.value.reason == "mr_enclave_mismatch"
        assert srv.audit_log == []  # no request ever reached evaluation
    finally:
        srv.stop()


def test_wrong_pin_fails_closed(env, server):
    rogue = crypto.sign_generate()
    with pytest.raises(HandshakeError) as exc:
        client_request_key(server.address, "pfs-master", provider_for(env), rogue.public)
    assert exc.value.kind == "peer_auth_failed"
    assert server.audit_log == []


def test_revoked_platform_surfaces_reason(env):
    pcs = env["pcs"]
    victim, chain = pcs.register(tcb_level=5, now=NOW)

    def provide(report_data):
        return quote_generate(victim, MRE, MRS, 3, report_data), chain

    session_policy = VerificationPolicy(
        accepted_root=pcs.root_public_key, min_isv_svn=1, min_tcb_level=1)
    srv = KeyServer(make_vault(env), session_policy, crypto.sign_generate(),
                    crl_provider=lambda pid: pcs.current_crl(),
                    now_source=lambda: NOW).start()
    try:
        pcs.revoke(victim.platform_id)
        with pytest.raises(HandshakeError) as exc:
            client_request_key(srv.address, "pfs-master", provide, srv.public_key)
        assert exc.value.kind == "attestation_failed"
        assert exc.value.reason == "revoked"
    finally:
        srv.stop()


def test_multiple_requests_one_session(env, server):
    with ProvisioningClient(server.address, provider_for(env), server.public_key) as client:
        assert client.request("pfs-master") == SECRET
        assert client.request("pfs-master") == SECRET
        with pytest.raises(ProvisionDeniedError):
            client.request("missing")
    granted = [e for e in server.audit_log if e["outcome"] == "granted"]
    assert len(granted) >= 2


def test_audit_one_record_per_request(env, server):
    before = len(server.audit_log)
    with ProvisioningClient(server.address, provider_for(env), server.public_key) as client:
        for _ in range(3):
            client.request("pfs-master")
    assert len(server.audit_log) == before + 3
    assert all(SECRET.hex() not in str(entry) for entry in server.audit_log)


class RecordingProxy:
    """TCP forwarder capturing every byte of both directions."""

    def __init__(self, upstream):
        self.upstream = upstream
        self.bytes_seen = bytearray()
        self._lock = threading.Lock()
        self._listener = socket.create_server(("127.0.0.1", 0))
        self.address = self._listener.getsockname()[:2]
        threading.Thread(target=self._accept, daemon=True).start()

    def _accept(self):
        while True:
            try:
                client, _ = self._listener.accept()
            except OSError:
                return
            server = socket.create_connection(self.upstream)
            for src, dst in ((client, server), (server, client)):
                threading.Thread(target=self._pump, args=(src, dst), daemon=True).start()

    def _pump(self, src, dst):
        try:
            while True:
                chunk = src.recv(4096)
                if not chunk:
                    break
                with self._lock:
                    self.bytes_seen.extend(chunk)
                dst.sendall(chunk)
        except OSError:
            pass
        finally:
            for s in (src, dst):
                try:
                    s.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass

    def close(self):
        self._listener.close()


def test_secret_never_in_cleartext_on_wire(env, server):
    proxy = RecordingProxy(server.address)
    try:
        got = client_request_key(proxy.address, "pfs-master", provider_for(env),
                                 server.public_key)
        assert got == SECRET
        stream = bytes(proxy.bytes_seen)
        assert SECRET not in stream
        assert SECRET.hex().encode() not in stream
    finally:
        proxy.close()
