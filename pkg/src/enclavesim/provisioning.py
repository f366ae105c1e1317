"""Secret provisioning: a key server holding named master keys behind
per-key release policies, and the enclave-side client that requests them
over the attested channel.

Two policy levels: the session policy gates the handshake; each secret
may carry a stricter policy re-checked per request against the session's
quote. Secrets are released only after both Finished messages verify
(the record layer enforces this: nothing is readable before keys exist).
The vault persists as a protected container keyed from a passphrase,
with the container uuid doubling as the KDF salt.
"""

from __future__ import annotations

import json
import socket
import threading
import time

from . import crypto, wire
from .attestation import VerificationPolicy, quote_verify
from .channel import HandshakeError, QuoteProvider, SecureChannel, attester_handshake, verifier_handshake
from .pfs import ProtectedFile, read_uuid

VAULT_LABEL = "keyvault"
MAX_SECRET_NAME = 128
MAX_SECRET_SIZE = 4096
DEFAULT_IDLE_TIMEOUT = 60.0


class VaultError(Exception):
    pass


class ProvisionDeniedError(Exception):
    """reason: policy_mismatch | unknown_secret"""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


class KeyVault:
    """Named secrets with their release policies. Read-only while serving."""

    def __init__(self):
        self._secrets: dict[str, dict] = {}

    def add_secret(self, name: str, secret: bytes, policy: VerificationPolicy) -> None:
        encoded = name.encode("utf-8")
        if not encoded or len(encoded) > MAX_SECRET_NAME:
            raise VaultError(f"secret name must be 1..{MAX_SECRET_NAME} bytes")
        if not 1 <= len(secret) <= MAX_SECRET_SIZE:
            raise VaultError(f"secret must be 1..{MAX_SECRET_SIZE} bytes")
        if policy.expected_mr_enclave is None and policy.expected_mr_signer is None:
            raise VaultError("release policy must constrain mr_enclave or mr_signer")
        self._secrets[name] = {"secret": secret, "policy": policy}

    def get(self, name: str) -> dict | None:
        return self._secrets.get(name)

    def names(self) -> list[str]:
        return sorted(self._secrets)

    def __len__(self) -> int:
        return len(self._secrets)

    def to_json(self) -> bytes:
        body = {
            "secrets": {
                name: {"secret": rec["secret"].hex(), "policy": rec["policy"].to_dict()}
                for name, rec in self._secrets.items()
            }
        }
        return json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_json(cls, data: bytes) -> "KeyVault":
        vault = cls()
        try:
            body = json.loads(data)
            for name, rec in body["secrets"].items():
                vault.add_secret(name, bytes.fromhex(rec["secret"]),
                                 VerificationPolicy.from_dict(rec["policy"]))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise VaultError(f"malformed vault body: {exc}")
        return vault


def _vault_key(passphrase: str, salt: bytes) -> bytes:
    return crypto.kdf(crypto.hash_data(passphrase.encode("utf-8")), "vault", salt)


def vault_save(vault: KeyVault, path, passphrase: str) -> None:
    """Store the vault as a protected container; dogfoods the package's
    own storage. The fresh container uuid serves as the KDF salt."""
    salt = crypto.random_bytes(16)
    with ProtectedFile.create(path, VAULT_LABEL, _vault_key(passphrase, salt),
                              file_uuid=salt) as pf:
        pf.write(0, vault.to_json())


def vault_load(path, passphrase: str) -> KeyVault:
    """Raises WrongKeyError on a bad passphrase, IntegrityError on a
    tampered container."""
    salt = read_uuid(path)
    with ProtectedFile.open(path, VAULT_LABEL, _vault_key(passphrase, salt)) as pf:
        return KeyVault.from_json(pf.read(0, pf.size))


class KeyServer:
    """Accepts attested connections and serves provision requests.

    Per connection: verifier handshake under the session policy, then any
    number of requests, each re-evaluated against the secret's own policy
    with a fresh `now`. Every request appends exactly one audit record
    (never containing secret bytes). One bad client never stops the server.
    """

    def __init__(self, vault: KeyVault, session_policy: VerificationPolicy,
                 signing_key: crypto.SigningKeyPair, crl_provider,
                 host: str = "127.0.0.1", port: int = 0,
                 now_source=time.time, idle_timeout: float = DEFAULT_IDLE_TIMEOUT,
                 audit_path=None):
        self.vault = vault
        self.session_policy = session_policy
        self.signing_key = signing_key
        self.crl_provider = crl_provider
        self.now_source = now_source
        self.idle_timeout = idle_timeout
        self.audit_path = audit_path
        self.audit_log: list[dict] = []
        self._audit_lock = threading.Lock()
        self._listener = socket.create_server((host, port))
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    @property
    def public_key(self) -> bytes:
        return self.signing_key.public

    def start(self) -> "KeyServer":
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        try:
            self._listener.shutdown(socket.SHUT_RDWR)  # wake a blocked accept()
        except OSError:
            pass
        try:
            self._listener.close()
        except OSError:
            pass
        if self._thread:
            self._thread.join(timeout=5)

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                break
            threading.Thread(target=self._serve_connection, args=(conn,),
                             daemon=True).start()

    def _serve_connection(self, conn: socket.socket) -> None:
        try:
            conn.settimeout(self.idle_timeout)
            channel, result = verifier_handshake(
                conn, self.session_policy, self.crl_provider,
                int(self.now_source()), self.signing_key)
        except (HandshakeError, OSError):
            return
        except Exception:  # a bad client must never stop the server
            return
        try:
            self._serve_channel(channel, result)
        except Exception:
            pass
        finally:
            channel.close()

    def _serve_channel(self, channel: SecureChannel, result) -> None:
        quote = result.quote
        cert = channel.peer_certificate
        while True:
            try:
                record_type, payload = channel.recv()
            except Exception:
                return
            if record_type == wire.REC_PING:
                channel.send(wire.REC_PING, payload)
                continue
            if record_type != wire.REC_PROVISION_REQ:
                return
            try:
                name = json.loads(payload)["name"]
            except (json.JSONDecodeError, KeyError, TypeError):
                return
            response = self._evaluate(name, quote, cert)
            self._audit(quote, name, response)
            body = {"outcome": response["outcome"]}
            if response["outcome"] == "granted":
                body["secret"] = response["secret"].hex()
            else:
                body["reason"] = response["reason"]
            channel.send(wire.REC_PROVISION_RESP,
                         json.dumps(body, sort_keys=True,
                                    separators=(",", ":")).encode("utf-8"))

    def _evaluate(self, name: str, quote, cert) -> dict:
        record = self.vault.get(name)
        if record is None:
            return {"outcome": "denied", "reason": "unknown_secret"}
        crl = self.crl_provider(quote.platform_id) if callable(self.crl_provider) \
            else self.crl_provider
        check = quote_verify(quote, cert.cert_chain, crl, record["policy"],
                             int(self.now_source()))
        if not check.ok:
            return {"outcome": "denied", "reason": "policy_mismatch"}
        return {"outcome": "granted", "secret": record["secret"]}

    def _audit(self, quote, name: str, response: dict) -> None:
        entry = {
            "timestamp": int(self.now_source()),
            "platform_id": quote.platform_id.hex(),
            "mr_enclave": quote.mr_enclave.hex(),
            "secret_name": name,
            "outcome": response["outcome"] if response["outcome"] == "granted"
            else f"denied:{response['reason']}",
        }
        with self._audit_lock:
            self.audit_log.append(entry)
            if self.audit_path is not None:
                with open(self.audit_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")


class ProvisioningClient:
    """Enclave-side client; one attested session, any number of requests."""

    def __init__(self, server_addr, quote_provider: QuoteProvider, verifier_pin: bytes,
                 timeout: float = 10.0):
        conn = socket.create_connection(server_addr, timeout=timeout)
        self.channel = attester_handshake(conn, quote_provider, verifier_pin)

    def request(self, secret_name: str) -> bytes:
        self.channel.send(wire.REC_PROVISION_REQ,
                          json.dumps({"name": secret_name}).encode("utf-8"))
        record_type, payload = self.channel.recv()
        if record_type != wire.REC_PROVISION_RESP:
            raise ProvisionDeniedError("bad_response")
        body = json.loads(payload)
        if body.get("outcome") == "granted":
            return bytes.fromhex(body["secret"])
        raise ProvisionDeniedError(body.get("reason", "unknown"))

    def close(self) -> None:
        self.channel.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def client_request_key(server_addr, secret_name: str, quote_provider: QuoteProvider,
                       verifier_pin: bytes) -> bytes:
    """One-shot: attested handshake, single request, close. Raises
    HandshakeError (fail-closed: no request is ever sent on a failed
    handshake) or ProvisionDeniedError."""
    with ProvisioningClient(server_addr, quote_provider, verifier_pin) as client:
        return client.request(secret_name)
