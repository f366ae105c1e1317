"""The mock PCS as a network service: platform certificate/CRL lookups
plus admin register/revoke, over plaintext frames (PCS data is public).
Payloads are JSON; message types and schemas in WIRE.md.
"""

from __future__ import annotations

import json
import socket
import threading
import time

from . import wire
from .attestation import CertChain, Crl, PcsDatabase, PlatformIdentity, UnknownPlatformError


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


class PcsServer:
    """Serves one PcsDatabase over TCP; persists after every mutation when
    a db_path is given. One thread per connection; the database's own lock
    serializes mutations."""

    def __init__(self, db: PcsDatabase, host: str = "127.0.0.1", port: int = 0,
                 db_path=None, now_source=time.time):
        self.db = db
        self.db_path = db_path
        self.now_source = now_source
        self._listener = socket.create_server((host, port))
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    def start(self) -> "PcsServer":
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
        with conn:
            while True:
                try:
                    frame_type, payload = wire.recv_frame(conn)
                except (wire.WireError, OSError):
                    return
                try:
                    self._handle(conn, frame_type, payload)
                except OSError:
                    return

    def _handle(self, conn, frame_type: int, payload: bytes) -> None:
        try:
            request = json.loads(payload) if payload else {}
        except json.JSONDecodeError:
            wire.send_frame(conn, wire.PCS_ERROR, _canonical({"reason": "bad_request"}))
            return

        if frame_type == wire.PCS_FETCH_REQ:
            try:
                platform_id = bytes.fromhex(request["platform_id"])
                chain, crl = self.db.fetch(platform_id)
            except UnknownPlatformError:
                wire.send_frame(conn, wire.PCS_ERROR,
                                _canonical({"reason": "unknown_platform"}))
                return
            except (KeyError, ValueError):
                wire.send_frame(conn, wire.PCS_ERROR, _canonical({"reason": "bad_request"}))
                return
            wire.send_frame(conn, wire.PCS_FETCH_RESP,
                            _canonical({"chain": chain.to_dict(), "crl": crl.to_dict()}))
        elif frame_type == wire.PCS_REGISTER_REQ:
            tcb_level = int(request.get("tcb_level", 0))
            platform, chain = self.db.register(tcb_level, now=int(self.now_source()))
            self._persist()
            wire.send_frame(conn, wire.PCS_REGISTER_RESP, _canonical({
                "platform": {
                    "platform_id": platform.platform_id.hex(),
                    "private_key": platform.signing_key.private.hex(),
                    "public_key": platform.signing_key.public.hex(),
                    "tcb_level": platform.tcb_level,
                },
                "chain": chain.to_dict(),
            }))
        elif frame_type == wire.PCS_REVOKE_REQ:
            try:
                crl = self.db.revoke(bytes.fromhex(request["platform_id"]))
            except UnknownPlatformError:
                wire.send_frame(conn, wire.PCS_ERROR,
                                _canonical({"reason": "unknown_platform"}))
                return
            except (KeyError, ValueError):
                wire.send_frame(conn, wire.PCS_ERROR, _canonical({"reason": "bad_request"}))
                return
            self._persist()
            wire.send_frame(conn, wire.PCS_REVOKE_RESP, _canonical({"crl": crl.to_dict()}))
        else:
            wire.send_frame(conn, wire.PCS_ERROR, _canonical({"reason": "bad_type"}))

    def _persist(self) -> None:
        if self.db_path is not None:
            self.db.save(self.db_path)


class PcsClientError(Exception):
    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


def _request(addr, frame_type: int, body: dict, expect: int) -> dict:
    with socket.create_connection(addr, timeout=10) as conn:
        wire.send_frame(conn, frame_type, _canonical(body))
        got_type, payload = wire.recv_frame(conn)
    response = json.loads(payload)
    if got_type == wire.PCS_ERROR:
        raise PcsClientError(response.get("reason", "unknown"))
    if got_type != expect:
        raise PcsClientError(f"unexpected response type {got_type:#x}")
    return response


def fetch_platform(addr, platform_id: bytes) -> tuple[CertChain, Crl]:
    r = _request(addr, wire.PCS_FETCH_REQ, {"platform_id": platform_id.hex()},
                 wire.PCS_FETCH_RESP)
    return CertChain.from_dict(r["chain"]), Crl.from_dict(r["crl"])


def identity_to_dict(platform: PlatformIdentity, chain: CertChain) -> dict:
    """Platform identity + chain as one JSON-able blob (holds the private
    attestation key: it belongs on the platform owner's side only)."""
    return {
        "platform": {
            "platform_id": platform.platform_id.hex(),
            "private_key": platform.signing_key.private.hex(),
            "public_key": platform.signing_key.public.hex(),
            "tcb_level": platform.tcb_level,
        },
        "chain": chain.to_dict(),
    }


def identity_from_dict(d: dict) -> tuple[PlatformIdentity, CertChain]:
    from .crypto import SigningKeyPair

    p = d["platform"]
    identity = PlatformIdentity(
        platform_id=bytes.fromhex(p["platform_id"]),
        signing_key=SigningKeyPair(bytes.fromhex(p["private_key"]),
                                   bytes.fromhex(p["public_key"])),
        tcb_level=int(p["tcb_level"]),
    )
    return identity, CertChain.from_dict(d["chain"])


def register_platform(addr, tcb_level: int) -> tuple[PlatformIdentity, CertChain]:
    r = _request(addr, wire.PCS_REGISTER_REQ, {"tcb_level": tcb_level},
                 wire.PCS_REGISTER_RESP)
    return identity_from_dict(r)


def revoke_platform(addr, platform_id: bytes) -> Crl:
    r = _request(addr, wire.PCS_REVOKE_REQ, {"platform_id": platform_id.hex()},
                 wire.PCS_REVOKE_RESP)
    return Crl.from_dict(r["crl"])
