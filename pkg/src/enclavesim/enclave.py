"""Simulated enclave runtime.

The "enclave" is an in-process sandbox object: all workload I/O goes
through instance methods that enforce the manifest's mount view, re-hash
trusted files at open, and route protected paths through the encrypted
container with the provisioned key. Isolation here is by construction,
not an OS sandbox; only the protocol-visible behavior matters.

The stand-in workload is dense linear inference y = W*x + b over text
rows of comma-separated numbers. Model container layout (little-endian):
u32 rows, u32 cols, rows*cols f64 weights row-major, rows f64 bias.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

from . import crypto
from .attestation import CertChain, PlatformIdentity, Quote, quote_generate
from .manifest import FinalManifest, Measurement, compute_measurement, path_under
from .pfs import IntegrityError, ProtectedFile, WrongKeyError
from .provisioning import client_request_key

# fixed demo vendor identity; mr_signer is the hash of the vendor key
DEMO_VENDOR_PUBLIC_KEY = hashlib.sha256(b"enclavesim demo vendor key").digest()
MR_SIGNER = crypto.hash_data(DEMO_VENDOR_PUBLIC_KEY)

DEFAULT_ISV_SVN = 1

CLASS_TRUSTED = "trusted"
CLASS_PROTECTED = "protected"
CLASS_UNTRUSTED = "untrusted"


class EnclaveAccessError(Exception):
    """Path not visible through any declared mount."""


class StartError(Exception):
    """kind: trusted_file_mismatch | missing_mount | parse"""

    def __init__(self, kind: str, detail: str):
        self.kind = kind
        self.detail = detail
        super().__init__(f"{kind}: {detail}")


class RunError(Exception):
    """kind: integrity | key_missing | shape_mismatch | io"""

    def __init__(self, kind: str, path: str | None = None, detail: str = ""):
        self.kind = kind
        self.path = path
        msg = kind if path is None else f"{kind}: {path}"
        super().__init__(f"{msg} ({detail})" if detail else msg)


@dataclass
class WorkloadSpec:
    kind: str
    model_path: str
    input_path: str
    output_path: str
    key_name: str

    def to_json(self) -> bytes:
        return json.dumps({
            "kind": self.kind, "model_path": self.model_path,
            "input_path": self.input_path, "output_path": self.output_path,
            "key_name": self.key_name,
        }, sort_keys=True, indent=2).encode("utf-8") + b"\n"

    @classmethod
    def from_json(cls, data: bytes) -> "WorkloadSpec":
        d = json.loads(data)
        return cls(kind=d["kind"], model_path=d["model_path"],
                   input_path=d["input_path"], output_path=d["output_path"],
                   key_name=d["key_name"])


@dataclass
class LinearModel:
    rows: int
    cols: int
    weights: list[list[float]]
    bias: list[float]

    def pack(self) -> bytes:
        out = struct.pack("<II", self.rows, self.cols)
        for row in self.weights:
            out += struct.pack(f"<{self.cols}d", *row)
        out += struct.pack(f"<{self.rows}d", *self.bias)
        return out

    @classmethod
    def unpack(cls, data: bytes) -> "LinearModel":
        if len(data) < 8:
            raise ValueError("model shorter than its dimension header")
        rows, cols = struct.unpack_from("<II", data, 0)
        expect = 8 + 8 * (rows * cols + rows)
        if len(data) != expect:
            raise ValueError(f"model should be {expect} bytes for {rows}x{cols}, "
                             f"got {len(data)}")
        flat = struct.unpack_from(f"<{rows * cols}d", data, 8)
        weights = [list(flat[r * cols:(r + 1) * cols]) for r in range(rows)]
        bias = list(struct.unpack_from(f"<{rows}d", data, 8 + 8 * rows * cols))
        return cls(rows, cols, weights, bias)

    def apply(self, x: list[float]) -> list[float]:
        # fixed accumulation order: ascending j, bias added last
        out = []
        for i in range(self.rows):
            acc = 0.0
            row = self.weights[i]
            for j in range(self.cols):
                acc += row[j] * x[j]
            out.append(acc + self.bias[i])
        return out


def parse_rows(text: str, cols: int) -> list[list[float]]:
    """Comma-separated numeric rows; blank lines and '#' comments skipped."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = [p.strip() for p in stripped.split(",")]
        try:
            row = [float(p) for p in parts]
        except ValueError:
            raise ValueError(f"line {lineno}: not numeric")
        if len(row) != cols:
            raise ValueError(f"line {lineno}: expected {cols} values, got {len(row)}")
        rows.append(row)
    return rows


def format_rows(rows: list[list[float]]) -> str:
    # repr() is shortest-roundtrip, so parsing gives back the exact doubles
    return "".join(",".join(repr(v) for v in row) + "\n" for row in rows)


@dataclass
class RunReport:
    rows: int
    output_path: str  # enclave path; never plaintext results


class EnclaveInstance:
    """A started enclave: measurement fixed, mounts resolved, trusted
    files pinned. Quotes it generates always carry its own measurement."""

    def __init__(self, manifest: FinalManifest, measurement: Measurement,
                 host_root, mounts, platform: PlatformIdentity | None,
                 cert_chain: CertChain | None, isv_svn: int):
        self.manifest = manifest
        self.measurement = measurement
        self.host_root = str(host_root)
        self._mounts = mounts  # [(enclave_prefix, host_dir)], longest first
        self.platform = platform
        self.cert_chain = cert_chain
        self.isv_svn = isv_svn
        self.provisioned_secrets: dict[str, bytes] = {}

    # -- filesystem view ------------------------------------------------

    def resolve(self, enclave_path: str) -> str:
        """Host path for an enclave path; EnclaveAccessError outside mounts."""
        for prefix, host_dir in self._mounts:
            if path_under(enclave_path, prefix):
                rel = enclave_path[len(prefix.rstrip("/")):].lstrip("/")
                return os.path.join(host_dir, rel) if rel else host_dir
        raise EnclaveAccessError(f"path outside all mounts: {enclave_path}")

    def path_class(self, enclave_path: str) -> str:
        if enclave_path in self.manifest.template.trusted_files:
            return CLASS_TRUSTED
        if any(path_under(enclave_path, p)
               for p in self.manifest.template.protected_files):
            return CLASS_PROTECTED
        return CLASS_UNTRUSTED

    def read_file(self, enclave_path: str) -> bytes:
        """Plaintext read of a trusted or untrusted file. Trusted files are
        re-hashed on every open and must match the manifest."""
        cls = self.path_class(enclave_path)
        if cls == CLASS_PROTECTED:
            raise EnclaveAccessError(
                f"{enclave_path} is protected; open it with open_protected")
        host = self.resolve(enclave_path)
        with open(host, "rb") as fh:
            content = fh.read()
        if cls == CLASS_TRUSTED:
            expected = self.manifest.trusted_file_hashes[enclave_path]
            if crypto.hash_data(content) != expected:
                raise StartError("trusted_file_mismatch", enclave_path)
        return content

    def open_protected(self, enclave_path: str, key: bytes,
                       mode: str = "r", create: bool = False) -> ProtectedFile:
        """Protected container at an enclave path; the label is the enclave
        path itself, binding the container to its location in the view."""
        if self.path_class(enclave_path) != CLASS_PROTECTED:
            raise EnclaveAccessError(f"{enclave_path} is not marked protected")
        host = self.resolve(enclave_path)
        if create:
            return ProtectedFile.create(host, enclave_path, key)
        return ProtectedFile.open(host, enclave_path, key, mode)

    # -- attestation ----------------------------------------------------

    def quote_provider(self):
        """Quote factory bound to this instance's measurement; mr_enclave is
        always the loaded manifest's measurement (measurement honesty)."""
        if self.platform is None or self.cert_chain is None:
            raise RunError("io", detail="no platform identity attached")

        def provide(report_data: bytes) -> tuple[Quote, CertChain]:
            quote = quote_generate(self.platform, self.measurement.mr_enclave,
                                   MR_SIGNER, self.isv_svn, report_data)
            return quote, self.cert_chain

        return provide

    def provision(self, keyserver_addr, verifier_pin: bytes, key_name: str) -> None:
        """Fetch a named secret over the attested channel; handshake and
        denial errors propagate unchanged."""
        secret = client_request_key(keyserver_addr, key_name,
                                    self.quote_provider(), verifier_pin)
        self.provisioned_secrets[key_name] = secret

    # -- workload ---------------------------------------------------------

    def workload_open_inputs(self, spec: WorkloadSpec):
        """Transparent decrypt of model and input under the provisioned key."""
        if spec.kind != "linear_infer":
            raise RunError("io", detail=f"unknown workload kind {spec.kind!r}")
        key = self.provisioned_secrets.get(spec.key_name)
        if key is None:
            raise RunError("key_missing", spec.key_name)

        def read_protected(path):
            try:
                with self.open_protected(path, key) as pf:
                    return pf.read(0, pf.size)
            except (IntegrityError, WrongKeyError):
                raise RunError("integrity", path)
            except OSError as exc:
                raise RunError("io", path, str(exc))

        model_bytes = read_protected(spec.model_path)
        input_bytes = read_protected(spec.input_path)
        try:
            model = LinearModel.unpack(model_bytes)
        except ValueError as exc:
            raise RunError("shape_mismatch", spec.model_path, str(exc))
        try:
            rows = parse_rows(input_bytes.decode("utf-8"), model.cols)
        except (UnicodeDecodeError, ValueError) as exc:
            raise RunError("shape_mismatch", spec.input_path, str(exc))
        return model, rows

    def workload_compute(self, model: LinearModel, rows: list[list[float]]):
        return [model.apply(x) for x in rows]

    def workload_write_output(self, spec: WorkloadSpec, out_rows) -> RunReport:
        key = self.provisioned_secrets.get(spec.key_name)
        if key is None:
            raise RunError("key_missing", spec.key_name)
        text = format_rows(out_rows)
        try:
            with self.open_protected(spec.output_path, key, create=True) as pf:
                pf.write(0, text.encode("utf-8"))
        except OSError as exc:
            raise RunError("io", spec.output_path, str(exc))
        return RunReport(rows=len(out_rows), output_path=spec.output_path)

    def run(self, spec: WorkloadSpec) -> RunReport:
        """The full step: decrypt inputs, compute, write encrypted output.
        Nothing is written unless the inputs verified."""
        model, rows = self.workload_open_inputs(spec)
        out_rows = self.workload_compute(model, rows)
        return self.workload_write_output(spec, out_rows)


def enclave_start(final: FinalManifest, host_root,
                  platform: PlatformIdentity | None = None,
                  cert_chain: CertChain | None = None,
                  isv_svn: int = DEFAULT_ISV_SVN) -> EnclaveInstance:
    """Compute the measurement, build the mount view, and pin every trusted
    file; any mismatch aborts the start."""
    measurement = compute_measurement(final)
    mounts = []
    for m in final.template.mounts:
        host_dir = os.path.join(str(host_root), m.host_path.lstrip("/"))
        if not os.path.isdir(host_dir):
            raise StartError("missing_mount", f"{m.enclave_path} -> {host_dir}")
        mounts.append((m.enclave_path.rstrip("/") or "/", host_dir))
    mounts.sort(key=lambda pair: len(pair[0]), reverse=True)

    instance = EnclaveInstance(final, measurement, host_root, mounts,
                               platform, cert_chain, isv_svn)
    for path in final.template.trusted_files:
        try:
            content = open(instance.resolve(path), "rb").read()
        except (EnclaveAccessError, OSError):
            raise StartError("trusted_file_mismatch", path)
        if crypto.hash_data(content) != final.trusted_file_hashes[path]:
            raise StartError("trusted_file_mismatch", path)
    return instance


# -- user-side tooling (runs on the data owner's machine) -----------------

def user_encrypt_inputs(items, master_key: bytes, out_dir) -> list[str]:
    """Encrypt (plaintext_path, enclave_path) pairs into protected
    containers under out_dir, labeled with their destination enclave
    paths. Returns the written host paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for src, enclave_path in items:
        with open(src, "rb") as fh:
            content = fh.read()
        dest = os.path.join(str(out_dir), os.path.basename(enclave_path))
        with ProtectedFile.create(dest, enclave_path, master_key) as pf:
            pf.write(0, content)
        written.append(dest)
    return written


def user_decrypt_output(path, master_key: bytes, label: str) -> bytes:
    with ProtectedFile.open(path, label, master_key) as pf:
        return pf.read(0, pf.size)
