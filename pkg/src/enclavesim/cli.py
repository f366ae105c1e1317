"""Command-line interface.

Subcommand groups: pfs (protected containers), manifest (signer and
measurement), pcs (mock certification service), keyserver (secret
provisioning), enclave (start/run workloads), demo (full workflow).
Exit codes: 0 success, 1 attestation failure, 2 integrity failure,
3 other errors.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

from . import pcs_service, pfs
from .attestation import PcsDatabase, VerificationPolicy
from .channel import HandshakeError
from .enclave import RunError, StartError, WorkloadSpec, enclave_start
from .manifest import (
    ParseError,
    compute_measurement,
    load as load_manifest,
    parse_template,
    resolver_for_root,
    serialize,
    sign_manifest,
)
from .provisioning import (
    KeyServer,
    KeyVault,
    ProvisionDeniedError,
    VaultError,
    vault_load,
    vault_save,
)
from .workflow import DemoConfig, parse_config, workflow_demo

EXIT_OK = 0
EXIT_ATTESTATION = 1
EXIT_INTEGRITY = 2
EXIT_OTHER = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_OTHER):
        self.code = code
        super().__init__(message)


def _key_from_hex(text: str) -> bytes:
    try:
        key = bytes.fromhex(text)
    except ValueError:
        raise CliError("key must be hex")
    if len(key) != 32:
        raise CliError("key must be 32 bytes (64 hex chars)")
    return key


def _addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host:
        raise CliError(f"expected host:port, got {text!r}")
    return host, int(port)


# -- pfs ------------------------------------------------------------------

def cmd_pfs_encrypt(args) -> int:
    key = _key_from_hex(args.key_hex)
    with open(args.input, "rb") as fh:
        data = fh.read()
    with pfs.ProtectedFile.create(args.output, args.label, key) as handle:
        handle.write(0, data)
    print(f"encrypted {len(data)} bytes -> {args.output}")
    return EXIT_OK


def cmd_pfs_decrypt(args) -> int:
    key = _key_from_hex(args.key_hex)
    try:
        with pfs.ProtectedFile.open(args.input, args.label, key) as handle:
            data = handle.read(0, handle.size)
    except pfs.WrongKeyError as exc:
        raise CliError(f"cannot open: {exc}", EXIT_INTEGRITY)
    except pfs.IntegrityError as exc:
        raise CliError(f"integrity failure: {exc}", EXIT_INTEGRITY)
    with open(args.output, "wb") as fh:
        fh.write(data)
    print(f"decrypted {len(data)} bytes -> {args.output}")
    return EXIT_OK


def cmd_pfs_verify(args) -> int:
    key = _key_from_hex(args.key_hex)
    report = pfs.verify_file(args.file, key)
    if report.ok:
        print("ok: every node authenticates")
        return EXIT_OK
    print(f"FAILED at {report.first_bad_node}")
    return 1


def cmd_pfs_info(args) -> int:
    key = _key_from_hex(args.key_hex) if args.key_hex else None
    try:
        meta = pfs.info(args.file, key)
    except pfs.WrongKeyError as exc:
        raise CliError(str(exc), EXIT_INTEGRITY)
    except pfs.IntegrityError as exc:
        raise CliError(f"integrity failure: {exc}", EXIT_INTEGRITY)
    for field in ("uuid", "file_size", "data_blocks", "mht_nodes",
                  "total_nodes", "disk_size", "label"):
        if field in meta:
            print(f"{field}: {meta[field]}")
    return EXIT_OK


# -- manifest ---------------------------------------------------------------

def cmd_manifest_sign(args) -> int:
    import os

    with open(args.template, encoding="utf-8") as fh:
        template = parse_template(fh.read())
    root = args.root or os.path.dirname(os.path.abspath(args.template))
    final = sign_manifest(template, resolver_for_root(root, template.mounts))
    with open(args.output, "wb") as fh:
        fh.write(serialize(final))
    print(compute_measurement(final).hex)
    return EXIT_OK


def cmd_manifest_measure(args) -> int:
    with open(args.final, "rb") as fh:
        final = load_manifest(fh.read())
    print(compute_measurement(final).hex)
    return EXIT_OK


# -- pcs ---------------------------------------------------------------------

def _open_db(path, create: bool) -> PcsDatabase:
    import os

    if os.path.exists(path):
        return PcsDatabase.load(path)
    if not create:
        raise CliError(f"no PCS database at {path}")
    db = PcsDatabase.create(now=int(time.time()))
    db.save(path)
    return db


def cmd_pcs_serve(args) -> int:
    db = _open_db(args.db, create=True)
    host, port = _addr(args.listen)
    server = pcs_service.PcsServer(db, host=host, port=port, db_path=args.db)
    server.start()
    print(f"mock PCS serving on {server.address[0]}:{server.address[1]} "
          f"(root key {db.root_public_key.hex()})")
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        server.stop()
    return EXIT_OK


def cmd_pcs_register(args) -> int:
    db = _open_db(args.db, create=True)
    platform, chain = db.register(tcb_level=args.tcb, now=int(time.time()))
    db.save(args.db)
    print(f"platform_id: {platform.platform_id.hex()}")
    print(f"root_key: {db.root_public_key.hex()}")
    if args.identity_out:
        with open(args.identity_out, "w", encoding="utf-8") as fh:
            json.dump(pcs_service.identity_to_dict(platform, chain), fh, indent=2)
            fh.write("\n")
        print(f"identity written to {args.identity_out}")
    return EXIT_OK


def cmd_pcs_revoke(args) -> int:
    db = _open_db(args.db, create=False)
    try:
        crl = db.revoke(bytes.fromhex(args.platform_id))
    except Exception as exc:
        raise CliError(f"revoke failed: {exc}")
    db.save(args.db)
    print(f"revoked; CRL sequence now {crl.sequence}")
    return EXIT_OK


# -- keyserver ----------------------------------------------------------------

def _policy_from_args(args) -> VerificationPolicy:
    return VerificationPolicy(
        accepted_root=_key_from_hex(args.root_hex),
        expected_mr_enclave=(bytes.fromhex(args.policy_mrenclave)
                             if args.policy_mrenclave else None),
        expected_mr_signer=(bytes.fromhex(args.policy_mrsigner)
                            if args.policy_mrsigner else None),
        min_isv_svn=args.min_svn,
        min_tcb_level=args.min_tcb,
    )


def cmd_keyserver_add_secret(args) -> int:
    import os

    if os.path.exists(args.vault):
        vault = vault_load(args.vault, args.passphrase)
    else:
        vault = KeyVault()
    policy = _policy_from_args(args)
    try:
        vault.add_secret(args.name, bytes.fromhex(args.secret_hex), policy)
    except (VaultError, ValueError) as exc:
        raise CliError(str(exc))
    vault_save(vault, args.vault, args.passphrase)
    print(f"vault now holds {len(vault)} secret(s): {', '.join(vault.names())}")
    return EXIT_OK


def cmd_keyserver_serve(args) -> int:
    from . import crypto

    vault = vault_load(args.vault, args.passphrase)
    session_policy = VerificationPolicy(
        accepted_root=_key_from_hex(args.root_hex),
        min_isv_svn=args.min_svn, min_tcb_level=args.min_tcb)
    if args.signing_key_hex:
        from cryptography.hazmat.primitives.asymmetric import ed25519

        priv = bytes.fromhex(args.signing_key_hex)
        pub = ed25519.Ed25519PrivateKey.from_private_bytes(priv) \
            .public_key().public_bytes_raw()
        signing_key = crypto.SigningKeyPair(priv, pub)
    else:
        signing_key = crypto.sign_generate()

    pcs_addr = _addr(args.pcs)
    host, port = _addr(args.listen)
    server = KeyServer(
        vault, session_policy, signing_key,
        crl_provider=lambda pid: pcs_service.fetch_platform(pcs_addr, pid)[1],
        host=host, port=port, audit_path=args.audit)
    server.start()
    if args.pin_out:
        with open(args.pin_out, "w", encoding="utf-8") as fh:
            fh.write(signing_key.public.hex() + "\n")
    print(f"key server on {server.address[0]}:{server.address[1]}, "
          f"pin {signing_key.public.hex()}")
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        server.stop()
    return EXIT_OK


# -- enclave ------------------------------------------------------------------

def _load_final(path):
    with open(path, "rb") as fh:
        return load_manifest(fh.read())


def cmd_enclave_start(args) -> int:
    try:
        final = _load_final(args.manifest)
        instance = enclave_start(final, args.root)
    except ParseError as exc:
        raise CliError(f"parse: {exc}", EXIT_OTHER)
    except StartError as exc:
        code = EXIT_INTEGRITY if exc.kind == "trusted_file_mismatch" else EXIT_OTHER
        raise CliError(str(exc), code)
    print(f"measurement: {instance.measurement.hex}")
    print(f"mounts: {len(final.template.mounts)}, "
          f"trusted files verified: {len(final.trusted_file_hashes)}")
    return EXIT_OK


def cmd_enclave_run(args) -> int:
    try:
        final = _load_final(args.manifest)
    except ParseError as exc:
        raise CliError(f"parse: {exc}", EXIT_OTHER)
    with open(args.identity, encoding="utf-8") as fh:
        platform, chain = pcs_service.identity_from_dict(json.load(fh))
    try:
        instance = enclave_start(final, args.root, platform=platform,
                                 cert_chain=chain)
    except StartError as exc:
        code = EXIT_INTEGRITY if exc.kind == "trusted_file_mismatch" else EXIT_OTHER
        raise CliError(str(exc), code)

    workload = WorkloadSpec.from_json(instance.read_file(args.workload))
    with open(args.pin_file, encoding="utf-8") as fh:
        pin = bytes.fromhex(fh.read().strip())
    try:
        instance.provision(_addr(args.keyserver), pin, workload.key_name)
    except HandshakeError as exc:
        raise CliError(f"attestation: {exc}", EXIT_ATTESTATION)
    except ProvisionDeniedError as exc:
        raise CliError(f"denied: {exc.reason}", EXIT_ATTESTATION)
    try:
        report = instance.run(workload)
    except RunError as exc:
        raise CliError(str(exc),
                       EXIT_INTEGRITY if exc.kind == "integrity" else EXIT_OTHER)
    print(f"workload complete: {report.rows} row(s) -> {report.output_path}")
    return EXIT_OK


# -- demo ----------------------------------------------------------------------

def cmd_demo(args) -> int:
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            config = parse_config(fh.read())
    else:
        config = DemoConfig()
    if args.fault:
        config.fault = args.fault
    if args.workdir:
        config.workdir = args.workdir
    report = workflow_demo(config)
    print()
    print(report.table())
    passed = sum(1 for s in report.steps if s.ok)
    print(f"\n{passed}/8 steps passed; report: {report.workdir}/demo_report.json")
    return report.exit_code


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="enclavesim",
        description="attested, encrypted ML deployment pipeline (simulated)")
    sub = parser.add_subparsers(dest="group", required=True)

    # pfs
    p_pfs = sub.add_parser("pfs", help="protected file containers")
    pfs_sub = p_pfs.add_subparsers(dest="command", required=True)
    p = pfs_sub.add_parser("encrypt", help="plaintext file -> protected container")
    p.add_argument("input"), p.add_argument("output")
    p.add_argument("--key-hex", required=True)
    p.add_argument("--label", required=True,
                   help="filename label bound into the container")
    p.set_defaults(func=cmd_pfs_encrypt)
    p = pfs_sub.add_parser("decrypt", help="protected container -> plaintext file")
    p.add_argument("input"), p.add_argument("output")
    p.add_argument("--key-hex", required=True)
    p.add_argument("--label", required=True)
    p.set_defaults(func=cmd_pfs_decrypt)
    p = pfs_sub.add_parser("verify", help="audit every node (exit 0/1)")
    p.add_argument("file")
    p.add_argument("--key-hex", required=True)
    p.set_defaults(func=cmd_pfs_verify)
    p = pfs_sub.add_parser("info", help="container facts")
    p.add_argument("file")
    p.add_argument("--key-hex")
    p.set_defaults(func=cmd_pfs_info)

    # manifest
    p_man = sub.add_parser("manifest", help="signer and measurement")
    man_sub = p_man.add_subparsers(dest="command", required=True)
    p = man_sub.add_parser("sign", help="template -> final manifest (prints measurement)")
    p.add_argument("template")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--root", help="host root for trusted-file resolution "
                                  "(default: template directory)")
    p.set_defaults(func=cmd_manifest_sign)
    p = man_sub.add_parser("measure", help="print a final manifest's measurement")
    p.add_argument("final")
    p.set_defaults(func=cmd_manifest_measure)

    # pcs
    p_pcs = sub.add_parser("pcs", help="mock provisioning certification service")
    pcs_sub = p_pcs.add_subparsers(dest="command", required=True)
    p = pcs_sub.add_parser("serve")
    p.add_argument("--db", required=True)
    p.add_argument("--listen", default="127.0.0.1:0")
    p.set_defaults(func=cmd_pcs_serve)
    p = pcs_sub.add_parser("register")
    p.add_argument("--db", required=True)
    p.add_argument("--tcb", type=int, default=1)
    p.add_argument("--identity-out", help="write the platform identity JSON here")
    p.set_defaults(func=cmd_pcs_register)
    p = pcs_sub.add_parser("revoke")
    p.add_argument("platform_id")
    p.add_argument("--db", required=True)
    p.set_defaults(func=cmd_pcs_revoke)

    # keyserver
    p_ks = sub.add_parser("keyserver", help="policy-gated secret provisioning")
    ks_sub = p_ks.add_subparsers(dest="command", required=True)
    p = ks_sub.add_parser("serve")
    p.add_argument("--vault", required=True)
    p.add_argument("--passphrase", required=True)
    p.add_argument("--listen", default="127.0.0.1:0")
    p.add_argument("--pcs", required=True, help="mock PCS host:port (CRL source)")
    p.add_argument("--root-hex", required=True, help="pinned PCS root public key")
    p.add_argument("--min-svn", type=int, default=0)
    p.add_argument("--min-tcb", type=int, default=0)
    p.add_argument("--pin-out", help="write this server's public key hex here")
    p.add_argument("--signing-key-hex", help="long-term Ed25519 private key "
                                             "(default: fresh)")
    p.add_argument("--audit", help="append audit records to this file")
    p.set_defaults(func=cmd_keyserver_serve)
    p = ks_sub.add_parser("add-secret")
    p.add_argument("--vault", required=True)
    p.add_argument("--passphrase", required=True)
    p.add_argument("--name", required=True)
    p.add_argument("--secret-hex", required=True)
    p.add_argument("--root-hex", required=True)
    p.add_argument("--policy-mrenclave")
    p.add_argument("--policy-mrsigner")
    p.add_argument("--min-svn", type=int, default=0)
    p.add_argument("--min-tcb", type=int, default=0)
    p.set_defaults(func=cmd_keyserver_add_secret)

    # enclave
    p_enc = sub.add_parser("enclave", help="simulated enclave host")
    enc_sub = p_enc.add_subparsers(dest="command", required=True)
    p = enc_sub.add_parser("start", help="validate a deployment and print its measurement")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root", required=True)
    p.set_defaults(func=cmd_enclave_start)
    p = enc_sub.add_parser("run", help="start, provision, and run a workload")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root", required=True)
    p.add_argument("--workload", default="/app/workload.json",
                   help="enclave path of the workload spec")
    p.add_argument("--identity", required=True,
                   help="platform identity JSON from 'pcs register'")
    p.add_argument("--keyserver", required=True, help="host:port")
    p.add_argument("--pin-file", required=True,
                   help="file holding the key server's public key hex")
    p.set_defaults(func=cmd_enclave_run)

    # demo
    p = sub.add_parser("demo", help="run the full 8-step workflow")
    p.add_argument("--config", help="demo config file (key = value lines)")
    p.add_argument("--fault", choices=["none", "revoked_platform",
                                       "tamper_input", "wrong_manifest"])
    p.add_argument("--workdir")
    p.set_defaults(func=cmd_demo)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (pfs.PfsError, ParseError, VaultError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY if isinstance(exc, pfs.IntegrityError) else EXIT_OTHER
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
