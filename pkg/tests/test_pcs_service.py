import pytest

from enclavesim.attestation import PcsDatabase, VerificationPolicy, quote_generate, quote_verify
from enclavesim.pcs_service import (
    PcsClientError,
    PcsServer,
    fetch_platform,
    register_platform,
    revoke_platform,
)

NOW = 1_700_000_000


@pytest.fixture()
def server(tmp_path):
    db = PcsDatabase.create(now=NOW)
    srv = PcsServer(db, db_path=tmp_path / "pcs.json", now_source=lambda: NOW).start()
    yield srv
    srv.stop()


def test_register_and_fetch_over_wire(server):
    platform, chain = register_platform(server.address, tcb_level=3)
    fetched_chain, crl = fetch_platform(server.address, platform.platform_id)
    assert fetched_chain == chain
    assert platform.platform_id not in crl.revoked

    policy = VerificationPolicy(accepted_root=server.db.root_public_key)
    quote = quote_generate(platform, b"\x01" * 32, b"\x02" * 32, 1, b"\x00" * 64)
    assert quote_verify(quote, fetched_chain, crl, policy, NOW).ok


def test_fetch_unknown_platform_over_wire(server):
    with pytest.raises(PcsClientError, match="unknown_platform"):
        fetch_platform(server.address, b"\x00" * 16)


def test_revoke_over_wire(server):
    platform, _ = register_platform(server.address, tcb_level=3)
    crl = revoke_platform(server.address, platform.platform_id)
    assert platform.platform_id in crl.revoked
    _, fetched_crl = fetch_platform(server.address, platform.platform_id)
    assert fetched_crl.sequence == crl.sequence


def test_mutations_persisted(server, tmp_path):
    platform, _ = register_platform(server.address, tcb_level=3)
    revoke_platform(server.address, platform.platform_id)
    reloaded = PcsDatabase.load(tmp_path / "pcs.json")
    assert platform.platform_id in reloaded.revoked
    chain, crl = reloaded.fetch(platform.platform_id)
    assert platform.platform_id in crl.revoked


def test_crl_signature_survives_wire_roundtrip(server):
    platform, _ = register_platform(server.address, tcb_level=3)
    chain, crl = fetch_platform(server.address, platform.platform_id)
    policy = VerificationPolicy(accepted_root=server.db.root_public_key)
    quote = quote_generate(platform, b"\x01" * 32, b"\x02" * 32, 1, b"\x00" * 64)
    result = quote_verify(quote, chain, crl, policy, NOW)
    assert result.ok
