import hashlib
import random

import pytest

from enclavesim import manifest
from enclavesim.manifest import (
    FinalManifest,
    ManifestTemplate,
    MissingFileError,
    MountEntry,
    ParseError,
    compute_measurement,
    load,
    parse_template,
    serialize,
    sign_manifest,
)

MINIMAL = """\
# demo template
app.entrypoint = /app/run
fs.mount = data:/data
sgx.enclave_size = 1M
sgx.max_threads = 1
"""

FULL = """\
app.entrypoint = /app/infer
app.arg = --rows
app.arg = 4
env.HOME = /
env.MODE = strict
fs.mount = app:/app
fs.mount = data:/data
sgx.enclave_size = 4M
sgx.max_threads = 2
sgx.trusted_file = /app/config
sgx.protected_file = /data
"""


def resolver(files):
    def resolve(path):
        return files[path]
    return resolve


# -- parse_template -----------------------------------------------------

def test_minimal_template_parses():
    t = parse_template(MINIMAL)
    assert t.entrypoint == "/app/run"
    assert t.mounts == [MountEntry("data", "/data")]
    assert t.enclave_size == 1 << 20
    assert t.max_threads == 1


def test_full_template_parses():
    t = parse_template(FULL)
    assert t.args == ["--rows", "4"]
    assert t.env == {"HOME": "/", "MODE": "strict"}
    assert t.trusted_files == ["/app/config"]
    assert t.protected_files == ["/data"]


def test_trusted_and_protected_overlap_rejected():
    text = MINIMAL + "sgx.trusted_file = /data/x\nsgx.protected_file = /data/x\n"
    with pytest.raises(ParseError, match="both trusted and protected"):
        parse_template(text)


def test_non_power_of_two_enclave_size_rejected():
    with pytest.raises(ParseError, match="power of two"):
        parse_template(MINIMAL.replace("1M", "3M"))


def test_enclave_size_below_minimum_rejected():
    with pytest.raises(ParseError, match="power of two"):
        parse_template(MINIMAL.replace("1M", "512K"))


def test_unknown_key_rejected_with_line_number():
    text = MINIMAL + "sgx.bogus = 1\n"
    with pytest.raises(ParseError, match="line 6") as exc:
        parse_template(text)
    assert exc.value.line == 6


def test_duplicate_scalar_key_rejected():
    with pytest.raises(ParseError, match="duplicate"):
        parse_template(MINIMAL + "sgx.max_threads = 2\n")


def test_missing_entrypoint_rejected():
    text = "\n".join(MINIMAL.splitlines()[2:])
    with pytest.raises(ParseError, match="entrypoint"):
        parse_template(text)


def test_relative_enclave_mount_rejected():
    with pytest.raises(ParseError, match="absolute"):
        parse_template(MINIMAL.replace("data:/data", "data:data"))


def test_duplicate_mount_target_rejected():
    with pytest.raises(ParseError, match="duplicate enclave mount"):
        parse_template(MINIMAL + "fs.mount = other:/data\n")


def test_max_threads_zero_rejected():
    with pytest.raises(ParseError, match="max_threads"):
        parse_template(MINIMAL.replace("max_threads = 1", "max_threads = 0"))


# -- sign_manifest ------------------------------------------------------

def test_sign_with_zero_trusted_files():
    final = sign_manifest(parse_template(MINIMAL), resolver({}))
    assert final.trusted_file_hashes == {}


def test_sign_hashes_match_independent_sha256():
    t = parse_template(FULL)
    final = sign_manifest(t, resolver({"/app/config": b"abc"}))
    assert final.trusted_file_hashes["/app/config"] == hashlib.sha256(b"abc").digest()


def test_sign_missing_file():
    with pytest.raises(MissingFileError) as exc:
        sign_manifest(parse_template(FULL), resolver({}))
    assert exc.value.path == "/app/config"


def test_changing_one_file_changes_exactly_that_entry():
    text = FULL + "sgx.trusted_file = /app/other\n"
    t = parse_template(text)
    a = sign_manifest(t, resolver({"/app/config": b"one", "/app/other": b"two"}))
    b = sign_manifest(t, resolver({"/app/config": b"one!", "/app/other": b"two"}))
    assert a.trusted_file_hashes["/app/other"] == b.trusted_file_hashes["/app/other"]
    assert a.trusted_file_hashes["/app/config"] != b.trusted_file_hashes["/app/config"]


def test_sign_never_reads_protected_files():
    accessed = []

    def recording(path):
        accessed.append(path)
        return b"content"

    sign_manifest(parse_template(FULL), recording)
    assert accessed == ["/app/config"]


# -- measurement --------------------------------------------------------

def demo_final():
    return sign_manifest(parse_template(FULL), resolver({"/app/config": b"cfg"}))


def test_measurement_deterministic():
    assert compute_measurement(demo_final()) == compute_measurement(demo_final())


def test_measurement_ignores_env_insertion_order():
    final = demo_final()
    t = final.template
    reordered = ManifestTemplate(
        entrypoint=t.entrypoint, args=list(t.args),
        env=dict(reversed(list(t.env.items()))),
        mounts=list(t.mounts), trusted_files=list(t.trusted_files),
        protected_files=list(t.protected_files),
        enclave_size=t.enclave_size, max_threads=t.max_threads)
    other = FinalManifest(template=reordered,
                          trusted_file_hashes=dict(final.trusted_file_hashes))
    assert compute_measurement(other) == compute_measurement(final)


def test_measurement_changes_with_max_threads():
    final = demo_final()
    final.template.max_threads = 1
    one = compute_measurement(final)
    final.template.max_threads = 2
    assert compute_measurement(final) != one


def test_measurement_sensitive_to_single_field_mutations():
    rng = random.Random(41)
    final = demo_final()
    base = compute_measurement(final)
    assert compute_measurement(load(serialize(final))) == base

    mutators = [
        lambda t: t.args.append("--extra"),
        lambda t: t.env.__setitem__("NEW", "v"),
        lambda t: t.env.__setitem__("HOME", "/other"),
        lambda t: t.mounts.append(MountEntry("x", "/x")),
        lambda t: setattr(t, "entrypoint", "/app/infer2"),
        lambda t: setattr(t, "enclave_size", t.enclave_size * 2),
        lambda t: setattr(t, "max_threads", t.max_threads + 1),
        lambda t: t.protected_files.append("/data2"),
    ]
    for _ in range(100):
        final = demo_final()
        choice = rng.randrange(len(mutators) + 1)
        if choice == len(mutators):
            # mutate a trusted-file hash
            final.trusted_file_hashes["/app/config"] = rng.randbytes(32)
        else:
            mutators[choice](final.template)
        assert compute_measurement(final) != base


# -- serialize / load ---------------------------------------------------

def test_roundtrip_demo_manifest():
    final = demo_final()
    again = load(serialize(final))
    assert again.template == final.template
    assert again.trusted_file_hashes == final.trusted_file_hashes
    assert compute_measurement(again) == compute_measurement(final)


def test_serialize_stable():
    assert serialize(demo_final()) == serialize(demo_final())


def test_serialize_fixed_point():
    data = serialize(demo_final())
    assert serialize(load(data)) == data


def test_load_truncated():
    data = serialize(demo_final())
    with pytest.raises(ParseError):
        load(data[:40])


def test_load_rejects_hash_set_mismatch():
    data = serialize(demo_final()).decode()
    data += "sgx.trusted_file = /app/unhashed\n"
    with pytest.raises(ParseError, match="differ"):
        load(data.encode())


def test_resolver_for_root(tmp_path):
    (tmp_path / "app").mkdir()
    (tmp_path / "app" / "config").write_bytes(b"hello")
    t = parse_template(FULL)
    resolve = manifest.resolver_for_root(tmp_path, t.mounts)
    assert resolve("/app/config") == b"hello"
    with pytest.raises(FileNotFoundError):
        resolve("/nope/file")
