"""On-disk layout of the protected file container (see FORMAT.md).

All integers little-endian. The file is a fixed 512-byte header followed
by sealed 4096+16 byte nodes: Merkle-tree (MHT) nodes in breadth-first
order, then data blocks in index order.

Header (512 bytes):
    0   8   magic "SEALPFS1"
    8   4   version u32 = 1
    12  16  file_uuid (random, set at creation)
    28  12  header nonce
    40  2   meta_len u16
    42  ..  sealed_meta (AEAD, aad = magic || version || uuid)
    ..  512 zero padding (enforced)

sealed_meta plaintext:
    0   2          label_len u16
    2   label_len  filename label, UTF-8, <= 256 bytes
    +0  8          file_size u64 (logical bytes)
    +8  12         root node nonce   } all-zero when the file is empty
    +20 32         root node digest  }

Every MHT node plaintext is 64 child entries of 44 bytes (12-byte nonce,
32-byte SHA-256 of the child's sealed bytes), zero-padded to 4096. The
bottom MHT level points at data blocks, upper levels at MHT nodes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

MAGIC = b"SEALPFS1"
VERSION = 1
HEADER_SIZE = 512
BLOCK_SIZE = 4096
TAG_SIZE = 16
NODE_DISK_SIZE = BLOCK_SIZE + TAG_SIZE
FANOUT = 64
NONCE_SIZE = 12
DIGEST_SIZE = 32
ENTRY_SIZE = NONCE_SIZE + DIGEST_SIZE
UUID_SIZE = 16
MAX_LABEL = 256

KIND_HEADER = "hdr"
KIND_MHT = "mht"
KIND_DATA = "data"


class PfsError(Exception):
    """Base error for the protected file container."""


class IntegrityError(PfsError):
    """Structural corruption or failed node authentication."""


class WrongKeyError(IntegrityError):
    """Header did not authenticate: wrong master key (or a tampered header)."""


@dataclass(frozen=True)
class ChildEntry:
    nonce: bytes
    digest: bytes

    def pack(self) -> bytes:
        return self.nonce + self.digest


ZERO_ENTRY = ChildEntry(b"\x00" * NONCE_SIZE, b"\x00" * DIGEST_SIZE)


def data_block_count(file_size: int) -> int:
    return (file_size + BLOCK_SIZE - 1) // BLOCK_SIZE


def mht_level_counts(n_blocks: int) -> list[int]:
    """Node count per MHT level, top-down (root level first). [] when empty."""
    if n_blocks == 0:
        return []
    counts = []
    m = (n_blocks + FANOUT - 1) // FANOUT
    counts.append(m)
    while m > 1:
        m = (m + FANOUT - 1) // FANOUT
        counts.append(m)
    counts.reverse()
    return counts


def total_mht_nodes(n_blocks: int) -> int:
    return sum(mht_level_counts(n_blocks))


def mht_global_index(levels: list[int], level_idx: int, j: int) -> int:
    return sum(levels[:level_idx]) + j


def mht_disk_offset(global_index: int) -> int:
    return HEADER_SIZE + global_index * NODE_DISK_SIZE


def data_disk_offset(total_mht: int, block_index: int) -> int:
    return HEADER_SIZE + (total_mht + block_index) * NODE_DISK_SIZE


def container_disk_size(n_blocks: int) -> int:
    return HEADER_SIZE + (total_mht_nodes(n_blocks) + n_blocks) * NODE_DISK_SIZE


def blocks_from_total_nodes(total_nodes: int) -> int:
    """Invert n + total_mht_nodes(n) == total_nodes; raises if no shape fits."""
    for n in range(total_nodes + 1):
        if n + total_mht_nodes(n) == total_nodes:
            return n
    raise IntegrityError(f"no tree shape yields {total_nodes} nodes")


def pack_mht_plaintext(entries: list[ChildEntry]) -> bytes:
    if len(entries) > FANOUT:
        raise ValueError("too many entries for one MHT node")
    body = b"".join(e.pack() for e in entries)
    return body + b"\x00" * (BLOCK_SIZE - len(body))


def unpack_entry(plaintext: bytes, slot: int) -> ChildEntry:
    off = slot * ENTRY_SIZE
    raw = plaintext[off:off + ENTRY_SIZE]
    return ChildEntry(raw[:NONCE_SIZE], raw[NONCE_SIZE:])


def node_aad(uuid: bytes, kind: str, index: int) -> bytes:
    return kind.encode("ascii") + uuid + struct.pack("<Q", index)


def header_aad(uuid: bytes) -> bytes:
    return MAGIC + struct.pack("<I", VERSION) + uuid


def pack_meta(label: bytes, file_size: int, root: ChildEntry) -> bytes:
    return struct.pack("<H", len(label)) + label + struct.pack("<Q", file_size) + root.pack()


def unpack_meta(meta: bytes) -> tuple[bytes, int, ChildEntry]:
    if len(meta) < 2:
        raise IntegrityError("metadata too short")
    (label_len,) = struct.unpack_from("<H", meta, 0)
    expect = 2 + label_len + 8 + ENTRY_SIZE
    if label_len > MAX_LABEL or len(meta) != expect:
        raise IntegrityError("metadata length inconsistent")
    label = meta[2:2 + label_len]
    (file_size,) = struct.unpack_from("<Q", meta, 2 + label_len)
    root_raw = meta[2 + label_len + 8:]
    root = ChildEntry(root_raw[:NONCE_SIZE], root_raw[NONCE_SIZE:])
    return label, file_size, root


def pack_header(uuid: bytes, header_nonce: bytes, sealed_meta: bytes) -> bytes:
    if len(sealed_meta) > HEADER_SIZE - 42:
        raise ValueError("sealed metadata does not fit the header region")
    head = (MAGIC + struct.pack("<I", VERSION) + uuid + header_nonce
            + struct.pack("<H", len(sealed_meta)) + sealed_meta)
    return head + b"\x00" * (HEADER_SIZE - len(head))


def split_header(raw: bytes) -> tuple[bytes, bytes, bytes]:
    """Validate the plaintext header region; returns (uuid, nonce, sealed_meta)."""
    if len(raw) != HEADER_SIZE:
        raise IntegrityError("truncated header")
    if raw[:8] != MAGIC:
        raise IntegrityError("bad magic")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != VERSION:
        raise IntegrityError(f"unsupported version {version}")
    uuid = raw[12:28]
    nonce = raw[28:40]
    (meta_len,) = struct.unpack_from("<H", raw, 40)
    if meta_len < TAG_SIZE or meta_len > HEADER_SIZE - 42:
        raise IntegrityError("metadata length out of range")
    sealed_meta = raw[42:42 + meta_len]
    if any(raw[42 + meta_len:]):
        raise IntegrityError("nonzero header padding")
    return uuid, nonce, sealed_meta
