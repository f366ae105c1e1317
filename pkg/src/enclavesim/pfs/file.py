"""Protected file handle: transparent random-access read/write over the
sealed container, with root-to-leaf verification on every fetched node.

Writes are buffered in memory; flush reseals dirty blocks with fresh
random nonces and rebuilds the MHT spine plus header. A flush interrupted
mid-write can corrupt the container (detected on later reads, not
recovered) -- there is deliberately no journaling.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

from .. import crypto
from . import format as fmt
from .cache import DEFAULT_CAPACITY, BlockCache
from .format import (
    BLOCK_SIZE,
    FANOUT,
    HEADER_SIZE,
    NODE_DISK_SIZE,
    ChildEntry,
    IntegrityError,
    PfsError,
    WrongKeyError,
)

MODE_READ = "r"
MODE_READWRITE = "rw"


class ReadOnlyError(PfsError):
    """Write attempted through a read-only handle."""


@dataclass
class VerifyReport:
    ok: bool
    first_bad_node: str | None = None


class ProtectedFile:
    """Single-owner handle to one protected container on disk."""

    def __init__(self, fh, path, master_key, uuid, label, file_size,
                 disk_blocks, disk_root, mode, cache_capacity):
        self._fh = fh
        self.path = path
        self._master_key = master_key
        self.uuid = uuid
        self.label = label
        self._file_size = file_size
        self._disk_blocks = disk_blocks
        self._disk_root = disk_root
        self._mode = mode
        self._cache = BlockCache(cache_capacity)
        self._dirty: dict[int, bytearray] = {}
        self._closed = False

    # -- construction -------------------------------------------------

    @classmethod
    def create(cls, path, filename_label: str, master_key: bytes, *,
               cache_capacity: int = DEFAULT_CAPACITY,
               file_uuid: bytes | None = None) -> "ProtectedFile":
        """Create an empty protected file (header only) at `path`."""
        label = filename_label.encode("utf-8")
        if len(label) > fmt.MAX_LABEL:
            raise ValueError(f"filename label longer than {fmt.MAX_LABEL} bytes")
        if file_uuid is None:
            file_uuid = os.urandom(fmt.UUID_SIZE)
        elif len(file_uuid) != fmt.UUID_SIZE:
            raise ValueError(f"file uuid must be {fmt.UUID_SIZE} bytes")
        fh = open(path, "wb+")
        handle = cls(fh, path, master_key, file_uuid, filename_label,
                     file_size=0, disk_blocks=0, disk_root=fmt.ZERO_ENTRY,
                     mode=MODE_READWRITE, cache_capacity=cache_capacity)
        handle._write_header(fmt.ZERO_ENTRY)
        fh.flush()
        return handle

    @classmethod
    def open(cls, path, filename_label: str, master_key: bytes,
             mode: str = MODE_READ, *,
             cache_capacity: int = DEFAULT_CAPACITY) -> "ProtectedFile":
        """Open an existing container; authenticates the header and checks
        that the stored filename label matches `filename_label`."""
        if mode not in (MODE_READ, MODE_READWRITE):
            raise ValueError(f"mode must be '{MODE_READ}' or '{MODE_READWRITE}'")
        fh = open(path, "r+b" if mode == MODE_READWRITE else "rb")
        try:
            raw = fh.read(HEADER_SIZE)
            if len(raw) < HEADER_SIZE:
                raise IntegrityError("file shorter than the header")
            uuid, nonce, sealed_meta = fmt.split_header(raw)
            header_key = _node_key(master_key, uuid, fmt.KIND_HEADER, 0)
            try:
                meta = crypto.aead_open(header_key, nonce, fmt.header_aad(uuid), sealed_meta)
            except crypto.AuthError:
                raise WrongKeyError("header did not authenticate (wrong key or tampered header)")
            label, file_size, root = fmt.unpack_meta(meta)
            if label != filename_label.encode("utf-8"):
                raise IntegrityError(
                    f"filename label mismatch: container was created as "
                    f"{label.decode('utf-8', 'replace')!r}")
            return cls(fh, path, master_key, uuid, filename_label, file_size,
                       disk_blocks=fmt.data_block_count(file_size), disk_root=root,
                       mode=mode, cache_capacity=cache_capacity)
        except Exception:
            fh.close()
            raise

    # -- public surface -----------------------------------------------

    @property
    def size(self) -> int:
        return self._file_size

    def read(self, offset: int, length: int) -> bytes:
        """Plaintext bytes at [offset, offset+length); every touched block is
        verified root-to-leaf before any plaintext is returned."""
        self._check_open()
        if offset < 0 or length < 0:
            raise ValueError("negative offset or length")
        if offset + length > self._file_size:
            raise ValueError("read past end of file")
        out = bytearray()
        pos = offset
        end = offset + length
        while pos < end:
            block = pos // BLOCK_SIZE
            lo = pos % BLOCK_SIZE
            hi = min(BLOCK_SIZE, end - block * BLOCK_SIZE)
            out += self._block_plaintext(block)[lo:hi]
            pos = block * BLOCK_SIZE + hi
        return bytes(out)

    def write(self, offset: int, data: bytes) -> None:
        """Buffer `data` at `offset`, extending the file if needed; gaps
        created by extending writes read back as zeros."""
        self._check_open()
        if self._mode != MODE_READWRITE:
            raise ReadOnlyError("handle opened read-only")
        if offset < 0:
            raise ValueError("negative offset")
        if not data:
            return
        pos = offset
        end = offset + len(data)
        src = 0
        while pos < end:
            block = pos // BLOCK_SIZE
            lo = pos % BLOCK_SIZE
            hi = min(BLOCK_SIZE, end - block * BLOCK_SIZE)
            buf = self._dirty.get(block)
            if buf is None:
                buf = bytearray(self._block_plaintext(block))
                self._dirty[block] = buf
            buf[lo:hi] = data[src:src + (hi - lo)]
            src += hi - lo
            pos = block * BLOCK_SIZE + hi
        self._file_size = max(self._file_size, end)

    def flush(self) -> None:
        """Reseal dirty blocks with fresh nonces, rebuild the MHT and header.
        No-op when nothing changed since the last flush."""
        self._check_open()
        if not self._dirty and fmt.data_block_count(self._file_size) == self._disk_blocks:
            return
        if self._mode != MODE_READWRITE:
            return

        old_n = self._disk_blocks
        old_total = fmt.total_mht_nodes(old_n)
        new_n = fmt.data_block_count(self._file_size)
        new_levels = fmt.mht_level_counts(new_n)
        new_total = sum(new_levels)
        relocate = new_total != old_total

        # collect phase: nothing on disk is modified until every byte that
        # the new layout needs has been read (blocks shift when the MHT
        # node count changes)
        entries: dict[int, ChildEntry] = {}
        if old_n:
            old_levels = fmt.mht_level_counts(old_n)
            bottom = len(old_levels) - 1
            for j in range(old_levels[bottom]):
                plain = self._fetch_mht_plaintext(old_levels, bottom, j)
                for slot in range(min(FANOUT, old_n - j * FANOUT)):
                    entries[j * FANOUT + slot] = fmt.unpack_entry(plain, slot)

        to_write: dict[int, bytes] = {}
        for i in range(new_n):
            if i in self._dirty:
                sealed, entry = self._seal_data_block(i, bytes(self._dirty[i]))
                to_write[i] = sealed
                entries[i] = entry
            elif i >= old_n:
                sealed, entry = self._seal_data_block(i, b"\x00" * BLOCK_SIZE)
                to_write[i] = sealed
                entries[i] = entry
            elif relocate:
                self._fh.seek(fmt.data_disk_offset(old_total, i))
                sealed = self._fh.read(NODE_DISK_SIZE)
                if len(sealed) != NODE_DISK_SIZE:
                    raise IntegrityError(f"data block {i} truncated on disk")
                to_write[i] = sealed

        # write phase
        for i, sealed in to_write.items():
            self._fh.seek(fmt.data_disk_offset(new_total, i))
            self._fh.write(sealed)

        child_entries = [entries[i] for i in range(new_n)]
        root = fmt.ZERO_ENTRY
        for level_idx in range(len(new_levels) - 1, -1, -1):
            level_entries = []
            for j in range(new_levels[level_idx]):
                node_entries = child_entries[j * FANOUT:(j + 1) * FANOUT]
                plain = fmt.pack_mht_plaintext(node_entries)
                g = fmt.mht_global_index(new_levels, level_idx, j)
                key = _node_key(self._master_key, self.uuid, fmt.KIND_MHT, g)
                nonce = os.urandom(fmt.NONCE_SIZE)
                sealed = crypto.aead_seal(key, nonce, fmt.node_aad(self.uuid, fmt.KIND_MHT, g), plain)
                self._fh.seek(fmt.mht_disk_offset(g))
                self._fh.write(sealed)
                level_entries.append(ChildEntry(nonce, crypto.hash_data(sealed)))
            child_entries = level_entries
        if new_levels:
            root = child_entries[0]

        self._write_header(root)
        self._fh.truncate(fmt.container_disk_size(new_n))
        self._fh.flush()

        self._disk_blocks = new_n
        self._disk_root = root
        self._dirty.clear()
        self._cache.clear()

    def close(self) -> None:
        if self._closed:
            return
        if self._mode == MODE_READWRITE:
            self.flush()
        self._fh.close()
        self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- internals ----------------------------------------------------

    def _check_open(self):
        if self._closed:
            raise PfsError("handle is closed")

    def _seal_data_block(self, index: int, plaintext: bytes) -> tuple[bytes, ChildEntry]:
        key = _node_key(self._master_key, self.uuid, fmt.KIND_DATA, index)
        nonce = os.urandom(fmt.NONCE_SIZE)
        sealed = crypto.aead_seal(key, nonce, fmt.node_aad(self.uuid, fmt.KIND_DATA, index), plaintext)
        return sealed, ChildEntry(nonce, crypto.hash_data(sealed))

    def _block_plaintext(self, index: int) -> bytes:
        if index in self._dirty:
            return bytes(self._dirty[index])
        if index >= self._disk_blocks:
            return b"\x00" * BLOCK_SIZE
        return self._fetch_data_plaintext(index)

    def _fetch_data_plaintext(self, index: int) -> bytes:
        cached = self._cache.get(("data", index))
        if cached is not None:
            return cached
        levels = fmt.mht_level_counts(self._disk_blocks)
        bottom = self._fetch_mht_plaintext(levels, len(levels) - 1, index // FANOUT)
        entry = fmt.unpack_entry(bottom, index % FANOUT)
        total = sum(levels)
        sealed = self._read_node(fmt.data_disk_offset(total, index), f"data block {index}")
        if crypto.hash_data(sealed) != entry.digest:
            raise IntegrityError(f"data block {index} digest mismatch")
        key = _node_key(self._master_key, self.uuid, fmt.KIND_DATA, index)
        try:
            plain = crypto.aead_open(key, entry.nonce, fmt.node_aad(self.uuid, fmt.KIND_DATA, index), sealed)
        except crypto.AuthError:
            raise IntegrityError(f"data block {index} failed authentication")
        self._cache.put(("data", index), plain)
        return plain

    def _fetch_mht_plaintext(self, levels: list[int], level_idx: int, j: int) -> bytes:
        g = fmt.mht_global_index(levels, level_idx, j)
        cached = self._cache.get(("mht", g))
        if cached is not None:
            return cached
        if level_idx == 0:
            entry = self._disk_root
        else:
            parent = self._fetch_mht_plaintext(levels, level_idx - 1, j // FANOUT)
            entry = fmt.unpack_entry(parent, j % FANOUT)
        sealed = self._read_node(fmt.mht_disk_offset(g), f"MHT node {g}")
        if crypto.hash_data(sealed) != entry.digest:
            raise IntegrityError(f"MHT node {g} digest mismatch")
        key = _node_key(self._master_key, self.uuid, fmt.KIND_MHT, g)
        try:
            plain = crypto.aead_open(key, entry.nonce, fmt.node_aad(self.uuid, fmt.KIND_MHT, g), sealed)
        except crypto.AuthError:
            raise IntegrityError(f"MHT node {g} failed authentication")
        self._cache.put(("mht", g), plain)
        return plain

    def _read_node(self, offset: int, what: str) -> bytes:
        self._fh.seek(offset)
        sealed = self._fh.read(NODE_DISK_SIZE)
        if len(sealed) != NODE_DISK_SIZE:
            raise IntegrityError(f"{what} truncated on disk")
        return sealed

    def _write_header(self, root: ChildEntry) -> None:
        meta = fmt.pack_meta(self.label.encode("utf-8"), self._file_size, root)
        key = _node_key(self._master_key, self.uuid, fmt.KIND_HEADER, 0)
        nonce = os.urandom(fmt.NONCE_SIZE)
        sealed = crypto.aead_seal(key, nonce, fmt.header_aad(self.uuid), meta)
        self._fh.seek(0)
        self._fh.write(fmt.pack_header(self.uuid, nonce, sealed))


def _node_key(master_key: bytes, uuid: bytes, kind: str, index: int) -> bytes:
    return crypto.kdf(master_key, kind, uuid + struct.pack("<Q", index))


def derive_node_key(master_key: bytes, kind: str, node_index: int, file_uuid: bytes) -> bytes:
    """Per-node key: kdf(master, kind label, uuid || index)."""
    if kind not in (fmt.KIND_HEADER, fmt.KIND_MHT, fmt.KIND_DATA):
        raise ValueError(f"unknown node kind {kind!r}")
    return _node_key(master_key, file_uuid, kind, node_index)


def read_uuid(path) -> bytes:
    """The container uuid, readable without the key."""
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise IntegrityError("file shorter than the header")
    uuid, _, _ = fmt.split_header(raw)
    return uuid


def info(path, master_key: bytes | None = None) -> dict:
    """Container facts: uuid, node/block counts; label and logical size too
    when the key is supplied."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < HEADER_SIZE:
        raise IntegrityError("file shorter than the header")
    uuid, nonce, sealed_meta = fmt.split_header(data[:HEADER_SIZE])
    body = len(data) - HEADER_SIZE
    if body % NODE_DISK_SIZE:
        raise IntegrityError("body is not a whole number of nodes")
    total_nodes = body // NODE_DISK_SIZE
    n_blocks = fmt.blocks_from_total_nodes(total_nodes)
    result = {
        "uuid": uuid.hex(),
        "total_nodes": total_nodes,
        "data_blocks": n_blocks,
        "mht_nodes": total_nodes - n_blocks,
        "disk_size": len(data),
    }
    if master_key is not None:
        header_key = _node_key(master_key, uuid, fmt.KIND_HEADER, 0)
        try:
            meta = crypto.aead_open(header_key, nonce, fmt.header_aad(uuid), sealed_meta)
        except crypto.AuthError:
            raise WrongKeyError("header did not authenticate (wrong key or tampered header)")
        label, file_size, _ = fmt.unpack_meta(meta)
        if fmt.data_block_count(file_size) != n_blocks:
            raise IntegrityError("block count does not match the recorded file size")
        result["label"] = label.decode("utf-8", "replace")
        result["file_size"] = file_size
    return result


def verify_file(path, master_key: bytes) -> VerifyReport:
    """Audit every node root-to-leaf; reports the first failure instead of
    raising."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError:
        raise
    if len(data) < HEADER_SIZE:
        return VerifyReport(False, "header")

    try:
        uuid, nonce, sealed_meta = fmt.split_header(data[:HEADER_SIZE])
        header_key = _node_key(master_key, uuid, fmt.KIND_HEADER, 0)
        meta = crypto.aead_open(header_key, nonce, fmt.header_aad(uuid), sealed_meta)
        label, file_size, root = fmt.unpack_meta(meta)
    except (IntegrityError, crypto.AuthError):
        return VerifyReport(False, "header")

    n_blocks = fmt.data_block_count(file_size)
    if len(data) != fmt.container_disk_size(n_blocks):
        return VerifyReport(False, "structure")
    if n_blocks == 0:
        return VerifyReport(True)

    levels = fmt.mht_level_counts(n_blocks)
    total = sum(levels)

    def node_bytes(disk_index):
        off = HEADER_SIZE + disk_index * NODE_DISK_SIZE
        return data[off:off + NODE_DISK_SIZE]

    # walk the MHT top-down, keeping each level's verified plaintexts
    parent_plain: list[bytes] = []
    for level_idx, count in enumerate(levels):
        level_plain = []
        for j in range(count):
            g = fmt.mht_global_index(levels, level_idx, j)
            entry = root if level_idx == 0 else fmt.unpack_entry(parent_plain[j // FANOUT], j % FANOUT)
            sealed = node_bytes(g)
            if crypto.hash_data(sealed) != entry.digest:
                return VerifyReport(False, f"mht:{g}")
            key = _node_key(master_key, uuid, fmt.KIND_MHT, g)
            try:
                plain = crypto.aead_open(key, entry.nonce, fmt.node_aad(uuid, fmt.KIND_MHT, g), sealed)
            except crypto.AuthError:
                return VerifyReport(False, f"mht:{g}")
            level_plain.append(plain)
        parent_plain = level_plain

    for i in range(n_blocks):
        entry = fmt.unpack_entry(parent_plain[i // FANOUT], i % FANOUT)
        sealed = node_bytes(total + i)
        if crypto.hash_data(sealed) != entry.digest:
            return VerifyReport(False, f"data:{i}")
        key = _node_key(master_key, uuid, fmt.KIND_DATA, i)
        try:
            crypto.aead_open(key, entry.nonce, fmt.node_aad(uuid, fmt.KIND_DATA, i), sealed)
        except crypto.AuthError:
            return VerifyReport(False, f"data:{i}")
    return VerifyReport(True)
