"""Authenticated encrypted file container: 4KB blocks under a Merkle tree,
per-node derived keys, integrity-protected filename, LRU block cache."""

from .cache import DEFAULT_CAPACITY, BlockCache
from .file import (
    ProtectedFile,
    ReadOnlyError,
    VerifyReport,
    derive_node_key,
    info,
    read_uuid,
    verify_file,
)
from .format import BLOCK_SIZE, IntegrityError, PfsError, WrongKeyError

__all__ = [
    "BLOCK_SIZE",
    "BlockCache",
    "DEFAULT_CAPACITY",
    "IntegrityError",
    "PfsError",
    "ProtectedFile",
    "ReadOnlyError",
    "VerifyReport",
    "WrongKeyError",
    "derive_node_key",
    "info",
    "read_uuid",
    "verify_file",
]
