"""Small shared helpers: seeding, hashing, canonical JSON, bounded thread maps."""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

_MAX_THREADS = 1


def set_max_threads(n: int) -> None:
    global _MAX_THREADS
    _MAX_THREADS = max(1, int(n))


def get_max_threads() -> int:
    return _MAX_THREADS


def parallel_map(fn, items, threads=None):
    """Map preserving input order; bounded by the global thread cap.

    Results are ordered, so output is deterministic regardless of thread count.
    """
    items = list(items)
    n = _MAX_THREADS if threads is None else max(1, int(threads))
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def stable_seed(*parts) -> int:
    """Derive a reproducible 63-bit seed from arbitrary string/int parts."""
    h = hashlib.sha256(("/".join(str(p) for p in parts)).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little") & 0x7FFFFFFFFFFFFFFF


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(stable_seed(*parts))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def sha256_file(path, chunk=1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            block = f.read(chunk)
            if not block:
                break
            h.update(block)
    return h.hexdigest()


def sha256_tree(root) -> str:
    """Hash a directory tree: relative paths + file contents, sorted."""
    h = hashlib.sha256()
    entries = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            full = os.path.join(dirpath, name)
            entries.append((os.path.relpath(full, root), full))
    for rel, full in sorted(entries):
        h.update(rel.encode("utf-8"))
        h.update(b"\0")
        h.update(bytes.fromhex(sha256_file(full)))
    return h.hexdigest()


def format_float(x: float) -> str:
    """Shortest round-trip decimal form; stable across runs."""
    return repr(float(x))
