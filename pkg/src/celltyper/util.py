"""Deterministic seed derivation and content digests.

Every stochastic subsystem derives its own child seed from the single root
seed by hashing a stable label, so adding a new subsystem never shifts the
random streams of existing ones. Digests are sha256 over raw array bytes
plus dtype and shape, which makes bit-identity checks cheap.
"""

import hashlib
import json

import numpy as np


def child_seed(root_seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{root_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(root_seed: int, label: str) -> np.random.Generator:
    """Generator seeded from the root seed and a subsystem label."""
    return np.random.default_rng(child_seed(root_seed, label))


def array_digest(*arrays) -> str:
    """sha256 over dtype, shape and bytes of each array, in order."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def stable_json(obj) -> str:
    """Canonical JSON used for digests and log payloads."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax stabilized by max-subtraction; preserves dtype."""
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def json_digest(obj) -> str:
    return text_digest(stable_json(obj))


def first_json_object(text: str, required_keys=()) -> dict | None:
    """First balanced JSON object in free text that has every required key.

    Scans candidate opening braces and lets the JSON decoder handle nesting
    and strings; returns None when nothing qualifies.
    """
    decoder = json.JSONDecoder()
    pos = text.find("{")
    while pos != -1:
        try:
            obj, _ = decoder.raw_decode(text, pos)
        except ValueError:
            pos = text.find("{", pos + 1)
            continue
        if isinstance(obj, dict) and all(k in obj for k in required_keys):
            return obj
        pos = text.find("{", pos + 1)
    return None
