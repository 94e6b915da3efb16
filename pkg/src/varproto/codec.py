"""Lossless float64 encoding used by checkpoints and the stats registry.

Arrays are written as the big-endian IEEE-754 bytes of every element,
hex-encoded into a single string. A decimal shadow copy is written next to
it for human inspection; only the hex field is read back.
"""

from __future__ import annotations

import json
from typing import Any

import numpy as np

from .errors import FormatError

_BE_F64 = np.dtype(">f8")


def encode_array(a: np.ndarray) -> dict[str, Any]:
    a = np.asarray(a, dtype=np.float64)
    return {
        "shape": list(a.shape),
        "hex": a.astype(_BE_F64).tobytes().hex(),
        "decimal": a.tolist(),
    }


def decode_array(obj: Any, where: str = "array") -> np.ndarray:
    try:
        shape = tuple(int(s) for s in obj["shape"])
        raw = bytes.fromhex(obj["hex"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}: malformed array record ({exc})") from None
    n = int(np.prod(shape)) if shape else 1
    if len(raw) != 8 * n:
        raise FormatError(f"{where}: expected {n} float64 values, found {len(raw) / 8:g}")
    return np.frombuffer(raw, dtype=_BE_F64).astype(np.float64).reshape(shape)


def encode_scalar(x: float) -> dict[str, Any]:
    return {"hex": np.array([x], dtype=_BE_F64).tobytes().hex(), "decimal": float(x)}


def decode_scalar(obj: Any, where: str = "scalar") -> float:
    try:
        raw = bytes.fromhex(obj["hex"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}: malformed scalar record ({exc})") from None
    if len(raw) != 8:
        raise FormatError(f"{where}: scalar must be 8 bytes, found {len(raw)}")
    return float(np.frombuffer(raw, dtype=_BE_F64)[0])


def dumps(obj: Any) -> str:
    """Canonical JSON text: sorted keys, fixed separators, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=1, separators=(",", ": ")) + "\n"


def loads(text: str, source: str = "<string>") -> Any:
    """Parse JSON, reporting the byte offset of any syntax error."""
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise FormatError(f"{source}: parse error at byte {offset}: {exc.msg}") from None
