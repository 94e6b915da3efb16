"""Two-layer ReLU encoder with dropout on its output, plus checkpoint files.

The output layer has no bias: every downstream quantity (distances to
means, variances) is invariant to a global shift of the embedding, so such
a bias would receive no gradient.
"""

from __future__ import annotations

import hashlib
import os
from collections.abc import Mapping
from pathlib import Path
from typing import Iterator

import numpy as np

from . import codec
from .errors import FormatError, IncompatibleVersionError, UsageError
from .numcore import Tape, Tensor, matmul, mul, relu
from .streams import substream

CHECKPOINT_VERSION = 1
PARAM_NAMES = ("w1", "b1", "w2")


class EncoderParams(Mapping):
    """Weights of ``x -> relu(x W1 + b1) W2`` (rows are examples).

    Behaves as a read-only mapping from parameter name to array. ``grads``
    holds the most recent gradient for each parameter, when one was computed.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray], dropout_rate: float = 0.1):
        if set(arrays) != set(PARAM_NAMES):
            raise UsageError(f"encoder needs exactly {PARAM_NAMES}, got {sorted(arrays)}")
        self.arrays = {k: np.array(arrays[k], dtype=np.float64) for k in PARAM_NAMES}
        w1, b1, w2 = (self.arrays[k] for k in PARAM_NAMES)
        if w1.ndim != 2 or w2.ndim != 2 or b1.shape != (w1.shape[1],) or w2.shape[0] != w1.shape[1]:
            raise UsageError("inconsistent encoder shapes " + str({k: v.shape for k, v in self.arrays.items()}))
        if not 0.0 <= dropout_rate < 1.0:
            raise UsageError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
        self.dropout_rate = float(dropout_rate)
        self.grads: dict[str, np.ndarray] = {}

    @classmethod
    def init(cls, in_dim: int, hidden_dim: int, embed_dim: int, seed: int, dropout_rate: float = 0.1) -> "EncoderParams":
        """He-normal first layer, LeCun-normal second layer, zero biases."""
        rng = substream(seed, "init")
        return cls(
            {
                "w1": rng.standard_normal((in_dim, hidden_dim)) * np.sqrt(2.0 / in_dim),
                "b1": np.zeros(hidden_dim),
                "w2": rng.standard_normal((hidden_dim, embed_dim)) * np.sqrt(1.0 / hidden_dim),
            },
            dropout_rate,
        )

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    def __iter__(self) -> Iterator[str]:
        return iter(PARAM_NAMES)

    def __len__(self) -> int:
        return len(PARAM_NAMES)

    @property
    def in_dim(self) -> int:
        return self.arrays["w1"].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.arrays["w2"].shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams({k: v.copy() for k, v in self.arrays.items()}, self.dropout_rate)

    def replace(self, arrays: Mapping[str, np.ndarray]) -> "EncoderParams":
        return EncoderParams(arrays, self.dropout_rate)

    def same_as(self, other: "EncoderParams") -> bool:
        return self.dropout_rate == other.dropout_rate and all(
            self.arrays[k].shape == other.arrays[k].shape and self.arrays[k].tobytes() == other.arrays[k].tobytes()
            for k in PARAM_NAMES
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.dropout_rate).encode())
        for k in PARAM_NAMES:
            a = np.ascontiguousarray(self.arrays[k], dtype="<f8")
            h.update(k.encode() + repr(a.shape).encode() + a.tobytes())
        return "sha256:" + h.hexdigest()


def dropout_mask(shape: tuple[int, ...], rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 for dropped units, 1/(1-rate) for kept ones."""
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def encode(params: EncoderParams, x, train: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """Embed rows of ``x``; dropout is applied only when ``train`` is set."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise UsageError(f"input shape {x.shape} does not match encoder input dim {params.in_dim}")
    h = np.maximum(x @ params["w1"] + params["b1"], 0.0)
    out = h @ params["w2"]
    if train and params.dropout_rate > 0.0:
        if rng is None:
            raise UsageError("training-mode encoding needs an rng for dropout")
        out = out * dropout_mask(out.shape, params.dropout_rate, rng)
    return out


def encode_on_tape(leaves: Mapping[str, Tensor], x, mask: np.ndarray | None = None) -> Tensor:
    """Same forward pass as :func:`encode`, recorded on the leaves' tape."""
    h = relu(matmul(np.asarray(x, dtype=np.float64), leaves["w1"]) + leaves["b1"])
    out = matmul(h, leaves["w2"])
    if mask is not None:
        out = mul(out, mask)
    return out


def param_leaves(tape: Tape, params: EncoderParams) -> dict[str, Tensor]:
    return {k: tape.leaf(params[k], name=k) for k in PARAM_NAMES}


# ---------------------------------------------------------------------------
# checkpoint files


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def checkpoint_dict(params: EncoderParams) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "kind": "encoder",
        "dropout_rate": codec.encode_scalar(params.dropout_rate),
        "fingerprint": params.fingerprint(),
        "params": {k: codec.encode_array(params[k]) for k in PARAM_NAMES},
    }


def save_checkpoint(params: EncoderParams, path: str | Path) -> None:
    _atomic_write(Path(path), codec.dumps(checkpoint_dict(params)))


def load_checkpoint(path: str | Path) -> EncoderParams:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: file not found")
    obj = codec.loads(path.read_text(encoding="utf-8"), str(path))
    if not isinstance(obj, dict) or obj.get("kind") != "encoder":
        raise FormatError(f"{path}: not an encoder checkpoint")
    if obj.get("format_version") != CHECKPOINT_VERSION:
        raise IncompatibleVersionError(f"{path}: checkpoint version {obj.get('format_version')!r} unsupported (need {CHECKPOINT_VERSION})")
    try:
        arrays = {k: codec.decode_array(obj["params"][k], f"{path}:params.{k}") for k in PARAM_NAMES}
        rate = codec.decode_scalar(obj["dropout_rate"], f"{path}:dropout_rate")
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: missing field {exc}") from None
    try:
        params = EncoderParams(arrays, rate)
    except UsageError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if obj.get("fingerprint") not in (None, params.fingerprint()):
        raise FormatError(f"{path}: fingerprint does not match stored weights")
    return params
