"""Binary checkpoints for :class:`~py_fedpoison.nn.Bau1Params`.

Layout (all integers little-endian)::

    b"BAU1CKPT"                  magic, 8 bytes
    uint32 version               currently 1
    uint32 count                 number of arrays that follow
    per array, in PARAM_NAMES order then bn1.eps, bn1.stat_momentum,
    bn2.eps, bn2.stat_momentum:
        uint16 name length, UTF-8 name
        uint8 ndim, ndim x uint32 dims
        float64 payload, row-major (C order), little-endian

Reloading a checkpoint reproduces the saved parameters bit for bit.
"""

import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from .nn import PARAM_NAMES, BatchNormState, Bau1Params, DenseLayer, FloatArray

MAGIC = b"BAU1CKPT"
FORMAT_VERSION = 1
_CONSTANT_NAMES = ("bn1.eps", "bn1.stat_momentum", "bn2.eps", "bn2.stat_momentum")


def _write_array(stream: BinaryIO, name: str, array: FloatArray) -> None:
    encoded = name.encode("utf-8")
    stream.write(struct.pack("<H", len(encoded)))
    stream.write(encoded)
    stream.write(struct.pack("<B", array.ndim))
    stream.write(struct.pack(f"<{array.ndim}I", *array.shape))
    stream.write(np.ascontiguousarray(array, dtype="<f8").tobytes(order="C"))


def _read_exact(stream: BinaryIO, size: int) -> bytes:
    chunk = stream.read(size)
    if len(chunk) != size:
        msg = "checkpoint is truncated"
        raise ValueError(msg)
    return chunk


def _read_array(stream: BinaryIO) -> tuple[str, FloatArray]:
    (name_len,) = struct.unpack("<H", _read_exact(stream, 2))
    name = _read_exact(stream, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(stream, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(stream, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    payload = _read_exact(stream, 8 * count)
    array = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return name, array


def save_params(params: Bau1Params, path: Union[str, Path]) -> None:
    """Write parameters to ``path`` in the BAU1CKPT format."""
    arrays = params.arrays()
    constants = {
        "bn1.eps": params.bn1.eps,
        "bn1.stat_momentum": params.bn1.stat_momentum,
        "bn2.eps": params.bn2.eps,
        "bn2.stat_momentum": params.bn2.stat_momentum,
    }
    with Path(path).open("wb") as stream:
        stream.write(MAGIC)
        stream.write(struct.pack("<II", FORMAT_VERSION, len(arrays) + len(constants)))
        for name in PARAM_NAMES:
            _write_array(stream, name, arrays[name])
        for name in _CONSTANT_NAMES:
            _write_array(stream, name, np.array([constants[name]]))


def load_params(path: Union[str, Path]) -> Bau1Params:
    """Read parameters written by :func:`save_params`.

    Raises:
        ValueError: On a bad magic, unsupported version, truncation or missing arrays
    """
    with Path(path).open("rb") as stream:
        if _read_exact(stream, len(MAGIC)) != MAGIC:
            msg = f"{path} is not a BAU1 checkpoint"
            raise ValueError(msg)
        version, count = struct.unpack("<II", _read_exact(stream, 8))
        if version != FORMAT_VERSION:
            msg = f"unsupported checkpoint version {version}"
            raise ValueError(msg)
        arrays = dict(_read_array(stream) for _ in range(count))

    missing = set(PARAM_NAMES + _CONSTANT_NAMES) - set(arrays)
    if missing:
        msg = f"checkpoint is missing {sorted(missing)}"
        raise ValueError(msg)

    def dense(prefix: str) -> DenseLayer:
        return DenseLayer(weights=arrays[f"{prefix}.weights"], bias=arrays[f"{prefix}.bias"])

    def norm(prefix: str) -> BatchNormState:
        return BatchNormState(
            gamma=arrays[f"{prefix}.gamma"],
            beta=arrays[f"{prefix}.beta"],
            running_mean=arrays[f"{prefix}.running_mean"],
            running_var=arrays[f"{prefix}.running_var"],
            eps=float(arrays[f"{prefix}.eps"][0]),
            stat_momentum=float(arrays[f"{prefix}.stat_momentum"][0]),
        )

    return Bau1Params(
        layer1=dense("layer1"),
        bn1=norm("bn1"),
        layer2=dense("layer2"),
        bn2=norm("bn2"),
        layer3=dense("layer3"),
    )
