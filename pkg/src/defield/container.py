"""Binary array container shared by grids and the trainer.

Little-endian sequence of records:
    [name_len: u32][name: utf8][dtype: u8][ndim: u8][dims: u32 x ndim][payload]
dtype codes: 0 = float32, 1 = float64. Arrays are written sorted by
name, so save -> load -> save is byte-identical.
"""

import struct

import numpy as np

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class ContainerError(ValueError):
    pass


def save_container(path, arrays: dict):
    with open(path, "wb") as f:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            code = _CODES.get(arr.dtype)
            if code is None:
                raise ContainerError(
                    f"{name}: dtype {arr.dtype} not storable (f32/f64 only)"
                )
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_container(path) -> dict:
    out = {}
    with open(path, "rb") as f:
        data = f.read()
    pos = 0
    total = len(data)

    def take(n, what):
        nonlocal pos
        if pos + n > total:
            raise ContainerError(f"{path}: truncated while reading {what}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < total:
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, f"{name} header"))
        if code not in _DTYPES:
            raise ContainerError(f"{path}: {name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} dims"))
        dtype = _DTYPES[code]
        count = int(np.prod(dims)) if ndim else 1
        payload = take(count * dtype.itemsize, f"{name} payload")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return out
