"""Weight checkpoint file format.

Layout: one ASCII manifest line terminated by a newline, then the raw
float64 little-endian array data concatenated in manifest order. The
manifest is space-separated "name=dim1,dim2,..." entries (a scalar-free
format: every array has at least one dimension).
"""

from __future__ import annotations

import numpy as np


def save_weights(path: str, arrays: dict[str, np.ndarray]) -> None:
    items = []
    for name, arr in arrays.items():
        if " " in name or "=" in name:
            raise ValueError(f"invalid weight name {name!r}")
        items.append(f"{name}={','.join(str(d) for d in arr.shape)}")
    with open(path, "wb") as fh:
        fh.write((" ".join(items) + "\n").encode("ascii"))
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_weights(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        manifest = fh.readline().decode("ascii").strip()
        out: dict[str, np.ndarray] = {}
        for item in manifest.split():
            name, _, shape_s = item.partition("=")
            shape = tuple(int(d) for d in shape_s.split(","))
            count = int(np.prod(shape))
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(
                    f"{path}: truncated payload for {name!r}: expected "
                    f"{count * 8} bytes, got {len(buf)}")
            out[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return out
