"""Named-array checkpoint files.

Layout (``.npz``, uncompressed): one float64 array per parameter under its
name, plus ``__format__`` (int64 scalar, currently 1) and ``__meta__`` (a
UTF-8 JSON document stored as a uint8 array). Arrays are written in sorted
name order so identical contents give identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from ctm.errors import DataError

FORMAT_VERSION = 1


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    payload = {k: np.asarray(arrays[k], dtype=np.float64) for k in sorted(arrays)}
    payload["__format__"] = np.asarray(FORMAT_VERSION, dtype=np.int64)
    payload["__meta__"] = np.frombuffer(json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8)
    # fixed timestamps keep the zip bytes reproducible
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in payload.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arr, allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    version = int(data.pop("__format__", -1))
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format {version}")
    meta = json.loads(bytes(data.pop("__meta__")).decode()) if "__meta__" in data else {}
    return data, meta
