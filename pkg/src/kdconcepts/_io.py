"""Small file helpers shared by the data, checkpoint and run-directory code."""

import hashlib
import json
import os
from pathlib import Path

import numpy as np
import yaml


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def load_config(path) -> dict:
    """Read a YAML (or JSON) config file into a plain dict."""
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return data or {}


def save_array(path, arr: np.ndarray):
    # .npy: flat little-endian bytes behind a dtype/shape header
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    np.save(path, arr, allow_pickle=False)


def load_array(path) -> np.ndarray:
    return np.load(path, allow_pickle=False)
