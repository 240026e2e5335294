"""Model container and key=value parameter files.

Container layout (all integers little-endian)::

    b"G4RMODEL" | u32 format version | u64 header length | header JSON | array bytes | sha256 of all preceding bytes

The header records the training config, item map, and per-array dtype,
shape and offset. The tied matrix of a shared-embedding model is stored once.
Output is byte-for-byte deterministic.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import pandas as pd

from .model import ModelParams
from .training import ConfigError, TrainConfig

MAGIC = b"G4RMODEL"
FORMAT_VERSION = 1


class IntegrityError(ValueError):
    """Model file is truncated, corrupted, or of an unsupported version."""


def _arrays(params: ModelParams) -> dict[str, np.ndarray]:
    return params.named()


def save_model(params: ModelParams, config: TrainConfig, item_ids, path) -> str:
    """Write the container; returns its sha256 hex digest."""
    arrays = _arrays(params)
    specs, offset = [], 0
    for name, a in arrays.items():
        a = np.ascontiguousarray(a)
        specs.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset})
        offset += a.nbytes
    header = {
        "mode": params.mode,
        "layers": params.layers,
        "config": config.to_dict(),
        "item_ids": [str(i) for i in item_ids],
        "arrays": specs,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    h = hashlib.sha256()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        for chunk in (MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(hbytes)), hbytes):
            f.write(chunk)
            h.update(chunk)
        for a in arrays.values():
            b = np.ascontiguousarray(a).tobytes()
            f.write(b)
            h.update(b)
        f.write(h.digest())
    tmp.replace(path)
    return h.hexdigest()


def load_model(path) -> tuple[ModelParams, TrainConfig, pd.Index]:
    """Read and verify a container; nothing is returned unless every check passes."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12 + 32 or data[: len(MAGIC)] != MAGIC:
        raise IntegrityError(f"{path}: not a model file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch (truncated or corrupted)")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise IntegrityError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = len(MAGIC) + 12
    try:
        header = json.loads(body[start : start + hlen])
        config = TrainConfig.from_dict({**header["config"], "layers": list(header["config"]["layers"])})
    except (ValueError, KeyError, ConfigError) as e:
        raise IntegrityError(f"{path}: unreadable header ({e})") from e
    payload = memoryview(body)[start + hlen :]
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        n = int(np.prod(spec["shape"])) * dt.itemsize
        arrays[spec["name"]] = np.frombuffer(payload[spec["offset"] : spec["offset"] + n], dtype=dt).reshape(spec["shape"]).copy()
    mode, layers = header["mode"], header["layers"]
    n_layers = len(layers)
    out_name = "item_embedding" if mode == "shared" else "output_embedding"
    params = ModelParams(
        mode,
        layers,
        [arrays[f"W{i}"] for i in range(n_layers)],
        [arrays[f"U{i}"] for i in range(n_layers)],
        [arrays[f"b{i}"] for i in range(n_layers)],
        arrays[out_name],
    )
    if mode == "shared":
        params.input_embedding = params.output_embedding
    elif mode == "separate":
        params.input_embedding = arrays["input_embedding"]
    item_ids = pd.Index(header["item_ids"])
    if len(item_ids) != params.n_items:
        raise IntegrityError(f"{path}: item map has {len(item_ids)} entries for {params.n_items} items")
    return params, config, item_ids


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# parameter files

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_layers(v: str) -> list[int]:
    v = v.strip().strip("[]")
    return [int(x) for x in v.replace(";", ",").split(",") if x.strip()]


def coerce_param(key: str, value: str):
    """Convert one textual parameter to the type of its TrainConfig field."""
    default = TrainConfig()
    if key == "layers":
        return _parse_layers(value)
    if not hasattr(default, key):
        raise ConfigError([f"unknown parameter {key!r}"])
    ref = getattr(default, key)
    value = value.strip()
    if isinstance(ref, bool):
        if value.lower() not in _BOOL:
            raise ConfigError([f"{key}: expected a boolean, got {value!r}"])
        return _BOOL[value.lower()]
    try:
        if isinstance(ref, int):
            return int(value)
        if isinstance(ref, float):
            return float(value)
    except ValueError as e:
        raise ConfigError([f"{key}: {e}"]) from e
    return value


def parse_params(text: str) -> dict:
    """Parse ``key=value`` pairs, one per line or comma separated; ``#`` starts a comment."""
    out, problems = {}, []
    lines = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        lines.extend(_split_pairs(line))
    for item in lines:
        if "=" not in item:
            problems.append(f"malformed entry {item!r} (expected key=value)")
            continue
        key, value = (s.strip() for s in item.split("=", 1))
        try:
            out[key] = coerce_param(key, value)
        except ConfigError as e:
            problems.extend(e.problems)
    if problems:
        raise ConfigError(problems)
    return out


def _split_pairs(line: str) -> list[str]:
    # "a=1,layers=100,100,b=2": a comma only separates pairs when the next chunk has '='
    parts, cur = [], ""
    for chunk in line.split(","):
        if "=" in chunk and cur:
            parts.append(cur)
            cur = chunk
        else:
            cur = f"{cur},{chunk}" if cur else chunk
    if cur:
        parts.append(cur)
    return [p.strip() for p in parts if p.strip()]


def read_params(path) -> dict:
    return parse_params(Path(path).read_text())


def format_params(config: TrainConfig) -> str:
    lines = []
    for k, v in config.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"
