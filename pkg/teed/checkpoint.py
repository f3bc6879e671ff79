"""
Checkpoint files: magic header, checksummed textual manifest, then raw little-endian tensors.

Layout:
    b"TEEDCKPT\\x01"          magic + format version
    uint64 little-endian       manifest length in bytes
    32 bytes                   sha256 of the manifest
    manifest (JSON, UTF-8)     config, metadata, and per tensor: name, shape, dtype, offset, nbytes, sha256
    tensor data                offsets relative to the start of this section
"""
import hashlib
import json
import os
import struct
from dataclasses import asdict

import numpy as np

from .architecture import ParamStore
from .numerics import Tensor
from .optimizer import OptimState
from .utils.config import ModelConfig
from .utils.errors import ChecksumError, CheckpointError, FormatVersionError, MissingParameterError
from .utils.layer_table import param_names
from .utils.utils import CHECKPOINT_MAGIC

FORMAT_VERSION = CHECKPOINT_MAGIC[-1]
_HEADER = len(CHECKPOINT_MAGIC) + 8 + 32
_MOMENT_PREFIXES = ("adam.m/", "adam.v/")


def _sha256(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()

def save_checkpoint(params: ParamStore, path: str, optim_state: OptimState = None, meta: dict = None) -> None:
    """Write parameters (and optionally optimizer state and metadata) to path. The write is atomic.

    Args:
        params (ParamStore): parameters
        path (str): output file
        optim_state (OptimState, optional): Adam moments and hyperparameters. Defaults to None.
        meta (dict, optional): JSON-serialisable metadata (epoch, step, run config...). Defaults to None.
    """
    tensors = list(params.items())
    optim = None
    if optim_state is not None:
        tensors += [(f"adam.m/{n}", t) for n, t in optim_state.m.items()]
        tensors += [(f"adam.v/{n}", t) for n, t in optim_state.v.items()]
        optim = {k: getattr(optim_state, k) for k in ("step", "lr", "beta1", "beta2", "eps", "weight_decay")}

    entries, blobs, offset = [], [], 0
    for name, t in tensors:
        raw = np.ascontiguousarray(t.data, dtype=t.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": t.dtype.newbyteorder("<").str,
                        "offset": offset, "nbytes": len(raw), "sha256": _sha256(raw)})
        blobs.append(raw)
        offset += len(raw)

    manifest = {"format": FORMAT_VERSION, "config": asdict(params.config), "optim": optim,
                "meta": meta or {}, "tensors": entries}
    manifest_bytes = json.dumps(manifest, indent=1, sort_keys=True).encode("utf-8")

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(manifest_bytes)))
        f.write(bytes.fromhex(_sha256(manifest_bytes)))
        f.write(manifest_bytes)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def _read(path: str) -> tuple:
    """Return (manifest, data bytes) after checking magic, version and manifest checksum"""
    try:
        with open(path, "rb") as f:
            content = f.read()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    magic = CHECKPOINT_MAGIC[:-1]
    if content[:len(magic)] != magic:
        if len(content) < len(magic) and magic.startswith(content):
            raise ChecksumError(f"Checkpoint {path} is truncated")
        raise CheckpointError(f"{path} is not a checkpoint file")
    if len(content) < _HEADER:
        raise ChecksumError(f"Checkpoint {path} is truncated")
    if content[len(magic)] != FORMAT_VERSION:
        raise FormatVersionError(f"Unknown checkpoint format version {content[len(magic)]} in {path}")

    (length,) = struct.unpack("<Q", content[len(CHECKPOINT_MAGIC):len(CHECKPOINT_MAGIC) + 8])
    digest = content[len(CHECKPOINT_MAGIC) + 8:_HEADER].hex()
    manifest_bytes = content[_HEADER:_HEADER + length]
    if len(manifest_bytes) != length or _sha256(manifest_bytes) != digest:
        raise ChecksumError(f"Manifest checksum mismatch in {path}")
    manifest = json.loads(manifest_bytes.decode("utf-8"))
    return manifest, content[_HEADER + length:]

def _tensors(manifest: dict, data: bytes, path: str) -> dict:
    out = {}
    for e in manifest["tensors"]:
        raw = data[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"] or _sha256(raw) != e["sha256"]:
            raise ChecksumError(f"Checksum mismatch for tensor '{e['name']}' in {path}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        out[e["name"]] = Tensor(arr, dtype=arr.dtype.newbyteorder("="))
    return out

def _model_config(manifest: dict) -> ModelConfig:
    cfg = dict(manifest.get("config") or {})
    if "block_channels" in cfg:
        cfg["block_channels"] = tuple(cfg["block_channels"])
    return ModelConfig(**cfg)

def _params(manifest: dict, tensors: dict, path: str) -> ParamStore:
    config = _model_config(manifest)
    missing = [n for n in param_names(config) if n not in tensors]
    if missing:
        raise MissingParameterError(f"Checkpoint {path} lacks parameters {missing}")
    return ParamStore({n: tensors[n] for n in param_names(config)}, config)


def read_manifest(path: str) -> dict:
    """Checked manifest of a checkpoint without decoding tensors"""
    return _read(path)[0]

def load_checkpoint(path: str) -> ParamStore:
    """Load the model parameters of a checkpoint

    Args:
        path (str): checkpoint file

    Returns:
        ParamStore: bit-identical to the saved store

    Raises:
        ChecksumError: truncated or corrupted file
        FormatVersionError: unknown format version
        MissingParameterError: a layer table parameter is absent
    """
    manifest, data = _read(path)
    return _params(manifest, _tensors(manifest, data, path), path)

def load_training_state(path: str) -> tuple:
    """Load parameters, optimizer state (None if absent) and metadata of a training checkpoint

    Returns:
        tuple: (ParamStore, OptimState or None, dict)
    """
    manifest, data = _read(path)
    tensors = _tensors(manifest, data, path)
    params = _params(manifest, tensors, path)
    state = None
    if manifest.get("optim"):
        moments = []
        for prefix in _MOMENT_PREFIXES:
            missing = [n for n in params if prefix + n not in tensors]
            if missing:
                raise MissingParameterError(f"Checkpoint {path} lacks optimizer moments {prefix}{missing}")
            moments.append({n: tensors[prefix + n] for n in params})
        state = OptimState(m=moments[0], v=moments[1], **manifest["optim"])
    return params, state, manifest.get("meta") or {}
