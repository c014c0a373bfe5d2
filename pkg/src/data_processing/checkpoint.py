# This file is part of the UrbanVerse tool

# src/data_processing/checkpoint.py
"""
Checkpoints are a JSON manifest (<stem>.json) next to a flat payload
(<stem>.bin) of little-endian float32 arrays in row-major order.
"""
import json
import logging
import os

import numpy as np
import torch

from common.errors import CheckpointError, MissingArtifactError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
PAYLOAD_DTYPE = np.dtype("<f4")


def _paths(stem):
    return f"{stem}.json", f"{stem}.bin"


def save_checkpoint(stem, component, arrays, extra=None):
    """Write named arrays; returns the manifest dict"""
    manifest_path, payload_path = _paths(stem)
    descriptors, offset = [], 0
    os.makedirs(os.path.dirname(os.path.abspath(stem)), exist_ok=True)
    with open(payload_path, "wb") as f:
        for name, value in arrays.items():
            data = np.array(value, dtype=PAYLOAD_DTYPE, order="C")
            f.write(data.tobytes(order="C"))
            descriptors.append({"name": name, "shape": list(data.shape), "dtype": "float32", "offset": offset})
            offset += data.nbytes
    manifest = {"version": FORMAT_VERSION, "component": component, "arrays": descriptors,
                "payload_bytes": offset, "extra": extra or {}}
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"Saved {component} checkpoint with {len(descriptors)} arrays ({offset} bytes) to {payload_path}")
    return manifest


def load_checkpoint(stem, component=None, producer="pretrain"):
    """Read and validate a checkpoint; returns (arrays, manifest)"""
    manifest_path, payload_path = _paths(stem)
    if not os.path.exists(manifest_path) or not os.path.exists(payload_path):
        raise MissingArtifactError(manifest_path, producer)
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except ValueError as e:
        raise CheckpointError(f"unreadable manifest ({e})", path=manifest_path) from None

    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"format version {manifest.get('version')} is not supported "
                              f"(expected {FORMAT_VERSION})", path=manifest_path)
    if component is not None and manifest.get("component") != component:
        raise CheckpointError(f"holds component {manifest.get('component')!r}, expected {component!r}",
                              path=manifest_path)

    with open(payload_path, "rb") as f:
        payload = f.read()
    if len(payload) != manifest.get("payload_bytes"):
        raise CheckpointError(f"payload has {len(payload)} bytes, manifest declares "
                              f"{manifest.get('payload_bytes')}", path=payload_path)

    arrays, cursor = {}, 0
    for desc in sorted(manifest["arrays"], key=lambda d: d["offset"]):
        if desc.get("dtype") != "float32":
            raise CheckpointError(f"array {desc['name']} has unsupported dtype {desc.get('dtype')}",
                                  path=manifest_path)
        count = int(np.prod(desc["shape"], dtype=np.int64))
        if desc["offset"] < cursor or desc["offset"] + 4 * count > len(payload):
            raise CheckpointError(f"array {desc['name']} overlaps another array or runs past the payload",
                                  path=manifest_path)
        arrays[desc["name"]] = np.frombuffer(payload, dtype=PAYLOAD_DTYPE, count=count,
                                             offset=desc["offset"]).reshape(desc["shape"]).copy()
        cursor = desc["offset"] + 4 * count
    return arrays, manifest


def module_arrays(module, prefix=""):
    """Every parameter and buffer of a torch module as numpy arrays"""
    return {prefix + name: tensor.detach().cpu().numpy() for name, tensor in module.state_dict().items()}


def load_module_arrays(module, arrays, prefix="", path=None):
    """Copy arrays into a module after auditing names and shapes against its registry"""
    expected = module.state_dict()
    stored = {name[len(prefix):]: value for name, value in arrays.items() if name.startswith(prefix)}
    missing = sorted(set(expected) - set(stored))
    unexpected = sorted(set(stored) - set(expected))
    if missing or unexpected:
        raise CheckpointError(f"parameter registry mismatch, missing {missing}, unexpected {unexpected}", path=path)
    state = {}
    for name, tensor in expected.items():
        value = stored[name]
        if tuple(value.shape) != tuple(tensor.shape):
            raise CheckpointError(f"{name} has shape {tuple(value.shape)}, model expects {tuple(tensor.shape)}",
                                  path=path)
        state[name] = torch.as_tensor(value).to(tensor.dtype)
    module.load_state_dict(state)
    return module
