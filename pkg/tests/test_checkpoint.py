# This file is part of the UrbanVerse tool

# tests/test_checkpoint.py
import json

import numpy as np
import pytest
import torch.nn as nn

from common.errors import CheckpointError, MissingArtifactError
from data_processing.checkpoint import load_checkpoint, load_module_arrays, module_arrays, save_checkpoint


@pytest.fixture
def stem(tmp_path):
    arrays = {"w": np.arange(6.0).reshape(2, 3), "b": np.array([0.5, -1.0]), "s": np.float32(3.0)}
    save_checkpoint(str(tmp_path / "ckpt"), "encoder", arrays, extra={"note": "x"})
    return str(tmp_path / "ckpt")


def test_round_trip(stem):
    arrays, manifest = load_checkpoint(stem, component="encoder")
    assert np.array_equal(arrays["w"], np.arange(6.0).reshape(2, 3))
    assert arrays["b"].dtype == np.float32
    assert arrays["s"].shape == ()
    assert manifest["extra"] == {"note": "x"}
    assert manifest["payload_bytes"] == 4 * (6 + 2 + 1)


def test_every_array_shape_comes_back_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    arrays = {
        "scalar": np.float32(2.5),
        "zero_d": np.array(-0.1, dtype=np.float32),
        "vector": rng.normal(size=7).astype(np.float32),
        "transposed": rng.normal(size=(3, 4)).astype(np.float32).T,
        "cube": rng.normal(size=(2, 3, 4)).astype(np.float32),
    }
    manifest = save_checkpoint(str(tmp_path / "all"), "encoder", arrays)
    assert [d["shape"] for d in manifest["arrays"]] == [[], [], [7], [4, 3], [2, 3, 4]]
    loaded, _ = load_checkpoint(str(tmp_path / "all"), component="encoder")
    for name, value in arrays.items():
        assert loaded[name].shape == np.shape(value), name
        assert loaded[name].tobytes() == np.asarray(value, dtype="<f4").tobytes(), name


def test_missing_checkpoint_names_the_producer(tmp_path):
    with pytest.raises(MissingArtifactError, match="run `train` first"):
        load_checkpoint(str(tmp_path / "none"), producer="train")


def rewrite_manifest(stem, **changes):
    with open(f"{stem}.json") as f:
        manifest = json.load(f)
    manifest.update(changes)
    with open(f"{stem}.json", "w") as f:
        json.dump(manifest, f)


def test_version_and_component_are_checked(stem):
    with pytest.raises(CheckpointError, match="expected 'diffusion'"):
        load_checkpoint(stem, component="diffusion")
    rewrite_manifest(stem, version=2)
    with pytest.raises(CheckpointError, match="version 2"):
        load_checkpoint(stem)


def test_truncated_payload(stem):
    with open(f"{stem}.bin", "rb") as f:
        payload = f.read()
    with open(f"{stem}.bin", "wb") as f:
        f.write(payload[:-4])
    with pytest.raises(CheckpointError, match="bytes"):
        load_checkpoint(stem)


def test_overlapping_arrays(stem):
    with open(f"{stem}.json") as f:
        manifest = json.load(f)
    manifest["arrays"][1]["offset"] = 4
    rewrite_manifest(stem, arrays=manifest["arrays"])
    with pytest.raises(CheckpointError, match="overlaps"):
        load_checkpoint(stem)


def test_unreadable_manifest(stem):
    with open(f"{stem}.json", "w") as f:
        f.write("{")
    with pytest.raises(CheckpointError, match="unreadable"):
        load_checkpoint(stem)


def test_module_registry_is_audited():
    source = nn.Sequential(nn.Linear(3, 2), nn.Linear(2, 1))
    arrays = module_arrays(source, prefix="m.")
    target = nn.Sequential(nn.Linear(3, 2), nn.Linear(2, 1))
    load_module_arrays(target, arrays, prefix="m.")
    assert np.array_equal(target[0].weight.detach().numpy(), source[0].weight.detach().numpy())

    with pytest.raises(CheckpointError, match="missing"):
        load_module_arrays(nn.Sequential(nn.Linear(3, 2), nn.Linear(2, 1), nn.Linear(1, 1)), arrays, prefix="m.")
    with pytest.raises(CheckpointError, match="shape"):
        load_module_arrays(nn.Sequential(nn.Linear(3, 4), nn.Linear(4, 1)), arrays, prefix="m.")
