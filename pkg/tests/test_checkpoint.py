import json

import numpy as np
import pytest

from ucl.checkpoint import MANIFEST, PAYLOAD, load_checkpoint, named_arrays, save_checkpoint
from ucl.errors import CheckpointError
from ucl.model import ModelConfig, init_params

SMALL = ModelConfig(input_width=6, encoder_hidden=(5,), representation_width=4, projector_hidden=5, feature_dim=3,
                    embedding_dim=4, gate_hidden=5, num_classes=4)


@pytest.fixture
def params(rng):
    p = init_params(SMALL, 3)
    for arr in named_arrays(p).values():
        arr[...] = rng.normal(scale=3.0, size=arr.shape)
    return p


def test_round_trip_within_float32(params, tmp_path):
    save_checkpoint(params, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.config == params.config
    before, after = named_arrays(params), named_arrays(back)
    assert list(before) == list(after)
    for name, a in before.items():
        # float32 round-to-nearest: relative error at most 2**-24
        assert np.all(np.abs(after[name] - a) <= np.abs(a) * 2.0**-24), name
        assert np.array_equal(after[name], a.astype(np.float32).astype(np.float64))


def test_manifest_layout(params, tmp_path):
    path = save_checkpoint(params, tmp_path / "ck")
    manifest = json.loads((path / MANIFEST).read_text())
    arrays = named_arrays(params)
    assert manifest["format_version"] == 1
    assert len(manifest["tensors"]) == len(arrays) == len(params.tensors()) + 2 * len(params.norm_states())
    assert len({t["name"] for t in manifest["tensors"]}) == len(arrays)
    total = sum(int(np.prod(t["shape"])) for t in manifest["tensors"])
    assert (path / PAYLOAD).stat().st_size == 4 * total
    assert any(t["name"].endswith("running_var") for t in manifest["tensors"])


def test_save_of_load_is_byte_identical(params, tmp_path):
    a = save_checkpoint(params, tmp_path / "a")
    b = save_checkpoint(load_checkpoint(a), tmp_path / "b")
    for f in (MANIFEST, PAYLOAD):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    assert not list(tmp_path.glob("**/*.tmp"))


def test_truncated_payload_names_last_tensor(params, tmp_path):
    path = save_checkpoint(params, tmp_path / "ck")
    data = (path / PAYLOAD).read_bytes()
    (path / PAYLOAD).write_bytes(data[:-4])
    last = list(named_arrays(params))[-1]
    with pytest.raises(CheckpointError, match=last):
        load_checkpoint(path)
    (path / PAYLOAD).write_bytes(data + b"\0\0\0\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_version_and_structure_errors(params, tmp_path):
    path = save_checkpoint(params, tmp_path / "ck")
    good = json.loads((path / MANIFEST).read_text())

    def write(m):
        (path / MANIFEST).write_text(json.dumps(m))

    write({**good, "format_version": 2})
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    bad = json.loads(json.dumps(good))
    bad["tensors"][0]["shape"] = [1, 1]
    write(bad)
    with pytest.raises(CheckpointError, match=good["tensors"][0]["name"]):
        load_checkpoint(path)
    bad = json.loads(json.dumps(good))
    bad["tensors"].pop()
    write(bad)
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(path)
    write({**good, "model_config": {**good["model_config"], "depth": 3}})
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    (path / MANIFEST).write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nowhere")
