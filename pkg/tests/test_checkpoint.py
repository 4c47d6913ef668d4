import numpy as np
import pytest

from simtlab.autodiff import Tensor
from simtlab.checkpoint import (file_sha256, load_checkpoint, load_into,
                                read_metadata, save_checkpoint, write_metadata)
from simtlab.errors import FormatError


def _random_params(rng):
    return [("emb", Tensor(rng.normal(size=(5, 3)))),
            ("w", Tensor(rng.normal(size=(3, 4)))),
            ("b", Tensor(rng.normal(size=4))),
            ("scalarish", Tensor(rng.normal(size=(1,))))]


def test_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    params = _random_params(rng)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert list(loaded) == [name for name, _ in params]
    for name, tensor in params:
        assert np.array_equal(loaded[name], tensor.data)


def test_save_is_deterministic(tmp_path):
    rng = np.random.default_rng(1)
    params = _random_params(rng)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, params)
    save_checkpoint(b, params)
    assert file_sha256(a) == file_sha256(b)


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT!" + b"\x00" * 16)
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_truncated_file_reports_byte_counts(tmp_path):
    rng = np.random.default_rng(2)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, _random_params(rng))
    blob = path.read_bytes()
    path.write_bytes(blob[:-9])
    with pytest.raises(FormatError, match=r"need \d+ bytes, file has \d+"):
        load_checkpoint(path)


def test_load_into_validates_names_and_shapes(tmp_path):
    rng = np.random.default_rng(3)
    params = _random_params(rng)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)

    wrong_shape = [(n, Tensor(np.zeros((2, 2)))) for n, _ in params]
    with pytest.raises(FormatError, match="shape"):
        load_into(path, wrong_shape)

    missing = params + [("extra", Tensor(np.zeros(1)))]
    with pytest.raises(FormatError, match="missing parameter 'extra'"):
        load_into(path, missing)

    fresh = [(n, Tensor(np.zeros_like(t.data))) for n, t in params]
    load_into(path, fresh)
    for (_, a), (_, b) in zip(fresh, params):
        assert np.array_equal(a.data, b.data)


def test_metadata_round_trip(tmp_path):
    path = tmp_path / "model.meta"
    write_metadata(path, {
        "format": "1",
        "multimodal": True,
        "emb_dim": 200,
        "src_vocab": ["<pad>", "<bos>", "<eos>", "<unk>", "w01", "w02"],
    })
    meta = read_metadata(path)
    assert meta["multimodal"] == "true"
    assert meta["emb_dim"] == "200"
    assert meta["src_vocab"].split() == ["<pad>", "<bos>", "<eos>", "<unk>", "w01", "w02"]
