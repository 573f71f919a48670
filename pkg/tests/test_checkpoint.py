import numpy as np
import pytest

from grit import checkpoint as ckpt
from grit.data import Normalization
from grit.model import GritModel, ModelConfig, forward
from grit.training import TrainConfig, TrainState, adam_step
from test_model import make_sequence

CFG = ModelConfig(node_count=8, sage_out_dim=8, heads=2, decoder_channels=4)


def trained_state(model):
    cfg = TrainConfig()
    state = TrainState.fresh(cfg, seed=3)
    rng = np.random.default_rng(0)
    for p in model.parameters().values():
        p.grad = rng.normal(size=p.shape)
    adam_step(model.parameters(), state, cfg)
    state.best_val_loss, state.best_epoch, state.epoch = 0.25, 1, 1
    return state


@pytest.fixture
def saved(tmp_path):
    model = GritModel.init(CFG, seed=1, normalization=Normalization((70.0, -40.0, 9.0), (1.0, 2.0, 3.0), ("a", "b")))
    state = trained_state(model)
    path = tmp_path / "m.grit"
    ckpt.save_checkpoint(model, state, path, {"version": 2})
    return model, state, path


def test_round_trip_is_bit_exact(saved):
    model, state, path = saved
    loaded = ckpt.load_checkpoint(path)
    for name, p in model.parameters().items():
        assert np.array_equal(loaded.model.parameters()[name].data, p.data)
        assert np.array_equal(loaded.state.moment1[name], state.moment1[name])
        assert np.array_equal(loaded.state.moment2[name], state.moment2[name])
    assert loaded.state.scalars() == state.scalars()
    assert loaded.model.normalization == model.normalization
    assert loaded.model.config == CFG and loaded.meta == {"version": 2}
    seq = make_sequence(np.random.default_rng(0), CFG)
    assert np.array_equal(forward(loaded.model, seq).data, forward(model, seq).data)


def test_save_is_deterministic(saved, tmp_path):
    model, state, path = saved
    again = tmp_path / "again.grit"
    ckpt.save_checkpoint(model, state, again, {"version": 2})
    assert again.read_bytes() == path.read_bytes()
    resaved = tmp_path / "resaved.grit"
    loaded = ckpt.load_checkpoint(path)
    ckpt.save_checkpoint(loaded.model, loaded.state, resaved, loaded.meta)
    assert resaved.read_bytes() == path.read_bytes()


def test_header_layout(saved):
    _, _, path = saved
    blob = path.read_bytes()
    assert blob[:8] == b"GRITCKPT"
    assert int.from_bytes(blob[8:12], "little") == ckpt.FORMAT_VERSION
    header = ckpt.read_header(path)
    names = [t["name"] for t in header["tensors"]]
    assert names[0] == "param/sage.0.W1" and "adam_m/encoder.Wq" in names
    hlen = int.from_bytes(blob[12:20], "little")
    assert len(blob) == 20 + hlen + sum(t["nbytes"] for t in header["tensors"])


def test_bad_magic(saved):
    _, _, path = saved
    blob = bytearray(path.read_bytes())
    blob[:8] = b"NOTACKPT"
    path.write_bytes(bytes(blob))
    with pytest.raises(ckpt.CheckpointFormatError):
        ckpt.load_checkpoint(path)


def test_unknown_version(saved):
    _, _, path = saved
    blob = bytearray(path.read_bytes())
    blob[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(ckpt.CheckpointVersionError):
        ckpt.load_checkpoint(path)


@pytest.mark.parametrize("keep", [5, 15, 200, -8])
def test_truncation(saved, keep):
    _, _, path = saved
    blob = path.read_bytes()
    path.write_bytes(blob[:keep])
    with pytest.raises(ckpt.CheckpointTruncatedError):
        ckpt.load_checkpoint(path)


def test_garbled_header(saved):
    _, _, path = saved
    blob = bytearray(path.read_bytes())
    blob[20] = 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ckpt.CheckpointFormatError):
        ckpt.load_checkpoint(path)


def test_expected_config_mismatch_names_field(saved):
    _, _, path = saved
    other = ModelConfig(node_count=16, sage_out_dim=8, heads=2, decoder_channels=4)
    with pytest.raises(ckpt.CheckpointShapeError, match="node_count"):
        ckpt.load_checkpoint(path, expect=other)
    ckpt.load_checkpoint(path, expect=CFG)


def test_tensor_shape_mismatch_names_tensor(saved, tmp_path):
    model, state, path = saved
    # Rewrite the header so the stored config disagrees with the stored tensors.
    import json
    import struct
    blob = path.read_bytes()
    hlen = struct.unpack_from("<Q", blob, 12)[0]
    header = json.loads(blob[20:20 + hlen])
    header["config"]["decoder_channels"] = 5
    new = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.write_bytes(blob[:12] + struct.pack("<Q", len(new)) + new + blob[20 + hlen:])
    with pytest.raises(ckpt.CheckpointShapeError, match="decoder.0.kernel"):
        ckpt.load_checkpoint(path)


def test_failed_load_leaves_no_partial_file(saved, tmp_path):
    _, _, path = saved
    assert not (tmp_path / "m.grit.tmp").exists()
