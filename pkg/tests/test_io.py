import numpy as np
import pytest

from gridhaze.checkpoint import CheckpointError, checkpoint_bytes, load_checkpoint, save_checkpoint
from gridhaze.graph import AdamState, Tensor
from gridhaze.network import build, forward, reduced_config
from gridhaze.pnm import ImageFormatError, read_depth, read_image, write_depth, write_image


def test_white_pixel(tmp_path):
    p = tmp_path / "w.ppm"
    p.write_bytes(b"P6\n1 1\n255\n\xff\xff\xff")
    np.testing.assert_array_equal(read_image(p).data, np.ones((1, 3, 1, 1)))


def test_header_comments_are_skipped(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# made by hand\n2 1 # width height\n255\n" + bytes(range(6)))
    img = read_image(p).data
    assert img.shape == (1, 3, 1, 2)
    assert img[0, :, 0, 1].tolist() == pytest.approx([3 / 255, 4 / 255, 5 / 255])


def test_write_read_within_half_step(tmp_path):
    x = np.random.default_rng(0).random((1, 3, 7, 5)).astype(np.float32)
    write_image(Tensor(x), tmp_path / "x.ppm")
    assert np.max(np.abs(read_image(tmp_path / "x.ppm").data - x)) <= 1 / 510 + 1e-7


def test_quantized_values_round_trip_exactly(tmp_path):
    q = np.random.default_rng(1).integers(0, 256, (1, 3, 4, 6)) / 255.0
    write_image(q, tmp_path / "q.ppm")
    back = read_image(tmp_path / "q.ppm")
    write_image(back, tmp_path / "q2.ppm")
    assert (tmp_path / "q.ppm").read_bytes() == (tmp_path / "q2.ppm").read_bytes()


def test_depth_round_trip(tmp_path):
    d = np.random.default_rng(2).integers(0, 256, (5, 4)) / 255.0
    write_depth(d, tmp_path / "d.pgm")
    np.testing.assert_allclose(read_depth(tmp_path / "d.pgm"), d)


def test_truncated_payload_names_byte_counts(tmp_path):
    p = tmp_path / "t.ppm"
    p.write_bytes(b"P6\n2 2\n255\n" + b"\x00" * 5)
    with pytest.raises(ImageFormatError, match="expected 12 bytes.*got 5"):
        read_image(p)


@pytest.mark.parametrize("payload,match", [
    (b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00", "maxval"),
    (b"P3\n1 1\n255\n0 0 0", "magic"),
    (b"P6\n1 x\n255\n", "offset"),
    (b"P6\n1", "offset"),
])
def test_malformed_headers(tmp_path, payload, match):
    p = tmp_path / "bad.ppm"
    p.write_bytes(payload)
    with pytest.raises(ImageFormatError, match=match):
        read_image(p)


def test_depth_reader_rejects_color(tmp_path):
    write_image(np.zeros((1, 3, 2, 2)), tmp_path / "c.ppm")
    with pytest.raises(ImageFormatError):
        read_depth(tmp_path / "c.ppm")


# --- checkpoints ------------------------------------------------------------------------------

@pytest.fixture
def trained_state():
    params = build(reduced_config(), seed=4)
    state = AdamState(t=3)
    rng = np.random.default_rng(0)
    for name, t in params.items():
        state.m[name] = rng.standard_normal(t.shape).astype(np.float32)
        state.v[name] = rng.random(t.shape).astype(np.float32)
    return params, state


def test_save_load_save_is_byte_identical(tmp_path, trained_state):
    params, state = trained_state
    save_checkpoint(params, state, tmp_path / "a.gdhz", step=11, seed=5)
    ck = load_checkpoint(tmp_path / "a.gdhz")
    save_checkpoint(ck.params, ck.optimizer, tmp_path / "b.gdhz", ck.step, ck.seed)
    assert (tmp_path / "a.gdhz").read_bytes() == (tmp_path / "b.gdhz").read_bytes()
    assert ck.step == 11 and ck.seed == 5 and ck.config == params.config
    for name, t in params.items():
        np.testing.assert_array_equal(ck.params[name].data, t.data)
        np.testing.assert_array_equal(ck.optimizer.m[name], state.m[name])
    assert ck.optimizer.t == 3


def test_forward_after_load_is_bit_identical(tmp_path, trained_state):
    params, state = trained_state
    save_checkpoint(params, state, tmp_path / "m.gdhz")
    loaded = load_checkpoint(tmp_path / "m.gdhz").params
    x = np.random.default_rng(1).random((1, 3, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(forward(x, params).data, forward(x, loaded).data)


def test_corrupted_magic_is_rejected(tmp_path, trained_state):
    data = bytearray(checkpoint_bytes(trained_state[0]))
    data[0:4] = b"XXXX"
    (tmp_path / "bad.gdhz").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.gdhz")


def test_version_mismatch_is_rejected(tmp_path, trained_state):
    data = bytearray(checkpoint_bytes(trained_state[0]))
    data[4:8] = (99).to_bytes(4, "little")
    (tmp_path / "v.gdhz").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(tmp_path / "v.gdhz")


def test_shape_table_inconsistent_with_config(tmp_path, trained_state):
    params, _ = trained_state
    name = next(iter(params))
    params.tensors[name] = Tensor(np.zeros((1, 1, 1, 1)), name=name)
    (tmp_path / "s.gdhz").write_bytes(checkpoint_bytes(params))
    with pytest.raises(CheckpointError, match="mismatch"):
        load_checkpoint(tmp_path / "s.gdhz")


def test_truncated_checkpoint(tmp_path, trained_state):
    data = checkpoint_bytes(trained_state[0])
    (tmp_path / "t.gdhz").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.gdhz")
