import struct

import numpy as np
import pytest

from deepsimreg.data import (
    FormatError,
    SyntheticConfig,
    generate_synthetic_pair,
    load_checkpoint,
    load_dataset,
    load_field,
    load_labels_pgm,
    load_pgm,
    make_synthetic_dataset,
    one_hot,
    read_checkpoint,
    save_checkpoint,
    save_dataset,
    save_field,
    save_labels_pgm,
    save_pgm,
    split_dataset,
)
from deepsimreg.evaluation import dice, foreground_classes, mean_dice
from deepsimreg import tensor as T
from deepsimreg.networks import autoencoder_config, build_unet, registration_config, segmentation_config
from deepsimreg.warp import invert_field, warp_nearest


def test_pgm_known_bytes(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    np.testing.assert_allclose(load_pgm(p), [[0, 1.0], [128 / 255, 64 / 255]])
    np.testing.assert_array_equal(load_labels_pgm(p), [[0, 255], [128, 64]])


def test_pgm_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n3 1 # width height\n# depth next\n255\n" + bytes([1, 2, 3]))
    np.testing.assert_array_equal(load_labels_pgm(p), [[1, 2, 3]])


def test_pgm_sixteen_bit_round_trip(tmp_path):
    img = np.random.default_rng(0).random((17, 23))
    img[0, 0], img[0, 1] = 0.0, 1.0
    save_pgm(img, tmp_path / "x.pgm")
    back = load_pgm(tmp_path / "x.pgm")
    assert np.abs(back - img).max() <= 1 / 65535
    assert back[0, 0] == 0.0 and back[0, 1] == 1.0


def test_label_pgm_round_trip(tmp_path):
    lab = np.random.default_rng(0).integers(0, 7, (9, 5))
    save_labels_pgm(lab, tmp_path / "l.pgm")
    np.testing.assert_array_equal(load_labels_pgm(tmp_path / "l.pgm"), lab)
    with pytest.raises(ValueError):
        save_labels_pgm(lab + 300, tmp_path / "bad.pgm")


@pytest.mark.parametrize("payload,match", [
    (b"P2\n2 2\n255\n0 0 0 0", "byte 0"),
    (b"P5\n2 x\n255\n" + bytes(4), "byte 5"),
    (b"P5\n2 2\n255\n" + bytes(3), "truncated"),
    (b"P5\n2 2\n70000\n" + bytes(8), "maxval"),
])
def test_pgm_errors(tmp_path, payload, match):
    p = tmp_path / "bad.pgm"
    p.write_bytes(payload)
    with pytest.raises(FormatError, match=match):
        load_pgm(p)


def test_field_round_trip_and_layout(tmp_path):
    u = np.random.default_rng(0).normal(size=(2, 5, 7)).astype(np.float32)
    p = tmp_path / "u.dspf"
    save_field(u, p)
    raw = p.read_bytes()
    assert len(raw) == 16 + 8 * 5 * 7
    assert raw[:4] == b"DSPF" and struct.unpack("<III", raw[4:16]) == (1, 5, 7)
    np.testing.assert_array_equal(np.frombuffer(raw[16:16 + 4 * 35], "<f4").reshape(5, 7), u[0])
    np.testing.assert_array_equal(load_field(p), u)
    save_field(np.zeros((1, 2, 4, 4)), p)
    np.testing.assert_array_equal(load_field(p), 0.0)


def test_field_errors(tmp_path):
    p = tmp_path / "u.dspf"
    save_field(np.zeros((2, 3, 3)), p)
    raw = p.read_bytes()
    for bad in (b"XSPF" + raw[4:], raw[:4] + struct.pack("<I", 9) + raw[8:], raw[:-4], raw[:10]):
        p.write_bytes(bad)
        with pytest.raises(FormatError):
            load_field(p)
    with pytest.raises(ValueError):
        save_field(np.full((2, 3, 3), np.nan), p)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    net = build_unet(segmentation_config(3, (4, 8)), seed=5)
    x = np.random.default_rng(0).random((2, 1, 16, 16)).astype(np.float32)
    net.train()
    net(x)
    net.eval()
    adam = T.AdamState(lr=3e-4, step=7, m=[p.data * 0.5 for p in net.parameters()],
                       v=[p.data ** 2 for p in net.parameters()])
    path = tmp_path / "n.dsrc"
    save_checkpoint(net, path, adam, extra={"task": "seg"})
    back, back_adam, extra = load_checkpoint(path)
    assert extra == {"task": "seg"}
    assert back.config == net.config
    np.testing.assert_array_equal(back(x).data, net(x).data)
    assert back_adam.step == 7 and back_adam.lr == 3e-4
    for a, b in zip(back_adam.m, adam.m):
        np.testing.assert_array_equal(a, b)
    meta, entries = read_checkpoint(path)
    assert list(entries)[: len(net.params)] == list(net.params)


def test_checkpoint_binary_layout(tmp_path):
    net = build_unet(autoencoder_config((2, 4)), seed=0)
    path = tmp_path / "n.dsrc"
    save_checkpoint(net, path)
    raw = path.read_bytes()
    assert raw[:4] == b"DSRC"
    version, count = struct.unpack("<II", raw[4:12])
    assert version == 1
    assert count == 1 + len(net.state_dict())
    (nlen,) = struct.unpack("<H", raw[12:14])
    assert raw[14:14 + nlen] == b"__config__"


def test_checkpoint_rejects_tampering_and_mismatch(tmp_path):
    path = tmp_path / "n.dsrc"
    save_checkpoint(build_unet(registration_config((4, 8, 16))), path)
    with pytest.raises(ValueError, match="missing entries .*enc3") as exc:
        load_checkpoint(path, config=registration_config((4, 8)))
    assert "unexpected entries" in str(exc.value)
    raw = path.read_bytes()
    (tmp_path / "m.dsrc").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(tmp_path / "m.dsrc")
    (tmp_path / "t.dsrc").write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "t.dsrc")


def test_split_dataset():
    parts = split_dataset(10, (0.8, 0.1, 0.1), seed=3)
    assert tuple(map(len, parts)) == (8, 1, 1)
    assert parts == split_dataset(10, (0.8, 0.1, 0.1), seed=3)
    assert sorted(sum(parts, [])) == list(range(10))
    assert tuple(map(len, split_dataset(7, (0.5, 0.25, 0.25)))) == (3, 2, 2)
    with pytest.raises(ValueError):
        split_dataset(2, (0.8, 0.1, 0.1))
    with pytest.raises(ValueError):
        split_dataset(10, (0.5, 0.1, 0.1))


def test_synthetic_trivial_pair():
    cfg = SyntheticConfig(amplitude=0.0, noise_sigma=0.0)
    s = generate_synthetic_pair(cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(s.moving, s.fixed)
    assert mean_dice(s.moving_labels, s.fixed_labels, foreground_classes(3)) == 1.0


def test_synthetic_determinism_and_ranges():
    cfg = SyntheticConfig()
    a = generate_synthetic_pair(cfg, np.random.default_rng(11))
    b = generate_synthetic_pair(cfg, np.random.default_rng(11))
    np.testing.assert_array_equal(a.moving, b.moving)
    np.testing.assert_array_equal(a.fixed_labels, b.fixed_labels)
    for s in (a, b):
        for img in (s.moving, s.fixed):
            assert img.min() >= 0 and img.max() <= 1 and np.all(np.isfinite(img))
        assert s.moving_labels.max() < cfg.classes and s.fixed_labels.max() < cfg.classes
        assert s.ground_truth_field.shape == (2, 64, 64)


def test_synthetic_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(height=60)
    with pytest.raises(ValueError):
        SyntheticConfig(classes=1)


def test_synthetic_identity_dice_in_range_and_explained_by_ground_truth():
    cfg = SyntheticConfig()
    identity, recovered = [], []
    classes = foreground_classes(cfg.classes)
    for seed in range(100):
        s = generate_synthetic_pair(cfg, np.random.default_rng(seed))
        identity.append(mean_dice(s.moving_labels, s.fixed_labels, classes))
        if seed < 20:
            inv = invert_field(s.ground_truth_field[None])
            recovered.append(mean_dice(warp_nearest(s.moving_labels, inv), s.fixed_labels, classes))
    assert 0.3 <= np.mean(identity) <= 0.8
    assert np.mean(recovered) > np.mean(identity[:20])


def test_dataset_directory_round_trip(tmp_path):
    ds = make_synthetic_dataset(SyntheticConfig(height=16, width=16, stages=2), 3, 2, 1, seed=4)
    save_dataset(ds, tmp_path)
    assert (tmp_path / "train" / "00000" / "gt_field.dspf").exists()
    back = load_dataset(tmp_path, num_classes=3)
    assert [len(back.split(s)) for s in ("train", "val", "test")] == [3, 2, 1]
    s, t = ds.val[1], back.val[1]
    assert s.sample_id == t.sample_id
    assert np.abs(s.moving - t.moving).max() <= 1 / 65535
    np.testing.assert_array_equal(s.fixed_labels, t.fixed_labels)
    np.testing.assert_array_equal(s.ground_truth_field.astype(np.float32), t.ground_truth_field)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


def test_one_hot_and_dice_consistency():
    lab = np.array([[[0, 1], [2, 1]]])
    oh = one_hot(lab, 3)
    assert oh.shape == (1, 3, 2, 2)
    np.testing.assert_array_equal(oh.sum(1), 1)
    assert dice(oh[0].argmax(0), lab[0], 1) == 1.0
