import numpy as np
import pytest

from drnet.errors import (
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
)
from drnet.network import (
    VARIANTS,
    MomentumSGD,
    NetworkConfig,
    build,
    load,
    save,
    train_step,
    variant_config,
)
from drnet.tensor import Rng, rng_normal


def toy_batch(seed, n=10, dtype=np.float32):
    rng = Rng(seed, 2)
    data = np.abs(rng_normal(rng, (n, 2, 9, 9), std=0.2)).astype(dtype)
    labels = np.arange(n) % 2
    data[labels == 1, 1] += 0.4
    return data, labels


class TestConfig:
    def test_defaults_give_expected_shapes(self):
        cfg = NetworkConfig()
        assert cfg.spatial_sizes == (9, 5, 3)
        assert cfg.flat_features == 32 * 9

    def test_residual_divisibility(self):
        with pytest.raises(ConfigError, match="not divisible by 5"):
            NetworkConfig(pool_type="residual", s=5)

    def test_even_patch_rejected(self):
        with pytest.raises(ConfigError):
            NetworkConfig(patch_size=8)

    def test_small_patch_rejected(self):
        with pytest.raises(ConfigError):
            NetworkConfig(patch_size=3)

    def test_variant_table_complete(self):
        assert variant_config(1).conv_type == "regular"
        assert variant_config(1).pool_type == "vanilla"
        assert variant_config(4).conv_type == "deformable"
        assert variant_config(4).pool_type == "residual"
        combos = {VARIANTS[r] for r in range(1, 7)}
        assert len(combos) == 6

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            variant_config(7)


class TestBuildAndForward:
    def test_logit_shape(self):
        net = build(NetworkConfig(), Rng(1, 1))
        batch, _ = toy_batch(1, 4)
        assert net.forward(batch).shape == (4, 2)

    def test_deformable_twin_matches_regular_at_init(self):
        batch, _ = toy_batch(3, 6)
        reg = build(variant_config(1), Rng(9, 1))
        dfm = build(variant_config(2), Rng(9, 1))
        assert (reg.forward(batch) == dfm.forward(batch)).all()

    def test_all_variants_forward(self):
        batch, _ = toy_batch(4, 2)
        for row in VARIANTS:
            net = build(variant_config(row), Rng(5, 1))
            assert np.isfinite(net.forward(batch)).all()

    def test_determinism_across_builds(self):
        a = build(NetworkConfig(), Rng(11, 1))
        b = build(NetworkConfig(), Rng(11, 1))
        for (ka, va), (kb, vb) in zip(a.params.items(), b.params.items()):
            assert ka == kb
            assert (va == vb).all()


class TestTrainStep:
    def test_zero_lr_keeps_parameters(self):
        net = build(NetworkConfig(), Rng(2, 1))
        before = {k: v.copy() for k, v in net.params.items()}
        batch, labels = toy_batch(2)
        train_step(net, batch, labels, MomentumSGD(lr=0.0))
        for k, v in net.params.items():
            assert (v == before[k]).all()

    def test_every_learnable_layer_moves(self):
        net = build(variant_config(4), Rng(3, 1))
        before = {k: v.copy() for k, v in net.params.items()}
        batch, labels = toy_batch(3, 16)
        for _ in range(3):  # offsets need a step for upstream signal
            train_step(net, batch, labels, MomentumSGD(lr=1e-3))
        moved_layers = set()
        for k, v in net.params.items():
            if not (v == before[k]).all():
                moved_layers.add(k.split(".")[0])
        assert {"conv1", "conv2", "fc1", "fc2"} <= moved_layers

    def test_overfits_toy_set(self):
        # 10 samples, 500 steps, default lr: training accuracy reaches 100%
        net = build(variant_config(4), Rng(7, 1))
        batch, labels = toy_batch(7)
        opt = MomentumSGD(lr=1e-3, momentum=0.9)
        for _ in range(500):
            loss = train_step(net, batch, labels, opt)
        assert (net.forward(batch).argmax(axis=1) == labels).all()
        assert loss < 0.1

    def test_determinism_two_runs(self):
        batch, labels = toy_batch(5, 12)
        nets = []
        for _ in range(2):
            net = build(variant_config(4), Rng(5, 1))
            opt = MomentumSGD()
            for _ in range(5):
                train_step(net, batch, labels, opt)
            nets.append(net)
        for va, vb in zip(nets[0].params.values(), nets[1].params.values()):
            assert (va == vb).all()


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        net = build(variant_config(4), Rng(8, 1))
        batch, labels = toy_batch(8, 6)
        train_step(net, batch, labels, MomentumSGD())
        path = tmp_path / "model.drnet"
        save(net, path)
        loaded = load(path)
        for va, vb in zip(net.params.values(), loaded.params.values()):
            assert (va == vb).all()
        assert (net.forward(batch) == loaded.forward(batch)).all()
        assert loaded.config == net.config

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.drnet"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointMagicError):
            load(path)

    def test_version_mismatch(self, tmp_path):
        net = build(NetworkConfig(), Rng(1, 1))
        path = tmp_path / "model.drnet"
        save(net, path)
        raw = bytearray(path.read_bytes())
        raw[4:6] = (99).to_bytes(2, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            load(path)

    def test_truncated_file(self, tmp_path):
        net = build(NetworkConfig(), Rng(1, 1))
        path = tmp_path / "model.drnet"
        save(net, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointTruncatedError):
            load(path)

    def test_shape_mismatch_names_layer(self, tmp_path):
        net = build(NetworkConfig(), Rng(1, 1))
        path = tmp_path / "model.drnet"
        save(net, path)
        raw = bytearray(path.read_bytes())
        # corrupt the first parameter's declared shape (first u32 after the
        # length-prefixed name "conv1.kernels")
        name_off = raw.index(b"conv1.kernels")
        shape_off = name_off + len(b"conv1.kernels")
        raw[shape_off : shape_off + 4] = (999).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointShapeError, match="conv1.kernels"):
            load(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        net = build(NetworkConfig(), Rng(1, 1))
        path = tmp_path / "model.drnet"
        save(net, path)
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(CheckpointShapeError):
            load(path)
