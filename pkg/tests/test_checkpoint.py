"""Checkpoint format: framing, bit-exact restore, byte-identical round trips."""

import dataclasses
import struct

import numpy as np
import pytest

from falqon.checkpoint import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    deserialize,
    load_checkpoint,
    save_checkpoint,
    serialize,
)
from falqon.fp8 import E5M2, QuantizedTensor
from falqon.melded import MeldedLinear
from falqon.training import (
    OptimizerState,
    ToyModel,
    TrainConfig,
    build_model,
    build_task,
    make_optimizer_states,
    train,
)


def small_config(**kw):
    base = dict(steps=5, batch=4, rank=3, top_k=2, dims=(6, 8, 5),
                backbone_std=0.05, teacher_gap=1e-3, label_noise=0.0)
    base.update(kw)
    return TrainConfig(**base)


def trained_model(cfg):
    model = build_model(cfg, "melded")
    states = make_optimizer_states(model, cfg)
    train(model, cfg, build_task(cfg), optimizer_states=states)
    return model, states


class TestFraming:
    def test_magic_version_and_layer_count(self):
        cfg = small_config()
        model, states = trained_model(cfg)
        data = serialize(model, states)
        assert data[:8] == CHECKPOINT_MAGIC == b"FALQONCK"
        version, count = struct.unpack_from("<II", data, 8)
        assert version == CHECKPOINT_VERSION
        assert count == len(model.layers) == 2

    def test_layer_record_size_is_exact(self):
        cfg = small_config(dims=(6, 8))
        model, states = trained_model(cfg)
        data = serialize(model, states)
        m, n, r = 8, 6, cfg.rank  # dims are (input, output) -> n=6, m=8
        record = 4 * 4 + 8 + (m + r) * n + 8 * (r * n + m * r + 2 * m * r) + 1
        assert len(data) == 8 + 4 + 4 + record

    def test_version_mismatch_rejected(self):
        cfg = small_config()
        data = bytearray(serialize(*trained_model(cfg)))
        data[8] = CHECKPOINT_VERSION + 1
        with pytest.raises(ValueError, match="version"):
            deserialize(bytes(data))

    def test_bad_magic_rejected(self):
        cfg = small_config()
        data = bytearray(serialize(*trained_model(cfg)))
        data[0] ^= 0xFF
        with pytest.raises(ValueError, match="magic"):
            deserialize(bytes(data))

    def test_truncation_rejected(self):
        data = serialize(*trained_model(small_config()))
        with pytest.raises(ValueError, match="truncated"):
            deserialize(data[:-1])

    def test_trailing_bytes_rejected(self):
        data = serialize(*trained_model(small_config()))
        with pytest.raises(ValueError, match="trailing"):
            deserialize(data + b"\x00")

    def test_unknown_format_tag_rejected(self):
        data = bytearray(serialize(*trained_model(small_config(dims=(6, 8)))))
        data[-1] = 7  # the tag is the last byte of a single-layer file
        with pytest.raises(ValueError, match="format tag"):
            deserialize(bytes(data))


class TestSaveValidation:
    def test_unquantized_layer_rejected(self):
        cfg = small_config(quantize=False)
        model, states = trained_model(cfg)
        with pytest.raises(ValueError, match="quantized"):
            serialize(model, states)

    def test_state_count_mismatch_rejected(self):
        model, states = trained_model(small_config())
        with pytest.raises(ValueError, match="per layer"):
            serialize(model, states[:1])

    def test_moment_shape_mismatch_rejected(self):
        model, states = trained_model(small_config())
        states[0].m = states[0].m[:, :-1]
        with pytest.raises(ValueError, match="moment"):
            serialize(model, states)


class TestRoundTrip:
    def test_restore_is_bit_exact(self, tmp_path):
        cfg = small_config()
        model, states = trained_model(cfg)
        path = tmp_path / "run.ckpt"
        save_checkpoint(path, model, states)
        resumed = dataclasses.replace(cfg, start_step=cfg.steps, steps=3)
        model2, states2 = load_checkpoint(path, resumed)
        for l1, l2, s1, s2 in zip(model.layers, model2.layers, states, states2):
            assert (l1.m, l1.n, l1.r, l1.k) == (l2.m, l2.n, l2.r, l2.k)
            assert l1.w_merged.scale == l2.w_merged.scale
            assert l1.w_merged.fmt is l2.w_merged.fmt
            assert np.array_equal(l1.w_merged.codes, l2.w_merged.codes)
            assert np.array_equal(l1.a_full, l2.a_full)
            assert np.array_equal(l1.delta_buffer, l2.delta_buffer)
            assert np.array_equal(s1.m, s2.m)
            assert np.array_equal(s1.v, s2.v)

    def test_hyperparameters_come_from_the_config(self, tmp_path):
        cfg = small_config()
        model, states = trained_model(cfg)
        path = tmp_path / "run.ckpt"
        save_checkpoint(path, model, states)
        resumed = dataclasses.replace(cfg, start_step=cfg.steps, lr=0.5)
        _, states2 = load_checkpoint(path, resumed)
        assert states2[0].lr == 0.5
        assert states2[0].step == cfg.steps

    def test_save_load_save_is_byte_identical(self, tmp_path):
        cfg = small_config()
        model, states = trained_model(cfg)
        first = tmp_path / "a.ckpt"
        second = tmp_path / "b.ckpt"
        save_checkpoint(first, model, states)
        resumed = dataclasses.replace(cfg, start_step=cfg.steps)
        model2, states2 = load_checkpoint(first, resumed)
        save_checkpoint(second, model2, states2)
        assert first.read_bytes() == second.read_bytes()

    def test_e5m2_codes_round_trip(self, tmp_path):
        # hand-built layer: gradient-format codes survive the tag byte
        rng = np.random.default_rng(0)
        m, n, r = 4, 5, 2
        merged = QuantizedTensor(
            codes=rng.integers(0, 128, size=(m + r, n), dtype=np.uint8),
            scale=3.0, fmt=E5M2)
        layer = MeldedLinear(m, n, r, k=1, w_merged=merged,
                             w_merged_raw=None,
                             a_full=rng.standard_normal((r, n)))
        cfg = small_config(dims=(n, m), rank=r, top_k=1)
        state = OptimizerState.for_shape((m, r), cfg)
        model = ToyModel([layer])
        path = tmp_path / "g.ckpt"
        save_checkpoint(path, model, [state])
        model2, _ = load_checkpoint(path, cfg)
        assert model2.layers[0].w_merged.fmt is E5M2
        assert np.array_equal(model2.layers[0].w_merged.codes, merged.codes)


class TestResume:
    def test_resumed_run_matches_uninterrupted(self, tmp_path):
        cfg = small_config(steps=5)
        model, states = trained_model(cfg)
        path = tmp_path / "mid.ckpt"
        save_checkpoint(path, model, states)

        tail_cfg = dataclasses.replace(cfg, start_step=5, steps=3)
        model_resumed, states_resumed = load_checkpoint(path, tail_cfg)
        tail = train(model_resumed, tail_cfg, build_task(tail_cfg),
                     optimizer_states=states_resumed)

        full_cfg = dataclasses.replace(cfg, steps=8)
        model_full = build_model(full_cfg, "melded")
        states_full = make_optimizer_states(model_full, full_cfg)
        full = train(model_full, full_cfg, build_task(full_cfg),
                     optimizer_states=states_full)

        assert tail.losses == full.losses[5:]
        for a, b in zip(model_resumed.layers, model_full.layers):
            assert np.array_equal(a.w_merged.codes, b.w_merged.codes)
            assert np.array_equal(a.delta_buffer, b.delta_buffer)
