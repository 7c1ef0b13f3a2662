"""Tests for the assembled model, its variants, decoding, and checkpoints."""

import numpy as np
import pytest

from taipan.model import (
    CheckpointError,
    ModelConfig,
    TaipanModel,
    load_checkpoint,
    save_checkpoint,
)
from taipan.sal import gumbel_noise
from taipan.tensor import Tensor


def _tiny(**kw):
    base = dict(vocab_size=64, d_model=32, n_mamba_layers=2, sal_interval=2,
                n_heads=4, window=8)
    base.update(kw)
    return ModelConfig(**base)


def _expected_params(c: ModelConfig) -> int:
    """Closed-form parameter count, recomputed from first principles."""
    d, di, ds, H, K = c.d_model, c.expand * c.d_model, c.d_state, c.n_heads, c.conv_kernel
    mlp = 6 * d * d
    mamba = d + 2 * d * di + K * di + di + 2 * di * ds + di * H + 2 * H + di * d + d + mlp
    sal = 2 * d + (2 * d + 2) + 4 * d * d + mlp
    attn = 2 * d + 4 * d * d + mlp
    per_slot = attn if c.variant == "full-attention" else sal
    return (c.vocab_size * d + d
            + c.n_mamba_layers * mamba
            + c.n_sal * per_slot)


class TestModelConfig:
    def test_reference_defaults(self):
        c = ModelConfig()
        assert (c.vocab_size, c.d_model, c.n_mamba_layers, c.sal_interval) == (512, 128, 12, 6)
        assert (c.n_heads, c.d_state, c.expand, c.window) == (4, 16, 2, 64)
        assert (c.attn_budget, c.gumbel_temperature, c.rope) == (0.15, 1.0, False)
        assert c.n_sal == 2

    def test_round_trip_through_dict(self):
        c = _tiny(rope=True, attn_budget=0.25)
        assert ModelConfig.from_dict(c.to_dict()) == c

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            ModelConfig.from_dict({"d_model": 32, "n_layerz": 3})

    def test_validation(self):
        with pytest.raises(ValueError, match="multiple"):
            _tiny(n_mamba_layers=3, sal_interval=2)
        with pytest.raises(ValueError, match="divisible"):
            _tiny(d_model=30)
        with pytest.raises(ValueError, match="attn_budget"):
            _tiny(attn_budget=0.0)
        with pytest.raises(ValueError, match="variant"):
            _tiny(variant="hybrid")
        with pytest.raises(ValueError, match="positive"):
            _tiny(window=0)


class TestTaipanModel:
    @pytest.mark.parametrize("L", [1, 7, 33])
    def test_forward_shapes(self, L):
        m = TaipanModel(_tiny(), seed=0)
        toks = np.random.default_rng(L).integers(0, 64, size=(2, L))
        logits, decs = m.forward(toks, rng=np.random.default_rng(1))
        assert logits.shape == (2, L, 64)
        assert len(decs) == 1 and decs[0].hard.shape == (2, L)

    @pytest.mark.parametrize("variant", ["taipan", "mamba-only", "full-attention"])
    def test_param_count_closed_form(self, variant):
        c = _tiny(variant=variant)
        assert TaipanModel(c, seed=0).n_params() == _expected_params(c)

    def test_output_head_is_tied_to_embedding(self):
        m = TaipanModel(_tiny(), seed=0)
        names = [n for n, _ in m.params()]
        assert "embed.w" in names
        assert not any("head" in n or "unembed" in n for n in names)

    def test_causality_under_replayed_gates(self):
        m = TaipanModel(_tiny(), seed=0)
        rng = np.random.default_rng(2)
        toks = rng.integers(0, 64, size=(1, 20))
        noise = [gumbel_noise(rng, (1, 20, 2))]
        base, _ = m.forward(toks, noise=noise)
        bumped = toks.copy()
        bumped[0, 13] = (bumped[0, 13] + 1) % 64
        out, _ = m.forward(bumped, noise=noise)
        assert np.array_equal(base.data[0, :13], out.data[0, :13])
        assert not np.allclose(base.data[0, 13:], out.data[0, 13:])

    @pytest.mark.parametrize("variant,rope", [
        ("taipan", False), ("taipan", True),
        ("mamba-only", False), ("full-attention", True),
    ])
    def test_decode_matches_forward(self, variant, rope):
        m = TaipanModel(_tiny(variant=variant, rope=rope), seed=3)
        rng = np.random.default_rng(4)
        toks = rng.integers(0, 64, size=(1, 24))
        noise = [gumbel_noise(rng, (1, 24, 2)) for _ in range(m.config.n_sal)]
        logits, decs = m.forward(toks, noise=noise if variant != "full-attention" else None)
        sal_noise = [n[0] for n in noise] if variant != "full-attention" else None
        dec_logits, selected, _ = m.decode_sequence(toks[0], sal_noise=sal_noise)
        assert np.max(np.abs(dec_logits - logits.data[0])) < 1e-12
        if variant == "taipan":
            assert np.array_equal(selected[0], decs[0].hard[0].astype(bool))

    def test_closed_gates_equal_mamba_only_variant(self):
        # Same seed -> identical parameters; slamming every select logit to
        # -20 under zero noise must reproduce the mamba-only forward bit for
        # bit, because a shut gate contributes exactly nothing.
        taipan = TaipanModel(_tiny(), seed=5)
        plain = TaipanModel(_tiny(variant="mamba-only"), seed=5)
        for layer in taipan.sal_layers():
            layer.b_g.data[:] = [0.0, -20.0]
        toks = np.random.default_rng(6).integers(0, 64, size=(2, 12))
        zero = [np.zeros((2, 12, 2))]
        y_gated, decs = taipan.forward(toks, noise=zero)
        y_plain, _ = plain.forward(toks)
        assert np.all(decs[0].hard == 0.0)
        assert np.array_equal(y_gated.data, y_plain.data)

    def test_decode_state_is_constant_size(self):
        m = TaipanModel(_tiny(), seed=7)
        state = m.alloc_decode_state()
        rng = np.random.default_rng(8)
        sizes = set()
        for t in range(300):
            m.step_decode(int(rng.integers(0, 64)), state, rng=rng)
            sizes.add(state.nbytes)
        assert len(sizes) == 1
        assert state.position == 300

    def test_full_attention_state_grows_linearly(self):
        m = TaipanModel(_tiny(variant="full-attention"), seed=9)
        rng = np.random.default_rng(10)

        def bytes_after(n):
            st = m.alloc_decode_state()
            for _ in range(n):
                m.step_decode(int(rng.integers(0, 64)), st)
            return st.nbytes

        b100, b200, b300 = bytes_after(100), bytes_after(200), bytes_after(300)
        assert b200 - b100 == b300 - b200 > 0  # exactly linear in tokens seen

    def test_mamba_only_pays_no_attention_state(self):
        gated = TaipanModel(_tiny(), seed=11).alloc_decode_state()
        plain = TaipanModel(_tiny(variant="mamba-only"), seed=11).alloc_decode_state()
        assert plain.nbytes < gated.nbytes

    def test_input_validation(self):
        m = TaipanModel(_tiny(), seed=0)
        with pytest.raises(ValueError, match="batch, length"):
            m.forward(np.zeros(5, dtype=int), rng=np.random.default_rng(0))
        with pytest.raises(ValueError, match="noise arrays"):
            m.forward(np.zeros((1, 4), dtype=int), noise=[])
        with pytest.raises(ValueError, match="rng or replayed"):
            m.forward(np.zeros((1, 4), dtype=int))


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        # fresh parameters are float32-committed at init, so even a float64
        # model survives the float32 container without loss
        m = TaipanModel(_tiny(), seed=12)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, m, extras={"step": 41, "note": "hello"})
        m2, extras = load_checkpoint(path)
        assert extras == {"step": 41, "note": "hello"}
        assert m2.config == m.config
        for (na, pa), (nb, pb) in zip(m.params(), m2.params()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)

    def test_loaded_model_forwards_identically(self, tmp_path):
        m = TaipanModel(_tiny(), seed=13)
        save_checkpoint(tmp_path / "m.ckpt", m)
        m2, _ = load_checkpoint(tmp_path / "m.ckpt")
        toks = np.random.default_rng(14).integers(0, 64, size=(1, 10))
        noise = [gumbel_noise(np.random.default_rng(15), (1, 10, 2))]
        a, _ = m.forward(toks, noise=noise)
        b, _ = m2.forward(toks, noise=noise)
        assert np.array_equal(a.data, b.data)

    def test_save_commits_to_float32(self, tmp_path):
        # drift a weight off the float32 grid; the checkpoint must come back
        # as the rounded value, not the original
        m = TaipanModel(_tiny(), seed=16)
        m.blocks[0].w_in.data += 1e-12
        save_checkpoint(tmp_path / "m.ckpt", m)
        m2, _ = load_checkpoint(tmp_path / "m.ckpt")
        want = m.blocks[0].w_in.data.astype(np.float32).astype(np.float64)
        assert np.array_equal(m2.blocks[0].w_in.data, want)
        assert not np.array_equal(m2.blocks[0].w_in.data, m.blocks[0].w_in.data)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"NOTAMODL" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)

    def test_truncation_detected(self, tmp_path):
        m = TaipanModel(_tiny(), seed=17)
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, m)
        raw = p.read_bytes()
        p.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_corruption_detected_by_crc(self, tmp_path):
        m = TaipanModel(_tiny(), seed=18)
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, m)
        raw = bytearray(p.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="CRC"):
            load_checkpoint(p)

    def test_no_stray_temp_file_left_behind(self, tmp_path):
        m = TaipanModel(_tiny(), seed=19)
        save_checkpoint(tmp_path / "m.ckpt", m)
        assert [f.name for f in tmp_path.iterdir()] == ["m.ckpt"]
