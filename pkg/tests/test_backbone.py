import numpy as np
import pytest
import torch

from llm_mde.backbone import (BackboneConfig, embed_tokens, encode_image, encode_sequence,
                              init_backbones)
from llm_mde.errors import ConfigError, NumericError, ShapeError, VocabError, WeightLoadError
from llm_mde.model import save_backbones
from llm_mde.weightfile import MAGIC, read_tensors, write_tensors


def _state(*modules):
    return [t.clone() for m in modules for t in m.state_dict().values()]


def test_full_scale_defaults():
    cfg = BackboneConfig.full_scale()
    assert (cfg.patch_size, cfg.dropout, cfg.text_layers) == (16, 0.1, 12)
    assert cfg.num_patches == 196 and cfg.patch_dim == 768


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        BackboneConfig(d_m=30, heads=4)


def test_init_deterministic(tiny_backbone):
    a = init_backbones(tiny_backbone, seed=3)
    b = init_backbones(tiny_backbone, seed=3)
    assert all(torch.equal(x, y) for x, y in zip(_state(*a), _state(*b)))
    c = init_backbones(tiny_backbone, seed=4)
    assert not all(torch.equal(x, y) for x, y in zip(_state(*a), _state(*c)))


def test_save_load_roundtrip(tiny_backbone, tmp_path):
    a = init_backbones(tiny_backbone, seed=1)
    path = tmp_path / "bb.lmde"
    save_backbones(*a, tiny_backbone, path)
    b = init_backbones(tiny_backbone, seed=99, weights_path=path)
    assert all(torch.equal(x, y) for x, y in zip(_state(*a), _state(*b)))
    # bytes are stable too
    path2 = tmp_path / "bb2.lmde"
    save_backbones(*b, tiny_backbone, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_load_wrong_width(tiny_backbone, tmp_path):
    path = tmp_path / "bb.lmde"
    save_backbones(*init_backbones(tiny_backbone, 0), tiny_backbone, path)
    other = BackboneConfig(d_m=32, D=16, V=128, vision_layers=1, text_layers=1, heads=2,
                           patch_size=8, dropout=0.0, image_size=32, max_text_len=64)
    with pytest.raises(WeightLoadError):
        init_backbones(other, 0, weights_path=path)


def test_load_wrong_tensor_shape(tiny_backbone, tmp_path):
    path = tmp_path / "bb.lmde"
    save_backbones(*init_backbones(tiny_backbone, 0), tiny_backbone, path)
    header, tensors = read_tensors(path)
    tensors["vision.pos"] = np.zeros((3, 3), np.float32)
    write_tensors(path, header, tensors)
    with pytest.raises(WeightLoadError):
        init_backbones(tiny_backbone, 0, weights_path=path)


def test_weight_file_layout(tmp_path):
    path = tmp_path / "w.lmde"
    write_tensors(path, [7, -2], {"ab": np.array([[1.5, 2.0]], np.float32)})
    raw = path.read_bytes()
    assert raw[:5] == MAGIC
    expected = (MAGIC + (2).to_bytes(4, "little") + (7).to_bytes(4, "little")
                + (-2).to_bytes(4, "little", signed=True) + (1).to_bytes(4, "little")
                + (2).to_bytes(4, "little") + b"ab" + (2).to_bytes(4, "little")
                + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                + np.array([1.5, 2.0], "<f4").tobytes())
    assert raw == expected


def test_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE!" + bytes(8))
    with pytest.raises(WeightLoadError):
        read_tensors(tmp_path / "x")


def test_truncated(tmp_path):
    path = tmp_path / "w.lmde"
    write_tensors(path, [1], {"t": np.ones((4, 4), np.float32)})
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(WeightLoadError):
        read_tensors(path)


class TestEncodeImage:
    def test_full_width_shape(self):
        cfg = BackboneConfig(d_m=768, D=96, V=512, vision_layers=1, text_layers=1, heads=12, dropout=0.0)
        vision, _, _ = init_backbones(cfg, 0)
        out = encode_image(vision.eval(), torch.rand(196, 768))
        assert out.shape == (196, 768)

    def test_toy_shape(self):
        cfg = BackboneConfig(d_m=8, D=8, V=64, vision_layers=1, text_layers=1, heads=2,
                             patch_size=16, image_size=32)
        vision, _, _ = init_backbones(cfg, 0)
        out = encode_image(vision.eval(), torch.rand(4, 768))
        assert out.shape == (4, 8) and torch.isfinite(out).all()

    def test_patch_count_mismatch(self, tiny_backbone):
        vision, _, _ = init_backbones(tiny_backbone, 0)
        with pytest.raises(ShapeError):
            encode_image(vision, torch.rand(5, tiny_backbone.patch_dim))

    def test_permutation_equivariance_without_positions(self, tiny_backbone):
        vision, _, _ = init_backbones(tiny_backbone, 0)
        vision.eval()
        with torch.no_grad():
            vision.pos.zero_()
        x = torch.rand(16, tiny_backbone.patch_dim, dtype=torch.float64)
        vision.double()
        perm = torch.randperm(16, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            assert torch.allclose(encode_image(vision, x[perm]), encode_image(vision, x)[perm], atol=1e-12)


class TestEmbedTokens:
    def test_lookup(self, tiny_backbone):
        _, E, _ = init_backbones(tiny_backbone, 0)
        out = embed_tokens(E, [0, 0])
        assert torch.equal(out[0], out[1]) and torch.equal(out[0], E.E[0])

    def test_rows_match_table(self, tiny_backbone):
        _, E, _ = init_backbones(tiny_backbone, 0)
        ids = [5, 2, 127]
        assert torch.equal(embed_tokens(E, ids), E.E[ids])

    def test_empty(self, tiny_backbone):
        _, E, _ = init_backbones(tiny_backbone, 0)
        assert embed_tokens(E, []).shape == (0, tiny_backbone.D)

    def test_out_of_vocab(self, tiny_backbone):
        _, E, _ = init_backbones(tiny_backbone, 0)
        with pytest.raises(VocabError):
            embed_tokens(E, [tiny_backbone.V])


class TestEncodeSequence:
    def test_single_token(self, tiny_backbone):
        _, _, text = init_backbones(tiny_backbone, 0)
        assert encode_sequence(text.eval(), torch.rand(1, tiny_backbone.D)).shape == (1, tiny_backbone.D)

    def test_eval_deterministic(self):
        cfg = BackboneConfig(d_m=16, D=16, V=64, heads=2, dropout=0.1, image_size=32)
        _, _, text = init_backbones(cfg, 0)
        text.eval()
        x = torch.rand(7, 16)
        assert torch.equal(encode_sequence(text, x), encode_sequence(text, x))

    def test_train_mode_reproducible_with_seed(self):
        cfg = BackboneConfig(d_m=16, D=16, V=64, heads=2, dropout=0.5, image_size=32)
        _, _, text = init_backbones(cfg, 0)
        text.train()
        x = torch.rand(7, 16)
        torch.manual_seed(5)
        a = encode_sequence(text, x)
        torch.manual_seed(5)
        assert torch.equal(a, encode_sequence(text, x))

    def test_zero_blocks_pass_through(self, tiny_backbone):
        _, _, text = init_backbones(tiny_backbone, 0)
        with torch.no_grad():
            for name, p in text.named_parameters():
                if "norm" not in name:
                    p.zero_()
        x = torch.randn(5, tiny_backbone.D)
        assert torch.equal(encode_sequence(text.eval(), x), x)

    def test_bidirectional(self, tiny_backbone):
        # a change at the last position reaches the first one (no causal mask)
        _, _, text = init_backbones(tiny_backbone, 0)
        text.eval()
        x = torch.randn(4, tiny_backbone.D)
        y = x.clone()
        y[-1] = torch.randn(tiny_backbone.D)
        assert not torch.allclose(encode_sequence(text, x)[0], encode_sequence(text, y)[0])

    def test_non_finite(self, tiny_backbone):
        _, _, text = init_backbones(tiny_backbone, 0)
        x = torch.zeros(3, tiny_backbone.D)
        x[1, 2] = float("nan")
        with pytest.raises(NumericError):
            encode_sequence(text, x)

    def test_length_preserved_batched(self, tiny_backbone):
        _, _, text = init_backbones(tiny_backbone, 0)
        assert encode_sequence(text.eval(), torch.rand(3, 11, tiny_backbone.D)).shape == (3, 11, tiny_backbone.D)
