import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from llm_mde.errors import ConfigError, ShapeError, StateError
from llm_mde.lora import (LoraAdapter, LoraLinear, adapters, effective_weight, init_adapter,
                          merge_adapter, trainable_param_count)
from llm_mde.model import LoraSettings
from oracles import loop_matmul


def _random_adapter(d_out, d_in, r, alpha, seed, dtype=torch.float64):
    a = init_adapter(d_out, d_in, r, alpha, seed).to(dtype)
    g = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        a.B.copy_(torch.randn(a.B.shape, generator=g, dtype=dtype))
    return a


class TestInit:
    def test_fresh_adapter_is_identity(self):
        W = torch.randn(8, 6)
        assert torch.equal(effective_weight(W, init_adapter(8, 6, 3, 16, seed=0)), W)

    def test_same_seed_same_A(self):
        assert torch.equal(init_adapter(8, 8, 2, 4, seed=5).A, init_adapter(8, 8, 2, 4, seed=5).A)
        assert not torch.equal(init_adapter(8, 8, 2, 4, seed=5).A, init_adapter(8, 8, 2, 4, seed=6).A)

    def test_rank_bound(self):
        with pytest.raises(ConfigError):
            init_adapter(8, 8, 5, 5, seed=0)
        with pytest.raises(ConfigError):
            LoraAdapter(8, 8, 0, 1)
        init_adapter(8, 8, 4, 4, seed=0)


class TestEffectiveWeight:
    def test_zero_A(self):
        a = _random_adapter(4, 4, 2, 2, 0)
        with torch.no_grad():
            a.A.zero_()
        W = torch.randn(4, 4, dtype=torch.float64)
        assert torch.equal(effective_weight(W, a), W)

    def test_two_by_two_example(self):
        a = LoraAdapter(2, 2, 1, 1).double()
        a.rank = 1  # r = 1 is allowed only by min/2 == 1
        with torch.no_grad():
            a.A.copy_(torch.tensor([[1.0], [0.0]]))
            a.B.copy_(torch.tensor([[0.0, 1.0]]))
        W = torch.eye(2, dtype=torch.float64)
        assert effective_weight(W, a).tolist() == [[1.0, 1.0], [0.0, 1.0]]

    def test_triple_loop_oracle(self):
        a = _random_adapter(6, 6, 2, 5.0, 3)
        W = torch.randn(6, 6, dtype=torch.float64)
        ref = W.numpy() + (5.0 / 2) * loop_matmul(a.A.detach().numpy(), a.B.detach().numpy())
        np.testing.assert_allclose(effective_weight(W, a).detach().numpy(), ref, rtol=0, atol=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            effective_weight(torch.zeros(6, 8), init_adapter(8, 6, 2, 2, 0))

    def test_full_rank_represents_any_update(self):
        # r = min/2 is the largest allowed rank; any rank-r target is reachable exactly
        g = torch.Generator().manual_seed(0)
        a = LoraAdapter(4, 4, 2, 2).double()
        target = torch.randn(4, 2, generator=g, dtype=torch.float64) @ torch.randn(2, 4, generator=g, dtype=torch.float64)
        U, S, Vh = torch.linalg.svd(target)
        with torch.no_grad():
            a.A.copy_(U[:, :2] * S[:2])
            a.B.copy_(Vh[:2])
        W = torch.randn(4, 4, generator=g, dtype=torch.float64)
        assert torch.allclose(effective_weight(W, a) - W, target, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 1000), c1=st.floats(-3, 3), c2=st.floats(-3, 3))
    def test_linear_in_A(self, seed, c1, c2):
        g = torch.Generator().manual_seed(seed)
        d = lambda A, B: (2.0 / 2) * A @ B
        A1, A2 = (torch.randn(6, 2, generator=g, dtype=torch.float64) for _ in range(2))
        B = torch.randn(2, 6, generator=g, dtype=torch.float64)
        W = torch.randn(6, 6, generator=g, dtype=torch.float64)

        def delta(A):
            a = LoraAdapter(6, 6, 2, 2).double()
            with torch.no_grad():
                a.A.copy_(A)
                a.B.copy_(B)
            return effective_weight(W, a) - W

        combo = delta(c1 * A1 + c2 * A2)
        assert torch.allclose(combo, c1 * delta(A1) + c2 * delta(A2), atol=1e-10)
        assert torch.allclose(delta(A1), d(A1, B), atol=1e-12)


class TestMerge:
    def test_merge_matches_adapter_forward(self):
        lin = LoraLinear(8, 8).double()
        torch.nn.init.normal_(lin.weight)
        a = lin.attach(2, 4, seed=1)
        with torch.no_grad():
            a.B.normal_()
        x = torch.randn(50, 8, dtype=torch.float64)
        before = lin(x)
        lin.merge()
        assert (lin(x) - before).abs().max() < 1e-6

    def test_fresh_merge_leaves_W(self):
        W = torch.randn(8, 8)
        assert torch.equal(merge_adapter(W, init_adapter(8, 8, 2, 4, 0)), W)

    def test_second_merge_raises(self):
        a = init_adapter(8, 8, 2, 4, 0)
        merge_adapter(torch.zeros(8, 8), a)
        with pytest.raises(StateError):
            merge_adapter(torch.zeros(8, 8), a)

    def test_merged_adapter_stops_training(self):
        a = init_adapter(8, 8, 2, 4, 0)
        merge_adapter(torch.zeros(8, 8), a)
        assert not any(p.requires_grad for p in a.parameters())

    def test_double_attach(self):
        lin = LoraLinear(8, 8)
        lin.attach(2, 2, 0)
        with pytest.raises(StateError):
            lin.attach(2, 2, 0)


class TestParamCount:
    def test_full_width(self):
        layer = LoraLinear(768, 768, bias=False)
        layer.weight.requires_grad_(False)
        layer.attach(32, 32, seed=0)
        assert trainable_param_count(layer) == (49152, 49152 + 768 * 768)

    def test_tiny(self):
        layer = LoraLinear(8, 8, bias=False)
        layer.weight.requires_grad_(False)
        layer.attach(1, 1, seed=0)
        assert trainable_param_count(layer)[0] == 16

    def test_frozen_scheme_has_no_adapters(self, tiny_model):
        m = tiny_model
        m.apply_lora(LoraSettings(scheme="frozen", vision_rank=2, text_rank=2))
        assert adapters(m) == []
        assert not any(p.requires_grad for p in m.vision.parameters())

    @pytest.mark.parametrize("scheme,count", [("lora_vision", 2), ("lora_both", 4)])
    def test_attaches_q_and_v(self, tiny_model, scheme, count):
        m = tiny_model
        m.apply_lora(LoraSettings(scheme=scheme, vision_rank=2, vision_alpha=4, text_rank=2, text_alpha=2))
        found = adapters(m)
        assert len(found) == count                          # one layer each, q and v
        assert {a.target.rsplit(".", 1)[1] for a in found} == {"q", "v"}
        trainable = {n for n, p in m.named_parameters() if p.requires_grad}
        assert all(".adapter." in n for n in trainable if n.startswith(("vision", "text", "embed")))


def test_frozen_weight_untouched_by_adapter_training():
    torch.manual_seed(0)
    lin = LoraLinear(8, 8)
    torch.nn.init.normal_(lin.weight)
    lin.weight.requires_grad_(False)
    lin.bias.requires_grad_(False)
    before = lin.weight.clone()
    lin.attach(2, 4, seed=0)
    opt = torch.optim.AdamW([p for p in lin.parameters() if p.requires_grad], lr=1e-2)
    for _ in range(20):
        opt.zero_grad()
        lin(torch.randn(4, 8)).pow(2).sum().backward()
        opt.step()
    assert torch.equal(lin.weight, before)
    assert lin.adapter.B.abs().sum() > 0
