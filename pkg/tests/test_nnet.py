import math

import pytest
import torch
import torch.nn as nn

from triflow import nnet
from triflow.errors import NumericalError, ShapeError

torch.manual_seed(0)


# --- attention ----------------------------------------------------------------

def test_attention_singleton_returns_v():
    q = torch.randn(2, 1, 8)
    k = torch.randn(2, 1, 8)
    v = torch.randn(2, 1, 8)
    assert torch.allclose(nnet.attention(q, k, v), v, atol=1e-7)


def test_attention_identical_keys_half_weights():
    q = torch.randn(1, 1, 4)
    k = torch.randn(1, 1, 4).repeat(1, 2, 1)
    v = torch.tensor([[[1.0, 0, 0, 0], [0, 1.0, 0, 0]]])
    out = nnet.attention(q, k, v)
    assert torch.allclose(out, torch.tensor([[[0.5, 0.5, 0.0, 0.0]]]), atol=1e-7)


def test_attention_uniform_logits_mean_of_v():
    q = torch.zeros(1, 3, 4)
    k = torch.randn(1, 5, 4)
    v = torch.randn(1, 5, 4)
    out = nnet.attention(q, k, v)
    assert torch.allclose(out, v.mean(dim=1, keepdim=True).expand_as(out), atol=1e-6)


def test_attention_convex_combination():
    q = torch.randn(2, 4, 7, 8) * 5
    k = torch.randn(2, 4, 9, 8) * 5
    v = torch.randn(2, 4, 9, 8)
    out = nnet.attention(q, k, v)
    lo = v.min(dim=-2, keepdim=True).values
    hi = v.max(dim=-2, keepdim=True).values
    assert (out >= lo - 1e-6).all() and (out <= hi + 1e-6).all()


def test_attention_softmax_rows_sum_to_one():
    q = torch.randn(1, 6, 6) * 30  # large logits: stabilization must hold
    k = torch.randn(1, 6, 6) * 30
    v = torch.eye(6).unsqueeze(0)  # output rows are the softmax weights
    out = nnet.attention(q, k, v)
    assert torch.allclose(out.sum(-1), torch.ones(1, 6), atol=1e-6)


def test_attention_shape_errors():
    with pytest.raises(ShapeError):
        nnet.attention(torch.randn(1, 2, 4), torch.randn(1, 2, 5), torch.randn(1, 2, 5))
    with pytest.raises(ShapeError):
        nnet.attention(torch.randn(1, 2, 4), torch.randn(1, 3, 4), torch.randn(1, 2, 4))


def test_attention_mask_blocks():
    q = torch.randn(1, 2, 4)
    k = torch.randn(1, 2, 4)
    v = torch.randn(1, 2, 4)
    mask = torch.tensor([[True, False], [False, True]])
    out = nnet.attention(q, k, v, mask=mask)
    assert torch.allclose(out, v, atol=1e-7)  # each row attends only to itself


def test_attention_deterministic():
    q, k, v = (torch.randn(2, 3, 8) for _ in range(3))
    assert torch.equal(nnet.attention(q, k, v), nnet.attention(q, k, v))


# --- timestep embedding ---------------------------------------------------------

def test_timestep_embed_zero():
    e = nnet.timestep_embed(0.0, 16)
    assert torch.all(e[0::2] == 0.0)
    assert torch.all(e[1::2] == 1.0)


def test_timestep_embed_pair_norms():
    e = nnet.timestep_embed(0.37, 32)
    pairs = e.reshape(-1, 2)
    assert torch.allclose((pairs ** 2).sum(-1), torch.ones(16), atol=1e-6)


def test_timestep_embed_aliasing_only_highest_pair():
    dim = 8
    half = dim // 2
    omega_max = 10_000.0
    t0, t1 = 0.2, 0.2 + 2 * math.pi / omega_max
    e0 = nnet.timestep_embed(torch.tensor([t0], dtype=torch.float64), dim)[0]
    e1 = nnet.timestep_embed(torch.tensor([t1], dtype=torch.float64), dim)[0]
    diffs = (e0 - e1).reshape(half, 2).norm(dim=-1)
    assert diffs[-1] < 1e-9       # the omega_max pair aliases
    assert (diffs[:-1] > 1e-7).all()


def test_timestep_embed_odd_dim():
    with pytest.raises(ShapeError):
        nnet.timestep_embed(0.5, 7)


def test_timestep_embed_batched():
    e = nnet.timestep_embed(torch.tensor([0.0, 1.0]), 8)
    assert e.shape == (2, 8)


# --- AdaLN ---------------------------------------------------------------------

def test_adaln_zero_init_is_layernorm():
    m = nnet.AdaLN(16, 8)
    x = torch.randn(3, 5, 16)
    cond = torch.randn(3, 1, 8)
    ln = nn.LayerNorm(16, eps=nnet.LAYERNORM_EPS, elementwise_affine=False)
    assert torch.equal(m(x, cond), ln(x))


def test_adaln_constant_token_zero():
    m = nnet.AdaLN(8, 4)
    x = torch.full((1, 1, 8), 3.7)
    out = m(x, torch.zeros(1, 1, 4))
    assert torch.allclose(out, torch.zeros_like(out), atol=1e-7)


def test_layernorm_statistics():
    m = nnet.AdaLN(64, 8)
    x = torch.randn(4, 10, 64)
    out = m(x, torch.zeros(4, 1, 8))
    assert out.mean(-1).abs().max() < 1e-6
    assert (out.var(-1, unbiased=False) - 1).abs().max() < 1e-4


def test_adaln_modulation_changes_output():
    m = nnet.AdaLN(8, 4)
    nn.init.normal_(m.out.weight, std=0.5)
    x = torch.randn(2, 3, 8)
    c1, c2 = torch.randn(2, 1, 4), torch.randn(2, 1, 4)
    assert not torch.allclose(m(x, c1), m(x, c2))


# --- grad_eval vs finite differences ---------------------------------------------

class TinyNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.fc1 = nn.Linear(4, 6)
        self.fc2 = nn.Linear(6, 2)
        self.unused = nn.Linear(3, 3)

    def forward(self, x):
        return self.fc2(torch.tanh(self.fc1(x)))

    def param_groups(self):
        return nnet.ParamGroups({
            "body": list(self.fc1.named_parameters(prefix="fc1")),
            "head": list(self.fc2.named_parameters(prefix="fc2")),
            "unused": list(self.unused.named_parameters(prefix="unused")),
        })


def test_grad_eval_matches_finite_differences():
    torch.manual_seed(1)
    model = TinyNet().double()
    groups = model.param_groups()
    groups.set_trainable(["body", "head", "unused"])
    x = torch.randn(8, 4, dtype=torch.float64)
    y = torch.randn(8, 2, dtype=torch.float64)

    def loss_fn(batch):
        inp, tgt = batch
        return ((model(inp) - tgt) ** 2).mean()

    loss, grads = nnet.grad_eval(groups, loss_fn, (x, y))
    for gname in ("body", "head", "unused"):
        for p, g in zip(groups.parameters(gname), grads[gname]):
            fd = nnet.finite_difference_grad(p, lambda: loss_fn((x, y)))
            denom = torch.maximum(torch.maximum(g.abs(), fd.abs()), torch.tensor(1e-6))
            rel = ((g - fd).abs() / denom).max().item()
            assert rel < 1e-4, f"{gname}: rel err {rel}"


def test_grad_eval_unused_param_zero_grad():
    model = TinyNet().double()
    groups = model.param_groups()
    groups.set_trainable(["body", "head", "unused"])
    x = torch.randn(4, 4, dtype=torch.float64)

    def loss_fn(batch):
        return (model(batch) ** 2).mean()

    _, grads = nnet.grad_eval(groups, loss_fn, x)
    for g in grads["unused"]:
        assert torch.all(g == 0)


def test_grad_eval_frozen_group_absent():
    model = TinyNet().double()
    groups = model.param_groups()
    groups.set_trainable(["head"])

    def loss_fn(batch):
        return (model(batch) ** 2).mean()

    _, grads = nnet.grad_eval(groups, loss_fn, torch.randn(4, 4, dtype=torch.float64))
    assert set(grads) == {"head"}


def test_grad_eval_nonfinite_loss():
    model = TinyNet().double()
    groups = model.param_groups()
    groups.set_trainable(["head"])
    with pytest.raises(NumericalError):
        nnet.grad_eval(groups, lambda b: (model(b) / 0.0).mean(), torch.randn(2, 4, dtype=torch.float64))


def test_param_group_freeze_preserves_values():
    model = TinyNet()
    groups = model.param_groups()
    before = [p.clone() for p in groups.parameters("body")]
    groups.set_trainable(["head"])
    groups.set_trainable(["body", "head"])
    for b, p in zip(before, groups.parameters("body")):
        assert torch.equal(b, p)


# --- AdamW ---------------------------------------------------------------------

def test_adamw_zero_grad_no_decay_unchanged():
    p = torch.randn(5)
    before = p.clone()
    nnet.adamw_step([p], [torch.zeros(5)], {}, lr=0.1, weight_decay=0.0)
    assert torch.equal(p, before)


def test_adamw_first_step_sign_scaled():
    p = torch.zeros(1)
    g = torch.tensor([0.25])
    lr = 0.05
    nnet.adamw_step([p], [g], {}, lr=lr, weight_decay=0.0)
    expected = -lr * (g / (g.abs() + 1e-8))
    assert torch.allclose(p, expected, atol=1e-9)


def test_adamw_decoupled_decay():
    p = torch.tensor([2.0])
    lr = 0.1
    nnet.adamw_step([p], [torch.zeros(1)], {}, lr=lr, weight_decay=0.01)
    assert p.item() == pytest.approx(2.0 * (1 - lr * 0.01))


def test_adamw_moments_accumulate():
    p = torch.zeros(3)
    moments = {}
    for t in range(3):
        nnet.adamw_step([p], [torch.ones(3)], moments, lr=0.01, weight_decay=0.0)
    assert moments["step"] == 3
    assert moments["m"][0].abs().sum() > 0
