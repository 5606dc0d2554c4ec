import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

import reference as R
from garmentflow.conditioning import (
    VARIANTS,
    ConditionEncoder,
    GarmentEncoder,
    Refiner,
    RefinerConfig,
    TextEncoder,
    masked_self_attention,
    modality_tags,
    refine,
    text_blind_mask,
)
from garmentflow.diffcore import ShapeError, finite_diff_gradient
from garmentflow.layers import SelfAttention


def seeded(cls, *args, seed=0):
    torch.manual_seed(seed)
    return cls(*args).double()


# ---------------------------------------------------------------- encoders


def test_text_equal_prompts_equal_sequences():
    enc = seeded(TextEncoder, 8)
    ids = torch.tensor([[0, 5, 8, 15], [0, 5, 8, 15]])
    out = enc(ids)
    assert torch.equal(out[0], out[1])


def test_text_zeroed_row_gives_position_only():
    enc = seeded(TextEncoder, 8)
    with torch.no_grad():
        enc.table[5].zero_()
    out = enc(torch.tensor([[0, 5, 8, 15]]))
    assert torch.equal(out[0, 1], enc.pos[1])


def test_text_out_of_range():
    enc = TextEncoder(8)
    with pytest.raises(ValueError):
        enc(torch.tensor([[0, 5, 16, 15]]))
    with pytest.raises(ValueError):
        enc(torch.tensor([[-1, 5, 8, 15]]))


def test_text_gradient_only_on_used_rows():
    enc = seeded(TextEncoder, 4)
    ids = torch.tensor([[0, 5, 8, 15]])
    w = torch.randn(1, 4, 4, dtype=torch.float64)

    def loss():
        return (torch.tanh(enc(ids)) * w).sum()

    grad = torch.autograd.grad(loss(), enc.table)[0]
    with torch.no_grad():
        fd = finite_diff_gradient(lambda _: loss().item(), enc.table, 1e-5)
    used = torch.zeros(16, dtype=torch.bool)
    used[[0, 5, 8, 15]] = True
    assert torch.all(grad[~used] == 0) and torch.all(fd[~used] == 0)
    assert torch.all(grad[used].abs().sum(-1) > 0)
    assert torch.allclose(grad, fd, atol=1e-8)


def test_garment_zero_image_gives_positions():
    enc = seeded(GarmentEncoder, 8)
    with torch.no_grad():
        enc.proj.bias.zero_()
    out = enc(torch.zeros(1, 16, 16, 3, dtype=torch.float64))
    assert out.shape == (1, 16, 8)
    assert torch.equal(out[0], enc.pos)


def test_garment_wrong_shape():
    with pytest.raises(ShapeError):
        GarmentEncoder(8)(torch.zeros(1, 16, 12, 3))


def test_garment_patch_swap_swaps_tokens():
    enc = seeded(GarmentEncoder, 8)
    img = torch.rand(1, 16, 16, 3, dtype=torch.float64)
    swapped = img.clone()
    # patch 1 is rows 0:4 cols 4:8; patch 6 is rows 4:8 cols 8:12
    swapped[0, 0:4, 4:8], swapped[0, 4:8, 8:12] = img[0, 4:8, 8:12], img[0, 0:4, 4:8]
    a = enc(img)[0] - enc.pos
    b = enc(swapped)[0] - enc.pos
    perm = list(range(16))
    perm[1], perm[6] = 6, 1
    assert torch.equal(a[perm], b)


def test_garment_projection_matches_loop():
    enc = seeded(GarmentEncoder, 8)
    img = torch.rand(1, 16, 16, 3, dtype=torch.float64)
    W = enc.proj.weight.detach().numpy()
    bias = enc.proj.bias.detach().numpy()
    flat = R.patches(img[0].numpy(), 4)
    expect = np.zeros((16, 8))
    for t in range(16):
        for o in range(8):
            expect[t, o] = sum(W[o, i] * flat[t, i] for i in range(48)) + bias[o]
    expect += enc.pos.detach().numpy()
    np.testing.assert_allclose(enc(img)[0].detach().numpy(), expect, atol=1e-12)


# ---------------------------------------------------------------- masked self attention


def test_text_blind_mask_rule():
    allowed = text_blind_mask(modality_tags(2, 2))
    assert allowed.tolist() == [
        [True, True, True, True],
        [True, True, True, True],
        [False, False, True, True],
        [False, False, True, True],
    ]


def test_masked_attention_text_perturbation():
    attn = seeded(SelfAttention, 8, 2)
    tags = modality_tags(3, 5)
    x = torch.randn(1, 8, 8, dtype=torch.float64)
    y = x.clone()
    y[:, :3] += torch.randn(1, 3, 8, dtype=torch.float64) * 10
    a = masked_self_attention(x, tags, attn)
    b = masked_self_attention(y, tags, attn)
    assert torch.equal(a[:, 3:], b[:, 3:])
    assert not torch.equal(a[:, :3], b[:, :3])


def test_masked_attention_image_only_is_unmasked():
    attn = seeded(SelfAttention, 8, 2)
    x = torch.randn(1, 5, 8, dtype=torch.float64)
    assert torch.equal(masked_self_attention(x, modality_tags(0, 5), attn), attn(x))


def test_masked_attention_toy_2_plus_2():
    attn = seeded(SelfAttention, 4, 1)
    x = torch.randn(1, 4, 4, dtype=torch.float64)
    P = {f"a.{n}": p.detach().numpy() for n, p in attn.state_dict().items()}
    ref = R.self_attention(x[0].numpy(), P, "a", 1, R.text_blind(2, 2))
    out = masked_self_attention(x, modality_tags(2, 2), attn)
    np.testing.assert_allclose(out[0].detach().numpy(), ref, atol=1e-12)


# ---------------------------------------------------------------- refiners


class _Cfg:
    """Minimal stand-in for the reference's config argument."""

    def __init__(self, rc: RefinerConfig):
        self.refiner = rc.variant
        self.refiner_depth = rc.depth
        self.heads = rc.heads
        self.masked_attention = rc.masked


def run_refiner(variant, text, image, masked=True, depth=2, seed=0):
    torch.manual_seed(seed)
    r = Refiner(RefinerConfig(variant, depth, 8, 2, masked)).double()
    return r, r(text, image)


def test_unknown_variant():
    with pytest.raises(ValueError):
        RefinerConfig("transformer-xl")
    with pytest.raises(ValueError):
        RefinerConfig("joint", depth=0)
    with pytest.raises(ValueError):
        RefinerConfig("joint", dim=10, heads=4)


def test_none_is_identity():
    text = torch.randn(2, 4, 8, dtype=torch.float64)
    image = torch.randn(2, 16, 8, dtype=torch.float64)
    _, out = run_refiner("none", text, image)
    assert torch.equal(out, torch.cat([text, image], 1))


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("masked", [True, False])
def test_refiner_matches_reference(variant, masked):
    text = torch.randn(1, 4, 8, dtype=torch.float64)
    image = torch.randn(1, 5, 8, dtype=torch.float64)
    r, out = run_refiner(variant, text, image, masked)
    P = {f"cond.refiner.{n}": p.detach().numpy() for n, p in r.state_dict().items()}
    ref = R.refine(P, _Cfg(r.cfg), text[0].numpy(), image[0].numpy())
    np.testing.assert_allclose(out[0].detach().numpy(), ref, atol=1e-10)


def test_joint_three_token_scalar_reference():
    # 1 text + 2 image tokens, one block, everything by hand
    torch.manual_seed(3)
    r = Refiner(RefinerConfig("joint", 1, 4, 1, True)).double()
    x = torch.randn(1, 3, 4, dtype=torch.float64)
    P = {n: p.detach().numpy() for n, p in r.state_dict().items()}
    xs = x[0].numpy()

    h = R.ln(xs, P, "blocks.0.norm1")
    qkv = R.linear(h, P, "blocks.0.attn.qkv")
    att = np.zeros((3, 4))
    for i in range(3):
        keys = [0, 1, 2] if i == 0 else [1, 2]
        s = [float(qkv[i, :4] @ qkv[j, 4:8]) / 2.0 for j in keys]
        w = R.softmax_list(s)
        for wj, j in zip(w, keys):
            att[i] += wj * qkv[j, 8:]
    xs = xs + R.linear(att, P, "blocks.0.attn.proj")
    xs = xs + R.mlp(R.ln(xs, P, "blocks.0.norm2"), P, "blocks.0.mlp")
    expect = R.ln(xs, P, "out_norm")

    out = r(x[:, :1], x[:, 1:])
    np.testing.assert_allclose(out[0].detach().numpy(), expect, atol=1e-12)


@pytest.mark.parametrize("variant", ["joint", "fusion"])
@given(st.integers(0, 2**31))
def test_image_outputs_are_text_blind(variant, seed):
    g = torch.Generator().manual_seed(seed)
    text = torch.randn(2, 4, 8, generator=g, dtype=torch.float64)
    image = torch.randn(2, 16, 8, generator=g, dtype=torch.float64)
    other = torch.randn(2, 4, 8, generator=g, dtype=torch.float64) * 5
    r, a = run_refiner(variant, text, image)
    b = r(other, image)
    assert torch.equal(a[:, 4:], b[:, 4:])


def test_unmasked_joint_is_not_text_blind():
    text = torch.randn(1, 4, 8, dtype=torch.float64)
    image = torch.randn(1, 16, 8, dtype=torch.float64)
    r, a = run_refiner("joint", text, image, masked=False)
    assert not torch.equal(a[:, 4:], r(text + 1, image)[:, 4:])


@pytest.mark.parametrize("variant", ["parallel", "fusion"])
def test_branch_parameters_disjoint(variant):
    r = Refiner(RefinerConfig(variant, 2, 8, 2))
    text = {n for n, _ in r.named_parameters() if n.startswith("text.")}
    image = {n for n, _ in r.named_parameters() if n.startswith("image.")}
    assert text and image
    strip = lambda names: {n.split(".", 1)[1] for n in names}
    assert strip(text) == strip(image)
    text_ids = {id(p) for n, p in r.named_parameters() if n.startswith("text.")}
    image_ids = {id(p) for n, p in r.named_parameters() if n.startswith("image.")}
    assert not text_ids & image_ids


@pytest.mark.parametrize("variant", VARIANTS)
@given(st.integers(1, 6), st.integers(1, 20))
def test_shape_preservation(variant, lt, li):
    r = Refiner(RefinerConfig(variant, 1, 8, 2))
    out, tags = refine(torch.randn(2, lt, 8), torch.randn(2, li, 8), r)
    assert out.shape == (2, lt + li, 8)
    assert tags.tolist() == [False] * lt + [True] * li


def test_condition_encoder_length():
    enc = ConditionEncoder(RefinerConfig("fusion", 1, 8, 2))
    c = enc(torch.tensor([[0, 5, 8, 15]]), torch.rand(1, 16, 16, 3))
    assert c.shape == (1, 20, 8)
