import numpy as np
import pytest
import torch

from pivl.config import EncoderConfig
from pivl.encoders import (ConvEncoder, TextEncoder, ViTEncoder, build_image_encoder,
                           count_inference_params, parameter_digest)


@pytest.fixture(scope="module")
def conv_encoder():
    torch.manual_seed(0)
    return ConvEncoder(EncoderConfig(), (64, 32))


@pytest.fixture(scope="module")
def vit_encoder():
    torch.manual_seed(0)
    return ViTEncoder(EncoderConfig(variant="vit"), (64, 32))


def test_conv_stride_arithmetic(conv_encoder):
    out = conv_encoder(torch.randn(2, 3, 64, 32))
    assert tuple(out.stride4.shape[-2:]) == (16, 8)
    assert tuple(out.stride8.shape[-2:]) == (8, 4)
    assert tuple(out.stride16.shape[-2:]) == (4, 2)
    assert out.global_embed.shape == (2, 64)


def test_conv_stride_arithmetic_other_size():
    torch.manual_seed(1)
    enc = ConvEncoder(EncoderConfig(), (96, 48))
    out = enc(torch.randn(1, 3, 96, 48))
    assert tuple(out.stride4.shape[-2:]) == (24, 12)
    assert tuple(out.stride16.shape[-2:]) == (6, 3)


def test_conv_zero_image_finite(conv_encoder):
    out = conv_encoder(torch.zeros(1, 3, 64, 32))
    for t in (out.stride4, out.stride8, out.stride16, out.global_embed):
        assert torch.isfinite(t).all()


def test_conv_eval_deterministic(conv_encoder):
    conv_encoder.eval()
    x = torch.randn(3, 3, 64, 32)
    a = conv_encoder(x).global_embed
    b = conv_encoder(x).global_embed
    assert (a == b).all()


def test_conv_dim_mismatch(conv_encoder):
    with pytest.raises(ValueError):
        conv_encoder(torch.randn(1, 3, 32, 32))


def test_conv_cell_map_shape(conv_encoder):
    cells = conv_encoder.cell_embedding_map(torch.randn(2, 3, 64, 32))
    assert tuple(cells.shape) == (2, 64, 8, 4)


def test_vit_token_grid_and_global(vit_encoder):
    out = vit_encoder(torch.randn(2, 3, 64, 32))
    assert out.stride4 is None and out.stride16 is None
    assert tuple(out.stride8.shape[-2:]) == (8, 4)
    assert out.global_embed.shape == (2, 64)
    cells = vit_encoder.cell_embedding_map(torch.randn(2, 3, 64, 32))
    assert tuple(cells.shape) == (2, 64, 8, 4)


def test_vit_eval_deterministic(vit_encoder):
    vit_encoder.eval()
    x = torch.randn(2, 3, 64, 32)
    assert (vit_encoder(x).global_embed == vit_encoder(x).global_embed).all()


# ---------------------------------------------------------------------------
# text encoder
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def text_encoder():
    torch.manual_seed(3)
    return TextEncoder(EncoderConfig())


def test_text_encoder_frozen(text_encoder):
    assert all(not p.requires_grad for p in text_encoder.parameters())


def test_text_output_dim_and_batching(text_encoder):
    single = text_encoder(torch.randn(5, 32))
    assert single.shape == (64,)
    batch = text_encoder(torch.randn(4, 7, 32))
    assert batch.shape == (4, 64)


def test_text_identical_tokens_permutation(text_encoder):
    u = torch.randn(32)
    seq = torch.stack([u, u])
    a = text_encoder(seq)
    b = text_encoder(seq.flip(0))
    assert torch.allclose(a, b, atol=0)


def test_text_empty_and_too_long(text_encoder):
    with pytest.raises(ValueError):
        text_encoder(torch.zeros(0, 32))
    with pytest.raises(ValueError):
        text_encoder(torch.zeros(17, 32))


def _numpy_text_forward(enc: TextEncoder, tokens: np.ndarray) -> np.ndarray:
    """Independent float64 re-implementation of the mixing block."""
    sd = {k: v.detach().cpu().double().numpy() for k, v in enc.state_dict().items()}
    length, dt = tokens.shape
    x = tokens + sd["pos_embed"][:length]

    # layernorm
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    a = (x - mu) / np.sqrt(var + 1e-5) * sd["ln.weight"] + sd["ln.bias"]

    # in-proj packs q, k, v
    w = sd["attn.in_proj_weight"]
    b = sd["attn.in_proj_bias"]
    q, k, v = (a @ w[i * dt:(i + 1) * dt].T + b[i * dt:(i + 1) * dt] for i in range(3))
    heads = 2
    hd = dt // heads
    out = np.zeros_like(q)
    for h in range(heads):
        qs, ks, vs = (m[:, h * hd:(h + 1) * hd] for m in (q, k, v))
        scores = qs @ ks.T / np.sqrt(hd)
        scores = scores - scores.max(axis=1, keepdims=True)
        attn = np.exp(scores)
        attn = attn / attn.sum(axis=1, keepdims=True)
        out[:, h * hd:(h + 1) * hd] = attn @ vs
    attn_out = out @ sd["attn.out_proj.weight"].T + sd["attn.out_proj.bias"]

    x = x + attn_out
    pooled = x.mean(axis=0)
    h1 = pooled @ sd["fc1.weight"].T + sd["fc1.bias"]
    # exact gelu
    from scipy.stats import norm
    h1 = h1 * norm.cdf(h1)
    return h1 @ sd["fc2.weight"].T + sd["fc2.bias"]


def test_text_forward_matches_independent_oracle():
    torch.manual_seed(9)
    enc = TextEncoder(EncoderConfig()).double()
    rng = np.random.default_rng(0)
    for length in (1, 2, 5, 16):
        tokens = rng.normal(size=(length, 32))
        ours = enc(torch.as_tensor(tokens)).numpy()
        ref = _numpy_text_forward(enc, tokens)
        assert np.abs(ours - ref).max() < 1e-6


def test_text_single_vs_repeated_token_oracle():
    torch.manual_seed(10)
    enc = TextEncoder(EncoderConfig()).double()
    u = np.random.default_rng(1).normal(size=32)
    for seq in (u[None, :], np.stack([u, u])):
        ours = enc(torch.as_tensor(seq)).numpy()
        ref = _numpy_text_forward(enc, seq)
        assert np.abs(ours - ref).max() < 1e-6


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------

def test_count_params_deterministic(conv_encoder):
    assert count_inference_params(conv_encoder) == count_inference_params(conv_encoder)


def test_count_params_deployed_excludes_attachments(conv_encoder):
    from pivl.fusion import FusionHead
    from pivl.pipeline import IdentityClassifier, ReIDSystem

    torch.manual_seed(4)
    system = ReIDSystem(conv_encoder, classifier=IdentityClassifier(64, 10),
                        align_head=FusionHead((16, 32, 64), 64))
    full = count_inference_params(system, deployed_only=False)
    deployed = count_inference_params(system, deployed_only=True)
    assert deployed == count_inference_params(conv_encoder)
    assert full > deployed


def test_build_image_encoder_variants():
    torch.manual_seed(5)
    assert isinstance(build_image_encoder(EncoderConfig(), (64, 32)), ConvEncoder)
    assert isinstance(build_image_encoder(EncoderConfig(variant="vit"), (64, 32)), ViTEncoder)


def test_parameter_digest_tracks_changes(conv_encoder):
    d1 = parameter_digest(conv_encoder)
    saved = conv_encoder.pool.query.detach().clone()
    with torch.no_grad():
        conv_encoder.pool.query += 1.0
    d2 = parameter_digest(conv_encoder)
    with torch.no_grad():
        conv_encoder.pool.query.copy_(saved)
    assert d1 != d2
    assert parameter_digest(conv_encoder) == d1
