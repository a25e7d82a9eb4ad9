import pytest
import torch

from sitsclue.encoder import ModelConfig, SegmentationNet, TSViT, classify_global, patchify, unpatchify_labels
from sitsclue.errors import ConfigError


def small(**kw):
    base = dict(d=16, temporal_layers=2, spatial_layers=1, heads=4, K=4, T=12, C=3, H=8, W=8)
    base.update(kw)
    return ModelConfig(**base)


def make(cfg, dtype=torch.float64, seed=0):
    torch.manual_seed(seed)
    return TSViT(cfg).to(dtype).eval()


def test_patch_count_16x16():
    cfg = ModelConfig(d=8, heads=2, H=16, W=16)
    assert cfg.n_patches == 64
    x = torch.rand(1, cfg.T, cfg.C, 16, 16)
    proj = torch.nn.Linear(cfg.C * 4, cfg.d)
    assert patchify(x, proj, cfg).shape == (1, 64, cfg.T, cfg.d)


def test_patchify_single_timestep():
    cfg = small(T=1)
    proj = torch.nn.Linear(cfg.C * 4, cfg.d)
    assert patchify(torch.rand(2, 1, cfg.C, 8, 8), proj, cfg).shape == (2, 16, 1, cfg.d)


def test_patchify_zero_input_zero_bias():
    cfg = small()
    proj = torch.nn.Linear(cfg.C * 4, cfg.d)
    torch.nn.init.zeros_(proj.bias)
    assert torch.count_nonzero(patchify(torch.zeros(1, cfg.T, cfg.C, 8, 8), proj, cfg)) == 0


def test_patchify_layout():
    # patch (r, c) of the grid lands at index r*nw + c
    cfg = small(C=1, T=1)
    x = torch.zeros(1, 1, 1, 8, 8)
    x[0, 0, 0, 2:4, 6:8] = 1.0
    proj = torch.nn.Linear(4, 1, bias=False)
    torch.nn.init.ones_(proj.weight)
    z = patchify(x, proj, cfg)[0, :, 0, 0]
    assert z[1 * 4 + 3] == 4.0 and z.sum() == 4.0


@pytest.mark.parametrize("kw", [dict(H=7), dict(d=10, heads=4), dict(heads=0)])
def test_bad_model_config(kw):
    with pytest.raises(ConfigError):
        small(**kw)


def test_output_shapes():
    cfg = small()
    m = make(cfg)
    out = m(torch.rand(2, cfg.T, cfg.C, 8, 8, dtype=torch.float64))
    assert out.z_t_dense.shape == (2, 16, 4, 16)
    assert out.z_t_seq.shape == (2, 16, 12, 16)
    assert out.z_s_dense.shape == (2, 4, 16, 16)
    assert out.z_s_global.shape == (2, 4, 16)
    # sequence length K + T = 16 per patch
    assert out.attention[-1].shape == (2, 16, 4, 16, 16)
    assert out.t2c_attention_raw.shape == (2, 16, 4, 12)


def test_spatial_sequence_length():
    cfg = ModelConfig(d=8, heads=2, temporal_layers=1, spatial_layers=1, H=16, W=16)
    m = make(cfg)
    seen = {}
    blk = m.spatial_blocks[0]
    blk.register_forward_pre_hook(lambda mod, inp: seen.update(shape=inp[0].shape))
    out = m(torch.rand(1, cfg.T, cfg.C, 16, 16, dtype=torch.float64))
    assert seen["shape"][1] == 65
    assert out.z_s_dense.shape == (1, 4, 64, 8)


def test_attention_row_stochastic():
    cfg = small()
    out = make(cfg)(torch.rand(3, cfg.T, cfg.C, 8, 8, dtype=torch.float64))
    for a in out.attention:
        assert torch.allclose(a.sum(-1), torch.ones_like(a.sum(-1)), atol=1e-5)


def test_temporal_encoder_patch_permutation_equivariant():
    cfg = small()
    m = make(cfg)
    Z = torch.randn(2, 16, cfg.T, cfg.d, dtype=torch.float64)
    perm = torch.randperm(16)
    d1, s1, a1 = m.temporal_forward(Z)
    d2, s2, a2 = m.temporal_forward(Z[:, perm])
    assert torch.allclose(d1[:, perm], d2, atol=1e-12)
    assert torch.allclose(s1[:, perm], s2, atol=1e-12)
    assert torch.allclose(a1[-1][:, perm], a2[-1], atol=1e-12)


def test_spatial_classes_independent():
    cfg = small()
    m = make(cfg)
    z = torch.randn(1, 16, cfg.K, cfg.d, dtype=torch.float64)
    g1, d1 = m.spatial_forward(z)
    z2 = z.clone()
    z2[:, :, [0, 2, 3]] = 0.0
    g2, d2 = m.spatial_forward(z2)
    assert torch.allclose(g1[:, 1], g2[:, 1], atol=1e-12)
    assert torch.allclose(d1[:, 1], d2[:, 1], atol=1e-12)


def test_classify_global_examples():
    w = torch.zeros(4, 8, dtype=torch.float64)
    w[:, 0] = 1.0
    tok = torch.zeros(4, 8, dtype=torch.float64)
    tok[:, 0] = 1.0
    assert torch.equal(classify_global(tok, w), torch.ones(4, dtype=torch.float64))
    assert torch.equal(classify_global(torch.zeros(4, 8), w.float()), torch.zeros(4))
    t = torch.randn(4, 8, dtype=torch.float64)
    assert torch.allclose(classify_global(2 * t, w), 2 * classify_global(t, w))


def test_eval_forward_deterministic():
    cfg = small(dropout=0.3)
    m = make(cfg)
    x = torch.rand(2, cfg.T, cfg.C, 8, 8, dtype=torch.float64)
    assert torch.equal(m(x).z_s_global, m(x).z_s_global)


def test_classification_gradient_finite_difference():
    cfg = small(d=8, heads=2, temporal_layers=1, spatial_layers=1, H=4, W=4, T=3, C=2, K=2)
    m = make(cfg)
    x = torch.rand(2, cfg.T, cfg.C, 4, 4, dtype=torch.float64)
    y = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)

    def loss():
        logits = classify_global(m(x).z_s_global, m.classifier)
        return torch.nn.functional.binary_cross_entropy_with_logits(logits, y)

    m.zero_grad()
    loss().backward()
    checks = [(m.classifier, (1, 3)), (m.patch_embed.weight, (2, 5)), (m.temporal_cls, (0, 1))]
    h = 1e-6
    for p, idx in checks:
        g = p.grad[idx].item()
        with torch.no_grad():
            p[idx] += h
            up = loss().item()
            p[idx] -= 2 * h
            dn = loss().item()
            p[idx] += h
        fd = (up - dn) / (2 * h)
        assert abs(g - fd) <= 1e-4 * max(abs(fd), 1e-8) + 1e-10


def test_unpatchify_nearest():
    cfg = small(H=4, W=4)
    lab = torch.tensor([[1, 2, 3, 4]])
    up = unpatchify_labels(lab, cfg)
    assert up.shape == (1, 4, 4)
    assert up[0, 0, 0] == 1 and up[0, 1, 1] == 1 and up[0, 0, 2] == 2 and up[0, 3, 3] == 4


def test_segmentation_net_shape():
    cfg = small()
    torch.manual_seed(0)
    net = SegmentationNet(cfg).double()
    out = net(torch.rand(2, cfg.T, cfg.C, 8, 8, dtype=torch.float64))
    assert out.shape == (2, cfg.K + 1, 8, 8)


def test_input_standardization_fitted():
    cfg = small()
    m = make(cfg)
    x = torch.rand(5, cfg.T, cfg.C, 8, 8, dtype=torch.float64) * 3 + 2
    m.fit_input_stats(x)
    xs = (x - m.input_mean[:, None, None]) / m.input_std[:, None, None]
    assert torch.allclose(xs.mean(dim=(0, 1, 3, 4)), torch.zeros(cfg.C, dtype=torch.float64), atol=1e-12)
