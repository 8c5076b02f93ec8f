import json
import math

import pytest
import torch

from gdatpred.gdat import GDAT, LatentEncoder, TemporalAttention, TopologicalLayer, attention_dump, masked_softmax
from gdatpred.gradcheck import check_gradients
from gdatpred.graph import SpatioTemporalGraph, distance_adjacency
from gdatpred.losses import kl_term


def random_graph(n=4, t=3, dn=64, de=16, threshold=6.0, seed=0, b=1):
    g = torch.Generator().manual_seed(seed)
    pos = torch.randn(b, t, n, 2, generator=g, dtype=torch.float64) * 5
    mask = torch.ones(b, n, dtype=torch.bool)
    return SpatioTemporalGraph(
        nodes=torch.randn(b, t, n, dn, generator=g, dtype=torch.float64) * 0.3,
        edges=torch.randn(b, t, n, n, de, generator=g, dtype=torch.float64) * 0.3,
        adjacency=distance_adjacency(pos, mask, threshold),
        mask=mask, window="history", threshold=threshold,
    )


def path_graph(n=6, dn=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    pos = torch.tensor([[[[6.0 * k, 0.0] for k in range(n)]]], dtype=torch.float64)
    mask = torch.ones(1, n, dtype=torch.bool)
    return SpatioTemporalGraph(
        nodes=torch.randn(1, 1, n, dn, generator=g, dtype=torch.float64),
        edges=torch.randn(1, 1, n, n, 16, generator=g, dtype=torch.float64) * 0.1,
        adjacency=distance_adjacency(pos, mask, 10.0), mask=mask, window="history", threshold=10.0,
    )


def test_kernel_attention_scripted_oracle():
    layer = TopologicalLayer(1, 1, heads=1).double()
    with torch.no_grad():
        layer.raw_lambda.fill_(math.log(math.expm1(1.0)))  # lambda = 1 at full precision
    assert layer.lam.item() == pytest.approx(1.0, abs=1e-15)
    nodes = torch.tensor([0.0, 1.0, 2.0], dtype=torch.float64).view(1, 1, 3, 1)
    edges = torch.zeros(1, 1, 3, 3, 16, dtype=torch.float64)
    adj = torch.tensor([[False, True, True], [True, False, False], [True, False, False]]).view(1, 1, 3, 3)
    alpha = layer.attention(nodes, edges, adj, torch.ones(1, 3, dtype=torch.bool), self_loops=False)[0, 0, 0]
    e1, e4 = math.exp(-1.0), math.exp(-4.0)
    assert alpha[0, 1].item() == pytest.approx(e1 / (e1 + e4), abs=1e-12)
    assert alpha[0, 2].item() == pytest.approx(e4 / (e1 + e4), abs=1e-12)
    assert alpha[0, 1].item() == pytest.approx(0.9526, abs=1e-4)


def test_singleton_and_symmetric_neighbours():
    layer = TopologicalLayer(2, 2, heads=1).double()
    nodes = torch.tensor([[0.0, 0.0], [1.0, 1.0], [1.0, 1.0]], dtype=torch.float64).view(1, 1, 3, 2)
    edges = torch.ones(1, 1, 3, 3, 4, dtype=torch.float64)
    mask = torch.ones(1, 3, dtype=torch.bool)
    only = torch.tensor([[False, True, False], [True, False, False], [False, False, False]]).view(1, 1, 3, 3)
    a = layer.attention(nodes, edges, only, mask, self_loops=False)[0, 0, 0]
    assert a[0, 1].item() == 1.0
    assert a[2].sum().item() == 0.0  # empty neighbourhood without self loop
    both = torch.tensor([[False, True, True], [True, False, False], [True, False, False]]).view(1, 1, 3, 3)
    a = layer.attention(nodes, edges, both, mask, self_loops=False)[0, 0, 0]
    assert a[0, 1].item() == pytest.approx(0.5, abs=1e-15) and a[0, 2].item() == pytest.approx(0.5, abs=1e-15)


def test_isolated_node_self_term():
    layer = TopologicalLayer(8, 8, heads=2).double()
    g = random_graph(n=3, dn=8, threshold=1e-6)
    assert not g.adjacency.any()
    out, alpha = layer(g.nodes, g.edges, g.adjacency, g.mask)
    assert torch.equal(alpha, torch.eye(3, dtype=torch.float64).expand_as(alpha))
    w = layer.weight  # (H, in, d)
    expected = torch.cat([torch.nn.functional.leaky_relu(g.nodes @ w[h], 0.2) for h in range(2)], -1)
    torch.testing.assert_close(out, expected, rtol=1e-14, atol=1e-14)


def test_head_width_validation():
    with pytest.raises(ValueError):
        TopologicalLayer(64, 64, heads=5)
    with pytest.raises(ValueError):
        GDAT(64, 4, rounds=0)


def test_rows_stochastic_small():
    gd = GDAT(64, 4, 2, 2).double()
    for seed in range(20):
        g = random_graph(n=2 + seed % 7, t=4, threshold=2.0 + seed, seed=seed)
        out = gd(g, 4)
        for a in out.alphas:
            torch.testing.assert_close(a.sum(-1), torch.ones_like(a.sum(-1)), rtol=0, atol=1e-12)
        b = out.betas["history"]
        torch.testing.assert_close(b.sum(-1), torch.ones_like(b.sum(-1)), rtol=0, atol=1e-12)


def test_permutation_equivariance_exact():
    torch.manual_seed(0)
    gd = GDAT(64, 4, 2, 2).double()
    g = random_graph(n=6, t=5, seed=3)
    g.window = "history+future"
    out = gd(g, 3)
    for seed in range(10):
        perm = torch.randperm(6, generator=torch.Generator().manual_seed(seed)).tolist()
        p = gd(g.permuted(perm), 3)
        assert torch.equal(p.history, out.history[:, perm])
        assert torch.equal(p.future, out.future[:, perm])
        assert torch.equal(p.vbar, out.vbar[:, :, perm])


@pytest.mark.parametrize("rounds", [1, 2])
def test_locality_on_path(rounds):
    torch.manual_seed(1)
    gd = GDAT(8, 2, rounds, 1).double()
    g = path_graph()
    base, _ = gd.topological(g)
    for far in range(rounds + 1, 6):
        h = path_graph()
        h.nodes[0, 0, far] += 1.0
        changed, _ = gd.topological(h)
        assert torch.equal(changed[0, 0, 0], base[0, 0, 0]), far
    near = path_graph()
    near.nodes[0, 0, rounds] += 1.0
    changed, _ = gd.topological(near)
    assert not torch.equal(changed[0, 0, 0], base[0, 0, 0])


def test_second_order_propagation():
    torch.manual_seed(2)
    gd = GDAT(8, 2, 2, 1).double()
    g = path_graph(n=3)
    h = path_graph(n=3)
    h.nodes[0, 0, 2] += 0.5
    two, _ = gd.topological(g)
    two_h, _ = gd.topological(h)
    one, _ = gd.topological(g, rounds=1)
    one_h, _ = gd.topological(h, rounds=1)
    assert not torch.equal(two[0, 0, 0], two_h[0, 0, 0])
    assert torch.equal(one[0, 0, 0], one_h[0, 0, 0])


def test_temporal_examples():
    ta = TemporalAttention(1, heads=1).double()
    with torch.no_grad():
        ta.w.fill_(1.0)
    vbar = torch.tensor([0.0, 1.0], dtype=torch.float64).view(1, 2, 1, 1)
    beta, summary = ta(vbar)
    e = math.exp(1.0)
    assert beta[0, 0, 0].tolist() == pytest.approx([1 / (1 + e), e / (1 + e)], abs=1e-12)
    assert summary.item() == pytest.approx(e / (1 + e), abs=1e-12)
    assert summary.item() == pytest.approx(0.7311, abs=1e-4)

    ta = TemporalAttention(5, heads=2).double()
    same = torch.randn(1, 1, 3, 5, dtype=torch.float64).expand(1, 4, 3, 5)
    beta, summary = ta(same)
    torch.testing.assert_close(beta, torch.full_like(beta, 0.25), rtol=0, atol=1e-15)
    torch.testing.assert_close(summary, same[:, 0], rtol=1e-14, atol=1e-14)
    beta, summary = ta(same[:, :1])
    assert (beta == 1).all() and torch.allclose(summary, same[:, 0], rtol=1e-14, atol=0)
    with pytest.raises(ValueError):
        ta(same[:, :0])


def test_uniform_mode():
    gd = GDAT(64, 4, 2, 2, uniform=True).double()
    g = random_graph(n=5, t=3, threshold=6.0, seed=4)
    out = gd(g)
    keep = g.adjacency | torch.eye(5, dtype=torch.bool)
    deg = keep.sum(-1, keepdim=True).to(torch.float64)
    expected = (keep / deg)[:, :, None].expand_as(out.alphas[0])
    for a in out.alphas:
        torch.testing.assert_close(a, expected, rtol=0, atol=1e-15)
    torch.testing.assert_close(out.betas["history"], torch.full_like(out.betas["history"], 1 / 3), rtol=0, atol=1e-15)


def test_masked_softmax_empty_rows():
    s = torch.randn(2, 3, dtype=torch.float64)
    keep = torch.tensor([[True, False, True], [False, False, False]])
    p = masked_softmax(s, keep)
    assert p[1].sum() == 0 and p[0, 1] == 0
    assert p[0].sum().item() == pytest.approx(1.0, abs=1e-15)


def test_latent_encoder_and_kl():
    enc = LatentEncoder(64, 128, 32).double()
    h = torch.randn(2, 3, 64, dtype=torch.float64)
    mu = enc(h, torch.randn(2, 3, 64, dtype=torch.float64))
    assert mu.shape == (2, 3, 32)
    with pytest.raises(ValueError):
        enc(h, None)
    assert kl_term(torch.zeros(4, 32)).item() == 0.0
    m = torch.randn(5, 32, dtype=torch.float64)
    assert kl_term(m).item() == pytest.approx((0.5 * (m * m).sum(-1)).mean().item(), rel=1e-14)


def test_kl_gradient_wrt_encoder():
    torch.manual_seed(6)
    enc = LatentEncoder(16, 32, 8).double()
    h, f = torch.randn(4, 16, dtype=torch.float64), torch.randn(4, 16, dtype=torch.float64)
    res = check_gradients(lambda: kl_term(enc(h, f)), list(enc.named_parameters()), samples=100)
    assert res.max_rel_error < 1e-4, res.worst()


def test_attention_dump():
    gd = GDAT(64, 4, 2, 2).double()
    g = random_graph(n=3, t=2)
    out = gd(g)
    d = json.loads(attention_dump(out, g.mask))
    assert len(d["alpha"]) == 2 and len(d["alpha"][0]) == 2 and len(d["alpha"][0][0]) == 4
    assert len(d["beta"]["history"][0]) == 3
