import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from fmri2text.domain_adaptation import (ClassifierHead, DAConfig, MemoryPool, es_loss, nc_loss,
                                         similarity_distribution, update_memory)
from fmri2text.numerics import ValidationError, grad_check
from oracles import es_oracle, nc_oracle

pytestmark = pytest.mark.usefixtures("float64")


def make(seed, N=6, C=3, d=5, B=4):
    g = torch.Generator().manual_seed(seed)
    pool = MemoryPool(list(range(100, 100 + N)), torch.randn(N, d, generator=g))
    head = ClassifierHead(d, C)
    with torch.no_grad():
        head.weight.copy_(torch.randn(C, d, generator=g))
    feats = F.normalize(torch.randn(B, d, generator=g), dim=-1)
    ids = [100 + int(i) for i in torch.randperm(N, generator=g)[:B]]
    return pool, head, feats, ids


@pytest.mark.parametrize("seed", range(20))
def test_nc_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    N, C, d = int(rng.integers(2, 9)), int(rng.integers(1, 5)), int(rng.integers(2, 6))
    B = int(rng.integers(1, N + 1))
    pool, head, feats, ids = make(seed, N, C, d, B)
    tau = float(rng.uniform(0.1, 1.0))
    got = float(nc_loss(feats, ids, pool, head, tau))
    want = nc_oracle(feats.numpy(), [pool.row_of[i] for i in ids], pool.features.numpy(),
                     head.prototypes().detach().numpy(), tau)
    assert abs(got - want) / want <= 1e-10


@pytest.mark.parametrize("seed", range(20))
def test_es_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    B, C = int(rng.integers(1, 9)), int(rng.integers(2, 5))
    p = torch.tensor(rng.dirichlet(np.full(C, 0.5), size=B))
    rho, m = math.log(C) / 2, 0.1
    got, want = float(es_loss(p, rho, m)), es_oracle(p.numpy(), rho, m)
    assert abs(got - want) <= 1e-10 * max(abs(want), 1e-12) or got == want == 0.0


def test_similarity_distribution_excludes_self():
    pool, head, _, _ = make(0, N=5, C=3)
    q = pool.features[2].clone()
    p = similarity_distribution(q, 102, pool, head, 0.5)
    assert p.shape == (5 + 3 - 1,)
    assert float(p.sum()) == pytest.approx(1.0, abs=1e-12)
    others = torch.cat([torch.cat([pool.features[:2], pool.features[3:]]), head.prototypes().detach()]) @ q / 0.5
    assert torch.allclose(p, torch.softmax(others, 0))


def test_nc_uniform_similarities_gives_log_candidates():
    N, C, d = 6, 3, 4
    pool = MemoryPool(list(range(N)), torch.ones(N, d))
    head = ClassifierHead(d, C)
    with torch.no_grad():
        head.weight.fill_(1.0)
    f = F.normalize(torch.ones(2, d), dim=-1)
    assert float(nc_loss(f, [0, 1], pool, head, 0.5)) == pytest.approx(math.log(N + C - 1), abs=1e-9)


def test_es_zero_inside_band_and_negative_gap_outside():
    C = 4
    uniform = torch.full((3, C), 1 / C)
    assert float(es_loss(uniform, math.log(C), 0.1)) == 0.0
    assert float(es_loss(uniform, math.log(C) - 0.05, 0.1)) == 0.0
    onehot = torch.eye(C)[:2] * (1 - 1e-12) + 1e-12 / C
    assert float(es_loss(onehot, 0.7, 0.1)) == pytest.approx(-0.7, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.5), st.floats(0.0, 0.5))
def test_es_bounds(seed, rho, margin):
    rng = np.random.default_rng(seed)
    p = torch.tensor(rng.dirichlet(np.ones(4), size=5))
    v = float(es_loss(p, rho, margin))
    assert v <= 0.0
    assert v >= -max(rho, math.log(4) - rho) - 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 2.0))
def test_nc_bounded_by_log_candidates(seed, tau):
    pool, head, feats, ids = make(seed)
    v = float(nc_loss(feats, ids, pool, head, tau))
    assert 0.0 <= v <= math.log(len(pool) + head.n_classes - 1) + 1e-12


def test_memory_update_replaces_rows_last_writer_wins():
    pool = MemoryPool([7, 8, 9], torch.eye(3))
    new = torch.tensor([[0.0, 2.0, 0.0], [0.0, 0.0, 5.0]])
    update_memory(pool, [7, 7], new)
    assert torch.allclose(pool.features[0], torch.tensor([0.0, 0.0, 1.0]))
    assert torch.allclose(pool.features[1:], torch.eye(3)[1:])
    with pytest.raises(ValidationError):
        update_memory(pool, [42], new[:1])


def test_pool_validation_and_roundtrip():
    with pytest.raises(ValidationError):
        MemoryPool([1, 1], torch.randn(2, 3))
    with pytest.raises(ValidationError):
        MemoryPool([1], torch.randn(2, 3))
    pool = MemoryPool([3, 4], torch.randn(2, 3))
    back = MemoryPool.from_state_dict(pool.state_dict())
    assert back.ids == pool.ids and torch.equal(back.features, pool.features)
    with pytest.raises(ValidationError):
        nc_loss(torch.randn(1, 3), [99], pool, ClassifierHead(3, 2), 0.5)


def test_config_and_rho_default():
    assert DAConfig().rho_for(8) == pytest.approx(math.log(8) / 2)
    assert DAConfig(rho=0.3).rho_for(8) == 0.3
    with pytest.raises(ValidationError):
        DAConfig(tau_nc=0.0)


def test_head_init_from_means():
    head = ClassifierHead(2, 2)
    feats = torch.tensor([[1.0, 0.0], [3.0, 0.0], [0.0, 2.0]])
    head.init_from_means(feats, torch.tensor([0, 0, 1]))
    assert torch.allclose(head.prototypes(), torch.eye(2))


def test_da_gradients_finite_with_underflowing_probabilities():
    pool, head, feats, ids = make(3)
    report = grad_check(lambda x: nc_loss(F.normalize(x, dim=-1), ids, pool, head, 0.5), feats)
    assert report.passed, str(report)
    logits = torch.randn(4, 3, generator=torch.Generator().manual_seed(0)) * 2
    report = grad_check(lambda x: es_loss(x.softmax(-1), 0.55, 0.1), logits)
    assert report.passed, str(report)
    sharp = torch.tensor([[0.0, 1000.0, -1000.0]], requires_grad=True)
    es_loss(sharp.softmax(-1), 0.5, 0.1).backward()
    assert torch.isfinite(sharp.grad).all()


def test_sharpening_towards_strict_argmax():
    pool = MemoryPool([0, 1, 2], torch.tensor([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]))
    head = ClassifierHead(2, 1)
    with torch.no_grad():
        head.weight.copy_(torch.tensor([[0.0, -1.0]]))
    q = torch.tensor([0.0, 1.0])  # closest candidate: row 1
    mass = [float(similarity_distribution(q, 0, pool, head, t)[0]) for t in (0.5, 0.1, 0.02)]
    assert mass[0] < mass[1] < mass[2] and mass[2] > 0.999


def test_hand_three_way_softmax():
    # N=2, C=2: candidates are the other memory row and two prototypes
    pool = MemoryPool([10, 11], torch.tensor([[1.0, 0.0], [0.6, 0.8]]))
    head = ClassifierHead(2, 2)
    with torch.no_grad():
        head.weight.copy_(torch.tensor([[0.0, 1.0], [-1.0, 0.0]]))
    q = torch.tensor([1.0, 0.0])
    p = similarity_distribution(q, 10, pool, head, 1.0)
    e = [math.exp(0.6), math.exp(0.0), math.exp(-1.0)]
    assert p.tolist() == pytest.approx([x / sum(e) for x in e], abs=1e-12)


def test_entropy_separation_hand_values():
    onehot = torch.tensor([[1.0, 0.0, 0.0, 0.0]])
    assert float(es_loss(onehot, 0.5, 0.2)) == pytest.approx(-0.5, abs=1e-12)
    uniform = torch.full((1, 4), 0.25)
    assert float(es_loss(uniform, 0.5, 0.2)) == pytest.approx(-(math.log(4) - 0.5), abs=1e-12)
    assert float(es_loss(uniform, 0.5, 0.2)) == pytest.approx(-0.8863, abs=1e-4)


def test_entropy_separation_flat_inside_band():
    logits = torch.zeros(1, 4, requires_grad=True)
    es_loss(logits.softmax(-1), math.log(4) - 0.05, 0.1).backward()
    assert torch.equal(logits.grad, torch.zeros(1, 4))


def test_update_touches_only_written_rows():
    pool = MemoryPool(list(range(5)), torch.randn(5, 3, generator=torch.Generator().manual_seed(0)))
    before = pool.features.clone()
    update_memory(pool, [3], torch.tensor([[0.0, 3.0, 4.0]]))
    assert torch.equal(pool.features[[0, 1, 2, 4]], before[[0, 1, 2, 4]])
    assert float(pool.features[3].norm()) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 5.0))
def test_similarity_distribution_is_probability(seed, tau):
    pool, head, feats, ids = make(seed)
    p = similarity_distribution(feats[0], ids[0], pool, head, tau)
    assert (p >= 0).all() and abs(float(p.sum()) - 1.0) <= 1e-6
