import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from moc.agent import (
    CurriculumFeatures,
    PolicyNet,
    PPOConfig,
    QNet,
    RolloutBatch,
    RunningMeanStd,
    TensorBatch,
    ValueNet,
    bellman_loss,
    clip_advantage,
    compute_gae,
    curriculum_losses,
    lookahead_target,
    policy_sampler,
    polyak_update,
    ppo_clip_objective,
    ppo_update,
    shaped_lookahead_target,
)

D = torch.float64


def feats(n, goal=2, init=4, abs_=3, fill=0.0):
    return CurriculumFeatures(torch.full((n, goal), fill, dtype=D), torch.full((n, 1), fill, dtype=D),
                              torch.full((n, init), fill, dtype=D), torch.full((n, abs_), fill, dtype=D))


def const_q(q0):
    return lambda s, a, f: torch.full(s.shape[:-1], q0, dtype=D)


def const_sampler(logp):
    def sample(s, f, n, generator):
        return torch.zeros(n, *s.shape[:-1], 2, dtype=D), torch.full((n, *s.shape[:-1]), logp, dtype=D)
    return sample


def batch(n, r=0.5, done=False):
    return TensorBatch(torch.zeros(n, 8, dtype=D), torch.zeros(n, 2, dtype=D), torch.full((n,), r, dtype=D),
                       torch.zeros(n, 8, dtype=D), torch.full((n,), float(done), dtype=D))


class TestLookahead:
    def test_terminal_returns_reward(self):
        y = lookahead_target(torch.tensor([1.0], dtype=D), torch.zeros(1, 8, dtype=D), torch.tensor([1.0]), feats(1),
                             const_q(50.0), const_sampler(-3.0), 0.9995)
        assert y.item() == 1.0

    def test_constant_critic_arithmetic(self):
        y = lookahead_target(torch.tensor([0.5], dtype=D), torch.zeros(1, 8, dtype=D), torch.tensor([0.0]), feats(1),
                             const_q(2.0), const_sampler(-1.0), 0.9995)
        assert y.item() == pytest.approx(3.4985, abs=1e-12)

    def test_degenerate_policy(self):
        y = lookahead_target(torch.tensor([0.25], dtype=D), torch.zeros(1, 8, dtype=D), torch.tensor([0.0]), feats(1),
                             const_q(4.0), const_sampler(0.0), 0.5)
        assert y.item() == 0.25 + 0.5 * 4.0

    def test_monte_carlo_matches_entropy(self):
        """With Q = q0 the estimator targets r + lam (q0 + H(pi)); check within its standard error."""
        torch.manual_seed(0)
        pol = PolicyNet(8, 2, 3, 2, hidden=(8,), log_std_init=-0.3).double()
        s = torch.randn(1, 8, dtype=D)
        f = feats(1)
        gen = torch.Generator().manual_seed(1)
        n = 20_000
        y = lookahead_target(torch.tensor([0.1], dtype=D), s, torch.tensor([0.0]), f, const_q(1.0), policy_sampler(pol),
                             0.99, n_samples=n, generator=gen)
        entropy = pol(s, f.goal, f.abstract).entropy().sum().item()
        expect = 0.1 + 0.99 * (1.0 + entropy)
        se = 0.99 * math.sqrt(2 * 0.5 / n)  # -log pi of a 2-d Gaussian has variance d/2
        assert abs(y.item() - expect) < 4 * se

    def test_shaped_reductions(self):
        args = (torch.zeros(1, 8, dtype=D), torch.tensor([0.0]), feats(1), const_q(2.0), const_sampler(-1.0), 0.9)
        r = torch.tensor([0.3], dtype=D)
        assert shaped_lookahead_target(r, torch.zeros(1, dtype=D), *args).item() == lookahead_target(r, *args).item()
        term = shaped_lookahead_target(torch.tensor([1.0], dtype=D), torch.tensor([0.2], dtype=D), torch.zeros(1, 8, dtype=D),
                                       torch.tensor([1.0]), feats(1), const_q(2.0), const_sampler(-1.0), 0.9)
        assert term.item() == pytest.approx(1.2)

    def test_shaped_equals_reward_plus_shaping(self):
        torch.manual_seed(0)
        pol = PolicyNet(8, 2, 3, 2, hidden=(8,)).double()
        q = QNet(8, 2, 2, 4, 3, hidden=(8,)).double()
        r, sh = torch.randn(100, dtype=D), torch.randn(100, dtype=D)
        s2 = torch.randn(100, 8, dtype=D)
        done = (torch.rand(100) < 0.3).double()
        f = feats(100, fill=0.2)
        a = shaped_lookahead_target(r, sh, s2, done, f, q, policy_sampler(pol), 0.9, 4, torch.Generator().manual_seed(3))
        b = lookahead_target(r + sh, s2, done, f, q, policy_sampler(pol), 0.9, 4, torch.Generator().manual_seed(3))
        assert torch.equal(a, b)


class TestCurriculumLosses:
    def test_reference_values(self):
        # Q = 1 against target 3 on one transition
        loss = bellman_loss(const_q(1.0), const_q(0.0), const_sampler(0.0), batch(1, r=3.0, done=True), feats(1), feats(1), ["goal"], 0.9)
        assert loss.item() == 4.0
        # residuals 1 and 3
        b = TensorBatch(torch.zeros(2, 8, dtype=D), torch.zeros(2, 2, dtype=D), torch.tensor([1.0, 3.0], dtype=D),
                        torch.zeros(2, 8, dtype=D), torch.ones(2, dtype=D))
        assert bellman_loss(const_q(0.0), const_q(0.0), const_sampler(0.0), b, feats(2), feats(2), ["init"], 0.9).item() == 5.0

    def test_zero_when_critic_matches_target(self):
        losses = curriculum_losses(const_q(0.5), const_q(9.0), const_sampler(0.0), batch(4, r=0.5, done=True), feats(4), feats(4), 0.9)
        assert all(v.item() == 0.0 for v in losses.values())

    def test_only_reward_loss_sees_shaping(self):
        losses = curriculum_losses(const_q(0.5), const_q(0.0), const_sampler(0.0), batch(3, r=0.5, done=True), feats(3), feats(3), 0.9,
                                   shaping=torch.full((3,), 1.0, dtype=D))
        assert losses["J_reward"].item() == 1.0
        assert losses["J_goal"].item() == losses["J_init"].item() == losses["J_abstract"].item() == 0.0

    def test_slot_masking(self):
        seen = []

        def q(s, a, f):
            seen.append(f)
            return torch.zeros(s.shape[:-1], dtype=D)

        bellman_loss(q, const_q(0.0), const_sampler(0.0), batch(2, done=True), feats(2, fill=1.0), feats(2, fill=1.0), ["init"], 0.9)
        f = seen[0]
        assert torch.all(f.init == 1.0) and torch.all(f.goal == 0) and torch.all(f.reward == 0) and torch.all(f.abstract == 0)
        with pytest.raises(ValueError):
            feats(1).masked(["velocity"])

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            bellman_loss(const_q(0.0), const_q(0.0), const_sampler(0.0), batch(0), feats(0), feats(0), ["goal"], 0.9)

    @given(st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_non_negative(self, seed):
        torch.manual_seed(seed)
        q = QNet(8, 2, 2, 4, 3, hidden=(4,)).double()
        b = TensorBatch(torch.randn(5, 8, dtype=D), torch.randn(5, 2, dtype=D), torch.randn(5, dtype=D), torch.randn(5, 8, dtype=D),
                        torch.zeros(5, dtype=D))
        losses = curriculum_losses(q, q, const_sampler(-0.5), b, feats(5, fill=0.3), feats(5, fill=0.3), 0.9)
        assert all(v.item() >= 0 for v in losses.values())


class TestClip:
    def test_reference_values(self):
        assert clip_advantage(0.3, 2.0) == pytest.approx(2.6)
        assert clip_advantage(0.3, -1.0) == pytest.approx(-0.7)
        assert ppo_clip_objective(torch.ones(1), torch.tensor([2.0]), 0.3).item() == 2.0

    def test_clipped_below_unclipped(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(1000):
            n = int(torch.randint(1, 64, (1,), generator=g))
            ratio = torch.exp(torch.randn(n, generator=g))
            adv = torch.randn(n, generator=g) * 3
            assert ppo_clip_objective(ratio, adv, 0.3) <= (ratio * adv).mean() + 1e-6

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        pol = PolicyNet(2, 0, 0, 1, hidden=(4,)).double()  # 18 parameters
        obs = torch.randn(2, 2, dtype=D)
        empty = torch.zeros(2, 0, dtype=D)
        with torch.no_grad():
            actions = pol(obs, empty, empty).sample()
            old = pol(obs, empty, empty).log_prob(actions).sum(-1) + torch.tensor([0.05, -0.1], dtype=D)
        adv = torch.tensor([1.0, -0.5], dtype=D)

        def objective():
            ratio = torch.exp(pol(obs, empty, empty).log_prob(actions).sum(-1) - old)
            return ppo_clip_objective(ratio, adv, 0.3)

        params = list(pol.parameters())
        grads = torch.autograd.grad(objective(), params)
        h = 1e-6
        for p, g in zip(params, grads):
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = objective().item()
                flat[i] = orig - h
                down = objective().item()
                flat[i] = orig
                fd = (up - down) / (2 * h)
                an = g.view(-1)[i].item()
                if abs(an) > 1e-8:
                    assert abs(fd - an) / abs(an) < 1e-4


def test_log_prob_mass_on_grid():
    pol = PolicyNet(2, 0, 0, 1, hidden=(4,), log_std_init=-1.0).double()
    dist = pol(torch.zeros(1, 2, dtype=D), torch.zeros(1, 0, dtype=D), torch.zeros(1, 0, dtype=D))
    grid = torch.linspace(-6, 6, 4001, dtype=D)
    mass = torch.trapezoid(dist.log_prob(grid[:, None, None]).exp().squeeze(), grid)
    assert mass.item() <= 1.0 + 1e-9


def test_log_std_clamped():
    pol = PolicyNet(2, 0, 0, 1, hidden=(4,), log_std_init=10.0)
    assert pol(torch.zeros(1, 2), torch.zeros(1, 0), torch.zeros(1, 0)).scale.item() == pytest.approx(math.exp(2.0))


class TestGAE:
    @given(st.integers(0, 10_000), st.floats(0.0, 1.0), st.floats(0.5, 1.0))
    @settings(max_examples=50, deadline=None)
    def test_matches_brute_force(self, seed, lam, gamma):
        rng = np.random.default_rng(seed)
        T, N = 7, 3
        r, v, last = rng.normal(size=(T, N)), rng.normal(size=(T, N)), rng.normal(size=N)
        dones = (rng.random((T, N)) < 0.25).astype(float)
        adv, ret = compute_gae(r, v, dones, last, gamma, lam)
        for i in range(N):
            for t in range(T):
                total, coef = 0.0, 1.0
                for k in range(t, T):
                    nv = last[i] if k == T - 1 else v[k + 1, i]
                    delta = r[k, i] + gamma * nv * (1 - dones[k, i]) - v[k, i]
                    total += coef * delta
                    if dones[k, i]:
                        break
                    coef *= gamma * lam
                assert adv[t, i] == pytest.approx(total, abs=1e-9)
        np.testing.assert_allclose(ret, adv + v)


def make_rollout(n=64, adv=None, seed=0):
    g = torch.Generator().manual_seed(seed)
    obs = torch.randn(n, 4, generator=g)
    return RolloutBatch(obs, torch.zeros(n, 2), torch.zeros(n, 3), torch.randn(n, 2, generator=g), torch.full((n,), -2.0),
                        torch.randn(n, generator=g) if adv is None else adv, torch.randn(n, generator=g))


class TestPPOUpdate:
    def nets(self):
        torch.manual_seed(0)
        return PolicyNet(4, 2, 3, 2, hidden=(8,)), ValueNet(4, 2, 3, hidden=(8,))

    def test_zero_lr_is_bit_identical(self):
        pol, val = self.nets()
        before = [p.clone() for p in list(pol.parameters()) + list(val.parameters())]
        opt = torch.optim.Adam(list(pol.parameters()) + list(val.parameters()), lr=0.0)
        ppo_update(pol, val, opt, make_rollout(), PPOConfig(lr=0.0, n_epochs=2, minibatch=16), np.random.default_rng(0))
        assert all(torch.equal(a, b) for a, b in zip(before, list(pol.parameters()) + list(val.parameters())))

    def test_zero_advantage_leaves_policy(self):
        pol, val = self.nets()
        before = [p.clone() for p in pol.parameters()]
        opt = torch.optim.Adam(list(pol.parameters()) + list(val.parameters()), lr=1e-2)
        ppo_update(pol, val, opt, make_rollout(adv=torch.zeros(64)), PPOConfig(n_epochs=2, minibatch=16), np.random.default_rng(0))
        assert all(torch.equal(a, b) for a, b in zip(before, pol.parameters()))
        assert not all(torch.equal(a, b) for a, b in zip(self.nets()[1].parameters(), val.parameters()))

    def test_non_finite_gradient_is_skipped(self):
        pol, val = self.nets()
        before = [p.clone() for p in list(pol.parameters()) + list(val.parameters())]
        opt = torch.optim.Adam(list(pol.parameters()) + list(val.parameters()), lr=1e-2)
        roll = make_rollout(adv=torch.full((64,), float("nan")))
        stats = ppo_update(pol, val, opt, roll, PPOConfig(n_epochs=1, minibatch=16), np.random.default_rng(0))
        assert stats["skipped"] == 4
        assert all(torch.equal(a, b) for a, b in zip(before, list(pol.parameters()) + list(val.parameters())))


def test_polyak():
    a, b = torch.nn.Linear(2, 2), torch.nn.Linear(2, 2)
    expect = [0.9 * pa.detach() + 0.1 * pb.detach() for pa, pb in zip(a.parameters(), b.parameters())]
    polyak_update(a, b, 0.1)
    for p, e in zip(a.parameters(), expect):
        torch.testing.assert_close(p.detach(), e)


def test_running_mean_std_matches_numpy():
    rng = np.random.default_rng(0)
    chunks = [rng.normal(3.0, 2.0, size=n) for n in (5, 17, 40)]
    rms = RunningMeanStd()
    for c in chunks:
        rms.update(c)
    allv = np.concatenate(chunks)
    assert rms.mean == pytest.approx(allv.mean(), rel=1e-4)
    assert rms.var == pytest.approx(allv.var(), rel=1e-3)
