import inspect
import math

import numpy as np
import pytest
import torch

import moc.memory as memlib
from moc.trainer import (
    METRIC_COLUMNS,
    VARIANTS,
    AdamState,
    Trainer,
    adam_step,
    hypergradient_step,
    pretrain,
)
from conftest import tiny_config


def run_records(cfg, seed=0, episodes=None):
    return [r.record for r in Trainer(cfg, seed).run(episodes)]


def fd_config():
    """Float64 instance with a generator small enough for per-coordinate finite differences."""
    return tiny_config(
        dtype="float64", hyper_cell="tanh", hyper_hidden=2, hyper_z=1, base_hidden=2, mem_rows=2, mem_cols=2,
        inner_optimizer="sgd", shaping_mode="invariant", critic_updates=1, unroll_K=1, T_inner=32, outer_batch=8,
        policy_hidden=(8,), q_hidden=(8,), n_target=2,
    )


class TestDifferentiableAdam:
    def test_matches_torch_adam(self):
        torch.manual_seed(0)
        p = torch.randn(5, dtype=torch.float64)
        ref = p.clone().requires_grad_(True)
        opt = torch.optim.Adam([ref], lr=1e-2, eps=1e-8)
        params, state = {"w": p.clone()}, AdamState()
        for k in range(5):
            g = torch.randn(5, dtype=torch.float64, generator=torch.Generator().manual_seed(k))
            ref.grad = g.clone()
            opt.step()
            params, state = adam_step(params, {"w": g}, state, 1e-2)
        torch.testing.assert_close(params["w"], ref.detach(), atol=1e-10, rtol=1e-8)


class TestHypergradient:
    def test_matches_finite_differences(self):
        """Autodiff through one unrolled critic update agrees with central differences."""
        trainer = Trainer(fd_config(), 0)
        trainer.outer_episode()
        problem = trainer.last_problem
        theta = trainer.theta
        assert sum(p.numel() for p in theta) <= 200
        j = problem.loss()[0].select(problem.form())
        grads = torch.autograd.grad(j, theta)
        h, checked = 1e-4, 0
        for p, g in zip(theta, grads):
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                an = g.view(-1)[i].item()
                if abs(an) < 1e-8:
                    continue
                orig = flat[i].item()
                flat[i] = orig + h
                up = problem.loss()[0].select(problem.form()).item()
                flat[i] = orig - h
                down = problem.loss()[0].select(problem.form()).item()
                flat[i] = orig
                fd = (up - down) / (2 * h)
                assert abs(fd - an) / abs(an) < 1e-3, (i, fd, an)
                checked += 1
        assert checked > 0

    def test_step_leaves_grad_unset(self):
        w = torch.ones(3, requires_grad=True)
        norm, applied = hypergradient_step([w], (w ** 2).sum(), 0.1)
        assert applied and norm == pytest.approx(math.sqrt(12))
        assert w.grad is None
        torch.testing.assert_close(w.detach(), torch.full((3,), 0.8))

    def test_non_finite_gradient_skipped(self):
        w = torch.ones(2, requires_grad=True)
        _, applied = hypergradient_step([w], (w * float("nan")).sum(), 0.1)
        assert not applied and torch.equal(w.detach(), torch.ones(2))

    def test_zero_outer_lr_keeps_theta(self):
        trainer = Trainer(tiny_config(outer_lr=0.0), 0)
        before = [p.clone() for p in trainer.theta]
        list(trainer.run())
        assert all(torch.equal(a, b) for a, b in zip(before, trainer.theta))

    def test_theta_moves_by_default(self):
        trainer = Trainer(tiny_config(), 0)
        before = [p.clone() for p in trainer.theta]
        list(trainer.run())
        assert any(not torch.equal(a, b) for a, b in zip(before, trainer.theta))


class TestRuns:
    def test_determinism(self):
        assert run_records(tiny_config(), 3) == run_records(tiny_config(), 3)

    def test_seeds_differ(self):
        assert run_records(tiny_config(), 0) != run_records(tiny_config(), 1)

    def test_empty_inner_loop(self):
        """No environment steps means no outer update and NaN losses."""
        trainer = Trainer(tiny_config(T_outer=1, T_inner=0), 0)
        before = [p.clone() for p in trainer.theta]
        (result,) = list(trainer.run())
        assert all(torch.equal(a, b) for a, b in zip(before, trainer.theta))
        assert math.isnan(result.record["J_outer"]) and result.record["env_steps"] == 0

    @pytest.mark.parametrize("variant", sorted(VARIANTS))
    def test_every_variant_shares_the_schema(self, variant):
        records = run_records(tiny_config(variant=variant, T_outer=1))
        assert tuple(records[0]) == METRIC_COLUMNS
        assert records[0]["env_steps"] == 64
        if VARIANTS[variant].outer:
            assert math.isfinite(records[0]["J_outer"])
        else:
            assert math.isnan(records[0]["J_outer"])

    def test_sum_form_reference(self, monkeypatch):
        import moc.trainer as tr

        per_slot = {"goal": 1.0, "init": 2.0, "reward": 3.0, "abstract": 4.0}
        monkeypatch.setattr(tr, "bellman_loss", lambda *a: torch.tensor(sum(per_slot[s] for s in a[6])))
        out = tr.outer_loss(None, None, None, [0], None, None, 0.9, None, 1, 0)
        assert out.sum.item() == 10.0


class TestAccessDiscipline:
    def test_single_trainer_write_per_episode(self, monkeypatch):
        calls = []
        real = memlib.mem_write

        def spy(*args, **kwargs):
            calls.append([f.function for f in inspect.stack()[1:]])
            return real(*args, **kwargs)

        monkeypatch.setattr(memlib, "mem_write", spy)
        trainer = Trainer(tiny_config(T_outer=3), 0)
        counts = []
        for _ in trainer.run():
            counts.append(len(calls))
        assert all(c[:3] == ["hyper_write", "generate_curricula", "generate"] for c in calls)
        assert np.diff([0] + counts).tolist() == [1, 1, 1]
        assert not any(fn in ("collect", "_ppo", "ppo_update", "_critic_step") for c in calls for fn in c)


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        cfg = tiny_config(T_outer=3)
        a = Trainer(cfg, 0)
        a.outer_episode()
        a.save_checkpoint(tmp_path / "ck")
        b = Trainer(cfg, 0)
        b.load_checkpoint(tmp_path / "ck")
        for x, y in zip(a.theta, b.theta):
            assert torch.equal(x, y)
        assert torch.equal(a.memory.matrix, b.memory.matrix)
        assert (a.episode, a.env_steps) == (b.episode, b.env_steps)

    def test_manifest_mismatch(self, tmp_path):
        Trainer(tiny_config(), 0).save_checkpoint(tmp_path / "ck")
        with pytest.raises(ValueError, match="mem"):
            Trainer(tiny_config(mem_rows=5), 0).load_checkpoint(tmp_path / "ck")

    def test_pretrain_zero_episodes_is_identity(self, tmp_path):
        cfg = tiny_config(pretrain_episodes=0)
        pretrain(cfg, 0, tmp_path / "pre")
        fresh, warm = Trainer(cfg, 0), Trainer(cfg, 0)
        warm.load_pretrained(tmp_path / "pre")
        assert all(torch.equal(x, y) for x, y in zip(fresh.theta, warm.theta))

    def test_warm_start_loads_other_task(self, tmp_path):
        cfg = tiny_config(task="push", pretrain_episodes=2)
        src = pretrain(cfg, 0, tmp_path / "pre")
        warm = Trainer(cfg, 0)
        warm.load_pretrained(src)
        pre = torch.load(src / "state.pt", weights_only=False)
        for name, p in warm.generator.state_dict().items():
            assert torch.equal(p, pre["generator"][name])
        assert torch.equal(warm.memory.matrix, pre["memory"]["matrix"])
