import json
from dataclasses import replace

import numpy as np
import pytest
from conftest import params64, toy_store
from oracles import central_difference, l1_residual, naive_score

from nscaching.params import init_params, is_translational, load_checkpoint, save_checkpoint
from nscaching.diagnostics import changed_elements
from nscaching.sampling import NegCache, SamplerConfig
from nscaching.training import (Adam, EpochReport, TrainConfig, TrainingError, _batch_step, logistic_loss_and_grad,
                                margin_loss_and_grad, pretrain_then_continue, softplus, train,
                                train_to_directory)


def _config(**kw):
    base = dict(model="TransE", dim=8, lr=0.01, batch_size=5, epochs=3, eval_every=1, seed=0,
                sampler=SamplerConfig(strategy="nscaching", n1=3, n2=2))
    return TrainConfig(**{**base, **kw})


class TestLosses:
    def test_margin(self):
        loss, gp, gn = margin_loss_and_grad(np.array([-1.0, -5.0, 0.0]), np.array([-2.0, -1.0, -3.0]), 2.0)
        np.testing.assert_array_equal(loss, [1.0, 6.0, 0.0])
        np.testing.assert_array_equal(gp, [-1.0, -1.0, 0.0])
        np.testing.assert_array_equal(gn, [1.0, 1.0, 0.0])

    def test_margin_hand_value(self):
        assert margin_loss_and_grad(0.5, 1.0, 2.0)[0] == 2.5

    def test_logistic_hand_value(self):
        loss = logistic_loss_and_grad(np.array(1.0), np.array(-1.0))[0]
        assert loss == pytest.approx(2 * np.log1p(np.exp(-1.0)))
        assert loss == pytest.approx(0.6265, abs=1e-4)

    def test_logistic_values(self):
        pos, neg = np.array([0.3, -2.0]), np.array([1.5, -0.4])
        loss, gp, gn = logistic_loss_and_grad(pos, neg)
        np.testing.assert_allclose(loss, np.log1p(np.exp(-pos)) + np.log1p(np.exp(neg)))
        np.testing.assert_allclose(gp, -1 / (1 + np.exp(pos)))
        np.testing.assert_allclose(gn, 1 / (1 + np.exp(-neg)))

    def test_softplus_stable(self):
        assert softplus(1000.0) == 1000.0
        assert softplus(-1000.0) == 0.0
        loss, gp, gn = logistic_loss_and_grad(np.array([-800.0]), np.array([800.0]))
        assert np.isfinite(loss).all() and gp[0] == -1.0 and gn[0] == 1.0


class TestAdam:
    def test_single_scalar_step(self):
        p = init_params("TransE", 1, 1, 1, dtype=np.float64)
        w0 = p["entity"][0, 0]
        Adam(p).step(p, {"entity": (np.array([0]), np.array([[1.0]]))}, 0.1)
        assert p["entity"][0, 0] - w0 == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)
        assert p["entity"][0, 0] - w0 == pytest.approx(-0.09999999, abs=1e-8)

    def test_two_steps_by_hand(self):
        p = init_params("TransE", 3, 1, 2, dtype=np.float64)
        w0 = p["entity"].copy()
        adam = Adam(p)
        g1 = np.array([[0.5, -2.0]])
        adam.step(p, {"entity": (np.array([1]), g1)}, 0.1)
        # first step moves each coordinate by about lr * sign(g)
        np.testing.assert_allclose(p["entity"][1], w0[1] - 0.1 * np.sign(g1[0]), atol=1e-6)
        g2 = np.array([[1.0, 1.0]])
        adam.step(p, {"entity": (np.array([1]), g2)}, 0.1)
        m = 0.9 * 0.1 * g1 + 0.1 * g2
        v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
        mhat, vhat = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
        first = w0[1] - 0.1 * (0.1 * g1[0] / 0.1) / (np.sqrt(0.001 * g1[0] ** 2 / 0.001) + 1e-8)
        np.testing.assert_allclose(p["entity"][1], first - 0.1 * mhat[0] / (np.sqrt(vhat[0]) + 1e-8), rtol=1e-12)

    def test_lazy_rows(self):
        p = init_params("TransE", 3, 1, 2, dtype=np.float64)
        w0 = p["entity"].copy()
        adam = Adam(p)
        adam.step(p, {"entity": (np.array([0]), np.ones((1, 2)))}, 0.1)
        adam.step(p, {"entity": (np.array([2]), np.ones((1, 2)))}, 0.1)
        np.testing.assert_array_equal(p["entity"][1], w0[1])
        assert adam.m["entity"][1].tolist() == [0.0, 0.0]
        # row 2 first seen at global step 2: mhat = 0.1 / (1 - 0.81), vhat = 0.001 / (1 - 0.999^2)
        step = 0.1 * (0.1 / 0.19) / (np.sqrt(0.001 / (1 - 0.999 ** 2)) + 1e-8)
        np.testing.assert_allclose(p["entity"][2], w0[2] - step)
        np.testing.assert_allclose(adam.m["entity"][0], 0.1)


def _naive_total(params, config, batch, neg):
    """Batch objective from the oracle scores."""
    total = 0.0
    for pos, ng in zip(batch, neg):
        sp, sn = naive_score(params, *pos), naive_score(params, *ng)
        if is_translational(params.kind):
            total += max(0.0, config.gamma - sp + sn)
        else:
            total += np.logaddexp(0, -sp) + np.logaddexp(0, sn)
    if not is_translational(params.kind):
        rows = {"entity": set(batch[:, [0, 2]].ravel()) | set(neg[:, [0, 2]].ravel()),
                "relation": set(batch[:, 1])}
        for table in params.table_names():
            for row in rows["entity" if table.startswith("entity") else "relation"]:
                total += config.lam * float(np.sum(params[table][row] ** 2))
    return total


class TestBatchGradient:
    def test_matches_finite_differences(self, kind):
        rng = np.random.default_rng(21)
        config = _config(model=kind, gamma=1.0, lam=0.05)
        checked = 0
        for seed in range(10):
            p = params64(kind, seed=seed)
            batch = np.column_stack([rng.integers(5, size=4), rng.integers(2, size=4), rng.integers(5, size=4)])
            neg = batch.copy()
            neg[:, 2] = rng.integers(5, size=4)
            if is_translational(kind):
                res = [l1_residual(p, *x) for x in np.vstack([batch, neg])]
                margins = [config.gamma - naive_score(p, *a) + naive_score(p, *b) for a, b in zip(batch, neg)]
                if min(np.abs(r).min() for r in res) < 1e-4 or min(abs(m) for m in margins) < 1e-4:
                    continue
            _, total, _, grads = _batch_step(p, config, batch, neg)
            assert total == pytest.approx(_naive_total(p, config, batch, neg), rel=1e-10)
            for table, (rows, vecs) in grads.items():
                for i in range(len(rows)):
                    col = int(rng.integers(p.dim))
                    fd = central_difference(lambda: _naive_total(p, config, batch, neg), p, table, rows[i], col)
                    assert vecs[i, col] == pytest.approx(fd, rel=1e-5, abs=1e-7)
                    checked += 1
        assert checked > 20


class TestTrain:
    def test_reports_and_best(self):
        store = toy_store(num_entities=8, n_train=20)
        seen = []
        res = train(store, _config(epochs=4), observer=lambda *a: seen.append(a))
        assert [r.epoch for r in res.reports] == [1, 2, 3, 4]
        assert len(seen) == 4 * 4  # 20 triples, batch 5
        assert all(len(a[1]) == len(a[2]) == len(a[3]) for a in seen)
        assert all(r.valid_mrr is not None for r in res.reports)
        assert res.best_valid_mrr == max(r.valid_mrr for r in res.reports)
        assert res.cache is not None

    def test_tiny_transe_200_epochs(self):
        store = toy_store(num_entities=8, num_relations=2, n_train=20, seed=6)
        reps = train(store, _config(epochs=200, eval_every=0)).reports
        assert reps[-1].mean_loss < reps[0].mean_loss

    def test_loss_decreases(self, kind):
        store = toy_store(num_entities=10, num_relations=2, n_train=30, seed=3)
        cfg = _config(model=kind, epochs=60, eval_every=0, lr=0.02,
                      sampler=SamplerConfig(strategy="bernoulli"))
        reps = train(store, cfg).reports
        assert np.mean([r.mean_loss for r in reps[-5:]]) < np.mean([r.mean_loss for r in reps[:5]])

    def test_deterministic(self):
        store = toy_store(num_entities=8, n_train=20)
        a, b = train(store, _config()), train(store, _config())
        assert a.reports == b.reports
        assert a.params.equals(b.params) and a.cache.equals(b.cache)
        c = train(store, _config(seed=1))
        assert not c.params.equals(a.params)

    def test_changed_elements_match_snapshots(self):
        store = toy_store(num_entities=12, n_train=30, seed=5)
        cache = NegCache(3, 12)
        ends = {}
        res = train(store, _config(epochs=6, eval_every=0), cache=cache,
                    observer=lambda epoch, *a: ends.__setitem__(epoch, cache.snapshot()))
        # every key exists after epoch 1, so later epochs compare matching snapshots
        for e in range(2, 7):
            assert res.reports[e - 1].changed_elements == changed_elements(ends[e - 1], ends[e])

    def test_wall_time_not_compared(self):
        assert EpochReport(1, 0.5, 1.0, 2.0, wall_time=1.0) == EpochReport(1, 0.5, 1.0, 2.0, wall_time=9.0)

    def test_valid_cap(self):
        store = toy_store(num_entities=8, n_train=20)
        assert train(store, _config(valid_cap=1, epochs=1)).reports[0].valid_mrr is not None

    def test_nonfinite_detected(self, tmp_path):
        store = toy_store(num_entities=8, n_train=20)
        p = init_params("TransE", 8, 2, 8)
        p["entity"][:] = np.nan
        save_checkpoint(p, {}, tmp_path / "nan.ckpt")
        with pytest.raises(TrainingError, match="non-finite"):
            train(store, _config(pretrain_checkpoint=str(tmp_path / "nan.ckpt")))

    def test_pretrain_shape_mismatch(self, tmp_path):
        store = toy_store(num_entities=8, n_train=20)
        save_checkpoint(init_params("TransE", 9, 2, 8), {}, tmp_path / "m.ckpt")
        with pytest.raises(TrainingError, match="different"):
            train(store, _config(pretrain_checkpoint=str(tmp_path / "m.ckpt")))


class TestPretrain:
    def test_warm_start(self, tmp_path):
        store = toy_store(num_entities=8, n_train=20)
        base_cfg = _config(sampler=SamplerConfig(strategy="bernoulli"))
        base, cont = pretrain_then_continue(store, base_cfg, _config(epochs=0), tmp_path)
        assert cont.params.equals(base.params)
        base, cont = pretrain_then_continue(store, base_cfg, _config(epochs=2), tmp_path)
        assert not cont.params.equals(base.params)

    def test_guards(self, tmp_path):
        store = toy_store(num_entities=8, n_train=20)
        with pytest.raises(ValueError):
            pretrain_then_continue(store, _config(), _config(), tmp_path)
        with pytest.raises(TrainingError):
            pretrain_then_continue(store, _config(sampler=SamplerConfig()), _config(dim=4), tmp_path)


def test_train_to_directory(tmp_path):
    store = toy_store(num_entities=8, n_train=20)
    cfg = _config()
    res = train_to_directory(store, cfg, tmp_path)
    lines = (tmp_path / "epochs.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2, 3]
    assert set(json.loads(lines[0])) == set(EpochReport.FIELDS)
    final, meta = load_checkpoint(tmp_path / "final.ckpt", expect_kind="TransE", expect_dim=8)
    assert final.equals(res.params) and meta["config_hash"] == cfg.config_hash()
    assert load_checkpoint(tmp_path / "best.ckpt")[0].equals(res.best_params)
    assert (tmp_path / "cache.bin").exists()
    assert replace(cfg, seed=9).config_hash() != cfg.config_hash()
