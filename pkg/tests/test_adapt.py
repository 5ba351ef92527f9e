import math
from dataclasses import replace

import numpy as np
import pytest

from regiontta.adapt import (
    AdaptConfig,
    AdaptState,
    OptimizerState,
    SourceConfig,
    adapt_offline,
    adapt_online,
    adapt_step,
    batches,
    sgd_step,
    stream,
    train_source,
)
from regiontta.data import LabeledSet, ShiftSpec, generate_shift
from regiontta.model import ModelConfig, ModelParams, predict_proba

MCFG = ModelConfig()
SPEC = ShiftSpec(per_class=30, seed=1)


@pytest.fixture(scope="module")
def setup():
    src, tgt = generate_shift(SPEC)
    params, _ = train_source(src, MCFG, SourceConfig(epochs=10), seed=1)
    return params, tgt


def scalar_params(v):
    z = np.zeros((1, 1))
    return ModelParams(W1=np.array([[v]]), b1=np.zeros(1), W2=z.copy(), b2=np.zeros(1), V=np.ones((1, 1)))


class TestSGD:
    def test_vanilla_step(self):
        p = scalar_params(5.0)
        g = {"W1": np.array([[2.0]])}
        out, _, applied = sgd_step(p, g, OptimizerState.zeros_like(p), lr=1.0, momentum=0.0)
        assert applied and out.W1[0, 0] == 3.0

    def test_momentum_recurrence(self):
        p = scalar_params(0.0)
        state = OptimizerState.zeros_like(p)
        g = {"W1": np.array([[1.0]])}
        p1, state, _ = sgd_step(p, g, state, 1.0, 0.9)
        p2, state, _ = sgd_step(p1, g, state, 1.0, 0.9)
        assert p1.W1[0, 0] == -1.0
        assert p2.W1[0, 0] - p1.W1[0, 0] == pytest.approx(-1.9, abs=1e-15)

    def test_zero_gradient_is_identity(self):
        p = scalar_params(4.0)
        out, _, _ = sgd_step(p, {"W1": np.zeros((1, 1))}, OptimizerState.zeros_like(p), 0.1, 0.9)
        assert out.W1.tobytes() == p.W1.tobytes()

    def test_non_finite_gradient_skips(self):
        p = scalar_params(4.0)
        out, _, applied = sgd_step(p, {"W1": np.array([[np.nan]])}, OptimizerState.zeros_like(p), 0.1, 0.9)
        assert not applied and out is p

    def test_batches_merge_trailing_singleton(self):
        chunks = batches(17, 8)
        assert [len(b) for b in chunks] == [8, 9]
        np.testing.assert_array_equal(np.concatenate(chunks), np.arange(17))
        assert sum(len(b) for b in batches(24, 8)) == 24


class TestSourceTraining:
    def test_separable_blobs(self):
        rng = np.random.default_rng(0)
        x = np.vstack([rng.normal(-2, 0.5, (200, 4)), rng.normal(2, 0.5, (200, 4))])
        y = np.repeat([0, 1], 200)
        perm = rng.permutation(400)
        data = LabeledSet(x[perm], y[perm])
        cfg = ModelConfig(d_in=4, n_classes=2)
        params, _ = train_source(data.subset(np.arange(200)), cfg, SourceConfig(epochs=10), seed=0)
        held = data.subset(np.arange(200, 400))
        acc = (predict_proba(params, held.inputs, cfg.tau_cls).argmax(1) == held.labels).mean()
        assert acc >= 0.98

    def test_zero_epochs_returns_init(self):
        src, _ = generate_shift(SPEC)
        params, log = train_source(src, MCFG, SourceConfig(epochs=0), seed=3)
        init = ModelParams.init(MCFG, stream(3, 0))
        assert log == [] and params.flat().tobytes() == init.flat().tobytes()

    def test_deterministic(self):
        src, _ = generate_shift(SPEC)
        a, _ = train_source(src, MCFG, SourceConfig(epochs=2), seed=5)
        b, _ = train_source(src, MCFG, SourceConfig(epochs=2), seed=5)
        assert a.flat().tobytes() == b.flat().tobytes()

    def test_label_range_checked(self):
        with pytest.raises(ValueError):
            train_source(LabeledSet(np.zeros((2, 16)), [0, 7]), MCFG)


class TestAdaptStep:
    def test_gate_never_opens_when_threshold_exceeds_data(self, setup):
        params, tgt = setup
        cfg = AdaptConfig(epochs=2, warm_threshold=1024, seed=1)
        res = adapt_offline(params, tgt, cfg, MCFG)
        assert res.voting_since is None
        assert all(r["voting"] == 0 for r in res.regions)

    def test_zero_weights_leave_params_unchanged(self, setup):
        params, tgt = setup
        cfg = AdaptConfig(gammas=(0.0, 0.0, 0.0, 0.0))
        state = AdaptState.start(params, MCFG, cfg)
        step = adapt_step(state, tgt.inputs[:8], cfg, MCFG, stream(0, 2))
        assert state.params.flat().tobytes() == params.flat().tobytes()
        row = step.report.row()
        assert all(row[k] == 0.0 for k in ("l_cr", "l_ccp", "l_div", "l_prt", "l_inst", "l_ctr", "total"))

    def test_deterministic_reports(self, setup):
        params, tgt = setup
        cfg = AdaptConfig(epochs=1, seed=4)
        a = adapt_offline(params, tgt, cfg, MCFG)
        b = adapt_offline(params, tgt, cfg, MCFG)
        assert a.losses == b.losses

    def test_alpha_above_one_masks_clean_loss(self, setup):
        params, tgt = setup
        res = adapt_offline(params, tgt, AdaptConfig(epochs=1, alpha=1.0 + 1e-9), MCFG)
        assert all(r["l_cr"] == 0.0 and r["n_clean"] == 0 for r in res.losses)

    def test_queues_fill_and_stats_exist(self, setup):
        params, tgt = setup
        cfg = AdaptConfig(memory_capacity=20, warm_threshold=16, k_vote=3)
        state = AdaptState.start(params, MCFG, cfg)
        rng = stream(0, 2)
        voted = []
        for idx in batches(len(tgt), 8)[:5]:
            voted.append(adapt_step(state, tgt.inputs[idx], cfg, MCFG, rng).voted)
        assert len(state.features) == len(state.keys) == 20
        assert state.stats is not None and state.stats.mu.shape == (MCFG.n_classes, MCFG.d_feat)
        # the gate opens at the third step (16 stored entries) and stays open
        assert voted == [False, False, True, True, True] and state.voting_since == 2


class TestLoops:
    def test_zero_epochs_equals_source(self, setup):
        params, tgt = setup
        res = adapt_offline(params, tgt, AdaptConfig(epochs=0), MCFG)
        assert res.metrics == [] and res.params.flat().tobytes() == params.flat().tobytes()
        assert res.final_metrics == res.source_metrics

    def test_no_shuffle_reproducible(self, setup):
        params, tgt = setup
        cfg = AdaptConfig(epochs=2, shuffle=False, seed=9)
        assert adapt_offline(params, tgt, cfg, MCFG).metrics == adapt_offline(params, tgt, cfg, MCFG).metrics

    def test_offline_one_epoch_matches_online_trajectory(self, setup):
        params, tgt = setup
        cfg = AdaptConfig(epochs=1, shuffle=False, seed=2, warm_threshold=64)
        off = adapt_offline(params, tgt, cfg, MCFG, keep_trajectory=True)
        on = adapt_online(params, tgt, replace(cfg, mode="online"), MCFG, keep_trajectory=True)
        assert len(off.trajectory) == len(on.trajectory)
        for a, b in zip(off.trajectory, on.trajectory):
            assert a.tobytes() == b.tobytes()

    def test_online_short_stream_never_votes(self, setup):
        params, tgt = setup
        res = adapt_online(params, tgt, AdaptConfig(mode="online"), MCFG)
        assert res.voting_since is None and len(res.metrics) == len(batches(len(tgt), 8))

    def test_pre_update_scoring_differs_from_post(self, setup):
        params, tgt = setup
        cfg = AdaptConfig(mode="online", learning_rate=0.01, warm_threshold=64)
        res = adapt_online(params, tgt, cfg, MCFG, post_update=True)
        assert res.final_metrics["post_update_acc"] != res.final_metrics["overall_acc"]

    def test_online_gate_iteration(self, setup):
        params, tgt = setup
        cfg = AdaptConfig(mode="online", warm_threshold=40, batch_size=8)
        res = adapt_online(params, tgt, cfg, MCFG)
        assert res.voting_since == math.ceil(40 / 8)
        flags = [r["voting"] for r in res.metrics]
        assert flags == sorted(flags)

    def test_momentum_stays_in_live_envelope(self, setup):
        params, tgt = setup
        res = adapt_offline(params, tgt, AdaptConfig(epochs=1, ema_momentum=0.9,
                                                     learning_rate=0.01), MCFG,
                            keep_trajectory=True)
        hist = np.stack(res.trajectory)
        m = res.momentum.flat()
        assert np.all(m >= hist.min(axis=0) - 1e-12) and np.all(m <= hist.max(axis=0) + 1e-12)

    def test_labels_never_reach_the_step(self, setup, monkeypatch):
        params, tgt = setup
        import regiontta.adapt as ad
        seen = []
        real = ad.adapt_step

        def spy(state, x, *a, **k):
            seen.append(x)
            return real(state, x, *a, **k)

        monkeypatch.setattr(ad, "adapt_step", spy)
        adapt_offline(params, tgt, AdaptConfig(epochs=1), MCFG)
        assert all(x.shape[1] == tgt.dim for x in seen)

    def test_invalid_config(self, setup):
        params, tgt = setup
        with pytest.raises(ValueError):
            adapt_offline(params, tgt, AdaptConfig(warm_threshold=0), MCFG)
