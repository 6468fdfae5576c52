from dataclasses import replace

import numpy as np
import pytest

from ctlmtnet import ops
from ctlmtnet.caam import (
    CaamConfig, DomainBatch, caam_forward, caam_train_step, init_caam_params, source_only_baseline, train_caam,
)
from ctlmtnet.data import SynthSpec, synth_corpus
from ctlmtnet.losses import MddHyper
from ctlmtnet.model import ConfigurationError, CpacConfig
from ctlmtnet.optim import AdamState
from ctlmtnet.tensor import ContractError, Tensor, backward
from ctlmtnet.train import TrainingError

TINY = CpacConfig(num_classes=3, input_frames=8, conv_filters=4, num_primary_caps=2, primary_dim=4, digit_dim=4)


def corpora(per_class=8, seed=0):
    spec = SynthSpec(num_classes=3, per_class=per_class, frames=8, seed=seed, task_seed=seed)
    return synth_corpus(spec), synth_corpus(spec.target(seed=seed + 100))


def frozen_pair(seed=0):
    src, tgt = corpora(6, seed)
    return DomainBatch(src.matrix(8), "source", src.labels), DomainBatch(tgt.matrix(8), "target")


class TestGrl:
    def test_forward_is_bit_exact_identity(self):
        x = np.random.default_rng(0).standard_normal((4, 5))
        np.testing.assert_array_equal(ops.grl(x, 0.3).data, x)

    @pytest.mark.parametrize("lam", [1.0, 0.25, 0.0])
    def test_backward_negates(self, lam):
        x = Tensor(np.random.default_rng(1).standard_normal(6), requires_grad=True)
        g = np.random.default_rng(2).standard_normal(6)
        backward((ops.grl(x, lam) * g).sum())
        np.testing.assert_array_equal(x.grad, -lam * g)


class TestBatches:
    def test_contracts(self):
        with pytest.raises(ContractError):
            DomainBatch(np.zeros((1, 8, 39)), "source")
        with pytest.raises(ContractError):
            DomainBatch(np.zeros((1, 8, 39)), "target", np.zeros(1))
        with pytest.raises(ContractError):
            DomainBatch(np.zeros((1, 8, 39)), "other")

    def test_identical_batches_give_identical_main_probs(self):
        s, _ = frozen_pair()
        t = DomainBatch(s.features, "target")
        out = caam_forward(s, t, init_caam_params(TINY))
        np.testing.assert_array_equal(out.probs_f_s.data, out.probs_f_t.data)


def test_eta_zero_matches_source_only_bit_exact():
    src, tgt = corpora(per_class=20)
    cfg = CaamConfig(model=TINY, mdd=MddHyper(eta=0.0), epochs=1, batch_size=6, seed=3)  # 60 / 6 = 10 steps
    adapted, _ = train_caam(src, tgt, cfg)
    baseline, _ = source_only_baseline(src, tgt, replace(cfg, mdd=MddHyper()))
    for name in adapted.group("psi") + adapted.group("f"):
        np.testing.assert_array_equal(adapted[name].data, baseline[name].data, err_msg=name)


def test_eta_zero_adversary_gets_no_gradient():
    s, t = frozen_pair()
    params = init_caam_params(TINY)
    caam_train_step(s, t, params, AdamState(), MddHyper(eta=0.0), mode="eval")
    for name in params.group("adv"):
        assert not params[name].grad.any()


def _pretrained(seed=0):
    src, tgt = corpora(6, seed)
    params, _ = source_only_baseline(src, tgt, CaamConfig(model=TINY, epochs=30, batch_size=6, seed=seed, lr=3e-3))
    return params


def test_adversary_ascends_discrepancy():
    s, t = frozen_pair()
    params = _pretrained()
    state = AdamState()
    d = [caam_train_step(s, t, params, state, lr=1e-4, update=("adv",), mode="eval").mdd for _ in range(100)]
    assert np.all(np.diff(d) >= 0), np.diff(d).min()
    assert d[-1] > d[0]


@pytest.mark.parametrize("seed", range(4))
def test_extractor_descends_discrepancy(seed):
    s, t = frozen_pair(seed)
    params = _pretrained(seed)
    state = AdamState()
    reps = [caam_train_step(s, t, params, state, lr=1e-5, update=("psi",), mode="eval") for _ in range(100)]
    d, ce = np.array([r.mdd for r in reps]), np.array([r.ce for r in reps])
    assert np.all(np.diff(d) <= 0), np.diff(d).max()
    # psi descends ce plus the weighted discrepancy, so ce alone may wobble but must not drift up
    assert ce[-1] <= ce[0] + 1e-4


def test_extractor_and_head_descend_between_label_flips():
    # D depends on f's argmax, so it may jump when a pseudo-label flips; between flips it must not rise
    s, t = frozen_pair(0)
    params = _pretrained(0)
    state = AdamState()
    d, ce, labels = [], [], []
    for _ in range(100):
        out = caam_forward(s, t, params)
        labels.append(np.concatenate([out.probs_f_s.data.argmax(1), out.probs_f_t.data.argmax(1)]))
        r = caam_train_step(s, t, params, state, lr=1e-5, update=("psi", "f"), mode="eval")
        d.append(r.mdd)
        ce.append(r.ce)
    steady = [i for i in range(99) if np.array_equal(labels[i], labels[i + 1])]
    assert len(steady) > 90
    assert all(d[i + 1] <= d[i] for i in steady)
    assert np.all(np.diff(ce) <= 0)


def test_history_and_schedules():
    src, tgt = corpora()
    cfg = CaamConfig(model=TINY, epochs=2, batch_size=8, grl_lambda=0.1, grl_schedule="ramp", lr_schedule="anneal")
    params, history = train_caam(src, tgt, cfg)
    assert [h["epoch"] for h in history] == [0, 1]
    assert set(history[0]) == {"epoch", "ce", "mdd", "target_war", "target_uar"}
    assert 0 < params.grl_lambda < 0.1
    assert cfg.lambda_at(0.0) == 0.0 and cfg.lr_at(0.0) == cfg.lr
    assert cfg.lr_at(1.0) == pytest.approx(cfg.lr * 11 ** -0.75)


def test_zero_epochs_returns_init():
    src, tgt = corpora()
    params, history = train_caam(src, tgt, CaamConfig(model=TINY, epochs=0))
    assert history == []
    np.testing.assert_array_equal(params["head_f.weight"].data, init_caam_params(TINY)["head_f.weight"].data)


def test_label_space_mismatch():
    src, _ = corpora()
    other = synth_corpus(SynthSpec(num_classes=3, per_class=2, frames=8, emotions=("x", "y", "z")))
    with pytest.raises(ConfigurationError):
        train_caam(src, other, CaamConfig(model=TINY, epochs=1))


def test_bad_schedule():
    with pytest.raises(ConfigurationError):
        CaamConfig(grl_schedule="cosine").lambda_at(0.5)


def test_nan_loss_reports_step():
    s, t = frozen_pair()
    params = init_caam_params(TINY)
    params["head_f.bias"].data[:] = np.nan
    with pytest.raises(TrainingError, match="step 7"):
        caam_train_step(s, t, params, AdamState(), step_index=7, mode="eval")


def test_forward_rows_and_embedding_isolation():
    from ctlmtnet.model import cpac_forward

    s, t = frozen_pair()
    params = init_caam_params(TINY, seed=2)
    out = caam_forward(s, t, params)
    for probs in (out.probs_f_s, out.probs_f_t, out.probs_adv_s, out.probs_adv_t):
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-9)
    alone = cpac_forward(np.concatenate([s.features, t.features]), params.psi, TINY).embedding.data
    np.testing.assert_array_equal(np.concatenate([out.emb_s.data, out.emb_t.data]), alone)


def test_source_only_leaves_adversary_at_init_and_fits_source():
    src, tgt = corpora(per_class=20)
    cfg = CaamConfig(model=TINY, epochs=4, batch_size=8, lr=3e-3)
    params, history = source_only_baseline(src, tgt, cfg)
    init = init_caam_params(TINY)
    for name in params.group("adv"):
        np.testing.assert_array_equal(params[name].data, init[name].data)
    assert history[-1]["ce"] < history[0]["ce"]


def test_sum_reduction_scales_discrepancy():
    s, t = frozen_pair()
    params = init_caam_params(TINY)
    mean = caam_train_step(s, t, params.copy(), AdamState(), MddHyper(), mode="eval").mdd
    total = caam_train_step(s, t, params.copy(), AdamState(), MddHyper(reduction="sum"), mode="eval").mdd
    assert total == pytest.approx(mean * len(s.features), rel=1e-12)
