import math

import numpy as np
import pytest

import scalar_oracles as ref
from proxyreplay import losses as L
from proxyreplay.datastream import LabeledSample
from proxyreplay.errors import ConfigError, DomainError
from proxyreplay.memory import BufferEntry
from proxyreplay.model import BatchForward, forward_batch, init_params


def fake_fwd(O, Z=None, tau=1.0):
    O = np.asarray(O, dtype=float)
    n = O.shape[0]
    Z = np.zeros((n, 2)) if Z is None else np.asarray(Z, dtype=float)
    return BatchForward(np.zeros((n, 1)), Z, O, [], [], np.ones((n, 1)),
                        np.zeros((O.shape[1], Z.shape[1])), np.ones((O.shape[1], 1)), tau)


def instance(rng, n_cur=4, n_rep=4, n_classes=3, dim=4, tau=0.5):
    labels = rng.integers(0, n_classes, size=n_cur + n_rep)
    x = rng.standard_normal((n_cur + n_rep, dim))
    params = init_params(dim, (6,), 5, tau=tau, rng=rng)
    params.register(range(n_classes), rng)
    params.proxies = rng.standard_normal(params.proxies.shape)
    cur = [LabeledSample(x[i], int(labels[i])) for i in range(n_cur)]
    rep = []
    for i in range(n_cur, n_cur + n_rep):
        z = rng.standard_normal(5)
        rep.append(BufferEntry(LabeledSample(x[i], int(labels[i])),
                               rng.uniform(-2, 2, size=int(rng.integers(1, n_classes + 1))), z / np.linalg.norm(z)))
    return params, L.JointBatch.build(cur, rep)


def lists(fwd):
    return fwd.logits.tolist(), fwd.emb.tolist()


def test_class_counts():
    k = L.class_counts([0, 0, 1])
    assert (k.k, k.n) == ({0: 2, 1: 1}, 3)
    k = L.class_counts([4] * 5)
    assert (k.k, k.n) == ({4: 5}, 5)
    assert k.get(9) == 0


def test_cross_entropy_examples():
    assert L.cross_entropy_head(fake_fwd([[0.3, 0.3]]), np.array([0])).value == pytest.approx(math.log(2), abs=1e-15)
    assert L.cross_entropy_head(fake_fwd([[1000.0, 0.0]]), np.array([0])).value == 0.0


def test_finetune_uses_only_current_rows():
    params, batch = instance(np.random.default_rng(0))
    fwd = forward_batch(params, batch.x[: batch.n_current])
    O, _ = lists(fwd)
    ft, _ = L.loss_finetune(batch, params)
    assert ft == pytest.approx(ref.ce(O, batch.labels[: batch.n_current].tolist()), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_random_losses_match_scalar_oracles(seed):
    rng = np.random.default_rng(seed)
    params, batch = instance(rng)
    y = batch.labels.tolist()
    O, Z = lists(forward_batch(params, batch.x))
    tau = params.tau
    assert L.loss_er(batch, params)[0] == pytest.approx(ref.ce(O, y), abs=1e-12)
    assert L.loss_pcr(batch, params)[0] == pytest.approx(ref.pcr(O, y), abs=1e-12)
    assert L.loss_scr(batch, params)[0] == pytest.approx(ref.scr(Z, y, tau), abs=1e-12)
    assert L.loss_couple_mixed(batch, params)[0] == pytest.approx(ref.couple_mixed(O, Z, y, tau), abs=1e-12)
    stored = [s.tolist() for s in batch.stored_logits]
    assert L.loss_pcd(batch, params)[0] == pytest.approx(ref.pcd(O, y, batch.n_current, stored), abs=1e-12)
    er, scr = L.loss_er(batch, params)[0], L.loss_scr(batch, params)[0]
    assert L.loss_couple_sum(batch, params)[0] == pytest.approx(er + scr, abs=1e-12)


def test_scd_six_entry_batch():
    rng = np.random.default_rng(21)
    params, batch = instance(rng, n_cur=2, n_rep=6)
    _, Z = lists(forward_batch(params, batch.x))
    got = L.loss_scd(batch, params)[0]
    assert got == pytest.approx(ref.scd(Z[2:], batch.stored_emb.tolist(), params.tau), abs=1e-12)


def test_pcr_c_64_sample_batch_gate_open():
    rng = np.random.default_rng(5)
    params, batch = instance(rng, n_cur=32, n_rep=32, n_classes=4)
    y = batch.labels.tolist()
    O, Z = lists(forward_batch(params, batch.x))
    got = L.loss_pcr_c(batch, params, n_min=60)[0]
    assert got == pytest.approx(ref.pcr_c(O, Z, y, params.tau, 60), abs=1e-12)
    assert got != pytest.approx(L.loss_pcr(batch, params)[0], abs=1e-6)


def test_scr_examples():
    Z = np.tile([[1.0, 0.0]], (3, 1))
    lv = L.scr_head(fake_fwd(np.zeros((3, 1)), Z, tau=0.5), np.array([0, 0, 1]))
    # two anchors with one positive each at ln 2, third anchor has no positive
    assert lv.value == pytest.approx(2 * math.log(2) / 3, abs=1e-15)
    with pytest.raises(DomainError):
        L.scr_head(fake_fwd(np.zeros((1, 1))), np.array([0]))


def test_couple_mixed_single_sample_equals_er():
    fwd = fake_fwd([[0.4, -1.2, 2.0]])
    cols = np.array([1])
    assert L.couple_mixed_head(fwd, cols).value == pytest.approx(L.cross_entropy_head(fwd, cols).value, abs=1e-15)


def test_pcr_prob_examples():
    assert L.pcr_prob([0.7], L.class_counts([0]), 0) == 1.0
    assert L.pcr_prob([0.0, 0.0], L.class_counts([0, 0, 1]), 0) == pytest.approx(1 / 3, abs=1e-15)
    rng = np.random.default_rng(0)
    for _ in range(20):
        o = rng.uniform(-5, 5, 6)
        k = L.class_counts(rng.integers(0, 6, size=9))
        total = sum(k.get(c) * L.pcr_prob(o, k, c) for c in k.k)
        assert total == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(DomainError):
        L.pcr_prob([0.0, 0.0], L.class_counts([0]), 1)


def test_pcr_examples():
    assert L.pcr_head(fake_fwd([[0.5, 3.0]] * 4), np.array([0] * 4)).value == pytest.approx(math.log(4), abs=1e-15)
    assert L.pcr_head(fake_fwd([[0.5, 3.0]]), np.array([0])).value == 0.0
    lv = L.pcr_head(fake_fwd(np.zeros((3, 2))), np.array([0, 0, 1]))
    # every anchor sees denominator 2e^0 + 1e^0, numerator e^0
    assert lv.value == pytest.approx(math.log(3), abs=1e-15)


def test_unregistered_label_is_domain_error():
    params, batch = instance(np.random.default_rng(1))
    batch.labels[0] = 99
    with pytest.raises(DomainError):
        L.loss_pcr(batch, params)


def test_step_gate():
    assert L.step_gate(1, 60) == 0
    assert L.step_gate(59, 60) == 0
    assert L.step_gate(60, 60) == 1


def test_pcr_c_identical_single_class():
    # 4 identical samples, one class, tau=1: o_y = 0.3, every similarity = 1
    Z = np.tile([[0.6, 0.8]], (4, 1))
    O = np.full((4, 1), 0.3)
    lv = L.pcr_c_head(fake_fwd(O, Z), np.zeros(4, dtype=int), n_min=2)
    expected = math.log(4 * math.exp(0.3) + 3 * math.e) - math.log(math.exp(0.3) + math.e)
    assert lv.value == pytest.approx(expected, abs=1e-14)


def test_temperature_examples():
    s = L.TemperatureSchedule()
    assert L.temperature(s, 0) == 0.16
    assert L.temperature(s, 250) == pytest.approx(0.05, abs=1e-17)
    assert L.temperature(s, 125) == pytest.approx(0.105, abs=1e-15)
    with pytest.raises(ConfigError):
        L.temperature(L.TemperatureSchedule(cycle=0), 3)
    with pytest.raises(DomainError):
        L.temperature(s, -1)


def test_pcr_ct_scaling():
    rng = np.random.default_rng(3)
    params, batch = instance(rng)
    fwd = forward_batch(params, batch.x)
    cols = params.columns(batch.labels)
    base = L.pcr_c_head(fwd, cols, 60)
    same = L.pcr_ct_head(fwd, cols, params.tau, 60)
    assert same.value == base.value
    assert np.array_equal(same.d_logits, base.d_logits)
    half = L.pcr_ct_head(fwd, cols, params.tau / 2, 60)
    assert np.array_equal(half.d_logits, 2 * same.d_logits)
    with pytest.raises(DomainError):
        L.pcr_ct_head(fwd, cols, 0.0, 60)


def test_pcd_examples():
    params = init_params(2, (3,), 2, tau=1.0, rng=np.random.default_rng(0))
    params.register([0, 1], np.random.default_rng(0))
    x = np.array([[1.0, 0.5]])
    o = forward_batch(params, x).logits[0]
    cur = [LabeledSample(x[0], 0)]
    same = L.JointBatch.build(cur, [BufferEntry(LabeledSample(x[0], 0), o.copy(), np.array([1.0, 0.0]))])
    assert L.loss_pcd(same, params)[0] == 0.0
    # one shared class (stored logits cover class 0 only), k_0 = 2, offset 0.5
    shifted = L.JointBatch.build(cur, [BufferEntry(LabeledSample(x[0], 0), o[:1] - 0.5, np.array([1.0, 0.0]))])
    assert L.loss_pcd(shifted, params)[0] == pytest.approx(0.5, abs=1e-15)
    missing = L.JointBatch(x, np.array([0]), 0, [None], None)
    with pytest.raises(DomainError):
        L.loss_pcd(missing, params)


def test_scd_uniform_stored_similarities():
    rng = np.random.default_rng(8)
    params, batch = instance(rng, n_cur=1, n_rep=5)
    batch.stored_emb = np.tile([[1.0, 0, 0, 0, 0]], (5, 1))
    assert L.loss_scd(batch, params)[0] == pytest.approx(math.log(4), abs=1e-12)
    one = L.JointBatch.build([LabeledSample(batch.x[0], 0)], [])
    assert L.loss_scd(one, params)[0] == 0.0


def test_hpcr_composition():
    rng = np.random.default_rng(4)
    params, batch = instance(rng)
    sch = L.TemperatureSchedule(tau=params.tau)
    zero = L.HyperParams(alpha=0.0, beta=0.0)
    assert L.loss_hpcr(batch, params, sch, 37, zero)[0] == L.loss_pcr_ct(batch, params, sch, 37)[0]
    a1 = L.loss_hpcr(batch, params, sch, 37, L.HyperParams(alpha=0.7, beta=0.2))[0]
    a2 = L.loss_hpcr(batch, params, sch, 37, L.HyperParams(alpha=1.2, beta=0.2))[0]
    assert a2 - a1 == pytest.approx(0.5 * L.loss_pcd(batch, params)[0], abs=1e-12)


def test_losses_finite_and_nonnegative():
    rng = np.random.default_rng(12)
    sch = L.TemperatureSchedule(tau=0.5)
    for _ in range(30):
        params, batch = instance(rng)
        vals = [
            L.loss_er(batch, params)[0], L.loss_scr(batch, params)[0], L.loss_pcr(batch, params)[0],
            L.loss_couple_mixed(batch, params)[0], L.loss_pcr_c(batch, params, 4)[0],
            L.loss_pcd(batch, params)[0], L.loss_scd(batch, params)[0],
            L.loss_hpcr(batch, params, sch, 3, L.HyperParams())[0],
        ]
        assert all(np.isfinite(v) and v >= 0 for v in vals)


def test_hyperparams_validation():
    with pytest.raises(ConfigError):
        L.HyperParams(alpha=-1).validate()
    with pytest.raises(ConfigError):
        L.HyperParams(n_min=0).validate()
