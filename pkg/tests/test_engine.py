import numpy as np
import pytest

from driftalign import engine, layers, source
from driftalign import tensor as T
from driftalign.engine import (
    AdaptationState,
    LossReport,
    MethodConfig,
    NumericAbort,
    adapt_step,
    da_loss,
    em_loss,
    init_adaptation,
    select_da_layers,
)
from driftalign.layers import BATCH_STATS, FIXED_STATS, ChannelStatsCapture


def make_batch(seed=0, n=16):
    rng = np.random.default_rng(seed)
    return rng.random((n, 3, 16, 16)).astype(np.float32)


def logits_for_probs(probs):
    # log p is a valid logit vector reproducing p under softmax
    return np.log(np.asarray(probs, np.float64)).astype(np.float32)


def test_method_config_validation():
    MethodConfig().validate()
    for bad in (
        MethodConfig(variant="bn_only"),
        MethodConfig(alpha=1.2),
        MethodConfig(theta=-0.1),
        MethodConfig(lr=0.0),
        MethodConfig(momentum=1.0),
        MethodConfig(da_layer_selection="middle"),
    ):
        with pytest.raises(ValueError):
            bad.validate()


def test_select_da_layers():
    assert select_da_layers(2, "all") == [0, 1]
    assert select_da_layers(2, "low_half") == [0]
    assert select_da_layers(2, "high_half") == [1]
    assert select_da_layers(5, "low_half") == [0, 1]
    assert select_da_layers(5, "high_half") == [3, 4]
    assert select_da_layers(1, "low_half") == [0]
    assert select_da_layers(1, "high_half") == [0]


def test_init_adaptation_blends_and_snapshots(fresh_model):
    graph = fresh_model()
    popu0 = graph.bn_layers()[0].mu_popu.copy()
    state = AdaptationState(graph)
    batch = make_batch(1)
    init_adaptation(state, batch, alpha=0.9, variant="da_em")
    assert state.initialized
    assert state.velocities == {}
    assert [n for n, _ in state.initial_affine_snapshot] == [n for n, _ in graph.affine_params()]
    bn0 = graph.bn_layers()[0]
    assert bn0.mode == FIXED_STATS
    # stats moved off the population values but population itself intact
    assert bn0.mu_norm.tobytes() != bn0.mu_popu.tobytes()
    assert bn0.mu_popu.tobytes() == popu0.tobytes()
    with pytest.raises(RuntimeError, match="already"):
        init_adaptation(state, batch, alpha=0.9, variant="da_em")


def test_init_adaptation_ttbn_and_source(fresh_model):
    graph = fresh_model()
    state = AdaptationState(graph)
    init_adaptation(state, make_batch(1), alpha=0.9, variant="ttbn")
    assert all(bn.mode == BATCH_STATS for bn in graph.bn_layers())
    with pytest.raises(ValueError, match="source"):
        init_adaptation(AdaptationState(fresh_model()), make_batch(1), 0.9, variant="source")
    with pytest.raises(ValueError, match="empty"):
        init_adaptation(AdaptationState(fresh_model()), make_batch(1, n=0), 0.9)


def test_da_loss_zero_on_matching_stats():
    cap = ChannelStatsCapture()
    m = np.array([0.3, -0.4], np.float32)
    d2 = np.array([1.2, 0.8], np.float32)
    cap.add(0, T.Tensor(m), T.Tensor(d2))
    ref = source.SourceStats(m_bar={0: m.copy()}, d2_bar={0: d2.copy()})
    assert da_loss(cap, ref).item() == 0.0


def test_da_loss_hand_computed_two_layers():
    cap = ChannelStatsCapture()
    cap.entries[0] = (T.Tensor(np.array([1.0, 2.0], np.float32)), T.Tensor(np.array([0.5, 0.5], np.float32)))
    cap.entries[1] = (T.Tensor(np.array([0.0], np.float32)), T.Tensor(np.array([2.0], np.float32)))
    ref = source.SourceStats(
        m_bar={0: np.array([0.5, 2.5], np.float32), 1: np.array([1.0], np.float32)},
        d2_bar={0: np.array([0.5, 1.0], np.float32), 1: np.array([1.5], np.float32)},
    )
    # layer 0: (|0.5| + |-0.5| + |0| + |-0.5|) / 2 = 0.75
    # layer 1: (|-1| + |0.5|) / 1 = 1.5; mean = 1.125
    assert da_loss(cap, ref).item() == pytest.approx(1.125, rel=1e-6)


def test_da_loss_validates_layers_and_channels():
    cap = ChannelStatsCapture()
    cap.entries[0] = (T.Tensor(np.zeros(2, np.float32)), T.Tensor(np.zeros(2, np.float32)))
    with pytest.raises(ValueError, match="layers"):
        da_loss(cap, source.SourceStats(m_bar={1: np.zeros(2, np.float32)}, d2_bar={1: np.zeros(2, np.float32)}))
    with pytest.raises(ValueError, match="channel"):
        da_loss(cap, source.SourceStats(m_bar={0: np.zeros(3, np.float32)}, d2_bar={0: np.zeros(3, np.float32)}))


def test_em_loss_strict_threshold_and_sum():
    probs = np.array(
        [
            [0.9, 0.05, 0.05],
            [0.8, 0.1, 0.1],
            [0.5, 0.25, 0.25],
        ]
    )
    logits = T.Tensor(logits_for_probs(probs))
    # theta sits exactly on row 1's max probability as the loss itself
    # computes it, so the strict comparison must exclude that row
    recomputed = np.exp(T.log_softmax(logits).data.astype(np.float64))
    theta = float(recomputed[1].max())
    loss, n_confident = em_loss(logits, theta=theta)
    assert n_confident == 1
    expected = -(probs[0] * np.log(probs[0])).sum()
    assert loss.item() == pytest.approx(expected, rel=1e-5)

    loss_all, n_all = em_loss(logits, theta=0.3)
    entropies = -(probs * np.log(probs)).sum(axis=1)
    assert n_all == 3
    assert loss_all.item() == pytest.approx(entropies.sum(), rel=1e-5)  # sum, not mean


def test_em_loss_none_confident_is_constant_zero():
    probs = np.full((4, 5), 0.2)
    loss, n_confident = em_loss(T.Tensor(logits_for_probs(probs)), theta=0.9)
    assert n_confident == 0
    assert loss.item() == 0.0
    assert not loss.requires_grad


def test_em_loss_excluded_samples_have_zero_gradient():
    probs = np.array([[0.97, 0.02, 0.01], [0.4, 0.3, 0.3]])
    logits = T.Tensor(logits_for_probs(probs), requires_grad=True)
    loss, n_confident = em_loss(logits, theta=0.9)
    assert n_confident == 1
    loss.backward()
    assert np.any(logits.grad[0] != 0)
    assert np.all(logits.grad[1] == 0)


def run_one_step(fresh_model, tiny_stats, variant, theta=0.99):
    graph = fresh_model()
    method = MethodConfig(variant=variant, theta=theta)
    state = AdaptationState(graph)
    batch = make_batch(2)
    if variant != "source":
        init_adaptation(state, batch, method.alpha, variant)
    ref = tiny_stats if variant in engine.DA_VARIANTS else None
    preds, report = adapt_step(state, batch, method, ref)
    return graph, state, preds, report


@pytest.mark.parametrize("variant", ["source", "ttbn"])
def test_frozen_variants_report_nothing_and_touch_nothing(fresh_model, tiny_stats, variant):
    graph, state, preds, report = run_one_step(fresh_model, tiny_stats, variant)
    assert preds.shape == (16,)
    assert report == LossReport()
    reference = fresh_model()
    for (name, a), (_, b) in zip(graph.all_params(), reference.all_params()):
        assert a.data.tobytes() == b.data.tobytes(), name


def test_adaptive_step_updates_affine_only(fresh_model, tiny_stats):
    graph, state, preds, report = run_one_step(fresh_model, tiny_stats, "da_em")
    reference = fresh_model()
    changed = 0
    for (name, a), (_, b) in zip(graph.affine_params(), reference.affine_params()):
        changed += a.data.tobytes() != b.data.tobytes()
    assert changed > 0
    for (name, a), (_, b) in zip(graph.frozen_params(), reference.frozen_params()):
        assert a.data.tobytes() == b.data.tobytes(), name
    assert report.l_da > 0
    assert report.l_final == report.l_da + report.l_em  # exact float identity
    assert state.velocities


def test_predictions_precede_the_update(fresh_model, tiny_stats):
    graph = fresh_model()
    method = MethodConfig(variant="da_only", lr=0.5)  # large step to make drift visible
    state = AdaptationState(graph)
    batch = make_batch(3)
    init_adaptation(state, batch, method.alpha, "da_only")
    with T.no_grad():
        logits_before, _ = graph.forward(batch)
    preds, _ = adapt_step(state, batch, method, tiny_stats)
    assert np.array_equal(preds, np.argmax(logits_before.data, axis=1))
    with T.no_grad():
        logits_after, _ = graph.forward(batch)
    assert logits_after.data.tobytes() != logits_before.data.tobytes()


def test_da_only_ignores_theta_and_em_only_needs_no_ref(fresh_model, tiny_stats):
    _, _, _, report = run_one_step(fresh_model, tiny_stats, "da_only")
    assert report.l_em == 0.0 and report.n_confident == 0
    _, _, _, report = run_one_step(fresh_model, tiny_stats, "em_only", theta=0.05)
    assert report.l_da == 0.0
    assert report.n_confident > 0


def test_adapt_step_requires_init_and_ref(fresh_model, tiny_stats):
    state = AdaptationState(fresh_model())
    with pytest.raises(RuntimeError, match="init_adaptation"):
        adapt_step(state, make_batch(), MethodConfig(variant="da_em"), tiny_stats)
    graph = fresh_model()
    state = AdaptationState(graph)
    init_adaptation(state, make_batch(), 0.9, "da_em")
    with pytest.raises(ValueError, match="reference"):
        adapt_step(state, make_batch(), MethodConfig(variant="da_em"), None)


def test_sgd_velocity_accumulates_like_hand_math(fresh_model, tiny_stats):
    graph = fresh_model()
    method = MethodConfig(variant="da_only", lr=0.1, momentum=0.5)
    state = AdaptationState(graph)
    batch = make_batch(4)
    init_adaptation(state, batch, method.alpha, "da_only")
    p0 = graph.bn_layers()[0].gamma.data.copy()

    def grad_now():
        _, captured = graph.forward(batch, capture=True)
        loss = engine.da_loss(captured, tiny_stats)
        for _, p in graph.affine_params():
            p.grad = None
        loss.backward()
        return graph.bn_layers()[0].gamma.grad.copy()

    g1 = grad_now()
    adapt_step(state, batch, method, tiny_stats)
    p1 = graph.bn_layers()[0].gamma.data.copy()
    assert np.allclose(p1, (p0.astype(np.float64) - 0.1 * g1).astype(np.float32), atol=0)

    g2 = grad_now()
    adapt_step(state, batch, method, tiny_stats)
    p2 = graph.bn_layers()[0].gamma.data.copy()
    v2 = 0.5 * g1 + g2
    assert np.allclose(p2, (p1.astype(np.float64) - 0.1 * v2).astype(np.float32), atol=1e-7)


def test_numeric_abort_leaves_parameters_untouched(fresh_model, tiny_stats, monkeypatch):
    graph = fresh_model()
    method = MethodConfig(variant="da_em")
    state = AdaptationState(graph)
    batch = make_batch(5)
    init_adaptation(state, batch, method.alpha, "da_em")
    before = [(n, p.data.copy()) for n, p in graph.affine_params()]

    real_forward = layers.forward
    calls = {"n": 0}

    def poisoned(graph_, batch_, capture=False):
        calls["n"] += 1
        raise T.NonFiniteError("injected overflow")

    monkeypatch.setattr(layers, "forward", poisoned)
    with pytest.raises(NumericAbort, match="overflow"):
        adapt_step(state, batch, method, tiny_stats)
    monkeypatch.setattr(layers, "forward", real_forward)
    assert calls["n"] == 1
    for (name, saved), (_, p) in zip(before, graph.affine_params()):
        assert p.data.tobytes() == saved.tobytes(), name
