import math

import numpy as np
import pytest

from splitlora.errors import ConfigError, DataError, ParameterError, ShapeError, StateError, StructureError
from splitlora.lora import AdapterSet, LoraAdapter, count_trainable
from splitlora.model import (LayerSpec, build_model, client_backward, client_forward, compute_loss,
                             init_adapters, model_backward, model_forward, server_backward, server_forward,
                             split, toy_architecture)
from splitlora.numerics import SeededRng, finite_diff_grad

from conftest import TinySplit, rel_err


def small_model(blocks=4, width=32, seq=16, vocab=64, seed=0, block="simplified_transformer_block"):
    return build_model(toy_architecture(vocab, width, 2 * width, blocks, block), vocab, seq, None, SeededRng(seed))


def test_same_seed_same_weights():
    a, b = small_model(seed=3), small_model(seed=3)
    assert a.weights_bytes() == b.weights_bytes()
    assert a.weights_bytes() != small_model(seed=4).weights_bytes()


def test_incompatible_layer_chain():
    arch = toy_architecture(16, 8, 16, 2)
    arch[-1] = LayerSpec("output_head", 9, 16)
    with pytest.raises(ConfigError):
        build_model(arch, 16, 4, None, SeededRng(0))


@pytest.mark.parametrize("blocks, client, server", [(12, 3, 9), (24, 3, 21)])
def test_split_block_counts(blocks, client, server):
    sm = split(small_model(blocks=blocks, width=8, seq=2), 3)
    trunk = lambda part: sum(layer.kind != "embedding" and layer.kind != "output_head" for layer in part)
    assert trunk(sm.client_part) == client and trunk(sm.server_part) == server
    assert len(sm.client_part) + len(sm.server_part) == len(sm.model.layers)


@pytest.mark.parametrize("cut", [0, 4])
def test_split_out_of_range(cut):
    with pytest.raises(ParameterError):
        split(small_model(blocks=4, width=8, seq=2), cut)


def test_client_forward_zero_adapters_equal_base():
    m = small_model()
    sm = split(m, 2)
    ads = init_adapters(m, 4, None, 0.02, SeededRng(1)).subset(sm.client_site_ids)
    x = (SeededRng(2).next_u64(8 * 16) % np.uint64(64)).astype(np.int64).reshape(8, 16)
    s, _ = client_forward(sm, ads, x)
    s0, _ = client_forward(sm, AdapterSet(()), x)
    np.testing.assert_array_equal(s, s0)
    assert s.shape == (8 * 16, 32)


def test_client_forward_deterministic_across_clients():
    m = small_model()
    sm = split(m, 2)
    ads = init_adapters(m, 4, None, 0.02, SeededRng(1)).subset(sm.client_site_ids)
    x = np.arange(32).reshape(2, 16) % 64
    np.testing.assert_array_equal(client_forward(sm, ads, x)[0], client_forward(sm, ads, x)[0])


def test_client_forward_rejects_server_sites():
    m = small_model()
    sm = split(m, 2)
    with pytest.raises(StructureError):
        client_forward(sm, init_adapters(m, 4, None, 0.02, SeededRng(1)), np.zeros((1, 16), int))


def test_server_forward_width_mismatch():
    sm = split(small_model(), 2)
    with pytest.raises(ShapeError):
        server_forward(sm, AdapterSet(()), np.zeros((4, 31)))


def test_server_forward_concatenation():
    sm = split(small_model(), 2)
    S = SeededRng(0).normal(3 * 16 * 32).reshape(48, 32)
    logits, _ = server_forward(sm, AdapterSet(()), S)
    assert logits.shape[0] == 3 * 16
    single, _ = server_forward(sm, AdapterSet(()), S[:16])
    assert single.shape[0] == 16


def test_uniform_logits_loss():
    rep, _ = compute_loss(np.zeros((5, 64)), np.arange(5), [(0, 5)])
    assert abs(rep.mean_ce - math.log(64)) < 1e-12
    assert abs(rep.ppl - 64.0) < 1e-9


def test_peaked_logits_loss():
    logits = np.full((3, 8), -50.0)
    logits[np.arange(3), [1, 2, 3]] = 50.0
    rep, _ = compute_loss(logits, [1, 2, 3], [(0, 3)])
    assert rep.mean_ce < 1e-30 and abs(rep.ppl - 1.0) < 1e-12


def test_loss_label_out_of_range():
    with pytest.raises(DataError):
        compute_loss(np.zeros((2, 4)), [0, 4], [(0, 2)])


def test_loss_gradient_matches_finite_differences():
    rng = SeededRng(5)
    logits = rng.normal(6 * 5).reshape(6, 5)
    labels = np.array([0, 1, 2, 3, 4, 0])
    slices, w = [(0, 2), (2, 6)], [0.3, 0.7]
    _, g = compute_loss(logits, labels, slices, w)
    fd = finite_diff_grad(lambda z: compute_loss(z, labels, slices, w)[0].mean_ce, logits)
    assert rel_err(g, fd) < 1e-7


def test_loss_is_weighted_slice_mean():
    rng = SeededRng(6)
    logits = rng.normal(5 * 4).reshape(5, 4)
    labels = np.array([0, 1, 2, 3, 0])
    rep, _ = compute_loss(logits, labels, [(0, 2), (2, 5)], [0.25, 0.75])
    a, _ = compute_loss(logits[:2], labels[:2], [(0, 2)])
    b, _ = compute_loss(logits[2:], labels[2:], [(0, 3)])
    assert abs(rep.mean_ce - (0.25 * a.mean_ce + 0.75 * b.mean_ce)) < 1e-14


def test_zero_upstream_gives_zero_grads():
    ts = TinySplit(2)
    s, c = client_forward(ts.split, ts.client_ads[0], ts.xs[0])
    logits, sc = server_forward(ts.split, ts.server_ads, s)
    sgrads, dS = server_backward(ts.split, ts.server_ads, sc, np.zeros_like(logits), [s.shape[0]])
    assert all(not g.ga.any() and not g.gb.any() for g in sgrads.values())
    assert not dS[0].any()
    cgrads = client_backward(ts.split, ts.client_ads[0], c, np.zeros_like(s))
    assert all(not g.ga.any() and not g.gb.any() for g in cgrads.values())


def test_stale_cache_rejected():
    ts = TinySplit(2)
    s, c = client_forward(ts.split, ts.client_ads[0], ts.xs[0])
    client_backward(ts.split, ts.client_ads[0], c, np.ones_like(s))
    with pytest.raises(StateError):
        client_backward(ts.split, ts.client_ads[0], c, np.ones_like(s))


def test_client_backward_shape_check():
    ts = TinySplit(2)
    s, c = client_forward(ts.split, ts.client_ads[0], ts.xs[0])
    with pytest.raises(ShapeError):
        client_backward(ts.split, ts.client_ads[0], c, np.ones((s.shape[0], 3)))


def _fd_check(ts: TinySplit) -> float:
    """Worst relative error over every adapter matrix on both sides."""
    _, cgrads, sgrads = ts.loss_and_grads()
    worst = 0.0

    def replace(ads, site, which, value):
        out = []
        for a in ads:
            if a.site_id == site:
                a = LoraAdapter(a.site_id, value if which == "A" else a.A, value if which == "B" else a.B, a.alpha)
            out.append(a)
        return AdapterSet(tuple(out))

    for i, ads in enumerate(ts.client_ads):
        for a in ads:
            for which, got in (("A", cgrads[i][a.site_id].ga), ("B", cgrads[i][a.site_id].gb)):
                def f(v, i=i, site=a.site_id, which=which):
                    cl = list(ts.client_ads)
                    cl[i] = replace(cl[i], site, which, v)
                    return ts.loss_and_grads(client_ads=cl)[0]
                worst = max(worst, rel_err(got, finite_diff_grad(f, getattr(a, which), 1e-5)))
    for a in ts.server_ads:
        for which, got in (("A", sgrads[a.site_id].ga), ("B", sgrads[a.site_id].gb)):
            def f(v, site=a.site_id, which=which):
                return ts.loss_and_grads(server_ads=replace(ts.server_ads, site, which, v))[0]
            worst = max(worst, rel_err(got, finite_diff_grad(f, getattr(a, which), 1e-5)))
    return worst


@pytest.mark.parametrize("cut", [1, 3])
def test_split_pipeline_gradients_match_finite_differences(cut):
    assert _fd_check(TinySplit(cut)) < 1e-6


def test_dense_tanh_stack_gradients():
    assert _fd_check(TinySplit(2, block="dense_tanh")) < 1e-6


def test_monolithic_matches_split_composition():
    ts = TinySplit(2)
    full = ts.client_ads[0].union(ts.server_ads)
    logits, cache = model_forward(ts.model, full, ts.xs[0])
    s, _ = client_forward(ts.split, ts.client_ads[0], ts.xs[0])
    logits2, _ = server_forward(ts.split, ts.server_ads, s)
    np.testing.assert_array_equal(logits, logits2)
    _, g = compute_loss(logits, ts.ys[0].reshape(-1), [(0, logits.shape[0])])
    grads = model_backward(ts.model, full, cache, g)
    assert set(grads) == set(full.site_ids)


@pytest.mark.parametrize("blocks, frac", [(12, 0.25), (24, 0.125)])
def test_client_fraction_of_trainable(blocks, frac):
    m = small_model(blocks=blocks, width=8, seq=2, vocab=16)
    sm = split(m, 3)
    ads = init_adapters(m, 4, None, 0.02, SeededRng(0))
    client = count_trainable(ads.subset(sm.client_site_ids))
    assert client * (1 / frac) == count_trainable(ads)
