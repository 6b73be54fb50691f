import json

import numpy as np
import pytest

from conftest import rel_err, with_random_biases
from revprop.engine import (
    backward_efficient,
    backward_naive,
    profile_step,
    training_step,
)
from revprop.loss import rmse_loss
from revprop.network import LayerSpec, NetworkSpec, build, forward
from revprop.ops import ConvKernel
from revprop.revnet import revnet_forward
from revprop.tensor import Tensor, ledger_scope


def _setup(spec, seed=0, identity_init=False):
    params = with_random_biases(build(spec, seed, identity_init=identity_init), seed)
    rng = np.random.default_rng([seed, 99])
    x = Tensor(rng.standard_normal(spec.input_shape()), dtype=spec.dtype)
    t = Tensor(rng.standard_normal(spec.output_shape()), dtype=spec.dtype)
    return params, x, t


def _grads(params, spec, x, t, mode):
    return training_step(params, spec, x, t, mode)


def _assert_close(ga, gb, tol):
    assert ga.paths() == gb.paths()
    for p in ga.paths():
        for a, b in zip(ga.params[p], gb.params[p]):
            assert rel_err(a.numpy(), b.numpy()) <= tol, p
    assert rel_err(ga.input.numpy(), gb.input.numpy()) <= tol


@pytest.mark.parametrize("n", [0, 1, 2])
def test_efficient_matches_naive_64(n):
    spec = NetworkSpec.toy(n_blocks=n)
    params, x, t = _setup(spec, n)
    la, ga = _grads(params, spec, x, t, "naive")
    lb, gb = _grads(params, spec, x, t, "efficient")
    assert la == lb
    _assert_close(gb, ga, 1e-10)


def test_efficient_matches_naive_32():
    spec = NetworkSpec.toy(n_blocks=2, precision=32)
    params, x, t = _setup(spec, 3)
    _, ga = _grads(params, spec, x, t, "naive")
    _, gb = _grads(params, spec, x, t, "efficient")
    _assert_close(gb, ga, 1e-3)


def test_gradient_keys_match_registry():
    spec = NetworkSpec.toy(n_blocks=1)
    params, x, t = _setup(spec)
    _, g = _grads(params, spec, x, t, "efficient")
    assert g.paths() == params.paths()


def test_linear_network_closed_form():
    spec = NetworkSpec(input_channels=1, upsampling_rate=1,
                       espcn_layers=(LayerSpec(1, 1, 0, False),), n_blocks=0,
                       precision=64, input_extent=3)
    rng = np.random.default_rng(0)
    params = build(spec, 0).replace({"layer1": ConvKernel.from_arrays(
        np.full((1, 1, 1, 1, 1), 1.5), [0.25])})
    x = rng.standard_normal((1, 3, 3, 3))
    g = rng.standard_normal((1, 3, 3, 3))
    for mode, backward in (("naive", backward_naive), ("efficient", backward_efficient)):
        _, cache = forward(params, spec, Tensor(x), mode)
        gs = backward(params, spec, cache, Tensor(g))
        gw, gb = gs.params["layer1"]
        assert np.isclose(gw.numpy().item(), np.sum(g * x), rtol=1e-14)
        assert np.isclose(gb.numpy().item(), np.sum(g), rtol=1e-14)
        assert np.allclose(gs.input.numpy(), 1.5 * g, rtol=1e-14, atol=0)


def test_zero_upstream_gradient():
    spec = NetworkSpec.toy(n_blocks=1)
    params, x, _ = _setup(spec)
    for mode, backward in (("naive", backward_naive), ("efficient", backward_efficient)):
        out, cache = forward(params, spec, x, mode)
        gs = backward(params, spec, cache, Tensor.zeros(out.shape))
        assert not np.any(gs.flat())
        assert not np.any(gs.input.numpy())


def test_finite_difference_width4_rn1():
    spec = NetworkSpec(espcn_layers=(LayerSpec(3, 4), LayerSpec(1, 8), LayerSpec(3, 48, 0, False)),
                       n_blocks=1, precision=64, input_extent=7)
    params, x, t = _setup(spec, 4)
    _, g = _grads(params, spec, x, t, "naive")
    rng = np.random.default_rng(5)
    h = 1e-5

    def loss_with(path, which, idx, delta):
        k = params[path]
        w, b = k.weights.numpy().copy(), k.bias.numpy().copy()
        (w if which == 0 else b)[idx] += delta
        p2 = params.replace({path: ConvKernel.from_arrays(w, b, k.padding)})
        return rmse_loss(forward(p2, spec, x)[0], t)[0]

    for path in params.paths():
        for which in (0, 1):
            shape = params[path].weights.shape if which == 0 else params[path].bias.shape
            analytic = g.params[path][which].numpy()
            for _ in range(3):
                idx = tuple(int(rng.integers(s)) for s in shape)
                num = (loss_with(path, which, idx, h) - loss_with(path, which, idx, -h)) / (2 * h)
                scale = max(np.max(np.abs(analytic)), 1e-12)
                assert abs(analytic[idx] - num) / scale < 1e-6, (path, which, idx)


def test_reconstruction_fidelity():
    spec = NetworkSpec.toy(n_blocks=4)
    params, x, t = _setup(spec, 6)
    # forward activations retained here only for comparison
    inputs = {}
    h = x
    for k in range(1, spec.n_sections + 1):
        for b in range(1, spec.n_blocks + 1):
            inputs[(k, b)] = h
            h = revnet_forward(params.block(k, b), h)
        from revprop.network import apply_layer
        from revprop.graph import Eager
        h = apply_layer(Eager(), params, spec, k, h)
    seen = {}
    out, ck = forward(params, spec, x, "efficient")
    _, g = rmse_loss(out, t)
    backward_efficient(params, spec, ck, g,
                       on_reconstruct=lambda k, b, y: seen.__setitem__((k, b), y.numpy().copy()))
    assert set(seen) == set(inputs)
    for key, y in seen.items():
        assert rel_err(y, inputs[key].numpy()) <= 1e-9


def test_checkpoint_misuse_rejected():
    spec = NetworkSpec.toy(n_blocks=1)
    params, x, t = _setup(spec)
    out, ck = forward(params, spec, x, "efficient")
    g = rmse_loss(out, t)[1]
    backward_efficient(params, spec, ck, g)
    with pytest.raises(ValueError, match="consumed"):
        backward_efficient(params, spec, ck, g)
    _, ck2 = forward(params, spec, x, "efficient")
    ck2.activations.pop()
    with pytest.raises(ValueError, match="checkpoints"):
        backward_efficient(params, spec, ck2, g)
    _, cache = forward(params, spec, x, "naive")
    with pytest.raises(ValueError):
        backward_efficient(params, spec, cache, g)
    with pytest.raises(ValueError, match="NaiveCache"):
        backward_naive(params, spec, None, g)


def test_hand_traced_ledger_schedule():
    # One 1^3 layer on 2 channels x 1 voxel.
    # naive:     out(2) + grad(2) + grad_x(2)            -> peak 6
    # efficient: out(2) + grad(2); out freed; replay(2) + grad_x(2) -> peak 6
    spec = NetworkSpec(input_channels=2, upsampling_rate=1,
                       espcn_layers=(LayerSpec(1, 2, 0, False),), n_blocks=0,
                       precision=64, input_extent=1)
    params, x, t = _setup(spec)
    naive = profile_step(params, spec, x, t, "naive")
    eff = profile_step(params, spec, x, t, "efficient")
    assert (naive.peak_elements, naive.fwd_ops, naive.bwd_ops) == (6, 1, 1)
    assert (eff.peak_elements, eff.fwd_ops, eff.bwd_ops) == (6, 2, 1)
    assert naive.parameter_elements == 6


def test_backward_peak_bound():
    # bound = largest stack-boundary activation + largest single-block transient,
    # with the block transient counted by hand as 4*c*V: the split output and
    # gradient halves (2cV), then one local residual graph plus the rebuilt
    # input and its gradient (at most 2cV more).
    for n in (1, 2, 4, 8):
        spec = NetworkSpec.toy(n_blocks=n)
        params, x, t = _setup(spec)
        sizes = [int(np.prod(s)) for s in spec.section_shapes()[:-1]]
        bound = max(sizes) + 4 * max(sizes)
        with ledger_scope() as led:
            out, ck = forward(params, spec, x, "efficient")
            g = rmse_loss(out, t)[1]
            del out
            before = led.snapshot().live_elements
            led.reset_peak()
            backward_efficient(params, spec, ck, g)
            assert led.snapshot().peak_elements - before <= bound


@pytest.mark.parametrize("mode", ["naive", "efficient"])
def test_profile_no_leaks_and_json(mode):
    spec = NetworkSpec.toy(n_blocks=2)
    params, x, t = _setup(spec)
    res = profile_step(params, spec, x, t, mode)
    assert res.live_before == 0 and res.live_after == 0
    d = json.loads(res.to_json())
    assert set(d) == {"mode", "n_blocks", "peak_elements", "fwd_ops", "bwd_ops", "wall_time_ms"}


def test_naive_peak_grows_with_n():
    peaks = []
    for n in (1, 2, 4, 8):
        spec = NetworkSpec.toy(n_blocks=n)
        params, x, t = _setup(spec)
        peaks.append(profile_step(params, spec, x, t, "naive").peak_elements)
    assert all(a < b for a, b in zip(peaks, peaks[1:]))


def test_profile_rejects_bad_target():
    spec = NetworkSpec.toy(n_blocks=0)
    params, x, _ = _setup(spec)
    with pytest.raises(ValueError):
        profile_step(params, spec, x, Tensor.zeros((48, 6, 6, 6)), "naive")
