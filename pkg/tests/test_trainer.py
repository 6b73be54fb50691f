import math

import numpy as np
import pytest

from conftest import central_diff, rel_err
from revprop import trainer as trainer_mod
from revprop.engine import GradientSet, training_step
from revprop.loss import rmse_loss, rmse_loss_batch
from revprop.network import NetworkSpec, build
from revprop.tensor import Tensor
from revprop.trainer import (
    OptimizerState,
    PatchSet,
    TrainingDiverged,
    TrainProtocol,
    adam_step,
    read_model,
    train,
    train_multi_seed,
    validation_rmse,
    write_model,
)


def _patches(spec, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, *spec.input_shape()))
    t = rng.standard_normal((n, *spec.output_shape())) * 0.5
    return PatchSet(x, t)


def test_rmse_examples():
    loss, g = rmse_loss(Tensor([1.0, 2.0]), Tensor([1.0, 2.0]))
    assert loss == 0 and not g.numpy().any()
    loss, g = rmse_loss(Tensor([3.0]), Tensor([0.0]))
    assert loss == 3 and g.numpy().tolist() == [1.0]


def test_rmse_finite_difference(rng):
    p = rng.standard_normal((3, 4))
    t = rng.standard_normal((3, 4))
    _, g = rmse_loss(Tensor(p), Tensor(t))
    num = central_diff(lambda a: np.sqrt(np.mean((a - t) ** 2)), p)
    assert rel_err(g.numpy(), num) <= 1e-7


def test_rmse_batch_matches_concatenated(rng):
    ps = [rng.standard_normal((2, 3)) for _ in range(3)]
    ts = [rng.standard_normal((2, 3)) for _ in range(3)]
    loss, gs = rmse_loss_batch([Tensor(p) for p in ps], [Tensor(t) for t in ts])
    ref, gref = rmse_loss(Tensor(np.stack(ps)), Tensor(np.stack(ts)))
    assert abs(loss - ref) < 1e-15
    assert rel_err(np.stack([g.numpy() for g in gs]), gref.numpy()) < 1e-14


def test_adam_matches_reference_formula():
    spec = NetworkSpec.toy(n_blocks=0)
    params = build(spec, 0)
    rng = np.random.default_rng(0)
    state = OptimizerState.init(params, lr=1e-2)
    m = {p: np.zeros(params[p].weights.shape) for p in params}
    v = {p: np.zeros(params[p].weights.shape) for p in params}
    w = {p: params[p].weights.numpy().copy() for p in params}
    for step in range(1, 4):
        gr = {p: rng.standard_normal(params[p].weights.shape) for p in params}
        gs = GradientSet({p: (Tensor(gr[p]), Tensor(np.zeros(params[p].bias.shape))) for p in params}, None)
        params, state = adam_step(state, params, gs)
        for p in w:
            m[p] = 0.9 * m[p] + 0.1 * gr[p]
            v[p] = 0.999 * v[p] + 0.001 * gr[p] ** 2
            mh = m[p] / (1 - 0.9**step)
            vh = v[p] / (1 - 0.999**step)
            w[p] = w[p] - 1e-2 * mh / (np.sqrt(vh) + 1e-8)
            assert rel_err(params[p].weights.numpy(), w[p]) < 1e-13
    assert state.step == 3


def test_adam_first_step_moves_by_lr():
    spec = NetworkSpec.toy(n_blocks=0)
    params = build(spec, 0)
    state = OptimizerState.init(params, lr=1e-3)
    gs = GradientSet({p: (Tensor(np.full(params[p].weights.shape, 0.3)),
                          Tensor(np.full(params[p].bias.shape, -2.0))) for p in params}, None)
    new, _ = adam_step(state, params, gs)
    d = params["layer1"].weights.numpy() - new["layer1"].weights.numpy()
    assert np.allclose(d, 1e-3, rtol=1e-6)
    assert np.allclose(new["layer1"].bias.numpy(), 1e-3, rtol=1e-6)


def test_adam_registry_mismatch():
    spec = NetworkSpec.toy(n_blocks=0)
    params = build(spec, 0)
    state = OptimizerState.init(build(NetworkSpec.toy(n_blocks=1), 0))
    gs = GradientSet({p: (Tensor.zeros(params[p].weights.shape), Tensor.zeros(params[p].bias.shape))
                      for p in params}, None)
    with pytest.raises(ValueError, match="aligned"):
        adam_step(state, params, gs)


def test_protocol_defaults():
    p = TrainProtocol()
    assert (p.max_epochs, p.batch_size, p.learning_rate) == (100, 12, 1e-4)
    assert (p.lr_decay_patience, p.lr_decay_factor, p.lr_floor, p.early_stop_patience) == (5, 0.5, 1e-6, 10)
    assert (p.beta1, p.beta2, p.eps) == (0.9, 0.999, 1e-8)


def test_decay_and_early_stop(monkeypatch):
    script = iter([1.0, 0.9, 0.95, 0.95, 0.95, 0.95, 0.95, 0.95])
    monkeypatch.setattr(trainer_mod, "validation_rmse", lambda *a: next(script))
    spec = NetworkSpec.toy(n_blocks=0)
    data = _patches(spec, 4, 0)
    proto = TrainProtocol(max_epochs=20, batch_size=4, learning_rate=1e-3,
                          lr_decay_patience=2, early_stop_patience=4)
    rec, _ = train(spec, data, data, proto, seed=0)
    assert rec.stop_reason == "early_stop"
    assert rec.best_epoch == 2 and rec.best_val_rmse == 0.9
    assert [e.lr for e in rec.epochs] == [1e-3] * 4 + [5e-4] * 2


def test_lr_floor(monkeypatch):
    monkeypatch.setattr(trainer_mod, "validation_rmse", lambda *a: 1.0)
    spec = NetworkSpec.toy(n_blocks=0)
    data = _patches(spec, 2, 0)
    proto = TrainProtocol(max_epochs=8, batch_size=2, learning_rate=4e-6,
                          lr_decay_patience=1, early_stop_patience=100)
    rec, _ = train(spec, data, data, proto)
    assert rec.stop_reason == "max_epochs"
    assert min(e.lr for e in rec.epochs) == 1e-6


def test_train_deterministic_and_best_matches_record():
    spec = NetworkSpec.toy(n_blocks=1)
    tr, va = _patches(spec, 6, 1), _patches(spec, 3, 2)
    proto = TrainProtocol(max_epochs=3, batch_size=4, learning_rate=1e-3)
    r1, p1 = train(spec, tr, va, proto, seed=4)
    r2, p2 = train(spec, tr, va, proto, seed=4)
    assert r1.to_jsonl(wall_time=False) == r2.to_jsonl(wall_time=False)
    for p in p1:
        assert np.array_equal(p1[p].weights.numpy(), p2[p].weights.numpy())
    assert validation_rmse(p1, spec, va) == r1.best_val_rmse
    assert "wall_time_s" not in r1.to_jsonl(wall_time=False)
    assert r1.summary()["n_epochs"] == 3


def test_divergence_raises():
    spec = NetworkSpec.toy(n_blocks=0)
    data = _patches(spec, 2, 0)
    data.inputs[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as exc:
        train(spec, data, data, TrainProtocol(max_epochs=2, batch_size=2))
    assert exc.value.record.stop_reason == "diverged"


def test_multi_seed_selects_best():
    spec = NetworkSpec.toy(n_blocks=0)
    tr, va = _patches(spec, 4, 1), _patches(spec, 2, 2)
    proto = TrainProtocol(max_epochs=2, batch_size=4, learning_rate=1e-3)
    recs, best, params = train_multi_seed(spec, tr, va, proto, seeds=[0, 1, 2, 3])
    assert len(recs) == 4 and [r.seed for r in recs] == [0, 1, 2, 3]
    assert best == int(np.argmin([r.best_val_rmse for r in recs]))
    assert validation_rmse(params, spec, va) == recs[best].best_val_rmse
    recs2, best2, _ = train_multi_seed(spec, tr, va, proto, seeds=[0, 1, 2, 3], threads=2)
    assert best2 == best
    assert [r.best_val_rmse for r in recs2] == [r.best_val_rmse for r in recs]


def test_batch_modes_agree():
    spec = NetworkSpec.toy(n_blocks=1)
    params = build(spec, 3, identity_init=False)
    data = _patches(spec, 2, 5)
    x = Tensor(data.inputs[0])
    t = Tensor(data.targets[0])
    la, _ = training_step(params, spec, x, t, "naive")
    lb, _ = training_step(params, spec, x, t, "efficient")
    assert la == lb and math.isfinite(la)


@pytest.mark.parametrize("precision", [32, 64])
def test_model_roundtrip(tmp_path, precision):
    spec = NetworkSpec.toy(n_blocks=1, precision=precision)
    params = build(spec, 2, identity_init=False)
    path = tmp_path / "m.rvpm"
    write_model(path, spec, params)
    raw = path.read_bytes()
    assert raw[:4] == b"RVPM"
    spec2, params2 = read_model(path)
    assert spec2 == spec
    assert params2.paths() == params.paths()
    for p in params:
        assert np.array_equal(params2[p].weights.numpy(), params[p].weights.numpy())
        assert np.array_equal(params2[p].bias.numpy(), params[p].bias.numpy())
        assert params2[p].weights.dtype == spec.dtype
    write_model(tmp_path / "m2.rvpm", spec2, params2)
    assert (tmp_path / "m2.rvpm").read_bytes() == raw


def test_model_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(ValueError, match="RVPM"):
        read_model(tmp_path / "x")
