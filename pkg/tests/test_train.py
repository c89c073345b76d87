import dataclasses

import numpy as np
import pytest

from elpinn import losses, ocp, train
from elpinn._jax import jax, jnp

EX1 = ocp.get_problem("ex1")
SMALL = dict(hidden_layers=2, widths=(8, 8, 8), n_colloc=32, n_eval=50)


def test_adam_first_step():
    st = train.AdamState.zeros(1, lr=1e-4)
    out = train.adam_step(st, [0.0], [1.0])
    assert out[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-15)
    assert out[0] == pytest.approx(-9.9999999e-5, rel=1e-9)
    assert st.step == 1


def test_adam_zero_gradient_is_identity():
    st = train.AdamState.zeros(3)
    p = np.array([1.0, -2.0, 3.5])
    for _ in range(5):
        p2 = train.adam_step(st, p, np.zeros(3))
        assert np.array_equal(p2, p)
    assert np.all(st.m == 0) and np.all(st.v == 0) and st.step == 5


def test_adam_constant_gradient_steps_at_lr():
    st = train.AdamState.zeros(2, lr=1e-3)
    p = np.zeros(2)
    g = np.array([3.0, -0.01])
    for _ in range(1000):
        prev = p
        p = train.adam_step(st, p, g)
    assert np.allclose(p - prev, [-1e-3, 1e-3], rtol=1e-6)


def test_adam_length_mismatch():
    with pytest.raises(ValueError):
        train.adam_step(train.AdamState.zeros(2), [0.0, 0.0, 0.0], [1.0, 1.0, 1.0])


def test_config_validation_and_defaults():
    with pytest.raises(ValueError):
        train.TrainConfig(variant="sgd")
    with pytest.raises(ValueError):
        train.TrainConfig(trace_interval=0)
    c = train.TrainConfig()
    assert (c.lr_params, c.lr_s, c.trace_interval, c.n_colloc) == (1e-4, 1e-3, 100, 1000)
    ex5 = train.TrainConfig.for_problem(ocp.get_problem("ex5"))
    assert (ex5.iterations, ex5.lr_s) == (100000, 1e-4)
    el4 = train.TrainConfig.for_problem(ocp.get_problem("ex4"), "pinn")
    assert el4.weights == {"L_r2": 150.0}


def test_adaptive_rejects_fixed_weights():
    cfg = train.TrainConfig("aw-el", iterations=0, weights={"L_x": 2.0}, **SMALL)
    with pytest.raises(ValueError):
        train.train(EX1, cfg)


def test_zero_iterations_returns_initial_state():
    cfg = train.TrainConfig("aw-el", iterations=0, seed=3, **SMALL)
    res = train.train(EX1, cfg)
    assert [r["iteration"] for r in res.trace.records] == [0]
    rng = np.random.default_rng(3)
    from elpinn import mlp
    for k, c in train.network_configs(EX1, cfg).items():
        assert np.array_equal(res.nets[k].flat(), mlp.init(c, rng).flat())
    assert np.array_equal(res.s, losses.AdaptiveState.initial(5, rng).s)


@pytest.mark.parametrize("variant", train.VARIANTS)
def test_determinism(variant):
    cfg = train.TrainConfig(variant, iterations=60, trace_interval=20, seed=7, **SMALL)
    a, b = train.train(EX1, cfg), train.train(EX1, cfg)
    assert a.trace.records == b.trace.records
    for k in a.nets:
        assert np.array_equal(a.nets[k].flat(), b.nets[k].flat())
    assert a.evaluation.rle == b.evaluation.rle


def test_trace_structure():
    cfg = train.TrainConfig("aw-el", iterations=250, trace_interval=100, **SMALL)
    res = train.train(EX1, cfg)
    its = res.trace.column("iteration")
    assert its.tolist() == [0, 100, 200, 250]
    assert res.trace.columns == ["iteration", "loss", "L_x", "L_x0", "L_p", "L_pf", "L_u",
                                 "w_x", "w_x0", "w_p", "w_pf", "w_u", "rle_x", "rle_u"]
    assert np.all(np.isfinite(res.trace.column("loss")))
    for c in ("w_x", "w_x0", "w_p", "w_pf", "w_u"):
        assert np.all(res.trace.column(c) > 0)
    # the last record evaluates the returned networks
    assert res.trace.records[-1]["rle_x"] == res.evaluation.rle["x"]


def test_trace_append_must_increase():
    tr = train.MetricsTrace(("L_x",), ("x",))
    tr.append({"iteration": 5})
    with pytest.raises(ValueError):
        tr.append({"iteration": 5})


def test_fixed_variant_weights_stay_constant():
    cfg = train.TrainConfig("el", iterations=40, trace_interval=20,
                            weights={"L_u": 3.0}, **SMALL)
    res = train.train(EX1, cfg)
    assert res.s is None
    assert res.trace.column("w_u").tolist() == [3.0] * 3
    assert res.trace.column("w_x").tolist() == [1.0] * 3


def test_training_reduces_loss():
    cfg = train.TrainConfig("el", iterations=400, trace_interval=400, lr_params=1e-2, **SMALL)
    loss = train.train(EX1, cfg).trace.column("loss")
    assert loss[-1] < 0.1 * loss[0]


def test_pinn_variant_on_unsupported_problem():
    with pytest.raises(losses.UnsupportedBaseline):
        train.train(ocp.get_problem("ex3"), train.TrainConfig("aw-pinn", iterations=0, **SMALL))


def test_missing_reference():
    with pytest.raises(train.MissingReference, match="tpbvp_reference"):
        train.train(ocp.get_problem("ex5"), train.TrainConfig("aw-el", iterations=0, **SMALL))


def test_non_finite_loss_aborts_with_diagnostics():
    exploding = dataclasses.replace(EX1, f=lambda t, x, u: [jnp.exp(1e3 * x[0] * x[0])])
    cfg = train.TrainConfig("el", iterations=50, trace_interval=25, lr_params=10.0, **SMALL)
    res = train.train(exploding, cfg)
    assert res.status == "aborted"
    assert res.abort["iteration"] >= 1
    assert set(res.abort["components"]) == set(losses.el_component_names(EX1))
    assert not np.isfinite(res.abort["loss"]) or not all(
        np.isfinite(list(res.abort["components"].values())))
    assert np.all(np.isfinite(res.trace.column("loss")))
    assert all(np.all(np.isfinite(n.flat())) for n in res.nets.values())


def test_evaluate_examples():
    t = np.linspace(0, 1, 2)
    ref = ocp.Trajectories(t, np.array([[3.0], [4.0]]), np.array([[1.0], [-1.0]]))
    same = train.compare_trajectories(EX1, ref, ref)
    assert same.rle == {"x": 0.0, "u": 0.0} and same.mae == {"x": 0.0, "u": 0.0}
    double = ocp.Trajectories(t, 2 * ref.x, 2 * ref.u)
    assert train.compare_trajectories(EX1, double, ref).rle == {"x": 1.0, "u": 1.0}
    off = ocp.Trajectories(t, np.array([[3.0], [5.0]]), ref.u)
    ev = train.compare_trajectories(EX1, off, ref)
    assert ev.abs_err["x"].tolist() == [0.0, 1.0]
    assert ev.rle["x"] == pytest.approx(0.2, rel=1e-15)
    assert ev.mae["x"] == 1.0
    assert ev.avg_rle == pytest.approx(0.1) and ev.avg_mae == pytest.approx(0.5)


def test_evaluate_needs_reference():
    from elpinn import mlp
    prob = ocp.get_problem("ex6")
    nets = {"x": mlp.init(mlp.MlpConfig(1, 4, 2), 0), "u": mlp.init(mlp.MlpConfig(1, 4, 1), 1)}
    with pytest.raises(train.MissingReference):
        train.evaluate(nets, prob)
    grid = np.linspace(0, 5, 7)
    ref = ocp.Trajectories(grid, np.ones((7, 2)), np.ones((7, 1)))
    ev = train.evaluate(nets, prob, grid, ref)
    assert ev.variables == ("x", "v", "u")


def test_s_converges_to_log_of_constant_components():
    Ls = jnp.asarray([0.5, 1.0, 2.0])
    b_names = ("a", "b", "c")

    def loss(s):
        return losses.compose_adaptive(losses.LossBreakdown(b_names, tuple(Ls)), s)

    grad = jax.jit(jax.grad(loss))

    def step(carry, _):
        s, m, v, k = carry
        k = k + 1
        d, m, v = train.adam_update(m, v, k, grad(s), 1e-3)
        return (s + d, m, v, k), None

    s0 = jnp.asarray(losses.AdaptiveState.initial(3, np.random.default_rng(0)).s)
    z = jnp.zeros(3)
    (s, *_), _ = jax.lax.scan(step, (s0, z, z, 0.0), None, length=20000)
    assert np.max(np.abs(np.asarray(s) - np.log([0.5, 1.0, 2.0]))) <= 1e-3


def test_weight_column_names():
    assert train.weight_column("L_x0") == "w_x0"
    assert train.weight_column("L_pf2") == "w_pf2"
