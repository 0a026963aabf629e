"""Gradient-fidelity and contract tests for the reverse-mode AD engine."""

import numpy as np
import pytest

from deskrl import diffcore as dc


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.abs(b), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def check_grad(build, shapes, seed, tol=1e-6, eps=1e-6, trials=5):
    """Compare tape gradients against central differences for random inputs.

    ``build`` maps a dict of Tensors to a Tensor output which is summed to
    a scalar before differentiation.
    """
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        vals = {k: rng.standard_normal(s) * 0.7 + 0.1 for k, s in shapes.items()}
        graph = dc.Graph(lambda t: dc.reduce_sum(build(t)))
        grads = dc.gradient(graph, vals)
        for name in shapes:
            def f(x, name=name):
                trial = dict(vals)
                trial[name] = x
                return float(dc.evaluate(graph, trial))
            fd = dc.finite_difference(f, vals[name], eps)
            assert rel_err(grads[name], fd) < tol, f"grad mismatch on {name}"


class TestForward:
    def test_square(self):
        g = dc.Graph(lambda t: dc.mul(t["x"], t["x"]))
        assert dc.evaluate(g, {"x": np.array(3.0)}) == 9.0

    def test_swish_at_zero(self):
        g = dc.Graph(lambda t: dc.swish(t["x"]))
        assert dc.evaluate(g, {"x": np.array(0.0)}) == 0.0

    def test_identity_solve(self):
        g = dc.Graph(lambda t: dc.solve_spd(t["a"], t["b"]))
        out = dc.evaluate(g, {"a": np.eye(2), "b": np.array([1.0, 2.0])})
        np.testing.assert_array_equal(out, [1.0, 2.0])

    def test_pure_and_bitwise_repeatable(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 3))
        w = rng.standard_normal((3, 5))
        g = dc.Graph(lambda t: dc.swish(dc.matmul(t["x"], t["w"])))
        a = dc.evaluate(g, {"x": x, "w": w})
        b = dc.evaluate(g, {"x": x, "w": w})
        np.testing.assert_array_equal(a, b)

    def test_shape_mismatch_raises(self):
        g = dc.Graph(lambda t: dc.matmul(t["x"], t["w"]))
        with pytest.raises(ValueError):
            dc.evaluate(g, {"x": np.ones((2, 3)), "w": np.ones((5, 2))})

    def test_nonfinite_reported_with_node(self):
        g = dc.Graph(lambda t: dc.log(t["x"]))
        with pytest.raises(dc.NonFiniteError, match="node"):
            dc.evaluate(g, {"x": np.array([-1.0])})

    def test_finite_checks_toggle(self):
        with dc.finite_checks(False):
            out = dc.log(dc.Tensor([-1.0]))
            assert np.isnan(out.data[0])


class TestGradients:
    def test_square_analytic(self):
        g = dc.Graph(lambda t: dc.mul(t["x"], t["x"]))
        grads = dc.gradient(g, {"x": np.array(3.0)}, seed=np.array(1.0))
        assert grads["x"] == pytest.approx(6.0, abs=1e-12)

    def test_log_analytic(self):
        g = dc.Graph(lambda t: dc.log(t["x"]))
        grads = dc.gradient(g, {"x": np.array(2.0)}, seed=np.array(1.0))
        assert grads["x"] == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("op", [
        dc.exp, dc.sin, dc.cos, dc.tanh, dc.sigmoid, dc.swish, dc.sqrt,
    ])
    def test_unary_ops(self, op):
        def build(t):
            x = t["x"] if op is not dc.sqrt else dc.mul(t["x"], t["x"])
            return op(x)
        check_grad(build, {"x": (7,)}, seed=hash(op.__name__) % 2**31, trials=20)

    def test_log_positive_domain(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            x = rng.uniform(0.2, 3.0, size=6)
            g = dc.Graph(lambda t: dc.reduce_sum(dc.log(t["x"])))
            fd = dc.finite_difference(lambda v: float(dc.evaluate(g, {"x": v})), x)
            assert rel_err(dc.gradient(g, {"x": x})["x"], fd) < 1e-6

    @pytest.mark.parametrize("op", [dc.add, dc.sub, dc.mul, dc.div, dc.minimum, dc.maximum])
    def test_binary_ops(self, op):
        check_grad(lambda t: op(t["a"], t["b"]), {"a": (5,), "b": (5,)},
                   seed=len(op.__name__), trials=20)

    def test_broadcast_binary(self):
        check_grad(lambda t: dc.mul(t["a"], t["b"]), {"a": (4, 3), "b": (3,)}, seed=11)
        check_grad(lambda t: dc.add(t["a"], t["b"]), {"a": (4, 1), "b": (1, 3)}, seed=12)

    def test_matmul_2d(self):
        check_grad(lambda t: dc.matmul(t["a"], t["b"]), {"a": (4, 3), "b": (3, 2)}, seed=13)

    def test_matmul_vec(self):
        check_grad(lambda t: dc.matmul(t["a"], t["b"]), {"a": (3,), "b": (3, 2)}, seed=14)
        check_grad(lambda t: dc.matmul(t["a"], t["b"]), {"a": (4, 3), "b": (3,)}, seed=15)
        check_grad(lambda t: dc.matmul(t["a"], t["b"]), {"a": (3,), "b": (3,)}, seed=16)

    def test_matmul_batched(self):
        check_grad(lambda t: dc.matmul(t["a"], t["b"]), {"a": (5, 4, 3), "b": (5, 3, 2)}, seed=17)

    def test_structure_ops(self):
        check_grad(lambda t: dc.concat([t["a"], t["b"]], axis=1), {"a": (2, 3), "b": (2, 2)}, seed=18)
        check_grad(lambda t: dc.stack([t["a"], t["b"]], axis=-1), {"a": (4,), "b": (4,)}, seed=19)
        check_grad(lambda t: dc.reshape(t["a"], (6,)), {"a": (2, 3)}, seed=20)
        check_grad(lambda t: dc.transpose(t["a"]), {"a": (2, 3)}, seed=21)
        check_grad(lambda t: t["a"][1:, :2], {"a": (3, 4)}, seed=22)
        check_grad(lambda t: dc.reduce_sum(t["a"], axis=0), {"a": (3, 4)}, seed=23)
        check_grad(lambda t: dc.mean(t["a"], axis=1), {"a": (3, 4)}, seed=24)

    def test_clip_inside_interval(self):
        check_grad(lambda t: dc.clip(t["x"], -10.0, 10.0), {"x": (6,)}, seed=25)
        # gradient is zero outside the interval
        x = dc.Tensor(np.array([-2.0, 0.0, 2.0]), requires_grad=True)
        dc.reduce_sum(dc.clip(x, -1.0, 1.0)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_solve_spd_grad(self):
        rng = np.random.default_rng(26)
        for _ in range(20):
            base = rng.standard_normal((3, 3))
            a = base @ base.T + 3.0 * np.eye(3)
            b = rng.standard_normal(3)
            g = dc.Graph(lambda t: dc.reduce_sum(
                dc.mul(dc.solve_spd(t["a"], t["b"]), t["w"])))
            w = rng.standard_normal(3)
            vals = {"a": a, "b": b, "w": w}
            grads = dc.gradient(g, vals)
            for name in ("a", "b"):
                def f(x, name=name):
                    trial = dict(vals)
                    trial[name] = x
                    return float(dc.evaluate(g, trial))
                fd = dc.finite_difference(f, vals[name])
                assert rel_err(grads[name], fd) < 1e-6

    def test_solve_spd_batched_grad(self):
        rng = np.random.default_rng(27)
        base = rng.standard_normal((4, 2, 2))
        a = base @ np.swapaxes(base, -1, -2) + 2.0 * np.eye(2)
        b = rng.standard_normal((4, 2))
        g = dc.Graph(lambda t: dc.reduce_sum(dc.solve_spd(t["a"], t["b"])))
        grads = dc.gradient(g, {"a": a, "b": b})
        fd_b = dc.finite_difference(
            lambda v: float(dc.evaluate(g, {"a": a, "b": v})), b)
        assert rel_err(grads["b"], fd_b) < 1e-6
        fd_a = dc.finite_difference(
            lambda v: float(dc.evaluate(g, {"a": v, "b": b})), a)
        assert rel_err(grads["a"], fd_a) < 1e-6

    def test_solve_non_spd_raises(self):
        with pytest.raises(np.linalg.LinAlgError):
            dc.solve_spd(np.array([[1.0, 2.0], [2.0, 1.0]]), np.array([1.0, 1.0]))

    def test_two_layer_swish_mlp(self):
        """Spec example: 2-layer swish MLP gradient matches finite differences."""
        rng = np.random.default_rng(28)
        x = rng.standard_normal((4, 3))

        def build(t):
            h = dc.swish(dc.add(dc.matmul(dc.Tensor(x), t["w1"]), t["b1"]))
            return dc.add(dc.matmul(h, t["w2"]), t["b2"])

        check_grad(build, {"w1": (3, 8), "b1": (8,), "w2": (8, 2), "b2": (2,)},
                   seed=29, trials=5)

    def test_backward_linearity(self):
        """seed a*u + b*v gives a*grad(u) + b*grad(v) to 1e-12."""
        rng = np.random.default_rng(30)
        x = rng.standard_normal((3, 2))
        g = dc.Graph(lambda t: dc.swish(dc.matmul(t["x"], dc.Tensor(rng.standard_normal((2, 4))))))
        u = rng.standard_normal((3, 4))
        v = rng.standard_normal((3, 4))
        a, b = 1.7, -0.4
        gu = dc.gradient(g, {"x": x}, seed=u)["x"]
        gv = dc.gradient(g, {"x": x}, seed=v)["x"]
        gmix = dc.gradient(g, {"x": x}, seed=a * u + b * v)["x"]
        np.testing.assert_allclose(gmix, a * gu + b * gv, atol=1e-12)

    def test_grad_accumulates_on_reuse(self):
        x = dc.Tensor(2.0, requires_grad=True)
        y = dc.add(dc.mul(x, x), dc.mul(3.0, x))  # x^2 + 3x -> 2x + 3 = 7
        y.backward()
        assert x.grad == pytest.approx(7.0)

    def test_detach_cuts_tape(self):
        x = dc.Tensor(2.0, requires_grad=True)
        y = dc.mul(x.detach(), x)  # treated as c*x with c=2
        y.backward()
        assert x.grad == pytest.approx(2.0)


class TestFiniteDifference:
    def test_square(self):
        fd = dc.finite_difference(lambda x: float(x**2), np.array(3.0), 1e-5)
        assert fd == pytest.approx(6.0, abs=1e-9)

    def test_sin_at_zero(self):
        fd = dc.finite_difference(lambda x: float(np.sin(x)), np.array(0.0), 1e-5)
        assert fd == pytest.approx(1.0, abs=1e-9)

    def test_eps_guard(self):
        with pytest.raises(ValueError):
            dc.finite_difference(lambda x: 0.0, np.zeros(2), eps=0.0)


class TestGraphStructure:
    def test_trace_topological(self):
        g = dc.Graph(lambda t: dc.mul(dc.add(t["x"], 1.0), dc.sin(t["x"])))
        nodes = g.trace({"x": np.array(0.5)})
        ids = [n[0] for n in nodes]
        assert ids == sorted(ids)
        pos = {nid: i for i, (nid, _, _) in enumerate(nodes)}
        for nid, _, parents in nodes:
            for p in parents:
                assert pos[p] < pos[nid]
