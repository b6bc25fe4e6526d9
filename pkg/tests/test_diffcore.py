import numpy as np
import pytest

from faithrep import diffcore as dc


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        up = f(x)
        x[i] = orig - h
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def unary_tape(op):
    t = dc.Tape()
    a = t.leaf("a")
    t.output("y", t.total_sum(getattr(t, op)(a)))
    return t


class TestForward:
    def test_matmul_and_broadcast_add(self):
        t = dc.Tape()
        x, w, b = t.leaf("x"), t.leaf("w"), t.leaf("b")
        t.output("y", t.add(t.matmul(x, w), b))
        rng = np.random.default_rng(0)
        X, W, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(1, 2))
        out = dc.forward(t, {"x": X, "w": W, "b": B})["y"]
        np.testing.assert_allclose(out, X @ W + B)

    def test_softmax_rows_sum_to_one(self):
        z = np.array([[1000.0, 1000.0, -1000.0], [0.0, 1.0, 2.0]])
        p = dc.softmax(z)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)
        np.testing.assert_allclose(p[0], [0.5, 0.5, 0.0])

    def test_softmax_xent_matches_definition(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(5, 3))
        tgt = dc.softmax(rng.normal(size=(5, 3)))
        t = dc.Tape()
        t.output("l", t.softmax_xent(t.leaf("t"), t.leaf("z")))
        val = dc.forward(t, {"t": tgt, "z": z})["l"]
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        assert val.shape == (1, 1)
        assert val[0, 0] == pytest.approx(-(tgt * np.log(p)).sum() / 5, rel=1e-12)

    def test_gauss_cdf_known_values(self):
        assert dc.gaussian_cdf(np.array([0.0]))[0] == 0.5
        assert dc.gaussian_pdf(np.array([0.0]))[0] == pytest.approx(1 / np.sqrt(2 * np.pi))

    def test_value_lookup_by_name(self):
        t = dc.Tape()
        a = t.leaf("a")
        t.output("y", t.scale(a, 3.0))
        dc.forward(t, {"a": np.ones((1, 2))})
        np.testing.assert_array_equal(t.value("y"), [[3.0, 3.0]])
        np.testing.assert_array_equal(t.value("a"), [[1.0, 1.0]])


class TestErrors:
    def test_shape_mismatch_names_operands(self):
        t = dc.Tape()
        t.output("y", t.matmul(t.leaf("x"), t.leaf("w")))
        with pytest.raises(dc.ShapeError, match="x.*w"):
            dc.forward(t, {"x": np.ones((2, 3)), "w": np.ones((2, 3))})

    def test_unbound_leaf(self):
        t = dc.Tape()
        t.output("y", t.relu(t.leaf("x")))
        with pytest.raises(KeyError, match="x"):
            dc.forward(t, {})

    def test_non_2d_input(self):
        t = dc.Tape()
        t.output("y", t.relu(t.leaf("x")))
        with pytest.raises(dc.ShapeError):
            dc.forward(t, {"x": np.ones(3)})

    def test_nan_input(self):
        t = dc.Tape()
        t.output("y", t.relu(t.leaf("x")))
        with pytest.raises(dc.NonFiniteError, match="x"):
            dc.forward(t, {"x": np.array([[np.nan]])})

    def test_overflow_in_intermediate(self):
        t = dc.Tape()
        x = t.leaf("x")
        t.output("y", t.relu(t.mul(x, x)))
        with pytest.raises(dc.NonFiniteError):
            dc.forward(t, {"x": np.array([[1e200]])})

    def test_overflow_in_matmul(self):
        t = dc.Tape()
        x = t.leaf("x")
        t.output("y", t.clamp01(t.matmul(x, x)))
        with pytest.raises(dc.NonFiniteError, match="matmul"):
            dc.forward(t, {"x": np.array([[1e200]])})

    def test_backward_before_forward(self):
        with pytest.raises(dc.TapeStateError):
            dc.backward(unary_tape("relu"))

    def test_value_before_forward(self):
        with pytest.raises(dc.TapeStateError):
            unary_tape("relu").value("y")

    def test_scale_by_needs_scalar(self):
        t = dc.Tape()
        t.output("y", t.scale_by(t.leaf("a"), t.leaf("s")))
        with pytest.raises(dc.ShapeError):
            dc.forward(t, {"a": np.ones((2, 2)), "s": np.ones((1, 2))})


class TestBackward:
    @pytest.mark.parametrize("op", ["relu", "softmax", "clamp01", "gauss_cdf", "transpose", "row_sum"])
    def test_unary_ops_match_finite_differences(self, op):
        rng = np.random.default_rng(3)
        # keep clear of the relu/clamp kinks
        x = rng.uniform(0.05, 0.95, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
        w = rng.normal(size=x.shape if op != "transpose" else x.T.shape)
        if op == "row_sum":
            w = rng.normal(size=(3, 1))
        t = dc.Tape()
        a, c = t.leaf("a"), t.leaf("c", frozen=True)
        t.output("y", t.total_sum(t.mul(getattr(t, op)(a), c)))

        def f(v):
            return dc.forward(t, {"a": v, "c": w})["y"][0, 0]

        f(x)
        g = dc.backward(t)["a"]
        np.testing.assert_allclose(g, numeric_grad(f, x.copy()), rtol=1e-6, atol=1e-9)

    def test_composite_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        vals = {
            "x": rng.normal(size=(4, 3)),
            "w": rng.normal(size=(3, 5)),
            "b": rng.normal(size=(1, 5)),
            "v": rng.normal(size=(5, 2)),
            "t": dc.softmax(rng.normal(size=(4, 2))),
            "s": np.array([[0.7]]),
            "m": (rng.random((4, 5)) > 0.3) / 0.7,
        }
        t = dc.Tape()
        x, w, b, v, tg, s, m = (t.leaf(k) for k in "xwbvtsm")
        h = t.dropout(t.relu(t.add(t.matmul(x, w), b)), m)
        loss = t.softmax_xent(tg, t.matmul(h, v))
        t.output("y", t.add(t.scale_by(loss, s), t.total_sum(t.gauss_cdf(t.scale(b, 0.5)))))
        dc.forward(t, vals)
        grads = dc.backward(t)
        for name in "wbvts":
            arr = vals[name].astype(float).copy()

            def f(a, name=name):
                return dc.forward(t, vals | {name: a})["y"][0, 0]

            np.testing.assert_allclose(grads[name], numeric_grad(f, arr), rtol=1e-5, atol=1e-8, err_msg=name)

    def test_xent_gradient_is_p_minus_t_for_one_hot(self):
        z = np.array([[0.2, -1.0, 0.5], [1.0, 1.0, 1.0]])
        tg = np.eye(3)[[2, 0]]
        t = dc.Tape()
        t.output("l", t.softmax_xent(t.leaf("t", frozen=True), t.leaf("z")))
        dc.forward(t, {"t": tg, "z": z})
        np.testing.assert_allclose(dc.backward(t)["z"], (dc.softmax(z) - tg) / 2, atol=1e-15)

    def test_frozen_and_unused_leaves_get_zeros(self):
        t = dc.Tape()
        a, b = t.leaf("a"), t.leaf("b", frozen=True)
        t.leaf("unused")
        t.output("y", t.total_sum(t.mul(a, b)))
        dc.forward(t, {"a": np.ones((2, 2)), "b": np.full((2, 2), 3.0), "unused": np.ones((1, 1))})
        g = dc.backward(t)
        np.testing.assert_array_equal(g["a"], 3.0)
        np.testing.assert_array_equal(g["b"], 0.0)
        np.testing.assert_array_equal(g["unused"], 0.0)

    def test_fan_out_accumulates(self):
        t = dc.Tape()
        a = t.leaf("a")
        t.output("y", t.total_sum(t.add(t.mul(a, a), a)))
        x = np.array([[2.0, -1.0]])
        dc.forward(t, {"a": x})
        np.testing.assert_allclose(dc.backward(t)["a"], 2 * x + 1)

    def test_seed_scales_gradient(self):
        t = unary_tape("relu")
        dc.forward(t, {"a": np.array([[1.0, -1.0]])})
        np.testing.assert_array_equal(dc.backward(t, 2.5)["a"], [[2.5, 0.0]])

    def test_seed_shape_checked(self):
        t = unary_tape("relu")
        dc.forward(t, {"a": np.ones((1, 2))})
        with pytest.raises(dc.ShapeError):
            dc.backward(t, np.ones((2, 2)))


class TestGradCheck:
    def quadratic(self, p):
        return float((p["x"] ** 2).sum()), {"x": 2 * p["x"]}

    def test_exact_gradient_passes(self):
        assert dc.grad_check(self.quadratic, {"x": np.array([[1.0, -2.0]])}) < 1e-8

    def test_wrong_gradient_detected(self):
        def bad(p):
            return float((p["x"] ** 2).sum()), {"x": 3 * p["x"]}

        assert dc.grad_check(bad, {"x": np.array([[1.0, -2.0]])}) > 0.4

    def test_reference_used_for_differences(self):
        def ref(p):
            return (p["x"] ** 2).sum()

        err = dc.grad_check(self.quadratic, {"x": np.array([[1.0, -2.0]])}, reference=ref)
        assert err < 1e-9

    def test_non_scalar_objective_rejected(self):
        with pytest.raises(dc.ShapeError):
            dc.grad_check(lambda p: (p["x"], {"x": p["x"]}), {"x": np.ones((1, 2))})

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError):
            dc.grad_check(self.quadratic, {"x": np.ones((1, 1))}, step=0.0)
