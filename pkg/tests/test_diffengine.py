import numpy as np
import pytest

from proxflow import diffengine as de
from proxflow import linalg
from proxflow.errors import ProxflowError
from proxflow.pnn import Pnn, ProxBlock, StableActivation, StiefelParam


def fd_directional(f, x, v, step=1e-5):
    """Central finite differences of v^T f along each input coordinate."""
    x = np.asarray(x, float)
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = step
        out.flat[i] = (np.dot(v, f(x + e)) - np.dot(v, f(x - e))) / (2 * step)
    return out


def fd_jacobian(f, x, step=1e-5):
    x = np.asarray(x, float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = step
        cols.append((f(x + e) - f(x - e)) / (2 * step))
    return np.stack(cols, axis=1)


def make_block_tape(pnn_net, x):
    """Tape of the residual-style map x for a raw input vector."""
    x_node = de.leaf(x[:, None])
    leaves = pnn_net.make_leaves()
    reps = pnn_net.layer_reps(leaves)
    out = pnn_net.apply(x_node, reps)
    return de.Tape(x_node, out, leaves)


class TestVjp:
    def test_identity_tape(self):
        x = de.leaf(np.array([1.0, 2.0, 3.0]))
        tape = de.Tape(x, de.add(x, 0.0))
        v = np.array([0.5, -1.0, 2.0])
        gin, gparams = de.vjp(tape, v)
        assert np.array_equal(gin, v)
        assert gparams.size == 0

    def test_linear_tape(self):
        w = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        x = de.leaf(np.array([1.0, -1.0]))
        tape = de.Tape(x, de.matmul(w, x))
        v = np.array([1.0, 0.5, -2.0])
        gin, _ = de.vjp(tape, v)
        assert np.allclose(gin, w.T @ v, atol=1e-14)

    def test_pnn_block_against_finite_differences(self):
        rng = linalg.make_rng(21)
        net = Pnn.random(3, kappa=2, hidden=5, widen_p=2, rng=rng,
                         polar_tol=1e-12)
        x = rng.standard_normal(3)
        v = rng.standard_normal(3)
        y, tape = None, make_block_tape(net, x)
        gin, _ = de.vjp(tape, v[:, None])
        fd = fd_directional(lambda xx: net.apply(xx[:, None])[:, 0], x, v)
        assert np.linalg.norm(gin[:, 0] - fd) / max(np.linalg.norm(fd), 1e-12) <= 1e-5

    def test_cotangent_shape_mismatch_fails(self):
        x = de.leaf(np.zeros(3))
        tape = de.Tape(x, de.mul(x, 2.0))
        with pytest.raises(ValueError):
            de.vjp(tape, np.zeros(4))

    def test_linearity(self):
        rng = linalg.make_rng(22)
        net = Pnn.random(2, kappa=1, hidden=4, widen_p=2, rng=rng)
        x = rng.standard_normal(2)
        tape = make_block_tape(net, x)
        v = rng.standard_normal((2, 1))
        w = rng.standard_normal((2, 1))
        a, b = 0.3, -1.7
        gv, pv = de.vjp(tape, v)
        gw, pw = de.vjp(tape, w)
        gc, pc = de.vjp(tape, a * v + b * w)
        assert np.allclose(gc, a * gv + b * gw, atol=1e-12)
        assert np.allclose(pc, a * pv + b * pw, atol=1e-12)


class TestJacobian:
    def test_scaling_map(self):
        x = de.leaf(np.array([1.0, -2.0]))
        tape = de.Tape(x, de.mul(3.0, x))
        assert np.allclose(de.jacobian(tape), 3.0 * np.eye(2), atol=1e-14)

    def test_identity_activation_orthogonal_block(self):
        # B(x) = T^T (Tx + b) with square orthogonal T has Jacobian I
        rng = linalg.make_rng(23)
        t0 = linalg.polar_project(rng.standard_normal((4, 4)), tol=1e-13)
        blk = ProxBlock(StiefelParam(t0, tol=1e-13), rng.standard_normal(4),
                        StableActivation("identity"))
        net = Pnn([blk], widen_p=1, base_dim=4)
        tape = make_block_tape(net, rng.standard_normal(4))
        assert np.allclose(de.jacobian(tape), np.eye(4), atol=1e-12)

    def test_random_block_against_fd_jacobian(self):
        rng = linalg.make_rng(24)
        net = Pnn.random(3, kappa=3, hidden=4, widen_p=2, rng=rng,
                         polar_tol=1e-12)
        x = rng.standard_normal(3)
        tape = make_block_tape(net, x)
        jac = de.jacobian(tape)
        fd = fd_jacobian(lambda xx: net.apply(xx[:, None])[:, 0], x)
        assert np.max(np.abs(jac - fd)) <= 1e-6

    def test_dimension_guard(self):
        x = de.leaf(np.zeros(300))
        tape = de.Tape(x, de.mul(x, 1.0))
        with pytest.raises(ProxflowError):
            de.jacobian(tape)


class TestGradOfScalarOfJacobian:
    def test_scaled_identity_gamma_gradient(self):
        # L(x) = (1+gamma) x, d/dgamma n log(1+gamma) = n / (1+gamma)
        gamma = 0.7
        n = 3
        x = de.leaf(np.ones(n))
        g = de.leaf(gamma)
        tape = de.Tape(x, de.mul(de.add(1.0, g), x), params=[("gamma", g)])
        grad = de.grad_of_scalar_of_jacobian(tape)
        assert grad.shape == (1,)
        assert grad[0] == pytest.approx(n / (1.0 + gamma), rel=1e-12)

    def test_residual_block_against_fd_of_exact_logdet(self):
        rng = linalg.make_rng(25)
        gamma = 0.9
        net = Pnn.random(2, kappa=3, hidden=3, widen_p=2, rng=rng,
                         polar_tol=1e-13)
        x = rng.standard_normal(2)

        def build_tape():
            x_node = de.leaf(x[:, None])
            leaves = net.make_leaves()
            reps = net.layer_reps(leaves)
            out = de.add(x_node, de.mul(gamma, net.apply(x_node, reps)))
            return de.Tape(x_node, out, leaves)

        grad = de.grad_of_scalar_of_jacobian(build_tape())

        flat0 = np.concatenate([arr.ravel() for _, arr in net.param_items()])

        def logdet_at(flat):
            shapes = [arr.shape for _, arr in net.param_items()]
            arrays, off = [], 0
            for s in shapes:
                size = int(np.prod(s))
                arrays.append(flat[off:off + size].reshape(s))
                off += size
            net.set_params(arrays)
            tape = build_tape()
            return linalg.lu_logabsdet(de.jacobian(tape))

        step = 1e-5
        fd = np.zeros_like(flat0)
        for i in range(flat0.size):
            e = np.zeros_like(flat0)
            e[i] = step
            fd[i] = (logdet_at(flat0 + e) - logdet_at(flat0 - e)) / (2 * step)
        logdet_at(flat0)  # restore parameters

        rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
        assert rel <= 1e-4

    def test_zero_influence_parameter_has_zero_gradient(self):
        # identity activation: Jacobian is T^T T regardless of the bias
        rng = linalg.make_rng(26)
        t0 = linalg.polar_project(rng.standard_normal((6, 3)), tol=1e-13)
        blk = ProxBlock(StiefelParam(t0, tol=1e-13), rng.standard_normal(6),
                        StableActivation("identity"))
        net = Pnn([blk], widen_p=1, base_dim=3)
        x_node = de.leaf(rng.standard_normal((3, 1)))
        leaves = net.make_leaves()
        reps = net.layer_reps(leaves)
        out = de.add(x_node, de.mul(0.8, net.apply(x_node, reps)))
        tape = de.Tape(x_node, out, leaves)
        grad = de.grad_of_scalar_of_jacobian(tape)
        names = [name for name, _ in tape.params]
        bias_slice = slice(t0.size, t0.size + 6)
        assert "layer0.bias" in names[1]
        assert np.array_equal(grad[bias_slice], np.zeros(6))


class TestStraightThrough:
    def test_projection_modes_differ_only_in_backward(self):
        rng = linalg.make_rng(27)
        raw = rng.standard_normal((3, 3))
        sp = StiefelParam(raw, tol=1e-12)
        t_leaf = de.leaf(raw)
        unrolled = sp.project_node(t_leaf, "unrolled")
        st = sp.project_node(t_leaf, "straight_through")
        assert np.allclose(unrolled.value, st.value, atol=1e-10)
        g = np.ones((3, 3))
        grads_st = de.backward(st, g)
        assert np.array_equal(grads_st[id(t_leaf)], g)
        grads_un = de.backward(unrolled, g)
        assert not np.allclose(grads_un[id(t_leaf)], g)
