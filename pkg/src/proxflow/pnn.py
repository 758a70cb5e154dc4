"""Stable activations, proximal blocks T^T sigma(Tx + b), and widened
proximal neural networks with their averagedness bookkeeping.

A network with kappa blocks is kappa/(kappa+1)-averaged; widening through
the adapter A = (1/sqrt(p)) (I; ...; I) preserves averagedness, so these
networks can be used as residual-update subnetworks with scale factors
beyond the classical Lipschitz-1 regime.
"""

import math

import numpy as np

from . import diffengine as de
from . import linalg

_ACT_KINDS = ("elu", "tanh", "identity")


class StableActivation:
    """1-Lipschitz, monotone increasing, fixes 0; derivative in [0, 1].

    Exactly the scalar functions that are proximity operators. ELU with
    alpha=1 is the default (the only alpha making it C^1); tanh is the
    alternative; identity exists for tests.
    """

    def __init__(self, kind="elu", alpha=1.0):
        if kind not in _ACT_KINDS:
            raise ValueError(f"unknown activation kind {kind!r}")
        if kind == "elu" and not 0.0 < alpha <= 1.0:
            raise ValueError("elu alpha must be in (0, 1] to stay 1-Lipschitz")
        self.kind = kind
        self.alpha = float(alpha)

    def apply(self, z):
        """Dual-mode (array or Node) elementwise activation."""
        if self.kind == "identity":
            return z
        if self.kind == "tanh":
            return de.tanh(z)
        mask = de.val(z) > 0
        # mask out the positive part before exp so no overflow occurs there
        z_neg = de.where_mask(mask, 0.0, z)
        return de.where_mask(mask, z, de.mul(self.alpha, de.sub(de.exp(z_neg), 1.0)))

    def deriv(self, z):
        """Pointwise derivative on plain arrays."""
        z = np.asarray(z, dtype=float)
        if self.kind == "identity":
            return np.ones_like(z)
        if self.kind == "tanh":
            return 1.0 - np.tanh(z) ** 2
        return np.where(z > 0, 1.0, self.alpha * np.exp(np.minimum(z, 0.0)))

    def to_config(self):
        if self.kind == "elu" and self.alpha != 1.0:
            return {"act": self.kind, "alpha": self.alpha}
        return {"act": self.kind}

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg["act"], cfg.get("alpha", 1.0))


class StiefelParam:
    """Raw matrix together with its cached orthogonality projection."""

    def __init__(self, t_tilde, tol=linalg.DEFAULT_POLAR_TOL,
                 max_iter=linalg.DEFAULT_POLAR_MAX_ITER):
        self.t_tilde = np.array(t_tilde, dtype=float)
        self.tol = tol
        self.max_iter = max_iter
        self._projected = None

    @property
    def projected(self):
        if self._projected is None:
            self._projected = linalg.polar_project(
                self.t_tilde, tol=self.tol, max_iter=self.max_iter)
        return self._projected

    def set_raw(self, arr):
        self.t_tilde = np.array(arr, dtype=float)
        self._projected = None

    def defect(self):
        return linalg.orth_defect(self.t_tilde)

    def project_node(self, t_node, mode="unrolled"):
        """Projection applied to a leaf Node of the raw matrix."""
        if mode == "straight_through":
            return de.straight_through(t_node, self.projected)
        if mode != "unrolled":
            raise ValueError(f"unknown projection_grad mode {mode!r}")
        return _polar_project_graph(t_node, self.tol, self.max_iter)


def _polar_project_graph(t_node, tol, max_iter):
    """Unrolled polar-factor iteration on Nodes; step count is driven by the
    forward values, exactly like the raw iteration.

    One extra step is taken after the defect reaches tol: at a fixed point
    the iteration map has zero derivative along normal directions, so the
    post-convergence step is what makes the unrolled derivative match the
    true projection derivative (to O(defect)) instead of degenerating to
    the identity when the input already sits on the manifold.
    """
    rows, cols = np.shape(de.val(t_node))
    if rows < cols:
        return de.swap_last2(
            _polar_project_graph(de.swap_last2(t_node), tol, max_iter))
    eye = np.eye(cols)
    y = t_node
    converged = 0
    for _ in range(max_iter + 2):
        yv = de.val(y)
        defect = np.linalg.norm(yv.T @ yv - eye)
        if defect <= tol:
            converged += 1
            if converged == 2:
                return y
        gram = de.add(eye, de.matmul(de.swap_last2(y), y))
        y = de.mul(2.0, de.matmul(y, de.inv(gram)))
    from .errors import ConvergenceError
    raise ConvergenceError(
        f"polar iteration did not reach tol={tol:g} in {max_iter} steps",
        residual=float(defect), iterations=max_iter)


class ProxBlock:
    """One proximal block B(x) = T^T sigma(Tx + b) with Stiefel-constrained T.

    T is (hidden, dim); the orientation rule of the projection handles both
    hidden < dim and hidden >= dim. Input and output dimension are equal.
    """

    def __init__(self, t_param, bias, act=None):
        self.t_param = t_param if isinstance(t_param, StiefelParam) else StiefelParam(t_param)
        bias = np.asarray(bias, dtype=float)
        if bias.ndim == 1:
            bias = bias[:, None]
        self.bias = bias
        self.act = act or StableActivation()
        h, _ = self.t_param.t_tilde.shape
        if self.bias.shape[0] != h:
            raise ValueError(
                f"bias length {self.bias.shape[0]} does not match hidden dim {h}")

    @property
    def hidden_dim(self):
        return self.t_param.t_tilde.shape[0]

    @property
    def dim(self):
        return self.t_param.t_tilde.shape[1]

    def apply(self, u, t_rep=None, b_rep=None):
        """Dual-mode block application on (dim, batch) columns."""
        t = self.t_param.projected if t_rep is None else t_rep
        b = self.bias if b_rep is None else b_rep
        z = de.add(de.matmul(t, u), b)
        return de.matmul(de.swap_last2(t), self.act.apply(z))


class Pnn:
    """Widened proximal neural network Psi = A^T Phi(A x).

    ``blocks`` are the kappa prox blocks of Phi acting on the widened
    dimension p * base_dim; averagedness is kappa/(kappa+1).
    """

    def __init__(self, blocks, widen_p, base_dim, projection_grad="unrolled"):
        if not blocks:
            raise ValueError("a Pnn needs at least one block")
        widen_p = int(widen_p)
        wide = widen_p * base_dim
        for blk in blocks:
            if blk.dim != wide:
                raise ValueError(
                    f"block dim {blk.dim} does not match widened dim {wide}")
        self.blocks = list(blocks)
        self.widen_p = widen_p
        self.base_dim = int(base_dim)
        self.projection_grad = projection_grad
        self._scale = 1.0 / math.sqrt(widen_p)

    @property
    def kappa(self):
        return len(self.blocks)

    @property
    def averagedness(self):
        return self.kappa / (self.kappa + 1.0)

    # -- parameters ---------------------------------------------------------

    def param_items(self, prefix=""):
        items = []
        for j, blk in enumerate(self.blocks):
            items.append((f"{prefix}layer{j}.t_tilde", blk.t_param.t_tilde))
            items.append((f"{prefix}layer{j}.bias", blk.bias))
        return items

    def set_params(self, arrays):
        """arrays in param_items order; invalidates projection caches."""
        it = iter(arrays)
        for blk in self.blocks:
            blk.t_param.set_raw(next(it))
            blk.bias = np.array(next(it), dtype=float)

    def make_leaves(self, prefix=""):
        """Fresh leaf Nodes (name, node) in param_items order."""
        return [(name, de.leaf(arr)) for name, arr in self.param_items(prefix)]

    def layer_reps(self, leaves=None):
        """(T_rep, b_rep) per layer: raw cached projections, or projected
        leaf nodes when differentiating through the parameters."""
        if leaves is None:
            return [(blk.t_param.projected, blk.bias) for blk in self.blocks]
        reps = []
        for j, blk in enumerate(self.blocks):
            t_leaf = leaves[2 * j][1]
            b_leaf = leaves[2 * j + 1][1]
            t_rep = blk.t_param.project_node(t_leaf, self.projection_grad)
            reps.append((t_rep, b_leaf))
        return reps

    # -- evaluation ---------------------------------------------------------

    def apply(self, x, reps=None):
        """Phi through the widening adapter, on (base_dim, batch) columns."""
        if np.shape(de.val(x))[0] != self.base_dim:
            raise ValueError(
                f"input dim {np.shape(de.val(x))[0]} != base dim {self.base_dim}")
        reps = self.layer_reps() if reps is None else reps
        u = de.tile_rows(x, self.widen_p, self._scale)
        for blk, (t_rep, b_rep) in zip(self.blocks, reps):
            u = blk.apply(u, t_rep, b_rep)
        return de.sum_row_segments(u, self.widen_p, self._scale)

    def r_apply(self, x, reps=None):
        """R = (1/t) Phi - ((1-t)/t) I, the nonexpansive part."""
        t = self.averagedness
        phi = self.apply(x, reps)
        return de.sub(de.mul(1.0 / t, phi), de.mul((1.0 - t) / t, x))

    @classmethod
    def random(cls, base_dim, kappa, hidden, widen_p, rng, act=None,
               projection_grad="unrolled", polar_tol=linalg.DEFAULT_POLAR_TOL):
        """Feasible start: Gaussian T-tilde projected once onto the manifold,
        zero biases."""
        blocks = []
        wide = widen_p * base_dim
        for _ in range(kappa):
            raw = rng.standard_normal((hidden, wide))
            t0 = linalg.polar_project(raw, tol=polar_tol, max_iter=200)
            blocks.append(ProxBlock(
                StiefelParam(t0, tol=polar_tol),
                np.zeros(hidden),
                act or StableActivation()))
        return cls(blocks, widen_p, base_dim, projection_grad)


def averagedness(pnn):
    """kappa/(kappa+1) for a kappa-block network."""
    if pnn.kappa < 1:
        raise ValueError("averagedness needs kappa >= 1")
    return pnn.averagedness


def _as_column(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[:, None], True
    return x, False


def pnn_forward(pnn, x):
    """Evaluate Psi(x) and record the tape, projections included.

    Returns (y, tape) where y matches the shape of x (vector in, vector
    out) and the tape's parameters are the raw T-tilde and bias leaves.
    """
    col, was_vector = _as_column(x)
    x_node = de.leaf(col)
    leaves = pnn.make_leaves()
    reps = pnn.layer_reps(leaves)
    out = pnn.apply(x_node, reps)
    tape = de.Tape(x_node, out, leaves)
    y = out.value[:, 0] if was_vector else out.value
    return y, tape


def r_forward(pnn, x):
    """R(x) = (1/t) Phi(x) - ((1-t)/t) x on plain arrays."""
    col, was_vector = _as_column(x)
    out = pnn.r_apply(col)
    return out[:, 0] if was_vector else out
