"""Residual blocks L(x) = actnorm(x + gamma * Phi(x)), flow composition,
fixed-point inversion, and the three log-determinant paths (exact via the
assembled Jacobian, single-layer closed form, Russian-roulette estimator).
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import diffengine as de
from . import linalg
from .errors import ConvergenceError, NumericalError, ProxflowError
from .pnn import Pnn, StableActivation

DEFAULT_INVERT_TOL = 1e-9
DEFAULT_INVERT_MAX_ITER = 10_000

LOG_2PI = math.log(2.0 * math.pi)


class ActNorm:
    """Per-dimension affine y = s * u + b with data-dependent initialization.

    The log-determinant contribution sum(log|s_i|) enters every log-det
    path. Scale and shift are stored as (dim, 1) columns.
    """

    def __init__(self, dim, scale=None, shift=None, initialized=False):
        self.dim = int(dim)
        self.scale = (np.ones((dim, 1)) if scale is None
                      else np.asarray(scale, dtype=float).reshape(dim, 1).copy())
        self.shift = (np.zeros((dim, 1)) if shift is None
                      else np.asarray(shift, dtype=float).reshape(dim, 1).copy())
        self.initialized = bool(initialized)

    @classmethod
    def identity(cls, dim):
        return cls(dim, initialized=True)

    def initialize_from_batch(self, u):
        """Choose s, b so the batch (dim, batch) maps to mean 0, variance 1.

        Deterministic given the batch; the std floor only guards degenerate
        constant dimensions.
        """
        mean = u.mean(axis=1, keepdims=True)
        std = np.maximum(u.std(axis=1, keepdims=True), 1e-12)
        self.scale = 1.0 / std
        self.shift = -mean / std
        self.initialized = True

    def apply(self, u, s_rep=None, b_rep=None):
        s = self.scale if s_rep is None else s_rep
        b = self.shift if b_rep is None else b_rep
        return de.add(de.mul(s, u), b)

    def undo(self, y):
        return (y - self.shift) / self.scale

    def logdet(self):
        return float(np.sum(np.log(np.abs(self.scale))))


def gamma_bound(averagedness):
    """Strict upper bound for the residual scale; infinite when t <= 1/2."""
    if averagedness <= 0.5:
        return math.inf
    return 1.0 / (2.0 * averagedness - 1.0)


class ResidualBlock:
    """L(x) = actnorm(x + gamma * Phi(x)) with a widened PNN subnetwork.

    gamma is validated strictly against the averagedness bound at
    construction; it is a fixed hyperparameter unless train_gamma is set.
    """

    def __init__(self, phi, gamma, actnorm=None, train_gamma=False):
        gamma = float(gamma)
        t = phi.averagedness
        bound = gamma_bound(t)
        if gamma <= 0.0:
            raise ValueError(f"gamma must be positive, got {gamma}")
        if gamma >= bound:
            raise ValueError(
                f"gamma={gamma} violates the invertibility bound: a "
                f"{phi.kappa}-layer subnetwork is t={t:g}-averaged and needs "
                f"gamma < {bound:g}")
        self.phi = phi
        self.gamma = gamma
        self.actnorm = actnorm if actnorm is not None else ActNorm.identity(phi.base_dim)
        if self.actnorm.dim != phi.base_dim:
            raise ValueError("actnorm dim does not match the subnetwork dim")
        self.train_gamma = bool(train_gamma)

    @property
    def state_dim(self):
        return self.phi.base_dim

    @property
    def averagedness(self):
        return self.phi.averagedness

    def contraction_factor(self):
        t = self.averagedness
        return self.gamma * t / (1.0 + self.gamma - self.gamma * t)

    # -- parameters ----------------------------------------------------------

    def param_items(self, prefix=""):
        items = self.phi.param_items(prefix=f"{prefix}pnn.")
        items.append((f"{prefix}actnorm.s", self.actnorm.scale))
        items.append((f"{prefix}actnorm.b", self.actnorm.shift))
        if self.train_gamma:
            items.append((f"{prefix}gamma", np.asarray(self.gamma)))
        return items

    def set_params(self, arrays):
        n_pnn = len(self.phi.param_items())
        self.phi.set_params(arrays[:n_pnn])
        self.actnorm.scale = np.array(arrays[n_pnn], dtype=float).reshape(-1, 1)
        self.actnorm.shift = np.array(arrays[n_pnn + 1], dtype=float).reshape(-1, 1)
        if self.train_gamma:
            self.gamma = float(np.asarray(arrays[n_pnn + 2]))

    def make_leaves(self, prefix=""):
        return [(name, de.leaf(arr)) for name, arr in self.param_items(prefix)]

    def _reps(self, leaves):
        """(layer_reps, s, b, gamma) from leaves, or raw cached values."""
        if leaves is None:
            return (self.phi.layer_reps(None), self.actnorm.scale,
                    self.actnorm.shift, self.gamma)
        n_pnn = len(self.phi.param_items())
        layer_reps = self.phi.layer_reps(leaves[:n_pnn] or None)
        s_rep = leaves[n_pnn][1]
        b_rep = leaves[n_pnn + 1][1]
        gamma_rep = leaves[n_pnn + 2][1] if self.train_gamma else self.gamma
        return layer_reps, s_rep, b_rep, gamma_rep

    # -- evaluation -----------------------------------------------------------

    def _require_initialized(self):
        if not self.actnorm.initialized:
            raise ProxflowError(
                "actnorm is uninitialized; run the data-dependent "
                "initialization (training does this on its first batch)")

    def graph_apply(self, x, leaves=None, y=None, want_parts=False):
        """Dual-mode block application on (n, batch) columns."""
        self._require_initialized()
        layer_reps, s_rep, b_rep, gamma_rep = self._reps(leaves)
        phi = self.phi.apply(x, layer_reps)
        u = de.add(x, de.mul(gamma_rep, phi))
        out = self.actnorm.apply(u, s_rep, b_rep)
        if want_parts:
            return out, phi, s_rep, gamma_rep
        return out

    def r_apply(self, x):
        return self.phi.r_apply(x)


def _as_column(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[:, None], True
    return x, False


def block_forward(block, x):
    """actnorm(x + gamma * Phi(x)); x is a vector or (n, batch) columns."""
    col, was_vector = _as_column(x)
    out = block.graph_apply(col)
    return out[:, 0] if was_vector else out


def averaged_fixed_point(r_apply, target, gamma, t, tol, max_iter,
                         return_info=False):
    """Solve x + gamma * Phi(x) = target for a t-averaged Phi via the
    contraction x <- target/(1+g-gt) - (gt/(1+g-gt)) R(x), x0 = target/(1+g-gt).

    Works columnwise on (n, batch) stacks; convergence is the max-norm of
    the update over all entries.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    a = 1.0 / (1.0 + gamma - gamma * t)
    c = gamma * t * a
    base = a * target
    x = base
    deltas = []
    for _ in range(max_iter):
        x_new = base - c * r_apply(x)
        col_delta = np.max(np.abs(x_new - x), axis=0)
        delta = float(np.max(col_delta))
        deltas.append(delta)
        x = x_new
        if delta <= tol:
            if return_info:
                return x, {"iterations": len(deltas), "deltas": deltas}
            return x
    worst = int(np.argmax(col_delta)) if np.ndim(col_delta) else 0
    raise ConvergenceError(
        f"fixed-point inversion did not reach tol={tol:g} in {max_iter} "
        f"iterations (last update {delta:.3e}, worst column {worst})",
        residual=delta, iterations=max_iter)


def block_invert(block, y, tol=DEFAULT_INVERT_TOL,
                 max_iter=DEFAULT_INVERT_MAX_ITER, return_info=False):
    """Invert one residual block: undo actnorm, then fixed-point iterate."""
    block._require_initialized()
    col, was_vector = _as_column(y)
    target = block.actnorm.undo(col)
    res = averaged_fixed_point(block.r_apply, target, block.gamma,
                               block.averagedness, tol, max_iter,
                               return_info=return_info)
    x, info = res if return_info else (res, None)
    x = x[:, 0] if was_vector else x
    return (x, info) if return_info else x


# ---------------------------------------------------------------------------
# log-determinant paths
# ---------------------------------------------------------------------------

def _tile_cols(a, reps):
    """(m, b) -> (m, reps*b) with copy i in columns [i*b, (i+1)*b)."""
    return de.swap_last2(de.tile_rows(de.swap_last2(a), reps, 1.0))


def _slice_cols(a, i0, i1):
    return de.swap_last2(de.slice_rows(de.swap_last2(a), i0, i1))


def _jacobian_stack_tiled(out_tiled, x_tiled, n, batch, graph):
    """(batch, n, n) Jacobian stack from one backward pass.

    The block was evaluated on an n-fold column tiling of the batch; seeding
    copy i with unit cotangent e_i makes a single vjp return every Jacobian
    row at once, which keeps the per-step cost BLAS-bound instead of paying
    the backward-pass bookkeeping n times.
    """
    cot = np.zeros((n, n * batch))
    for i in range(n):
        cot[i, i * batch:(i + 1) * batch] = 1.0
    grads = de.backward(out_tiled, cot, stops=(x_tiled,), build_graph=graph)
    g = grads.get(id(x_tiled))
    if g is None:
        zeros = np.zeros((batch, n, n))
        return de.Node(zeros) if graph else zeros
    if graph and not isinstance(g, de.Node):
        g = de.Node(np.asarray(g))
    # G[j, i*b+s] = dOut_i/dx_j at sample s
    g3 = de.reshape(g, (n, n, batch))
    return de.permute(g3, (2, 1, 0))


def block_tape(block, x, with_params=False):
    """Tape of the full block map (actnorm included) at one input column."""
    col, _ = _as_column(x)
    x_node = de.leaf(col)
    leaves = block.make_leaves() if with_params else None
    out = block.graph_apply(x_node, leaves)
    return de.Tape(x_node, out, leaves or [])


def logdet_exact(block, x):
    """log|det dL(x)| via the assembled Jacobian (actnorm included)."""
    tape = block_tape(block, x)
    return linalg.lu_logabsdet(de.jacobian(tape))


def logdet_single_layer(block, x):
    """Closed form for kappa=1, p=1 blocks with row-orthonormal T:
    sum_i log(1 + gamma * sigma'_i(Tx + b)) plus the actnorm term."""
    phi = block.phi
    if phi.kappa != 1 or phi.widen_p != 1:
        raise ProxflowError(
            "single-layer log-det needs kappa=1 and widening p=1")
    layer = phi.blocks[0]
    t = layer.t_param.projected
    h, n = t.shape
    if h > n:
        raise ProxflowError(
            "single-layer log-det needs a row-orthonormal T (hidden <= dim)")
    x = np.asarray(x, dtype=float).reshape(n)
    z = t @ x + layer.bias[:, 0]
    d = layer.act.deriv(z)
    return float(np.sum(np.log1p(block.gamma * d))) + block.actnorm.logdet()


@dataclass
class GeometricQ:
    """Geometric stopping index on {1, 2, ...}: P(Q=k) = (1-s)^(k-1) s."""

    success: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.success < 1.0:
            raise ValueError("success probability must lie in (0, 1)")

    def sample(self, rng):
        return int(rng.geometric(self.success))

    def survival(self, k):
        """p_k = P(Q >= k)."""
        return (1.0 - self.success) ** (k - 1)


@dataclass
class EstimatorConfig:
    """Russian-roulette estimator configuration (Gaussian probes)."""

    probe_count: int
    rng_seed: int = 0
    q_law: GeometricQ = field(default_factory=GeometricQ)

    def __post_init__(self):
        if self.probe_count < 1:
            raise ValueError("probe_count must be at least 1")


def _series_value(r_out, x_node, v, q, q_law, c):
    """sum_{k=1}^{q} ((-1)^(k+1)/k) v^T M^k v / p_k with M = c * dR(x),
    realized by k successive vjp applications (M never materialized)."""
    total = 0.0
    w = v
    for k in range(1, q + 1):
        grads = de.backward(r_out, w, build_graph=False)
        gw = grads.get(id(x_node))
        if gw is None:
            break
        w = c * de.val(gw)
        total += ((-1.0) ** (k + 1)) / k * float(np.sum(w * v)) / q_law.survival(k)
    return total


def logdet_estimate(block, x, cfg):
    """Unbiased log-det estimate: n log(1+g-gt) + actnorm term + truncated
    Neumann series in M = (gt/(1+g-gt)) dR(x), averaged over probe draws."""
    col, _ = _as_column(x)
    n = block.state_dim
    t = block.averagedness
    gamma = block.gamma
    c = block.contraction_factor()
    rng = linalg.make_rng(cfg.rng_seed)

    x_node = de.leaf(col)
    r_out = block.phi.r_apply(x_node)

    det_part = n * math.log(1.0 + gamma - gamma * t) + block.actnorm.logdet()
    acc = 0.0
    for _ in range(cfg.probe_count):
        v = rng.standard_normal((n, 1))
        q = cfg.q_law.sample(rng)
        acc += _series_value(r_out, x_node, v, q, cfg.q_law, c)
    return det_part + acc / cfg.probe_count


def estimate_samples(block, x, cfg):
    """Individual per-draw estimates (for unbiasedness checks)."""
    col, _ = _as_column(x)
    n = block.state_dim
    t = block.averagedness
    gamma = block.gamma
    c = block.contraction_factor()
    rng = linalg.make_rng(cfg.rng_seed)
    x_node = de.leaf(col)
    r_out = block.phi.r_apply(x_node)
    det_part = n * math.log(1.0 + gamma - gamma * t) + block.actnorm.logdet()
    out = np.empty(cfg.probe_count)
    for i in range(cfg.probe_count):
        v = rng.standard_normal((n, 1))
        q = cfg.q_law.sample(rng)
        out[i] = det_part + _series_value(r_out, x_node, v, q, cfg.q_law, c)
    return out


def logdet_estimate_grad(block, x, cfg):
    """Parameter gradient of the block log-det, one flat vector in
    make_leaves order: the gradient series (row-vector Neumann sum times
    dM/dtheta applied to the probe) plus the gradients of the closed-form
    n log(1+g-gt) and actnorm terms."""
    col, _ = _as_column(x)
    n = block.state_dim
    t = block.averagedness
    rng = linalg.make_rng(cfg.rng_seed)

    x_node = de.leaf(col)
    leaves = block.make_leaves()
    layer_reps, s_rep, _, gamma_rep = block._reps(leaves)
    phi = block.phi.apply(x_node, layer_reps)
    ta = block.averagedness
    r_out = de.sub(de.mul(1.0 / ta, phi), de.mul((1.0 - ta) / ta, x_node))

    gamma_val = float(de.val(gamma_rep))
    c_val = gamma_val * t / (1.0 + gamma_val - gamma_val * t)
    # scale factor as an expression so dM/dgamma is included when trainable
    denom = de.add(1.0, de.sub(gamma_rep, de.mul(gamma_rep, t)))
    c_expr = de.div(de.mul(gamma_rep, t), denom)

    terms = None
    for _ in range(cfg.probe_count):
        v = rng.standard_normal((n, 1))
        q = cfg.q_law.sample(rng)
        # raw row-vector series a^T = sum_{k=0}^{q} ((-1)^k / p_k) v^T M^k
        a = v.copy()
        w = v
        for k in range(1, q + 1):
            grads = de.backward(r_out, w, build_graph=False)
            gw = grads.get(id(x_node))
            if gw is None:
                gw = np.zeros_like(w)
            w = c_val * de.val(gw)
            a = a + ((-1.0) ** k) / cfg.q_law.survival(k) * w
        # s = a^T M v as a graph scalar; dM/dtheta flows through this vjp
        grads = de.backward(r_out, a, build_graph=True)
        u = grads.get(id(x_node))
        if u is None:
            u = de.Node(np.zeros((n, 1)))
        s = de.mul(c_expr, de.dot(u, v))
        terms = s if terms is None else de.add(terms, s)
    series_mean = de.mul(1.0 / cfg.probe_count, terms)

    det_node = de.mul(float(n), de.log(denom))
    act_node = de.sum_all(de.log(de.absolute(s_rep)))
    total = de.add(series_mean, de.add(det_node, act_node))
    tape = de.Tape(x_node, total, leaves)
    grads = de.backward(total, np.asarray(1.0), build_graph=False)
    return de._flatten_param_grads(tape, grads)


# ---------------------------------------------------------------------------
# flows
# ---------------------------------------------------------------------------

class ProxFlow:
    """Composition of residual blocks with a standard normal base."""

    def __init__(self, blocks, dim):
        for blk in blocks:
            if blk.state_dim != dim:
                raise ValueError("all blocks must act on the flow dimension")
        self.blocks = list(blocks)
        self.dim = int(dim)

    @property
    def cond_dim(self):
        return 0

    def forward(self, x_cols):
        cur = np.asarray(x_cols, dtype=float)
        for blk in self.blocks:
            cur = blk.graph_apply(cur)
        return cur

    def inverse(self, z_cols, tol=DEFAULT_INVERT_TOL,
                max_iter=DEFAULT_INVERT_MAX_ITER):
        cur = np.asarray(z_cols, dtype=float)
        for blk in reversed(self.blocks):
            cur = block_invert(blk, cur, tol=tol, max_iter=max_iter)
        return cur

    def param_items(self):
        items = []
        for k, blk in enumerate(self.blocks):
            items.extend(blk.param_items(prefix=f"block{k}."))
        return items

    @classmethod
    def random(cls, dim, n_blocks, kappa, hidden, widen_p, gamma, rng,
               act="elu", polar_tol=linalg.DEFAULT_POLAR_TOL,
               projection_grad="unrolled", train_gamma=False):
        blocks = []
        for _ in range(n_blocks):
            phi = Pnn.random(dim, kappa, hidden, widen_p, rng,
                             act=StableActivation(act),
                             projection_grad=projection_grad,
                             polar_tol=polar_tol)
            blocks.append(ResidualBlock(phi, gamma, train_gamma=train_gamma))
        return cls(blocks, dim)


def _colsum(a, rows):
    """Column sums of an (rows, b) stack as a (b,) value (dual-mode)."""
    batch = np.shape(de.val(a))[1]
    return de.reshape(de.sum_row_segments(a, rows, 1.0), (batch,))


def base_logpdf(z, n):
    """Standard normal log-density per column (dual-mode)."""
    quad = de.mul(0.5, _colsum(de.mul(z, z), n))
    return de.sub(-0.5 * n * LOG_2PI, quad)


def _block_logdet_estimator_term(block, phi_node, cur, s_rep, gamma_rep, n,
                                 batch, cfg, rng, graph):
    """Per-sample estimator term as a (batch,) value. One shared q per probe
    keeps the chain vectorized over columns; probes are per sample. Built
    from the parameter reps so gradients reach gamma and the actnorm scale."""
    t = block.averagedness
    r_out = de.sub(de.mul(1.0 / t, phi_node), de.mul((1.0 - t) / t, cur))
    denom = de.add(1.0, de.sub(gamma_rep, de.mul(gamma_rep, t)))
    c_rep = de.div(de.mul(gamma_rep, t), denom)
    acc = None
    for _ in range(cfg.probe_count):
        v = rng.standard_normal((n, batch))
        q = cfg.q_law.sample(rng)
        w = v
        total = None
        for k in range(1, q + 1):
            grads = de.backward(r_out, de.val(w) if not graph else w,
                                stops=(cur,), build_graph=graph)
            gw = grads.get(id(cur))
            if gw is None:
                break
            w = de.mul(c_rep, gw)
            coef = ((-1.0) ** (k + 1)) / k / cfg.q_law.survival(k)
            term = de.mul(coef, _colsum(de.mul(w, v), n))
            total = term if total is None else de.add(total, term)
        if total is None:
            total = np.zeros(batch)
        acc = total if acc is None else de.add(acc, total)
    series = de.mul(1.0 / cfg.probe_count, acc)
    det_part = de.mul(float(n), de.log(denom))
    act_part = de.sum_all(de.log(de.absolute(s_rep)))
    return de.add(de.add(series, det_part), act_part)


def graph_logdensity(model, X, y=None, with_params=False, logdet_mode="exact",
                     est_cfg=None, est_rng=None):
    """Log-density graph for a batch of columns.

    Returns (logp, z, leaves, x0) where logp is a (batch,) node, leaves the
    (name, leaf) parameter list (empty unless with_params), and x0 the input
    leaf. Works for conditional models when y columns are passed.
    """
    X = np.asarray(X, dtype=float)
    n, batch = X.shape
    x0 = de.leaf(X)
    cur = x0
    leaves_all = []
    logdet = np.zeros(batch)
    for k, blk in enumerate(model.blocks):
        leaves = blk.make_leaves(prefix=f"block{k}.") if with_params else None
        if leaves:
            leaves_all.extend(leaves)
        if logdet_mode == "exact":
            x_tiled = _tile_cols(cur, n)
            y_tiled = None if y is None else np.tile(y, (1, n))
            out_tiled = blk.graph_apply(x_tiled, leaves=leaves, y=y_tiled)
            if not np.all(np.isfinite(de.val(out_tiled))):
                raise NumericalError(f"block {k} produced non-finite values")
            jac = _jacobian_stack_tiled(out_tiled, x_tiled, n, batch,
                                        graph=with_params)
            term = de.logabsdet_stacked(jac)
            if not np.all(np.isfinite(de.val(term))):
                raise NumericalError(f"block {k} has a singular Jacobian")
            out = _slice_cols(out_tiled, 0, batch)
        elif logdet_mode == "estimator":
            if est_cfg is None or est_rng is None:
                raise ValueError("estimator mode needs est_cfg and est_rng")
            out, phi, s_rep, gamma_rep = blk.graph_apply(
                cur, leaves=leaves, y=y, want_parts=True)
            if not np.all(np.isfinite(de.val(out))):
                raise NumericalError(f"block {k} produced non-finite values")
            term = _block_logdet_estimator_term(
                blk, phi, cur, s_rep, gamma_rep, n, batch, est_cfg, est_rng,
                graph=with_params)
        else:
            raise ValueError(f"unknown logdet_mode {logdet_mode!r}")
        logdet = de.add(logdet, term)
        cur = out
    logp = de.add(base_logpdf(cur, n), logdet)
    return logp, cur, leaves_all, x0


def flow_forward_logdensity(flow, x, logdet_mode="exact", est_cfg=None,
                            est_rng=None):
    """(z, log p) for one point via the change of variables formula."""
    col, was_vector = _as_column(x)
    if not np.all(np.isfinite(col)):
        raise ValueError("input must be finite")
    logp, z, _, _ = graph_logdensity(flow, col, logdet_mode=logdet_mode,
                                     est_cfg=est_cfg, est_rng=est_rng)
    zv = de.val(z)
    lp = de.val(logp)
    if was_vector:
        return zv[:, 0], float(lp[0])
    return zv, lp


def flow_logdensity_batch(flow, rows, chunk=4096, **kw):
    """Log-density for (count, n) rows, chunked along the batch."""
    rows = np.asarray(rows, dtype=float)
    outs = []
    for i in range(0, rows.shape[0], chunk):
        logp, _, _, _ = graph_logdensity(flow, rows[i:i + chunk].T, **kw)
        outs.append(de.val(logp))
    return np.concatenate(outs) if outs else np.zeros(0)


def flow_sample(flow, count, rng, tol=DEFAULT_INVERT_TOL,
                max_iter=DEFAULT_INVERT_MAX_ITER):
    """Draw z ~ N(0, I) and invert the flow; returns (count, n) rows."""
    z = rng.standard_normal((flow.dim, int(count)))
    x = flow.inverse(z, tol=tol, max_iter=max_iter)
    return x.T


# ---------------------------------------------------------------------------
# checkpoint format (External Interface)
# ---------------------------------------------------------------------------

def _block_to_dict(block):
    return {
        "actnorm": {
            "s": block.actnorm.scale[:, 0].tolist(),
            "b": block.actnorm.shift[:, 0].tolist(),
        },
        "gamma": block.gamma,
        "pnn": {
            "p": block.phi.widen_p,
            "layers": [
                dict(T_tilde=layer.t_param.t_tilde.tolist(),
                     b=layer.bias[:, 0].tolist(),
                     **layer.act.to_config())
                for layer in block.phi.blocks
            ],
        },
    }


def _block_parts_from_dict(d, state_dim, pnn_dim,
                           polar_tol=linalg.DEFAULT_POLAR_TOL):
    """(phi, gamma, actnorm) from one serialized block."""
    from .pnn import ProxBlock, StiefelParam
    layers = []
    p = int(d["pnn"]["p"])
    for layer in d["pnn"]["layers"]:
        act = StableActivation.from_config(layer)
        layers.append(ProxBlock(
            StiefelParam(np.asarray(layer["T_tilde"], dtype=float),
                         tol=polar_tol),
            np.asarray(layer["b"], dtype=float), act))
    phi = Pnn(layers, p, pnn_dim)
    actnorm = ActNorm(state_dim, scale=d["actnorm"]["s"],
                      shift=d["actnorm"]["b"], initialized=True)
    return phi, float(d["gamma"]), actnorm


def flow_to_checkpoint(flow, config=None):
    ckpt = {
        "version": 1,
        "config": dict(config) if config else {},
        "blocks": [_block_to_dict(b) for b in flow.blocks],
    }
    if flow.cond_dim:
        ckpt["cond_dim"] = flow.cond_dim
    return ckpt


def flow_from_checkpoint(ckpt, polar_tol=linalg.DEFAULT_POLAR_TOL):
    if ckpt.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version {ckpt.get('version')}")
    if ckpt.get("cond_dim"):
        raise ValueError("conditional checkpoint: use conditional.model_from_checkpoint")
    blocks = []
    for bd in ckpt["blocks"]:
        n = len(bd["actnorm"]["s"])
        phi, gamma, actnorm = _block_parts_from_dict(bd, n, n,
                                                     polar_tol=polar_tol)
        blocks.append(ResidualBlock(phi, gamma, actnorm))
    return ProxFlow(blocks, blocks[0].state_dim)


def save_checkpoint(path, ckpt):
    """Atomic JSON write; float repr round-trips 64-bit values exactly."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(ckpt, fh)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
