"""Conditional proximal residual flow: blocks act on (y, x) jointly but only
the last n output coordinates drive the residual update, so for every fixed
condition y the x-map is an ordinary invertible residual flow.
"""

import numpy as np

from . import diffengine as de
from . import linalg
from .flow import (ActNorm, DEFAULT_INVERT_MAX_ITER, DEFAULT_INVERT_TOL,
                   ResidualBlock, _block_parts_from_dict,
                   averaged_fixed_point, flow_from_checkpoint, gamma_bound,
                   graph_logdensity)
from .pnn import Pnn, StableActivation


class CondResidualBlock:
    """L(y, x) = actnorm(x + gamma * Phi_2(y, x)).

    Phi is a PNN on the joint space R^(d+n); the full joint block is
    computed and its first d outputs are discarded. Since Phi is t-averaged,
    Phi_2(y, .) is t-averaged in x for every y, so the unconditional gamma
    bound and fixed-point inversion carry over unchanged.
    """

    def __init__(self, phi, gamma, cond_dim, actnorm=None, train_gamma=False):
        gamma = float(gamma)
        t = phi.averagedness
        bound = gamma_bound(t)
        if gamma <= 0.0:
            raise ValueError(f"gamma must be positive, got {gamma}")
        if gamma >= bound:
            raise ValueError(
                f"gamma={gamma} violates the invertibility bound "
                f"(needs gamma < {bound:g} for t={t:g})")
        cond_dim = int(cond_dim)
        if not 0 <= cond_dim < phi.base_dim:
            raise ValueError("cond_dim must satisfy 0 <= d < d + n")
        self.phi = phi
        self.gamma = gamma
        self.cond_dim = cond_dim
        self.state_dim = phi.base_dim - cond_dim
        self.actnorm = (actnorm if actnorm is not None
                        else ActNorm.identity(self.state_dim))
        if self.actnorm.dim != self.state_dim:
            raise ValueError("actnorm dim must equal the state dim n")
        self.train_gamma = bool(train_gamma)

    @property
    def averagedness(self):
        return self.phi.averagedness

    def contraction_factor(self):
        t = self.averagedness
        return self.gamma * t / (1.0 + self.gamma - self.gamma * t)

    # -- parameters (same layout as the unconditional block) -----------------

    param_items = ResidualBlock.param_items
    set_params = ResidualBlock.set_params
    make_leaves = ResidualBlock.make_leaves
    _reps = ResidualBlock._reps
    _require_initialized = ResidualBlock._require_initialized

    # -- evaluation -----------------------------------------------------------

    def phi2(self, y, x, layer_reps=None):
        """Last n coordinates of Phi(y, x); dual-mode, columnwise."""
        joint = de.concat_rows(y, x)
        out = self.phi.apply(joint, layer_reps)
        return de.slice_rows(out, self.cond_dim, self.phi.base_dim)

    def r2_apply(self, y, x, layer_reps=None):
        """R_2(y, .) = (1/t) Phi_2(y, .) - ((1-t)/t) I, nonexpansive in x."""
        t = self.averagedness
        p2 = self.phi2(y, x, layer_reps)
        return de.sub(de.mul(1.0 / t, p2), de.mul((1.0 - t) / t, x))

    def graph_apply(self, x, leaves=None, y=None, want_parts=False):
        self._require_initialized()
        if y is None:
            raise ValueError("conditional block needs the condition y")
        y = _broadcast_condition(y, self.cond_dim, np.shape(de.val(x))[1])
        layer_reps, s_rep, b_rep, gamma_rep = self._reps(leaves)
        phi2 = self.phi2(y, x, layer_reps)
        u = de.add(x, de.mul(gamma_rep, phi2))
        out = self.actnorm.apply(u, s_rep, b_rep)
        if want_parts:
            return out, phi2, s_rep, gamma_rep
        return out


class _CondAsUnconditional:
    """Duck-typed Pnn surface for Phi_2(y0, .) at a frozen condition.

    Lets the unconditional solver/ops run on a conditional block unchanged;
    used to cross-check the two code paths.
    """

    def __init__(self, block, y0):
        self.block = block
        self.y0 = np.asarray(y0, dtype=float).reshape(block.cond_dim, 1)
        self.base_dim = block.state_dim
        self.kappa = block.phi.kappa
        self.averagedness = block.phi.averagedness

    def layer_reps(self, leaves=None):
        return None

    def apply(self, x, reps=None):
        y = np.broadcast_to(self.y0, (self.block.cond_dim,
                                      np.shape(de.val(x))[1])).copy()
        return self.block.phi2(y, x, reps)

    def r_apply(self, x, reps=None):
        y = np.broadcast_to(self.y0, (self.block.cond_dim,
                                      np.shape(de.val(x))[1])).copy()
        return self.block.r2_apply(y, x, reps)


def freeze_condition(block, y0):
    """Unconditional ResidualBlock computing x -> L(y0, x)."""
    frozen = ResidualBlock.__new__(ResidualBlock)
    frozen.phi = _CondAsUnconditional(block, y0)
    frozen.gamma = block.gamma
    frozen.actnorm = block.actnorm
    frozen.train_gamma = False
    return frozen


class CondProxFlow:
    """T(y, .) = L_K(y, .) o ... o L_1(y, .), invertible in x for every y."""

    def __init__(self, blocks, cond_dim, state_dim):
        for blk in blocks:
            if blk.state_dim != state_dim or blk.cond_dim != cond_dim:
                raise ValueError("all blocks must share (d, n)")
        self.blocks = list(blocks)
        self.cond_dim = int(cond_dim)
        self.dim = int(state_dim)

    def forward(self, y, x_cols):
        cur = np.asarray(x_cols, dtype=float)
        y = _broadcast_condition(y, self.cond_dim, cur.shape[1])
        for blk in self.blocks:
            cur = blk.graph_apply(cur, y=y)
        return cur

    def inverse(self, y, z_cols, tol=DEFAULT_INVERT_TOL,
                max_iter=DEFAULT_INVERT_MAX_ITER):
        cur = np.asarray(z_cols, dtype=float)
        y = _broadcast_condition(y, self.cond_dim, cur.shape[1])
        for blk in reversed(self.blocks):
            cur = cond_block_invert(blk, y, cur, tol=tol, max_iter=max_iter)
        return cur

    def param_items(self):
        items = []
        for k, blk in enumerate(self.blocks):
            items.extend(blk.param_items(prefix=f"block{k}."))
        return items

    @classmethod
    def random(cls, cond_dim, state_dim, n_blocks, kappa, hidden, widen_p,
               gamma, rng, act="elu", polar_tol=linalg.DEFAULT_POLAR_TOL,
               projection_grad="unrolled"):
        blocks = []
        joint = cond_dim + state_dim
        for _ in range(n_blocks):
            phi = Pnn.random(joint, kappa, hidden, widen_p, rng,
                             act=StableActivation(act),
                             projection_grad=projection_grad,
                             polar_tol=polar_tol)
            blocks.append(CondResidualBlock(phi, gamma, cond_dim))
        return cls(blocks, cond_dim, state_dim)


def _broadcast_condition(y, d, batch):
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] != d:
        raise ValueError(f"condition dim {y.shape[0]} != expected {d}")
    if y.shape[1] == batch:
        return y
    if y.shape[1] == 1:
        return np.broadcast_to(y, (d, batch)).copy()
    raise ValueError(f"condition batch {y.shape[1]} != state batch {batch}")


def _as_column(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[:, None], True
    return x, False


def cond_block_forward(block, y, x):
    """actnorm(x + gamma * Phi_2(y, x)) for a vector or column stack."""
    col, was_vector = _as_column(x)
    out = block.graph_apply(col, y=y)
    return out[:, 0] if was_vector else out


def cond_block_invert(block, y, z, tol=DEFAULT_INVERT_TOL,
                      max_iter=DEFAULT_INVERT_MAX_ITER, return_info=False):
    """Fixed-point inversion in x at fixed y (same iteration, R -> R_2)."""
    block._require_initialized()
    col, was_vector = _as_column(z)
    y = _broadcast_condition(y, block.cond_dim, col.shape[1])
    target = block.actnorm.undo(col)
    res = averaged_fixed_point(
        lambda x: block.r2_apply(y, x), target, block.gamma,
        block.averagedness, tol, max_iter, return_info=return_info)
    x, info = res if return_info else (res, None)
    x = x[:, 0] if was_vector else x
    return (x, info) if return_info else x


def cond_logdensity(flow, y, x, logdet_mode="exact", est_cfg=None,
                    est_rng=None):
    """log p(x | y) with block Jacobians taken with respect to x only."""
    col, was_vector = _as_column(x)
    y = _broadcast_condition(y, flow.cond_dim, col.shape[1])
    logp, _, _, _ = graph_logdensity(flow, col, y=y, logdet_mode=logdet_mode,
                                     est_cfg=est_cfg, est_rng=est_rng)
    lp = de.val(logp)
    return float(lp[0]) if was_vector else lp


def cond_logdensity_batch(flow, y, rows, chunk=4096, **kw):
    """log p(x | y) for (count, n) rows at a single condition y."""
    rows = np.asarray(rows, dtype=float)
    outs = []
    for i in range(0, rows.shape[0], chunk):
        block_rows = rows[i:i + chunk]
        outs.append(cond_logdensity(flow, y, block_rows.T, **kw))
    return np.concatenate(outs) if outs else np.zeros(0)


def cond_sample(flow, y, count, rng, tol=DEFAULT_INVERT_TOL,
                max_iter=DEFAULT_INVERT_MAX_ITER):
    """z ~ N(0, I_n), x = T(y, .)^{-1}(z); returns (count, n) rows."""
    z = rng.standard_normal((flow.dim, int(count)))
    x = flow.inverse(y, z, tol=tol, max_iter=max_iter)
    return x.T


# -- checkpoint (extends the flow format with cond_dim) ----------------------

def cond_flow_to_checkpoint(flow, config=None):
    from .flow import flow_to_checkpoint
    return flow_to_checkpoint(flow, config=config)


def cond_flow_from_checkpoint(ckpt, polar_tol=linalg.DEFAULT_POLAR_TOL):
    d = int(ckpt.get("cond_dim", 0))
    if d <= 0:
        raise ValueError("not a conditional checkpoint (cond_dim missing)")
    blocks = []
    for bd in ckpt["blocks"]:
        n = len(bd["actnorm"]["s"])
        phi, gamma, actnorm = _block_parts_from_dict(bd, n, d + n,
                                                     polar_tol=polar_tol)
        blocks.append(CondResidualBlock(phi, gamma, d, actnorm=actnorm))
    return CondProxFlow(blocks, d, blocks[0].state_dim)


def model_from_checkpoint(ckpt, polar_tol=linalg.DEFAULT_POLAR_TOL):
    """Dispatch on cond_dim: ProxFlow or CondProxFlow."""
    if ckpt.get("cond_dim"):
        return cond_flow_from_checkpoint(ckpt, polar_tol=polar_tol)
    return flow_from_checkpoint(ckpt, polar_tol=polar_tol)
