"""Negative log-likelihood training with Adam, the Stiefel penalizer,
deterministic loops, and checkpointing, for unconditional and conditional
flows."""

import csv
import logging
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import diffengine as de
from . import linalg
from .conditional import CondProxFlow
from .errors import NumericalError
from .flow import (EstimatorConfig, ProxFlow, flow_to_checkpoint,
                   graph_logdensity, save_checkpoint)

log = logging.getLogger(__name__)

GRAD_CLIP_NORM = 100.0


@dataclass
class TrainConfig:
    """Training hyperparameters plus solver and estimator knobs.

    d = 0 means unconditional. gamma must respect the bound implied by
    kappa. The JSON config interface accepts exactly these field names.
    """

    n: int
    K: int
    p: int
    h: int
    gamma: float
    batch_b: int
    epochs_e: int
    steps_s: int
    lr_tau: float
    d: int = 0
    penalty_weight: float = 1.0
    seed: int = 0
    kappa: int = 3
    activation: str = "elu"
    logdet_mode: str = "exact"
    probe_count: int = 1
    q_success: float = 0.5
    invert_tol: float = 1e-9
    invert_max_iter: int = 10_000
    polar_tol: float = 1e-10
    polar_max_iter: int = 50

    def __post_init__(self):
        for name in ("n", "K", "p", "h", "batch_b", "epochs_e", "steps_s",
                     "kappa"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive count")
        if self.d < 0:
            raise ValueError("d must be >= 0")
        if self.lr_tau <= 0:
            raise ValueError("lr_tau must be positive")
        if self.logdet_mode not in ("exact", "estimator"):
            raise ValueError("logdet_mode must be 'exact' or 'estimator'")
        from .flow import gamma_bound
        t = self.kappa / (self.kappa + 1.0)
        if not 0.0 < self.gamma < gamma_bound(t):
            raise ValueError(
                f"gamma={self.gamma} outside (0, {gamma_bound(t):g}) "
                f"for kappa={self.kappa}")

    @classmethod
    def from_json_dict(cls, payload):
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)

    def to_dict(self):
        return asdict(self)


def build_model(config, rng):
    if config.d == 0:
        return ProxFlow.random(
            config.n, config.K, config.kappa, config.h, config.p,
            config.gamma, rng, act=config.activation,
            polar_tol=config.polar_tol)
    return CondProxFlow.random(
        config.d, config.n, config.K, config.kappa, config.h, config.p,
        config.gamma, rng, act=config.activation,
        polar_tol=config.polar_tol)


# ---------------------------------------------------------------------------
# flat parameter vector plumbing
# ---------------------------------------------------------------------------

class ParamLayout:
    """Order, names, and shapes of a model's trainable arrays."""

    def __init__(self, model):
        self.model = model
        items = model.param_items()
        self.names = [name for name, _ in items]
        self.shapes = [np.shape(arr) for _, arr in items]
        self.sizes = [int(np.prod(s)) if s else 1 for s in self.shapes]
        self.total = int(sum(self.sizes))

    def pack(self):
        parts = [np.ravel(arr) for _, arr in self.model.param_items()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def unpack(self, flat):
        arrays, off = [], 0
        for shape, size in zip(self.shapes, self.sizes):
            arrays.append(np.reshape(flat[off:off + size], shape))
            off += size
        return arrays

    def apply(self, flat):
        arrays = self.unpack(flat)
        off = 0
        for k, blk in enumerate(self.model.blocks):
            count = len(blk.param_items())
            blk.set_params(arrays[off:off + count])
            off += count


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _split_batch(model, batch):
    """(b, n) or (b, d+n) rows -> (y columns or None, x columns)."""
    batch = np.asarray(batch, dtype=float)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ValueError("batch must be a nonempty 2-D array of rows")
    d = model.cond_dim
    if batch.shape[1] != d + model.dim:
        raise ValueError(
            f"batch row length {batch.shape[1]} != d+n = {d + model.dim}")
    if d == 0:
        return None, batch.T
    return batch[:, :d].T, batch[:, d:].T


def _penalty_node(leaves):
    """Stiefel penalizer sum_k ||T~^T T~ - I||_F^2 on the leaf nodes,
    orientation-adjusted like orth_defect."""
    total = None
    for name, node in leaves:
        if not name.endswith("t_tilde"):
            continue
        rows, cols = node.value.shape
        t = node if rows >= cols else de.swap_last2(node)
        gram = de.sub(de.matmul(de.swap_last2(t), t), np.eye(min(rows, cols)))
        term = de.sum_all(de.mul(gram, gram))
        total = term if total is None else de.add(total, term)
    return total


def nll_loss(model, batch, penalty_weight=1.0, logdet_mode="exact",
             est_cfg=None, est_rng=None, return_grads=True):
    """Mean negative log-likelihood plus the orthogonality penalty.

    Returns (loss, flat parameter gradient) by default, or just the loss
    value with return_grads=False (used by finite-difference checks; the
    estimator probes must then come from a replayable est_rng).
    """
    y, x = _split_batch(model, batch)
    logp, _, leaves, _ = graph_logdensity(
        model, x, y=y, with_params=return_grads, logdet_mode=logdet_mode,
        est_cfg=est_cfg, est_rng=est_rng)
    batch_size = x.shape[1]
    nll = de.mul(-1.0 / batch_size, de.sum_all(logp))
    if return_grads:
        pen = _penalty_node(leaves)
        loss = de.add(nll, de.mul(penalty_weight, pen)) if pen is not None else nll
    else:
        pen = _raw_penalty(model)
        loss = de.add(nll, penalty_weight * pen)
    loss_val = float(de.val(loss))
    if not np.isfinite(loss_val):
        raise NumericalError(
            f"non-finite loss {loss_val} on a batch of {batch_size} rows "
            f"(mean |x| = {np.mean(np.abs(x)):.3g})")
    if not return_grads:
        return loss_val
    grads = de.backward(loss, np.asarray(1.0), build_graph=False)
    parts = [np.ravel(de.val(grads.get(id(node), np.zeros(node.value.size))))
             for _, node in leaves]
    flat = np.concatenate(parts) if parts else np.zeros(0)
    return loss_val, flat


def _raw_penalty(model):
    total = 0.0
    for name, arr in model.param_items():
        if name.endswith("t_tilde"):
            total += linalg.orth_defect(arr) ** 2
    return total


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators with bias-corrected steps."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size))


def adam_step(state, params, grads, lr):
    """One standard Adam update; returns the new parameter vector."""
    if np.shape(params) != np.shape(grads) or np.shape(params) != np.shape(state.m):
        raise ValueError("mismatched shapes in adam_step")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads ** 2
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def data_init_actnorms(model, batch):
    """Blockwise data-dependent actnorm initialization on the first batch."""
    y, cur = _split_batch(model, batch)
    for blk in model.blocks:
        layer_reps, _, _, gamma = blk._reps(None)
        if y is None:
            phi = blk.phi.apply(cur, layer_reps)
        else:
            phi = blk.phi2(y, cur, layer_reps)
        u = cur + gamma * phi
        blk.actnorm.initialize_from_batch(u)
        cur = blk.actnorm.apply(u)
    return cur


def train_loop(config, sampler, out_dir=None, history_hook=None):
    """Run epochs x steps of Adam on the NLL; deterministic given the seed.

    ``sampler(rng, size)`` must return (size, n) or (size, d+n) rows.
    Returns (checkpoint dict, history list of (step, loss, penalty)).
    Checkpoints are written at every epoch end and at the end.
    """
    rng = linalg.make_rng(config.seed)
    model = build_model(config, rng)
    est_cfg = None
    if config.logdet_mode == "estimator":
        est_cfg = EstimatorConfig(probe_count=config.probe_count,
                                  rng_seed=config.seed,
                                  q_law=_geometric(config.q_success))

    first = sampler(rng, config.batch_b)
    data_init_actnorms(model, first)

    layout = ParamLayout(model)
    params = layout.pack()
    state = AdamState.zeros(params.size)
    history = []
    step = 0
    for epoch in range(config.epochs_e):
        for _ in range(config.steps_s):
            batch = sampler(rng, config.batch_b)
            est_rng = linalg.make_rng((config.seed, step)) if est_cfg else None
            try:
                loss, grads = nll_loss(
                    model, batch, penalty_weight=config.penalty_weight,
                    logdet_mode=config.logdet_mode, est_cfg=est_cfg,
                    est_rng=est_rng)
            except NumericalError as exc:
                raise NumericalError(f"step {step}: {exc}") from exc
            gnorm = float(np.linalg.norm(grads))
            if gnorm > GRAD_CLIP_NORM:
                log.info("step %d: clipping gradient norm %.3g", step, gnorm)
                grads = grads * (GRAD_CLIP_NORM / gnorm)
            params = adam_step(state, params, grads, config.lr_tau)
            layout.apply(params)
            penalty = _raw_penalty(model)
            history.append((step, loss, penalty))
            if history_hook is not None:
                history_hook(step, loss, penalty, model)
            step += 1
        if out_dir is not None:
            _write_outputs(out_dir, model, config, history)
    ckpt = flow_to_checkpoint(model, config.to_dict())
    if out_dir is not None:
        _write_outputs(out_dir, model, config, history)
    return ckpt, history


def _geometric(success):
    from .flow import GeometricQ
    return GeometricQ(success)


def _write_outputs(out_dir, model, config, history):
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(os.path.join(out_dir, "checkpoint.json"),
                    flow_to_checkpoint(model, config.to_dict()))
    write_history(os.path.join(out_dir, "history.csv"), history)


def write_history(path, history):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "penalty"])
        for step, loss, penalty in history:
            writer.writerow([step, repr(float(loss)), repr(float(penalty))])
    os.replace(tmp, path)
