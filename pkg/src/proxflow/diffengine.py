"""Reverse-mode differentiation sized for this fixed architecture.

The engine records a DAG of primitive operations (matmul, add, elementwise
activations, reductions, small linear-algebra kernels). Every primitive
accepts either plain numpy arrays or ``Node`` values and returns the same
kind, so the model code is written once and runs in two modes:

* raw mode: plain arrays in, plain arrays out, nothing recorded;
* graph mode: any Node argument produces a Node whose backward rule is
  itself expressed through these same primitives.

Because backward rules call back into the primitives, cotangents produced
with ``build_graph=True`` are Nodes again, which is what makes second-order
quantities (gradients of exact log-determinants with respect to parameters)
a plain replay instead of a special case.
"""

import itertools

import numpy as np

from .errors import NumericalError, ProxflowError

_IDS = itertools.count()


class Node:
    """One recorded primitive result.

    ``parents`` are the Node inputs (constant operands are captured in the
    rule closure); ``rule(g, out_rep, parent_reps)`` returns one cotangent
    contribution per parent. Creation order is a topological order by
    construction: a node's parents always carry smaller ids.
    """

    __slots__ = ("value", "parents", "rule", "nid")

    def __init__(self, value, parents=(), rule=None):
        self.value = value
        self.parents = parents
        self.rule = rule
        self.nid = next(_IDS)

    def __repr__(self):
        return f"Node(nid={self.nid}, shape={np.shape(self.value)})"


def leaf(value):
    """Differentiable input node."""
    return Node(np.asarray(value, dtype=float))


def val(x):
    return x.value if isinstance(x, Node) else x


def _any_node(*args):
    return any(isinstance(a, Node) for a in args)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _reduce_raw(a, shape):
    shape = tuple(shape)
    a = np.asarray(a)
    if a.shape == shape:
        return a
    extra = a.ndim - len(shape)
    if extra > 0:
        a = a.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, d in enumerate(shape) if d == 1 and a.shape[i] != 1)
    if keep:
        a = a.sum(axis=keep, keepdims=True)
    return a.reshape(shape)


def reduce_to_shape(a, shape):
    """Sum over broadcast axes so the result has ``shape``."""
    if np.shape(val(a)) == tuple(shape):
        return a
    if isinstance(a, Node):
        src_shape = np.shape(a.value)
        return Node(_reduce_raw(a.value, shape), (a,),
                    lambda g, o, p: (broadcast_to(g, src_shape),))
    return _reduce_raw(a, shape)


def broadcast_to(a, shape):
    if isinstance(a, Node):
        src_shape = np.shape(a.value)
        return Node(np.broadcast_to(a.value, shape).copy(), (a,),
                    lambda g, o, p: (reduce_to_shape(g, src_shape),))
    return np.broadcast_to(a, shape).copy()


def _binary(a, b, fwd, rule_a, rule_b):
    """rule_a/rule_b(g, out_rep, a_rep, b_rep) -> cotangent contribution."""
    if not _any_node(a, b):
        return fwd(a, b)
    av, bv = val(a), val(b)
    out = fwd(av, bv)
    a_shape, b_shape = np.shape(av), np.shape(bv)
    a_is, b_is = isinstance(a, Node), isinstance(b, Node)
    if a_is and b_is:
        def rule(g, o, reps):
            ar, br = reps
            return (reduce_to_shape(rule_a(g, o, ar, br), a_shape),
                    reduce_to_shape(rule_b(g, o, ar, br), b_shape))
        return Node(out, (a, b), rule)
    if a_is:
        def rule(g, o, reps):
            return (reduce_to_shape(rule_a(g, o, reps[0], b), a_shape),)
        return Node(out, (a,), rule)

    def rule(g, o, reps):
        return (reduce_to_shape(rule_b(g, o, a, reps[0]), b_shape),)
    return Node(out, (b,), rule)


def add(a, b):
    return _binary(a, b, np.add,
                   lambda g, o, ar, br: g,
                   lambda g, o, ar, br: g)


def sub(a, b):
    return _binary(a, b, np.subtract,
                   lambda g, o, ar, br: g,
                   lambda g, o, ar, br: neg(g))


def mul(a, b):
    return _binary(a, b, np.multiply,
                   lambda g, o, ar, br: mul(g, br),
                   lambda g, o, ar, br: mul(g, ar))


def div(a, b):
    return _binary(a, b, np.divide,
                   lambda g, o, ar, br: div(g, br),
                   lambda g, o, ar, br: neg(div(mul(g, o), br)))


def neg(a):
    if isinstance(a, Node):
        return Node(np.negative(a.value), (a,), lambda g, o, p: (neg(g),))
    return np.negative(a)


def matmul(a, b):
    """Matrix product; also used as matrix @ (dim, batch) column stacks."""
    return _binary(a, b, np.matmul,
                   lambda g, o, ar, br: matmul(g, swap_last2(br)),
                   lambda g, o, ar, br: matmul(swap_last2(ar), g))


# stacked (..., n, m) products share the matmul rules
bmm = matmul


def swap_last2(a):
    if isinstance(a, Node):
        return Node(np.swapaxes(a.value, -1, -2), (a,),
                    lambda g, o, p: (swap_last2(g),))
    return np.swapaxes(np.asarray(a), -1, -2)


def permute(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    if isinstance(a, Node):
        return Node(np.transpose(a.value, axes), (a,),
                    lambda g, o, p: (permute(g, inverse),))
    return np.transpose(np.asarray(a), axes)


def reshape(a, shape):
    shape = tuple(shape)
    if isinstance(a, Node):
        src = np.shape(a.value)
        return Node(np.reshape(a.value, shape), (a,),
                    lambda g, o, p: (reshape(g, src),))
    return np.reshape(np.asarray(a), shape)


def sum_all(a):
    if isinstance(a, Node):
        src = np.shape(a.value)
        return Node(np.sum(a.value), (a,),
                    lambda g, o, p: (broadcast_to(g, src),))
    return np.sum(a)


def dot(a, b):
    return sum_all(mul(a, b))


def log(a):
    if isinstance(a, Node):
        return Node(np.log(a.value), (a,), lambda g, o, p: (div(g, p[0]),))
    return np.log(a)


def exp(a):
    if isinstance(a, Node):
        return Node(np.exp(a.value), (a,), lambda g, o, p: (mul(g, o),))
    return np.exp(a)


def tanh(a):
    if isinstance(a, Node):
        return Node(np.tanh(a.value), (a,),
                    lambda g, o, p: (mul(g, sub(1.0, mul(o, o))),))
    return np.tanh(a)


def absolute(a):
    # sign treated as locally constant; exact a.e., which gradients need
    if isinstance(a, Node):
        s = np.sign(a.value)
        return Node(np.abs(a.value), (a,), lambda g, o, p: (mul(g, s),))
    return np.abs(a)


def where_mask(mask, a, b):
    """Select by a fixed boolean mask (the mask is not differentiated)."""
    mask = np.asarray(mask, dtype=bool)
    if not _any_node(a, b):
        return np.where(mask, a, b)
    av, bv = val(a), val(b)
    out = np.where(mask, av, bv)
    fm = mask.astype(float)
    fn = 1.0 - fm
    a_shape, b_shape = np.shape(av), np.shape(bv)
    a_is, b_is = isinstance(a, Node), isinstance(b, Node)
    if a_is and b_is:
        def rule(g, o, reps):
            return (reduce_to_shape(mul(g, fm), a_shape),
                    reduce_to_shape(mul(g, fn), b_shape))
        return Node(out, (a, b), rule)
    if a_is:
        return Node(out, (a,),
                    lambda g, o, p: (reduce_to_shape(mul(g, fm), a_shape),))
    return Node(out, (b,),
                lambda g, o, p: (reduce_to_shape(mul(g, fn), b_shape),))


def tile_rows(a, reps, scale):
    """Stack ``reps`` scaled copies of the rows: (m, b) -> (reps*m, b)."""
    if isinstance(a, Node):
        return Node(np.tile(a.value * scale, (reps, 1)), (a,),
                    lambda g, o, p: (sum_row_segments(g, reps, scale),))
    return np.tile(np.asarray(a) * scale, (reps, 1))


def _fold_segments(a, reps, scale):
    """Segment sum by pairwise halving; exact for equal segments when reps
    is a power of two (keeps A^T A = I exact for such widening factors)."""
    m = a.shape[0] // reps
    stack = a.reshape(reps, m, -1)
    r = reps
    while r > 1 and r % 2 == 0:
        r //= 2
        stack = stack[:r] + stack[r:]
    if r > 1:
        stack = stack.sum(axis=0, keepdims=True)
    return stack[0] * scale


def sum_row_segments(a, reps, scale):
    """Adjoint of tile_rows: (reps*m, b) -> (m, b), scaled segment sum."""
    if isinstance(a, Node):
        out = _fold_segments(a.value, reps, scale)
        return Node(out, (a,), lambda g, o, p: (tile_rows(g, reps, scale),))
    return _fold_segments(np.asarray(a), reps, scale)


def concat_rows(a, b):
    if not _any_node(a, b):
        return np.concatenate([np.asarray(a), np.asarray(b)], axis=0)
    av, bv = np.asarray(val(a)), np.asarray(val(b))
    na, total = av.shape[0], av.shape[0] + bv.shape[0]
    out = np.concatenate([av, bv], axis=0)
    a_is, b_is = isinstance(a, Node), isinstance(b, Node)
    if a_is and b_is:
        def rule(g, o, reps):
            return (slice_rows(g, 0, na), slice_rows(g, na, total))
        return Node(out, (a, b), rule)
    if a_is:
        return Node(out, (a,), lambda g, o, p: (slice_rows(g, 0, na),))
    return Node(out, (b,), lambda g, o, p: (slice_rows(g, na, total),))


def slice_rows(a, i0, i1):
    if isinstance(a, Node):
        total = a.value.shape[0]
        return Node(a.value[i0:i1], (a,),
                    lambda g, o, p: (pad_rows(g, i0, total),))
    return np.asarray(a)[i0:i1]


def pad_rows(a, i0, total):
    if isinstance(a, Node):
        n = a.value.shape[0]
        out = np.zeros((total,) + a.value.shape[1:])
        out[i0:i0 + n] = a.value
        return Node(out, (a,), lambda g, o, p: (slice_rows(g, i0, i0 + n),))
    a = np.asarray(a)
    out = np.zeros((total,) + a.shape[1:])
    out[i0:i0 + a.shape[0]] = a
    return out


def inv(a):
    if isinstance(a, Node):
        out = np.linalg.inv(a.value)

        def rule(g, o, p):
            ot = swap_last2(o)
            return (neg(matmul(matmul(ot, g), ot)),)

        return Node(out, (a,), rule)
    return np.linalg.inv(a)


def logabsdet_stacked(a):
    """log|det| of (..., n, n); returns (...)-shaped values."""
    if isinstance(a, Node):
        _, out = np.linalg.slogdet(a.value)

        def rule(g, o, p):
            gg = reshape(g, np.shape(val(g)) + (1, 1))
            return (mul(gg, swap_last2(inv(p[0]))),)

        return Node(np.asarray(out), (a,), rule)
    _, out = np.linalg.slogdet(a)
    return np.asarray(out)


def stack_jacobian(rows):
    """rows[i] is (n, b) = d(out_i)/d(in) per column; returns (b, n, n)
    with J[s, i, :] = rows[i][:, s]."""
    if any(isinstance(r, Node) for r in rows):
        vals = [np.asarray(val(r)) for r in rows]
        out = np.stack([v.T for v in vals], axis=1)
        parents = tuple(r for r in rows if isinstance(r, Node))
        idx = [i for i, r in enumerate(rows) if isinstance(r, Node)]

        def rule(g, o, p):
            return tuple(swap_last2(slice_mid(g, i)) for i in idx)

        return Node(out, parents, rule)
    return np.stack([np.asarray(r).T for r in rows], axis=1)


def slice_mid(a, i):
    """(b, n, m) -> (b, m), picking index i on the middle axis."""
    if isinstance(a, Node):
        n = a.value.shape[1]
        return Node(a.value[:, i, :], (a,),
                    lambda g, o, p: (expand_mid(g, i, n),))
    return np.asarray(a)[:, i, :]


def expand_mid(a, i, n):
    if isinstance(a, Node):
        v = a.value
        out = np.zeros((v.shape[0], n, v.shape[1]))
        out[:, i, :] = v
        return Node(out, (a,), lambda g, o, p: (slice_mid(g, i),))
    a = np.asarray(a)
    out = np.zeros((a.shape[0], n, a.shape[1]))
    out[:, i, :] = a
    return out


def straight_through(raw_input, projected_value):
    """Projection value forward, identity backward (ablation mode)."""
    if isinstance(raw_input, Node):
        return Node(np.asarray(projected_value, dtype=float), (raw_input,),
                    lambda g, o, p: (g,))
    return np.asarray(projected_value, dtype=float)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(output, cotangent, stops=(), build_graph=False):
    """Accumulate cotangents from ``output`` down to leaves.

    ``stops`` are boundaries: their cotangent is recorded but their
    ancestors are not visited. Returns a dict keyed by ``id(node)`` for
    every visited node that received a cotangent. With ``build_graph=True``
    the cotangents are Nodes and remain differentiable.
    """
    if not isinstance(output, Node):
        raise ValueError("backward needs a Node output")
    stop_ids = {id(s) for s in stops}
    visited = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if id(node) in visited:
            continue
        visited[id(node)] = node
        if id(node) not in stop_ids:
            stack.extend(node.parents)
    order = sorted(visited.values(), key=lambda n: n.nid, reverse=True)

    grads = {id(output): cotangent}
    for node in order:
        g = grads.get(id(node))
        if g is None or node.rule is None or id(node) in stop_ids:
            continue
        if build_graph:
            out_rep, reps = node, node.parents
        else:
            out_rep = node.value
            reps = tuple(p.value for p in node.parents)
            if isinstance(g, Node):
                g = g.value
        contribs = node.rule(g, out_rep, reps)
        for parent, c in zip(node.parents, contribs):
            if c is None:
                continue
            prev = grads.get(id(parent))
            if prev is None:
                grads[id(parent)] = c
            elif build_graph:
                grads[id(parent)] = add(prev, c)
            else:
                grads[id(parent)] = np.add(val(prev), val(c))
    return grads


# ---------------------------------------------------------------------------
# tape contract
# ---------------------------------------------------------------------------

class Tape:
    """A recorded computation with a designated input and parameter leaves.

    ``params`` is an ordered list of (name, leaf Node) pairs. Completed
    tapes are immutable; replaying vjp passes does not mutate them.
    """

    JACOBIAN_DIM_GUARD = 256

    def __init__(self, input_node, output_node, params=()):
        self.input = input_node
        self.output = output_node
        self.params = list(params)


def _flatten_param_grads(tape, grads):
    parts = []
    for _, p in tape.params:
        g = grads.get(id(p))
        if g is None:
            parts.append(np.zeros(np.size(p.value)))
        else:
            parts.append(np.ravel(val(g)))
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def vjp(tape, cotangent, build_graph=False):
    """(v^T dOut/dIn, v^T dOut/dParams) for one cotangent v.

    The parameter part is a flat vector in tape.params order; parameters
    that do not influence the output get exact zeros.
    """
    cotangent = np.asarray(cotangent, dtype=float)
    if cotangent.shape != np.shape(tape.output.value):
        raise ValueError(
            f"cotangent shape {cotangent.shape} does not match output "
            f"shape {np.shape(tape.output.value)}")
    grads = backward(tape.output, cotangent, build_graph=build_graph)
    gin = grads.get(id(tape.input))
    if gin is None:
        gin = np.zeros_like(tape.input.value)
    if build_graph:
        return gin, [grads.get(id(p)) for _, p in tape.params]
    return np.asarray(val(gin)), _flatten_param_grads(tape, grads)


def jacobian(tape):
    """Dense Jacobian d(output)/d(input) from unit-cotangent vjp passes.

    Output (n,) or (n, 1) gives an (n, n) matrix; a batched (n, b) output
    gives (b, n, n). Guarded to n <= 256; larger systems belong to the
    stochastic estimator.
    """
    out_shape = np.shape(tape.output.value)
    n = out_shape[0]
    if n > Tape.JACOBIAN_DIM_GUARD:
        raise ProxflowError(
            f"jacobian guard exceeded (n={n} > {Tape.JACOBIAN_DIM_GUARD}); "
            "use the stochastic log-det estimator instead")
    rows = []
    for i in range(n):
        cot = np.zeros(out_shape)
        cot[i] = 1.0
        gin, _ = vjp(tape, cot)
        rows.append(gin)
    if len(out_shape) == 1:
        return np.stack(rows, axis=0)
    stacked = np.stack([r.T for r in rows], axis=1)
    if out_shape[1] == 1:
        return stacked[0]
    return stacked


def jacobian_rows_graph(output, input_node, n, batch):
    """Graph-mode Jacobian rows of ``output`` w.r.t. ``input_node``.

    The backward walk stops at ``input_node`` so only the segment between
    the two is traversed; the returned row Nodes stay connected to the
    upstream graph through the intermediate values their rules reference.
    """
    rows = []
    for i in range(n):
        cot = np.zeros((n, batch))
        cot[i, :] = 1.0
        grads = backward(output, cot, stops=(input_node,), build_graph=True)
        g = grads.get(id(input_node))
        if g is None:
            g = Node(np.zeros((n, batch)))
        elif not isinstance(g, Node):
            g = Node(np.asarray(g))
        if np.shape(g.value) != (n, batch):
            g = reshape(g, (n, batch))
        rows.append(g)
    return rows


def grad_of_scalar_of_jacobian(tape, scalar_fn=None):
    """Parameter gradient of a scalar of the Jacobian (default log|det J|).

    Jacobian entries are assembled as differentiable nodes via graph-mode
    vjp replay, the scalar is built on top of them, and one raw backward
    pass returns the flat parameter gradient.
    """
    out_shape = np.shape(tape.output.value)
    n = out_shape[0]
    if n > Tape.JACOBIAN_DIM_GUARD:
        raise ProxflowError(
            f"jacobian guard exceeded (n={n} > {Tape.JACOBIAN_DIM_GUARD})")
    batch = out_shape[1] if len(out_shape) > 1 else 1
    output = tape.output
    if len(out_shape) == 1:
        output = reshape(output, (n, 1))
    rows = jacobian_rows_graph(output, tape.input, n, batch)
    jac = stack_jacobian(rows)
    sign, logdet = np.linalg.slogdet(jac.value)
    if not (np.all(sign != 0) and np.all(np.isfinite(logdet))):
        raise NumericalError("singular Jacobian: log|det| is not finite")
    if scalar_fn is None:
        scalar = sum_all(logabsdet_stacked(jac))
    else:
        scalar = scalar_fn(jac)
    grads = backward(scalar, np.asarray(1.0), build_graph=False)
    return _flatten_param_grads(tape, grads)
