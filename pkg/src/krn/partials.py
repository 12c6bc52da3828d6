"""Symbolic partial derivatives of right-hand sides.

`contributions(rhs, adj)` yields, for every differentiable leaf occurrence
(scalar variable or view access, left to right), the expression that the
reverse pass accumulates into that leaf's shadow: `adj` scaled by the
partial derivative of `rhs` with respect to that occurrence.  The adjoint
factor keeps the occurrence's position (for `u * v` the left factor gets
`adj * v`, the right gets `u * adj`), so emitted code reads like the
hand-derived form.

The taping feasibility check uses the same machinery: the primal values a
statement's reversal needs are exactly the names appearing in these
contribution expressions.
"""

from __future__ import annotations

from .ast import (
    Binary,
    Extent,
    IndexVar,
    Literal,
    Neg,
    ScalarVar,
    ViewAccess,
    walk_expr,
)


class NonDifferentiableOp(Exception):
    """An operation with no derivative rule."""


def contributions(rhs, adj) -> list:
    """[(occurrence, contribution expression)] for each value leaf of rhs.

    Occurrences are the ScalarVar / ViewAccess nodes themselves, in
    left-to-right order.  Loop counters, extents, and literals have zero
    derivative and yield nothing.
    """
    out: list = []
    _collect(rhs, adj, out)
    return out


def _collect(e, adj, out):
    match e:
        case Literal() | IndexVar() | Extent():
            pass
        case ScalarVar() | ViewAccess():
            out.append((e, adj))
        case Neg(operand=u):
            _collect(u, Neg(adj), out)
        case Binary(op="+", lhs=u, rhs=v):
            _collect(u, adj, out)
            _collect(v, adj, out)
        case Binary(op="-", lhs=u, rhs=v):
            _collect(u, adj, out)
            _collect(v, Neg(adj), out)
        case Binary(op="*", lhs=u, rhs=v):
            _collect(u, Binary("*", adj, v), out)
            _collect(v, Binary("*", u, adj), out)
        case Binary(op="/", lhs=u, rhs=v):
            _collect(u, Binary("/", adj, v), out)
            _collect(v, Neg(Binary("/", Binary("*", u, adj), Binary("*", v, v))), out)
        case Binary(op=op):
            raise NonDifferentiableOp(f"no derivative rule for operator {op!r}")
        case _:
            raise NonDifferentiableOp(f"no derivative rule for {type(e).__name__}")


_MARKER = "__adj__"


def needed_primal_names(rhs, occ_is_active) -> set:
    """Views and scalars whose primal values the reversal of `rhs` reads.

    Only contributions for occurrences selected by `occ_is_active` count
    (inactive leaves produce no reverse statement).  An affine rhs needs
    nothing; that is the definition of affine the pipeline uses.
    """
    marker = ScalarVar(_MARKER)
    needed: set = set()
    for occ, contrib in contributions(rhs, marker):
        if not occ_is_active(occ):
            continue
        for node in walk_expr(contrib):
            if isinstance(node, ScalarVar) and node.name != _MARKER:
                needed.add(node.name)
            elif isinstance(node, ViewAccess):
                needed.add(node.view)
    return needed
