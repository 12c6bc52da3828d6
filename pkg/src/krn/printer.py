"""AST -> canonical concrete syntax.

Deterministic: equal trees print identically.  Floats use shortest
round-trip formatting (`repr`), binary operators get single spaces,
minimal parentheses follow precedence and left-associativity, and blocks
indent by four spaces.  `parse(emit(p))` reproduces `p` for every
parseable program; negative literals are canonically `Literal(-x)`, not a
negation node wrapping a literal.
"""

from __future__ import annotations

from .ast import (
    AssignScalar,
    AssignView,
    AtomicAdd,
    Binary,
    Compare,
    Counter,
    DeclScalar,
    DeclView,
    DeepCopy,
    Extent,
    FunctionDef,
    IdxBinary,
    If,
    IndexVar,
    IntLiteral,
    Literal,
    Neg,
    ParallelFor,
    ParallelSum,
    ParallelSumInto,
    Program,
    Return,
    ScalarVar,
    StaticExtent,
    ViewAccess,
)

_INDENT = "    "

# precedence: additive < multiplicative < unary/atom
_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def emit(program) -> str:
    """Pretty-print a Program (or a single FunctionDef); '' for empty."""
    if isinstance(program, FunctionDef):
        return _function(program)
    return "\n".join(_function(fn) for fn in program.functions)


def _function(fn: FunctionDef) -> str:
    params = ", ".join(_param(p) for p in fn.params)
    ret = " -> f64" if fn.returns == "f64" else ""
    lines = [f"fn {fn.name}({params}){ret} {{"]
    for stmt in fn.body:
        lines.extend(_statement(stmt, 1))
    lines.append("}")
    lines.append("")
    return "\n".join(lines)


def _param(p) -> str:
    if p.is_view:
        return f"{p.name}: view<f64,{p.type.rank}>"
    return f"{p.name}: f64"


def _statement(stmt, depth: int) -> list:
    pad = _INDENT * depth
    match stmt:
        case DeclView():
            for e in stmt.descriptor.extents:
                if isinstance(e, StaticExtent):
                    raise ValueError(
                        f"view '{stmt.name}' uses a static extent, which has no "
                        "concrete syntax; use a dynamic extent argument"
                    )
            args = "".join(", " + _index(a) for a in stmt.dyn_args)
            rank = stmt.descriptor.rank
            return [
                f'{pad}let {stmt.name}: view<f64,{rank}> = view("{stmt.label}"{args});'
            ]
        case DeclScalar(name=name, init=init):
            return [f"{pad}let {name}: f64 = {_expr(init)};"]
        case AssignView(target=target, op=op, rhs=rhs):
            return [f"{pad}{_expr(target)} {op} {_expr(rhs)};"]
        case AssignScalar(name=name, op=op, rhs=rhs):
            return [f"{pad}{name} {op} {_expr(rhs)};"]
        case If(cond=cond, body=body):
            lines = [f"{pad}if ({_index(cond.lhs)} {cond.op} {_index(cond.rhs)}) {{"]
            for s in body:
                lines.extend(_statement(s, depth + 1))
            lines.append(pad + "}")
            return lines
        case ParallelFor(counter=counter, upper=upper, body=body):
            lines = [f"{pad}parallel_for {counter} in 0..{_index(upper)} {{"]
            for s in body:
                lines.extend(_statement(s, depth + 1))
            lines.append(pad + "}")
            return lines
        case DeepCopy(dst=dst, src=src):
            return [f"{pad}deep_copy({dst}, {_operand(src)});"]
        case ParallelSum(dst=dst, src=src):
            return [f"{pad}{dst} = parallel_sum({src});"]
        case ParallelSumInto(dst=dst, src=src):
            return [f"{pad}parallel_sum({dst}, {_operand(src)});"]
        case AtomicAdd(target=target, value=value):
            return [f"{pad}atomic_add({_expr(target)}, {_expr(value)});"]
        case Return(value=value):
            return [f"{pad}return {_expr(value)};"]
    raise TypeError(f"cannot print statement {type(stmt).__name__}")


def _operand(src) -> str:
    return src if isinstance(src, str) else _expr(src)


def _expr(e, parent_prec: int = 0, right: bool = False) -> str:
    match e:
        case Literal(value=v):
            return repr(v)
        case ScalarVar(name=n) | IndexVar(name=n):
            return n
        case ViewAccess(view=v, indices=idx):
            return f"{v}(" + ", ".join(_index(i) for i in idx) + ")"
        case Extent(view=v, dim=d):
            return f"extent({v}, {d})"
        case Neg(operand=u):
            return "-" + _expr(u, parent_prec=3)
        case Binary(op=op, lhs=lhs, rhs=rhs):
            prec = _PREC[op]
            s = f"{_expr(lhs, prec)} {op} {_expr(rhs, prec, right=True)}"
            if prec < parent_prec or (prec == parent_prec and right):
                return f"({s})"
            return s
    raise TypeError(f"cannot print expression {type(e).__name__}")


def _index(e, parent_prec: int = 0, right: bool = False) -> str:
    match e:
        case IntLiteral(value=v):
            return str(v)
        case Counter(name=n):
            return n
        case Extent(view=v, dim=d):
            return f"extent({v}, {d})"
        case ViewAccess(view=v, indices=idx):
            return f"{v}(" + ", ".join(_index(i) for i in idx) + ")"
        case IdxBinary(op=op, lhs=lhs, rhs=rhs):
            prec = _PREC[op]
            s = f"{_index(lhs, prec)} {op} {_index(rhs, prec, right=True)}"
            if prec < parent_prec or (prec == parent_prec and right):
                return f"({s})"
            return s
    raise TypeError(f"cannot print index expression {type(e).__name__}")
