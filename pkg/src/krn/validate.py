"""Static validation for kernel-language programs.

`validate` returns a list of diagnostics (empty means well-formed) and is
pure: running it twice yields the same list.  The checks pin down the
rules the rest of the pipeline assumes:

* names resolve, declaration-before-use, no shadowing anywhere;
* view access arity matches rank, extent dims are in range;
* kernel bodies hold only view assignments, guarded blocks, loop-local
  scalar lets, and atomic accumulates (no nested parallelism, no view
  declarations, no copies, no reductions, no returns);
* If conditions are pure index comparisons: view values never steer
  control flow ("active condition unsupported");
* parallel_for bounds and view-declaration extents are index expressions
  without view accesses, so iteration spaces and shapes never depend on
  view data;
* at most one return, only as the final statement, matching the declared
  return type.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

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
    DynamicExtent,
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
    SourceSpan,
    StaticExtent,
    ViewAccess,
)

RESERVED = frozenset(
    {
        "fn",
        "let",
        "if",
        "in",
        "return",
        "parallel_for",
        "parallel_sum",
        "deep_copy",
        "atomic_add",
        "view",
        "extent",
        "f64",
    }
)

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")

_CMP_OPS = frozenset({"==", "!=", "<", "<=", ">", ">="})
_BIN_OPS = frozenset({"+", "-", "*", "/"})


@dataclass(frozen=True)
class Diagnostic:
    span: SourceSpan
    message: str

    def __str__(self) -> str:
        if self.span.line:
            return f"{self.span.line}:{self.span.col}: {self.message}"
        return self.message


class _Scope:
    """Flat function scope plus (at most one) kernel-local layer.

    Bindings map name -> ("view", rank) | "scalar" | "counter".
    """

    def __init__(self):
        self.outer: dict = {}
        self.local: dict = {}

    def lookup(self, name: str):
        if name in self.local:
            return self.local[name]
        return self.outer.get(name)

    def bound(self, name: str) -> bool:
        return name in self.local or name in self.outer


class _Validator:
    def __init__(self):
        self.diags: list = []

    def error(self, span, message):
        self.diags.append(Diagnostic(span, message))

    # -- entry -------------------------------------------------------------

    def program(self, prog: Program):
        seen = set()
        for fn in prog.functions:
            if fn.name in seen:
                self.error(fn.span, f"duplicate function name '{fn.name}'")
            seen.add(fn.name)
            self.function(fn)

    def function(self, fn: FunctionDef):
        self.check_name(fn.name, fn.span, "function")
        scope = _Scope()
        for p in fn.params:
            self.check_name(p.name, p.span, "parameter")
            if scope.bound(p.name):
                self.error(p.span, f"duplicate parameter '{p.name}'")
                continue
            if p.is_view:
                self.descriptor(p.type, p.span)
                scope.outer[p.name] = ("view", p.type.rank)
            elif p.type == "f64":
                scope.outer[p.name] = "scalar"
            else:
                self.error(p.span, f"parameter '{p.name}' has unknown type {p.type!r}")

        for i, stmt in enumerate(fn.body):
            is_last = i == len(fn.body) - 1
            self.statement(stmt, scope, in_kernel=False, last_of_fn=is_last)

        has_return = fn.body and isinstance(fn.body[-1], Return)
        if fn.returns == "f64" and not has_return:
            self.error(fn.span, f"function '{fn.name}' declares -> f64 but has no return")
        if fn.returns is None and has_return:
            self.error(fn.body[-1].span, f"void function '{fn.name}' returns a value")

    def descriptor(self, d, span):
        if d.rank not in (1, 2):
            self.error(span, f"view '{d.name}' has rank {d.rank}; only 1 and 2 are supported")
        if len(d.extents) != d.rank:
            self.error(span, f"view '{d.name}' has {len(d.extents)} extents for rank {d.rank}")
        for e in d.extents:
            if isinstance(e, StaticExtent) and e.size < 1:
                self.error(span, f"view '{d.name}' has non-positive static extent {e.size}")

    def check_name(self, name, span, what):
        if not _IDENT.match(name or ""):
            self.error(span, f"invalid {what} name {name!r}")
        elif name in RESERVED:
            self.error(span, f"{what} name '{name}' is a reserved word")

    # -- statements ----------------------------------------------------------

    def statement(self, stmt, scope: _Scope, in_kernel: bool, last_of_fn: bool = False):
        if isinstance(stmt, DeclView):
            if in_kernel:
                self.error(stmt.span, "view declarations are not allowed inside parallel_for")
                return
            self.declare(scope, stmt.name, ("view", stmt.descriptor.rank), stmt.span)
            self.descriptor(stmt.descriptor, stmt.span)
            if len(stmt.dyn_args) != stmt.descriptor.dynamic_count():
                self.error(
                    stmt.span,
                    f"view '{stmt.name}' needs {stmt.descriptor.dynamic_count()} "
                    f"extent arguments, got {len(stmt.dyn_args)}",
                )
            for arg in stmt.dyn_args:
                self.index_expr(arg, scope, allow_view=False, where="view extent")
        elif isinstance(stmt, DeclScalar):
            self.declare(scope, stmt.name, "scalar", stmt.span, local=in_kernel)
            self.value_expr(stmt.init, scope)
        elif isinstance(stmt, AssignView):
            self.view_access(stmt.target, scope, writing=True)
            if stmt.op not in ("=", "+=", "-="):
                self.error(stmt.span, f"unknown assignment operator {stmt.op!r}")
            self.value_expr(stmt.rhs, scope)
        elif isinstance(stmt, AssignScalar):
            kind = scope.lookup(stmt.name)
            if kind is None:
                self.error(stmt.span, f"unknown scalar '{stmt.name}'")
            elif kind != "scalar":
                self.error(stmt.span, f"'{stmt.name}' is not a scalar")
            elif in_kernel and stmt.name not in scope.local:
                self.error(
                    stmt.span,
                    f"assignment to '{stmt.name}' inside parallel_for; only "
                    "loop-local scalars may be assigned in a kernel",
                )
            if stmt.op not in ("=", "+=", "-="):
                self.error(stmt.span, f"unknown assignment operator {stmt.op!r}")
            self.value_expr(stmt.rhs, scope)
        elif isinstance(stmt, If):
            self.condition(stmt.cond, scope)
            for s in stmt.body:
                if isinstance(s, Return):
                    self.error(s.span, "return must be the final statement of a function")
                self.statement(s, scope, in_kernel)
        elif isinstance(stmt, ParallelFor):
            if in_kernel:
                self.error(stmt.span, "nested parallel_for is not allowed")
                return
            self.index_expr(stmt.upper, scope, allow_view=False, where="parallel_for bound")
            self.declare(scope, stmt.counter, "counter", stmt.span, local=True)
            for s in stmt.body:
                if isinstance(s, (DeclView, DeepCopy, ParallelSum, ParallelSumInto, Return)):
                    self.error(
                        s.span,
                        f"{type(s).__name__} is not allowed inside parallel_for",
                    )
                    continue
                self.statement(s, scope, in_kernel=True)
            scope.local = {}
        elif isinstance(stmt, DeepCopy):
            if in_kernel:
                self.error(stmt.span, "deep_copy is not allowed inside parallel_for")
                return
            dst = scope.lookup(stmt.dst)
            if not isinstance(dst, tuple):
                self.error(stmt.span, f"deep_copy destination '{stmt.dst}' is not a view")
                dst = None
            self.copy_source(stmt, dst, scope)
        elif isinstance(stmt, ParallelSum):
            src = scope.lookup(stmt.src)
            if not isinstance(src, tuple):
                self.error(stmt.span, f"parallel_sum source '{stmt.src}' is not a view")
            kind = scope.lookup(stmt.dst)
            if kind is None:
                # Gather binds its destination when unbound.
                self.check_name(stmt.dst, stmt.span, "scalar")
                scope.outer[stmt.dst] = "scalar"
            elif kind != "scalar":
                self.error(stmt.span, f"parallel_sum destination '{stmt.dst}' is not a scalar")
        elif isinstance(stmt, ParallelSumInto):
            dst = scope.lookup(stmt.dst)
            if not isinstance(dst, tuple):
                self.error(stmt.span, f"parallel_sum destination '{stmt.dst}' is not a view")
                dst = None
            self.copy_source(stmt, dst, scope)
        elif isinstance(stmt, AtomicAdd):
            self.view_access(stmt.target, scope, writing=True)
            self.value_expr(stmt.value, scope)
        elif isinstance(stmt, Return):
            if not last_of_fn:
                self.error(stmt.span, "return must be the final statement of a function")
            self.value_expr(stmt.value, scope)
        else:
            self.error(getattr(stmt, "span", None) or SourceSpan(), f"unknown statement {type(stmt).__name__}")

    def copy_source(self, stmt, dst_kind, scope):
        """Shared src rules for deep_copy and the accumulate parallel_sum."""
        what = "deep_copy" if isinstance(stmt, DeepCopy) else "parallel_sum"
        if isinstance(stmt.src, str):
            src = scope.lookup(stmt.src)
            if not isinstance(src, tuple):
                self.error(stmt.span, f"{what} source '{stmt.src}' is not a view")
            elif isinstance(dst_kind, tuple) and src[1] != dst_kind[1]:
                self.error(
                    stmt.span,
                    f"{what} rank mismatch: '{stmt.dst}' is rank {dst_kind[1]}, "
                    f"'{stmt.src}' is rank {src[1]}",
                )
        elif isinstance(stmt.src, ScalarVar):
            if scope.lookup(stmt.src.name) != "scalar":
                self.error(stmt.span, f"{what} source '{stmt.src.name}' is not a scalar")
        elif isinstance(stmt.src, Literal):
            pass
        else:
            self.error(
                stmt.span,
                f"{what} source must be a view, a scalar variable, or a literal",
            )

    def declare(self, scope, name, kind, span, local=False):
        self.check_name(name, span, "variable")
        if scope.bound(name):
            self.error(span, f"'{name}' shadows an existing declaration")
            return
        if local:
            scope.local[name] = kind
        else:
            scope.outer[name] = kind

    # -- expressions ---------------------------------------------------------

    def condition(self, cond, scope):
        if not isinstance(cond, Compare):
            self.error(getattr(cond, "span", SourceSpan()), "if condition must be an index comparison")
            return
        if cond.op not in _CMP_OPS:
            self.error(cond.span, f"unknown comparison operator {cond.op!r}")
        for side in (cond.lhs, cond.rhs):
            self.index_expr(side, scope, allow_view=False, where="condition")

    def value_expr(self, e, scope):
        if isinstance(e, Literal):
            return
        if isinstance(e, ScalarVar):
            kind = scope.lookup(e.name)
            if kind is None:
                self.error(e.span, f"unknown scalar '{e.name}'")
            elif kind == "counter":
                self.error(e.span, f"'{e.name}' is a loop counter, not a scalar")
            elif kind != "scalar":
                self.error(e.span, f"'{e.name}' is a view; views are read with indices")
        elif isinstance(e, IndexVar):
            if scope.lookup(e.name) != "counter":
                self.error(e.span, f"'{e.name}' is not a loop counter")
        elif isinstance(e, ViewAccess):
            self.view_access(e, scope, writing=False)
        elif isinstance(e, Extent):
            self.extent(e, scope)
        elif isinstance(e, Binary):
            if e.op not in _BIN_OPS:
                self.error(e.span, f"unknown operator {e.op!r}")
            self.value_expr(e.lhs, scope)
            self.value_expr(e.rhs, scope)
        elif isinstance(e, Neg):
            self.value_expr(e.operand, scope)
        else:
            self.error(getattr(e, "span", SourceSpan()), f"{type(e).__name__} is not a value expression")

    def view_access(self, e, scope, writing):
        kind = scope.lookup(e.view)
        if not isinstance(kind, tuple):
            self.error(e.span, f"unknown view '{e.view}'")
        elif len(e.indices) != kind[1]:
            self.error(
                e.span,
                f"view '{e.view}' has rank {kind[1]} but is accessed with "
                f"{len(e.indices)} indices",
            )
        for idx in e.indices:
            self.index_expr(idx, scope, allow_view=True, where="index")

    def extent(self, e, scope):
        kind = scope.lookup(e.view)
        if not isinstance(kind, tuple):
            self.error(e.span, f"unknown view '{e.view}' in extent")
        elif not 0 <= e.dim < kind[1]:
            self.error(e.span, f"extent dimension {e.dim} out of range for rank {kind[1]}")

    def index_expr(self, e, scope, allow_view, where):
        if isinstance(e, IntLiteral):
            return
        if isinstance(e, Counter):
            kind = scope.lookup(e.name)
            if kind is None:
                self.error(e.span, f"unknown identifier '{e.name}' in {where}")
            elif kind != "counter":
                self.error(e.span, f"'{e.name}' is not a loop counter; index expressions "
                                   "hold counters, integers, and extents")
        elif isinstance(e, Extent):
            self.extent(e, scope)
        elif isinstance(e, IdxBinary):
            if e.op not in ("+", "-", "*"):
                self.error(e.span, f"unknown index operator {e.op!r}")
            if e.op == "*" and not (
                isinstance(e.lhs, IntLiteral) or isinstance(e.rhs, IntLiteral)
            ):
                self.error(e.span, "index multiplication needs an integer literal factor")
            self.index_expr(e.lhs, scope, allow_view, where)
            self.index_expr(e.rhs, scope, allow_view, where)
        elif isinstance(e, ViewAccess):
            if not allow_view:
                if where == "condition":
                    self.error(e.span, "active condition unsupported: view values may not "
                                       "appear in if conditions")
                else:
                    self.error(e.span, f"view access is not allowed in a {where}")
            self.view_access(e, scope, writing=False)
        else:
            self.error(
                getattr(e, "span", SourceSpan()),
                f"{type(e).__name__} is not an index expression",
            )


def validate(program: Program) -> list:
    """Check a program; returns diagnostics, empty when well-formed."""
    v = _Validator()
    v.program(program)
    return v.diags
