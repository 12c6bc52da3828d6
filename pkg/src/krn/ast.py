"""AST for the kernel language.

A program is a list of functions over f64 scalars and dense row-major
views of rank 1 or 2.  Parallelism is explicit: `parallel_for` launches a
1-D iteration space, `deep_copy` and `parallel_sum` are whole-view
operations that only appear between kernels.  Kernel boundaries are the
only synchronization points.

Nodes are frozen dataclasses; child sequences are tuples, so trees are
immutable after construction and safe to share across threads.  Every
node carries a `span` that is excluded from equality, which makes `==`
structural equality (what the round-trip tests rely on).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Union


@dataclass(frozen=True)
class SourceSpan:
    """Byte offsets into the source plus 1-based line/column (0 = unknown)."""

    start: int = 0
    end: int = 0
    line: int = 0
    col: int = 0


NO_SPAN = SourceSpan()


@dataclass(frozen=True)
class Node:
    span: SourceSpan = field(default=NO_SPAN, compare=False, repr=False, kw_only=True)


def _freeze(obj, *names):
    for name in names:
        value = getattr(obj, name)
        if isinstance(value, list):
            object.__setattr__(obj, name, tuple(value))


# --------------------------------------------------------------------------
# View descriptors


@dataclass(frozen=True)
class StaticExtent:
    """Compile-time dimension size; must be >= 1."""

    size: int


@dataclass(frozen=True)
class DynamicExtent:
    """Dimension whose size is supplied at allocation or binding time."""


Extent_ = Union[StaticExtent, DynamicExtent]


@dataclass(frozen=True)
class ViewDescriptor:
    """Shape of a view: f64 elements, rank 1 or 2, row-major.

    `extents` has exactly `rank` entries.  Only dynamic extents are
    expressible in source syntax (the type carries rank alone); static
    extents exist for programmatically built descriptors.
    """

    name: str
    rank: int
    extents: tuple = ()
    element: str = "f64"

    def __post_init__(self):
        _freeze(self, "extents")
        if not self.extents:
            object.__setattr__(self, "extents", tuple(DynamicExtent() for _ in range(self.rank)))

    def dynamic_count(self) -> int:
        return sum(1 for e in self.extents if isinstance(e, DynamicExtent))


# --------------------------------------------------------------------------
# Expressions.  Two sublanguages share nodes: value expressions (f64) and
# index expressions (integers: counters, literals, extents, affine
# combinations, and view accesses used as indices).


@dataclass(frozen=True)
class Literal(Node):
    value: float


@dataclass(frozen=True)
class ScalarVar(Node):
    name: str


@dataclass(frozen=True)
class IndexVar(Node):
    """A loop counter read as an f64 value."""

    name: str


@dataclass(frozen=True)
class ViewAccess(Node):
    """`v(i)` / `v(i, j)`.  In index position this is indirect indexing."""

    view: str
    indices: tuple

    def __post_init__(self):
        _freeze(self, "indices")


@dataclass(frozen=True)
class Extent(Node):
    """`extent(v, dim)`; usable both as an index and as a value."""

    view: str
    dim: int


@dataclass(frozen=True)
class Binary(Node):
    op: str  # + - * /
    lhs: "Expr"
    rhs: "Expr"


@dataclass(frozen=True)
class Neg(Node):
    operand: "Expr"


@dataclass(frozen=True)
class Counter(Node):
    """A loop counter in index position."""

    name: str


@dataclass(frozen=True)
class IntLiteral(Node):
    value: int


@dataclass(frozen=True)
class IdxBinary(Node):
    """Affine index arithmetic: +, -, and * with an integer literal side."""

    op: str  # + - *
    lhs: "IndexExpr"
    rhs: "IndexExpr"


Expr = Union[Literal, ScalarVar, IndexVar, ViewAccess, Extent, Binary, Neg]
IndexExpr = Union[Counter, IntLiteral, Extent, IdxBinary, ViewAccess]


@dataclass(frozen=True)
class Compare(Node):
    """Index comparison used as an If condition."""

    op: str  # == != < <= > >=
    lhs: "IndexExpr"
    rhs: "IndexExpr"


# --------------------------------------------------------------------------
# Statements


@dataclass(frozen=True)
class DeclView(Node):
    """`let y: view<f64,1> = view("y", extent(x, 0));`

    `dyn_args` supplies one index expression per dynamic extent, in
    dimension order.
    """

    descriptor: ViewDescriptor
    dyn_args: tuple = ()
    label: str = ""

    def __post_init__(self):
        _freeze(self, "dyn_args")
        if not self.label:
            object.__setattr__(self, "label", self.descriptor.name)

    @property
    def name(self) -> str:
        return self.descriptor.name


@dataclass(frozen=True)
class DeclScalar(Node):
    """`let s: f64 = expr;` — also legal inside kernels (iteration-private)."""

    name: str
    init: "Expr"


@dataclass(frozen=True)
class AssignView(Node):
    target: ViewAccess
    op: str  # = += -=
    rhs: "Expr"


@dataclass(frozen=True)
class AssignScalar(Node):
    name: str
    op: str  # = += -=
    rhs: "Expr"


@dataclass(frozen=True)
class If(Node):
    cond: Compare
    body: tuple

    def __post_init__(self):
        _freeze(self, "body")


@dataclass(frozen=True)
class ParallelFor(Node):
    """`parallel_for j in 0..upper { ... }` — iterations may run in any
    order and concurrently; the loop completes before the next statement."""

    counter: str
    upper: "IndexExpr"
    body: tuple

    def __post_init__(self):
        _freeze(self, "body")


@dataclass(frozen=True)
class DeepCopy(Node):
    """`deep_copy(dst, src);` where src is a view name (elementwise copy)
    or a scalar expression (fill).  Only legal between kernels."""

    dst: str
    src: Union[str, "Expr"]


@dataclass(frozen=True)
class ParallelSum(Node):
    """Gather form `dst = parallel_sum(src);`: scalar dst += sum of view src.

    Binds dst (initialized to 0) when dst is not already a scalar in scope.
    """

    dst: str
    src: str


@dataclass(frozen=True)
class ParallelSumInto(Node):
    """Accumulate form `parallel_sum(dst, src);` with dst a view:
    src a view name -> elementwise dst += src; src a scalar expression ->
    broadcast dst(i...) += src."""

    dst: str
    src: Union[str, "Expr"]


@dataclass(frozen=True)
class AtomicAdd(Node):
    """`atomic_add(v(i), e);` — accumulation whose total effect over a
    kernel equals the sum of contributions regardless of schedule."""

    target: ViewAccess
    value: "Expr"


@dataclass(frozen=True)
class Return(Node):
    value: "Expr"


Stmt = Union[
    DeclView,
    DeclScalar,
    AssignView,
    AssignScalar,
    If,
    ParallelFor,
    DeepCopy,
    ParallelSum,
    ParallelSumInto,
    AtomicAdd,
    Return,
]


@dataclass(frozen=True)
class Param(Node):
    name: str
    type: Union[ViewDescriptor, str]  # ViewDescriptor or "f64"

    @property
    def is_view(self) -> bool:
        return isinstance(self.type, ViewDescriptor)


@dataclass(frozen=True)
class FunctionDef(Node):
    name: str
    params: tuple
    body: tuple
    returns: Union[str, None] = None  # "f64" or None (void)

    def __post_init__(self):
        _freeze(self, "params", "body")

    def param(self, name: str) -> Union[Param, None]:
        for p in self.params:
            if p.name == name:
                return p
        return None


@dataclass(frozen=True)
class Program(Node):
    functions: tuple = ()

    def __post_init__(self):
        _freeze(self, "functions")

    def function(self, name: str) -> Union[FunctionDef, None]:
        for f in self.functions:
            if f.name == name:
                return f
        return None


# --------------------------------------------------------------------------
# Small structural helpers shared by the analyses and the transformer.


def walk_statements(body) -> Iterator[Stmt]:
    """Pre-order traversal of a statement sequence, descending into If and
    ParallelFor bodies."""
    for stmt in body:
        yield stmt
        if isinstance(stmt, If):
            yield from walk_statements(stmt.body)
        elif isinstance(stmt, ParallelFor):
            yield from walk_statements(stmt.body)


def walk_expr(e) -> Iterator[Node]:
    """Pre-order traversal of an expression (value or index)."""
    yield e
    if isinstance(e, Binary):
        yield from walk_expr(e.lhs)
        yield from walk_expr(e.rhs)
    elif isinstance(e, Neg):
        yield from walk_expr(e.operand)
    elif isinstance(e, IdxBinary):
        yield from walk_expr(e.lhs)
        yield from walk_expr(e.rhs)
    elif isinstance(e, ViewAccess):
        for i in e.indices:
            yield from walk_expr(i)
    elif isinstance(e, Compare):
        yield from walk_expr(e.lhs)
        yield from walk_expr(e.rhs)


def free_counters(e) -> set:
    """Names of loop counters occurring in an index expression."""
    out = set()
    for node in walk_expr(e):
        if isinstance(node, (Counter, IndexVar)):
            out.add(node.name)
    return out


def lhs_as_expr(stmt) -> Expr:
    """The left-hand side of an assignment, read as a value."""
    if isinstance(stmt, AssignView):
        return stmt.target
    if isinstance(stmt, AssignScalar):
        return ScalarVar(stmt.name)
    raise TypeError(f"not an assignment: {type(stmt).__name__}")


def desugar_statement(stmt) -> Stmt:
    """Rewrite compound assignments (`+=`, `-=`) to plain `=` with the
    target folded into the right-hand side.  Recursive through blocks."""
    if isinstance(stmt, AssignView) and stmt.op in ("+=", "-="):
        binop = "+" if stmt.op == "+=" else "-"
        return AssignView(stmt.target, "=", Binary(binop, stmt.target, stmt.rhs), span=stmt.span)
    if isinstance(stmt, AssignScalar) and stmt.op in ("+=", "-="):
        binop = "+" if stmt.op == "+=" else "-"
        return AssignScalar(
            stmt.name, "=", Binary(binop, ScalarVar(stmt.name), stmt.rhs), span=stmt.span
        )
    if isinstance(stmt, If):
        return If(stmt.cond, tuple(desugar_statement(s) for s in stmt.body), span=stmt.span)
    if isinstance(stmt, ParallelFor):
        return ParallelFor(
            stmt.counter,
            stmt.upper,
            tuple(desugar_statement(s) for s in stmt.body),
            span=stmt.span,
        )
    return stmt


def desugar_function(fn: FunctionDef) -> FunctionDef:
    return FunctionDef(
        fn.name,
        fn.params,
        tuple(desugar_statement(s) for s in fn.body),
        fn.returns,
        span=fn.span,
    )


def fresh_name(base: str, taken) -> str:
    """`base`, or `base2`, `base3`, ... — first name not in `taken`."""
    if base not in taken:
        return base
    k = 2
    while f"{base}{k}" in taken:
        k += 1
    return f"{base}{k}"


def all_identifiers(fn: FunctionDef) -> set:
    """Every identifier bound or referenced in a function."""
    names = {p.name for p in fn.params}
    for stmt in walk_statements(fn.body):
        if isinstance(stmt, DeclView):
            names.add(stmt.name)
        elif isinstance(stmt, DeclScalar):
            names.add(stmt.name)
        elif isinstance(stmt, (ParallelSum, ParallelSumInto, DeepCopy)):
            names.add(stmt.dst)
            if isinstance(stmt.src, str):
                names.add(stmt.src)
        elif isinstance(stmt, ParallelFor):
            names.add(stmt.counter)
    for e in walk_all_exprs(fn):
        if isinstance(e, (ScalarVar, IndexVar, Counter)):
            names.add(e.name)
        elif isinstance(e, ViewAccess):
            names.add(e.view)
        elif isinstance(e, Extent):
            names.add(e.view)
    return names


def statement_exprs(stmt) -> Iterator[Node]:
    """Top-level expressions of one statement (not descending into nested
    statements of If/ParallelFor bodies)."""
    if isinstance(stmt, DeclView):
        yield from stmt.dyn_args
    elif isinstance(stmt, DeclScalar):
        yield stmt.init
    elif isinstance(stmt, AssignView):
        yield stmt.target
        yield stmt.rhs
    elif isinstance(stmt, AssignScalar):
        yield stmt.rhs
    elif isinstance(stmt, If):
        yield stmt.cond
    elif isinstance(stmt, ParallelFor):
        yield stmt.upper
    elif isinstance(stmt, DeepCopy):
        if not isinstance(stmt.src, str):
            yield stmt.src
    elif isinstance(stmt, ParallelSumInto):
        if not isinstance(stmt.src, str):
            yield stmt.src
    elif isinstance(stmt, AtomicAdd):
        yield stmt.target
        yield stmt.value
    elif isinstance(stmt, Return):
        yield stmt.value


def walk_all_exprs(fn: FunctionDef) -> Iterator[Node]:
    for stmt in walk_statements(fn.body):
        for e in statement_exprs(stmt):
            yield from walk_expr(e)
