"""Static analyses the gradient transform relies on.

* `activity`: which views/scalars (transitively) data-depend on the
  differentiation parameters.  Flows through value positions only; index
  expressions and extents never propagate activity.
* `race_analysis`: which views need atomic shadow accumulation in each
  kernel's reversal.  Three syntactic rules over canonicalized index
  expressions; deliberately conservative (flags are a superset of the
  conflicts the runtime detector can observe).
* `taping_feasibility`: whether every primal value the reverse pass reads
  still holds its forward value after the forward pass finishes.  There
  is no tape: values are only recoverable between kernel launches, so a
  statement whose partials reference a value forbids any later overwrite
  of it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import partials, printer
from .ast import (
    AssignScalar,
    AssignView,
    AtomicAdd,
    Binary,
    DeclScalar,
    DeclView,
    DeepCopy,
    Extent,
    FunctionDef,
    IdxBinary,
    If,
    IndexVar,
    IntLiteral,
    Counter,
    Literal,
    Neg,
    ParallelFor,
    ParallelSum,
    ParallelSumInto,
    Return,
    ScalarVar,
    SourceSpan,
    ViewAccess,
    desugar_function,
    free_counters,
)


class UnknownParameter(ValueError):
    """wrt names something that is not a parameter of the function."""


# --------------------------------------------------------------------------
# Activity


@dataclass(frozen=True)
class ActivityResult:
    """Active name sets plus a per-statement flag for the analyzed tree.

    A statement is active when it writes an active variable (such writes
    must be reversed, even when the right-hand side is constant: the
    overwrite kills the old value's adjoint) or, for returns, reads one.
    """

    fn: FunctionDef
    wrt: frozenset
    active_views: frozenset
    active_scalars: frozenset
    _flags: dict = field(compare=False, repr=False, default_factory=dict)

    def is_active(self, name: str) -> bool:
        return name in self.active_views or name in self.active_scalars

    def stmt_active(self, stmt) -> bool:
        return self._flags.get(id(stmt), False)


def _value_reads(e, out: set):
    """Names read in value position (indices and extents excluded)."""
    match e:
        case Literal() | IndexVar() | Extent() | IntLiteral() | Counter():
            pass
        case ScalarVar(name=n):
            out.add(n)
        case ViewAccess(view=v):
            out.add(v)  # indices do not propagate activity
        case Binary(lhs=l, rhs=r) | IdxBinary(lhs=l, rhs=r):
            _value_reads(l, out)
            _value_reads(r, out)
        case Neg(operand=u):
            _value_reads(u, out)
    return out


def activity(fn: FunctionDef, wrt) -> ActivityResult:
    """Least fixed point of forward activity propagation from `wrt`."""
    wrt = frozenset(wrt)
    params = {p.name for p in fn.params}
    unknown = wrt - params
    if unknown:
        raise UnknownParameter(
            f"not parameters of '{fn.name}': {', '.join(sorted(unknown))}"
        )

    active: set = set(wrt)

    def reads_active(e) -> bool:
        return bool(_value_reads(e, set()) & active)

    def src_active(src) -> bool:
        if isinstance(src, str):
            return src in active
        return reads_active(src)

    changed = True
    while changed:
        changed = False

        def mark(name):
            nonlocal changed
            if name not in active:
                active.add(name)
                changed = True

        def visit(body):
            for stmt in body:
                match stmt:
                    case DeclScalar(name=n, init=init) if reads_active(init):
                        mark(n)
                    case AssignScalar(name=n, rhs=rhs) if reads_active(rhs):
                        mark(n)
                    case AssignView(target=t, rhs=rhs) if reads_active(rhs):
                        mark(t.view)
                    case AtomicAdd(target=t, value=v) if reads_active(v):
                        mark(t.view)
                    case DeepCopy(dst=d, src=s) if src_active(s):
                        mark(d)
                    case ParallelSum(dst=d, src=s) if s in active:
                        mark(d)
                    case ParallelSumInto(dst=d, src=s) if src_active(s):
                        mark(d)
                    case If(body=b) | ParallelFor(body=b):
                        visit(b)
                    case _:
                        pass

        visit(fn.body)

    views = set()
    scalars = set()
    for p in fn.params:
        if p.name in active:
            (views if p.is_view else scalars).add(p.name)
    for stmt in _walk(fn.body):
        if isinstance(stmt, DeclView) and stmt.name in active:
            views.add(stmt.name)
        elif isinstance(stmt, DeclScalar) and stmt.name in active:
            scalars.add(stmt.name)
        elif isinstance(stmt, ParallelSum) and stmt.dst in active:
            scalars.add(stmt.dst)  # gather may bind its destination

    flags: dict = {}

    def flag(body) -> bool:
        any_active = False
        for stmt in body:
            match stmt:
                case DeclView(descriptor=d):
                    on = d.name in active
                case DeclScalar(name=n) | AssignScalar(name=n):
                    on = n in active
                case AssignView(target=t) | AtomicAdd(target=t):
                    on = t.view in active
                case DeepCopy(dst=d) | ParallelSum(dst=d) | ParallelSumInto(dst=d):
                    on = d in active
                case If(body=b) | ParallelFor(body=b):
                    on = flag(b)
                case Return(value=v):
                    on = reads_active(v)
                case _:
                    on = False
            flags[id(stmt)] = on
            any_active = any_active or on
        return any_active

    flag(fn.body)
    return ActivityResult(fn, wrt, frozenset(views), frozenset(scalars), flags)


def _walk(body):
    for stmt in body:
        yield stmt
        if isinstance(stmt, (If, ParallelFor)):
            yield from _walk(stmt.body)


# --------------------------------------------------------------------------
# Index canonicalization (j + 1 and 1 + j must compare equal)


def normalize_index(e):
    """Canonical affine form: (constant, sorted((atom, coeff), ...)).

    Atoms are counters, extents, and (recursively normalized) view
    accesses used as indices.  Hashable, so tuples of these are directly
    comparable across accesses.
    """
    const, terms = _affine(e)
    items = tuple(sorted((atom, c) for atom, c in terms.items() if c != 0))
    return (const, items)


def _affine(e):
    match e:
        case IntLiteral(value=v):
            return v, {}
        case Counter(name=n):
            return 0, {("counter", n): 1}
        case Extent(view=v, dim=d):
            return 0, {("extent", v, d): 1}
        case ViewAccess(view=v, indices=idx):
            atom = ("view", v, tuple(normalize_index(i) for i in idx))
            return 0, {atom: 1}
        case IdxBinary(op="+", lhs=l, rhs=r):
            return _merge(_affine(l), _affine(r), 1)
        case IdxBinary(op="-", lhs=l, rhs=r):
            return _merge(_affine(l), _affine(r), -1)
        case IdxBinary(op="*", lhs=l, rhs=r):
            lc, lt = _affine(l)
            rc, rt = _affine(r)
            if not lt:
                return rc * lc, {a: c * lc for a, c in rt.items()}
            if not rt:
                return lc * rc, {a: c * rc for a, c in lt.items()}
            raise ValueError("index multiplication needs an integer literal factor")
    raise TypeError(f"not an index expression: {type(e).__name__}")


def _merge(lhs, rhs, sign):
    lc, lt = lhs
    rc, rt = rhs
    out = dict(lt)
    for atom, c in rt.items():
        out[atom] = out.get(atom, 0) + sign * c
    return lc + sign * rc, out


# --------------------------------------------------------------------------
# Race analysis


@dataclass(frozen=True)
class RaceFlag:
    kernel: int
    view: str
    rule: int  # 1 indirect index, 2 counter-offset reuse, 3 counter-free index
    indices: tuple  # offending index tuples, pretty-printed


@dataclass(frozen=True)
class RaceResult:
    flags: tuple

    def flagged(self, kernel: int) -> frozenset:
        return frozenset(f.view for f in self.flags if f.kernel == kernel)


def race_analysis(fn: FunctionDef) -> RaceResult:
    """Flag views whose reverse-pass shadow accumulation may collide
    across iterations of the same kernel.

    Rule 1: an access indexed by another view access (indirect indexing).
    Rule 2: one view accessed with two or more non-identical index
            expressions that each contain the loop counter (stencils).
    Rule 3: an access whose index does not mention the counter at all
            (every iteration hits the same location).
    """
    fn = desugar_function(fn)
    flags: list = []
    kernel_id = 0
    for stmt in _walk(fn.body):
        if not isinstance(stmt, ParallelFor):
            continue
        accesses = _kernel_accesses(stmt)
        by_view: dict = {}
        for acc in accesses:
            by_view.setdefault(acc["view"], []).append(acc)
        for view in sorted(by_view):
            accs = by_view[view]
            rule1 = [a for a in accs if a["indirect"]]
            if rule1:
                flags.append(RaceFlag(kernel_id, view, 1, _fmt({a["text"] for a in rule1})))
            with_counter = {a["norm"]: a["text"] for a in accs if a["has_counter"]}
            if len(with_counter) >= 2:
                flags.append(RaceFlag(kernel_id, view, 2, _fmt(set(with_counter.values()))))
            rule3 = [a for a in accs if not a["has_counter"]]
            if rule3:
                flags.append(RaceFlag(kernel_id, view, 3, _fmt({a["text"] for a in rule3})))
        kernel_id += 1
    return RaceResult(tuple(flags))


def _fmt(texts) -> tuple:
    return tuple(sorted(texts))


def _kernel_accesses(kernel: ParallelFor) -> list:
    counter = kernel.counter
    out: list = []

    def record(access: ViewAccess):
        has_counter = any(counter in free_counters(i) for i in access.indices)
        indirect = any(
            isinstance(node, ViewAccess)
            for i in access.indices
            for node in _index_nodes(i)
        )
        out.append(
            {
                "view": access.view,
                "norm": tuple(normalize_index(i) for i in access.indices),
                "text": "(" + ", ".join(printer._index(i) for i in access.indices) + ")",
                "has_counter": has_counter,
                "indirect": indirect,
            }
        )
        # inner accesses (indices of indices) are reads in their own right
        for i in access.indices:
            for node in _index_nodes(i):
                if isinstance(node, ViewAccess):
                    record(node)

    def scan_expr(e):
        match e:
            case ViewAccess():
                record(e)
            case Binary(lhs=l, rhs=r):
                scan_expr(l)
                scan_expr(r)
            case Neg(operand=u):
                scan_expr(u)
            case _:
                pass

    def scan(body):
        for stmt in body:
            match stmt:
                case AssignView(target=t, rhs=rhs):
                    record(t)
                    scan_expr(rhs)
                case AtomicAdd(target=t, value=v):
                    record(t)
                    scan_expr(v)
                case DeclScalar(init=init):
                    scan_expr(init)
                case AssignScalar(rhs=rhs):
                    scan_expr(rhs)
                case If(body=b):
                    scan(b)
                case _:
                    pass

    scan(kernel.body)
    return out


def _index_nodes(e):
    yield e
    match e:
        case IdxBinary(lhs=l, rhs=r):
            yield from _index_nodes(l)
            yield from _index_nodes(r)
        case ViewAccess(indices=idx):
            for i in idx:
                yield from _index_nodes(i)
        case _:
            pass


# --------------------------------------------------------------------------
# Taping feasibility


@dataclass(frozen=True)
class TapingViolation:
    span: SourceSpan  # the statement whose reversal needs the value
    name: str  # the view/scalar that gets clobbered
    overwrite_span: SourceSpan  # where the clobber happens


@dataclass(frozen=True)
class TapingVerdict:
    ok: bool
    violations: tuple


def taping_feasibility(fn: FunctionDef, act: ActivityResult) -> TapingVerdict:
    """A statement whose reversal reads primal values (non-affine rhs, or
    indices the reverse pass re-evaluates) requires those values to
    survive the rest of the forward pass unmodified."""
    fn = desugar_function(fn)
    active = set(act.active_views) | set(act.active_scalars)

    def occ_active(occ) -> bool:
        name = occ.view if isinstance(occ, ViewAccess) else occ.name
        return name in active

    events: list = []  # (seq, kind, payload)
    kernel_locals: dict = {}  # name -> decl span, for locals confined to a kernel
    seq = 0

    def index_views(target_or_expr, needed: set, only_active: bool):
        """Views read in index position; the reverse pass re-evaluates them."""
        match target_or_expr:
            case ViewAccess(view=v, indices=idx):
                if not only_active or v in active:
                    for i in idx:
                        for node in _index_nodes(i):
                            if isinstance(node, ViewAccess):
                                needed.add(node.view)
            case Binary(lhs=l, rhs=r):
                index_views(l, needed, only_active)
                index_views(r, needed, only_active)
            case Neg(operand=u):
                index_views(u, needed, only_active)
            case _:
                pass

    def add_write(name, span):
        events.append((seq, "write", name, span))

    def add_need(rhs, target, span, lhs_name):
        if lhs_name not in active:
            return  # statement is never reversed
        needed = partials.needed_primal_names(rhs, occ_active)
        if isinstance(target, ViewAccess):
            index_views(target, needed, only_active=False)
        index_views(rhs, needed, only_active=True)
        if needed:
            events.append((seq, "need", frozenset(needed), span))

    def visit(body, in_kernel: bool):
        nonlocal seq
        for stmt in body:
            seq += 1
            match stmt:
                case AssignView(target=t, rhs=rhs):
                    add_need(rhs, t, stmt.span, t.view)
                    add_write(t.view, stmt.span)
                case AssignScalar(name=n, rhs=rhs):
                    add_need(rhs, None, stmt.span, n)
                    add_write(n, stmt.span)
                case DeclScalar(name=n, init=init):
                    add_need(init, None, stmt.span, n)
                    add_write(n, stmt.span)
                    if in_kernel:
                        kernel_locals[n] = stmt.span
                case AtomicAdd(target=t):
                    add_write(t.view, stmt.span)
                case DeepCopy(dst=d) | ParallelSum(dst=d) | ParallelSumInto(dst=d):
                    add_write(d, stmt.span)
                case If(body=b):
                    visit(b, in_kernel)
                case ParallelFor(body=b):
                    visit(b, True)
                case _:
                    pass

    visit(fn.body, False)

    needs = [e for e in events if e[1] == "need"]
    writes = [e for e in events if e[1] == "write"]
    violations: list = []
    for nseq, _, needed, nspan in needs:
        for name in sorted(needed):
            if name in kernel_locals:
                # A kernel-local's value dies when the kernel ends; it can
                # never be replayed to the reverse pass.
                violations.append(TapingViolation(nspan, name, kernel_locals[name]))
                continue
            for wseq, _, wname, wspan in writes:
                if wseq >= nseq and wname == name:
                    violations.append(TapingViolation(nspan, name, wspan))
                    break  # first clobber per name is enough
    return TapingVerdict(not violations, tuple(violations))
