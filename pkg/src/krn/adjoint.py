"""Reverse-mode differentiation as a source-to-source transform.

`differentiate` turns a scalar-returning function into `<name>_grad`: the
original parameters plus one shadow view per active view parameter, a body
that replays the forward computation verbatim, seeds the return value's
adjoint, and then walks the forward statements backwards emitting adjoint
accumulation for each one.  Shadows use the `_d_` prefix; per-statement
adjoint temporaries use `_r_d<k>` numbered in forward order.

The transform is value-free: it never evaluates the program.  Everything
it needs from the primal values at reverse time must still be live, which
`analysis.taping_feasibility` guarantees before any code is generated.

Accumulation contract: `<name>_grad` adds into the caller's shadow views.
Callers zero them first to obtain a pure gradient; leaving them non-zero
accumulates, and running the gradient twice doubles every entry.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

from . import partials
from .analysis import activity, race_analysis, taping_feasibility
from .ast import (
    AssignScalar,
    AssignView,
    AtomicAdd,
    DeclScalar,
    DeclView,
    DeepCopy,
    FunctionDef,
    If,
    Literal,
    Neg,
    ParallelFor,
    ParallelSum,
    ParallelSumInto,
    Param,
    Program,
    Return,
    ScalarVar,
    ViewAccess,
    all_identifiers,
    desugar_function,
    fresh_name,
    walk_statements,
)
from .partials import NonDifferentiableOp
from .validate import validate
from .parser import ValidationError


class UnknownFunction(KeyError):
    """The program has no function with the requested name."""


class NotFeasible(Exception):
    """Some primal value the reverse pass would read does not survive the
    forward pass (no in-kernel taping; values persist only across kernel
    launches)."""

    def __init__(self, violations):
        self.violations = tuple(violations)
        lines = [
            f"line {v.span.line}: value of '{v.name}' is needed by the reverse "
            f"pass but overwritten at line {v.overwrite_span.line}"
            for v in self.violations
        ]
        super().__init__("; ".join(lines) or "taping violation")


class InactiveReturn(UserWarning):
    """The return value does not depend on any wrt parameter; the gradient
    is identically zero and the emitted function is trivial."""


@dataclass
class GradientPlan:
    """Everything reverse emission needs, precomputed.

    `atomic_views` and `temp_names` are keyed by id() of statements in the
    desugared tree the reversal walks; `kernel_pairs` maps the k-th primal
    kernel to the position of its reversal among the gradient body's
    parallel_for statements.
    """

    fn_name: str
    grad_name: str
    wrt: tuple
    shadow_map: dict
    seed_target: str | None
    seed_value: float = 1.0
    kernel_pairs: dict = field(default_factory=dict)
    atomic_views: dict = field(default_factory=dict)
    temp_names: dict = field(default_factory=dict)
    active: frozenset = frozenset()
    kernel_local_shadows: dict = field(default_factory=dict)

    def shadow(self, name: str) -> str:
        return self.shadow_map[name]

    def is_active(self, name: str) -> bool:
        return name in self.shadow_map


def differentiate(program: Program, fn_name: str, wrt, *, seed_value: float = 1.0) -> Program:
    """Return `program` extended with `<fn_name>_grad`.

    Raises NotFeasible when a reversal would need a dead primal value,
    ValidationError when the input program is invalid, UnknownFunction /
    UnknownParameter for bad names, and warns InactiveReturn (emitting a
    forward-only function) when nothing in `wrt` reaches the return value.
    """
    diags = validate(program)
    if diags:
        raise ValidationError(diags)
    fn = program.function(fn_name)
    if fn is None:
        raise UnknownFunction(fn_name)
    if fn.returns != "f64":
        raise ValueError(f"'{fn_name}' does not return f64; nothing to differentiate")
    wrt = tuple(dict.fromkeys(wrt))
    for name in wrt:
        p = fn.param(name)
        if p is not None and not p.is_view:
            raise ValueError(
                f"cannot differentiate with respect to scalar parameter '{name}': "
                "scalars are passed by value, so there is no shadow to accumulate into"
            )
    grad_name = fn.name + "_grad"
    if program.function(grad_name) is not None:
        raise ValueError(f"function '{grad_name}' already exists")

    for stmt in walk_statements(fn.body):
        if isinstance(stmt, AtomicAdd):
            raise NonDifferentiableOp(
                "atomic_add is a generated accumulation primitive; "
                "differentiate the plain assignment form instead"
            )

    dfn = desugar_function(fn)
    act = activity(dfn, wrt)
    ret = dfn.body[-1]
    assert isinstance(ret, Return)

    taken = set(all_identifiers(fn))
    taken.update(f.name for f in program.functions)
    taken.add(grad_name)

    shadow_params = _shadow_params(fn, act, taken)

    if not act.stmt_active(ret):
        warnings.warn(
            InactiveReturn(
                f"'{fn_name}' returns a value independent of {set(wrt) or '{}'}; "
                "gradient is identically zero"
            )
        )
        grad = FunctionDef(
            grad_name, fn.params + tuple(shadow_params), fn.body[:-1], returns=None
        )
        return Program(program.functions + (grad,))

    verdict = taping_feasibility(dfn, act)
    if not verdict.ok:
        raise NotFeasible(verdict.violations)

    param_shadows = {
        p.name: s.name
        for p, s in zip(
            [p for p in fn.params if p.is_view and act.is_active(p.name)], shadow_params
        )
    }
    plan = _build_plan(fn, dfn, act, grad_name, wrt, seed_value, taken, param_shadows)
    body = (
        _shadow_decls(fn, dfn, plan)
        + list(fn.body[:-1])  # verbatim forward pass (return dropped: void)
        + _reverse_pass(dfn, plan)
    )
    _number_kernel_pairs(plan, body)
    grad = FunctionDef(grad_name, fn.params + tuple(shadow_params), body, returns=None)
    return Program(program.functions + (grad,))


def _shadow_params(fn: FunctionDef, act, taken: set) -> list:
    out = []
    for p in fn.params:
        if p.is_view and act.is_active(p.name):
            shadow = fresh_name("_d_" + p.name, taken)
            taken.add(shadow)
            out.append(Param(shadow, replace(p.type, name=shadow)))
    return out


def _build_plan(
    fn, dfn, act, grad_name, wrt, seed_value, taken, param_shadows
) -> GradientPlan:
    shadow_map: dict = dict(param_shadows)
    kernel_local_shadows: dict = {}

    def shadow_for(name):
        if name not in shadow_map:
            s = fresh_name("_d_" + name, taken)
            taken.add(s)
            shadow_map[name] = s
        return shadow_map[name]

    for p in fn.params:
        if not p.is_view and act.is_active(p.name):
            shadow_for(p.name)

    def bindings(body, kernel):
        for stmt in body:
            match stmt:
                case DeclView(descriptor=d) if act.is_active(d.name):
                    shadow_for(d.name)
                case DeclScalar(name=n) if act.is_active(n):
                    s = shadow_for(n)
                    if kernel is not None:
                        kernel_local_shadows.setdefault(id(kernel), []).append((n, s))
                case ParallelSum(dst=d) if act.is_active(d):
                    shadow_for(d)
                case If(body=b):
                    bindings(b, kernel)
                case ParallelFor(body=b):
                    bindings(b, stmt)
                case _:
                    pass

    bindings(dfn.body, None)

    ret = dfn.body[-1]
    seed_target = (
        shadow_map.get(ret.value.name) if isinstance(ret.value, ScalarVar) else None
    )

    temp_names: dict = {}
    counter = 0
    for stmt in walk_statements(dfn.body):
        if isinstance(stmt, (AssignView, AssignScalar, DeclScalar)):
            lhs = stmt.target.view if isinstance(stmt, AssignView) else stmt.name
            if act.stmt_active(stmt) and act.is_active(lhs):
                name = fresh_name(f"_r_d{counter}", taken)
                taken.add(name)
                temp_names[id(stmt)] = name
                counter += 1

    races = race_analysis(dfn)
    atomic_views: dict = {}
    kernel_index = 0
    for stmt in walk_statements(dfn.body):
        if isinstance(stmt, ParallelFor):
            flagged = races.flagged(kernel_index) & set(shadow_map)
            for inner in walk_statements(stmt.body):
                atomic_views[id(inner)] = frozenset(flagged)
            kernel_index += 1

    return GradientPlan(
        fn_name=fn.name,
        grad_name=grad_name,
        wrt=wrt,
        shadow_map=shadow_map,
        seed_target=seed_target,
        seed_value=seed_value,
        atomic_views=atomic_views,
        temp_names=temp_names,
        active=frozenset(shadow_map),
        kernel_local_shadows=kernel_local_shadows,
    )


def _shadow_decls(fn, dfn, plan: GradientPlan) -> list:
    """Zero-initialized shadows for active scalar params and fn-scope
    locals, mirroring each primal's shape.  Kernel-local shadows are
    declared inside their reverse kernels instead."""
    out = []
    declared = set()
    for p in fn.params:
        if not p.is_view and plan.is_active(p.name):
            out.append(DeclScalar(plan.shadow(p.name), Literal(0.0)))
            declared.add(p.name)

    def visit(body, in_kernel):
        for stmt in body:
            match stmt:
                case DeclView(descriptor=d, dyn_args=args) if plan.is_active(d.name):
                    s = plan.shadow(d.name)
                    out.append(DeclView(replace(d, name=s), args, label=s))
                case DeclScalar(name=n) if not in_kernel and plan.is_active(n):
                    if n not in declared:
                        declared.add(n)
                        out.append(DeclScalar(plan.shadow(n), Literal(0.0)))
                case ParallelSum(dst=d) if plan.is_active(d):
                    if d not in declared:
                        declared.add(d)
                        out.append(DeclScalar(plan.shadow(d), Literal(0.0)))
                case If(body=b):
                    visit(b, in_kernel)
                case ParallelFor(body=b):
                    visit(b, True)
                case _:
                    pass

    visit(dfn.body, False)
    return out


def _reverse_pass(dfn, plan: GradientPlan) -> list:
    return _reverse_body(dfn.body, plan)


def _reverse_body(stmts, plan: GradientPlan) -> list:
    out: list = []
    for stmt in reversed(stmts):
        match stmt:
            case Return(value=v):
                out.extend(_seed(v, plan))
            case ParallelFor():
                out.append(reverse_parallel_for(stmt, plan))
            case DeepCopy():
                out.extend(reverse_deep_copy(stmt, plan))
            case ParallelSum():
                rev = reverse_parallel_sum(stmt, plan)
                if rev is not None:
                    out.append(rev)
            case ParallelSumInto():
                rev = _reverse_parallel_sum_into(stmt, plan)
                if rev is not None:
                    out.append(rev)
            case If(cond=c, body=b):
                inner = _reverse_body(b, plan)
                if inner:
                    out.append(If(c, inner))
            case AssignView() | AssignScalar() | DeclScalar():
                if id(stmt) in plan.temp_names:
                    out.extend(reverse_statement(stmt, plan))
            case _:
                pass  # DeclView has no adjoint of its own
    return out


def _seed(value, plan: GradientPlan) -> list:
    """The return statement's reversal: inject the output adjoint.

    For `return s;` this is exactly `_d_s += <seed>;`; for a compound
    return expression each active operand receives its partial times the
    seed."""
    out = []
    for occ, contrib in partials.contributions(value, Literal(plan.seed_value)):
        stmts = _accumulate(occ, contrib, plan, frozenset())
        out.extend(stmts)
    return out


def reverse_statement(stmt, plan: GradientPlan) -> list:
    """Adjoint of one (desugared) assignment: capture the target's adjoint
    in a temporary, zero it (the overwrite kills the old value), then give
    every active operand occurrence its partial-derivative share."""
    temp = plan.temp_names[id(stmt)]
    atomic = plan.atomic_views.get(id(stmt), frozenset())
    if isinstance(stmt, AssignView):
        target = stmt.target
        shadow_target = ViewAccess(plan.shadow(target.view), target.indices)
        flagged = target.view in atomic
        rhs = stmt.rhs
    else:  # AssignScalar | DeclScalar
        shadow_target = plan.shadow(stmt.name)
        flagged = False
        rhs = stmt.rhs if isinstance(stmt, AssignScalar) else stmt.init

    out: list = [DeclScalar(temp, _read(shadow_target))]
    if flagged:
        out.append(AtomicAdd(shadow_target, Neg(ScalarVar(temp))))
    elif isinstance(shadow_target, ViewAccess):
        out.append(AssignView(shadow_target, "-=", ScalarVar(temp)))
    else:
        out.append(AssignScalar(shadow_target, "-=", ScalarVar(temp)))

    for occ, contrib in partials.contributions(rhs, ScalarVar(temp)):
        out.extend(_accumulate(occ, contrib, plan, atomic))
    return out


def _read(shadow_target):
    if isinstance(shadow_target, ViewAccess):
        return shadow_target
    return ScalarVar(shadow_target)


def _accumulate(occ, contrib, plan: GradientPlan, atomic: frozenset) -> list:
    match occ:
        case ViewAccess(view=v, indices=idx) if plan.is_active(v):
            target = ViewAccess(plan.shadow(v), idx)
            if v in atomic:
                return [AtomicAdd(target, contrib)]
            return [AssignView(target, "+=", contrib)]
        case ScalarVar(name=n) if plan.is_active(n):
            return [AssignScalar(plan.shadow(n), "+=", contrib)]
        case _:
            return []


def reverse_parallel_for(kernel: ParallelFor, plan: GradientPlan) -> ParallelFor:
    """Reverse kernel: same counter and range, statements reversed, If
    guards kept around their statements' reversals.  Active kernel-local
    scalars get kernel-local zero-initialized shadows up front."""
    body: list = [
        DeclScalar(shadow, Literal(0.0))
        for _, shadow in plan.kernel_local_shadows.get(id(kernel), [])
    ]

    def emit(stmts) -> list:
        out: list = []
        for stmt in reversed(stmts):
            match stmt:
                case If(cond=c, body=b):
                    inner = emit(b)
                    if inner:
                        out.append(If(c, inner))
                case AssignView() | AssignScalar() | DeclScalar():
                    if id(stmt) in plan.temp_names:
                        out.extend(reverse_statement(stmt, plan))
                case _:
                    pass
        return out

    body.extend(emit(kernel.body))
    return ParallelFor(kernel.counter, kernel.upper, body)


def reverse_deep_copy(stmt: DeepCopy, plan: GradientPlan) -> list:
    """deep_copy overwrites its destination, so the destination's shadow
    drains into the source's shadow (elementwise for a view source, a
    gather for a scalar source) and is then zeroed."""
    if not plan.is_active(stmt.dst):
        return []
    d_dst = plan.shadow(stmt.dst)
    out: list = []
    src = stmt.src
    if isinstance(src, str) and plan.is_active(src):
        out.append(ParallelSumInto(plan.shadow(src), d_dst))
    elif isinstance(src, ScalarVar) and plan.is_active(src.name):
        out.append(ParallelSum(plan.shadow(src.name), d_dst))
    out.append(DeepCopy(d_dst, Literal(0.0)))
    return out


def reverse_parallel_sum(stmt: ParallelSum, plan: GradientPlan):
    """A gather accumulates, so its reversal is a pure broadcast of the
    destination's adjoint onto the source's shadow — no zeroing."""
    if not plan.is_active(stmt.src):
        return None
    return ParallelSumInto(plan.shadow(stmt.src), ScalarVar(plan.shadow(stmt.dst)))


def _reverse_parallel_sum_into(stmt: ParallelSumInto, plan: GradientPlan):
    src = stmt.src
    if isinstance(src, str):  # elementwise dst += src reverses elementwise
        if plan.is_active(src):
            return ParallelSumInto(plan.shadow(src), plan.shadow(stmt.dst))
    elif isinstance(src, ScalarVar):  # broadcast dst += s reverses to a gather
        if plan.is_active(src.name):
            return ParallelSum(plan.shadow(src.name), plan.shadow(stmt.dst))
    return None


def _number_kernel_pairs(plan: GradientPlan, body) -> None:
    """Primal kernel k's reversal sits mirrored at the tail of the
    gradient's kernel list: with K primal kernels, pair k ↦ 2K−1−k."""
    kernels = [s for s in walk_statements(body) if isinstance(s, ParallelFor)]
    half = len(kernels) // 2
    plan.kernel_pairs.update({k: len(kernels) - 1 - k for k in range(half)})
