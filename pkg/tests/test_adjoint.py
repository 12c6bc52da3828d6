"""Reverse-mode transformation: structure and texture of generated gradients."""

import textwrap
import warnings

import pytest

from krn import (
    InactiveReturn,
    NonDifferentiableOp,
    NotFeasible,
    UnknownFunction,
    differentiate,
    emit,
    parse,
)
from krn.ast import (
    AssignScalar,
    AtomicAdd,
    DeclScalar,
    DeclView,
    Literal,
    ParallelFor,
    ParallelSum,
    ParallelSumInto,
    Return,
    ScalarVar,
    ViewAccess,
    walk_statements,
)

from conftest import corpus_paths, load


def grad_of(program, fn_name, wrt, **kw):
    return differentiate(program, fn_name, wrt, **kw).functions[-1]


# --------------------------------------------------------------------------
# The flagship example, frozen as emitted text


GOLDEN_LAPLACIAN_GRAD = """\
fn normRes1DLaplacianSQ_grad(x: view<f64,1>, b: view<f64,1>, _d_x: view<f64,1>, _d_b: view<f64,1>) {
    let _d_y: view<f64,1> = view("_d_y", extent(x, 0));
    let _d_y2: view<f64,1> = view("_d_y2", extent(x, 0));
    let _d_sum: f64 = 0.0;
    let y: view<f64,1> = view("y", extent(x, 0));
    let y2: view<f64,1> = view("y2", extent(x, 0));
    parallel_for j0 in 0..extent(x, 0) {
        x(j0) = 3.0 * x(j0);
    }
    parallel_for j in 0..extent(x, 0) {
        y(j) = 2.0 * x(j) - b(j);
        if (j != 0) {
            y(j) -= x(j - 1);
        }
        if (j != extent(x, 0) - 1) {
            y(j) -= x(j + 1);
        }
        y2(j) = y(j) * y(j);
    }
    sum = parallel_sum(y2);
    _d_sum += 1.0;
    parallel_sum(_d_y2, _d_sum);
    parallel_for j in 0..extent(x, 0) {
        let _r_d4: f64 = _d_y2(j);
        _d_y2(j) -= _r_d4;
        _d_y(j) += _r_d4 * y(j);
        _d_y(j) += y(j) * _r_d4;
        if (j != extent(x, 0) - 1) {
            let _r_d3: f64 = _d_y(j);
            _d_y(j) -= _r_d3;
            _d_y(j) += _r_d3;
            atomic_add(_d_x(j + 1), -_r_d3);
        }
        if (j != 0) {
            let _r_d2: f64 = _d_y(j);
            _d_y(j) -= _r_d2;
            _d_y(j) += _r_d2;
            atomic_add(_d_x(j - 1), -_r_d2);
        }
        let _r_d1: f64 = _d_y(j);
        _d_y(j) -= _r_d1;
        atomic_add(_d_x(j), 2.0 * _r_d1);
        _d_b(j) += -_r_d1;
    }
    parallel_for j0 in 0..extent(x, 0) {
        let _r_d0: f64 = _d_x(j0);
        _d_x(j0) -= _r_d0;
        _d_x(j0) += 3.0 * _r_d0;
    }
}
"""


def test_laplacian_gradient_golden_text(laplacian_program):
    grad = grad_of(laplacian_program, "normRes1DLaplacianSQ", ("x", "b"))
    assert emit(grad) == GOLDEN_LAPLACIAN_GRAD


def test_laplacian_gradient_structure(laplacian_program):
    grad = grad_of(laplacian_program, "normRes1DLaplacianSQ", ("x", "b"))
    assert grad.returns is None
    assert [p.name for p in grad.params] == ["x", "b", "_d_x", "_d_b"]
    # shadow params mirror the primal view types
    for primal, shadow in zip(grad.params[:2], grad.params[2:]):
        assert shadow.type.rank == primal.type.rank
    kernels = [s for s in grad.body if isinstance(s, ParallelFor)]
    assert len(kernels) == 4  # two forward, two reverse
    # exactly the stencil-scattered shadow is updated atomically
    atomics = [s for s in walk_statements(grad.body) if isinstance(s, AtomicAdd)]
    assert {a.target.view for a in atomics} == {"_d_x"}


def test_forward_sweep_is_verbatim(laplacian_program):
    primal = laplacian_program.functions[0]
    grad = grad_of(laplacian_program, "normRes1DLaplacianSQ", ("x", "b"))
    n_decls = sum(isinstance(s, (DeclView, DeclScalar)) for s in grad.body[:3])
    assert n_decls == 3
    forward = grad.body[3 : 3 + len(primal.body) - 1]
    assert tuple(forward) == primal.body[:-1]  # everything but the return


def test_seed_statement(laplacian_program):
    grad = grad_of(laplacian_program, "normRes1DLaplacianSQ", ("x", "b"))
    seed = next(s for s in grad.body if isinstance(s, AssignScalar))
    assert (seed.name, seed.op, seed.rhs) == ("_d_sum", "+=", Literal(1.0))


def test_seed_value_is_configurable(laplacian_program):
    grad = grad_of(
        laplacian_program, "normRes1DLaplacianSQ", ("x", "b"), seed_value=2.0
    )
    assert "    _d_sum += 2.0;" in emit(grad).splitlines()


def test_partial_wrt_drops_inactive_shadows(laplacian_program):
    grad = grad_of(laplacian_program, "normRes1DLaplacianSQ", ("b",))
    assert [p.name for p in grad.params] == ["x", "b", "_d_b"]
    # x is inactive, so its in-place scaling needs no reversal kernel
    text = emit(grad)
    assert "_d_x" not in text
    assert "atomic_add" not in text  # nothing races on _d_b alone


# --------------------------------------------------------------------------
# Statement reversal shapes


def test_offset_store_reversal():
    src = """
    fn g(x: view<f64, 1>, y: view<f64, 1>) -> f64 {
        parallel_for j1 in 0..extent(x, 0) {
            y(j1 + 1) = 2.6 * x(j1);
        }
        return parallel_sum(y);
    }
    """
    grad = grad_of(parse(src), "g", ("x",))
    reverse = [s for s in grad.body if isinstance(s, ParallelFor)][-1]
    assert [emit_stmt(s) for s in reverse.body] == [
        "let _r_d0: f64 = _d_y(j1 + 1);",
        "_d_y(j1 + 1) -= _r_d0;",
        "_d_x(j1) += 2.6 * _r_d0;",
    ]


def emit_stmt(stmt):
    """Render one statement the way `emit` lays it out, minus indentation."""
    wrapped = parse(
        "fn f(x: view<f64, 1>) -> f64 { return x(0); }"
    )  # placeholder to reuse the printer
    from krn.printer import _statement

    return "\n".join(line.strip() for line in _statement(stmt, 0))


def test_product_rule_preserves_operand_positions():
    src = """
    fn f(v: view<f64, 1>) -> f64 {
        let t: view<f64, 1> = view("t", extent(v, 0));
        parallel_for i in 0..extent(v, 0) {
            t(i) = v(i) * v(i);
        }
        return parallel_sum(t);
    }
    """
    grad = grad_of(parse(src), "f", ("v",))
    text = emit(grad)
    assert "_d_v(i) += _r_d0 * v(i);" in text
    assert "_d_v(i) += v(i) * _r_d0;" in text


def test_self_reference_accumulates_into_own_shadow():
    src = """
    fn f(v: view<f64, 1>) -> f64 {
        let t: view<f64, 1> = view("t", extent(v, 0));
        parallel_for i in 0..extent(v, 0) {
            t(i) += v(i);
            t(i) = 2.0 * t(i);
        }
        return parallel_sum(t);
    }
    """
    grad = grad_of(parse(src), "f", ("v",))
    text = emit(grad)
    # reversal of t(i) = 2.0 * t(i): zero, then scale back through the rhs
    assert "_d_t(i) += 2.0 * _r_d1;" in text
    # reversal of t(i) += v(i): the implicit self term keeps the shadow alive
    assert "_d_t(i) += _r_d0;" in text


def test_gather_reverses_to_broadcast():
    src = """
    fn h(x: view<f64, 1>) -> f64 {
        s = parallel_sum(x);
        return s;
    }
    """
    grad = grad_of(parse(src), "h", ("x",))
    (broadcast,) = [s for s in grad.body if isinstance(s, ParallelSumInto)]
    assert broadcast.dst == "_d_x"
    assert broadcast.src == ScalarVar("_d_s")


def test_deep_copy_view_to_view_reversal():
    src = """
    fn h(x: view<f64, 1>) -> f64 {
        let t: view<f64, 1> = view("t", extent(x, 0));
        deep_copy(t, x);
        return parallel_sum(t);
    }
    """
    grad = grad_of(parse(src), "h", ("x",))
    tail = emit(grad).splitlines()[-3:]
    assert [l.strip() for l in tail] == [
        "parallel_sum(_d_x, _d_t);",
        "deep_copy(_d_t, 0.0);",
        "}",
    ]


def test_deep_copy_active_scalar_fill_reversal():
    grad = grad_of(load("mean_shift"), "shiftedEnergy", ("v",))
    lines = [l.strip() for l in emit(grad).splitlines()]
    # broadcast fill from an active scalar: gather the shadow, then zero it
    gather_at = lines.index("_d_total = parallel_sum(_d_w);")
    assert lines[gather_at + 1] == "deep_copy(_d_w, 0.0);"
    # and the primal gather `total = parallel_sum(v)` reverses to a broadcast
    assert "parallel_sum(_d_v, _d_total);" in lines[gather_at:]


def test_deep_copy_inactive_source_only_zeroes():
    grad = grad_of(load("fill_scale"), "fillScale", ("v",))
    text = emit(grad)
    assert "deep_copy(_d_w, 0.0);" in text
    assert "_d_base" not in text  # constant fill contributes nothing


def test_every_primal_kernel_gets_a_reverse_kernel():
    """Reverse kernels are emitted even when they turn out empty, so the
    kernel count doubles exactly."""
    for path in corpus_paths():
        program = parse(path.read_text())
        fn = program.functions[0]
        wrt = tuple(p.name for p in fn.params if p.is_view)
        grad = grad_of(program, fn.name, wrt)
        n_primal = sum(isinstance(s, ParallelFor) for s in walk_statements(fn.body))
        n_grad = sum(isinstance(s, ParallelFor) for s in walk_statements(grad.body))
        assert n_grad == 2 * n_primal, fn.name


def test_affine_reverse_reads_no_primal_values():
    grad = grad_of(load("affine_weighted"), "weightedSum", ("v", "w"))
    seed_at = next(
        i for i, s in enumerate(grad.body) if isinstance(s, AssignScalar)
    )
    names = set()
    for stmt in walk_statements(grad.body[seed_at:]):
        for e in _value_exprs(stmt):
            _collect_reads(e, names)
    assert all(n.startswith(("_d_", "_r_")) for n in names), sorted(names)


def _value_exprs(stmt):
    from krn.ast import AssignScalar, AssignView, DeclScalar

    match stmt:
        case AssignView(rhs=rhs) | AssignScalar(rhs=rhs) | DeclScalar(init=rhs):
            return [rhs]
        case AtomicAdd(value=value):
            return [value]
        case _:
            return []


def _collect_reads(e, out):
    from krn.ast import Binary, Neg

    match e:
        case ScalarVar(name=name):
            out.add(name)
        case ViewAccess(view=view):
            out.add(view)
        case Binary(lhs=l, rhs=r):
            _collect_reads(l, out)
            _collect_reads(r, out)
        case Neg(operand=o):
            _collect_reads(o, out)


# --------------------------------------------------------------------------
# Failure and warning modes


def test_inactive_return_warns_and_emits_trivial_gradient():
    program = load("gather_indirect")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        grad = grad_of(program, "gatherSquares", ("idx",))
    assert [w.category for w in caught] == [InactiveReturn]
    assert "identically zero" in str(caught[0].message)
    # no seed, no reverse statements: just the (pointless) forward sweep
    assert not any(isinstance(s, AssignScalar) for s in grad.body)
    assert [p.name for p in grad.params] == ["x", "idx", "_d_idx"]


def test_infeasible_value_recovery_raises():
    src = """
    fn f(x: view<f64, 1>) -> f64 {
        let t: view<f64, 1> = view("t", extent(x, 0));
        parallel_for i in 0..extent(x, 0) {
            x(i) = x(i) * x(i);
            t(i) = x(i);
        }
        return parallel_sum(t);
    }
    """
    with pytest.raises(NotFeasible) as exc:
        differentiate(parse(src), "f", ("x",))
    assert [v.name for v in exc.value.violations] == ["x"]


def test_scalar_wrt_is_rejected():
    with pytest.raises(ValueError, match="scalar parameter 'c'"):
        differentiate(load("fill_scale"), "fillScale", ("c",))


def test_unknown_function_raises():
    with pytest.raises(UnknownFunction):
        differentiate(load("fill_scale"), "nope", ("v",))


def test_unknown_wrt_raises(laplacian_program):
    with pytest.raises(Exception, match="q"):
        differentiate(laplacian_program, "normRes1DLaplacianSQ", ("q",))


def test_atomic_add_in_primal_is_rejected():
    src = """
    fn f(x: view<f64, 1>, acc: view<f64, 1>) -> f64 {
        parallel_for i in 0..extent(x, 0) {
            atomic_add(acc(0), x(i) * x(i));
        }
        return acc(0);
    }
    """
    with pytest.raises(NonDifferentiableOp, match="atomic_add"):
        differentiate(parse(src), "f", ("x",))


def test_grad_name_collision_is_rejected():
    src = """
    fn f(x: view<f64, 1>) -> f64 {
        return parallel_sum(x);
    }
    fn f_grad(x: view<f64, 1>) -> f64 {
        return parallel_sum(x);
    }
    """
    with pytest.raises(ValueError, match="f_grad"):
        differentiate(parse(src), "f", ("x",))


# --------------------------------------------------------------------------
# Program-level contracts


def test_original_functions_survive_unchanged(laplacian_program):
    before = laplacian_program.functions
    result = differentiate(laplacian_program, "normRes1DLaplacianSQ", ("x", "b"))
    assert laplacian_program.functions == before
    assert result.functions[:-1] == before
    assert result.functions[-1].name == "normRes1DLaplacianSQ_grad"


def test_differentiation_is_deterministic(laplacian_program):
    a = differentiate(laplacian_program, "normRes1DLaplacianSQ", ("x", "b"))
    b = differentiate(laplacian_program, "normRes1DLaplacianSQ", ("x", "b"))
    assert a == b and emit(a) == emit(b)


@pytest.mark.parametrize("path", corpus_paths(), ids=lambda p: p.stem)
def test_generated_code_reparses(path):
    program = parse(path.read_text())
    fn = program.functions[0]
    wrt = tuple(p.name for p in fn.params if p.is_view)
    result = differentiate(program, fn.name, wrt)
    assert parse(emit(result)) == result
