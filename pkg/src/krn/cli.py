"""Command-line driver: differentiate, run, verify, analyze, benchmark.

Exit codes: 0 success, 1 verification/feasibility failure, 2 usage or
parse errors.
"""

from __future__ import annotations

import argparse
import sys
import warnings

import numpy as np

from .adjoint import NotFeasible, UnknownFunction, differentiate
from .analysis import UnknownParameter, race_analysis
from .parser import ParseError, ValidationError, parse
from .partials import NonDifferentiableOp
from .printer import emit
from .runtime import (
    ExecutionConfig,
    NonFiniteDetected,
    OutOfBounds,
    ShapeMismatch,
    ViewStorage,
    execute,
    load_tensor,
    save_tensor,
)
from .verify import (
    ad_gradient,
    bench_ratio,
    check_gradient,
    finite_difference_gradient,
    laplacian_oracle,
)

_ORACLE_FN = "normRes1DLaplacianSQ"


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    try:
        return args.handler(args)
    except (ParseError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except UnknownFunction as e:
        print(f"error: unknown function {e.args[0]!r}", file=sys.stderr)
        return 2
    except UnknownParameter as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NotFeasible as e:
        print(f"error: cannot differentiate: {e}", file=sys.stderr)
        return 1
    except NonDifferentiableOp as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OutOfBounds, NonFiniteDetected, ShapeMismatch) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def _parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="krn",
        description="Kernel-language compiler: reverse-mode AD, execution, verification.",
    )
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("diff", help="emit a program augmented with <fn>_grad")
    p.add_argument("input")
    p.add_argument("--fn", required=True)
    p.add_argument("--wrt", required=True, help="comma-separated parameter names")
    p.add_argument("-o", "--output", help="write to file instead of stdout")
    p.set_defaults(handler=_cmd_diff)

    p = sub.add_parser("run", help="execute a function on tensor-file inputs")
    p.add_argument("input")
    p.add_argument("--fn", required=True)
    p.add_argument("--input", dest="tensors", action="append", default=[],
                   metavar="NAME=PATH", help="bind a view parameter to a tensor file")
    p.add_argument("--scalar", dest="scalars", action="append", default=[],
                   metavar="NAME=VALUE", help="bind a scalar parameter")
    p.add_argument("--save", dest="saves", action="append", default=[],
                   metavar="NAME=PATH", help="write a view (after execution) to a file")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--check-finite", action="store_true")
    p.set_defaults(handler=_cmd_run)

    p = sub.add_parser("grad-check", help="compare AD against finite differences")
    p.add_argument("input")
    p.add_argument("--fn", required=True)
    p.add_argument("--wrt", required=True)
    p.add_argument("--n", type=int, default=8, help="extent for generated inputs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fd-samples", type=int, default=24,
                   help="max finite-difference probes per view")
    p.add_argument("--atol", type=float, default=1e-9)
    p.add_argument("--rtol", type=float, default=1e-5)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(handler=_cmd_grad_check)

    p = sub.add_parser("race-report", help="print per-kernel race flags")
    p.add_argument("input")
    p.add_argument("--fn", help="restrict to one function")
    p.set_defaults(handler=_cmd_race_report)

    p = sub.add_parser("bench", help="gradient/primal wall-clock ratio (CSV)")
    p.add_argument("input")
    p.add_argument("--fn", required=True)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--threads", type=int, default=4)
    p.add_argument("--wrt", help="defaults to all view parameters")
    p.set_defaults(handler=_cmd_bench)

    return top


def _load(path: str):
    with open(path, "r", encoding="utf-8") as f:
        return parse(f.read())


def _wrt_list(raw: str) -> list:
    return [w.strip() for w in raw.split(",") if w.strip()]


def _pairs(items, what: str):
    out = {}
    for item in items:
        name, sep, value = item.partition("=")
        if not sep or not name:
            raise ValueError(f"malformed {what} binding {item!r}; expected NAME=VALUE")
        out[name] = value
    return out


def _cmd_diff(args) -> int:
    program = _load(args.input)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = differentiate(program, args.fn, _wrt_list(args.wrt))
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    text = emit(result)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_run(args) -> int:
    program = _load(args.input)
    fn = program.function(args.fn)
    if fn is None:
        raise UnknownFunction(args.fn)
    tensor_paths = _pairs(args.tensors, "--input")
    scalar_values = _pairs(args.scalars, "--scalar")
    inputs: dict = {}
    for p in fn.params:
        if p.is_view:
            if p.name not in tensor_paths:
                raise ValueError(f"missing --input {p.name}=PATH for view parameter")
            inputs[p.name] = load_tensor(tensor_paths[p.name], p.name)
        else:
            if p.name not in scalar_values:
                raise ValueError(f"missing --scalar {p.name}=VALUE for scalar parameter")
            inputs[p.name] = float(scalar_values[p.name])
    cfg = ExecutionConfig(threads=args.threads, check_finite=args.check_finite)
    result = execute(program, args.fn, inputs, cfg)
    if result.value is not None:
        print(f"return {result.value!r}")
    for name, path in _pairs(args.saves, "--save").items():
        if name not in inputs or not isinstance(inputs[name], ViewStorage):
            raise ValueError(f"--save {name}: not a view parameter")
        save_tensor(path, inputs[name])
    return 0


def _random_inputs(fn, n: int, rng) -> dict:
    inputs: dict = {}
    for p in fn.params:
        if p.is_view:
            shape = (n,) if p.type.rank == 1 else (n, 3)
            inputs[p.name] = ViewStorage.from_values(p.name, rng.uniform(-1.0, 1.0, shape))
        else:
            inputs[p.name] = float(rng.uniform(-1.0, 1.0))
    return inputs


def _cmd_grad_check(args) -> int:
    program = _load(args.input)
    fn = program.function(args.fn)
    if fn is None:
        raise UnknownFunction(args.fn)
    wrt = _wrt_list(args.wrt)
    rng = np.random.default_rng(args.seed)
    inputs = _random_inputs(fn, args.n, rng)
    cfg = ExecutionConfig(threads=args.threads)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        grad_program = differentiate(program, args.fn, wrt)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)

    ad = ad_gradient(program, args.fn, inputs, wrt, cfg=cfg, grad_program=grad_program)
    ok = True
    for name in wrt:
        total = inputs[name].flat.size
        if total <= args.fd_samples:
            offsets = list(range(total))
        else:
            offsets = sorted(rng.choice(total, size=args.fd_samples, replace=False))
        fd = finite_difference_gradient(
            program, args.fn, inputs, [name], h=args.step,
            entries={name: offsets}, cfg=cfg,
        )[name]
        report = check_gradient(
            ad[name].reshape(-1)[offsets], fd, args.atol, args.rtol, step=args.step
        )
        ok &= report.passed
        print(f"wrt {name}: {len(offsets)} of {total} entries vs finite differences")
        print(f"{'offset':>8} {'ad':>24} {'reference':>24} {'rel_err':>12}")
        for off, e in zip(offsets, report.entries):
            print(
                f"{off:>8} {e.ad:>24.16g} {e.reference:>24.16g} {e.rel_error:>12.3e}"
                + ("" if e.ok else "  FAIL")
            )
        print(f"{'PASS' if report.passed else 'FAIL'} max_rel_error={report.max_rel_error:.3e}")

    if args.fn == _ORACLE_FN and len(ad) == 2 and {"x", "b"} <= set(ad):
        _, gx, gb = laplacian_oracle(inputs["x"].buffer, inputs["b"].buffer)
        for name, ref in (("x", gx), ("b", gb)):
            report = check_gradient(ad[name], ref, atol=0.0, rtol=1e-12)
            ok &= report.passed
            print(
                f"wrt {name}: analytic oracle "
                f"{'PASS' if report.passed else 'FAIL'} "
                f"max_rel_error={report.max_rel_error:.3e}"
            )
    return 0 if ok else 1


def _cmd_race_report(args) -> int:
    program = _load(args.input)
    functions = program.functions
    if args.fn:
        fn = program.function(args.fn)
        if fn is None:
            raise UnknownFunction(args.fn)
        functions = (fn,)
    for fn in functions:
        if len(functions) > 1:
            print(f"fn {fn.name}:")
        for flag in race_analysis(fn).flags:
            print(
                f"kernel#{flag.kernel} view={flag.view} rule={flag.rule} "
                f"indices=[{', '.join(flag.indices)}]"
            )
    return 0


def _cmd_bench(args) -> int:
    program = _load(args.input)
    cfg = ExecutionConfig(threads=args.threads)
    wrt = _wrt_list(args.wrt) if args.wrt else None
    result = bench_ratio(program, args.fn, args.n, cfg, args.reps, wrt=wrt)
    print("n,threads,primal_s,grad_s,ratio")
    print(
        f"{result.n},{result.threads},{result.primal_s:.6f},"
        f"{result.grad_s:.6f},{result.ratio:.3f}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
