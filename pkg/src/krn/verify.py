"""Gradient verification: an independent analytic oracle for the shipped
tridiagonal example, central finite differences for everything else, an
AD-vs-reference comparison report, and a gradient/primal wall-clock
ratio benchmark.

Every reference here is computed without the AD transform or the
interpreter's kernels: the oracle is direct banded numpy arithmetic, and
finite differences only use the interpreter as a black-box f(x).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .adjoint import differentiate
from .analysis import activity
from .ast import desugar_function
from .runtime import (
    ExecutionConfig,
    ShapeMismatch,
    ViewStorage,
    effective_threads,
    execute,
)


def laplacian_oracle(x, b):
    """Analytic value and gradients of f(x, b) = ||A·(3x) − b||² with
    A = tridiag(−1, 2, −1).

    Returns (f, grad_x, grad_b) where grad_x = 6·Aᵀy and grad_b = −2y
    for y = A·(3x) − b.  Pure banded numpy arithmetic; shares no code
    with the interpreter or the transform.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if x.size != b.size or x.size == 0:
        raise ShapeMismatch(f"x and b must be same nonzero length, got {x.size}, {b.size}")

    def tridiag_apply(v):
        out = 2.0 * v
        out[1:] -= v[:-1]
        out[:-1] -= v[1:]
        return out

    y = tridiag_apply(3.0 * x) - b
    f = float(y @ y)
    grad_x = 6.0 * tridiag_apply(y)  # A is symmetric
    grad_b = -2.0 * y
    return f, grad_x, grad_b


# --------------------------------------------------------------------------
# Finite differences


def _call_inputs(fn, inputs: dict) -> dict:
    """Fresh copies of `inputs` keyed by parameter, wrapping raw arrays as
    named views so callers can pass plain numpy arrays or floats."""
    call = {}
    for p in fn.params:
        v = inputs[p.name]
        if isinstance(v, ViewStorage):
            call[p.name] = v.copy()
        elif p.is_view:
            call[p.name] = ViewStorage.from_values(p.name, v)
        else:
            call[p.name] = float(v)
    return call


def finite_difference_gradient(
    program,
    fn_name: str,
    inputs: dict,
    wrt,
    h: float = 1e-6,
    *,
    entries: dict | None = None,
    cfg: ExecutionConfig | None = None,
) -> dict:
    """Central differences (f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h per entry of
    each wrt view.  Every evaluation runs on fresh copies of all inputs,
    since functions may mutate their views in place.

    `entries` optionally restricts each view to a list of flat offsets;
    the result is then a 1-D array aligned with that list instead of a
    full-shape array.
    """
    cfg = cfg or ExecutionConfig()
    fn = program.function(fn_name)
    if fn is None:
        raise KeyError(f"no function named '{fn_name}'")

    def evaluate(perturb: str | None, offset: int, delta: float) -> float:
        call = _call_inputs(fn, inputs)
        if perturb is not None:
            call[perturb].flat[offset] += delta
        value = execute(program, fn_name, call, cfg).value
        if value is None:
            raise ValueError(f"'{fn_name}' returned nothing; cannot differentiate")
        return value

    out = {}
    for name in wrt:
        storage = inputs[name]
        if not isinstance(storage, (ViewStorage, np.ndarray)):
            raise ValueError(f"finite differences need a view for '{name}'")
        if not isinstance(storage, ViewStorage):
            storage = ViewStorage.from_values(name, storage)
        offsets = (
            range(storage.flat.size) if entries is None else list(entries[name])
        )
        values = np.zeros(len(offsets) if entries is not None else storage.flat.size)
        for k, i in enumerate(offsets):
            fp = evaluate(name, i, +h)
            fm = evaluate(name, i, -h)
            values[k] = (fp - fm) / (2.0 * h)
        out[name] = (
            values.reshape(storage.extents) if entries is None else values
        )
    return out


# --------------------------------------------------------------------------
# Driving the generated gradient


def ad_gradient(
    program,
    fn_name: str,
    inputs: dict,
    wrt,
    *,
    cfg: ExecutionConfig | None = None,
    seed_value: float = 1.0,
    grad_program=None,
    shadows: dict | None = None,
) -> dict:
    """Differentiate (or reuse `grad_program`), run `<fn>_grad` on fresh
    copies of `inputs` with zero-initialized shadows, and return the
    shadow buffers for the wrt views.

    Passing `shadows` (primal name -> ViewStorage) reuses those buffers
    without zeroing — that is the accumulation contract: a second run
    adds the gradient again.
    """
    wrt = tuple(wrt)
    gp = (
        grad_program
        if grad_program is not None
        else differentiate(program, fn_name, wrt, seed_value=seed_value)
    )
    fn = program.function(fn_name)
    gfn = gp.function(fn_name + "_grad")
    call = _call_inputs(fn, inputs)

    act = activity(desugar_function(fn), wrt)
    active_views = [p.name for p in fn.params if p.is_view and act.is_active(p.name)]
    shadow_params = gfn.params[len(fn.params):]
    out = {}
    for primal, sp in zip(active_views, shadow_params):
        if shadows is not None and primal in shadows:
            z = shadows[primal]
        else:
            src = inputs[primal]
            extents = src.extents if isinstance(src, ViewStorage) else np.shape(src)
            z = ViewStorage.zeros(sp.name, extents)
        call[sp.name] = z
        out[primal] = z
    execute(gp, gfn.name, call, cfg)
    return {name: out[name].buffer for name in wrt if name in out}


# --------------------------------------------------------------------------
# Comparison report


@dataclass(frozen=True)
class GradientEntry:
    index: tuple
    ad: float
    reference: float
    abs_error: float
    rel_error: float
    ok: bool


@dataclass(frozen=True)
class GradientReport:
    entries: tuple
    max_rel_error: float
    passed: bool
    atol: float
    rtol: float
    step: float | None = None

    def failures(self) -> tuple:
        return tuple(e for e in self.entries if not e.ok)


def check_gradient(
    ad, reference, atol: float = 1e-9, rtol: float = 1e-5, step: float | None = None
) -> GradientReport:
    """Entry-wise |ad − ref| ≤ atol + rtol·|ref|."""
    ad = np.asarray(ad, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if ad.shape != ref.shape:
        raise ShapeMismatch(f"gradient shapes differ: {ad.shape} vs {ref.shape}")
    entries = []
    for idx in np.ndindex(ad.shape or (1,)):
        a = float(ad[idx] if ad.shape else ad)
        r = float(ref[idx] if ref.shape else ref)
        abs_err = abs(a - r)
        ok = abs_err <= atol + rtol * abs(r)
        if abs_err == 0.0:
            rel = 0.0
        elif r != 0.0:
            rel = abs_err / abs(r)
        else:
            rel = float("inf")
        entries.append(GradientEntry(idx, a, r, abs_err, rel, ok))
    finite_rels = [e.rel_error for e in entries if np.isfinite(e.rel_error)]
    return GradientReport(
        entries=tuple(entries),
        max_rel_error=max(finite_rels, default=0.0),
        passed=all(e.ok for e in entries),
        atol=atol,
        rtol=rtol,
        step=step,
    )


# --------------------------------------------------------------------------
# Benchmark


@dataclass(frozen=True)
class BenchResult:
    n: int
    primal_s: float
    grad_s: float
    ratio: float
    threads: int
    reps: int


def bench_ratio(
    program,
    fn_name: str,
    n: int,
    cfg: ExecutionConfig | None = None,
    reps: int = 5,
    *,
    wrt=None,
) -> BenchResult:
    """Best-of-`reps` wall-clock ratio gradient/primal at problem size n.

    Each repetition runs both on identical fresh input copies (the primal
    may mutate its views).  Differentiation happens once, outside timing;
    only execution is measured.
    """
    if reps < 3:
        raise ValueError("reps must be >= 3 for a stable best-of timing")
    cfg = cfg or ExecutionConfig()
    fn = program.function(fn_name)
    if fn is None:
        raise KeyError(f"no function named '{fn_name}'")
    rng = np.random.default_rng(cfg.rng_seed)
    base: dict = {}
    for p in fn.params:
        if p.is_view:
            if p.type.rank != 1:
                raise ValueError("bench_ratio sizes rank-1 view parameters only")
            base[p.name] = ViewStorage.from_values(p.name, rng.uniform(-1.0, 1.0, n))
        else:
            base[p.name] = float(rng.uniform(-1.0, 1.0))
    if wrt is None:
        wrt = tuple(p.name for p in fn.params if p.is_view)
    gp = differentiate(program, fn_name, wrt)
    gfn = gp.function(fn_name + "_grad")
    act = activity(desugar_function(fn), tuple(wrt))
    active_views = [p.name for p in fn.params if p.is_view and act.is_active(p.name)]
    shadow_params = gfn.params[len(fn.params):]

    def fresh_primal():
        return {
            k: v.copy() if isinstance(v, ViewStorage) else v for k, v in base.items()
        }

    primal_best = grad_best = float("inf")
    for _ in range(reps):
        call = fresh_primal()
        t0 = time.perf_counter()
        execute(program, fn_name, call, cfg)
        primal_best = min(primal_best, time.perf_counter() - t0)

        call = fresh_primal()
        for primal, sp in zip(active_views, shadow_params):
            call[sp.name] = ViewStorage.zeros(sp.name, base[primal].extents)
        t0 = time.perf_counter()
        execute(gp, gfn.name, call, cfg)
        grad_best = min(grad_best, time.perf_counter() - t0)

    return BenchResult(
        n=n,
        primal_s=primal_best,
        grad_s=grad_best,
        ratio=grad_best / primal_best,
        threads=effective_threads(cfg),
        reps=reps,
    )
