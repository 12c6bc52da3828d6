"""Executable semantics for kernel-language programs.

Views are shared float64 numpy buffers with reference semantics: callers
see every in-place mutation, matching the aliasing behavior the language
models.  Statements compile once per call into Python closures over a
small execution context; parallel_for launches partition the iteration
range into contiguous chunks over a thread pool.

Two properties the rest of the project leans on:

* Atomic adds are buffered per kernel and applied after the kernel's
  sync point in (iteration, program-order) order.  The total effect is
  the exact sum of contributions AND is bit-identical for any thread
  count, which makes generated gradients schedule-independent.
* parallel_sum gathers reduce via a fixed pairwise tree over the element
  index (padding odd levels with 0.0), again independent of threading.

The conflict detector replays kernels sequentially in a seeded random
iteration order while logging per-iteration accesses, so its reports are
complete and reproducible rather than schedule-dependent.
"""

from __future__ import annotations

import os
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

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
    ViewDescriptor,
)


class ShapeMismatch(ValueError):
    pass


class OutOfBounds(IndexError):
    pass


class NonFiniteDetected(ArithmeticError):
    pass


class ViewStorage:
    """A rank-1 or rank-2 float64 buffer with reference semantics."""

    __slots__ = ("descriptor", "buffer", "flat")

    def __init__(self, descriptor: ViewDescriptor, buffer: np.ndarray):
        if buffer.dtype != np.float64 or not buffer.flags.c_contiguous:
            buffer = np.ascontiguousarray(buffer, dtype=np.float64)
        if buffer.ndim != descriptor.rank:
            raise ShapeMismatch(
                f"view '{descriptor.name}': rank {descriptor.rank} descriptor, "
                f"rank {buffer.ndim} data"
            )
        self.descriptor = descriptor
        self.buffer = buffer
        self.flat = buffer.reshape(-1)

    @property
    def extents(self) -> tuple:
        return self.buffer.shape

    @property
    def name(self) -> str:
        return self.descriptor.name

    @classmethod
    def zeros(cls, name: str, extents) -> "ViewStorage":
        extents = tuple(int(e) for e in extents)
        desc = ViewDescriptor(name, rank=len(extents))
        return cls(desc, np.zeros(extents, dtype=np.float64))

    @classmethod
    def from_values(cls, name: str, values) -> "ViewStorage":
        arr = np.array(values, dtype=np.float64, order="C")
        desc = ViewDescriptor(name, rank=arr.ndim)
        return cls(desc, arr)

    def copy(self) -> "ViewStorage":
        return ViewStorage(self.descriptor, self.buffer.copy())

    def __repr__(self) -> str:
        return f"ViewStorage({self.name!r}, shape={self.buffer.shape})"


@dataclass
class ExecutionConfig:
    threads: int = 1
    deterministic_reduction: bool = True
    conflict_detect: bool = False
    rng_seed: int = 0
    check_finite: bool = False

    def __post_init__(self):
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


def effective_threads(cfg: ExecutionConfig) -> int:
    env = os.environ.get("KRN_THREADS")
    if env:
        return max(1, int(env))
    return cfg.threads


@dataclass(frozen=True)
class ConflictRecord:
    kernel: int
    view: str
    offset: int
    iterations: tuple
    kinds: tuple


@dataclass(frozen=True)
class ConflictReport:
    records: tuple = ()

    def __bool__(self) -> bool:
        return bool(self.records)

    def write_write(self) -> tuple:
        """Records where a plain write races another access (all records
        satisfy this by construction; the filter guards future kinds)."""
        return tuple(r for r in self.records if "write" in r.kinds)


@dataclass
class ExecResult:
    value: float | None
    conflicts: ConflictReport | None = None


def pairwise_sum(values: np.ndarray) -> float:
    """Fixed-tree reduction: fold adjacent pairs until one value remains.
    The tree shape depends only on the element count, so the result is
    identical no matter how kernel iterations were scheduled."""
    a = np.asarray(values, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    while a.size > 1:
        if a.size % 2:
            a = np.append(a, 0.0)
        a = a[0::2] + a[1::2]
    return float(a[0])


# --------------------------------------------------------------------------
# Compilation: AST -> closures over a per-thread context


class _Ctx:
    __slots__ = ("views", "scalars", "local", "pending", "iter_id", "seq", "tracer")

    def __init__(self, views, scalars, pending=None, tracer=None):
        self.views = views
        self.scalars = scalars
        self.local: dict = {}
        self.pending = pending
        self.iter_id = -1
        self.seq = 0
        self.tracer = tracer


class _Tracer:
    """Access log for one kernel launch: (view, offset) -> iteration -> kinds."""

    __slots__ = ("log",)

    def __init__(self):
        self.log: dict = {}

    def record(self, view: str, offset: int, iter_id: int, kind: str):
        self.log.setdefault((view, offset), {}).setdefault(iter_id, set()).add(kind)

    def conflicts(self, kernel: int) -> list:
        """One record per location touched by >= 2 distinct iterations
        with at least one plain (non-atomic) write among the accesses.
        Atomic-only and read-only sharing is safe by construction."""
        out = []
        for (view, offset), by_iter in sorted(self.log.items()):
            if len(by_iter) < 2:
                continue
            if not any("write" in ks for ks in by_iter.values()):
                continue
            out.append(
                ConflictRecord(
                    kernel,
                    view,
                    offset,
                    tuple(sorted(by_iter)),
                    tuple(sorted({k for ks in by_iter.values() for k in ks})),
                )
            )
        return out


class _Compiler:
    def __init__(self, fn: FunctionDef):
        self.fn = fn

    # -- value expressions ------------------------------------------------

    def expr(self, e, local: frozenset):
        match e:
            case Literal(value=v):
                return lambda ctx: v
            case ScalarVar(name=n):
                if n in local:
                    return lambda ctx: ctx.local[n]
                return lambda ctx: ctx.scalars[n]
            case IndexVar(name=n):
                return lambda ctx: float(ctx.local[n])
            case ViewAccess():
                read = self.access(e, local)
                return lambda ctx: read(ctx)[1]
            case Extent(view=v, dim=d):
                return lambda ctx: float(ctx.views[v].extents[d])
            case Binary(op=op, lhs=l, rhs=r):
                lf, rf = self.expr(l, local), self.expr(r, local)
                match op:
                    case "+":
                        return lambda ctx: lf(ctx) + rf(ctx)
                    case "-":
                        return lambda ctx: lf(ctx) - rf(ctx)
                    case "*":
                        return lambda ctx: lf(ctx) * rf(ctx)
                    case "/":
                        # IEEE division regardless of operand provenance:
                        # Python floats raise on /0 while np.float64 do not.
                        def div(ctx, lf=lf, rf=rf):
                            n, d = lf(ctx), rf(ctx)
                            try:
                                return n / d
                            except ZeroDivisionError:
                                return float(np.float64(n) / np.float64(d))

                        return div
            case Neg(operand=u):
                uf = self.expr(u, local)
                return lambda ctx: -uf(ctx)
        raise TypeError(f"cannot compile {type(e).__name__}")

    def access(self, e: ViewAccess, local: frozenset):
        """Returns ctx -> (offset, value), tracing reads when instrumented."""
        name = e.view
        offset = self.offset(e, local)

        def read(ctx):
            storage = ctx.views[name]
            off = offset(ctx, storage)
            if ctx.tracer is not None:
                ctx.tracer.record(name, off, ctx.iter_id, "read")
            return off, storage.flat[off]

        return read

    def offset(self, e: ViewAccess, local: frozenset):
        """ctx, storage -> bounds-checked linear offset."""
        name = e.view
        idx = [self.index(i, local) for i in e.indices]
        span = e.span

        if len(idx) == 1:
            i0 = idx[0]

            def off1(ctx, storage):
                i = i0(ctx)
                n0 = storage.extents[0]
                if not 0 <= i < n0:
                    raise OutOfBounds(
                        f"line {span.line}: {name}({i}) outside extent {n0}"
                    )
                return i

            return off1

        i0, i1 = idx

        def off2(ctx, storage):
            a, b = i0(ctx), i1(ctx)
            n0, n1 = storage.extents
            if not (0 <= a < n0 and 0 <= b < n1):
                raise OutOfBounds(
                    f"line {span.line}: {name}({a}, {b}) outside extents {n0}x{n1}"
                )
            return a * n1 + b

        return off2

    # -- index expressions (integer-valued) -------------------------------

    def index(self, e, local: frozenset):
        match e:
            case IntLiteral(value=v):
                return lambda ctx: v
            case Counter(name=n):
                return lambda ctx: ctx.local[n]
            case Extent(view=v, dim=d):
                return lambda ctx: ctx.views[v].extents[d]
            case ViewAccess():
                read = self.access(e, local)
                return lambda ctx: int(read(ctx)[1])
            case IdxBinary(op=op, lhs=l, rhs=r):
                lf, rf = self.index(l, local), self.index(r, local)
                match op:
                    case "+":
                        return lambda ctx: lf(ctx) + rf(ctx)
                    case "-":
                        return lambda ctx: lf(ctx) - rf(ctx)
                    case "*":
                        return lambda ctx: lf(ctx) * rf(ctx)
        raise TypeError(f"cannot compile index {type(e).__name__}")

    def compare(self, c: Compare, local: frozenset):
        lf, rf = self.index(c.lhs, local), self.index(c.rhs, local)
        match c.op:
            case "==":
                return lambda ctx: lf(ctx) == rf(ctx)
            case "!=":
                return lambda ctx: lf(ctx) != rf(ctx)
            case "<":
                return lambda ctx: lf(ctx) < rf(ctx)
            case "<=":
                return lambda ctx: lf(ctx) <= rf(ctx)
            case ">":
                return lambda ctx: lf(ctx) > rf(ctx)
            case ">=":
                return lambda ctx: lf(ctx) >= rf(ctx)
        raise TypeError(c.op)

    # -- statements --------------------------------------------------------

    def kernel_body(self, stmts, local: frozenset):
        return [self.kernel_stmt(s, local) for s in stmts]

    def kernel_stmt(self, stmt, local: frozenset):
        match stmt:
            case DeclScalar(name=n, init=init):
                vf = self.expr(init, local)

                def decl(ctx):
                    ctx.local[n] = vf(ctx)

                return decl
            case AssignScalar(name=n, op=op, rhs=rhs):
                vf = self.expr(rhs, local)
                if op == "=":
                    def set_(ctx):
                        ctx.local[n] = vf(ctx)
                    return set_
                if op == "+=":
                    def add_(ctx):
                        ctx.local[n] += vf(ctx)
                    return add_

                def sub_(ctx):
                    ctx.local[n] -= vf(ctx)

                return sub_
            case AssignView(target=t, op=op, rhs=rhs):
                return self.view_write(t, op, rhs, local)
            case AtomicAdd(target=t, value=v):
                return self.atomic(t, v, local)
            case If(cond=c, body=b):
                cf = self.compare(c, local)
                body = self.kernel_body(b, local)

                def guarded(ctx):
                    if cf(ctx):
                        for s in body:
                            s(ctx)

                return guarded
        raise TypeError(f"statement not allowed in kernel: {type(stmt).__name__}")

    def view_write(self, target: ViewAccess, op: str, rhs, local: frozenset):
        name = target.view
        offset = self.offset(target, local)
        vf = self.expr(rhs, local)

        def write(ctx):
            storage = ctx.views[name]
            off = offset(ctx, storage)
            val = vf(ctx)
            if ctx.tracer is not None:
                ctx.tracer.record(name, off, ctx.iter_id, "write")
            flat = storage.flat
            if op == "=":
                flat[off] = val
            elif op == "+=":
                flat[off] += val
            else:
                flat[off] -= val

        return write

    def atomic(self, target: ViewAccess, value, local: frozenset):
        name = target.view
        offset = self.offset(target, local)
        vf = self.expr(value, local)

        def add(ctx):
            storage = ctx.views[name]
            off = offset(ctx, storage)
            val = vf(ctx)
            if ctx.tracer is not None:
                ctx.tracer.record(name, off, ctx.iter_id, "atomic")
            if ctx.pending is None:
                storage.flat[off] += val
            else:
                ctx.pending.append((ctx.iter_id, ctx.seq, name, off, val))
                ctx.seq += 1

        return add


# --------------------------------------------------------------------------
# Execution


class _Interpreter:
    def __init__(self, program: Program, fn: FunctionDef, cfg: ExecutionConfig):
        self.program = program
        self.fn = fn
        self.cfg = cfg
        self.threads = 1 if cfg.conflict_detect else effective_threads(cfg)
        self.compiler = _Compiler(fn)
        self.views: dict = {}
        self.scalars: dict = {}
        self.kernel_index = 0
        self.conflicts: list = []
        self.value: float | None = None
        self.pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def run(self, inputs: dict) -> ExecResult:
        self.bind_inputs(inputs)
        try:
            # IEEE results (inf/nan) without warnings; non-finite values are
            # surfaced by check_finite instead.
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                self.body(self.fn.body)
        finally:
            if self.pool is not None:
                self.pool.shutdown(wait=False, cancel_futures=True)
        report = ConflictReport(tuple(self.conflicts)) if self.cfg.conflict_detect else None
        return ExecResult(self.value, report)

    def bind_inputs(self, inputs: dict):
        expected = {p.name for p in self.fn.params}
        given = set(inputs)
        if expected != given:
            missing, extra = expected - given, given - expected
            parts = []
            if missing:
                parts.append(f"missing {sorted(missing)}")
            if extra:
                parts.append(f"unexpected {sorted(extra)}")
            raise ShapeMismatch(f"inputs do not match parameters: {'; '.join(parts)}")
        for p in self.fn.params:
            v = inputs[p.name]
            if p.is_view:
                if not isinstance(v, ViewStorage):
                    v = ViewStorage.from_values(p.name, v)
                    inputs[p.name] = v
                if v.buffer.ndim != p.type.rank:
                    raise ShapeMismatch(
                        f"parameter '{p.name}': rank {p.type.rank} expected, "
                        f"got rank {v.buffer.ndim}"
                    )
                for dim, ext in enumerate(p.type.extents):
                    if isinstance(ext, StaticExtent) and v.extents[dim] != ext.size:
                        raise ShapeMismatch(
                            f"parameter '{p.name}' dim {dim}: static extent "
                            f"{ext.size} expected, got {v.extents[dim]}"
                        )
                self.views[p.name] = v
            else:
                self.scalars[p.name] = float(v)

    def ctx(self) -> _Ctx:
        return _Ctx(self.views, self.scalars)

    def body(self, stmts):
        for stmt in stmts:
            self.statement(stmt)

    def statement(self, stmt):
        local = frozenset()
        match stmt:
            case DeclView(descriptor=d, dyn_args=args):
                c = self.ctx()
                dims = []
                arg_fns = [self.compiler.index(a, local) for a in args]
                it = iter(arg_fns)
                for ext in d.extents:
                    if isinstance(ext, StaticExtent):
                        dims.append(ext.size)
                    else:
                        dims.append(int(next(it)(c)))
                if any(n < 0 for n in dims):
                    raise ShapeMismatch(f"view '{d.name}': negative extent {dims}")
                self.views[d.name] = ViewStorage.zeros(d.name, dims)
            case DeclScalar(name=n, init=init):
                self.scalars[n] = self.compiler.expr(init, local)(self.ctx())
            case AssignScalar(name=n, op=op, rhs=rhs):
                v = self.compiler.expr(rhs, local)(self.ctx())
                if op == "=":
                    self.scalars[n] = v
                elif op == "+=":
                    self.scalars[n] += v
                else:
                    self.scalars[n] -= v
            case AssignView() | AtomicAdd():
                self.compiler.kernel_stmt(stmt, local)(self.ctx())
            case If(cond=c, body=b):
                if self.compiler.compare(c, local)(self.ctx()):
                    self.body(b)
            case ParallelFor():
                self.parallel_for(stmt)
            case DeepCopy(dst=d, src=s):
                self.deep_copy(d, s)
            case ParallelSum(dst=d, src=s):
                self.gather(d, s)
            case ParallelSumInto(dst=d, src=s):
                self.sum_into(d, s)
            case Return(value=v):
                self.value = self.compiler.expr(v, local)(self.ctx())
                self.check_value(self.value)
            case _:
                raise TypeError(f"cannot execute {type(stmt).__name__}")

    # -- kernels -----------------------------------------------------------

    def parallel_for(self, kernel: ParallelFor):
        n = int(self.compiler.index(kernel.upper, frozenset())(self.ctx()))
        local = frozenset({kernel.counter}) | _local_decls(kernel.body)
        body = self.compiler.kernel_body(kernel.body, local)
        counter = kernel.counter
        pending: list = []

        if self.cfg.conflict_detect:
            tracer = _Tracer()
            order = list(range(n))
            random.Random(self.cfg.rng_seed + self.kernel_index).shuffle(order)
            ctx = _Ctx(self.views, self.scalars, pending, tracer)
            for i in order:
                ctx.local = {counter: i}
                ctx.iter_id = i
                ctx.seq = 0
                for s in body:
                    s(ctx)
            self.conflicts.extend(tracer.conflicts(self.kernel_index))
        elif self.pool is None or n < 2 * self.threads:
            ctx = _Ctx(self.views, self.scalars, pending)
            for i in range(n):
                ctx.local = {counter: i}
                ctx.iter_id = i
                ctx.seq = 0
                for s in body:
                    s(ctx)
        else:
            bounds = [(n * t) // self.threads for t in range(self.threads + 1)]

            def chunk(lo, hi):
                ctx = _Ctx(self.views, self.scalars, pending)
                with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                    for i in range(lo, hi):
                        ctx.local = {counter: i}
                        ctx.iter_id = i
                        ctx.seq = 0
                        for s in body:
                            s(ctx)

            futures = [
                self.pool.submit(chunk, bounds[t], bounds[t + 1])
                for t in range(self.threads)
                if bounds[t] < bounds[t + 1]
            ]
            for f in futures:
                f.result()

        # Kernel sync point: apply buffered atomic adds in a canonical
        # order so the result is independent of the schedule above.
        pending.sort(key=lambda p: (p[0], p[1]))
        views = self.views
        for _, _, name, off, val in pending:
            views[name].flat[off] += val

        self.kernel_index += 1
        if self.cfg.check_finite:
            self.check_views()

    # -- builtins ----------------------------------------------------------

    def deep_copy(self, dst: str, src):
        d = self.views[dst]
        if isinstance(src, str):
            s = self.views[src]
            if d.extents != s.extents:
                raise ShapeMismatch(
                    f"deep_copy: {dst}{d.extents} vs {src}{s.extents}"
                )
            np.copyto(d.buffer, s.buffer)
        else:
            val = self.compiler.expr(src, frozenset())(self.ctx())
            d.buffer.fill(val)
        if self.cfg.check_finite:
            self.check_views()

    def gather(self, dst: str, src: str):
        s = self.views[src]
        total = (
            pairwise_sum(s.flat)
            if self.cfg.deterministic_reduction
            else float(np.sum(s.flat))
        )
        self.scalars[dst] = self.scalars.get(dst, 0.0) + total
        self.check_value(self.scalars[dst])

    def sum_into(self, dst: str, src):
        d = self.views[dst]
        if isinstance(src, str):
            s = self.views[src]
            if d.extents != s.extents:
                raise ShapeMismatch(
                    f"parallel_sum: {dst}{d.extents} vs {src}{s.extents}"
                )
            d.buffer += s.buffer
        else:
            d.buffer += self.compiler.expr(src, frozenset())(self.ctx())
        if self.cfg.check_finite:
            self.check_views()

    # -- guards ------------------------------------------------------------

    def check_views(self):
        for v in self.views.values():
            if not np.isfinite(v.buffer).all():
                raise NonFiniteDetected(f"non-finite value in view '{v.name}'")

    def check_value(self, v):
        if self.cfg.check_finite and v is not None and not np.isfinite(v):
            raise NonFiniteDetected(f"non-finite scalar {v!r}")


def _local_decls(body) -> frozenset:
    names = set()
    for stmt in body:
        if isinstance(stmt, DeclScalar):
            names.add(stmt.name)
        elif isinstance(stmt, If):
            names |= _local_decls(stmt.body)
    return frozenset(names)


def execute(
    program: Program,
    fn_name: str,
    inputs: dict,
    cfg: ExecutionConfig | None = None,
) -> ExecResult:
    """Run `fn_name` with `inputs` (name -> ViewStorage | float).

    View inputs are mutated in place (reference semantics).  The return
    value is None for void functions.  With cfg.conflict_detect, kernels
    run sequentially under instrumentation and the result carries a
    ConflictReport.
    """
    cfg = cfg or ExecutionConfig()
    fn = program.function(fn_name)
    if fn is None:
        raise KeyError(f"no function named '{fn_name}'")
    return _Interpreter(program, fn, cfg).run(inputs)


def detect_conflicts(
    program: Program,
    fn_name: str,
    inputs: dict,
    cfg: ExecutionConfig | None = None,
) -> ConflictReport:
    """Instrumented sequential execution; reports every location touched
    by two distinct iterations of one kernel where at least one access is
    a plain (non-atomic) write."""
    base = cfg or ExecutionConfig()
    cfg = ExecutionConfig(
        threads=1,
        deterministic_reduction=base.deterministic_reduction,
        conflict_detect=True,
        rng_seed=base.rng_seed,
        check_finite=base.check_finite,
    )
    return execute(program, fn_name, inputs, cfg).conflicts


# --------------------------------------------------------------------------
# Tensor file I/O (text): header `f64 rank d0 [d1]`, then row-major values.


def save_tensor(path, storage: ViewStorage) -> None:
    dims = " ".join(str(d) for d in storage.extents)
    lines = [f"f64 {storage.buffer.ndim} {dims}"]
    lines.extend(repr(float(x)) for x in storage.flat)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_tensor(path, name: str | None = None) -> ViewStorage:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) < 3 or header[0] != "f64":
            raise ShapeMismatch(f"{path}: malformed tensor header {header!r}")
        rank = int(header[1])
        dims = [int(d) for d in header[2 : 2 + rank]]
        if len(dims) != rank or rank not in (1, 2):
            raise ShapeMismatch(f"{path}: bad rank/extents {header!r}")
        tokens = f.read().split()
        data = np.array(tokens, dtype=np.float64) if tokens else np.zeros(0)
    count = int(np.prod(dims))
    if data.size != count:
        raise ShapeMismatch(f"{path}: expected {count} values, found {data.size}")
    if name is None:
        name = os.path.splitext(os.path.basename(path))[0]
    return ViewStorage.from_values(name, data.reshape(dims))
