"""Concrete syntax -> AST.

Hand-written tokenizer and recursive-descent parser.  Names resolve as
they are parsed (declaration before use), which is what lets the grammar
stay unambiguous: a bare identifier in value position is a scalar or a
counter, `name(...)` is a view access, and a scalar appearing inside an
index expression is rejected here rather than later.

`parse` returns a validated Program; syntax problems raise ParseError and
well-formedness problems raise ValidationError.  Arbitrary input bytes
never crash the parser (unknown characters, truncation, and pathological
nesting all surface as ParseError).
"""

from __future__ import annotations

import re
from bisect import bisect_right

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
    Param,
    Program,
    Return,
    ScalarVar,
    SourceSpan,
    ViewAccess,
    ViewDescriptor,
    fresh_name,
)
from .validate import RESERVED, validate

_MAX_DEPTH = 200

_TOKEN_RE = re.compile(
    r"""
    (?P<WS>\s+)
  | (?P<COMMENT>//[^\n]*)
  | (?P<FLOAT>\d+\.\d+(?:[eE][+-]?\d+)?|\d+[eE][+-]?\d+)
  | (?P<INT>\d+)
  | (?P<NAME>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<STRING>"[^"\n]*")
  | (?P<OP>->|\.\.|\+=|-=|==|!=|<=|>=|[-+*/(){}<>=,;:])
  | (?P<BAD>.)
    """,
    re.VERBOSE | re.DOTALL,
)


class ParseError(Exception):
    def __init__(self, message: str, span: SourceSpan = SourceSpan()):
        self.message = message
        self.span = span
        where = f"{span.line}:{span.col}: " if span.line else ""
        super().__init__(f"{where}{message}")


class ValidationError(Exception):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


class _Token:
    __slots__ = ("kind", "text", "span")

    def __init__(self, kind, text, span):
        self.kind = kind
        self.text = text
        self.span = span

    def __repr__(self):
        return f"{self.kind}({self.text!r})"


def _tokenize(text: str) -> list:
    line_starts = [0] + [m.end() for m in re.finditer("\n", text)]

    def span(start, end):
        ln = bisect_right(line_starts, start)
        return SourceSpan(start, end, ln, start - line_starts[ln - 1] + 1)

    tokens = []
    for m in _TOKEN_RE.finditer(text):
        kind = m.lastgroup
        if kind in ("WS", "COMMENT"):
            continue
        if kind == "BAD":
            raise ParseError(f"unexpected character {m.group()!r}", span(m.start(), m.end()))
        tok_kind = m.group() if kind == "OP" else kind
        tokens.append(_Token(tok_kind, m.group(), span(m.start(), m.end())))
    tokens.append(_Token("EOF", "", span(len(text), len(text))))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.pos = 0
        self.depth = 0
        # name -> ("view", rank) | "scalar" | "counter"
        self.names: dict = {}
        self.local: dict = {}

    # -- token plumbing ----------------------------------------------------

    def peek(self, ahead=0) -> _Token:
        i = min(self.pos + ahead, len(self.tokens) - 1)
        return self.tokens[i]

    def at(self, kind) -> bool:
        return self.peek().kind == kind

    def accept(self, kind):
        if self.at(kind):
            tok = self.tokens[self.pos]
            self.pos += 1
            return tok
        return None

    def expect(self, kind, what=None) -> _Token:
        tok = self.accept(kind)
        if tok is None:
            got = self.peek()
            want = what or f"'{kind}'"
            raise ParseError(f"expected {want}, found {got.text or 'end of input'!r}", got.span)
        return tok

    def ident(self, what="identifier") -> _Token:
        tok = self.expect("NAME", what)
        if tok.text in RESERVED:
            raise ParseError(f"'{tok.text}' is a reserved word", tok.span)
        return tok

    def lookup(self, name):
        if name in self.local:
            return self.local[name]
        return self.names.get(name)

    # -- grammar -----------------------------------------------------------

    def function(self) -> FunctionDef:
        start = self.expect("NAME", "'fn'")
        if start.text != "fn":
            raise ParseError(f"expected 'fn', found {start.text!r}", start.span)
        name = self.ident("function name")
        self.names = {}
        self.local = {}
        self.expect("(")
        params = []
        while not self.at(")"):
            if params:
                self.expect(",")
            params.append(self.param())
        self.expect(")")
        returns = None
        if self.accept("->"):
            ty = self.expect("NAME", "'f64'")
            if ty.text != "f64":
                raise ParseError("only f64 returns are supported", ty.span)
            returns = "f64"
        body = self.block(in_kernel=False)
        return FunctionDef(name.text, tuple(params), tuple(body), returns, span=start.span)

    def param(self) -> Param:
        name = self.ident("parameter name")
        self.expect(":")
        ty = self.type_annotation(name.text)
        kind = ("view", ty.rank) if isinstance(ty, ViewDescriptor) else "scalar"
        self.names[name.text] = kind
        return Param(name.text, ty, span=name.span)

    def type_annotation(self, owner: str):
        tok = self.expect("NAME", "type")
        if tok.text == "f64":
            return "f64"
        if tok.text != "view":
            raise ParseError(f"expected 'f64' or 'view<f64,R>', found {tok.text!r}", tok.span)
        self.expect("<")
        elem = self.expect("NAME", "'f64'")
        if elem.text != "f64":
            raise ParseError("views hold f64 elements only", elem.span)
        self.expect(",")
        rank_tok = self.expect("INT", "rank")
        rank = int(rank_tok.text)
        if rank not in (1, 2):
            raise ParseError(f"rank must be 1 or 2, got {rank}", rank_tok.span)
        self.expect(">")
        return ViewDescriptor(owner, rank)

    def block(self, in_kernel: bool) -> list:
        self.expect("{")
        body = []
        while not self.at("}"):
            if self.at("EOF"):
                raise ParseError("unexpected end of input inside block", self.peek().span)
            stmt = self.statement(in_kernel)
            # return-sugar expands to two statements
            if isinstance(stmt, list):
                body.extend(stmt)
            else:
                body.append(stmt)
        self.expect("}")
        return body

    def statement(self, in_kernel: bool):
        tok = self.peek()
        if tok.kind != "NAME":
            raise ParseError(f"expected a statement, found {tok.text!r}", tok.span)
        kw = tok.text
        if kw == "let":
            return self.let_statement(in_kernel)
        if kw == "if":
            return self.if_statement(in_kernel)
        if kw == "parallel_for":
            return self.parallel_for(in_kernel)
        if kw == "deep_copy":
            return self.deep_copy()
        if kw == "parallel_sum":
            return self.parallel_sum_into()
        if kw == "atomic_add":
            return self.atomic_add()
        if kw == "return":
            return self.return_statement()
        return self.assignment(in_kernel)

    def let_statement(self, in_kernel: bool):
        start = self.expect("NAME")  # let
        name = self.ident("variable name")
        self.expect(":")
        ty = self.type_annotation(name.text)
        self.expect("=")
        if ty == "f64":
            init = self.expr()
            self.expect(";")
            if in_kernel:
                self.local[name.text] = "scalar"
            else:
                self.names[name.text] = "scalar"
            return DeclScalar(name.text, init, span=start.span)
        view_kw = self.expect("NAME", "'view'")
        if view_kw.text != "view":
            raise ParseError("view declarations are initialized with view(...)", view_kw.span)
        self.expect("(")
        label = self.expect("STRING", "view label")
        args = []
        while self.accept(","):
            args.append(self.index_expr())
        self.expect(")")
        self.expect(";")
        self.names[name.text] = ("view", ty.rank)
        return DeclView(ty, tuple(args), label.text[1:-1], span=start.span)

    def if_statement(self, in_kernel: bool):
        start = self.expect("NAME")  # if
        self.expect("(")
        lhs = self.index_expr()
        op_tok = self.peek()
        if op_tok.kind not in ("==", "!=", "<", "<=", ">", ">="):
            raise ParseError("expected a comparison operator", op_tok.span)
        self.pos += 1
        rhs = self.index_expr()
        self.expect(")")
        cond = Compare(op_tok.kind, lhs, rhs, span=op_tok.span)
        body = self.block(in_kernel)
        return If(cond, tuple(body), span=start.span)

    def parallel_for(self, in_kernel: bool):
        start = self.expect("NAME")  # parallel_for
        if in_kernel:
            raise ParseError("nested parallel_for is not allowed", start.span)
        counter = self.ident("loop counter")
        kw = self.expect("NAME", "'in'")
        if kw.text != "in":
            raise ParseError(f"expected 'in', found {kw.text!r}", kw.span)
        zero = self.expect("INT", "'0'")
        if zero.text != "0":
            raise ParseError("iteration spaces start at 0", zero.span)
        self.expect("..")
        upper = self.index_expr()
        self.local = {counter.text: "counter"}
        body = self.block(in_kernel=True)
        self.local = {}
        return ParallelFor(counter.text, upper, tuple(body), span=start.span)

    def deep_copy(self):
        start = self.expect("NAME")  # deep_copy
        self.expect("(")
        dst = self.ident("destination view")
        self.expect(",")
        src = self.copy_source("deep_copy")
        self.expect(")")
        self.expect(";")
        return DeepCopy(dst.text, src, span=start.span)

    def parallel_sum_into(self):
        start = self.expect("NAME")  # parallel_sum
        self.expect("(")
        dst = self.ident("destination view")
        self.expect(",")
        src = self.copy_source("parallel_sum")
        self.expect(")")
        self.expect(";")
        return ParallelSumInto(dst.text, src, span=start.span)

    def copy_source(self, what):
        tok = self.peek()
        if tok.kind == "NAME" and self.peek(1).kind == ")":
            kind = self.lookup(tok.text)
            if isinstance(kind, tuple):
                self.pos += 1
                return tok.text
            if kind == "scalar":
                self.pos += 1
                return ScalarVar(tok.text, span=tok.span)
            raise ParseError(f"unknown identifier '{tok.text}'", tok.span)
        e = self.expr()
        if not isinstance(e, (Literal, ScalarVar)):
            raise ParseError(
                f"{what} source must be a view, a scalar variable, or a literal", tok.span
            )
        return e

    def atomic_add(self):
        start = self.expect("NAME")  # atomic_add
        self.expect("(")
        name = self.ident("view")
        if not isinstance(self.lookup(name.text), tuple):
            raise ParseError(f"unknown view '{name.text}'", name.span)
        target = self.view_access(name)
        self.expect(",")
        value = self.expr()
        self.expect(")")
        self.expect(";")
        return AtomicAdd(target, value, span=start.span)

    def return_statement(self):
        start = self.expect("NAME")  # return
        # `return parallel_sum(v);` is sugar: gather into a fresh scalar.
        if self.peek().text == "parallel_sum" and self.peek(1).kind == "(":
            self.pos += 1
            self.expect("(")
            src = self.ident("view")
            if not isinstance(self.lookup(src.text), tuple):
                raise ParseError(f"unknown view '{src.text}'", src.span)
            self.expect(")")
            self.expect(";")
            dst = fresh_name("_sum", set(self.names) | set(self.local))
            self.names[dst] = "scalar"
            return [
                ParallelSum(dst, src.text, span=start.span),
                Return(ScalarVar(dst, span=start.span), span=start.span),
            ]
        value = self.expr()
        self.expect(";")
        return Return(value, span=start.span)

    def assignment(self, in_kernel: bool):
        name = self.ident()
        if self.at("("):
            target = self.view_access(name)
            op = self.assign_op()
            rhs = self.expr()
            self.expect(";")
            return AssignView(target, op, rhs, span=name.span)
        op = self.assign_op()
        if op == "=" and self.peek().text == "parallel_sum" and self.peek(1).kind == "(":
            self.pos += 1
            self.expect("(")
            src = self.ident("view")
            if not isinstance(self.lookup(src.text), tuple):
                raise ParseError(f"unknown view '{src.text}'", src.span)
            self.expect(")")
            self.expect(";")
            kind = self.lookup(name.text)
            if kind is None:
                self.names[name.text] = "scalar"
            elif kind != "scalar":
                raise ParseError(
                    f"parallel_sum destination '{name.text}' is not a scalar", name.span
                )
            return ParallelSum(name.text, src.text, span=name.span)
        kind = self.lookup(name.text)
        if kind is None:
            raise ParseError(f"unknown identifier '{name.text}'", name.span)
        if kind != "scalar":
            raise ParseError(f"'{name.text}' is not a scalar", name.span)
        rhs = self.expr()
        self.expect(";")
        return AssignScalar(name.text, op, rhs, span=name.span)

    def assign_op(self) -> str:
        for op in ("=", "+=", "-="):
            if self.accept(op):
                return op
        raise ParseError("expected '=', '+=', or '-='", self.peek().span)

    def view_access(self, name_tok) -> ViewAccess:
        kind = self.lookup(name_tok.text)
        if not isinstance(kind, tuple):
            raise ParseError(f"unknown view '{name_tok.text}'", name_tok.span)
        self.expect("(")
        indices = [self.index_expr()]
        while self.accept(","):
            indices.append(self.index_expr())
        self.expect(")")
        return ViewAccess(name_tok.text, tuple(indices), span=name_tok.span)

    # -- value expressions ---------------------------------------------------

    def expr(self):
        self.depth += 1
        if self.depth > _MAX_DEPTH:
            raise ParseError("expression too deeply nested", self.peek().span)
        try:
            e = self.term()
            while self.peek().kind in ("+", "-"):
                op = self.tokens[self.pos]
                self.pos += 1
                e = Binary(op.kind, e, self.term(), span=op.span)
            return e
        finally:
            self.depth -= 1

    def term(self):
        e = self.factor()
        while self.peek().kind in ("*", "/"):
            op = self.tokens[self.pos]
            self.pos += 1
            e = Binary(op.kind, e, self.factor(), span=op.span)
        return e

    def factor(self):
        tok = self.peek()
        if tok.kind in ("FLOAT", "INT"):
            self.pos += 1
            return Literal(float(tok.text), span=tok.span)
        if tok.kind == "-":
            self.pos += 1
            operand = self.factor()
            # Fold a minus applied directly to a literal.
            if isinstance(operand, Literal):
                return Literal(-operand.value, span=tok.span)
            return Neg(operand, span=tok.span)
        if tok.kind == "(":
            self.pos += 1
            e = self.expr()
            self.expect(")")
            return e
        if tok.kind == "NAME":
            if tok.text == "extent":
                return self.extent_expr()
            name = self.ident()
            if self.at("("):
                return self.view_access(name)
            kind = self.lookup(name.text)
            if kind == "scalar":
                return ScalarVar(name.text, span=name.span)
            if kind == "counter":
                return IndexVar(name.text, span=name.span)
            if isinstance(kind, tuple):
                raise ParseError(f"view '{name.text}' is read with indices", name.span)
            raise ParseError(f"unknown identifier '{name.text}'", name.span)
        raise ParseError(f"expected an expression, found {tok.text or 'end of input'!r}", tok.span)

    def extent_expr(self) -> Extent:
        kw = self.expect("NAME")  # extent
        self.expect("(")
        view = self.ident("view")
        if not isinstance(self.lookup(view.text), tuple):
            raise ParseError(f"unknown view '{view.text}' in extent", view.span)
        self.expect(",")
        dim = self.expect("INT", "dimension")
        self.expect(")")
        return Extent(view.text, int(dim.text), span=kw.span)

    # -- index expressions -----------------------------------------------------

    def index_expr(self):
        self.depth += 1
        if self.depth > _MAX_DEPTH:
            raise ParseError("index expression too deeply nested", self.peek().span)
        try:
            e = self.index_term()
            while self.peek().kind in ("+", "-"):
                op = self.tokens[self.pos]
                self.pos += 1
                e = IdxBinary(op.kind, e, self.index_term(), span=op.span)
            return e
        finally:
            self.depth -= 1

    def index_term(self):
        e = self.index_factor()
        while self.peek().kind == "*":
            op = self.tokens[self.pos]
            self.pos += 1
            e = IdxBinary("*", e, self.index_factor(), span=op.span)
        return e

    def index_factor(self):
        tok = self.peek()
        if tok.kind == "INT":
            self.pos += 1
            return IntLiteral(int(tok.text), span=tok.span)
        if tok.kind == "-":
            self.pos += 1
            operand = self.index_factor()
            if isinstance(operand, IntLiteral) and operand.span.start == tok.span.end:
                return IntLiteral(-operand.value, span=tok.span)
            return IdxBinary("*", IntLiteral(-1, span=tok.span), operand, span=tok.span)
        if tok.kind == "(":
            self.pos += 1
            e = self.index_expr()
            self.expect(")")
            return e
        if tok.kind == "NAME":
            if tok.text == "extent":
                return self.extent_expr()
            name = self.ident()
            if self.at("("):
                return self.view_access(name)
            kind = self.lookup(name.text)
            if kind == "counter":
                return Counter(name.text, span=name.span)
            if kind == "scalar":
                raise ParseError(
                    f"scalar '{name.text}' is not allowed in an index expression", name.span
                )
            if isinstance(kind, tuple):
                raise ParseError(f"view '{name.text}' is read with indices", name.span)
            raise ParseError(f"unknown identifier '{name.text}'", name.span)
        if tok.kind == "FLOAT":
            raise ParseError("index expressions are integral; no float literals", tok.span)
        raise ParseError(
            f"expected an index expression, found {tok.text or 'end of input'!r}", tok.span
        )


def parse(text: str, *, check: bool = True) -> Program:
    """Parse source text into a validated Program.

    Raises ParseError for syntax errors and ValidationError when the tree
    is syntactically fine but breaks a well-formedness rule.
    """
    parser = _Parser(text)
    functions = []
    while not parser.at("EOF"):
        functions.append(parser.function())
    program = Program(tuple(functions))
    # Statement productions may expand to several statements (return sugar);
    # flatten happens inside block(), so only run validation here.
    if check:
        diags = validate(program)
        if diags:
            raise ValidationError(diags)
    return program
