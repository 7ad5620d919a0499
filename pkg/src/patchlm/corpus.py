"""Arithmetic chain-of-thought corpus tools and dataset mixing.

The trace grammar mirrors hand arithmetic: digit pairs run least-significant
first, multiplication spells out every digit product with its carry chain
("5*7+B=35+0=35 b=3"), partial products carry a positional suffix
("res=147137375e0"), and the partial sums are accumulated by an explicit
addition chain with a pass-through "tail=" for the shifted low digits.
Multiplying by 0 or 1 and adding 0 short-circuit as case0*, case2* and
case2+. The verifier re-derives every step with exact integer arithmetic
and reports the first inconsistency, which makes single-digit corruptions
(including miscopied intermediate results) detectable.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .encoding import PackedStream, load_documents, pack_corpus


class SourceExhausted(RuntimeError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte {offset})")
        self.offset = offset


OP_SYMBOLS = {"add": "+", "sub": "-", "mul": "*"}


@dataclass
class CotRecord:
    op: str
    a: int
    b: int
    trace: bytes
    result: int

    @property
    def prompt(self) -> bytes:
        return f"{self.a}{OP_SYMBOLS[self.op]}{self.b}=".encode()

    @property
    def record(self) -> bytes:
        return self.prompt + self.trace


def digits_lsb(n: int) -> list[int]:
    if n < 0:
        raise ValueError("digits_lsb expects a nonnegative integer")
    if n == 0:
        return [0]
    out = []
    while n:
        n, d = divmod(n, 10)
        out.append(d)
    return out


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def _digit_pairs(a: int, b: int, sym: str) -> list[str]:
    da, db = digits_lsb(a), digits_lsb(b)
    width = max(len(da), len(db))
    da += [0] * (width - len(da))
    db += [0] * (width - len(db))
    return [f"{x}{sym}{y}" for x, y in zip(da, db)]


def gen_addition(a: int, b: int) -> CotRecord:
    trace = ",".join(_digit_pairs(a, b, "+")) + f", result={a + b}"
    return CotRecord("add", a, b, trace.encode(), a + b)


def gen_subtraction(a: int, b: int) -> CotRecord:
    marker = "A>B" if a > b else ("A<B" if a < b else "A=B")
    trace = ",".join(_digit_pairs(a, b, "-")) + f",A-B,{marker} result={a - b}"
    return CotRecord("sub", a, b, trace.encode(), a - b)


def _mul_partial_block(a: int, db: int, k: int) -> tuple[str, int]:
    head = f"{a}*{db}e{k}:"
    if db == 0:
        return head + f"case0*,res=0e{k};", 0
    if db == 1:
        return head + f"case2*,res={a}e{k};", a
    steps = []
    carry = 0
    for da in digits_lsb(a):
        prod = da * db
        total = prod + carry
        steps.append(f"{da}*{db}+B={prod}+{carry}={total} b={total // 10}")
        carry = total // 10
    partial = a * db
    return head + ",".join(steps) + f",res={partial}e{k};", partial


def _mul_chain_block(acc: int, partial: int, k: int) -> tuple[str, int]:
    head = f"{acc}+{partial}e{k}:"
    if partial == 0:
        return head + f"case2+,res={acc};", acc
    acc_digits = digits_lsb(acc)
    tail = "".join(str(acc_digits[i]) if i < len(acc_digits) else "0" for i in range(k))
    high = acc_digits[k:]
    p_digits = digits_lsb(partial)
    steps = []
    carry = 0
    for i in range(max(len(high), len(p_digits))):
        x = high[i] if i < len(high) else 0
        y = p_digits[i] if i < len(p_digits) else 0
        total = x + y + carry
        steps.append(f"{x}+{y}+B={total} b={total // 10}")
        carry = total // 10
    new_acc = acc + partial * 10**k
    return head + f"tail={tail}," + ",".join(steps) + f",res={new_acc};", new_acc


def gen_multiplication(a: int, b: int) -> CotRecord:
    blocks = []
    partials = []
    for k, db in enumerate(digits_lsb(b)):
        block, partial = _mul_partial_block(a, db, k)
        blocks.append(block)
        partials.append(partial)
    blocks.append("sum:" + "+".join(f"{p}e{k}" for k, p in enumerate(partials)) + ";")
    if len(partials) > 1:
        acc = partials[0]
        for k in range(1, len(partials)):
            block, acc = _mul_chain_block(acc, partials[k], k)
            blocks.append(block)
    blocks.append(f"result={a * b}")
    return CotRecord("mul", a, b, " ".join(blocks).encode(), a * b)


GENERATORS = {"add": gen_addition, "sub": gen_subtraction, "mul": gen_multiplication}


def random_operand(max_digits: int, rng) -> int:
    n = int(rng.integers(1, max_digits + 1))
    if n == 1:
        return int(rng.integers(0, 10))
    lead = int(rng.integers(1, 10))
    rest = rng.integers(0, 10, size=n - 1)
    return int(str(lead) + "".join(map(str, rest)))


def random_record(op: str, max_digits: int, rng) -> CotRecord:
    return GENERATORS[op](random_operand(max_digits, rng), random_operand(max_digits, rng))


# ---------------------------------------------------------------------------
# verifier
# ---------------------------------------------------------------------------


@dataclass
class VerifyReport:
    valid: bool
    first_error: tuple[int, str] | None = None


class _Checker:
    """Steps through normalized trace text, counting verified facts."""

    def __init__(self, text: str, offsets: list[int]):
        self.text = text
        self.offsets = offsets
        self.pos = 0
        self.step = 0
        self.failure: tuple[int, str] | None = None

    def offset(self, pos=None) -> int:
        pos = self.pos if pos is None else pos
        if not self.offsets:
            return 0
        return self.offsets[min(pos, len(self.offsets) - 1)]

    def take(self, pattern: str, why: str) -> re.Match:
        m = re.compile(pattern).match(self.text, self.pos)
        if not m:
            raise ParseError(f"expected {why}", self.offset())
        self.pos = m.end()
        return m

    def peek(self, pattern: str) -> re.Match | None:
        return re.compile(pattern).match(self.text, self.pos)

    def check(self, ok: bool, description: str) -> bool:
        if not ok and self.failure is None:
            self.failure = (self.step, description)
        self.step += 1
        return ok

    def done(self) -> bool:
        return self.pos >= len(self.text)


def _normalize(s: str) -> tuple[str, list[int]]:
    chars, offsets = [], []
    for i, ch in enumerate(s):
        if not ch.isspace():
            chars.append(ch)
            offsets.append(i)
    return "".join(chars), offsets


_PREFIX = re.compile(r"(\d+)([+*-])(\d+)=")


def verify_cot(trace) -> VerifyReport:
    """Check every step of an arithmetic trace against exact integer math."""
    s = trace.decode("latin-1") if isinstance(trace, (bytes, bytearray)) else str(trace)
    text, offsets = _normalize(s)
    chk = _Checker(text, offsets)
    prefix = _PREFIX.match(text)
    expected = None
    if prefix:
        expected = (int(prefix.group(1)), prefix.group(2), int(prefix.group(3)))
        chk.pos = prefix.end()
    body = text[chk.pos :]
    if "*" in body and ":" in body:
        _verify_mul(chk, expected)
    elif ",A-B," in body or (expected and expected[1] == "-"):
        _verify_pairs(chk, expected, subtraction=True)
    else:
        _verify_pairs(chk, expected, subtraction=False)
    if chk.failure:
        return VerifyReport(False, chk.failure)
    return VerifyReport(True)


def _verify_pairs(chk: _Checker, expected, subtraction: bool) -> None:
    sym = "-" if subtraction else "+"
    a_digits, b_digits = [], []
    while True:
        m = chk.peek(rf"(\d)\{sym}(\d)(,|$)" if sym == "-" else r"(\d)\+(\d)(,|$)")
        if not m:
            break
        chk.pos = m.end()
        a_digits.append(int(m.group(1)))
        b_digits.append(int(m.group(2)))
    if not a_digits:
        raise ParseError("expected digit pairs", chk.offset())
    a = sum(d * 10**i for i, d in enumerate(a_digits))
    b = sum(d * 10**i for i, d in enumerate(b_digits))
    width = max(len(digits_lsb(a)), len(digits_lsb(b)))
    chk.check(len(a_digits) == width, f"{len(a_digits)} digit pairs for {width}-digit operands")
    if subtraction:
        marker = chk.take(r"A-B,(A>B|A<B|A=B)", "comparison marker").group(1)
        want = "A>B" if a > b else ("A<B" if a < b else "A=B")
        chk.check(marker == want, f"marker {marker} but operands compare as {want}")
        result = a - b
    else:
        result = a + b
    m = chk.take(r",?result=(-?\d+)$", "final result")
    chk.check(int(m.group(1)) == result, f"result={m.group(1)} but exact arithmetic gives {result}")
    if expected:
        ea, sym_e, eb = expected
        chk.check(sym_e == OP_SYMBOLS["sub" if subtraction else "add"], f"operator {sym_e} does not match trace dialect")
        chk.check(ea == a and eb == b, f"digit pairs rebuild {a},{b} but the problem states {ea},{eb}")


def _verify_mul(chk: _Checker, expected) -> None:
    a_val = None
    b_digits = []
    partials = []
    while True:
        m = chk.peek(r"(\d+)\*(\d)e(\d+):")
        if not m:
            break
        chk.pos = m.end()
        head_a, db, k = int(m.group(1)), int(m.group(2)), int(m.group(3))
        if a_val is None:
            a_val = head_a
        chk.check(head_a == a_val, f"copy of operand A changed to {head_a} at partial e{k}")
        chk.check(k == len(b_digits), f"partial exponent e{k} out of order")
        b_digits.append(db)
        if chk.peek(r"case0\*,"):
            chk.take(r"case0\*,", "case0*")
            chk.check(db == 0, f"case0* used for digit {db}")
        elif chk.peek(r"case2\*,"):
            chk.take(r"case2\*,", "case2*")
            chk.check(db == 1, f"case2* used for digit {db}")
        else:
            carry = 0
            for i, da in enumerate(digits_lsb(a_val)):
                sm = chk.take(r"(\d)\*(\d)\+B=(\d+)\+(\d+)=(\d+)b=(\d),", f"digit product step {i} of partial e{k}")
                sda, sdb, prod, cin, tot, cout = (int(g) for g in sm.groups())
                chk.check(sda == da, f"digit {sda} of A should be {da} at step {i} of partial e{k}")
                chk.check(sdb == db, f"multiplier digit {sdb} differs from {db} in partial e{k}")
                chk.check(prod == sda * sdb, f"{sda}*{sdb} is not {prod} in partial e{k}")
                chk.check(cin == carry, f"carry in {cin} should be {carry} in partial e{k}")
                chk.check(tot == prod + cin, f"{prod}+{cin} is not {tot} in partial e{k}")
                chk.check(cout == tot // 10, f"carry out {cout} should be {tot // 10} in partial e{k}")
                carry = cout
        rm = chk.take(r"res=(\d+)e(\d+);", f"partial result e{k}")
        partial = int(rm.group(1))
        chk.check(int(rm.group(2)) == k, f"partial result exponent e{rm.group(2)} should be e{k}")
        chk.check(partial == a_val * db, f"res={partial}e{k} but {a_val}*{db} is {a_val * db}")
        partials.append(partial)
    if a_val is None:
        raise ParseError("expected at least one partial product block", chk.offset())
    b_val = sum(d * 10**i for i, d in enumerate(b_digits))

    chk.take(r"sum:", "sum line")
    for k, p in enumerate(partials):
        sep = r"\+" if k else ""
        m = chk.take(sep + r"(\d+)e(\d+)", f"sum entry e{k}")
        chk.check(int(m.group(2)) == k, f"sum entry exponent e{m.group(2)} should be e{k}")
        chk.check(int(m.group(1)) == p, f"copy mismatch: sum lists {m.group(1)}e{k} but partial res was {p}e{k}")
    chk.take(r";", "end of sum line")

    acc = partials[0]
    for k in range(1, len(partials)):
        m = chk.take(r"(\d+)\+(\d+)e(\d+):", f"addition chain block e{k}")
        left, mid, ek = int(m.group(1)), int(m.group(2)), int(m.group(3))
        chk.check(left == acc, f"copy mismatch: chain starts from {left} but the running sum is {acc}")
        chk.check(mid == partials[k], f"copy mismatch: chain adds {mid}e{k} but partial res was {partials[k]}e{k}")
        chk.check(ek == k, f"chain exponent e{ek} should be e{k}")
        if chk.peek(r"case2\+,"):
            chk.take(r"case2\+,", "case2+")
            chk.check(partials[k] == 0, f"case2+ used for nonzero partial {partials[k]}")
            rm = chk.take(r"res=(\d+);", f"chain result e{k}")
            chk.check(int(rm.group(1)) == acc, f"res={rm.group(1)} but adding zero keeps {acc}")
            continue
        tm = chk.take(r"tail=(\d+),", f"tail of chain block e{k}")
        acc_digits = digits_lsb(acc)
        want_tail = "".join(str(acc_digits[i]) if i < len(acc_digits) else "0" for i in range(k))
        chk.check(tm.group(1) == want_tail, f"tail={tm.group(1)} but the low {k} digits of {acc} are {want_tail}")
        high = acc_digits[k:]
        p_digits = digits_lsb(partials[k])
        carry = 0
        for i in range(max(len(high), len(p_digits))):
            x = high[i] if i < len(high) else 0
            y = p_digits[i] if i < len(p_digits) else 0
            sm = chk.take(r"(\d)\+(\d)\+B=(\d+)b=(\d),", f"addition step {i} of chain block e{k}")
            sx, sy, tot, cout = (int(g) for g in sm.groups())
            chk.check(sx == x, f"digit {sx} of the running sum should be {x} in chain block e{k}")
            chk.check(sy == y, f"digit {sy} of the partial should be {y} in chain block e{k}")
            chk.check(tot == x + y + carry, f"{x}+{y}+B is {x + y + carry}, not {tot}, in chain block e{k}")
            chk.check(cout == tot // 10, f"carry out {cout} should be {tot // 10} in chain block e{k}")
            carry = cout
        new_acc = acc + partials[k] * 10**k
        rm = chk.take(r"res=(\d+);", f"chain result e{k}")
        chk.check(int(rm.group(1)) == new_acc, f"res={rm.group(1)} but {acc}+{partials[k]}e{k} is {new_acc}")
        acc = new_acc

    m = chk.take(r"result=(\d+)$", "final product")
    chk.check(int(m.group(1)) == acc, f"result={m.group(1)} differs from the accumulated {acc}")
    chk.check(acc == a_val * b_val, f"accumulated {acc} differs from exact {a_val}*{b_val}={a_val * b_val}")
    if expected:
        ea, sym, eb = expected
        chk.check(sym == "*", f"operator {sym} does not match a multiplication trace")
        chk.check(ea == a_val, f"problem states A={ea} but the trace works with {a_val}")
        chk.check(eb == b_val, f"problem states B={eb} but the trace works with {b_val}")


# ---------------------------------------------------------------------------
# aligned measurement records
# ---------------------------------------------------------------------------


def format_aligned_record(fields) -> bytes:
    """Render (name, value, caption) triples as "caption (name): value" text."""
    fields = list(fields)
    names = [name for name, _, _ in fields]
    if len(set(names)) != len(names):
        raise ValueError("field names must be unique")
    parts = []
    for name, value, caption in fields:
        piece = f"{caption} ({name}): {value}"
        if ", " in piece:
            raise ValueError(f"field {name!r} renders ambiguously: {piece!r}")
        parts.append(piece)
    return ", ".join(parts).encode()


_ALIGNED = re.compile(r"^(.*) \(([^()]*)\): (.*)$")


def parse_aligned_record(data: bytes) -> list[tuple[str, str]]:
    text = data.decode()
    if not text:
        return []
    out = []
    for piece in text.split(", "):
        m = _ALIGNED.match(piece)
        if m is None:
            raise ValueError(f"unparseable field {piece!r}")
        out.append((m.group(2), m.group(3)))
    return out


# ---------------------------------------------------------------------------
# ratio-controlled mixing
# ---------------------------------------------------------------------------


@dataclass
class MixManifest:
    sources: list  # of (tag, path, ratio)
    seed: int = 0

    def normalized(self):
        total = sum(r for _, _, r in self.sources)
        if total <= 0 or any(r <= 0 for _, _, r in self.sources):
            raise ValueError("ratios must be positive")
        return [(tag, path, r / total) for tag, path, r in self.sources]


def mix_datasets(manifest: MixManifest, total_bytes: int, separator: bytes = b"<|im_end|>") -> PackedStream:
    """Draw documents per source until each byte quota is met, then interleave.

    Per-source order is a seeded permutation (sampling without replacement);
    the merged order interleaves sources weighted by their remaining bytes.
    """
    rng = np.random.default_rng(manifest.seed)
    queues = []
    for tag, path, ratio in manifest.normalized():
        docs = load_documents(path)
        order = rng.permutation(len(docs))
        quota = ratio * total_bytes
        chosen, used = [], 0
        for i in order:
            if used >= quota:
                break
            chosen.append(docs[i])
            used += len(docs[i])
        if used < quota:
            raise SourceExhausted(f"source {tag!r} has {used} bytes, quota is {quota:.0f}")
        queues.append((tag, chosen, used))

    merged = []
    remaining = np.array([float(used) for _, _, used in queues])
    cursors = [0] * len(queues)
    while remaining.sum() > 0:
        p = remaining / remaining.sum()
        src = int(rng.choice(len(queues), p=p))
        _, docs, _ = queues[src]
        doc = docs[cursors[src]]
        cursors[src] += 1
        merged.append(doc)
        remaining[src] -= len(doc)
    return pack_corpus(merged, separator)
