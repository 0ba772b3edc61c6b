"""
Ratcliff-Obershelp alignment and word-level edit operations.

Reference and hypothesis are aligned token by token; every differing span is
turned into edit operations anchored on hypothesis tokens. Applying the
operations to the hypothesis yields the reference again.

Serialized form of an operation: ``anchor[opname_arg1_arg2]``. Inside anchors
``\\``, ``[``, ``]`` and ``"`` are backslash-escaped, inside arguments ``\\``,
``_``, ``[`` and ``]`` are. The empty anchor renders as ``""``.
"""

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import StrEnum
from typing import NamedTuple, Sequence

from .errors import EditOpApplyError, EditOpFormatError
from .logging_config import get_logger

logger = get_logger("align")


class MatchBlock(NamedTuple):
    start_a: int
    start_b: int
    length: int


def _longest_match(
    a: Sequence, b: Sequence, alo: int, ahi: int, blo: int, bhi: int
) -> MatchBlock:
    # Scanning end positions in order with a strict comparison keeps the
    # leftmost block in a, then the leftmost in b, among equally long ones.
    best = MatchBlock(alo, blo, 0)
    previous: dict[int, int] = {}
    for i in range(alo, ahi):
        current: dict[int, int] = {}
        item = a[i]
        for j in range(blo, bhi):
            if item == b[j]:
                k = previous.get(j - 1, 0) + 1
                current[j] = k
                if k > best.length:
                    best = MatchBlock(i - k + 1, j - k + 1, k)
        previous = current
    return best


def ro_align(seq_a: Sequence, seq_b: Sequence) -> list[MatchBlock]:
    """
    Ratcliff-Obershelp matching blocks of two sequences.

    The longest common contiguous run is matched first, then the parts to its
    left and right are matched recursively.

    Returns:
        list[MatchBlock]: Non-overlapping blocks ordered in both sequences
    """
    blocks: list[MatchBlock] = []
    pending = [(0, len(seq_a), 0, len(seq_b))]
    while pending:
        alo, ahi, blo, bhi = pending.pop()
        if alo >= ahi or blo >= bhi:
            continue
        block = _longest_match(seq_a, seq_b, alo, ahi, blo, bhi)
        if block.length == 0:
            continue
        blocks.append(block)
        pending.append((alo, block.start_a, blo, block.start_b))
        pending.append(
            (block.start_a + block.length, ahi, block.start_b + block.length, bhi)
        )
    blocks.sort()
    return blocks


def similarity_ratio(seq_a: Sequence, seq_b: Sequence) -> float:
    """2*M/T where M is the number of matched elements and T the total length."""
    total = len(seq_a) + len(seq_b)
    if total == 0:
        return 1.0
    return 2.0 * sum(block.length for block in ro_align(seq_a, seq_b)) / total


def tokenize(text: str) -> list[str]:
    return text.split()


class DiffKind(StrEnum):
    INSERTED = "inserted"
    MISSING = "missing"
    REPLACED = "replaced"


@dataclass(frozen=True)
class DiffSpan:
    """Token ranges [start, end) of reference and hypothesis between two match blocks."""

    ref_start: int
    ref_end: int
    hyp_start: int
    hyp_end: int

    @property
    def kind(self) -> DiffKind:
        if self.ref_start == self.ref_end:
            return DiffKind.INSERTED
        if self.hyp_start == self.hyp_end:
            return DiffKind.MISSING
        return DiffKind.REPLACED


def diff_spans(ref_tokens: Sequence[str], hyp_tokens: Sequence[str]) -> list[DiffSpan]:
    spans: list[DiffSpan] = []
    ref_pos = hyp_pos = 0
    blocks = ro_align(ref_tokens, hyp_tokens)
    for block in [*blocks, MatchBlock(len(ref_tokens), len(hyp_tokens), 0)]:
        if block.start_a > ref_pos or block.start_b > hyp_pos:
            spans.append(DiffSpan(ref_pos, block.start_a, hyp_pos, block.start_b))
        ref_pos = block.start_a + block.length
        hyp_pos = block.start_b + block.length
    return spans


OP_ARITY: dict[str, int] = {
    "del": 0,
    "replace": 1,
    "insert_before": 1,
    "insert_after": 1,
    "add_prefix": 1,
    "add_suffix": 1,
    "del_suffix": 1,
    "del_prefix": 1,
    "replace_suffix": 1,
    "sreplace": 2,
    "join": 1,
    "split_after": 1,
    "split_on_first": 1,
    "split_on_last": 1,
}

OP_ALIASES: dict[str, str] = {
    "add_before": "insert_before",
    "add_after": "insert_after",
    "split_aftert": "split_after",
}

_COUNT_OPS = frozenset({"del_suffix", "del_prefix", "split_after"})

# before < core < after, per hypothesis position
_PHASE_BEFORE, _PHASE_CORE, _PHASE_AFTER = 0, 1, 2

VIRTUAL_POSITION = -1


@dataclass(frozen=True)
class EditOp:
    """
    One edit operation anchored on a hypothesis token.

    ``position`` is the anchor's token index in the hypothesis, -1 for the
    virtual empty anchor, None when unknown (e.g. after parsing).
    """

    anchor: str
    name: str
    args: tuple[str, ...] = ()
    position: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.name not in OP_ARITY:
            raise EditOpFormatError(f"Unknown edit operation: {self.name}", name=self.name)
        if len(self.args) != OP_ARITY[self.name]:
            raise EditOpFormatError(
                f"{self.name} takes {OP_ARITY[self.name]} argument(s), got {len(self.args)}",
                name=self.name,
            )
        if self.name in _COUNT_OPS and not (self.args[0].isdigit() and int(self.args[0]) > 0):
            raise EditOpFormatError(
                f"{self.name} needs a positive character count, got {self.args[0]!r}",
                name=self.name,
            )

    @property
    def phase(self) -> int:
        if self.name == "insert_before":
            return _PHASE_BEFORE
        if self.name == "insert_after":
            return _PHASE_AFTER
        return _PHASE_CORE

    def __str__(self) -> str:
        return format_editop(self)


_ANCHOR_SPECIAL = '\\[]"'
_ARG_SPECIAL = "\\_[]"


def _escape(text: str, special: str) -> str:
    return "".join("\\" + ch if ch in special else ch for ch in text)


def _unescape(text: str, source: str) -> str:
    out: list[str] = []
    chars = iter(text)
    for ch in chars:
        if ch == "\\":
            nxt = next(chars, None)
            if nxt is None:
                raise EditOpFormatError(f"Dangling escape in {source!r}", text=source)
            out.append(nxt)
        else:
            out.append(ch)
    return "".join(out)


def format_editop(op: EditOp) -> str:
    anchor = '""' if op.anchor == "" else _escape(op.anchor, _ANCHOR_SPECIAL)
    body = op.name + "".join("_" + _escape(arg, _ARG_SPECIAL) for arg in op.args)
    return f"{anchor}[{body}]"


def _split_unescaped(text: str, separator: str, source: str) -> list[str]:
    """Split on unescaped separators, keeping escapes in the pieces."""
    pieces: list[str] = []
    current: list[str] = []
    escaped = False
    for ch in text:
        if escaped:
            current.append(ch)
            escaped = False
        elif ch == "\\":
            current.append(ch)
            escaped = True
        elif ch == separator:
            pieces.append("".join(current))
            current = []
        elif ch in "[]":
            raise EditOpFormatError(f"Unescaped {ch!r} inside operation in {source!r}", text=source)
        else:
            current.append(ch)
    pieces.append("".join(current))
    return pieces


def _resolve_name(segments: list[str], source: str) -> tuple[str, list[str]]:
    matches: list[tuple[str, str]] = []
    for written in [*OP_ARITY, *OP_ALIASES]:
        canonical = OP_ALIASES.get(written, written)
        name_segments = written.split("_")
        if (
            segments[: len(name_segments)] == name_segments
            and len(segments) - len(name_segments) == OP_ARITY[canonical]
        ):
            matches.append((written, canonical))
    if not matches:
        raise EditOpFormatError(f"Unknown operation or wrong arity in {source!r}", text=source)
    written, canonical = max(matches, key=lambda m: len(m[0]))
    return canonical, segments[len(written.split("_")) :]


def parse_editop(text: str) -> EditOp:
    """
    Parse ``anchor[opname_args]``. The aliases add_before, add_after and
    split_aftert are accepted and canonicalized.

    Raises:
        EditOpFormatError: If the string is not a well-formed operation
    """
    open_at = None
    unescaped_quote = False
    escaped = False
    for index, ch in enumerate(text):
        if escaped:
            escaped = False
        elif ch == "\\":
            escaped = True
        elif ch == "[":
            open_at = index
            break
        elif ch == "]":
            raise EditOpFormatError(f"Unescaped ']' in anchor of {text!r}", text=text)
        elif ch == '"':
            unescaped_quote = True
    if open_at is None or not text.endswith("]") or len(text) < open_at + 2:
        raise EditOpFormatError(f"Expected 'anchor[operation]', got {text!r}", text=text)

    raw_anchor = text[:open_at]
    if raw_anchor == '""':
        anchor = ""
    elif unescaped_quote:
        raise EditOpFormatError(f"Unescaped '\"' in anchor of {text!r}", text=text)
    else:
        anchor = _unescape(raw_anchor, text)
    body = text[open_at + 1 : -1]
    name, raw_args = _resolve_name(_split_unescaped(body, "_", text), text)
    return EditOp(anchor, name, tuple(_unescape(arg, text) for arg in raw_args))


def _common_prefix(a: str, b: str) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


def _common_suffix(a: str, b: str, limit: int) -> int:
    n = 0
    while n < limit and a[len(a) - 1 - n] == b[len(b) - 1 - n]:
        n += 1
    return n


def _pair_op(position: int, t: str, u: str) -> list[EditOp]:
    """Most specific operation turning hypothesis token t into reference token u."""
    if t == u:
        return []

    def op(name: str, *args: str) -> list[EditOp]:
        return [EditOp(t, name, args, position)]

    if len(u) > len(t) and u.endswith(t):
        return op("add_prefix", u[: len(u) - len(t)])
    if len(u) > len(t) and u.startswith(t):
        return op("add_suffix", u[len(t) :])
    if len(t) > len(u) and t.endswith(u):
        return op("del_prefix", str(len(t) - len(u)))
    if len(t) > len(u) and t.startswith(u):
        return op("del_suffix", str(len(t) - len(u)))

    prefix = _common_prefix(t, u)
    suffix = _common_suffix(t, u, min(len(t), len(u)) - prefix)
    changed = len(t) - prefix
    if (
        prefix > 0
        and suffix == 0
        and len(u) - prefix == changed
        and changed <= math.ceil(len(t) / 2)
    ):
        return op("replace_suffix", u[prefix:])
    if prefix > 0 and suffix > 0:
        old = t[prefix : len(t) - suffix]
        new = u[prefix : len(u) - suffix]
        if old and t.replace(old, new, 1) == u:
            return op("sreplace", old, new)
    return op("replace", u)


def _join_op(position: int, h0: str, h1: str, r0: str) -> EditOp | None:
    extra = len(r0) - len(h0) - len(h1)
    if extra in (0, 1) and r0.startswith(h0) and r0.endswith(h1):
        return EditOp(h0, "join", (r0[len(h0) : len(h0) + extra],), position)
    return None


def _split_op(position: int, h0: str, r0: str, r1: str) -> EditOp | None:
    if h0 == r0 + r1:
        return EditOp(h0, "split_after", (str(len(r0)),), position)
    if len(h0) != len(r0) + len(r1) + 1 or not (h0.startswith(r0) and h0.endswith(r1)):
        return None
    char = h0[len(r0)]
    first = h0.find(char) == len(r0)
    last = h0.rfind(char) == len(r0)
    if first and last:
        name = "split_on_last" if char.isalnum() else "split_on_first"
    elif first:
        name = "split_on_first"
    elif last:
        name = "split_on_last"
    else:
        return None
    return EditOp(h0, name, (char,), position)


def _span_ops(span: DiffSpan, ref: Sequence[str], hyp: Sequence[str]) -> list[EditOp]:
    h = hyp[span.hyp_start : span.hyp_end]
    r = ref[span.ref_start : span.ref_end]
    start = span.hyp_start

    if len(h) == 1 and len(r) == 1:
        return _pair_op(start, h[0], r[0])
    if len(h) == 2 and len(r) == 1:
        joined = _join_op(start, h[0], h[1], r[0])
        if joined is not None:
            return [joined]
    if len(h) == 1 and len(r) == 2:
        split = _split_op(start, h[0], r[0], r[1])
        if split is not None:
            return [split]

    ops: list[EditOp] = []
    q = 0
    for p, token in enumerate(h):
        position = start + p
        hyp_left = len(h) - p
        ref_left = len(r) - q
        if ref_left == 0:
            ops.append(EditOp(token, "del", (), position))
            continue
        if hyp_left > ref_left:
            # a later token may take r[q] instead, this one is dropped then
            here = similarity_ratio(token, r[q])
            later = max(
                similarity_ratio(h[x], r[q]) for x in range(p + 1, p + 1 + hyp_left - ref_left)
            )
            if here < later:
                ops.append(EditOp(token, "del", (), position))
                continue
        window = range(q, q + max(ref_left - hyp_left, 0) + 1)
        k = max(window, key=lambda x: (similarity_ratio(token, r[x]), -x))
        ops.extend(EditOp(token, "insert_before", (r[x],), position) for x in range(q, k))
        ops.extend(_pair_op(position, token, r[k]))
        q = k + 1

    leftover = r[q:]
    if leftover:
        if span.hyp_end < len(hyp):
            anchor, position, name = hyp[span.hyp_end], span.hyp_end, "insert_before"
        elif hyp:
            anchor, position, name = hyp[-1], len(hyp) - 1, "insert_after"
        else:
            anchor, position, name = "", VIRTUAL_POSITION, "insert_before"
        ops.extend(EditOp(anchor, name, (word,), position) for word in leftover)
    return ops


def extract_editops(reference: str, hypothesis: str) -> list[EditOp]:
    """
    Edit operations that turn the hypothesis into the reference.

    Operations are ordered by hypothesis position; at one position, insertions
    before the token come first and insertions after it last.
    """
    ref = tokenize(reference)
    hyp = tokenize(hypothesis)
    ops: list[EditOp] = []
    for span in diff_spans(ref, hyp):
        ops.extend(_span_ops(span, ref, hyp))
    ops.sort(key=lambda op: (op.position, op.phase))
    return ops


def _apply_core(op: EditOp, tokens: Sequence[str], i: int) -> str:
    t = tokens[i]

    def fail(reason: str) -> EditOpApplyError:
        return EditOpApplyError(f"{format_editop(op)} does not fit token {t!r}: {reason}")

    name, args = op.name, op.args
    if name == "del":
        return ""
    if name == "replace":
        return args[0]
    if name == "add_prefix":
        return args[0] + t
    if name == "add_suffix":
        return t + args[0]
    if name in ("del_suffix", "del_prefix", "split_after"):
        n = int(args[0])
        if n >= len(t):
            raise fail(f"count {n} not below token length")
        if name == "del_suffix":
            return t[: len(t) - n]
        if name == "del_prefix":
            return t[n:]
        return f"{t[:n]} {t[n:]}"
    if name == "replace_suffix":
        if not args[0] or len(args[0]) > len(t):
            raise fail("suffix longer than token")
        return t[: len(t) - len(args[0])] + args[0]
    if name == "sreplace":
        if not args[0] or args[0] not in t:
            raise fail(f"substring {args[0]!r} not found")
        return t.replace(args[0], args[1], 1)
    if name == "join":
        if i + 1 >= len(tokens):
            raise fail("no following token to join")
        return t + args[0] + tokens[i + 1]
    if name in ("split_on_first", "split_on_last"):
        char = args[0]
        at = t.find(char) if name == "split_on_first" else t.rfind(char)
        if not char or at <= 0 or at + len(char) >= len(t):
            raise fail(f"no inner {char!r} to split on")
        return f"{t[:at]} {t[at + len(char):]}"
    raise fail("not a token transformation")


def apply_editops(hypothesis: str, ops: Sequence[EditOp]) -> str:
    """
    Apply edit operations to a hypothesis.

    Operations without a position are placed on the first fitting token with
    the anchor's text, searching forward from the previous operation. That
    placement must be forced: when more tokens fit than unpositioned operations
    on that anchor remain, the operation is rejected.

    Raises:
        EditOpApplyError: If an anchor does not match the hypothesis token or
            operations conflict (two token transformations, a join onto an
            edited token), or an unpositioned operation fits several tokens
    """
    tokens = tokenize(hypothesis)
    before: defaultdict[int, list[str]] = defaultdict(list)
    after: defaultdict[int, list[str]] = defaultdict(list)
    core: dict[int, EditOp] = {}
    last_phase: dict[int, int] = {}
    consumed: set[int] = set()

    def fits(i: int, op: EditOp) -> bool:
        if i in consumed:
            return False
        current = last_phase.get(i, -1)
        return op.phase > current or (op.phase == current and op.phase != _PHASE_CORE)

    # unpositioned ops still to come per anchor, this one included
    pending: list[int] = []
    remaining: Counter[str] = Counter(op.anchor for op in ops if op.position is None)
    for op in ops:
        pending.append(remaining[op.anchor])
        if op.position is None:
            remaining[op.anchor] -= 1

    cursor = 0
    for k, op in enumerate(ops):
        if op.anchor == "":
            i = VIRTUAL_POSITION
            if op.position not in (None, VIRTUAL_POSITION):
                raise EditOpApplyError(f"{format_editop(op)}: empty anchor at position {op.position}")
            if op.phase == _PHASE_CORE:
                raise EditOpApplyError(f"{format_editop(op)}: the empty anchor only takes insertions")
        elif op.position is not None:
            i = op.position
            if not 0 <= i < len(tokens) or tokens[i] != op.anchor:
                found = tokens[i] if 0 <= i < len(tokens) else None
                raise EditOpApplyError(
                    f"{format_editop(op)} expects {op.anchor!r} at position {i}, found {found!r}",
                    position=i,
                )
            if not fits(i, op):
                raise EditOpApplyError(f"{format_editop(op)} conflicts with earlier operations")
            cursor = i
        else:
            candidates = [
                j for j in range(cursor, len(tokens)) if tokens[j] == op.anchor and fits(j, op)
            ]
            if not candidates:
                raise EditOpApplyError(
                    f"No token {op.anchor!r} left for {format_editop(op)}", anchor=op.anchor
                )
            if len(candidates) > pending[k]:
                raise EditOpApplyError(
                    f"{format_editop(op)} fits {len(candidates)} tokens {op.anchor!r}; "
                    "give the operation a position",
                    anchor=op.anchor,
                    candidates=candidates,
                )
            i = candidates[0]
            cursor = i

        if op.phase == _PHASE_BEFORE:
            before[i].append(op.args[0])
        elif op.phase == _PHASE_AFTER:
            after[i].append(op.args[0])
        else:
            core[i] = op
            if op.name == "join":
                consumed.add(i + 1)
        last_phase[i] = max(last_phase.get(i, -1), op.phase)

    for i in consumed:
        if i in last_phase:
            raise EditOpApplyError(f"Token {i} is joined into its predecessor and edited too")

    pieces: list[str] = [*before[VIRTUAL_POSITION], *after[VIRTUAL_POSITION]]
    for i in range(len(tokens)):
        if i in consumed:
            continue
        pieces.extend(before[i])
        pieces.append(_apply_core(core[i], tokens, i) if i in core else tokens[i])
        pieces.extend(after[i])
    return " ".join(piece for piece in pieces if piece)
