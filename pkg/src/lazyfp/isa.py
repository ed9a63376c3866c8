"""Assembler and instruction set for the FPU state-leak simulator.

The dialect is Intel-flavored: destination operand first, ``;`` starts a
comment, one instruction or one ``label:`` per line, LF or CRLF line
endings. It covers exactly what the leak gadgets need (SIMD register
reads, bit masking, probe-array stores, cache maintenance), their
exception-suppression wrappers (TSX transactions, call/ret with a
poisoned return slot), and AES-NI victim code, plus two simulator
extensions: ``movimm`` to preload a SIMD register with a constant and
``yield`` to hand control back to the scheduler.

The only size keyword is ``dword``; it is accepted and ignored, since all
stores land inside a single cache line anyway. Bare identifiers inside a
memory operand (e.g. ``mem``) are symbolic constants resolved against the
machine's symbol table at execution time, so gadget listings can be
written without knowing the probe array's address.

``movimm`` immediates are raw hex byte strings in memory order: the first
byte pair is the register's least significant byte, mirroring how a
little-endian load from memory would fill the register. ``movimm xmm0,
0102`` therefore sets xmm0 to 0x0201.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum

M64 = (1 << 64) - 1

_IDENT_RE = re.compile(r"^[A-Za-z_.][A-Za-z0-9_.]*$")
_HEX_RE = re.compile(r"^[0-9a-fA-F]+$")


class AsmError(ValueError):
    """Base for assembly-text rejection; carries the 1-based source line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownMnemonic(AsmError):
    pass


class BadOperand(AsmError):
    pass


class DuplicateLabel(AsmError):
    def __init__(self, name: str, line: int | None = None):
        self.name = name
        super().__init__(f"duplicate label {name!r}", line)


class UndefinedLabel(AsmError):
    def __init__(self, name: str, line: int | None = None):
        self.name = name
        super().__init__(f"undefined label {name!r}", line)


class RegClass(Enum):
    GPR64 = "gpr64"
    SIMD = "simd"


_GPR_NAMES = (
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
    "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
)
_GPR_INDEX = {name: i for i, name in enumerate(_GPR_NAMES)}


@dataclass(frozen=True, slots=True)
class Register:
    cls: RegClass
    index: int

    def __post_init__(self) -> None:
        if not 0 <= self.index < 16:
            raise ValueError(f"register index {self.index} out of range")

    @property
    def name(self) -> str:
        if self.cls is RegClass.GPR64:
            return _GPR_NAMES[self.index]
        return f"xmm{self.index}"


def gpr(name_or_index: str | int) -> Register:
    if isinstance(name_or_index, int):
        return Register(RegClass.GPR64, name_or_index)
    idx = _GPR_INDEX.get(name_or_index.lower())
    if idx is None:
        raise ValueError(f"not a general purpose register: {name_or_index!r}")
    return Register(RegClass.GPR64, idx)


def xmm(index: int) -> Register:
    return Register(RegClass.SIMD, index)


RAX = gpr("rax")
RSP = gpr("rsp")
RDI = gpr("rdi")


@dataclass(frozen=True, slots=True)
class AddressExpr:
    """Memory operand: optional symbol, constant offset, optional GPR index."""

    symbol: str | None = None
    offset: int = 0
    index: Register | None = None

    def render(self) -> str:
        parts: list[str] = []
        if self.symbol is not None:
            parts.append(self.symbol)
        if self.index is not None:
            parts.append(self.index.name)
        if self.offset or not parts:
            parts.append(str(self.offset))
        return "[" + " + ".join(parts) + "]"


# --- instruction variants -------------------------------------------------

@dataclass(slots=True)
class MovqGprFromSimd:
    """Read one 64-bit lane of a SIMD register into a GPR (lane 0 = low qword)."""

    gpr: Register
    simd: Register
    lane: int = 0

    def text(self) -> str:
        if self.lane:
            return f"movq {self.gpr.name}, {self.simd.name}, {self.lane}"
        return f"movq {self.gpr.name}, {self.simd.name}"


@dataclass(slots=True)
class MovSimdImm:
    simd: Register
    value: int

    def text(self) -> str:
        n = max(1, (self.value.bit_length() + 7) // 8)
        dump = self.value.to_bytes(n, "little").hex()
        return f"movimm {self.simd.name}, {dump}"


@dataclass(slots=True)
class AndImm:
    gpr: Register
    imm: int

    def text(self) -> str:
        return f"and {self.gpr.name}, {self.imm}"


@dataclass(slots=True)
class ShlImm:
    gpr: Register
    imm: int

    def text(self) -> str:
        return f"shl {self.gpr.name}, {self.imm}"


@dataclass(slots=True)
class ShrImm:
    gpr: Register
    imm: int

    def text(self) -> str:
        return f"shr {self.gpr.name}, {self.imm}"


@dataclass(slots=True)
class StoreDword:
    """Store through base + index register, the probe-array touch."""

    addr: AddressExpr
    value: int

    def text(self) -> str:
        return f"mov dword {self.addr.render()}, {self.value}"


@dataclass(slots=True)
class StoreDwordAbs:
    """Store to a fixed (or symbolic) address; address 0 is the deliberate #PF."""

    addr: AddressExpr
    value: int

    def text(self) -> str:
        return f"mov dword {self.addr.render()}, {self.value}"


@dataclass(slots=True)
class Load:
    gpr: Register
    addr: AddressExpr

    def text(self) -> str:
        return f"mov {self.gpr.name}, {self.addr.render()}"


@dataclass(slots=True)
class Clflush:
    addr: AddressExpr

    def text(self) -> str:
        return f"clflush {self.addr.render()}"


@dataclass(slots=True)
class ProbeTimed:
    """Timed reload: loads the address and leaves the modeled latency in a GPR."""

    gpr: Register
    addr: AddressExpr

    def text(self) -> str:
        return f"probe {self.gpr.name}, {self.addr.render()}"


@dataclass(slots=True)
class Xbegin:
    label: str

    def text(self) -> str:
        return f"xbegin {self.label}"


@dataclass(slots=True)
class Xend:
    def text(self) -> str:
        return "xend"


@dataclass(slots=True)
class Xabort:
    def text(self) -> str:
        return "xabort"


@dataclass(slots=True)
class Call:
    label: str

    def text(self) -> str:
        return f"call {self.label}"


@dataclass(slots=True)
class Ret:
    def text(self) -> str:
        return "ret"


@dataclass(slots=True)
class Jmp:
    label: str

    def text(self) -> str:
        return f"jmp {self.label}"


@dataclass(slots=True)
class Pause:
    def text(self) -> str:
        return "pause"


@dataclass(slots=True)
class StoreRetAddr:
    """``mov [rsp], label``: overwrite the in-memory return slot, leaving the RSB stale."""

    label: str

    def text(self) -> str:
        return f"mov [rsp], {self.label}"


@dataclass(slots=True)
class Pxor:
    dst: Register
    src: Register

    def text(self) -> str:
        return f"pxor {self.dst.name}, {self.src.name}"


@dataclass(slots=True)
class Aesenc:
    dst: Register
    src: Register

    def text(self) -> str:
        return f"aesenc {self.dst.name}, {self.src.name}"


@dataclass(slots=True)
class Aesenclast:
    dst: Register
    src: Register

    def text(self) -> str:
        return f"aesenclast {self.dst.name}, {self.src.name}"


@dataclass(slots=True)
class Yield:
    """End the process's turn and return control to the scheduler."""

    def text(self) -> str:
        return "yield"


Instruction = (
    MovqGprFromSimd | MovSimdImm | AndImm | ShlImm | ShrImm
    | StoreDword | StoreDwordAbs | Load | Clflush | ProbeTimed
    | Xbegin | Xend | Xabort | Call | Ret | Jmp | Pause
    | StoreRetAddr | Pxor | Aesenc | Aesenclast | Yield
)

# Instruction types whose architectural execution needs the FPU enabled.
SIMD_TOUCHING = (MovqGprFromSimd, MovSimdImm, Pxor, Aesenc, Aesenclast)


@dataclass(slots=True)
class Program:
    instructions: list[Instruction] = field(default_factory=list)
    labels: dict[str, int] = field(default_factory=dict)
    entry: int = 0

    def validate(self) -> Program:
        n = len(self.instructions)
        if not 0 <= self.entry <= n:
            raise ValueError(f"entry {self.entry} outside program of {n} instructions")
        for name, idx in self.labels.items():
            if not 0 <= idx <= n:
                raise ValueError(f"label {name!r} binds outside the program")
        for ins in self.instructions:
            target = getattr(ins, "label", None)
            if target is not None and target not in self.labels:
                raise UndefinedLabel(target)
        return self


# --- parsing ----------------------------------------------------------------

def _parse_imm(token: str, line: int) -> int:
    try:
        value = int(token, 0)
    except ValueError:
        raise BadOperand(f"expected an integer, got {token!r}", line) from None
    if value < 0:
        raise BadOperand(f"negative immediate {token!r}", line)
    return value


def _parse_gpr(token: str, line: int) -> Register:
    idx = _GPR_INDEX.get(token.lower())
    if idx is None:
        raise BadOperand(f"expected a general purpose register, got {token!r}", line)
    return Register(RegClass.GPR64, idx)


_SIMD_RE = re.compile(r"^(xmm|ymm|zmm)([0-9]|1[0-5])$", re.IGNORECASE)


def _parse_simd(token: str, line: int) -> Register:
    m = _SIMD_RE.match(token)
    if not m:
        raise BadOperand(f"expected a SIMD register, got {token!r}", line)
    return Register(RegClass.SIMD, int(m.group(2)))


def _strip_dword(token: str) -> str:
    low = token.lower()
    if low.startswith("dword"):
        return token[5:].strip()
    return token


def _parse_addr(token: str, line: int) -> AddressExpr:
    token = _strip_dword(token)
    if not (token.startswith("[") and token.endswith("]")):
        raise BadOperand(f"expected a memory operand, got {token!r}", line)
    symbol: str | None = None
    offset = 0
    index: Register | None = None
    for part in token[1:-1].split("+"):
        part = part.strip()
        if not part:
            raise BadOperand(f"empty term in address {token!r}", line)
        if part.lower() in _GPR_INDEX:
            if index is not None:
                raise BadOperand(f"more than one index register in {token!r}", line)
            index = Register(RegClass.GPR64, _GPR_INDEX[part.lower()])
        elif _IDENT_RE.match(part):
            if symbol is not None:
                raise BadOperand(f"more than one symbol in {token!r}", line)
            symbol = part
        else:
            offset += _parse_imm(part, line)
    return AddressExpr(symbol, offset, index)


def _is_mem(token: str) -> bool:
    return _strip_dword(token).startswith("[")


def _parse_mov(ops: list[str], line: int) -> Instruction:
    if len(ops) != 2:
        raise BadOperand("mov takes two operands", line)
    dst, src = ops
    if _is_mem(dst):
        addr = _parse_addr(dst, line)
        if addr.index is not None and addr.index.index == _GPR_INDEX["rsp"]:
            # mov [rsp], label: the retpoline return-slot overwrite
            if addr.symbol is not None or addr.offset != 0:
                raise BadOperand("stores through rsp support only [rsp]", line)
            if not _IDENT_RE.match(src) or src.lower() in _GPR_INDEX:
                raise BadOperand(f"[rsp] store expects a label, got {src!r}", line)
            return StoreRetAddr(src)
        if _IDENT_RE.match(src) and src.lower() not in _GPR_INDEX:
            raise BadOperand("label stores are only supported through [rsp]", line)
        value = _parse_imm(src, line)
        if addr.index is not None:
            return StoreDword(addr, value)
        return StoreDwordAbs(addr, value)
    if _is_mem(src):
        return Load(_parse_gpr(dst, line), _parse_addr(src, line))
    raise BadOperand("unsupported mov form (register-to-register moves are not modeled)", line)


def _parse_movq(ops: list[str], line: int) -> Instruction:
    if len(ops) not in (2, 3):
        raise BadOperand("movq takes a GPR, a SIMD register, and an optional lane", line)
    dst = _parse_gpr(ops[0], line)
    src = _parse_simd(ops[1], line)
    lane = _parse_imm(ops[2], line) if len(ops) == 3 else 0
    if lane >= 8:
        raise BadOperand(f"lane {lane} exceeds the widest supported register", line)
    return MovqGprFromSimd(dst, src, lane)


def _parse_movimm(ops: list[str], line: int) -> Instruction:
    if len(ops) != 2:
        raise BadOperand("movimm takes a SIMD register and a hex byte string", line)
    dst = _parse_simd(ops[0], line)
    dump = ops[1]
    if not _HEX_RE.match(dump) or len(dump) % 2 or len(dump) > 128:
        raise BadOperand(
            f"movimm immediate must be an even-length hex byte string of at most "
            f"128 digits, got {ops[1]!r}", line)
    return MovSimdImm(dst, int.from_bytes(bytes.fromhex(dump), "little"))


def _parse_shift(kind: type, ops: list[str], line: int) -> Instruction:
    if len(ops) != 2:
        raise BadOperand("shift takes a GPR and an immediate", line)
    imm = _parse_imm(ops[1], line)
    if imm > 63:
        raise BadOperand(f"shift amount {imm} outside 0..63", line)
    return kind(_parse_gpr(ops[0], line), imm)


def _parse_and(ops: list[str], line: int) -> Instruction:
    if len(ops) != 2:
        raise BadOperand("and takes a GPR and an immediate", line)
    imm = _parse_imm(ops[1], line)
    if imm > M64:
        raise BadOperand("and immediate does not fit in 64 bits", line)
    return AndImm(_parse_gpr(ops[0], line), imm)


def _parse_label_op(kind: type, ops: list[str], line: int) -> Instruction:
    if len(ops) != 1 or not _IDENT_RE.match(ops[0]):
        raise BadOperand("expected a single label operand", line)
    return kind(ops[0])


def _parse_simd_pair(kind: type, ops: list[str], line: int) -> Instruction:
    if len(ops) != 2:
        raise BadOperand("expected two SIMD register operands", line)
    return kind(_parse_simd(ops[0], line), _parse_simd(ops[1], line))


def _parse_bare(kind: type, ops: list[str], line: int) -> Instruction:
    if ops:
        raise BadOperand("instruction takes no operands", line)
    return kind()


def _parse_instruction(mnemonic: str, ops: list[str], line: int) -> Instruction:
    m = mnemonic.lower()
    if m == "mov":
        return _parse_mov(ops, line)
    if m == "movq":
        return _parse_movq(ops, line)
    if m == "movimm":
        return _parse_movimm(ops, line)
    if m == "and":
        return _parse_and(ops, line)
    if m == "shl":
        return _parse_shift(ShlImm, ops, line)
    if m == "shr":
        return _parse_shift(ShrImm, ops, line)
    if m == "clflush":
        if len(ops) != 1:
            raise BadOperand("clflush takes one memory operand", line)
        return Clflush(_parse_addr(ops[0], line))
    if m == "probe":
        if len(ops) != 2:
            raise BadOperand("probe takes a GPR and a memory operand", line)
        return ProbeTimed(_parse_gpr(ops[0], line), _parse_addr(ops[1], line))
    if m == "xbegin":
        return _parse_label_op(Xbegin, ops, line)
    if m == "xend":
        return _parse_bare(Xend, ops, line)
    if m == "xabort":
        return _parse_bare(Xabort, ops, line)
    if m == "call":
        return _parse_label_op(Call, ops, line)
    if m == "ret":
        return _parse_bare(Ret, ops, line)
    if m == "jmp":
        return _parse_label_op(Jmp, ops, line)
    if m == "pause":
        return _parse_bare(Pause, ops, line)
    if m == "pxor":
        return _parse_simd_pair(Pxor, ops, line)
    if m == "aesenc":
        return _parse_simd_pair(Aesenc, ops, line)
    if m == "aesenclast":
        return _parse_simd_pair(Aesenclast, ops, line)
    if m == "yield":
        return _parse_bare(Yield, ops, line)
    raise UnknownMnemonic(f"unknown mnemonic {mnemonic!r}", line)


def assemble(text: str) -> Program:
    """Parse assembly text into a Program with resolved label bindings.

    Labels bind to the index of the next instruction; a trailing label
    binds one past the last instruction, which executes as a halt.
    """
    instructions: list[Instruction] = []
    labels: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        if line.endswith(":"):
            name = line[:-1].strip()
            if not _IDENT_RE.match(name):
                raise BadOperand(f"bad label name {name!r}", lineno)
            if name in labels:
                raise DuplicateLabel(name, lineno)
            labels[name] = len(instructions)
            continue
        mnemonic, _, rest = line.partition(" ")
        ops = [o.strip() for o in rest.split(",")] if rest.strip() else []
        instructions.append(_parse_instruction(mnemonic, ops, lineno))
    program = Program(instructions, labels)
    for ins in instructions:
        target = getattr(ins, "label", None)
        if target is not None and target not in labels:
            raise UndefinedLabel(target)
    return program


def disassemble(program: Program) -> str:
    """Render a Program back to canonical dialect text.

    ``assemble(disassemble(p))`` reproduces p's instruction sequence and
    label bindings exactly (for programs with the default entry point).
    """
    by_index: dict[int, list[str]] = {}
    for name, idx in program.labels.items():
        by_index.setdefault(idx, []).append(name)
    lines: list[str] = []
    for i, ins in enumerate(program.instructions):
        for name in sorted(by_index.get(i, ())):
            lines.append(f"{name}:")
        lines.append(ins.text())
    for name in sorted(by_index.get(len(program.instructions), ())):
        lines.append(f"{name}:")
    return "\n".join(lines) + ("\n" if lines else "")
