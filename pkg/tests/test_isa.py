from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lazyfp.isa import (
    AddressExpr,
    AndImm,
    AsmError,
    BadOperand,
    Call,
    Clflush,
    DuplicateLabel,
    Jmp,
    Load,
    MovqGprFromSimd,
    MovSimdImm,
    Pause,
    ProbeTimed,
    Program,
    Pxor,
    RAX,
    Ret,
    ShlImm,
    ShrImm,
    StoreDword,
    StoreDwordAbs,
    StoreRetAddr,
    UndefinedLabel,
    UnknownMnemonic,
    Xabort,
    Xbegin,
    Xend,
    Yield,
    assemble,
    disassemble,
    gpr,
    xmm,
)

FIG_ONE_BIT_LEAK = """\
movq rax, xmm0
and  rax, 1
shl  rax, 6
mov  dword [mem + rax], 0
"""

FIG_TSX_LEAK = """\
  xbegin abort
  movq rax, xmm0
  and rax, 1
  shl rax, 6
  mov dword [mem + rax], 0
  xabort
abort:
"""


def test_assemble_one_bit_leak():
    program = assemble(FIG_ONE_BIT_LEAK)
    assert program.instructions == [
        MovqGprFromSimd(RAX, xmm(0)),
        AndImm(RAX, 1),
        ShlImm(RAX, 6),
        StoreDword(AddressExpr(symbol="mem", index=RAX), 0),
    ]
    assert program.labels == {}


def test_assemble_empty_source():
    program = assemble("")
    assert program.instructions == []
    assert program.entry == 0


def test_assemble_tsx_listing_binds_abort_past_xabort():
    program = assemble(FIG_TSX_LEAK)
    assert len(program.instructions) == 6
    assert isinstance(program.instructions[0], Xbegin)
    assert isinstance(program.instructions[5], Xabort)
    assert program.labels == {"abort": 6}


def test_assemble_retpoline_listing():
    text = """\
  call set_up_target
capture:
  pause
  jmp capture
set_up_target:
  mov [rsp], destination
  ret
destination:
"""
    program = assemble(text)
    assert program.instructions == [
        Call("set_up_target"), Pause(), Jmp("capture"),
        StoreRetAddr("destination"), Ret(),
    ]
    assert program.labels == {"capture": 1, "set_up_target": 3, "destination": 5}


def test_assemble_comments_blanks_and_crlf():
    program = assemble("; header\r\n\r\nmovq rax, xmm3 ; inline\r\nyield\r\n")
    assert program.instructions == [MovqGprFromSimd(RAX, xmm(3)), Yield()]


def test_assemble_lane_and_ymm_aliases():
    program = assemble("movq rdx, ymm5, 3")
    assert program.instructions == [MovqGprFromSimd(gpr("rdx"), xmm(5), 3)]


def test_movimm_is_little_endian_byte_dump():
    program = assemble("movimm xmm0, 0102")
    assert program.instructions == [MovSimdImm(xmm(0), 0x0201)]
    key = "2b7e151628aed2a6abf7158809cf4f3c"
    program = assemble(f"movimm xmm1, {key}")
    assert program.instructions[0].value == int.from_bytes(bytes.fromhex(key), "little")


def test_absolute_and_symbolic_stores():
    program = assemble("mov dword [0], 0\nmov dword [mem], 7\nmov dword [4096 + rcx], 1")
    assert program.instructions == [
        StoreDwordAbs(AddressExpr(), 0),
        StoreDwordAbs(AddressExpr(symbol="mem"), 7),
        StoreDword(AddressExpr(offset=4096, index=gpr("rcx")), 1),
    ]


def test_channel_instructions():
    program = assemble("clflush [mem + 64]\nprobe rbx, [mem + 64]\nmov rax, [mem + 8]")
    assert program.instructions == [
        Clflush(AddressExpr(symbol="mem", offset=64)),
        ProbeTimed(gpr("rbx"), AddressExpr(symbol="mem", offset=64)),
        Load(RAX, AddressExpr(symbol="mem", offset=8)),
    ]


def test_unknown_mnemonic_reports_line():
    with pytest.raises(UnknownMnemonic) as info:
        assemble("movq rax, xmm0\nfrobnicate rax\n")
    assert info.value.line == 2


@pytest.mark.parametrize("bad", [
    "movq xmm0, rax",          # operands swapped
    "and rax",                 # missing immediate
    "shl rax, 64",             # shift out of range
    "and rax, 18446744073709551616",  # does not fit in 64 bits
    "movimm xmm0, 123",        # odd-length hex dump
    "movimm xmm0, zz",         # not hex
    "mov rax, rbx",            # register-to-register not modeled
    "mov [rsp + 8], destination",
    "mov dword [mem + rax + rbx], 0",
    "probe rax",               # missing memory operand
    "yield now",               # stray operand
])
def test_bad_operands(bad):
    with pytest.raises(BadOperand):
        assemble(bad + ("\ndestination:" if "destination" in bad else ""))


def test_duplicate_label():
    with pytest.raises(DuplicateLabel) as info:
        assemble("abort:\nyield\nabort:\n")
    assert info.value.name == "abort"


def test_undefined_label_reports_name():
    with pytest.raises(UndefinedLabel) as info:
        assemble("jmp nowhere\n")
    assert info.value.name == "nowhere"
    with pytest.raises(UndefinedLabel):
        assemble("call set_up_target\n")
    with pytest.raises(UndefinedLabel):
        assemble("f:\nmov [rsp], gone\n")


def test_disassemble_single_instruction():
    assert disassemble(Program([MovqGprFromSimd(RAX, xmm(0))])) == "movq rax, xmm0\n"


def test_disassemble_empty_program():
    assert disassemble(Program()) == ""


def test_disassemble_one_bit_leak_matches_source():
    program = assemble(FIG_ONE_BIT_LEAK)
    want = [line.split() for line in FIG_ONE_BIT_LEAK.strip().splitlines()]
    got = [line.split() for line in disassemble(program).strip().splitlines()]
    assert got == want  # equal up to whitespace


def test_disassemble_round_trips_tsx_listing():
    program = assemble(FIG_TSX_LEAK)
    again = assemble(disassemble(program))
    assert again.instructions == program.instructions
    assert again.labels == program.labels


# --- round-trip property -----------------------------------------------------

_gpr_st = st.integers(0, 15).map(gpr)
# rsp never appears as an address index: [rsp] is the return-slot store form.
_index_gpr_st = st.integers(0, 15).filter(lambda i: i != 4).map(gpr)
_simd_st = st.integers(0, 15).map(xmm)
_label_names = st.sampled_from(["l0", "l1", "l2", "capture", "abort", "out"])
_imm32 = st.integers(0, 0xFFFFFFFF)


def _addr_st(with_index: bool):
    index = _index_gpr_st if with_index else st.none()
    return st.builds(
        AddressExpr,
        symbol=st.one_of(st.none(), st.sampled_from(["mem", "buf"])),
        offset=st.integers(0, 1 << 20),
        index=index,
    )


_instruction_st = st.one_of(
    st.builds(MovqGprFromSimd, _gpr_st, _simd_st, st.integers(0, 7)),
    st.builds(MovSimdImm, _simd_st, st.integers(0, (1 << 256) - 1)),
    st.builds(AndImm, _gpr_st, st.integers(0, (1 << 64) - 1)),
    st.builds(ShlImm, _gpr_st, st.integers(0, 63)),
    st.builds(ShrImm, _gpr_st, st.integers(0, 63)),
    st.builds(StoreDword, _addr_st(True), _imm32),
    st.builds(StoreDwordAbs, _addr_st(False), _imm32),
    st.builds(Load, _gpr_st, _addr_st(True)),
    st.builds(Clflush, _addr_st(False)),
    st.builds(ProbeTimed, _gpr_st, _addr_st(True)),
    st.builds(Xbegin, _label_names),
    st.builds(Xend),
    st.builds(Xabort),
    st.builds(Call, _label_names),
    st.builds(Ret),
    st.builds(Jmp, _label_names),
    st.builds(Pause),
    st.builds(StoreRetAddr, _label_names),
    st.builds(Pxor, _simd_st, _simd_st),
    st.builds(Yield),
)


@st.composite
def _programs(draw):
    instructions = draw(st.lists(_instruction_st, max_size=24))
    # Bind every referenced label, plus a few unreferenced ones.
    referenced = {ins.label for ins in instructions if hasattr(ins, "label")}
    extra = draw(st.sets(_label_names, max_size=2))
    labels = {name: draw(st.integers(0, len(instructions)))
              for name in referenced | extra}
    return Program(instructions, labels)


@settings(max_examples=200, deadline=None)
@given(_programs())
def test_assemble_disassemble_identity(program):
    again = assemble(disassemble(program))
    assert again.instructions == program.instructions
    assert again.labels == program.labels


def test_asm_errors_are_value_errors():
    assert issubclass(AsmError, ValueError)
    assert issubclass(UnknownMnemonic, AsmError)
