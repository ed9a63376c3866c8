"""Single-hardware-thread machine model: architectural interpreter, transient
execution engine, TSX transactions, and the return stack buffer.

The asymmetry this module exists to model: when an instruction faults, is
mispredicted, or aborts a transaction, everything it and its successors
did to registers, memory, and the stack is discarded, but every cache
line they touched stays touched. ``step`` executes one instruction
architecturally; ``speculate_past`` runs the doomed continuation on a
scratch register file and leaves only cache footprints behind.

The physical SIMD register file lives here (``arch.simd``). Under lazy
FPU switching the scheduler deliberately leaves a previous process's
values in it, which is exactly what the transient engine gets to read.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, fields

from . import aes
from .cache import CacheState
from .isa import (
    M64,
    AddressExpr,
    Aesenc,
    Aesenclast,
    AndImm,
    Call,
    Clflush,
    Jmp,
    Load,
    MovqGprFromSimd,
    MovSimdImm,
    Pause,
    ProbeTimed,
    Program,
    Pxor,
    Ret,
    ShlImm,
    ShrImm,
    StoreDword,
    StoreDwordAbs,
    StoreRetAddr,
    Xabort,
    Xbegin,
    Xend,
    Yield,
)

HALTED = -1

M128 = (1 << 128) - 1


class SimulationError(RuntimeError):
    """A bug in scenario construction, not a modeled architectural fault."""


class InvalidRip(SimulationError):
    pass


class StackUnderflow(SimulationError):
    pass


class UnknownSymbol(SimulationError):
    pass


class NestedTransaction(SimulationError):
    pass


class XendOutsideTransaction(SimulationError):
    pass


@dataclass(slots=True)
class ControlState:
    """cr0_ts disables the FPU while preserving its contents; cpu_vulnerable
    selects whether transient reads of a disabled FPU see the stale physical
    values (true, the flawed silicon) or all zeros (false, fixed silicon)."""

    cr0_ts: bool = False
    cpu_vulnerable: bool = True


@dataclass(slots=True)
class CostModel:
    """Per-event cycle charges.

    The defaults are calibration constants fitted so that the end-to-end
    per-register leak costs of the three suppression methods land at
    roughly 334K / 25.5K / 23.9K cycles (page fault / TSX / retpoline)
    with the default gadgets; they are not per-event hardware truth. In
    particular the charged cache costs are deliberately far below the
    latencies the channel *reports* (LatencyModel), because a real attack
    overlaps its flushes and reloads.
    """

    plain_cycles: int = 1
    simd_cycles: int = 2
    cache_hit_cycles: int = 1
    cache_miss_cycles: int = 1
    clflush_cycles: int = 1
    nm_light_cycles: int = 250
    nm_full_cycles: int = 1100
    pf_signal_cycles: int = 1300
    tsx_begin_cycles: int = 21
    tsx_abort_cycles: int = 75
    retpoline_resolve_cycles: int = 87
    context_switch_cycles: int = 900

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be at least 1 cycle")


@dataclass(frozen=True, slots=True)
class NmFault:
    instruction_index: int


@dataclass(frozen=True, slots=True)
class PfFault:
    address: int


@dataclass(frozen=True, slots=True)
class StepOutcome:
    kind: str  # one of "retired", "fault", "tsx_aborted", "yielded", "halted"
    fault: NmFault | PfFault | None = None
    abort_target: int | None = None


RETIRED = StepOutcome("retired")
YIELDED = StepOutcome("yielded")
HALTED_OUTCOME = StepOutcome("halted")


@dataclass(slots=True)
class ArchState:
    """Architectural register file, call stack, and sparse byte memory."""

    gprs: list[int] = field(default_factory=lambda: [0] * 16)
    simd: list[int] = field(default_factory=lambda: [0] * 16)
    rip: int = 0
    stack: list[int] = field(default_factory=list)
    memory: dict[int, int] = field(default_factory=dict)

    def copy(self) -> ArchState:
        return ArchState(self.gprs[:], self.simd[:], self.rip,
                         self.stack[:], dict(self.memory))


class Rsb:
    """Return stack buffer: LIFO predictor of ret targets with fixed capacity;
    pushing at capacity silently drops the oldest entry."""

    __slots__ = ("_entries",)

    def __init__(self, capacity: int = 16):
        self._entries: deque[int] = deque(maxlen=capacity)

    def push(self, target: int) -> None:
        self._entries.append(target)

    def pop(self) -> int | None:
        if not self._entries:
            return None
        return self._entries.pop()

    def copy(self) -> Rsb:
        dup = Rsb(self._entries.maxlen or 16)
        dup._entries.extend(self._entries)
        return dup

    def __len__(self) -> int:
        return len(self._entries)


@dataclass(slots=True)
class TsxState:
    """Present exactly while a transaction is active."""

    abort_target: int
    checkpoint: ArchState


class Machine:
    def __init__(
        self,
        *,
        simd_width: int = 256,
        cache: CacheState | None = None,
        costs: CostModel | None = None,
        control: ControlState | None = None,
        symbols: dict[str, int] | None = None,
        speculation_window: int = 64,
        rsb_capacity: int = 16,
        stack_limit: int = 1024,
        forbidden_below: int = 4096,
    ):
        if simd_width not in (128, 256, 512):
            raise ValueError(f"unsupported SIMD width {simd_width}")
        self.simd_width = simd_width
        self.simd_mask = (1 << simd_width) - 1
        self.lanes = simd_width // 64
        self.arch = ArchState()
        self.control = control or ControlState()
        self.costs = costs or CostModel()
        self.cache = cache or CacheState()
        self.symbols = dict(symbols or {})
        self.rsb = Rsb(rsb_capacity)
        self.tsx: TsxState | None = None
        self.cycles = 0
        self.speculation_window = speculation_window
        self.stack_limit = stack_limit
        self.forbidden_below = forbidden_below

    # --- plumbing ---------------------------------------------------------

    def charge(self, cycles: int) -> None:
        self.cycles += cycles

    def resolve(self, addr: AddressExpr, gprs: list[int] | None = None) -> int:
        base = 0
        if addr.symbol is not None:
            try:
                base = self.symbols[addr.symbol]
            except KeyError:
                raise UnknownSymbol(f"symbol {addr.symbol!r} is not bound") from None
        if addr.index is not None:
            base += (gprs if gprs is not None else self.arch.gprs)[addr.index.index]
        return (base + addr.offset) & M64

    def _forbidden(self, address: int) -> bool:
        return address < self.forbidden_below

    def _mem_cost(self, address: int) -> int:
        if self.cache.is_hot(address):
            return self.costs.cache_hit_cycles
        return self.costs.cache_miss_cycles

    def flush_address(self, address: int) -> None:
        """Evict the containing line, charging the clflush cost (what a
        Clflush instruction does, callable directly by a channel driver)."""
        self.charge(self.costs.clflush_cycles)
        self.cache.flush(address)

    def probe_address(self, address: int) -> int:
        """Timed reload of one address; returns the modeled latency and
        leaves the line hot (what ProbeTimed does)."""
        self.charge(self._mem_cost(address))
        return self.cache.probe(address)

    # --- architectural step -------------------------------------------------

    def step(self, program: Program) -> StepOutcome:
        rip = self.arch.rip
        count = len(program.instructions)
        if rip == HALTED:
            return HALTED_OUTCOME
        if rip == count:
            self.arch.rip = HALTED
            return HALTED_OUTCOME
        if not 0 <= rip < count:
            raise InvalidRip(f"rip {rip} outside program of {count} instructions")
        ins = program.instructions[rip]
        handler = _DISPATCH.get(type(ins))
        if handler is None:
            raise SimulationError(f"no handler for {type(ins).__name__}")
        return handler(self, ins, program)

    def _fault(self, program: Program, fault: NmFault | PfFault) -> StepOutcome:
        """Common fault path: the transient continuation runs first, then the
        fault either aborts an active transaction (never reaching the OS) or
        is surfaced for delivery. The faulting instruction retires nothing."""
        if isinstance(fault, NmFault):
            # The gated SIMD instruction itself executes transiently; that
            # stale read is the entire leak.
            start = self.arch.rip
        else:
            start = self.arch.rip + 1
        self.speculate_past(program, start)
        if self.tsx is not None:
            target = self._tsx_rollback()
            self.charge(self.costs.tsx_abort_cycles)
            return StepOutcome("tsx_aborted", abort_target=target)
        self.charge(self.costs.plain_cycles)
        return StepOutcome("fault", fault=fault)

    def _retire(self, cost: int) -> StepOutcome:
        self.charge(cost)
        self.arch.rip += 1
        return RETIRED

    # --- per-instruction semantics -----------------------------------------

    def _step_movq(self, ins: MovqGprFromSimd, program: Program) -> StepOutcome:
        if self.control.cr0_ts:
            return self._fault(program, NmFault(self.arch.rip))
        if ins.lane >= self.lanes:
            raise SimulationError(f"lane {ins.lane} outside {self.simd_width}-bit registers")
        self.arch.gprs[ins.gpr.index] = (self.arch.simd[ins.simd.index] >> (64 * ins.lane)) & M64
        return self._retire(self.costs.simd_cycles)

    def _step_movimm(self, ins: MovSimdImm, program: Program) -> StepOutcome:
        if self.control.cr0_ts:
            return self._fault(program, NmFault(self.arch.rip))
        self.arch.simd[ins.simd.index] = ins.value & self.simd_mask
        return self._retire(self.costs.simd_cycles)

    def _step_and(self, ins: AndImm, program: Program) -> StepOutcome:
        self.arch.gprs[ins.gpr.index] &= ins.imm
        return self._retire(self.costs.plain_cycles)

    def _step_shl(self, ins: ShlImm, program: Program) -> StepOutcome:
        self.arch.gprs[ins.gpr.index] = (self.arch.gprs[ins.gpr.index] << ins.imm) & M64
        return self._retire(self.costs.plain_cycles)

    def _step_shr(self, ins: ShrImm, program: Program) -> StepOutcome:
        self.arch.gprs[ins.gpr.index] >>= ins.imm
        return self._retire(self.costs.plain_cycles)

    def _step_store(self, ins: StoreDword | StoreDwordAbs, program: Program) -> StepOutcome:
        address = self.resolve(ins.addr)
        if self._forbidden(address):
            return self._fault(program, PfFault(address))
        cost = self.costs.plain_cycles + self._mem_cost(address)
        self.cache.touch(address)
        value = ins.value & 0xFFFFFFFF
        memory = self.arch.memory
        for i in range(4):
            memory[address + i] = (value >> (8 * i)) & 0xFF
        return self._retire(cost)

    def _step_load(self, ins: Load, program: Program) -> StepOutcome:
        address = self.resolve(ins.addr)
        if self._forbidden(address):
            return self._fault(program, PfFault(address))
        cost = self.costs.plain_cycles + self._mem_cost(address)
        self.cache.touch(address)
        memory = self.arch.memory
        value = 0
        for i in range(8):
            value |= memory.get(address + i, 0) << (8 * i)
        self.arch.gprs[ins.gpr.index] = value
        return self._retire(cost)

    def _step_clflush(self, ins: Clflush, program: Program) -> StepOutcome:
        self.flush_address(self.resolve(ins.addr))
        self.arch.rip += 1
        return RETIRED

    def _step_probe(self, ins: ProbeTimed, program: Program) -> StepOutcome:
        self.arch.gprs[ins.gpr.index] = self.probe_address(self.resolve(ins.addr))
        self.arch.rip += 1
        return RETIRED

    # --- TSX ----------------------------------------------------------------

    def tsx_begin(self, abort_target: int) -> None:
        if self.tsx is not None:
            raise NestedTransaction("transactions do not nest")
        self.tsx = TsxState(abort_target, self.arch.copy())

    def tsx_end(self) -> None:
        if self.tsx is None:
            raise XendOutsideTransaction("xend with no active transaction")
        self.tsx = None

    def tsx_abort(self) -> int:
        if self.tsx is None:
            raise XendOutsideTransaction("xabort with no active transaction")
        return self._tsx_rollback()

    def _tsx_rollback(self) -> int:
        assert self.tsx is not None
        state = self.tsx
        self.arch = state.checkpoint
        self.arch.rip = state.abort_target
        self.tsx = None
        return state.abort_target

    def _step_xbegin(self, ins: Xbegin, program: Program) -> StepOutcome:
        if self.tsx is not None:
            raise NestedTransaction("transactions do not nest")
        target = program.labels[ins.label]
        self.charge(self.costs.tsx_begin_cycles)
        self.arch.rip += 1
        self.tsx_begin(target)
        return RETIRED

    def _step_xend(self, ins: Xend, program: Program) -> StepOutcome:
        self.tsx_end()
        return self._retire(self.costs.plain_cycles)

    def _step_xabort(self, ins: Xabort, program: Program) -> StepOutcome:
        target = self.tsx_abort()
        self.charge(self.costs.tsx_abort_cycles)
        return StepOutcome("tsx_aborted", abort_target=target)

    # --- control flow ---------------------------------------------------------

    def _step_call(self, ins: Call, program: Program) -> StepOutcome:
        if len(self.arch.stack) >= self.stack_limit:
            raise SimulationError("call stack limit exceeded")
        return_index = self.arch.rip + 1
        self.rsb.push(return_index)
        self.arch.stack.append(return_index)
        self.charge(self.costs.plain_cycles)
        self.arch.rip = program.labels[ins.label]
        return RETIRED

    def ret_with_rsb(self, program: Program) -> StepOutcome:
        """Return using the RSB prediction. A mismatch between the predicted
        target and the in-memory return slot runs the predicted path
        transiently, then resumes architecturally at the actual target with
        no fault delivered."""
        if not self.arch.stack:
            raise StackUnderflow("ret with an empty stack")
        actual = self.arch.stack.pop()
        predicted = self.rsb.pop()
        if predicted is None or predicted == actual:
            # Empty-RSB policy: predict fall-through to the actual target.
            self.charge(self.costs.plain_cycles)
        else:
            self.speculate_past(program, predicted)
            self.charge(self.costs.plain_cycles + self.costs.retpoline_resolve_cycles)
        self.arch.rip = actual
        return RETIRED

    def _step_ret(self, ins: Ret, program: Program) -> StepOutcome:
        return self.ret_with_rsb(program)

    def _step_jmp(self, ins: Jmp, program: Program) -> StepOutcome:
        self.charge(self.costs.plain_cycles)
        self.arch.rip = program.labels[ins.label]
        return RETIRED

    def _step_pause(self, ins: Pause, program: Program) -> StepOutcome:
        return self._retire(self.costs.plain_cycles)

    def _step_store_ret_addr(self, ins: StoreRetAddr, program: Program) -> StepOutcome:
        if not self.arch.stack:
            raise StackUnderflow("[rsp] store with an empty stack")
        self.arch.stack[-1] = program.labels[ins.label]
        return self._retire(self.costs.plain_cycles)

    def _step_yield(self, ins: Yield, program: Program) -> StepOutcome:
        if self.tsx is not None:
            # A scheduler trap inside a transaction aborts it, like any
            # other kernel entry on real hardware.
            target = self._tsx_rollback()
            self.charge(self.costs.tsx_abort_cycles)
            return StepOutcome("tsx_aborted", abort_target=target)
        self.charge(self.costs.plain_cycles)
        self.arch.rip += 1
        return YIELDED

    # --- SIMD arithmetic -------------------------------------------------------

    def _simd_low128(self, ins, compute) -> None:
        simd = self.arch.simd
        dst = simd[ins.dst.index]
        result = compute(dst & M128, simd[ins.src.index] & M128)
        # Legacy SSE forms: the low 128 bits are replaced, upper bits kept.
        simd[ins.dst.index] = (dst & ~M128 & self.simd_mask) | result

    def _step_pxor(self, ins: Pxor, program: Program) -> StepOutcome:
        if self.control.cr0_ts:
            return self._fault(program, NmFault(self.arch.rip))
        self._simd_low128(ins, lambda d, s: d ^ s)
        return self._retire(self.costs.simd_cycles)

    def _step_aesenc(self, ins: Aesenc, program: Program) -> StepOutcome:
        if self.control.cr0_ts:
            return self._fault(program, NmFault(self.arch.rip))
        self._simd_low128(ins, lambda d, s: aes.aes_round(d, s, last=False))
        return self._retire(self.costs.simd_cycles)

    def _step_aesenclast(self, ins: Aesenclast, program: Program) -> StepOutcome:
        if self.control.cr0_ts:
            return self._fault(program, NmFault(self.arch.rip))
        self._simd_low128(ins, lambda d, s: aes.aes_round(d, s, last=True))
        return self._retire(self.costs.simd_cycles)

    # --- transient engine -------------------------------------------------------

    def speculate_past(self, program: Program, start: int) -> None:
        """Run the continuation at ``start`` transiently: up to the speculation
        window on a scratch copy of the architectural state, touching the
        cache but changing nothing else.

        SIMD reads never fault here; with cr0_ts set they observe the current
        physical register file (on vulnerable silicon) or zeros (on fixed
        silicon) — that choice is baked into the scratch copy up front, so
        later reads and in-window forwarding fall out naturally. Speculation
        ends silently at a faulting memory access, a yield, a transaction
        boundary, a pause that closes a loop already taken once, or window
        exhaustion. The scratch state is then discarded.
        """
        arch = self.arch
        gprs = arch.gprs[:]
        if self.control.cr0_ts and not self.control.cpu_vulnerable:
            simd = [0] * 16
        else:
            simd = arch.simd[:]
        stack = arch.stack[:]
        memory = dict(arch.memory)
        rsb = self.rsb.copy()
        cache = self.cache
        labels = program.labels
        instructions = program.instructions
        count = len(instructions)
        rip = start
        paused: set[int] = set()

        for _ in range(self.speculation_window):
            if not 0 <= rip < count:
                break
            ins = instructions[rip]
            kind = type(ins)
            if kind is MovqGprFromSimd:
                if ins.lane >= self.lanes:
                    break
                gprs[ins.gpr.index] = (simd[ins.simd.index] >> (64 * ins.lane)) & M64
            elif kind is MovSimdImm:
                simd[ins.simd.index] = ins.value & self.simd_mask
            elif kind is AndImm:
                gprs[ins.gpr.index] &= ins.imm
            elif kind is ShlImm:
                gprs[ins.gpr.index] = (gprs[ins.gpr.index] << ins.imm) & M64
            elif kind is ShrImm:
                gprs[ins.gpr.index] >>= ins.imm
            elif kind is StoreDword or kind is StoreDwordAbs:
                address = self.resolve(ins.addr, gprs)
                if self._forbidden(address):
                    break  # a second fault ends speculation silently
                cache.touch(address)
                value = ins.value & 0xFFFFFFFF
                for i in range(4):
                    memory[address + i] = (value >> (8 * i)) & 0xFF
            elif kind is Load:
                address = self.resolve(ins.addr, gprs)
                if self._forbidden(address):
                    break
                cache.touch(address)
                value = 0
                for i in range(8):
                    value |= memory.get(address + i, 0) << (8 * i)
                gprs[ins.gpr.index] = value
            elif kind is Clflush:
                cache.flush(self.resolve(ins.addr, gprs))
            elif kind is ProbeTimed:
                gprs[ins.gpr.index] = cache.probe(self.resolve(ins.addr, gprs))
            elif kind is Pause:
                if rip in paused:
                    break  # the capture loop closed; nothing new to touch
                paused.add(rip)
            elif kind is Jmp:
                rip = labels[ins.label]
                continue
            elif kind is Call:
                if len(stack) >= self.stack_limit:
                    break
                rsb.push(rip + 1)
                stack.append(rip + 1)
                rip = labels[ins.label]
                continue
            elif kind is Ret:
                if not stack:
                    break
                rsb.pop()
                # No nested misprediction: transient returns follow the
                # in-memory slot.
                rip = stack.pop()
                continue
            elif kind is StoreRetAddr:
                if not stack:
                    break
                stack[-1] = labels[ins.label]
            elif kind is Pxor:
                d = simd[ins.dst.index]
                simd[ins.dst.index] = (d & ~M128 & self.simd_mask) | (
                    (d ^ simd[ins.src.index]) & M128)
            elif kind is Aesenc or kind is Aesenclast:
                d = simd[ins.dst.index]
                result = aes.aes_round(d & M128, simd[ins.src.index] & M128,
                                       last=kind is Aesenclast)
                simd[ins.dst.index] = (d & ~M128 & self.simd_mask) | result
            else:
                # Yield, Xbegin, Xend, Xabort: transaction boundaries and
                # scheduler traps end speculation.
                break
            rip += 1


_DISPATCH = {
    MovqGprFromSimd: Machine._step_movq,
    MovSimdImm: Machine._step_movimm,
    AndImm: Machine._step_and,
    ShlImm: Machine._step_shl,
    ShrImm: Machine._step_shr,
    StoreDword: Machine._step_store,
    StoreDwordAbs: Machine._step_store,
    Load: Machine._step_load,
    Clflush: Machine._step_clflush,
    ProbeTimed: Machine._step_probe,
    Xbegin: Machine._step_xbegin,
    Xend: Machine._step_xend,
    Xabort: Machine._step_xabort,
    Call: Machine._step_call,
    Ret: Machine._step_ret,
    Jmp: Machine._step_jmp,
    Pause: Machine._step_pause,
    StoreRetAddr: Machine._step_store_ret_addr,
    Pxor: Machine._step_pxor,
    Aesenc: Machine._step_aesenc,
    Aesenclast: Machine._step_aesenclast,
    Yield: Machine._step_yield,
}
