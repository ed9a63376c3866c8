"""Leak-gadget construction and the flush, transient-execute, probe loop
that reconstructs a victim's SIMD register file group by group.

Four gadget variants exist. ``basic`` lets the #NM reach the kernel, so
every attempt costs an FPU ownership bounce and a victim turn. The other
three suppress the exception — shadowing the SIMD read behind a page
fault, wrapping it in a TSX transaction, or parking it on a mispredicted
return — so the kernel never learns the FPU was touched and the victim's
registers stay resident for the whole harvest.

The driver performs flushes and probes through the machine's channel
calls (identical semantics and costs to the Clflush/ProbeTimed
instructions) rather than through attacker code: with up to 2^8 probe
lines per attempt there are not enough architectural registers to hold
the timings, and the minimal ISA has no register store.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

from .isa import (
    AddressExpr,
    AndImm,
    Call,
    Jmp,
    MovqGprFromSimd,
    Pause,
    Program,
    RAX,
    Ret,
    ShlImm,
    ShrImm,
    StoreDword,
    StoreDwordAbs,
    StoreRetAddr,
    Xabort,
    Xbegin,
    xmm,
)
from .kernel import FpuMode, Simulation


class Variant(Enum):
    BASIC = "basic"
    PAGE_FAULT = "pf"
    TSX = "tsx"
    RETPOLINE = "retpoline"


class BadBitRange(ValueError):
    pass


INCONCLUSIVE = None

DEFAULT_PROBE_BASE = 0x200000
DEFAULT_CLOCK_HZ = 2.6e9


@dataclass
class AttackConfig:
    variant: Variant = Variant.TSX
    target_registers: tuple[int, ...] = tuple(range(16))
    register_width: int = 256
    bits_per_attempt: int = 1
    probe_base: int = DEFAULT_PROBE_BASE
    probe_symbol: str = "mem"
    probe_stride: int = 64
    probe_region: int = 256 * 64
    repeats_per_group: int = 1
    clock_hz: float = DEFAULT_CLOCK_HZ

    def __post_init__(self) -> None:
        k = self.bits_per_attempt
        if not 1 <= k <= 8 or 64 % k:
            raise BadBitRange(f"bits per attempt must divide 64 and be at most 8, got {k}")
        if self.probe_stride & (self.probe_stride - 1):
            raise BadBitRange(f"probe stride {self.probe_stride} is not a power of two")
        if (1 << k) * self.probe_stride > self.probe_region:
            raise BadBitRange("probe lines do not fit in the probe region")
        if self.repeats_per_group < 1:
            raise BadBitRange("repeats per group must be positive")


@dataclass
class AttackResult:
    recovered: dict[int, int]
    confidence: dict[int, list[float]]
    attempts: int
    inconclusive_groups: int
    total_cycles: int
    attack_cycles: int
    cycles_per_register: float
    effective_throughput: float  # bytes per second
    preemptions: int
    nm_handler_calls: int
    signal_deliveries: int


def build_gadget(
    variant: Variant,
    reg: int,
    bit_offset: int,
    k: int,
    probe_base: int | str = "mem",
    probe_stride: int = 64,
) -> Program:
    """Build one leak gadget: extract ``k`` bits of SIMD register ``reg`` at
    ``bit_offset`` and convert them into the index of a touched probe line,
    wrapped in the variant's suppression construct.

    Bits above the low qword are reached by reading a higher 64-bit lane
    (the gadget's one extension over the single-qword read); a group may
    not straddle a lane boundary.
    """
    if not 1 <= k <= 8:
        raise BadBitRange(f"bits per attempt must be in 1..8, got {k}")
    if bit_offset < 0 or bit_offset + k > 512:
        raise BadBitRange(f"bit range {bit_offset}..{bit_offset + k} out of register")
    lane, intra = divmod(bit_offset, 64)
    if intra + k > 64:
        raise BadBitRange("bit group straddles a 64-bit lane boundary")
    if probe_stride < 1 or probe_stride & (probe_stride - 1):
        raise BadBitRange(f"probe stride {probe_stride} is not a power of two")

    if isinstance(probe_base, str):
        store_addr = AddressExpr(symbol=probe_base, index=RAX)
    else:
        store_addr = AddressExpr(offset=probe_base, index=RAX)
    core: list = [MovqGprFromSimd(RAX, xmm(reg), lane)]
    if intra:
        core.append(ShrImm(RAX, intra))
    core += [
        AndImm(RAX, (1 << k) - 1),
        ShlImm(RAX, probe_stride.bit_length() - 1),
        StoreDword(store_addr, 0),
    ]

    if variant is Variant.BASIC:
        program = Program(core)
    elif variant is Variant.PAGE_FAULT:
        instructions = [StoreDwordAbs(AddressExpr(), 0)] + core
        program = Program(instructions, labels={"sigret": len(instructions)})
    elif variant is Variant.TSX:
        instructions = [Xbegin("abort")] + core + [Xabort()]
        program = Program(instructions, labels={"abort": len(instructions)})
    elif variant is Variant.RETPOLINE:
        instructions = [Call("set_up_target")] + core
        labels = {"capture": len(instructions)}
        instructions += [Pause(), Jmp("capture")]
        labels["set_up_target"] = len(instructions)
        instructions += [StoreRetAddr("destination"), Ret()]
        labels["destination"] = len(instructions)
        program = Program(instructions, labels=labels)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return program.validate()


def leak_group(
    sim: Simulation,
    gadget: Program,
    k: int,
    probe_base: int,
    probe_stride: int = 64,
    scan_all: bool = False,
) -> tuple[int | None, int]:
    """Run one leak attempt: flush the 2^k probe lines, execute the gadget
    in the attacker's context under its fault/suppression semantics, then
    time the probe lines and decode.

    Suppressed gadgets touch at most one line, so the scan stops at the
    first hit; no hit is INCONCLUSIVE (possible under noise). With
    ``scan_all`` (the basic variant) every line is timed, because the
    architectural re-execution after #NM also touches line 0: a lone hot
    line 0 decodes as value 0 — correct when the attacker's own registers
    are zeroed, but one-sided — while any hot nonzero line wins outright.

    Returns the decoded value (or INCONCLUSIVE) and the cycles spent.
    """
    machine = sim.machine
    start_cycles = machine.cycles
    lines = 1 << k
    for i in range(lines):
        machine.flush_address(probe_base + i * probe_stride)
    sim.run_gadget(gadget)
    threshold = machine.cache.latency.threshold_cycles
    hits: list[int] = []
    for i in range(lines):
        if machine.probe_address(probe_base + i * probe_stride) < threshold:
            if not scan_all:
                return i, machine.cycles - start_cycles
            hits.append(i)
    if not scan_all:
        return INCONCLUSIVE, machine.cycles - start_cycles
    nonzero = [h for h in hits if h]
    if len(nonzero) == 1:
        value: int | None = nonzero[0]
    elif not nonzero and hits:
        value = 0
    else:
        value = INCONCLUSIVE
    return value, machine.cycles - start_cycles


def _tally(votes: list[int | None]) -> int | None:
    conclusive = [v for v in votes if v is not None]
    if not conclusive:
        return None
    counts = Counter(conclusive)
    best = max(counts.values())
    winners = [v for v, n in counts.items() if n == best]
    return winners[0] if len(winners) == 1 else None


def run_attack(sim: Simulation, config: AttackConfig) -> AttackResult:
    """Reconstruct every target register, bit group by bit group.

    The victim must have run once already (under lazy switching it owns
    the FPU). Each group is attempted ``repeats_per_group`` times and
    majority-voted; a tie or an all-inconclusive group gets one extra
    attempt before being recorded inconclusive. The basic variant
    schedules the victim after every attempt so it re-acquires FPU
    ownership; if the scheduler preempts the attacker mid-register, the
    register restarts after the victim's turn.
    """
    machine, sched = sim.machine, sim.sched
    variant = config.variant
    k = config.bits_per_attempt
    scan_all = variant is Variant.BASIC
    attacker_pid = sim.attacker_pid
    nm_before = sched.nm_count(attacker_pid)
    signals_before = sched.signal_count[attacker_pid]
    total_start = machine.cycles

    attempts = 0
    attack_cycles = 0
    inconclusive_groups = 0
    preemptions = 0
    recovered: dict[int, int] = {}
    confidence: dict[int, list[float]] = {}

    def attempt(gadget: Program) -> int | None:
        nonlocal attempts, attack_cycles
        value, cycles = leak_group(sim, gadget, k, config.probe_base,
                                   config.probe_stride, scan_all=scan_all)
        attempts += 1
        attack_cycles += cycles
        if variant is Variant.BASIC:
            sim.run_victim_turn()
        return value

    for reg in config.target_registers:
        while True:
            value = 0
            confs: list[float] = []
            groups_inconclusive = 0
            preempted = False
            for offset in range(0, config.register_width, k):
                if sched.slice_exhausted(machine):
                    preempted = True
                    break
                gadget = build_gadget(variant, reg, offset, k,
                                      config.probe_symbol, config.probe_stride)
                votes = [attempt(gadget) for _ in range(config.repeats_per_group)]
                group = _tally(votes)
                if group is None:
                    votes.append(attempt(gadget))
                    group = _tally(votes)
                if group is None:
                    groups_inconclusive += 1
                    confs.append(0.0)
                else:
                    value |= group << offset
                    confs.append(votes.count(group) / len(votes))
            if preempted:
                preemptions += 1
                sim.run_victim_turn()
                continue
            break
        recovered[reg] = value
        confidence[reg] = confs
        inconclusive_groups += groups_inconclusive
        if sched.mode is FpuMode.LAZY and variant is not Variant.BASIC:
            if sched.fpu_owner != sim.victim_pid:
                raise SimulationError(
                    "FPU ownership moved during a suppressed attack loop")

    cycles_per_register = attack_cycles / len(config.target_registers)
    throughput = (config.register_width / 8) * config.clock_hz / cycles_per_register
    return AttackResult(
        recovered=recovered,
        confidence=confidence,
        attempts=attempts,
        inconclusive_groups=inconclusive_groups,
        total_cycles=machine.cycles - total_start,
        attack_cycles=attack_cycles,
        cycles_per_register=cycles_per_register,
        effective_throughput=throughput,
        preemptions=preemptions,
        nm_handler_calls=sched.nm_count(attacker_pid) - nm_before,
        signal_deliveries=sched.signal_count[attacker_pid] - signals_before,
    )
