"""Operating-system model: processes, a round-robin scheduler with time
slices, lazy vs. eager FPU context switching, the device-not-available
(#NM) handler implementing the FPU-owner protocol, and page-fault signal
delivery.

Under lazy switching the kernel does not save or restore SIMD state on a
context switch; it disables the FPU (cr0_ts) and waits. The first SIMD
instruction of the incoming process traps with #NM, and only then does
the handler swap register files. Until that moment the physical SIMD
registers still hold the previous owner's values — the window every
attack in this simulator lives in. Eager mode swaps the register file on
every switch and never takes #NM.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .isa import M64, Program
from .machine import Machine, PfFault, SimulationError, StepOutcome


class FpuMode(Enum):
    LAZY = "lazy"
    EAGER = "eager"


class UnknownPid(SimulationError):
    pass


class UnhandledSignal(SimulationError):
    def __init__(self, pid: int):
        self.pid = pid
        super().__init__(f"process {pid} faulted with no signal handler")


DEFAULT_SLICE_CYCLES = 2_600_000  # ~1 ms at 2.6 GHz


@dataclass
class Process:
    pid: int
    name: str
    program: Program
    signal_handler: str | None = None
    gprs: list[int] = field(default_factory=lambda: [0] * 16)
    rip: int = 0
    stack: list[int] = field(default_factory=list)
    fpu_save_area: list[int] = field(default_factory=lambda: [0] * 16)
    halted: bool = False


@dataclass(frozen=True, slots=True)
class TraceEvent:
    cycle: int
    pid: int
    kind: str
    detail: str = ""


class Scheduler:
    """Round-robin scheduler over a fixed process table, all pinned to the
    one modeled hardware thread."""

    def __init__(
        self,
        processes: list[Process],
        mode: FpuMode = FpuMode.LAZY,
        slice_cycles: int = DEFAULT_SLICE_CYCLES,
    ):
        self.processes: dict[int, Process] = {p.pid: p for p in processes}
        if len(self.processes) != len(processes):
            raise UnknownPid("duplicate pid in process table")
        self.run_order: list[int] = [p.pid for p in processes]
        self.mode = mode
        self.slice_cycles = slice_cycles
        self.current: int | None = None
        self.fpu_owner: int | None = None
        self.slice_start = 0
        self.trace: list[TraceEvent] = []
        self.nm_light_count: dict[int, int] = {p.pid: 0 for p in processes}
        self.nm_full_count: dict[int, int] = {p.pid: 0 for p in processes}
        self.signal_count: dict[int, int] = {p.pid: 0 for p in processes}

    # --- bookkeeping -------------------------------------------------------

    def _event(self, machine: Machine, pid: int, kind: str, detail: str = "") -> None:
        self.trace.append(TraceEvent(machine.cycles, pid, kind, detail))

    def current_process(self) -> Process | None:
        if self.current is None:
            return None
        return self.processes[self.current]

    def nm_count(self, pid: int) -> int:
        return self.nm_light_count[pid] + self.nm_full_count[pid]

    def slice_exhausted(self, machine: Machine) -> bool:
        return machine.cycles - self.slice_start >= self.slice_cycles

    def next_runnable(self, after: int | None = None) -> int | None:
        order = self.run_order
        if after is None:
            after = self.current if self.current is not None else order[-1]
        start = order.index(after) if after in order else -1
        for step in range(1, len(order) + 1):
            pid = order[(start + step) % len(order)]
            if not self.processes[pid].halted:
                return pid
        return None

    # --- the three kernel entry points --------------------------------------

    def context_switch(self, machine: Machine, next_pid: int) -> None:
        """Swap GPR/rip/stack context. Lazy mode leaves the physical SIMD
        registers in place and disables the FPU; eager mode swaps the SIMD
        file too and leaves the FPU enabled."""
        nxt = self.processes.get(next_pid)
        if nxt is None:
            raise UnknownPid(f"no process {next_pid}")
        if machine.tsx is not None:
            # A timer interrupt aborts any in-flight transaction.
            machine.tsx_abort()
            machine.charge(machine.costs.tsx_abort_cycles)
            self._event(machine, self.current if self.current is not None else -1,
                        "tsx_abort", "preempted inside a transaction")
        cur = self.current_process()
        if cur is not None:
            cur.gprs = machine.arch.gprs[:]
            cur.rip = machine.arch.rip
            cur.stack = machine.arch.stack[:]
        machine.arch.gprs = nxt.gprs[:]
        machine.arch.rip = nxt.rip
        machine.arch.stack = nxt.stack[:]
        if self.mode is FpuMode.EAGER:
            if cur is not None:
                cur.fpu_save_area = machine.arch.simd[:]
            machine.arch.simd = nxt.fpu_save_area[:]
            machine.control.cr0_ts = False
            self.fpu_owner = next_pid
        else:
            # Physical SIMD registers stay as-is; the FPU is disabled even
            # when switching back to the current owner (first use takes the
            # light #NM path).
            machine.control.cr0_ts = True
        machine.charge(machine.costs.context_switch_cycles)
        prev = self.current
        self.current = next_pid
        self.slice_start = machine.cycles
        self._event(machine, next_pid, "switch",
                    f"from={prev if prev is not None else 'boot'}")

    def handle_nm(self, machine: Machine) -> None:
        """#NM handler: enable the FPU; if the faulting process is not the
        FPU owner, swap the physical SIMD file via the save areas and take
        ownership. Execution resumes at the faulting instruction."""
        if self.mode is FpuMode.EAGER:
            raise SimulationError("#NM cannot be raised under eager switching")
        cur = self.current_process()
        if cur is None:
            raise SimulationError("#NM with no current process")
        machine.control.cr0_ts = False
        if self.fpu_owner == cur.pid:
            machine.charge(machine.costs.nm_light_cycles)
            self.nm_light_count[cur.pid] += 1
            self._event(machine, cur.pid, "nm_light")
        else:
            owner = self.processes.get(self.fpu_owner) if self.fpu_owner is not None else None
            if owner is not None:
                owner.fpu_save_area = machine.arch.simd[:]
            machine.arch.simd = cur.fpu_save_area[:]
            self.fpu_owner = cur.pid
            machine.charge(machine.costs.nm_full_cycles)
            self.nm_full_count[cur.pid] += 1
            self._event(machine, cur.pid, "nm_full")

    def deliver_signal(self, machine: Machine, fault: PfFault) -> None:
        """Deliver a page fault as a signal: control lands on the process's
        registered handler label with the faulting address in rdi. A process
        without a handler is terminated. The kernel round trip may evict
        cache lines (the channel's noise knob)."""
        cur = self.current_process()
        if cur is None:
            raise SimulationError("#PF with no current process")
        handler = cur.signal_handler
        if handler is None or handler not in cur.program.labels:
            cur.halted = True
            self._event(machine, cur.pid, "killed", f"unhandled #PF at {fault.address:#x}")
            return
        self.signal_count[cur.pid] += 1
        machine.arch.rip = cur.program.labels[handler]
        machine.arch.gprs[7] = fault.address & M64  # rdi
        machine.charge(machine.costs.pf_signal_cycles)
        machine.cache.apply_eviction_noise()
        self._event(machine, cur.pid, "signal", f"#PF at {fault.address:#x}")

    # --- outcome routing ---------------------------------------------------

    def dispatch_fault(self, machine: Machine, outcome: StepOutcome) -> None:
        if outcome.kind != "fault":
            return
        if isinstance(outcome.fault, PfFault):
            self.deliver_signal(machine, outcome.fault)
        else:
            self.handle_nm(machine)

    def run(self, machine: Machine, max_cycles: int | None = None,
            max_steps: int = 1_000_000) -> list[TraceEvent]:
        """Main simulation loop: step the current process, route faults,
        preempt on slice exhaustion or yield, round-robin until every
        process halts or the budget runs out. Returns the events appended
        during this call."""
        first_event = len(self.trace)
        for _ in range(max_steps):
            if max_cycles is not None and machine.cycles >= max_cycles:
                break
            cur = self.current_process()
            if cur is None or cur.halted:
                nxt = self.next_runnable()
                if nxt is None:
                    break
                self.context_switch(machine, nxt)
                continue
            outcome = machine.step(cur.program)
            kind = outcome.kind
            if kind == "fault":
                self.dispatch_fault(machine, outcome)
            elif kind == "yielded":
                self._event(machine, cur.pid, "yield")
                nxt = self.next_runnable()
                if nxt is None:
                    break
                self.context_switch(machine, nxt)
                continue
            elif kind == "halted":
                cur.halted = True
                self._event(machine, cur.pid, "halt")
                continue
            elif kind == "tsx_aborted":
                self._event(machine, cur.pid, "tsx_abort",
                            f"resumed at {outcome.abort_target}")
            if self.slice_exhausted(machine):
                nxt = self.next_runnable()
                self._event(machine, cur.pid, "preempt")
                if nxt is None:
                    break
                self.context_switch(machine, nxt)
        return self.trace[first_event:]


@dataclass
class Simulation:
    """One machine plus its scheduler, with the conventional two-process
    victim/attacker layout used by the attack driver."""

    machine: Machine
    sched: Scheduler
    victim_pid: int = 0
    attacker_pid: int = 1

    @property
    def victim(self) -> Process:
        return self.sched.processes[self.victim_pid]

    @property
    def attacker(self) -> Process:
        return self.sched.processes[self.attacker_pid]

    def run_victim_turn(self, max_steps: int = 100_000) -> None:
        """Schedule the victim until it yields (or halts), then hand the CPU
        back to the attacker. Used both for warm-up and to let the victim
        re-acquire FPU ownership between unsuppressed leak attempts."""
        machine, sched = self.machine, self.sched
        sched.context_switch(machine, self.victim_pid)
        victim = self.victim
        for _ in range(max_steps):
            if victim.halted:
                break
            outcome = machine.step(victim.program)
            if outcome.kind == "fault":
                sched.dispatch_fault(machine, outcome)
            elif outcome.kind == "yielded":
                sched._event(machine, victim.pid, "yield")
                break
            elif outcome.kind == "halted":
                victim.halted = True
                sched._event(machine, victim.pid, "halt")
                break
            if sched.slice_exhausted(machine):
                sched._event(machine, victim.pid, "preempt")
                break
        else:
            raise SimulationError("victim did not yield within the step budget")
        sched.context_switch(machine, self.attacker_pid)

    def run_gadget(self, gadget: Program, max_steps: int = 10_000) -> None:
        """Install ``gadget`` as the attacker's code and execute it to
        completion in the attacker's context, routing faults through the
        kernel. Each leak attempt is one such run."""
        machine, sched = self.machine, self.sched
        if sched.current != self.attacker_pid:
            raise SimulationError("gadgets run in the attacker's context")
        attacker = self.attacker
        attacker.program = gadget
        machine.arch.rip = gadget.entry
        for _ in range(max_steps):
            outcome = machine.step(gadget)
            kind = outcome.kind
            if kind == "fault":
                sched.dispatch_fault(machine, outcome)
                if attacker.halted:
                    raise UnhandledSignal(attacker.pid)
            elif kind == "halted" or kind == "yielded":
                return
        raise SimulationError("gadget did not finish within the step budget")
