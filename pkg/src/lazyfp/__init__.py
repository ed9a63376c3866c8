"""Deterministic simulator of the lazy-FPU-restore transient execution
vulnerability (CVE-2018-3665).

The package models lazy FPU context switching, #NM/#PF fault semantics,
speculative execution of stale SIMD register state, exception suppression
through signals, TSX transactions, and return-stack-buffer misprediction,
and a flush+reload cache channel — enough to demonstrate full recovery of
a victim process's SIMD register file by an unprivileged attacker, and to
show that eager context switching (or fixed silicon) defeats it.
"""

from .aes import aes_round, encrypt_block, expand_key_128
from .attack import (
    AttackConfig,
    AttackResult,
    BadBitRange,
    Variant,
    build_gadget,
    leak_group,
    run_attack,
)
from .cache import CacheState, LatencyModel
from .harness import (
    EvalReport,
    Scenario,
    ScenarioError,
    ScenarioRun,
    build_simulation,
    evaluate,
    make_aesni_victim,
    make_random_victim,
    parse_scenario,
    run_scenario,
)
from .isa import (
    AsmError,
    BadOperand,
    DuplicateLabel,
    Program,
    Register,
    UndefinedLabel,
    UnknownMnemonic,
    assemble,
    disassemble,
)
from .kernel import FpuMode, Process, Scheduler, Simulation, TraceEvent, UnhandledSignal
from .machine import (
    ArchState,
    ControlState,
    CostModel,
    Machine,
    NmFault,
    PfFault,
    SimulationError,
    StepOutcome,
)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackResult", "ArchState", "AsmError", "BadBitRange",
    "BadOperand", "CacheState", "ControlState", "CostModel", "DuplicateLabel",
    "EvalReport", "FpuMode", "LatencyModel", "Machine", "NmFault", "PfFault",
    "Process", "Program", "Register", "Scenario", "ScenarioError",
    "ScenarioRun", "Scheduler", "Simulation", "SimulationError", "StepOutcome",
    "TraceEvent", "UndefinedLabel", "UnhandledSignal", "UnknownMnemonic",
    "Variant", "aes_round", "assemble", "build_gadget", "build_simulation",
    "disassemble", "encrypt_block", "evaluate", "expand_key_128", "leak_group",
    "make_aesni_victim", "make_random_victim", "parse_scenario", "run_attack",
    "run_scenario",
]
