"""Scenario construction and evaluation: victims, ground truth, the
suppression-method comparison table, and the mitigation defeat matrix.

Ground truth lives here and only here. The attack module never sees the
victim's secrets; this module builds the victim, runs the attack, and
owns the recovered-versus-truth comparison.
"""

from __future__ import annotations

import dataclasses
import json
import random
from dataclasses import dataclass, field

from . import aes
from .attack import (
    DEFAULT_CLOCK_HZ,
    DEFAULT_PROBE_BASE,
    AttackConfig,
    AttackResult,
    Variant,
    run_attack,
)
from .cache import CacheState, LatencyModel
from .isa import Program, assemble
from .kernel import DEFAULT_SLICE_CYCLES, FpuMode, Process, Scheduler, Simulation
from .machine import ControlState, CostModel, Machine

FIPS_KEY = bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c")
FIPS_PLAINTEXT = bytes.fromhex("3243f6a8885a308d313198a2e0370734")

MIB = 1024 * 1024

_COST_FIELDS = {f.name for f in dataclasses.fields(CostModel)}


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    mode: FpuMode = FpuMode.LAZY
    variant: Variant = Variant.TSX
    cpu_vulnerable: bool = True
    k: int = 1
    victim: str = "random"  # "random" (seeded secrets) or "aesni"
    seed: int = 0
    cipher_key: bytes = FIPS_KEY
    victim_mutates: bool = False
    slice_cycles: int = DEFAULT_SLICE_CYCLES
    noise: float = 0.0
    clock_hz: float = DEFAULT_CLOCK_HZ
    width: int = 256
    repeats: int = 1
    target_registers: tuple[int, ...] | None = None
    cost_overrides: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.victim not in ("random", "aesni"):
            raise ScenarioError(f"unknown victim kind {self.victim!r}")
        if self.width not in (128, 256, 512):
            raise ScenarioError(f"unsupported register width {self.width}")
        for name in self.cost_overrides:
            if name not in _COST_FIELDS:
                raise ScenarioError(f"unknown cost override {name!r}")

    def targets(self) -> tuple[int, ...]:
        if self.target_registers is not None:
            return self.target_registers
        if self.victim == "aesni":
            return tuple(range(11)) + (15,)
        return tuple(range(16))


def _imm(value: int, width: int) -> str:
    return value.to_bytes(width // 8, "little").hex()


def _rotl(value: int, n: int, width: int) -> int:
    mask = (1 << width) - 1
    return ((value << n) | (value >> (width - n))) & mask


def make_random_victim(secrets: list[int], width: int,
                       mutate_rounds: int = 0) -> Program:
    """Victim that loads one secret per SIMD register, yields, and loops.

    With ``mutate_rounds`` > 0 each pass through the loop loads a rotated
    copy of the secrets, modeling a victim whose register contents change
    between scheduling turns.
    """
    lines = ["top:"]
    rounds = max(1, mutate_rounds)
    for rnd in range(rounds):
        for i, secret in enumerate(secrets):
            value = _rotl(secret, rnd, width) if mutate_rounds else secret
            lines.append(f"movimm xmm{i}, {_imm(value, width)}")
        lines.append("yield")
    lines.append("jmp top")
    return assemble("\n".join(lines))


def make_aesni_victim(cipher_key: bytes, plaintext: bytes = FIPS_PLAINTEXT) -> Program:
    """Victim performing one AES-NI block encryption: the expanded round
    keys sit in xmm0-xmm10, the data block in xmm15, and the whole schedule
    stays register-resident until the yield."""
    round_keys = aes.expand_key_128(cipher_key)
    lines = [f"movimm xmm{i}, {rk.hex()}" for i, rk in enumerate(round_keys)]
    lines.append(f"movimm xmm15, {plaintext.hex()}")
    lines.append("pxor xmm15, xmm0")
    for rnd in range(1, 10):
        lines.append(f"aesenc xmm15, xmm{rnd}")
    lines.append("aesenclast xmm15, xmm10")
    lines.append("yield")
    return assemble("\n".join(lines))


def _victim_truth(scenario: Scenario, secrets: list[int]) -> dict[int, int]:
    """Register contents at the victim's first yield (the snapshot a
    suppressed attack should recover exactly)."""
    if scenario.victim == "random":
        return dict(enumerate(secrets))
    round_keys = aes.expand_key_128(scenario.cipher_key)
    truth = {i: aes.block_to_int(rk) for i, rk in enumerate(round_keys)}
    for i in range(11, 15):
        truth[i] = 0
    truth[15] = aes.block_to_int(
        aes.encrypt_block(scenario.cipher_key, FIPS_PLAINTEXT))
    return truth


def build_simulation(scenario: Scenario) -> tuple[Simulation, dict[int, int]]:
    """Construct machine, processes, and scheduler, run the victim to its
    first yield (so it holds its secrets and, under lazy switching, owns
    the FPU), and leave the attacker scheduled. Returns the simulation and
    the ground-truth register map."""
    costs = CostModel(**scenario.cost_overrides)
    latency = LatencyModel(eviction_probability=scenario.noise,
                           seed=scenario.seed ^ 0x9E3779B9)
    machine = Machine(
        simd_width=scenario.width,
        cache=CacheState(latency=latency),
        costs=costs,
        control=ControlState(cpu_vulnerable=scenario.cpu_vulnerable),
        symbols={"mem": DEFAULT_PROBE_BASE},
    )
    rng = random.Random(scenario.seed)
    secrets = [rng.getrandbits(scenario.width) for _ in range(16)]
    if scenario.victim == "random":
        victim_program = make_random_victim(
            secrets, scenario.width, mutate_rounds=8 if scenario.victim_mutates else 0)
    else:
        victim_program = make_aesni_victim(scenario.cipher_key)
    victim = Process(pid=0, name="victim", program=victim_program)
    # The attacker arrives with zeroed SIMD registers of its own, so its
    # architectural reads after an #NM bounce see zeros.
    attacker = Process(pid=1, name="attacker", program=assemble("yield"),
                       signal_handler="sigret")
    sched = Scheduler([victim, attacker], mode=scenario.mode,
                      slice_cycles=scenario.slice_cycles)
    sim = Simulation(machine, sched)
    sim.run_victim_turn()
    return sim, _victim_truth(scenario, secrets)


def attack_config(scenario: Scenario) -> AttackConfig:
    return AttackConfig(
        variant=scenario.variant,
        target_registers=scenario.targets(),
        register_width=scenario.width,
        bits_per_attempt=scenario.k,
        repeats_per_group=scenario.repeats,
        clock_hz=scenario.clock_hz,
    )


@dataclass
class ScenarioRun:
    scenario: Scenario
    sim: Simulation
    result: AttackResult
    truth: dict[int, int]

    @property
    def exact_registers(self) -> int:
        return sum(1 for reg, value in self.result.recovered.items()
                   if value == self.truth[reg])

    @property
    def exact_bits(self) -> int:
        width = self.scenario.width
        return sum(
            width - (value ^ self.truth[reg]).bit_count()
            for reg, value in self.result.recovered.items())


def run_scenario(scenario: Scenario) -> ScenarioRun:
    sim, truth = build_simulation(scenario)
    result = run_attack(sim, attack_config(scenario))
    return ScenarioRun(scenario, sim, result, truth)


# --- evaluation -------------------------------------------------------------

@dataclass
class VariantStats:
    cycles_per_register: float
    throughput_mib_s: float
    attempts: int
    inconclusive: int
    preemptions: int
    snapshot_fits_slice: bool
    exact_registers: int
    nm_handler_calls: int
    signal_deliveries: int


@dataclass
class DefeatCell:
    mode: str
    cpu_vulnerable: bool
    exact_registers: int
    identical_across_secrets: bool


@dataclass
class EvalReport:
    """Suppression-method comparison plus the mitigation defeat matrix."""

    k: int
    seed: int
    clock_hz: float
    slice_cycles: int
    register_width: int
    variants: dict[str, VariantStats]
    defeat_matrix: list[DefeatCell]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        rows = [("method", "cycles/reg", "MiB/s", "attempts", "inconclusive",
                 "snapshot fits slice")]
        for name in ("pf", "tsx", "retpoline"):
            stats = self.variants[name]
            rows.append((
                name,
                f"{stats.cycles_per_register:.1f}",
                f"{stats.throughput_mib_s:.2f}",
                str(stats.attempts),
                str(stats.inconclusive),
                "yes" if stats.snapshot_fits_slice else "no",
            ))
        out = [_align(rows)]
        rows = [("mode", "cpu", "exact registers", "leaks")]
        for cell in self.defeat_matrix:
            rows.append((
                cell.mode,
                "vulnerable" if cell.cpu_vulnerable else "fixed",
                f"{cell.exact_registers}/16",
                "no" if cell.identical_across_secrets else "yes",
            ))
        out.append(_align(rows))
        return "\n".join(out)


def _align(rows: list[tuple[str, ...]]) -> str:
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join(
        "  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip()
        for row in rows) + "\n"


def _stats_from_run(run: ScenarioRun) -> VariantStats:
    result = run.result
    snapshot = result.cycles_per_register * 16
    return VariantStats(
        cycles_per_register=result.cycles_per_register,
        throughput_mib_s=result.effective_throughput / MIB,
        attempts=result.attempts,
        inconclusive=result.inconclusive_groups,
        preemptions=result.preemptions,
        snapshot_fits_slice=snapshot <= run.scenario.slice_cycles,
        exact_registers=run.exact_registers,
        nm_handler_calls=result.nm_handler_calls,
        signal_deliveries=result.signal_deliveries,
    )


def evaluate(base: Scenario | None = None) -> EvalReport:
    """Run the three suppressed variants against the seeded-secrets victim
    and collect the mitigation defeat matrix (lazy/eager crossed with
    vulnerable/fixed silicon, each verified by attacking two victims with
    different secrets and demanding identical attack results)."""
    base = base or Scenario()
    variants: dict[str, VariantStats] = {}
    for variant in (Variant.PAGE_FAULT, Variant.TSX, Variant.RETPOLINE):
        scenario = dataclasses.replace(
            base, variant=variant, mode=FpuMode.LAZY, cpu_vulnerable=True)
        variants[variant.value] = _stats_from_run(run_scenario(scenario))

    matrix: list[DefeatCell] = []
    for mode in (FpuMode.LAZY, FpuMode.EAGER):
        for vulnerable in (True, False):
            scenario = dataclasses.replace(base, mode=mode, cpu_vulnerable=vulnerable)
            first = run_scenario(scenario)
            second = run_scenario(dataclasses.replace(scenario, seed=base.seed + 7919))
            matrix.append(DefeatCell(
                mode=mode.value,
                cpu_vulnerable=vulnerable,
                exact_registers=first.exact_registers,
                identical_across_secrets=first.result == second.result,
            ))
    return EvalReport(
        k=base.k,
        seed=base.seed,
        clock_hz=base.clock_hz,
        slice_cycles=base.slice_cycles,
        register_width=base.width,
        variants=variants,
        defeat_matrix=matrix,
    )


# --- scenario files ----------------------------------------------------------

_BOOLS = {"true": True, "false": False, "on": True, "off": False,
          "yes": True, "no": False, "1": True, "0": False}


def parse_scenario(text: str) -> Scenario:
    """Parse the line-based ``key = value`` scenario format.

    Keys are the Scenario field names; ``cost.<name>`` lines override cost
    model entries; seeds and keys are written in hex.
    """
    values: dict[str, object] = {}
    overrides: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ScenarioError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = key.strip(), value.strip()
        try:
            if key.startswith("cost."):
                overrides[key[5:]] = int(value, 0)
            elif key == "mode":
                values["mode"] = FpuMode(value)
            elif key == "variant":
                values["variant"] = Variant(value)
            elif key in ("cpu_vulnerable", "victim_mutates"):
                values[key] = _BOOLS[value.lower()]
            elif key in ("k", "slice_cycles", "width", "repeats"):
                values[key] = int(value, 0)
            elif key == "seed":
                values[key] = int(value, 16)
            elif key in ("noise", "clock_hz"):
                values[key] = float(value)
            elif key == "victim":
                values[key] = value
            elif key == "cipher_key":
                values[key] = bytes.fromhex(value)
            elif key == "target_registers":
                values[key] = tuple(int(t) for t in value.split())
            else:
                raise ScenarioError(f"line {lineno}: unknown key {key!r}")
        except (ValueError, KeyError) as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(f"line {lineno}: bad value for {key!r}: {value!r}") from None
    if overrides:
        values["cost_overrides"] = overrides
    try:
        return Scenario(**values)  # type: ignore[arg-type]
    except TypeError as exc:
        raise ScenarioError(str(exc)) from None


def format_scenario(scenario: Scenario) -> str:
    lines = [
        f"mode = {scenario.mode.value}",
        f"variant = {scenario.variant.value}",
        f"cpu_vulnerable = {'true' if scenario.cpu_vulnerable else 'false'}",
        f"k = {scenario.k}",
        f"victim = {scenario.victim}",
        f"seed = {scenario.seed:x}",
        f"cipher_key = {scenario.cipher_key.hex()}",
        f"victim_mutates = {'true' if scenario.victim_mutates else 'false'}",
        f"slice_cycles = {scenario.slice_cycles}",
        f"noise = {scenario.noise}",
        f"clock_hz = {scenario.clock_hz}",
        f"width = {scenario.width}",
        f"repeats = {scenario.repeats}",
    ]
    if scenario.target_registers is not None:
        lines.append("target_registers = " + " ".join(map(str, scenario.target_registers)))
    for name, value in sorted(scenario.cost_overrides.items()):
        lines.append(f"cost.{name} = {value}")
    return "\n".join(lines) + "\n"
