"""Command line front end.

Subcommands: ``run`` (scenario file, event trace out), ``attack``
(recovered registers versus ground truth), ``eval`` (suppression-method
comparison table), ``demo-aesni`` (recover an AES-128 key schedule from
the victim's SIMD registers). Exit codes: 0 success, 1 scenario error,
2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import aes
from .attack import Variant
from .harness import (
    MIB,
    Scenario,
    ScenarioError,
    ScenarioRun,
    evaluate,
    parse_scenario,
    run_scenario,
)
from .isa import AsmError
from .kernel import FpuMode
from .machine import SimulationError


def _add_scenario_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mode", choices=["lazy", "eager"], default=None,
                        help="FPU context switching mode (default lazy)")
    parser.add_argument("--variant", choices=[v.value for v in Variant], default=None,
                        help="exception handling/suppression variant (default tsx)")
    parser.add_argument("--bits-per-attempt", type=int, metavar="K", default=None,
                        help="bits leaked per execution attempt (1, 2, 4, or 8)")
    parser.add_argument("--seed", type=lambda s: int(s, 0), default=None,
                        help="seed for victim secrets and channel noise")
    parser.add_argument("--noise", type=float, metavar="P", default=None,
                        help="per-line eviction probability during signal delivery")
    parser.add_argument("--repeats", type=int, metavar="R", default=None,
                        help="attempts per bit group (majority vote when > 1)")
    parser.add_argument("--slice-cycles", type=int, default=None,
                        help="scheduler time slice in cycles")
    parser.add_argument("--cpu-fixed", action="store_true",
                        help="model fixed silicon: transient reads of a disabled FPU return zero")
    parser.add_argument("--width", type=int, choices=[128, 256, 512], default=None,
                        help="SIMD register width in bits")
    parser.add_argument("--output", choices=["table", "json"], default="table")


def _apply_flags(scenario: Scenario, args: argparse.Namespace) -> Scenario:
    updates: dict[str, object] = {}
    if args.mode is not None:
        updates["mode"] = FpuMode(args.mode)
    if args.variant is not None:
        updates["variant"] = Variant(args.variant)
    if args.bits_per_attempt is not None:
        updates["k"] = args.bits_per_attempt
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.noise is not None:
        updates["noise"] = args.noise
    if args.repeats is not None:
        updates["repeats"] = args.repeats
    if args.slice_cycles is not None:
        updates["slice_cycles"] = args.slice_cycles
    if args.cpu_fixed:
        updates["cpu_vulnerable"] = False
    if args.width is not None:
        updates["width"] = args.width
    return dataclasses.replace(scenario, **updates) if updates else scenario


def _reg_hex(value: int, width: int) -> str:
    return f"{value:0{width // 4}x}"


def _attack_report(run: ScenarioRun, output: str) -> str:
    scenario, result, truth = run.scenario, run.result, run.truth
    if output == "json":
        payload = {
            "recovered": {f"xmm{r}": _reg_hex(v, scenario.width)
                          for r, v in sorted(result.recovered.items())},
            "expected": {f"xmm{r}": _reg_hex(truth[r], scenario.width)
                         for r in sorted(result.recovered)},
            "exact_registers": run.exact_registers,
            "exact_bits": run.exact_bits,
            "attempts": result.attempts,
            "inconclusive_groups": result.inconclusive_groups,
            "preemptions": result.preemptions,
            "cycles_per_register": result.cycles_per_register,
            "throughput_mib_s": result.effective_throughput / MIB,
            "nm_handler_calls": result.nm_handler_calls,
            "signal_deliveries": result.signal_deliveries,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"
    lines = []
    for reg in sorted(result.recovered):
        got, want = result.recovered[reg], truth[reg]
        mark = "ok" if got == want else "MISMATCH"
        lines.append(f"xmm{reg:<2} recovered {_reg_hex(got, scenario.width)}  {mark}")
        if got != want:
            lines.append(f"      expected  {_reg_hex(want, scenario.width)}")
    total = len(result.recovered)
    lines.append(f"{run.exact_registers}/{total} exact; attempts {result.attempts}; "
                 f"inconclusive {result.inconclusive_groups}; "
                 f"cycles/register {result.cycles_per_register:.1f}; "
                 f"throughput {result.effective_throughput / MIB:.2f} MiB/s")
    return "\n".join(lines) + "\n"


def _cmd_attack(args: argparse.Namespace) -> int:
    scenario = _apply_flags(Scenario(), args)
    run = run_scenario(scenario)
    sys.stdout.write(_attack_report(run, args.output))
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    with open(args.scenario, "r", encoding="utf-8") as handle:
        scenario = parse_scenario(handle.read())
    scenario = _apply_flags(scenario, args)
    run = run_scenario(scenario)
    trace = run.sim.sched.trace
    if args.output == "json":
        payload = {
            "events": [dataclasses.asdict(e) for e in trace],
            "report": json.loads(_attack_report(run, "json")),
        }
        sys.stdout.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")
        return 0
    for event in trace:
        detail = f"  {event.detail}" if event.detail else ""
        sys.stdout.write(f"[{event.cycle:>10}] pid={event.pid} {event.kind}{detail}\n")
    sys.stdout.write(_attack_report(run, "table"))
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    scenario = _apply_flags(Scenario(), args)
    report = evaluate(scenario)
    sys.stdout.write(report.to_json() if args.output == "json" else report.to_table())
    return 0


def _cmd_demo_aesni(args: argparse.Namespace) -> int:
    try:
        key = bytes.fromhex(args.key)
    except ValueError:
        raise ScenarioError(f"cipher key must be hex, got {args.key!r}") from None
    if len(key) != 16:
        raise ScenarioError("cipher key must be 16 bytes of hex")
    scenario = _apply_flags(Scenario(victim="aesni", cipher_key=key, k=4), args)
    run = run_scenario(scenario)
    schedule = aes.expand_key_128(key)
    ciphertext = aes.encrypt_block(key, bytes.fromhex(
        "3243f6a8885a308d313198a2e0370734"))
    failures = 0
    lines = []
    for rnd in range(11):
        want = aes.block_to_int(schedule[rnd])
        got = run.result.recovered[rnd] & ((1 << 128) - 1)
        ok = got == want
        failures += not ok
        lines.append(f"round {rnd:>2} key {aes.int_to_block(got).hex()}  "
                     f"{'ok' if ok else 'MISMATCH'}")
    got_ct = run.result.recovered[15] & ((1 << 128) - 1)
    ct_ok = got_ct == aes.block_to_int(ciphertext)
    failures += not ct_ok
    lines.append(f"block out    {aes.int_to_block(got_ct).hex()}  "
                 f"{'ok' if ct_ok else 'MISMATCH'}")
    recovered_key = aes.int_to_block(run.result.recovered[0])
    lines.append(f"recovered original cipher key: {recovered_key.hex()}")
    lines.append("key schedule fully recovered" if not failures
                 else f"{failures} mismatches")
    sys.stdout.write("\n".join(lines) + "\n")
    return 0 if not failures else 1


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="lazyfp",
        description="Deterministic simulator of the lazy-FPU-restore "
                    "transient execution vulnerability (CVE-2018-3665).")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario file and print the event trace")
    p_run.add_argument("scenario", help="path to a key = value scenario file")
    _add_scenario_flags(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_attack = sub.add_parser("attack", help="recover the victim's SIMD registers")
    _add_scenario_flags(p_attack)
    p_attack.set_defaults(func=_cmd_attack)

    p_eval = sub.add_parser("eval", help="compare the suppression methods")
    _add_scenario_flags(p_eval)
    p_eval.set_defaults(func=_cmd_eval)

    p_demo = sub.add_parser("demo-aesni",
                            help="recover an AES-128 key schedule from SIMD registers")
    p_demo.add_argument("--key", required=True, metavar="HEX",
                        help="16-byte AES cipher key in hex")
    _add_scenario_flags(p_demo)
    p_demo.set_defaults(func=_cmd_demo_aesni)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, SimulationError, AsmError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
