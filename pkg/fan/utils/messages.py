"""
Форматирование вывода CLI
Централизованное оформление отчётов, чтобы команды не дублировали шаблоны
"""

from typing import Iterable, List

from fan.abi import EventKind, describe_capabilities
from fan.harness.bench import BenchResult, BenchStats
from fan.harness.sim import EventTrace
from fan.plugins.package import PluginPackage
from fan.utils.canonical import to_hex


def format_bytes(size: int) -> str:
    """Форматирует байты в читаемый вид (B, KB, MB)."""
    power = 2**10
    magnitude = 0
    value = float(size)
    prefixes = ("", "K", "M", "G")
    while value >= power and magnitude + 1 < len(prefixes):
        value /= power
        magnitude += 1
    if magnitude == 0:
        return f"{size} B"
    return f"{value:.2f} {prefixes[magnitude]}B"


def format_micros(value_us: float) -> str:
    if value_us >= 1000:
        return f"{value_us / 1000:.2f} ms"
    return f"{value_us:.1f} us"


def _stats_row(label: str, stats: BenchStats) -> str:
    return (
        f"{label:<6} min {format_micros(stats.min_us):>10}"
        f"  median {format_micros(stats.median_us):>10}"
        f"  p95 {format_micros(stats.p95_us):>10}  max {format_micros(stats.max_us):>10}"
    )


def format_bench_report(result: BenchResult) -> str:
    """
    Отчёт bench attach для терминала

    Args:
        result: результат bench_attach

    Returns:
        Многострочный текст
    """
    lines = [
        f"Attach benchmark: {result.package}, {result.iterations} iterations, "
        f"memory {format_bytes(result.memory_size)}",
        _stats_row("warm", result.warm),
    ]
    if result.cold is not None:
        lines.append(_stats_row("cold", result.cold))
    else:
        lines.append("cold   page cache cannot be dropped here, warm runs only")
    lines.append(f"host   {result.host_description}")
    return "\n".join(lines)


def format_package_info(package: PluginPackage) -> str:
    """Описание проверенного пакета для команды verify"""
    entries: List[str] = []
    for event_id, pc in package.entries:
        try:
            label = EventKind(event_id).name
        except ValueError:
            label = f"event {event_id}"
        entries.append(f"{label}={pc}")
    return "\n".join(
        [
            f"OK {package.name} {package.version_text}",
            f"  signer:       {to_hex(package.signer_key_id)[:16]}",
            f"  capabilities: {describe_capabilities(package.capability_mask)}",
            f"  features:     {', '.join(map(str, package.feature_ids)) or '-'}",
            f"  entries:      {', '.join(entries) or '-'}",
            f"  memory:       {format_bytes(package.memory_size)}",
            f"  code:         {len(package.program)} instructions",
        ]
    )


def format_trace_summary(
    trace: EventTrace, kinds: Iterable[str] = ("kill", "expect_failed", "action_failed")
) -> str:
    """Краткая сводка трассы: число записей, убийства цепочек и итог проверок"""
    lines = [f"{len(trace.records)} trace records"]
    for kind in kinds:
        for record in trace.select(kind):
            lines.append(f"  {record.t_ms:>6} ms  {record.node:<8} {kind} {record.detail}")
    passed = trace.count("expect_passed")
    failed = trace.failed_expectations
    lines.append(f"expectations: {passed} passed, {failed} failed")
    return "\n".join(lines)
