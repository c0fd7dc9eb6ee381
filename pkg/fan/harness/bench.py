"""
Замер времени подключения плагина: чтение с диска, разбор и проверка подписи,
создание песочницы и ON_ATTACH на свежем реестре
"""

import logging
import math
import os
import platform
import statistics
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Union

from fan.plugins.package import parse_and_verify
from fan.plugins.registry import PluginRegistry
from fan.relay.host_abi import (
    HOP_HAS_NEXT,
    HOP_HAS_PREV,
    CircuitView,
    HostContext,
    build_host_table,
)
from fan.utils.canonical import canonical_bytes
from fan.vm.interpreter import DEFAULT_GAS, MAX_MEMORY, MIN_MEMORY

logger = logging.getLogger(__name__)

BENCH_CIRCUIT = ("bench", 1)


@dataclass
class BenchStats:
    """Статистика в микросекундах"""

    min_us: float
    median_us: float
    p95_us: float
    max_us: float

    @classmethod
    def from_samples(cls, samples_ns: List[int]) -> "BenchStats":
        ordered = sorted(samples_ns)
        # p95 по ближайшему рангу
        rank = max(1, math.ceil(0.95 * len(ordered)))
        return cls(
            min_us=round(ordered[0] / 1000, 1),
            median_us=round(statistics.median(ordered) / 1000, 1),
            p95_us=round(ordered[rank - 1] / 1000, 1),
            max_us=round(ordered[-1] / 1000, 1),
        )

    def to_json(self) -> dict:
        return {
            "max_us": self.max_us,
            "median_us": self.median_us,
            "min_us": self.min_us,
            "p95_us": self.p95_us,
        }


@dataclass
class BenchResult:
    package: str
    iterations: int
    memory_size: int
    warm: BenchStats
    cold: Optional[BenchStats] = None
    host_description: str = ""

    @property
    def warm_only(self) -> bool:
        return self.cold is None

    def to_json(self) -> dict:
        document = {
            "host_description": self.host_description,
            "iterations": self.iterations,
            "memory_size": self.memory_size,
            "package": self.package,
            "warm": self.warm_only,
            **self.warm.to_json(),
        }
        if self.cold is not None:
            document["cold"] = self.cold.to_json()
        return document

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(canonical_bytes(self.to_json()) + b"\n")


def host_description() -> str:
    return f"{platform.system()} {platform.machine()} {platform.processor() or '-'} " + (
        f"Python {platform.python_version()}"
    )


def _bench_context(attachment) -> HostContext:
    # ON_ATTACH видит средний шаг цепочки, чтобы путь set_timer тоже входил в замер
    return HostContext(
        node_name="bench",
        plugin=attachment.name,
        circuit=CircuitView(
            circ_id=1,
            hop_flags=HOP_HAS_PREV | HOP_HAS_NEXT,
            cells_forwarded=0,
            scratch=bytearray(attachment.initial_scratch),
        ),
        scheduler=lambda delay_ms, tag: True,
        clock=lambda: 0,
    )


def can_drop_cache() -> bool:
    return hasattr(os, "posix_fadvise") and hasattr(os, "POSIX_FADV_DONTNEED")


def _drop_cache(path: Path) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.posix_fadvise(fd, 0, 0, os.POSIX_FADV_DONTNEED)
    finally:
        os.close(fd)


def _measure(
    path: Path,
    iterations: int,
    trusted_keys: Dict[bytes, bytes],
    memory_size: Optional[int],
    gas: int,
    cold: bool,
) -> List[int]:
    host_table = build_host_table()
    samples: List[int] = []
    for _ in range(iterations):
        if cold:
            _drop_cache(path)
        registry = PluginRegistry(host_table, gas_per_event=gas, context_factory=_bench_context)

        started = time.perf_counter_ns()
        package = parse_and_verify(path.read_bytes(), trusted_keys)
        if memory_size is not None:
            package = replace(package, memory_size=memory_size)
        registry.attach(package, BENCH_CIRCUIT)
        samples.append(time.perf_counter_ns() - started)
    return samples


def bench_attach(
    package_path: Union[str, Path],
    iterations: int,
    trusted_keys: Dict[bytes, bytes],
    memory_size: Optional[int] = None,
    gas: int = DEFAULT_GAS,
    measure_cold: bool = True,
) -> BenchResult:
    """
    Замерить подключение пакета iterations раз (монотонные часы, без виртуального времени)

    Raises:
        ValueError: iterations < 1 или memory_size вне допустимого диапазона
        PackageError, VerifierRejected: пакет не проходит проверку (до начала замеров)
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    if memory_size is not None and not MIN_MEMORY <= memory_size <= MAX_MEMORY:
        raise ValueError(f"memory_size must be in {MIN_MEMORY}..{MAX_MEMORY}")

    path = Path(package_path)
    package = parse_and_verify(path.read_bytes(), trusted_keys)
    effective_memory = memory_size or package.memory_size
    logger.info(
        f"Benchmarking attach of {package.name} ({path.stat().st_size} bytes), "
        f"{iterations} iterations, memory {effective_memory}"
    )

    warm = BenchStats.from_samples(
        _measure(path, iterations, trusted_keys, memory_size, gas, cold=False)
    )
    cold = None
    if measure_cold and can_drop_cache():
        cold = BenchStats.from_samples(
            _measure(path, iterations, trusted_keys, memory_size, gas, cold=True)
        )
    else:
        logger.info("Dropping the page cache is not supported here, reporting warm runs only")

    return BenchResult(
        package=package.name,
        iterations=iterations,
        memory_size=effective_memory,
        warm=warm,
        cold=cold,
        host_description=host_description(),
    )
