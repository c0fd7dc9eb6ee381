"""
Загрузчик конфигурации для FAN
Загружает и валидирует переменные окружения
"""

import os
from dataclasses import dataclass
from dotenv import load_dotenv

from fan.abi import ALL_CAPABILITIES, MAX_TIMER_DELAY_MS, parse_capabilities

# Загружаем переменные окружения из .env файла
load_dotenv()


def _int_env(name: str, default: int, minimum: int = 0) -> int:
    """Прочитать целочисленную переменную окружения с проверкой нижней границы"""
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    try:
        value = int(raw, 0)
    except ValueError:
        raise ValueError(f"{name} must be a valid integer: {raw}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}: {value}")
    return value


@dataclass
class Config:
    """Конфигурация узлов, харнесса и CLI из переменных окружения"""

    # Logging
    log_level: str
    report_sink: str

    # Плагины
    gas_per_event: int
    emit_budget: int
    max_timer_delay_ms: int
    max_capabilities: int
    trust_dir: str

    # Клиент
    inject_timeout_ms: int
    build_timeout_ms: int

    # Бенчмарк
    bench_iterations: int

    @classmethod
    def from_env(cls) -> "Config":
        """Загрузка конфигурации из переменных окружения"""

        log_level = os.getenv("FAN_LOG_LEVEL", "INFO")
        report_sink = os.getenv("FAN_REPORT_SINK", "-")

        gas_per_event = _int_env("FAN_GAS_PER_EVENT", 100_000, minimum=1)
        emit_budget = _int_env("FAN_EMIT_BUDGET", 4)
        max_timer_delay_ms = _int_env("FAN_MAX_TIMER_DELAY_MS", MAX_TIMER_DELAY_MS, minimum=1)

        # Маска возможностей: список имён через запятую или число
        caps_raw = os.getenv("FAN_MAX_CAPABILITIES", "")
        try:
            max_capabilities = parse_capabilities(caps_raw) if caps_raw else ALL_CAPABILITIES
        except ValueError as e:
            raise ValueError(f"FAN_MAX_CAPABILITIES is invalid: {e}")

        trust_dir = os.getenv("FAN_TRUST_DIR", "./trust")

        inject_timeout_ms = _int_env("FAN_INJECT_TIMEOUT_MS", 2000, minimum=1)
        build_timeout_ms = _int_env("FAN_BUILD_TIMEOUT_MS", 5000, minimum=1)
        bench_iterations = _int_env("FAN_BENCH_ITERATIONS", 1000, minimum=1)

        # Возвращаем конфигурацию
        return cls(
            log_level=log_level,
            report_sink=report_sink,
            gas_per_event=gas_per_event,
            emit_budget=emit_budget,
            max_timer_delay_ms=max_timer_delay_ms,
            max_capabilities=max_capabilities,
            trust_dir=trust_dir,
            inject_timeout_ms=inject_timeout_ms,
            build_timeout_ms=build_timeout_ms,
            bench_iterations=bench_iterations,
        )


# Глобальный экземпляр конфигурации
config = Config.from_env()
