"""
Проверка эталонных сценариев scenarios/*.json.
Каждый сценарий запускается дважды: все ожидания должны выполниться, а трассы совпасть побайтно.
Запуск: python tests/verify_scenarios.py
"""

import os
import sys
from pathlib import Path

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from fan.harness.sim import load_sim_config, run_sim  # noqa: E402
from fan.utils.messages import format_trace_summary  # noqa: E402

SCENARIOS_DIR = Path(__file__).resolve().parent.parent / "scenarios"


def _run() -> bool:
    """Возвращает True при успехе, False при ошибке."""
    paths = sorted(SCENARIOS_DIR.glob("*.json"))
    if not paths:
        print(f"ERROR: no scenarios in {SCENARIOS_DIR}")
        return False

    for path in paths:
        config = load_sim_config(path)
        first = run_sim(config)
        if not first.passed:
            print(f"ERROR: {path.name} failed")
            print(format_trace_summary(first))
            return False
        if run_sim(config).to_lines() != first.to_lines():
            print(f"ERROR: {path.name} is not deterministic")
            return False
        print(f"OK: {path.name}, {len(first.records)} records")

    print("SUCCESS: all checks passed")
    return True


if __name__ == "__main__":
    ok = _run()
    sys.exit(0 if ok else 1)
