"""
Планировщик таймеров для сокетного режима: ON_TIMER плагинов и таймауты клиента
"""

import logging
from datetime import datetime, timedelta
from typing import Any, Callable, Optional, Sequence

from apscheduler.schedulers.asyncio import AsyncIOScheduler

logger = logging.getLogger(__name__)

scheduler = AsyncIOScheduler()


def schedule_after(
    delay_ms: int,
    callback: Callable[..., Any],
    args: Sequence[Any] = (),
    name: str = "",
    target: Optional[AsyncIOScheduler] = None,
) -> Optional[str]:
    """
    Однократный запуск callback через delay_ms миллисекунд в цикле событий узла

    callback должен быть корутинной функцией: обычные функции AsyncIOExecutor
    отправляет в пул потоков.

    Returns:
        Идентификатор задачи или None, если планировщик не запущен или задержка вне диапазона
    """
    target = target or scheduler
    name = name or callback.__name__
    if not target.running:
        logger.warning(f"Scheduler is not running, dropping timer {name}")
        return None
    try:
        run_date = datetime.now() + timedelta(milliseconds=max(0, delay_ms))
    except OverflowError:
        logger.warning(f"Timer {name} delay {delay_ms} ms is out of range, dropped")
        return None
    job = target.add_job(callback, "date", run_date=run_date, args=list(args), name=name)
    return job.id


def start_scheduler() -> None:
    """Запускает планировщик в текущем цикле asyncio"""
    if not scheduler.running:
        scheduler.start()
        logger.info("Scheduler started")


def shutdown_scheduler() -> None:
    if scheduler.running:
        scheduler.shutdown(wait=False)
        logger.info("Scheduler stopped")
