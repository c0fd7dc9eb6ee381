"""
Действия, которые узел возвращает транспорту (симулятору или сокетам)

Узел не выполняет ввод-вывод сам: обработчики возвращают списки действий.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, Hashable, List, Union

from fan.protocol.cells import LinkCell


@dataclass
class SendCell:
    """Отправить ячейку соседу по каналу"""

    peer: bytes
    cell: LinkCell


@dataclass
class ScheduleTimer:
    """Запланировать ON_TIMER плагина на цепочке через delay_ms"""

    delay_ms: int
    circuit: Hashable
    plugin: str
    tag: int


@dataclass
class Record:
    """Событие для трассы; detail сериализуется каноническим JSON"""

    kind: str
    detail: Dict[str, Any] = field(default_factory=dict)


Action = Union[SendCell, ScheduleTimer, Record]
Actions = List[Action]
