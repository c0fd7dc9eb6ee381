"""
Образцовые плагины, поставляемые вместе с FAN

Исходники лежат рядом в samples/*.fasm; таблица точек входа задаётся метками.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

from fan.abi import Capability, EventKind, capability_mask
from fan.toolkit.assembler import assemble_with_labels

logger = logging.getLogger(__name__)

SAMPLES_DIR = Path(__file__).parent / "samples"

PADDING_FEATURE = 32
COUNTER_FEATURE = 33
MARKER_FEATURE = 48


@dataclass
class SamplePlugin:
    """Образец: исходник, ожидаемая маска возможностей, функции и таблица входов"""

    name: str
    source: str
    capability_mask: int
    feature_ids: List[int]
    entry_labels: Dict[EventKind, str]
    memory_size: int = 4096
    version: Tuple[int, int, int] = (1, 0, 0)
    code: bytes = b""
    entries: List[Tuple[int, int]] = field(default_factory=list)

    def build(self) -> "SamplePlugin":
        """Собрать код и разрешить метки входов в индексы инструкций"""
        self.code, labels = assemble_with_labels(self.source)
        self.entries = [(int(event), labels[label]) for event, label in self.entry_labels.items()]
        return self


# (файл, маска, функции, входы)
_CATALOG = {
    "padding": (
        "padding.fasm",
        capability_mask(
            [
                Capability.TIMER,
                Capability.CELL_EMIT,
                Capability.STATE_READ,
                Capability.STATE_WRITE,
                Capability.LOG,
            ]
        ),
        [PADDING_FEATURE],
        {
            EventKind.ON_ATTACH: "on_attach",
            EventKind.ON_FEATURE_CELL: "on_cell",
            EventKind.ON_TIMER: "on_timer",
            EventKind.ON_CIRCUIT_TEARDOWN: "on_teardown",
        },
    ),
    "counter": (
        "counter.fasm",
        capability_mask([Capability.CELL_READ, Capability.CELL_EMIT, Capability.STATE_READ]),
        [COUNTER_FEATURE],
        {EventKind.ON_FEATURE_CELL: "on_cell"},
    ),
    "marker": (
        "marker.fasm",
        capability_mask([Capability.LOG]),
        [MARKER_FEATURE],
        {EventKind.ON_FEATURE_CELL: "on_cell"},
    ),
}


def build_sample_plugins() -> Dict[str, SamplePlugin]:
    """Собрать все образцы: имя → SamplePlugin с кодом и входами"""
    samples: Dict[str, SamplePlugin] = {}
    for name, (filename, mask, features, entries) in _CATALOG.items():
        source = (SAMPLES_DIR / filename).read_text(encoding="utf-8")
        samples[name] = SamplePlugin(
            name=name,
            source=source,
            capability_mask=mask,
            feature_ids=list(features),
            entry_labels=dict(entries),
        ).build()
        logger.debug(f"Built sample plugin {name}: {len(samples[name].code)} bytes of code")
    return samples
