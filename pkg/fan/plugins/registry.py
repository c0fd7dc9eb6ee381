"""
Реестр плагинов узла: глобальные и эфемерные (привязанные к цепочке) подключения
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Hashable, List, Optional, Sequence, Tuple

from fan.abi import SCRATCH_SIZE, EventKind
from fan.exceptions import AttachAborted, DowngradeRejected, FeatureConflict
from fan.plugins.package import PluginPackage, parse_and_verify
from fan.vm.interpreter import (
    DEFAULT_GAS,
    ExecutionResult,
    HostTable,
    Trap,
    VmInstance,
    instantiate,
)

logger = logging.getLogger(__name__)

# None: глобальная область, иначе ключ цепочки
Scope = Optional[Hashable]

_KNOWN_EVENTS = {int(event) for event in EventKind}


@dataclass
class Attachment:
    """Подключённый плагин: пакет, его песочница и начальный scratch"""

    package: PluginPackage
    instance: VmInstance
    scope: Scope
    initial_scratch: bytes = bytes(SCRATCH_SIZE)
    entries: Dict[int, int] = field(default_factory=dict)
    attach_latency_us: int = 0

    @property
    def name(self) -> str:
        return self.package.name

    @property
    def feature_ids(self) -> List[int]:
        return self.package.feature_ids

    @property
    def capability_mask(self) -> int:
        return self.instance.capability_mask

    @property
    def is_global(self) -> bool:
        return self.scope is None

    def describe(self) -> dict:
        return {
            "name": self.name,
            "version": self.package.version_text,
            "features": list(self.feature_ids),
            "scope": "global" if self.is_global else "circuit",
        }


# context_factory(attachment) -> контекст хоста для событий жизненного цикла
ContextFactory = Callable[[Attachment], Any]


def _scratch(initial: bytes) -> bytes:
    if len(initial) > SCRATCH_SIZE:
        raise ValueError(f"initial scratch longer than {SCRATCH_SIZE} bytes")
    return bytes(initial).ljust(SCRATCH_SIZE, b"\x00")


class PluginRegistry:
    """
    Не более одного подключения на (область, FeatureId) и на (область, имя)

    Поиск предпочитает область цепочки глобальной. Все изменения выполняются
    в цикле событий узла-владельца.
    """

    def __init__(
        self,
        host_table: HostTable,
        gas_per_event: int = DEFAULT_GAS,
        context_factory: Optional[ContextFactory] = None,
        owner: str = "",
    ):
        self.host_table = host_table
        self.gas_per_event = gas_per_event
        self.context_factory = context_factory
        self.owner = owner
        self._by_feature: Dict[Tuple[Scope, int], Attachment] = {}
        self._by_name: Dict[Tuple[Scope, str], Attachment] = {}

    # ===== Запросы =====

    def lookup(self, feature: int, circuit: Scope = None) -> Optional[Attachment]:
        if circuit is not None:
            attachment = self._by_feature.get((circuit, feature))
            if attachment is not None:
                return attachment
        return self._by_feature.get((None, feature))

    def get(self, name: str, scope: Scope = None) -> Optional[Attachment]:
        return self._by_name.get((scope, name))

    def attachments(self, scope: Scope = None) -> List[Attachment]:
        """Подключения ровно в этой области"""
        return [att for (att_scope, _), att in self._by_name.items() if att_scope == scope]

    def all_attachments(self) -> List[Attachment]:
        return list(self._by_name.values())

    def __len__(self) -> int:
        return len(self._by_name)

    # ===== Выполнение =====

    def run_event(
        self,
        attachment: Attachment,
        event: EventKind,
        args: Sequence[int] = (),
        context: Any = None,
    ) -> Optional[ExecutionResult]:
        """
        Запустить точку входа события, если она объявлена

        Raises:
            Trap: аварийное завершение гостя
        """
        pc = attachment.entries.get(int(event))
        if pc is None:
            return None
        if context is None and self.context_factory is not None:
            context = self.context_factory(attachment)
        result = attachment.instance.run(pc, args, gas_limit=self.gas_per_event, context=context)
        logger.debug(
            f"{self.owner}: {attachment.name} {event.name} returned {result.value} "
            f"({result.gas_used} gas)"
        )
        return result

    # ===== Подключение и отключение =====

    def _prepare(self, package: PluginPackage, scope: Scope, initial_scratch: bytes) -> Attachment:
        entries: Dict[int, int] = {}
        for event_id, pc in package.entries:
            if event_id not in _KNOWN_EVENTS:
                logger.warning(f"{package.name}: ignoring entry for unknown event {event_id}")
                continue
            entries[event_id] = pc

        instance = instantiate(
            package.program, package.memory_size, self.host_table, package.capability_mask
        )
        return Attachment(
            package=package,
            instance=instance,
            scope=scope,
            initial_scratch=_scratch(initial_scratch),
            entries=entries,
        )

    def _check_conflicts(
        self, package: PluginPackage, scope: Scope, replacing: Optional[Attachment] = None
    ) -> None:
        for feature in package.feature_ids:
            holder = self._by_feature.get((scope, feature))
            if holder is not None and holder is not replacing:
                raise FeatureConflict(
                    f"feature {feature} already handled by {holder.name} in this scope"
                )

    def _run_attach(self, attachment: Attachment) -> None:
        try:
            self.run_event(attachment, EventKind.ON_ATTACH)
        except Trap as trap:
            logger.warning(f"{self.owner}: ON_ATTACH of {attachment.name} trapped: {trap}")
            raise AttachAborted(f"ON_ATTACH of {attachment.name} trapped: {trap}", trap)

    def _index(self, attachment: Attachment) -> None:
        scope = attachment.scope
        self._by_name[(scope, attachment.name)] = attachment
        for feature in attachment.feature_ids:
            self._by_feature[(scope, feature)] = attachment

    def _unindex(self, attachment: Attachment) -> None:
        scope = attachment.scope
        self._by_name.pop((scope, attachment.name), None)
        for feature in attachment.feature_ids:
            if self._by_feature.get((scope, feature)) is attachment:
                del self._by_feature[(scope, feature)]

    def attach(
        self, package: PluginPackage, scope: Scope = None, initial_scratch: bytes = b""
    ) -> Attachment:
        """
        Подключить проверенный пакет в область scope

        Raises:
            FeatureConflict: функция или имя уже заняты в этой области
            AttachAborted: ON_ATTACH завершился ловушкой; реестр не изменён
        """
        if (scope, package.name) in self._by_name:
            raise FeatureConflict(f"plugin {package.name} already attached in this scope")
        self._check_conflicts(package, scope)

        attachment = self._prepare(package, scope, initial_scratch)
        self._run_attach(attachment)
        self._index(attachment)
        logger.debug(
            f"{self.owner}: attached {package.name} {package.version_text} "
            f"({'global' if scope is None else 'circuit'}) for features {package.feature_ids}"
        )
        return attachment

    def load_and_attach(
        self,
        data: bytes,
        trusted_keys: Dict[bytes, bytes],
        scope: Scope = None,
        initial_scratch: bytes = b"",
    ) -> Attachment:
        """
        parse_and_verify + instantiate + ON_ATTACH с замером времени подключения

        Raises:
            PackageError, VerifierRejected, FeatureConflict, AttachAborted
        """
        started = time.perf_counter_ns()
        package = parse_and_verify(data, trusted_keys)
        attachment = self.attach(package, scope, initial_scratch)
        elapsed = time.perf_counter_ns() - started
        attachment.attach_latency_us = max(1, math.ceil(elapsed / 1000))
        return attachment

    def detach(self, name: str, scope: Scope = None) -> bool:
        """Отключить плагин (с ON_DETACH); неизвестное подключение: предупреждение"""
        attachment = self._by_name.get((scope, name))
        if attachment is None:
            logger.warning(f"{self.owner}: detach of unknown plugin {name}, nothing to do")
            return False
        try:
            self.run_event(attachment, EventKind.ON_DETACH)
        except Trap as trap:
            logger.warning(f"{self.owner}: ON_DETACH of {name} trapped: {trap}")
        self._unindex(attachment)
        logger.info(f"{self.owner}: detached {name}")
        return True

    def upgrade(
        self, package: PluginPackage, scope: Scope = None, initial_scratch: Optional[bytes] = None
    ) -> Attachment:
        """
        Заменить подключение с тем же именем на более новую версию без перезапуска узла

        Новый ON_ATTACH выполняется первым; только после его успеха старое подключение
        получает ON_DETACH и заменяется.

        Raises:
            DowngradeRejected: версия не новее текущей
            FeatureConflict: функции нового пакета заняты другим плагином
            AttachAborted: ON_ATTACH новой версии завершился ловушкой
        """
        old = self._by_name.get((scope, package.name))
        if old is None:
            return self.attach(package, scope, initial_scratch or b"")
        if package.version <= old.package.version:
            raise DowngradeRejected(
                f"{package.name}: {package.version_text} is not newer than "
                f"{old.package.version_text}"
            )
        self._check_conflicts(package, scope, replacing=old)

        scratch = old.initial_scratch if initial_scratch is None else initial_scratch
        attachment = self._prepare(package, scope, scratch)
        self._run_attach(attachment)

        try:
            self.run_event(old, EventKind.ON_DETACH)
        except Trap as trap:
            logger.warning(f"{self.owner}: ON_DETACH of old {old.name} trapped: {trap}")
        self._unindex(old)
        self._index(attachment)
        logger.info(
            f"{self.owner}: upgraded {package.name} "
            f"{old.package.version_text} -> {package.version_text}"
        )
        return attachment

    def teardown_circuit(self, circuit: Hashable) -> int:
        """
        ON_CIRCUIT_TEARDOWN для подключений цепочки, затем их удаление

        Returns:
            Число выполненных событий
        """
        attachments = self.attachments(circuit)
        fired = 0
        for attachment in attachments:
            try:
                if self.run_event(attachment, EventKind.ON_CIRCUIT_TEARDOWN) is not None:
                    fired += 1
            except Trap as trap:
                fired += 1
                logger.warning(
                    f"{self.owner}: ON_CIRCUIT_TEARDOWN of {attachment.name} trapped: {trap}"
                )
            self._unindex(attachment)
        if attachments:
            logger.debug(f"{self.owner}: removed {len(attachments)} circuit-scoped plugins")
        return fired
