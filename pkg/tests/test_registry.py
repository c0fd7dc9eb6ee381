"""
Реестр плагинов: области, конфликты, жизненный цикл и горячее обновление
"""

import pytest

from fan.abi import EventKind
from fan.exceptions import AttachAborted, DowngradeRejected, FeatureConflict, UnknownSigner
from fan.plugins.package import parse_and_verify
from fan.plugins.registry import PluginRegistry
from fan.relay.host_abi import build_host_table
from fan.vm.interpreter import Trap, TrapKind
from tests.helpers import asm_package

ATTACH, DETACH, CELL, TIMER, TEARDOWN = (int(event) for event in EventKind)

# ON_ATTACH пишет 1, ON_DETACH пишет 2, ON_CIRCUIT_TEARDOWN пишет 3 в последнее слово арены
LIFECYCLE = """
on_attach:
    sti64 [r10-8], 1
    exit
on_detach:
    sti64 [r10-8], 2
    exit
on_teardown:
    sti64 [r10-8], 3
    exit
on_cell:
    movi r0, 40
    exit
"""
LIFECYCLE_ENTRIES = [(ATTACH, 0), (DETACH, 2), (TEARDOWN, 4), (CELL, 6)]


@pytest.fixture
def registry():
    return PluginRegistry(build_host_table(), gas_per_event=1000, owner="test")


@pytest.fixture
def make(owner_key, trusted):
    def make_package(name="dummy", source="exit", **overrides):
        return parse_and_verify(asm_package(source, owner_key, name=name, **overrides), trusted)

    return make_package


def _marker(attachment) -> int:
    return int.from_bytes(attachment.instance.arena.snapshot()[-8:], "little")


# ===== Поиск и области =====


def test_circuit_scope_takes_precedence(registry, make):
    global_one = registry.attach(make("global"))
    scoped = registry.attach(make("scoped"), scope="c1")
    assert registry.lookup(40, "c1") is scoped
    assert registry.lookup(40, "c2") is global_one
    assert registry.lookup(40) is global_one
    assert registry.lookup(41, "c1") is None


def test_same_feature_in_same_scope_conflicts(registry, make):
    registry.attach(make("first"))
    with pytest.raises(FeatureConflict):
        registry.attach(make("second"))
    assert [att.name for att in registry.all_attachments()] == ["first"]


def test_same_name_in_same_scope_conflicts(registry, make):
    registry.attach(make("dummy", feature_ids=[40]))
    with pytest.raises(FeatureConflict):
        registry.attach(make("dummy", feature_ids=[41]))


def test_same_plugin_in_different_scopes(registry, make):
    registry.attach(make(), scope="c1")
    registry.attach(make(), scope="c2")
    assert len(registry) == 2
    assert len(registry.attachments("c1")) == 1
    assert registry.attachments() == []


def test_describe(registry, make):
    attachment = registry.attach(make(version=(2, 1, 0)), scope="c1")
    assert attachment.describe() == {
        "name": "dummy",
        "version": "2.1.0",
        "features": [40],
        "scope": "circuit",
    }


# ===== Жизненный цикл =====


def test_attach_runs_on_attach(registry, make):
    attachment = registry.attach(make(source=LIFECYCLE, entries=LIFECYCLE_ENTRIES))
    assert _marker(attachment) == 1


def test_trapping_on_attach_leaves_registry_unchanged(registry, make):
    registry.attach(make("other", feature_ids=[41]))
    package = make(source="st64 [r10], r1\nexit", entries=[(ATTACH, 0)])
    with pytest.raises(AttachAborted) as exc_info:
        registry.attach(package)
    assert isinstance(exc_info.value.trap, Trap)
    assert exc_info.value.trap.kind == TrapKind.MEMORY_OUT_OF_BOUNDS
    assert len(registry) == 1
    assert registry.lookup(40) is None


def test_run_event_without_entry_returns_none(registry, make):
    attachment = registry.attach(make())
    assert registry.run_event(attachment, EventKind.ON_TIMER) is None


def test_events_are_gas_limited(registry, make):
    attachment = registry.attach(make(source="ja -1"))
    with pytest.raises(Trap) as exc_info:
        registry.run_event(attachment, EventKind.ON_FEATURE_CELL)
    assert exc_info.value.kind == TrapKind.GAS_EXHAUSTED
    assert exc_info.value.gas_used == 1000


def test_unknown_event_entries_are_ignored(registry, make):
    attachment = registry.attach(make(entries=[(CELL, 0), (9, 0)]))
    assert attachment.entries == {CELL: 0}


def test_detach_runs_on_detach(registry, make):
    attachment = registry.attach(make(source=LIFECYCLE, entries=LIFECYCLE_ENTRIES))
    assert registry.detach("dummy")
    assert _marker(attachment) == 2
    assert registry.lookup(40) is None


def test_detach_unknown_plugin(registry):
    assert registry.detach("ghost") is False


def test_teardown_fires_for_circuit_plugins_only(registry, make):
    global_one = registry.attach(make("global", source=LIFECYCLE, entries=LIFECYCLE_ENTRIES))
    scoped = registry.attach(
        make("scoped", source=LIFECYCLE, entries=LIFECYCLE_ENTRIES), scope="c1"
    )
    registry.attach(make("silent", feature_ids=[41]), scope="c1")
    assert registry.teardown_circuit("c1") == 1
    assert _marker(scoped) == 3
    assert _marker(global_one) == 1
    assert registry.attachments("c1") == []
    assert registry.lookup(40, "c1") is global_one


def test_trapping_teardown_still_removes(registry, make):
    registry.attach(make(source="ja -1", entries=[(TEARDOWN, 0)]), scope="c1")
    assert registry.teardown_circuit("c1") == 1
    assert len(registry) == 0


def test_initial_scratch_is_padded(registry, make):
    attachment = registry.attach(make(), initial_scratch=b"\x05")
    assert attachment.initial_scratch == b"\x05" + bytes(255)
    with pytest.raises(ValueError):
        registry.attach(make("big", feature_ids=[41]), initial_scratch=bytes(257))


# ===== Обновление =====


def test_upgrade_replaces_older_version(registry, make):
    old = registry.attach(make(source=LIFECYCLE, entries=LIFECYCLE_ENTRIES), initial_scratch=b"s")
    new = registry.upgrade(make(version=(1, 1, 0), source=LIFECYCLE, entries=LIFECYCLE_ENTRIES))
    assert registry.lookup(40) is new
    assert _marker(old) == 2
    assert _marker(new) == 1
    assert new.initial_scratch == old.initial_scratch
    assert len(registry) == 1


@pytest.mark.parametrize("version", [(1, 0, 0), (0, 9, 9)])
def test_upgrade_rejects_same_or_older(registry, make, version):
    current = registry.attach(make())
    with pytest.raises(DowngradeRejected):
        registry.upgrade(make(version=version))
    assert registry.lookup(40) is current


def test_upgrade_of_missing_plugin_attaches(registry, make):
    assert registry.upgrade(make()) is registry.get("dummy")


def test_failed_upgrade_keeps_old_version(registry, make):
    old = registry.attach(make())
    broken = make(version=(2, 0, 0), source="st64 [r10], r1\nexit", entries=[(ATTACH, 0)])
    with pytest.raises(AttachAborted):
        registry.upgrade(broken)
    assert registry.lookup(40) is old


def test_upgrade_cannot_steal_feature(registry, make):
    registry.attach(make("dummy", feature_ids=[40]))
    registry.attach(make("other", feature_ids=[41]))
    with pytest.raises(FeatureConflict):
        registry.upgrade(make("dummy", version=(2, 0, 0), feature_ids=[40, 41]))


# ===== Загрузка =====


def test_load_and_attach_measures_latency(registry, counter_package, trusted):
    attachment = registry.load_and_attach(counter_package, trusted, scope="c1")
    assert attachment.attach_latency_us >= 1
    assert registry.get("counter", "c1") is attachment


def test_load_and_attach_rejects_untrusted(registry, stranger_key, trusted):
    with pytest.raises(UnknownSigner):
        registry.load_and_attach(asm_package("exit", stranger_key), trusted)
    assert len(registry) == 0
