"""
Общие фикстуры тестов: ключи подписи, образцы плагинов и готовые пакеты
"""

import json
from pathlib import Path

import pytest

from fan.plugins.keys import SigningKey
from fan.toolkit.samples import build_sample_plugins
from tests.helpers import sample_package

VECTORS_DIR = Path(__file__).parent / "vectors"


@pytest.fixture(scope="session")
def samples():
    return build_sample_plugins()


@pytest.fixture(scope="session")
def owner_key():
    return SigningKey.derive(1, "owner")


@pytest.fixture(scope="session")
def stranger_key():
    return SigningKey.derive(1, "stranger")


@pytest.fixture(scope="session")
def trusted(owner_key):
    return {owner_key.key_id: owner_key.public_key}


@pytest.fixture(scope="session")
def padding_package(samples, owner_key):
    return sample_package(samples["padding"], owner_key)


@pytest.fixture(scope="session")
def counter_package(samples, owner_key):
    return sample_package(samples["counter"], owner_key)


@pytest.fixture(scope="session")
def marker_package(samples, owner_key):
    return sample_package(samples["marker"], owner_key)


@pytest.fixture(scope="session")
def vectors():
    """Эталонные значения тестового провайдера из tests/vectors/make_vectors.sh"""
    return json.loads((VECTORS_DIR / "test_provider.json").read_text(encoding="utf-8"))
