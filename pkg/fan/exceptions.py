"""
Иерархия исключений FAN
"""

from typing import List, Optional, Tuple


class FanError(Exception):
    """Базовая ошибка FAN"""


class ConfigError(FanError):
    """Неверная конфигурация сценария или CLI"""


# ===== Ячейки и криптография =====


class CellError(FanError):
    """Ошибка кодирования/декодирования ячейки"""


class CryptoError(FanError):
    """Ошибка крипто-провайдера (переполнение счётчика, неверный ключ)"""


# ===== Виртуальная машина =====


class ParseError(FanError):
    """Байткод не разбирается в инструкции"""


class VerifierRejected(FanError):
    """Статический верификатор отклонил программу"""

    def __init__(self, violations: List[Tuple[int, str]]):
        self.violations = violations
        summary = "; ".join(f"#{index}: {message}" for index, message in violations[:5])
        super().__init__(f"verifier rejected program ({len(violations)} violations): {summary}")


class AsmError(FanError):
    """Ошибка ассемблирования с номером строки"""

    def __init__(self, line: int, message: str):
        self.line = line
        self.message = message
        super().__init__(f"line {line}: {message}")


# ===== Пакеты плагинов =====


class PackageError(FanError):
    """Пакет плагина отклонён"""


class BadMagic(PackageError):
    """Не пакет FAN или неподдерживаемый формат"""


class MalformedPackage(PackageError):
    """Подписанный пакет со структурной ошибкой"""


class UnknownSigner(PackageError):
    """Подписант отсутствует в хранилище доверия"""


class SignatureInvalid(PackageError):
    """Подпись не сходится"""


class UnknownCapability(PackageError):
    """Пакет требует бит возможности, которого нет в ABI хоста"""


class CapabilityDenied(PackageError):
    """Пакет просит возможности сверх политики узла"""


# ===== Манифесты репозитория =====


class ManifestError(FanError):
    """Манифест репозитория не прошёл проверку"""


class Expired(ManifestError):
    """Срок действия root или targets истёк"""


class InsufficientSignatures(ManifestError):
    """Недостаточно различных валидных подписей"""


class UnknownKeyId(ManifestError):
    """Подпись ключом, которого нет в root"""


class CanonicalizationMismatch(ManifestError):
    """Файл манифеста не в канонической форме"""


class UnknownTarget(ManifestError):
    """Плагина нет в targets"""


class HashMismatch(ManifestError):
    """Длина или хэш пакета не совпадает с targets"""


class CapabilityEscalation(ManifestError):
    """Пакет просит больше возможностей, чем разрешено манифестом"""


# ===== Реестр =====


class RegistryError(FanError):
    """Ошибка реестра плагинов"""


class FeatureConflict(RegistryError):
    """Функция уже обслуживается плагином в этой области"""


class AttachAborted(RegistryError):
    """ON_ATTACH завершился ловушкой, подключение отменено"""

    def __init__(self, message: str, trap: Optional[Exception] = None):
        self.trap = trap
        super().__init__(message)


class DowngradeRejected(RegistryError):
    """Обновление на ту же или более старую версию"""


# ===== Цепочки =====


class CircuitError(FanError):
    """Операция над цепочкой невозможна в текущем состоянии"""
