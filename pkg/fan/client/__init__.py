"""
Клиент FAN: цепочки, доставка плагинов на шаги и локальные подключения
"""

from fan.client.circuit import CircuitHandle, CircuitState, Client, InjectionResult

__all__ = ["CircuitHandle", "CircuitState", "Client", "InjectionResult"]
