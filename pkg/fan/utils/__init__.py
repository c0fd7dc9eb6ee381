"""
Утилиты и вспомогательные функции FAN
"""
