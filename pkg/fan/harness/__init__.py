"""
Обвязка запуска: детерминированная симуляция, сокетный транспорт и бенчмарк подключения
"""
