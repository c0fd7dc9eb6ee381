"""
FAN: гибкая анонимная сеть с протокольными плагинами
"""

__version__ = "1.0.0"
