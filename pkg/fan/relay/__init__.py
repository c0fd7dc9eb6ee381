"""
Ядро узла: машина состояний relay и хост-интерфейс плагинов
"""
