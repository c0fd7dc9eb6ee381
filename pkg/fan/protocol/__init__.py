"""
Протокол ячеек: формат, луковичные слои и крипто-провайдеры
"""
