"""
Пакеты плагинов: ключи, подписанный формат .fanp, манифест репозитория и реестр
"""
