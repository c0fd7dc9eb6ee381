"""
Инструменты сборки плагинов: ассемблер и образцовые плагины
"""

from fan.toolkit.assembler import assemble, assemble_with_labels
from fan.toolkit.samples import SamplePlugin, build_sample_plugins

__all__ = ["SamplePlugin", "assemble", "assemble_with_labels", "build_sample_plugins"]
