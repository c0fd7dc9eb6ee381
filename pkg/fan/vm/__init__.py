"""
Пользовательская виртуальная машина для протокольных плагинов
"""

from fan.vm.disassembler import disassemble
from fan.vm.interpreter import (
    DEFAULT_GAS,
    ExecutionResult,
    GuestArena,
    HostEntry,
    HostTable,
    Trap,
    TrapKind,
    VmInstance,
    instantiate,
)
from fan.vm.isa import Instruction, Opcode, Program, parse_program
from fan.vm.verifier import VerifierReport, verify

__all__ = [
    "DEFAULT_GAS",
    "ExecutionResult",
    "GuestArena",
    "HostEntry",
    "HostTable",
    "Instruction",
    "Opcode",
    "Program",
    "Trap",
    "TrapKind",
    "VerifierReport",
    "VmInstance",
    "disassemble",
    "instantiate",
    "parse_program",
    "verify",
]
