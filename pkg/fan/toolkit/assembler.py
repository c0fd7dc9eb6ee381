"""
Двухпроходный ассемблер FAN (.fasm → .fbc)

Синтаксис: "метка:" в начале строки, одна мнемоника на строку, операнды через запятую,
комментарии от ';' до конца строки.
"""

import logging
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from fan.abi import HOST_FUNCTION_NAMES
from fan.exceptions import AsmError
from fan.vm.isa import FORMS, MNEMONICS, STACK_REGISTER, Form, Instruction, Opcode

logger = logging.getLogger(__name__)

MAX_OFFSET = 32767
IMM_MIN = -(1 << 31)
IMM_MAX = (1 << 32) - 1

_LABEL = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*:(.*)$")
_IDENTIFIER = re.compile(r"^[A-Za-z_][\w.]*$")
_REGISTER = re.compile(r"^[rR](\d+)$")
_MEMORY = re.compile(r"^\[\s*[rR](\d+)\s*(?:([+-])\s*([0-9A-Za-z]+))?\s*\]$")
_RAW = re.compile(r"^[0-9a-fA-F]{16}$")

# Ожидаемые операнды по форме инструкции
_OPERAND_COUNT = {
    Form.NONE: 0,
    Form.CALL: 1,
    Form.JUMP: 1,
    Form.ALU_IMM: 2,
    Form.ALU_REG: 2,
    Form.UNARY: 1,
    Form.LOAD: 2,
    Form.STORE: 2,
    Form.STORE_IMM: 2,
    Form.JUMP_IMM: 3,
    Form.JUMP_REG: 3,
}


@dataclass
class _Statement:
    line: int
    mnemonic: str
    operands: List[str]
    index: int


def _split_operands(text: str) -> List[str]:
    text = text.strip()
    if not text:
        return []
    return [part.strip() for part in text.split(",")]


def _parse_int(text: str, line: int, what: str) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise AsmError(line, f"bad {what} '{text}'")


def _register(text: str, line: int) -> int:
    match = _REGISTER.match(text)
    if not match:
        raise AsmError(line, f"bad register '{text}'")
    number = int(match.group(1))
    if number > STACK_REGISTER:
        raise AsmError(line, f"bad register '{text}'")
    return number


def _immediate(text: str, line: int) -> int:
    value = _parse_int(text, line, "immediate")
    if not IMM_MIN <= value <= IMM_MAX:
        raise AsmError(line, f"immediate out of range '{text}'")
    # Значения 0x80000000..0xFFFFFFFF записываются как знаковые 32 бита
    if value > (1 << 31) - 1:
        value -= 1 << 32
    return value


def _check_offset(value: int, line: int) -> int:
    if not -MAX_OFFSET - 1 <= value <= MAX_OFFSET:
        raise AsmError(line, f"offset overflow ({value})")
    return value


def _memory(text: str, line: int) -> Tuple[int, int]:
    match = _MEMORY.match(text)
    if not match:
        raise AsmError(line, f"bad memory operand '{text}'")
    register = int(match.group(1))
    if register > STACK_REGISTER:
        raise AsmError(line, f"bad register 'r{register}'")
    offset = 0
    if match.group(2):
        offset = _parse_int(match.group(3), line, "offset")
        if match.group(2) == "-":
            offset = -offset
    return register, _check_offset(offset, line)


def _jump_offset(text: str, index: int, labels: Dict[str, int], line: int) -> int:
    if _IDENTIFIER.match(text):
        if text not in labels:
            raise AsmError(line, f"undefined label '{text}'")
        return _check_offset(labels[text] - (index + 1), line)
    return _check_offset(_parse_int(text, line, "jump offset"), line)


def _call_index(text: str, line: int) -> int:
    name = text.lower()
    if name in HOST_FUNCTION_NAMES:
        return HOST_FUNCTION_NAMES[name]
    if _IDENTIFIER.match(text):
        raise AsmError(line, f"unknown host function '{text}'")
    return _immediate(text, line)


def _collect(source: str) -> Tuple[List[_Statement], Dict[str, int]]:
    """Первый проход: метки и операторы"""
    statements: List[_Statement] = []
    labels: Dict[str, int] = {}

    for line_no, raw_line in enumerate(source.splitlines(), start=1):
        text = raw_line.split(";", 1)[0].strip()

        # Несколько меток подряд на одной строке допустимы
        while True:
            match = _LABEL.match(text)
            if not match:
                break
            name = match.group(1)
            if name in labels:
                raise AsmError(line_no, f"duplicate label '{name}'")
            labels[name] = len(statements)
            text = match.group(2).strip()

        if not text:
            continue
        parts = text.split(None, 1)
        mnemonic = parts[0].lower()
        operands = _split_operands(parts[1]) if len(parts) > 1 else []
        statements.append(_Statement(line_no, mnemonic, operands, len(statements)))

    return statements, labels


def _encode(statement: _Statement, labels: Dict[str, int]) -> Instruction:
    """Второй проход: одна инструкция"""
    line = statement.line
    operands = statement.operands

    if statement.mnemonic == ".raw":
        if len(operands) != 1 or not _RAW.match(operands[0]):
            raise AsmError(line, ".raw expects 16 hex digits")
        return Instruction.decode(bytes.fromhex(operands[0]))

    opcode: Optional[Opcode] = MNEMONICS.get(statement.mnemonic)
    if opcode is None:
        raise AsmError(line, f"unknown mnemonic '{statement.mnemonic}'")
    form = FORMS[int(opcode)]
    expected = _OPERAND_COUNT[form]
    if len(operands) != expected:
        raise AsmError(
            line, f"'{statement.mnemonic}' expects {expected} operands, got {len(operands)}"
        )

    index = statement.index
    if form == Form.NONE:
        return Instruction(opcode)
    if form == Form.CALL:
        return Instruction(opcode, imm=_call_index(operands[0], line))
    if form == Form.JUMP:
        return Instruction(opcode, offset=_jump_offset(operands[0], index, labels, line))
    if form == Form.ALU_IMM:
        return Instruction(
            opcode, dst=_register(operands[0], line), imm=_immediate(operands[1], line)
        )
    if form == Form.ALU_REG:
        return Instruction(
            opcode, dst=_register(operands[0], line), src=_register(operands[1], line)
        )
    if form == Form.UNARY:
        return Instruction(opcode, dst=_register(operands[0], line))
    if form == Form.LOAD:
        base, offset = _memory(operands[1], line)
        return Instruction(opcode, dst=_register(operands[0], line), src=base, offset=offset)
    if form == Form.STORE:
        base, offset = _memory(operands[0], line)
        return Instruction(opcode, dst=base, src=_register(operands[1], line), offset=offset)
    if form == Form.STORE_IMM:
        base, offset = _memory(operands[0], line)
        return Instruction(opcode, dst=base, offset=offset, imm=_immediate(operands[1], line))
    if form == Form.JUMP_IMM:
        return Instruction(
            opcode,
            dst=_register(operands[0], line),
            imm=_immediate(operands[1], line),
            offset=_jump_offset(operands[2], index, labels, line),
        )
    return Instruction(
        opcode,
        dst=_register(operands[0], line),
        src=_register(operands[1], line),
        offset=_jump_offset(operands[2], index, labels, line),
    )


def assemble_with_labels(source: str) -> Tuple[bytes, Dict[str, int]]:
    """
    Собрать исходник и вернуть байткод вместе с таблицей меток (имя → индекс инструкции)

    Raises:
        AsmError: с номером строки
    """
    statements, labels = _collect(source)
    if not statements:
        raise AsmError(1, "no instructions")
    code = b"".join(_encode(statement, labels).encode() for statement in statements)
    logger.debug(f"Assembled {len(statements)} instructions, {len(labels)} labels")
    return code, labels


def assemble(source: str) -> bytes:
    """Собрать исходник .fasm в сырой байткод .fbc"""
    code, _ = assemble_with_labels(source)
    return code
