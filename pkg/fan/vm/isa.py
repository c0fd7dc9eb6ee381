"""
Система команд FAN: 8-байтные инструкции, таблица опкодов и формы операндов
"""

import struct
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Dict, List, Optional, Tuple

from fan.exceptions import ParseError

INSTRUCTION_SIZE = 8
MAX_INSTRUCTIONS = 65536
REGISTER_COUNT = 11
STACK_REGISTER = 10

_INSTRUCTION = struct.Struct("<BBhi")


class Opcode(IntEnum):
    # misc
    EXIT = 0x00
    CALL = 0x01
    JA = 0x02
    # ALU с непосредственным операндом
    ADDI = 0x10
    SUBI = 0x11
    MULI = 0x12
    DIVI = 0x13
    MODI = 0x14
    ANDI = 0x15
    ORI = 0x16
    XORI = 0x17
    LSHI = 0x18
    RSHI = 0x19
    ARSHI = 0x1A
    MOVI = 0x1B
    # ALU регистр-регистр
    ADD = 0x20
    SUB = 0x21
    MUL = 0x22
    DIV = 0x23
    MOD = 0x24
    AND = 0x25
    OR = 0x26
    XOR = 0x27
    LSH = 0x28
    RSH = 0x29
    ARSH = 0x2A
    MOV = 0x2B
    NEG = 0x2C
    # загрузки
    LD8 = 0x30
    LD16 = 0x31
    LD32 = 0x32
    LD64 = 0x33
    # сохранения из регистра
    ST8 = 0x40
    ST16 = 0x41
    ST32 = 0x42
    ST64 = 0x43
    # сохранения непосредственного значения
    STI8 = 0x50
    STI16 = 0x51
    STI32 = 0x52
    STI64 = 0x53
    # условные переходы с imm
    JEQI = 0x60
    JNEI = 0x61
    JLTI = 0x62
    JLEI = 0x63
    JGTI = 0x64
    JGEI = 0x65
    # условные переходы с регистром
    JEQ = 0x70
    JNE = 0x71
    JLT = 0x72
    JLE = 0x73
    JGT = 0x74
    JGE = 0x75


class Form(Enum):
    """Форма операндов: какие поля инструкции значимы"""

    NONE = "none"  # exit
    CALL = "call"  # imm
    JUMP = "jump"  # offset
    ALU_IMM = "alu_imm"  # dst, imm
    ALU_REG = "alu_reg"  # dst, src
    UNARY = "unary"  # dst
    LOAD = "load"  # dst, [src+offset]
    STORE = "store"  # [dst+offset], src
    STORE_IMM = "store_imm"  # [dst+offset], imm
    JUMP_IMM = "jump_imm"  # dst, imm, offset
    JUMP_REG = "jump_reg"  # dst, src, offset


def _form_of(opcode: Opcode) -> Form:
    value = int(opcode)
    if opcode == Opcode.EXIT:
        return Form.NONE
    if opcode == Opcode.CALL:
        return Form.CALL
    if opcode == Opcode.JA:
        return Form.JUMP
    if opcode == Opcode.NEG:
        return Form.UNARY
    return {
        0x10: Form.ALU_IMM,
        0x20: Form.ALU_REG,
        0x30: Form.LOAD,
        0x40: Form.STORE,
        0x50: Form.STORE_IMM,
        0x60: Form.JUMP_IMM,
        0x70: Form.JUMP_REG,
    }[value & 0xF0]


FORMS: Dict[int, Form] = {int(op): _form_of(op) for op in Opcode}
MNEMONICS: Dict[str, Opcode] = {op.name.lower(): op for op in Opcode}

# Ширина доступа к памяти в байтах
ACCESS_WIDTH: Dict[int, int] = {}
for _base in (Opcode.LD8, Opcode.ST8, Opcode.STI8):
    for _i, _width in enumerate((1, 2, 4, 8)):
        ACCESS_WIDTH[int(_base) + _i] = _width

# Формы, пишущие в dst (запись в r10 запрещена)
WRITES_DST = frozenset({Form.ALU_IMM, Form.ALU_REG, Form.UNARY, Form.LOAD})
JUMP_FORMS = frozenset({Form.JUMP, Form.JUMP_IMM, Form.JUMP_REG})

# Какие поля инструкции использует форма: (dst, src, offset, imm)
USED_FIELDS: Dict[Form, Tuple[bool, bool, bool, bool]] = {
    Form.NONE: (False, False, False, False),
    Form.CALL: (False, False, False, True),
    Form.JUMP: (False, False, True, False),
    Form.ALU_IMM: (True, False, False, True),
    Form.ALU_REG: (True, True, False, False),
    Form.UNARY: (True, False, False, False),
    Form.LOAD: (True, True, True, False),
    Form.STORE: (True, True, True, False),
    Form.STORE_IMM: (True, False, True, True),
    Form.JUMP_IMM: (True, False, True, True),
    Form.JUMP_REG: (True, True, True, False),
}


@dataclass(frozen=True)
class Instruction:
    """Инструкция: opcode, dst (младший полубайт), src (старший), offset s16, imm s32"""

    opcode: int
    dst: int = 0
    src: int = 0
    offset: int = 0
    imm: int = 0

    def encode(self) -> bytes:
        try:
            return _INSTRUCTION.pack(
                self.opcode, (self.dst & 0x0F) | ((self.src & 0x0F) << 4), self.offset, self.imm
            )
        except struct.error as e:
            raise ParseError(f"instruction field out of range: {e}")

    @classmethod
    def decode(cls, raw: bytes) -> "Instruction":
        opcode, regs, offset, imm = _INSTRUCTION.unpack(raw)
        return cls(opcode=opcode, dst=regs & 0x0F, src=regs >> 4, offset=offset, imm=imm)

    @property
    def form(self) -> Optional[Form]:
        return FORMS.get(self.opcode)

    @property
    def mnemonic(self) -> str:
        try:
            return Opcode(self.opcode).name.lower()
        except ValueError:
            return f"op_{self.opcode:02x}"


@dataclass(frozen=True)
class Program:
    """Разобранный байткод плагина"""

    instructions: Tuple[Instruction, ...]

    def __len__(self) -> int:
        return len(self.instructions)

    def to_bytes(self) -> bytes:
        return b"".join(insn.encode() for insn in self.instructions)

    @classmethod
    def from_instructions(cls, instructions: List[Instruction]) -> "Program":
        return cls(instructions=tuple(instructions))


def parse_program(raw: bytes) -> Program:
    """
    Разобрать байты в инструкции без семантической проверки

    Raises:
        ParseError: пустой вход, длина не кратна 8 или больше 65536 инструкций
    """
    if not raw:
        raise ParseError("program is empty")
    if len(raw) % INSTRUCTION_SIZE:
        raise ParseError(f"program length {len(raw)} is not a multiple of {INSTRUCTION_SIZE}")
    count = len(raw) // INSTRUCTION_SIZE
    if count > MAX_INSTRUCTIONS:
        raise ParseError(f"program has {count} instructions, limit is {MAX_INSTRUCTIONS}")

    raw = bytes(raw)
    return Program(
        instructions=tuple(
            Instruction.decode(raw[i : i + INSTRUCTION_SIZE])
            for i in range(0, len(raw), INSTRUCTION_SIZE)
        )
    )
