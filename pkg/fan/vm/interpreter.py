"""
Интерпретатор байткода с газом и таблицей хост-функций под контролем возможностей

Вся память гостя является ареной, адреса в инструкциях считаются смещениями внутри неё.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, List, Optional, Sequence, Tuple

from fan.exceptions import FanError
from fan.vm.isa import ACCESS_WIDTH, FORMS, STACK_REGISTER, WRITES_DST, Instruction, Program
from fan.vm.verifier import verify

logger = logging.getLogger(__name__)

MASK64 = 0xFFFFFFFFFFFFFFFF
MIN_MEMORY = 4 * 1024
MAX_MEMORY = 1024 * 1024
DEFAULT_GAS = 100_000

# r6..r9 обнуляются при входе, r1..r5: аргументы
ARGUMENT_REGISTERS = 5


class TrapKind(str, Enum):
    MEMORY_OUT_OF_BOUNDS = "MemoryOutOfBounds"
    DIVISION_BY_ZERO = "DivisionByZero"
    GAS_EXHAUSTED = "GasExhausted"
    INVALID_HOST_CALL = "InvalidHostCall"
    CAPABILITY_DENIED = "CapabilityDenied"
    WRITE_TO_R10 = "WriteToR10"
    HOST_ERROR = "HostError"


class Trap(FanError):
    """Аварийное завершение гостя: ровно один вид, pc инструкции и израсходованный газ"""

    def __init__(self, kind: TrapKind, pc: Optional[int] = None, code: int = 0, detail: str = ""):
        self.kind = kind
        self.pc = pc
        self.code = code
        self.detail = detail
        self.gas_used = 0
        super().__init__(kind.value)

    def __str__(self) -> str:
        label = self.kind.value
        if self.kind == TrapKind.HOST_ERROR:
            label = f"{label}({self.code})"
        text = f"{label} at pc {self.pc}"
        return f"{text}: {self.detail}" if self.detail else text

    def to_dict(self) -> dict:
        record = {"kind": self.kind.value, "pc": self.pc}
        if self.kind == TrapKind.HOST_ERROR:
            record["code"] = self.code
        return record


# handler(аргументы r1..r5, арена, контекст вызова) -> 64-битный результат
HostHandler = Callable[[Tuple[int, ...], "GuestArena", Any], int]


@dataclass
class HostEntry:
    index: int
    capability_bit: int
    gas_cost: int
    handler: HostHandler


class HostTable:
    """Таблица хост-функций с плотными индексами от 0"""

    def __init__(self, entries: Sequence[HostEntry]):
        for position, entry in enumerate(entries):
            if entry.index != position:
                raise ValueError(f"host table indices must be dense: {entry.index} at {position}")
            if entry.gas_cost < 1:
                raise ValueError(f"host entry {entry.index} gas_cost must be >= 1")
        self.entries: List[HostEntry] = list(entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> HostEntry:
        return self.entries[index]


class GuestArena:
    """
    Линейная память гостя

    observer(addr, length, is_write) вызывается перед каждым фактическим доступом,
    уже после проверки границ.
    """

    def __init__(self, size: int, observer: Optional[Callable[[int, int, bool], None]] = None):
        self.size = size
        self._data = bytearray(size)
        self.observer = observer

    def check(self, addr: int, length: int) -> None:
        if addr < 0 or length < 0 or addr + length > self.size:
            raise Trap(
                TrapKind.MEMORY_OUT_OF_BOUNDS, detail=f"access [{addr}, +{length}) of {self.size}"
            )

    def read(self, addr: int, length: int) -> bytes:
        self.check(addr, length)
        if self.observer:
            self.observer(addr, length, False)
        return bytes(self._data[addr : addr + length])

    def write(self, addr: int, data: bytes) -> None:
        self.check(addr, len(data))
        if self.observer:
            self.observer(addr, len(data), True)
        self._data[addr : addr + len(data)] = data

    def load(self, addr: int, width: int) -> int:
        return int.from_bytes(self.read(addr, width), "little")

    def store(self, addr: int, width: int, value: int) -> None:
        self.write(addr, (value & ((1 << (8 * width)) - 1)).to_bytes(width, "little"))

    def snapshot(self) -> bytes:
        return bytes(self._data)


@dataclass
class ExecutionResult:
    value: int
    gas_used: int


def _alu(op: int, a: int, b: int) -> int:
    """Операция ALU по младшему полубайту опкода; результат по модулю 2^64"""
    kind = op & 0x0F
    if kind == 0x0:
        return (a + b) & MASK64
    if kind == 0x1:
        return (a - b) & MASK64
    if kind == 0x2:
        return (a * b) & MASK64
    if kind == 0x3:
        if b == 0:
            raise Trap(TrapKind.DIVISION_BY_ZERO)
        return a // b
    if kind == 0x4:
        if b == 0:
            raise Trap(TrapKind.DIVISION_BY_ZERO)
        return a % b
    if kind == 0x5:
        return a & b
    if kind == 0x6:
        return a | b
    if kind == 0x7:
        return a ^ b
    if kind == 0x8:
        return (a << (b & 63)) & MASK64
    if kind == 0x9:
        return a >> (b & 63)
    if kind == 0xA:
        signed = a - (1 << 64) if a >> 63 else a
        return (signed >> (b & 63)) & MASK64
    if kind == 0xB:
        return b
    # 0xC: NEG
    return (-a) & MASK64


def _condition(op: int, a: int, b: int) -> bool:
    kind = op & 0x0F
    if kind == 0x0:
        return a == b
    if kind == 0x1:
        return a != b
    if kind == 0x2:
        return a < b
    if kind == 0x3:
        return a <= b
    if kind == 0x4:
        return a > b
    return a >= b


class VmInstance:
    """
    Экземпляр песочницы: регистры r0..r10, арена, газ, таблица хоста и маска возможностей

    Арена сохраняется между запусками (обнуляется только при создании).
    """

    def __init__(
        self,
        program: Program,
        memory_size: int,
        host_table: HostTable,
        capability_mask: int,
        observer: Optional[Callable[[int, int, bool], None]] = None,
    ):
        self.program = program
        self.host_table = host_table
        self.capability_mask = capability_mask
        self.arena = GuestArena(memory_size, observer)
        self.registers: List[int] = [0] * (STACK_REGISTER + 1)
        self.registers[STACK_REGISTER] = memory_size
        self.gas_remaining = 0

        # Предекодированные кортежи для горячего цикла
        self._code = [
            (
                insn.opcode,
                insn.dst,
                insn.src,
                insn.offset,
                insn.imm & MASK64,
                FORMS.get(insn.opcode) in WRITES_DST,
            )
            for insn in program.instructions
        ]

    @property
    def memory_size(self) -> int:
        return self.arena.size

    def run(
        self,
        entry_pc: int,
        args: Sequence[int] = (),
        gas_limit: int = DEFAULT_GAS,
        context: Any = None,
        tracer: Optional[Callable[[int, Instruction, List[int]], None]] = None,
    ) -> ExecutionResult:
        """
        Выполнить программу с entry_pc

        Raises:
            Trap: аварийное завершение (вид, pc, израсходованный газ)
        """
        code = self._code
        count = len(code)
        if not 0 <= entry_pc < count:
            raise ValueError(f"entry pc {entry_pc} outside program of {count} instructions")
        if len(args) > ARGUMENT_REGISTERS:
            raise ValueError(f"at most {ARGUMENT_REGISTERS} arguments, got {len(args)}")

        regs = self.registers
        regs[0] = 0
        for i in range(1, STACK_REGISTER):
            regs[i] = args[i - 1] & MASK64 if i - 1 < len(args) else 0
        regs[STACK_REGISTER] = self.arena.size

        arena = self.arena
        gas = gas_limit
        pc = entry_pc
        at = pc
        try:
            while True:
                # Переход на n равносилен EXIT
                if pc == count:
                    self.gas_remaining = gas
                    return ExecutionResult(value=regs[0], gas_used=gas_limit - gas)
                at = pc
                if gas <= 0:
                    raise Trap(TrapKind.GAS_EXHAUSTED)
                gas -= 1

                op, dst, src, off, imm, writes_dst = code[pc]
                if tracer:
                    tracer(pc, self.program.instructions[pc], regs)
                pc += 1
                if writes_dst and dst == STACK_REGISTER:
                    raise Trap(TrapKind.WRITE_TO_R10)

                if op < 0x10:
                    if op == 0x00:
                        self.gas_remaining = gas
                        return ExecutionResult(value=regs[0], gas_used=gas_limit - gas)
                    if op == 0x01:
                        gas = self._host_call(imm, gas, context)
                    else:
                        pc += off
                elif op < 0x20:
                    regs[dst] = _alu(op, regs[dst], imm)
                elif op < 0x30:
                    regs[dst] = _alu(op, regs[dst], regs[src])
                elif op < 0x40:
                    addr = (regs[src] + off) & MASK64
                    regs[dst] = arena.load(addr, ACCESS_WIDTH[op])
                elif op < 0x50:
                    addr = (regs[dst] + off) & MASK64
                    arena.store(addr, ACCESS_WIDTH[op], regs[src])
                elif op < 0x60:
                    addr = (regs[dst] + off) & MASK64
                    arena.store(addr, ACCESS_WIDTH[op], imm)
                elif op < 0x70:
                    if _condition(op, regs[dst], imm):
                        pc += off
                else:
                    if _condition(op, regs[dst], regs[src]):
                        pc += off
        except Trap as trap:
            if trap.pc is None:
                trap.pc = at
            trap.gas_used = gas_limit - max(gas, 0)
            self.gas_remaining = max(gas, 0)
            raise

    def _host_call(self, index: int, gas: int, context: Any) -> int:
        """Вызов хост-функции: проверяются индекс, возможность и газ, именно в этом порядке"""
        if index >= len(self.host_table):
            raise Trap(TrapKind.INVALID_HOST_CALL, detail=f"host index {index}")
        entry = self.host_table[index]
        if not (self.capability_mask >> entry.capability_bit) & 1:
            raise Trap(TrapKind.CAPABILITY_DENIED, detail=f"host index {index}")
        if gas < entry.gas_cost:
            raise Trap(TrapKind.GAS_EXHAUSTED, detail=f"host index {index}")

        regs = self.registers
        args = tuple(regs[1 : ARGUMENT_REGISTERS + 1])
        try:
            result = entry.handler(args, self.arena, context)
        except Trap:
            raise
        except Exception as e:
            logger.error(f"Host function {index} failed: {e}", exc_info=True)
            raise Trap(TrapKind.HOST_ERROR, code=index, detail=str(e))
        regs[0] = int(result) & MASK64
        return gas - entry.gas_cost


def instantiate(
    program: Program,
    memory_size: int,
    host_table: HostTable,
    capability_mask: int,
    observer: Optional[Callable[[int, int, bool], None]] = None,
) -> VmInstance:
    """
    Создать экземпляр песочницы для проверенной программы

    Raises:
        ValueError: memory_size вне 4 KiB..=1 MiB
        VerifierRejected: программа не проходит верификатор для этой таблицы хоста
    """
    if not MIN_MEMORY <= memory_size <= MAX_MEMORY:
        raise ValueError(f"memory_size {memory_size} outside {MIN_MEMORY}..{MAX_MEMORY}")
    verify(program, len(host_table)).raise_for_violations()
    return VmInstance(program, memory_size, host_table, capability_mask, observer)
