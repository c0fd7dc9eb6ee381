"""
Статический верификатор байткода: политика допуска программы в песочницу
"""

from dataclasses import dataclass, field
from typing import List, Tuple

from fan.exceptions import VerifierRejected
from fan.vm.isa import (
    FORMS,
    JUMP_FORMS,
    STACK_REGISTER,
    USED_FIELDS,
    WRITES_DST,
    Form,
    Opcode,
    Program,
)


@dataclass
class VerifierReport:
    """Результат проверки: список нарушений (индекс инструкции, сообщение)"""

    violations: List[Tuple[int, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, index: int, message: str) -> None:
        self.violations.append((index, message))

    def raise_for_violations(self) -> None:
        if self.violations:
            raise VerifierRejected(self.violations)


def verify(program: Program, host_table_size: int) -> VerifierReport:
    """
    Проверить программу; нарушения перечисляются, а не выбрасываются

    Принимается, только если: все опкоды из таблицы, регистры ≤ 10, нет записи в r10,
    все переходы в [0, n], индексы CALL в [0, host_table_size), последняя инструкция EXIT или JA.
    """
    report = VerifierReport()
    count = len(program)

    for index, insn in enumerate(program.instructions):
        form = FORMS.get(insn.opcode)
        if form is None:
            report.add(index, f"unknown opcode 0x{insn.opcode:02x}")
            continue

        uses_dst, uses_src, _, _ = USED_FIELDS[form]
        if uses_dst and insn.dst > STACK_REGISTER:
            report.add(index, f"bad register r{insn.dst}")
        if uses_src and insn.src > STACK_REGISTER:
            report.add(index, f"bad register r{insn.src}")

        if form in WRITES_DST and insn.dst == STACK_REGISTER:
            report.add(index, "write to r10")

        if form in JUMP_FORMS:
            target = index + 1 + insn.offset
            if not 0 <= target <= count:
                report.add(index, f"jump target out of bounds ({target})")

        if form == Form.CALL and not 0 <= insn.imm < host_table_size:
            report.add(index, f"invalid host index {insn.imm}")

    last = program.instructions[-1].opcode if count else None
    if last not in (Opcode.EXIT, Opcode.JA):
        report.add(max(count - 1, 0), "final instruction must be exit or ja")

    return report
