"""
Дизассемблер: одна строка мнемоники на инструкцию, пересобирается ассемблером байт-в-байт
"""

from typing import Dict, List

from fan.vm.isa import JUMP_FORMS, STACK_REGISTER, USED_FIELDS, Form, Instruction, Program


def _is_expressible(insn: Instruction) -> bool:
    """Можно ли записать инструкцию мнемоникой без потери полей"""
    form = insn.form
    if form is None:
        return False
    uses_dst, uses_src, uses_offset, uses_imm = USED_FIELDS[form]
    if (uses_dst and insn.dst > STACK_REGISTER) or (not uses_dst and insn.dst):
        return False
    if (uses_src and insn.src > STACK_REGISTER) or (not uses_src and insn.src):
        return False
    if not uses_offset and insn.offset:
        return False
    if not uses_imm and insn.imm:
        return False
    return True


def _memory(register: int, offset: int) -> str:
    if offset == 0:
        return f"[r{register}]"
    sign = "+" if offset > 0 else "-"
    return f"[r{register}{sign}{abs(offset)}]"


def _jump_target(index: int, insn: Instruction, labels: Dict[int, str]) -> str:
    target = index + 1 + insn.offset
    if target in labels:
        return labels[target]
    return f"{insn.offset:+d}"


def format_instruction(index: int, insn: Instruction, labels: Dict[int, str]) -> str:
    """Текст одной инструкции без метки"""
    if not _is_expressible(insn):
        return f".raw {insn.encode().hex()}"

    name = insn.mnemonic
    form = insn.form
    if form == Form.NONE:
        return name
    if form == Form.CALL:
        return f"{name} {insn.imm}"
    if form == Form.JUMP:
        return f"{name} {_jump_target(index, insn, labels)}"
    if form == Form.ALU_IMM:
        return f"{name} r{insn.dst}, {insn.imm}"
    if form == Form.ALU_REG:
        return f"{name} r{insn.dst}, r{insn.src}"
    if form == Form.UNARY:
        return f"{name} r{insn.dst}"
    if form == Form.LOAD:
        return f"{name} r{insn.dst}, {_memory(insn.src, insn.offset)}"
    if form == Form.STORE:
        return f"{name} {_memory(insn.dst, insn.offset)}, r{insn.src}"
    if form == Form.STORE_IMM:
        return f"{name} {_memory(insn.dst, insn.offset)}, {insn.imm}"
    if form == Form.JUMP_IMM:
        return f"{name} r{insn.dst}, {insn.imm}, {_jump_target(index, insn, labels)}"
    return f"{name} r{insn.dst}, r{insn.src}, {_jump_target(index, insn, labels)}"


def disassemble(program: Program) -> str:
    """
    Текст программы; цели переходов в [0, n] получают синтезированные метки L<index>

    Неверифицируемые программы тоже дизассемблируются (.raw для невыразимых инструкций).
    """
    count = len(program)
    targets = set()
    for index, insn in enumerate(program.instructions):
        if insn.form in JUMP_FORMS and _is_expressible(insn):
            target = index + 1 + insn.offset
            if 0 <= target <= count:
                targets.add(target)
    labels = {target: f"L{target}" for target in sorted(targets)}

    lines: List[str] = []
    for index, insn in enumerate(program.instructions):
        if index in labels:
            lines.append(f"{labels[index]}:")
        lines.append(format_instruction(index, insn, labels))
    if count in labels:
        lines.append(f"{labels[count]}:")
    return "\n".join(lines) + "\n"
