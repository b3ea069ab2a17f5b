import pytest

from sbpfscan import fixtures
from sbpfscan.bytecode import isa
from sbpfscan.bytecode.asm import assemble
from sbpfscan.bytecode.cfg import FALL, TAKEN, build_cfg
from sbpfscan.bytecode.elf import MM_PROGRAM_START, load_program, write_elf
from sbpfscan.bytecode.marks import find_deserialization_merge_point, functions_within
from sbpfscan.errors import (AssemblerError, LoadError, MalformedTargetError,
                             UnsupportedTargetError)

from conftest import image, static

PLAIN = """
.text
entrypoint:
    mov64 r6, 3
    ldxb r2, [r1+8]
    jeq r2, 0, +2
    add64 r6, -1
    ja +1
    xor64 r6, r2
    lddw r3, 0x1122334455667788
    be16 r3
    call sol_log_64_
    mov64 r0, r6
    exit
"""


def test_disassembly_reassembles_to_the_same_text():
    img = load_program(assemble(PLAIN))
    listing = "\n".join(isa.format_instruction(i, img.syscalls) for i in img.instructions)
    again = load_program(assemble(".text\nentrypoint:\n" + listing))
    assert again.text == img.text


def test_fixture_image_metadata():
    img = image("format")
    assert img.at(img.entry).mnemonic == "mov64"
    names = set(img.syscalls.values())
    assert {"sol_log_", "sol_memcpy_", "sol_alloc_free_"} <= names
    assert any("alloc3fmt6format" in s for s in img.symbols.values())
    assert any(s == "__rust_dealloc" for s in img.symbols.values())
    assert len(img.digest) == 64


def test_internal_call_resolves_to_label():
    img = image("deser")
    call = next(i for i in img.instructions if i.is_call)
    kind, target = img.call_target(call)
    assert kind == "function" and img.symbols[target] == "deserialize"


def test_rodata_relocation_gives_runtime_address():
    img = load_program(assemble(".text\nentrypoint:\n lddw r1, msg\n exit\n.rodata\n .zero 4\nmsg:\n .ascii \"hi\"\n"))
    lddw = img.instructions[0]
    assert lddw.imm == MM_PROGRAM_START + img.rodata_vaddr + 4
    assert img.rodata[4:6] == b"hi"


def test_load_errors():
    with pytest.raises(LoadError):
        load_program(b"not an elf at all")
    text = isa.encode(isa.Instruction(isa.EXIT, 0, 0, 0, 0))
    with pytest.raises(UnsupportedTargetError):
        load_program(write_elf(text, machine=62))


@pytest.mark.parametrize("src", [
    ".text\nentrypoint:\n bogus r1\n",
    ".text\nentrypoint:\n ja nowhere\n",
    ".text\nentrypoint:\nentrypoint:\n exit\n",
    ".text\nstart:\n exit\n",
    ".text\nentrypoint:\n mov64 r11, 1\n",
    ".text\nentrypoint:\n ldxb r1, [r1+40000]\n exit\n",
])
def test_assembler_errors(src):
    with pytest.raises(AssemblerError):
        assemble(src)


def test_jump_outside_text_is_rejected():
    text = isa.encode(isa.Instruction(0x05, 0, 0, 5, 0)) + isa.encode(isa.Instruction(isa.EXIT, 0, 0, 0, 0))
    with pytest.raises(MalformedTargetError):
        build_cfg(load_program(write_elf(text)))


def test_blocks_partition_the_text():
    img, cfg, _ = static("level0")
    covered = [a for b in cfg.blocks.values() for a in b.addresses]
    assert sorted(covered) == [i.address for i in img.instructions]
    for a in covered:
        assert a in cfg.blocks[cfg.block_of[a]].addresses


def test_branch_edges_are_typed():
    img, cfg, _ = static("level1")
    for start, block in cfg.blocks.items():
        last = img.at(block.last)
        kinds = sorted(k for _, k in cfg.succ[start])
        if last.is_cond_jump:
            assert kinds == sorted([FALL, TAKEN])
            assert (last.jump_target(), TAKEN) in cfg.succ[start]


def test_callgraph_and_functions():
    img, cfg, _ = static("format")
    fns = functions_within(cfg, img.entry, 1)
    assert len(fns) >= 3
    names = {img.symbols.get(f) for f in cfg.functions}
    assert "deserialize" in names and "pad_integral" in names


@pytest.mark.parametrize("name", ["deser", "level0", "level4", "format", "dispatch"])
def test_merge_point_is_the_account_loop_latch(name):
    img, cfg, marks = static(name)
    mp = marks.merge_point
    assert mp is not None
    assert isa.format_instruction(img.at(mp)) == "add64 r4, 56"
    assert find_deserialization_merge_point(img, cfg, 3) == mp
    assert img.symbols[marks.merge_function] == "deserialize"


@pytest.mark.parametrize("name", ["two_loops", "exit_only", "three_functions"])
def test_no_merge_point_without_a_unique_marker_loop(name):
    _, _, marks = static(name)
    assert marks.merge_point is None


def test_merge_point_depth_limit():
    img, cfg, _ = static("deser")
    assert find_deserialization_merge_point(img, cfg, 0) is None


def test_dispatch_leaves():
    assert len(static("dispatch")[2].dispatch_leaves) == 3
    assert len(static("nested_dispatch")[2].dispatch_leaves) == 4
    assert static("level1")[2].dispatch_leaves == frozenset()


def test_cpi_sites():
    img, cfg, marks = static("level4")
    calls = [i.address for i in img.instructions
             if i.is_call and img.call_target(i) == ("syscall", "sol_invoke_signed_c")]
    assert marks.cpi_sites == frozenset(calls) and len(calls) == 1
    assert static("level1")[2].cpi_sites == frozenset()


def test_format_skip_detection():
    img, _, marks = static("format")
    (site,) = marks.skip_sites
    kind, target = img.call_target(img.at(site))
    assert kind == "function" and img.symbols[target] == fixtures.FORMAT_FN
    # the branch on the formatted length disqualifies the negative fixture
    assert static("format_branch")[2].skip_sites == frozenset()


def test_dominators_and_loops():
    img, cfg, marks = static("deser")
    loop = next(lp for lp in cfg.loops if marks.merge_point in lp.body)
    assert cfg.dominates(loop.function, loop.header, marks.merge_point)
    assert marks.merge_point in loop.latches
