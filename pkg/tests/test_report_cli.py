import json
import os

import jsonschema
import pytest

from sbpfscan import cli, fixtures, report
from sbpfscan.config import AnalysisConfig
from sbpfscan.errors import ConfigurationError

from conftest import analyze, image, small_config

SMALL_FLAGS = ["--max-accounts", "4", "--max-data", "64", "--max-ix", "64",
               "--global-timeout", "120"]


def _write(tmp_path, name):
    path = tmp_path / f"{name}.so"
    path.write_bytes(fixtures.build(name))
    return str(path)


def test_report_validates_and_lists_exploits(tmp_path):
    rep = report.build_report(analyze("level4"), image("level4"), small_config(), name="level4")
    data = report.report_dict(rep)
    report.validate(data)
    written = report.emit(rep, str(tmp_path))
    names = sorted(os.path.basename(p) for p in written)
    assert names[:3] == ["coverage.tsv", "exploit_0.bin", "exploit_0.json"]
    loaded = json.loads((tmp_path / "report.json").read_text())
    assert loaded["findings"][0]["kind"] == "acpi"
    assert loaded["findings"][0]["exploit_file"] == "exploit_0.bin"
    header = (tmp_path / "coverage.tsv").read_text().splitlines()[0]
    assert header == "elapsed_seconds\tinstructions_covered\tratio"


def test_schema_rejects_bad_reports():
    data = report.report_dict(report.build_report(analyze("clean"), image("clean"), small_config()))
    data["findings"] = [{"kind": "bogus", "site": 0, "unchecked_accounts": [], "evidence": {},
                         "confidence": "high"}]
    with pytest.raises(jsonschema.ValidationError):
        report.validate(data)


def test_reemitting_is_byte_identical(tmp_path):
    rep = report.build_report(analyze("level1"), image("level1"), small_config())
    report.emit(rep, str(tmp_path))
    first = (tmp_path / "report.json").read_bytes()
    report.emit(rep, str(tmp_path))
    assert (tmp_path / "report.json").read_bytes() == first


def test_summary_counts_each_contract_once_per_row():
    reps = [report.build_report(analyze(n), image(n), small_config())
            for n in ("level0", "level1", "level4", "clean")]
    rows = dict(line.split("\t") for line in report.summarize(reps).splitlines()[1:])
    assert rows == {"UAW": "2", "MOC": "1", "MSC": "1", "MOC/MSC": "0", "ACPI": "1",
                    "total": "4", "clean": "1"}


def test_flag_defaults():
    c = AnalysisConfig()
    assert (c.jobs, c.global_timeout, c.strategy_budget, c.max_accounts, c.max_data) == \
        (8, 7200.0, 600.0, 10, 1024)
    assert c.merge and c.prune and c.format_skip


@pytest.mark.parametrize("name,status,kinds", [("clean", 0, []), ("level1", 1, ["msc"])])
def test_analyze_exit_status(tmp_path, capsys, name, status, kinds):
    out = tmp_path / "out"
    assert cli.main(["analyze", _write(tmp_path, name), "--out", str(out)] + SMALL_FLAGS) == status
    line = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert line["kinds"] == kinds
    assert (out / "report.json").exists()


def test_corpus_mode_writes_summary(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    for n in ("level0", "level1", "level4", "clean"):
        _write(corpus, n)
    out = tmp_path / "out"
    status = cli.main(["analyze", str(corpus), "--out", str(out), "--jobs", "2"] + SMALL_FLAGS)
    assert status == 1
    summary = (out / "summary.tsv").read_text()
    assert "MOC\t1" in summary and "ACPI\t1" in summary and "clean\t1" in summary
    assert (out / "level4" / "report.json").exists()


@pytest.mark.parametrize("argv", [
    ["analyze", "/nonexistent/file.so"],
    ["analyze", "{elf}", "--max-accounts", "0"],
    ["analyze", "{elf}", "--program-id", "zz"],
    ["analyze", "{elf}", "--config", "/nonexistent.toml"],
])
def test_configuration_errors_exit_2(tmp_path, capsys, argv):
    elf = _write(tmp_path, "clean")
    argv = [a.replace("{elf}", elf) for a in argv]
    assert cli.main(argv + ["--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_unreadable_elf_exits_2(tmp_path):
    bad = tmp_path / "bad.so"
    bad.write_bytes(b"\x7fELF garbage")
    assert cli.main(["analyze", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_toml_config_and_flag_precedence(tmp_path):
    toml = tmp_path / "scan.toml"
    toml.write_text("[sbpfscan]\nmax-accounts = 3\nseed = 9\nno-merge = true\nglobal_timeout = 50\n")
    args = cli._parser().parse_args(["analyze", "x.so", "--config", str(toml), "--seed", "4"])
    cfg = cli.load_config(args)
    assert (cfg.max_accounts, cfg.seed, cfg.merge, cfg.global_timeout) == (3, 4, False, 50)
    toml.write_text("bogus_key = 1\n")
    with pytest.raises(ConfigurationError):
        cli.load_config(cli._parser().parse_args(["analyze", "x.so", "--config", str(toml)]))


def test_solver_library_env_is_forwarded(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.SOLVER_ENV, "/opt/z3/libz3.so")
    monkeypatch.delenv("Z3_LIBRARY_PATH", raising=False)
    src = tmp_path / "p.s"
    src.write_text(fixtures.source("clean"))
    assert cli.main(["asm", str(src), "-o", str(tmp_path / "p.so")]) == 0
    assert os.environ["Z3_LIBRARY_PATH"] == "/opt/z3/libz3.so"


def test_asm_then_disasm(tmp_path, capsys):
    src = tmp_path / "p.s"
    src.write_text(fixtures.source("level1"))
    elf = tmp_path / "p.so"
    assert cli.main(["asm", str(src), "-o", str(elf)]) == 0
    assert elf.read_bytes() == fixtures.build("level1")
    assert cli.main(["disasm", str(elf)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == len(image("level1").instructions)
    assert lines[0].startswith("0x0000: ")


def test_smt_dump(tmp_path):
    out = tmp_path / "o"
    cli.main(["analyze", _write(tmp_path, "level1"), "--out", str(out), "--smt"] + SMALL_FLAGS)
    dumps = sorted(p.name for p in out.iterdir() if p.suffix == ".smt2")
    assert dumps == ["finding_0.smt2", "finding_1.smt2"]
    assert "(check-sat)" in (out / "finding_0.smt2").read_text()


def test_fixture_utility(tmp_path, capsys):
    assert cli.main(["fixtures", str(tmp_path), "level0", "clean"]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["clean.s", "clean.so",
                                                          "level0.s", "level0.so"]
    assert (tmp_path / "clean.so").read_bytes() == fixtures.build("clean")
    assert cli.main(["fixtures", "--list", str(tmp_path), "level4", "clean"]) == 0
    assert capsys.readouterr().out.splitlines() == ["level4\tacpi", "clean\tclean"]
    assert cli.main(["fixtures", str(tmp_path), "nope"]) == 2
