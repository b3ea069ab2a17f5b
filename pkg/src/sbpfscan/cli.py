"""Command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

try:
    import tomllib
except ImportError:     # Python 3.10
    import tomli as tomllib

from .config import AnalysisConfig
from .errors import ConfigurationError, ScanError

SOLVER_ENV = "SBPFSCAN_Z3_LIBRARY"

# flag name -> config field
_FLAG_FIELDS = {
    "jobs": "jobs", "global_timeout": "global_timeout", "strategy_budget": "strategy_budget",
    "max_accounts": "max_accounts", "max_data": "max_data", "max_ix": "max_ix", "seed": "seed",
    "solver_timeout": "solver_timeout_ms", "finding_limit": "finding_limit",
    "dialect": "dialect", "program_id": "program_id",
}
_NEGATED = {"no_merge": "merge", "no_prune": "prune", "no_format_skip": "format_skip"}


def _parser():
    p = argparse.ArgumentParser(prog="sbpfscan", description="sBPF vulnerability scanner")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="analyze an ELF file or a directory of them")
    a.add_argument("path")
    a.add_argument("--out", default="sbpfscan-out")
    a.add_argument("--config", help="TOML file with option defaults")
    a.add_argument("--jobs", type=int)
    a.add_argument("--global-timeout", type=float)
    a.add_argument("--strategy-budget", type=float)
    a.add_argument("--max-accounts", type=int)
    a.add_argument("--max-data", type=int)
    a.add_argument("--max-ix", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--solver-timeout", type=int, help="per-query timeout in milliseconds")
    a.add_argument("--finding-limit", type=int)
    a.add_argument("--dialect", choices=("v1", "v2"))
    a.add_argument("--program-id", help="32-byte program id as hex")
    a.add_argument("--no-merge", action="store_true", default=None)
    a.add_argument("--no-prune", action="store_true", default=None)
    a.add_argument("--no-format-skip", action="store_true", default=None)
    a.add_argument("--smt", action="store_true", help="also dump path constraints per finding")

    d = sub.add_parser("disasm", help="print one instruction per line")
    d.add_argument("path")
    d.add_argument("--dialect", choices=("v1", "v2"), default="v1")

    s = sub.add_parser("asm", help="assemble a source listing into an ELF")
    s.add_argument("source")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--dialect", choices=("v1", "v2"), default="v1")

    f = sub.add_parser("fixtures", help="write the bundled fixture programs (.so and .s)")
    f.add_argument("out")
    f.add_argument("names", nargs="*", help="subset of fixtures (default: all)")
    f.add_argument("--list", action="store_true", help="print names and expected kinds only")
    return p


def load_config(args) -> AnalysisConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, "rb") as fh:
                raw = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigurationError(f"cannot read config file: {exc}") from None
        raw = raw.get("sbpfscan", raw)
        known = set(AnalysisConfig.__dataclass_fields__)
        for k, v in raw.items():
            k = k.replace("-", "_")
            k = _FLAG_FIELDS.get(k, k)
            if k in _NEGATED:
                k, v = _NEGATED[k], not v
            if k not in known:
                raise ConfigurationError(f"unknown config key: {k}")
            values[k] = v
    for flag, fld in _FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[fld] = v
    for flag, fld in _NEGATED.items():
        if getattr(args, flag, None):
            values[fld] = False
    try:
        cfg = AnalysisConfig(**values)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None
    return cfg.validate()


def analyze_file(path: str, config: AnalysisConfig, out_dir: str, smt: bool = False) -> dict:
    from .bytecode.elf import load_program
    from .explore.driver import run_analysis
    from .report import build_report, emit, report_dict
    from .symcore.engine import dump_smt

    with open(path, "rb") as fh:
        elf = fh.read()
    image = load_program(elf, config.dialect)
    result = run_analysis(image, config)
    rep = build_report(result, image, config, name=os.path.basename(path))
    emit(rep, out_dir)
    if smt:
        for i, f in enumerate(result.findings):
            with open(os.path.join(out_dir, f"finding_{i}.smt2"), "w") as fh:
                fh.write(dump_smt(f.state, f"{f.kind} at {f.site:#x}"))
    return report_dict(rep)


def _worker(job):
    path, config, out_dir, smt = job
    try:
        return path, analyze_file(path, config, out_dir, smt), None
    except ScanError as exc:
        return path, None, str(exc)


def _elf_files(directory):
    out = []
    for name in sorted(os.listdir(directory)):
        full = os.path.join(directory, name)
        if os.path.isfile(full) and (name.endswith(".so") or _is_elf(full)):
            out.append(full)
    return out


def _is_elf(path):
    try:
        with open(path, "rb") as fh:
            return fh.read(4) == b"\x7fELF"
    except OSError:
        return False


def cmd_analyze(args) -> int:
    config = load_config(args)
    if not os.path.exists(args.path):
        raise ConfigurationError(f"no such file or directory: {args.path}")
    if os.path.isdir(args.path):
        files = _elf_files(args.path)
        if not files:
            raise ConfigurationError(f"no ELF files in {args.path}")
        jobs = [(f, config, os.path.join(args.out, os.path.splitext(os.path.basename(f))[0]),
                 args.smt) for f in files]
        reports, errors = [], []
        if config.jobs == 1:
            results = map(_worker, jobs)
        else:
            pool = ProcessPoolExecutor(max_workers=config.jobs)
            results = pool.map(_worker, jobs)
        for path, rep, err in results:
            if err:
                errors.append((path, err))
                print(f"{path}: error: {err}", file=sys.stderr)
            else:
                reports.append(rep)
                print(f"{path}: {len(rep['findings'])} finding(s), {rep['termination_reason']}")
        from .report import summarize
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "summary.tsv"), "w") as fh:
            fh.write(summarize(reports))
        if errors and not reports:
            return 2
        return 1 if any(r["findings"] for r in reports) else 0
    rep = analyze_file(args.path, config, args.out, args.smt)
    kinds = sorted({f["kind"] for f in rep["findings"]})
    print(json.dumps({"findings": len(rep["findings"]), "kinds": kinds,
                      "termination_reason": rep["termination_reason"]}))
    return 1 if rep["findings"] else 0


def cmd_disasm(args) -> int:
    from .bytecode.elf import load_program
    from .bytecode.isa import format_instruction
    with open(args.path, "rb") as fh:
        image = load_program(fh.read(), args.dialect)
    names = {k: v for k, v in image.syscalls.items()}
    for ins in image.instructions:
        print(f"{ins.address:#06x}: {format_instruction(ins, names)}")
    return 0


def cmd_asm(args) -> int:
    from .bytecode.asm import assemble
    with open(args.source) as fh:
        elf = assemble(fh.read(), args.dialect)
    with open(args.output, "wb") as fh:
        fh.write(elf)
    return 0


def cmd_fixtures(args) -> int:
    from . import fixtures
    names = args.names or list(fixtures.NAMES)
    unknown = [n for n in names if n not in fixtures.NAMES]
    if unknown:
        raise ConfigurationError(f"unknown fixture: {unknown[0]}")
    if args.list:
        for n in names:
            kinds = fixtures.EXPECTED.get(n)
            print(n, "-" if kinds is None else ",".join(sorted(kinds)) or "clean", sep="\t")
        return 0
    os.makedirs(args.out, exist_ok=True)
    for n in names:
        with open(os.path.join(args.out, n + ".so"), "wb") as fh:
            fh.write(fixtures.build(n))
        with open(os.path.join(args.out, n + ".s"), "w") as fh:
            fh.write(fixtures.source(n))
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s\t%(name)s\t%(message)s")
    lib = os.environ.get(SOLVER_ENV)
    if lib:
        os.environ["Z3_LIBRARY_PATH"] = lib
    try:
        if args.command == "analyze":
            return cmd_analyze(args)
        if args.command == "disasm":
            return cmd_disasm(args)
        if args.command == "fixtures":
            return cmd_fixtures(args)
        return cmd_asm(args)
    except (ConfigurationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ScanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
