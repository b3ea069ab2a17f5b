"""Report assembly, persistence and corpus summaries."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field

import jsonschema

from . import __version__

SCHEMA_VERSION = "1.0"
KIND_ROWS = (("UAW", None), ("MOC", "moc"), ("MSC", "msc"), ("MOC/MSC", "moc-msc"),
             ("ACPI", "acpi"))

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["schema_version", "contract", "tool_version", "config", "seed", "findings",
                 "notes", "coverage_final", "termination_reason"],
    "properties": {
        "schema_version": {"type": "string"},
        "tool_version": {"type": "string"},
        "contract": {
            "type": "object",
            "required": ["sha256"],
            "properties": {"sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
                           "address": {"type": ["string", "null"]},
                           "name": {"type": "string"}},
        },
        "config": {"type": "object"},
        "seed": {"type": "integer"},
        "findings": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["kind", "site", "unchecked_accounts", "evidence", "confidence"],
                "properties": {
                    "kind": {"enum": ["msc", "moc", "moc-msc", "acpi"]},
                    "site": {"type": "integer", "minimum": 0},
                    "unchecked_accounts": {"type": "array", "items": {"type": "integer"}},
                    "evidence": {"type": "object"},
                    "exploit_file": {"type": "string"},
                    "confidence": {"enum": ["high", "degraded"]},
                    "synthesized": {"type": "boolean"},
                    "path_id": {"type": "object"},
                },
            },
        },
        "notes": {"type": "array", "items": {"type": "object"}},
        "coverage_final": {
            "type": "object",
            "required": ["instructions_covered", "instructions_total", "ratio"],
        },
        "termination_reason": {"enum": ["exploration-complete", "global-timeout",
                                        "finding-limit"]},
        "merge": {"type": "object"},
    },
}


@dataclass
class ContractReport:
    sha256: str
    name: str
    config: dict
    seed: int
    findings: list
    notes: list
    coverage_final: dict
    termination_reason: str
    coverage_series: list = field(default_factory=list)
    strategy_time: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    merge: dict = field(default_factory=dict)
    address: str | None = None
    exploits: list = field(default_factory=list)


def _finding_json(f, exploit_file):
    d = {
        "kind": f.kind,
        "site": f.site,
        "unchecked_accounts": list(f.unchecked_accounts),
        "evidence": f.evidence,
        "confidence": f.confidence,
        "synthesized": f.synthesized,
        "path_id": {"branches": [[site, taken] for site, taken in f.path_id]},
    }
    if exploit_file:
        d["exploit_file"] = exploit_file
    return d


def build_report(result, image, config, name="contract", address=None) -> ContractReport:
    total = len(image.instructions)
    findings, exploits = [], []
    for f in result.findings:
        fname = None
        if f.exploit is not None:
            fname = f"exploit_{len(exploits)}"
            exploits.append((fname, f.exploit))
        findings.append(_finding_json(f, fname + ".bin" if fname else None))
    ms = result.merge_stats
    return ContractReport(
        sha256=image.digest,
        name=name,
        address=address,
        config=config.snapshot(),
        seed=config.seed,
        findings=findings,
        notes=list(result.notes),
        coverage_final={
            "instructions_covered": len(result.coverage),
            "instructions_total": total,
            "ratio": round(len(result.coverage) / total, 6) if total else 0.0,
            "block_ratio": round(result.stats.get("block_coverage", 0.0), 6),
        },
        termination_reason=result.termination_reason,
        coverage_series=result.coverage_series,
        strategy_time=result.strategy_time,
        stats=result.stats,
        merge={"rounds": len(ms.arrivals), "arrivals": list(ms.arrivals),
               "after_merge": list(ms.merged)},
        exploits=exploits,
    )


def report_dict(rep: ContractReport) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "contract": {"sha256": rep.sha256, "address": rep.address, "name": rep.name},
        "config": rep.config,
        "seed": rep.seed,
        "findings": rep.findings,
        "notes": rep.notes,
        "coverage_final": rep.coverage_final,
        "termination_reason": rep.termination_reason,
        "merge": rep.merge,
    }


def render_json(rep: ContractReport) -> str:
    data = report_dict(rep)
    jsonschema.validate(data, REPORT_SCHEMA)
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def validate(data: dict) -> None:
    jsonschema.validate(data, REPORT_SCHEMA)


def emit(rep: ContractReport, sink: str) -> list:
    """Write report.json, coverage.tsv, timing.json and exploit files into ``sink``."""
    os.makedirs(sink, exist_ok=True)
    written = []

    def put(name, data, mode="w"):
        path = os.path.join(sink, name)
        with open(path, mode) as fh:
            fh.write(data)
        written.append(path)

    put("report.json", render_json(rep))
    total = rep.coverage_final["instructions_total"] or 1
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["elapsed_seconds", "instructions_covered", "ratio"])
    for t, n in rep.coverage_series:
        w.writerow([f"{t:.3f}", n, f"{n / total:.6f}"])
    put("coverage.tsv", buf.getvalue())
    timing = {"strategy_seconds": {k: round(v, 3) for k, v in sorted(rep.strategy_time.items())},
              "stats": rep.stats}
    put("timing.json", json.dumps(timing, sort_keys=True, indent=2) + "\n")
    for fname, ex in rep.exploits:
        put(fname + ".bin", ex.input_bytes, "wb")
        put(fname + ".json", json.dumps(ex.sidecar, sort_keys=True, indent=2) + "\n")
    return written


def summarize(reports) -> str:
    """Per-kind contract counts; a contract counts once in every row it qualifies for."""
    reports = list(reports)
    counts = {row: 0 for row, _ in KIND_ROWS}
    clean = 0
    for rep in reports:
        data = rep if isinstance(rep, dict) else report_dict(rep)
        kinds = {f["kind"] for f in data["findings"]}
        if not kinds:
            clean += 1
        if kinds - {"acpi"}:
            counts["UAW"] += 1
        if kinds & {"moc", "moc-msc"}:
            counts["MOC"] += 1
        if kinds & {"msc", "moc-msc"}:
            counts["MSC"] += 1
        if "moc-msc" in kinds or {"moc", "msc"} <= kinds:
            counts["MOC/MSC"] += 1
        if "acpi" in kinds:
            counts["ACPI"] += 1
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["category", "contracts"])
    for row, _ in KIND_ROWS:
        w.writerow([row, counts[row]])
    w.writerow(["total", len(reports)])
    w.writerow(["clean", clean])
    return buf.getvalue()
