"""Analysis configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigurationError


@dataclass
class AnalysisConfig:
    max_accounts: int = 10
    max_data: int = 1024
    max_ix: int = 1024
    seed: int = 0
    global_timeout: float = 7200.0
    strategy_budget: float = 600.0
    solver_timeout_ms: int = 5000
    merge: bool = True
    prune: bool = True
    format_skip: bool = True
    jobs: int = 8
    finding_limit: int = 0
    max_offset_fork: int = 256
    instruction_limit: int = 200_000
    reexec_budget: float = 60.0
    reexec_state_cap: int = 4000
    deferred_cap: int = 10_000
    merge_depth: int = 3
    dialect: str = "v1"
    program_id: str | None = None   # hex; defaults to the digest of the ELF

    def validate(self) -> "AnalysisConfig":
        if self.max_accounts < 1:
            raise ConfigurationError("--max-accounts must be at least 1")
        if self.max_data < 0 or self.max_ix < 0:
            raise ConfigurationError("capacities must be non-negative")
        if self.global_timeout <= 0 or self.strategy_budget <= 0:
            raise ConfigurationError("timeouts must be positive")
        if self.jobs < 1:
            raise ConfigurationError("--jobs must be at least 1")
        if self.dialect not in ("v1", "v2"):
            raise ConfigurationError(f"unknown dialect {self.dialect}")
        if self.program_id is not None:
            try:
                raw = bytes.fromhex(self.program_id)
            except ValueError:
                raise ConfigurationError("program id must be hex") from None
            if len(raw) != 32:
                raise ConfigurationError("program id must be 32 bytes")
        return self

    def snapshot(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "AnalysisConfig":
        return dataclasses.replace(self, **changes)
