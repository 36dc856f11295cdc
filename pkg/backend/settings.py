"""Runtime knobs shared by the CLI, the HTTP service and the library.

Values come from a dotenv-format file (``KEY=value`` lines). Keys carry the
``ATTRIB_`` prefix, e.g.::

    ATTRIB_CONTEXT_CAP=10000
    ATTRIB_JOBS=4
"""

import os
from dataclasses import dataclass, fields, replace
from typing import Dict, Mapping, Optional

from dotenv import dotenv_values, load_dotenv

from exceptions import ConfigError

ENV_PREFIX = "ATTRIB_"


@dataclass(frozen=True)
class Settings:
    context_cap: int = 10_000        # max contexts enumerated exactly per order
    max_exact_players: int = 25      # cap for all-subset passes
    max_index_players: int = 20      # cap for all-I(S) passes
    jobs: int = 1                    # worker threads for coalition evaluation
    chunk_rows: int = 65_536         # rows per batched backend call
    log_level: str = "WARNING"

    def __post_init__(self):
        for name in ("context_cap", "max_exact_players", "max_index_players", "jobs", "chunk_rows"):
            if getattr(self, name) < 1:
                raise ConfigError(f"setting {name} must be >= 1, got {getattr(self, name)}")
        if self.max_exact_players > 25:
            raise ConfigError("max_exact_players cannot exceed 25")

    @classmethod
    def from_mapping(cls, values: Mapping[str, Optional[str]]) -> "Settings":
        """Build settings from ``ATTRIB_*`` keys, ignoring everything else."""
        overrides: Dict[str, object] = {}
        for field in fields(cls):
            raw = values.get(ENV_PREFIX + field.name.upper())
            if raw is None or raw == "":
                continue
            try:
                overrides[field.name] = raw if field.type in (str, "str") else int(raw)
            except ValueError as e:
                raise ConfigError(f"setting {field.name}: {e}") from e
        return replace(cls(), **overrides)

    @classmethod
    def from_env_file(cls, path: str) -> "Settings":
        if not os.path.exists(path):
            raise ConfigError(f"settings file not found: {path}")
        return cls.from_mapping(dotenv_values(path))

    @classmethod
    def from_environ(cls) -> "Settings":
        # Service entry point only; the CLI never reads the process environment
        load_dotenv()
        return cls.from_mapping(os.environ)


DEFAULT_SETTINGS = Settings()
