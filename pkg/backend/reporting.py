"""Result serialization shared by the CLI and the service.

JSON floats use Python's shortest round-trip repr and CSV goes through
pandas with "\\n" line endings, so reruns produce byte-identical files.
"""

import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import pandas as pd

from exceptions import ConfigError
from game_core import Coalition

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"
MANIFEST_SUFFIX = ".manifest.json"


def coalition_label(bits: int, n: int) -> str:
    return str(Coalition(int(bits), n))


def to_json(payload) -> str:
    return json.dumps(payload, indent=2) + "\n"


def to_csv(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, lineterminator="\n")


def rows_frame(rows: Sequence[Sequence], columns: List[str]) -> pd.DataFrame:
    return pd.DataFrame(list(rows), columns=columns)


def write_text(text: str, out: Optional[str]) -> None:
    """Write to ``out`` or to stdout when ``out`` is None or "-"."""
    if out in (None, "-"):
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    try:
        with open(out, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    except OSError as e:
        raise ConfigError(f"cannot write {out}: {e}") from e


@dataclass(frozen=True)
class RunManifest:
    """Resolved inputs of one CLI run; written next to the results."""

    command: str
    inputs: Dict[str, str]
    seed: Optional[int]
    output: Optional[str]
    format: str
    config: Dict[str, object] = field(default_factory=dict)
    version: str = TOOL_VERSION

    def to_dict(self) -> dict:
        return asdict(self)


def resolve_inputs(paths: Dict[str, Optional[str]]) -> Dict[str, str]:
    return {name: os.path.abspath(path) for name, path in paths.items() if path}


def write_manifest(manifest: RunManifest) -> None:
    """``<out>.manifest.json`` next to file outputs; logged when results go to stdout."""
    if manifest.output in (None, "-"):
        logger.info("run manifest: %s", json.dumps(manifest.to_dict(), sort_keys=True))
        return
    write_text(to_json(manifest.to_dict()), manifest.output + MANIFEST_SUFFIX)
