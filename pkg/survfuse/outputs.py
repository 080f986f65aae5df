"""The output directory of a command and the files written into it"""

from __future__ import annotations

import json
from typing import Any, Mapping

import pandas as pd
from panpath import PanPath
from slugify import slugify

from .defaults import logger
from .version import __version__

FLOAT_FORMAT = "%.17g"


class OutputDir:
    """Writes every artifact of one command under one directory

    Files are written whole through `write_text`, so local and cloud
    destinations behave the same. Every directory gets the resolved
    config (`config.json`) and the tool version (`VERSION`).

    Args:
        path: The directory, created if missing
    """

    def __init__(self, path: str | PanPath) -> None:
        self.path = PanPath(str(path)).expanduser()
        self.path.mkdir(parents=True, exist_ok=True)
        self.written: list[str] = []

    def __truediv__(self, name: str) -> PanPath:
        return self.path / name

    def _write(self, name: str, text: str) -> PanPath:
        target = self.path / name
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text)
        self.written.append(name)
        logger.debug("[bold][yellow]OUT[/yellow][/bold] Wrote %s", target)
        return target

    def write_text(self, name: str, text: str) -> PanPath:
        return self._write(name, text)

    def write_json(self, name: str, data: Any) -> PanPath:
        # allow_nan=False: undefined numbers must be None before this point
        return self._write(name, json.dumps(data, indent=2, allow_nan=False) + "\n")

    def write_csv(self, name: str, frame: pd.DataFrame) -> PanPath:
        return self._write(name, frame.to_csv(index=False, float_format=FLOAT_FORMAT))

    def write_run_info(self, config: Mapping[str, Any], command: str) -> None:
        """Echo the resolved config and the version"""
        self.write_json("config.json", {"command": command, **config})
        self.write_text("VERSION", f"{__version__}\n")

    @staticmethod
    def patient_file(patient_id: str, suffix: str) -> str:
        """File-system safe name for per-patient files"""
        return f"{slugify(patient_id, lowercase=False)}{suffix}"
