# src/metrics.py
from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence

import pandas as pd

from config.settings import FLOAT_FORMAT
from src.utils import get_logger

logger = get_logger(__name__)


class MetricsWriter:
    """
    Append-only metrics CSV. `# key=value` comment lines come first, then a
    header row, then rows flushed every `flush_every` writes.
    """

    def __init__(
        self,
        path: str | Path,
        columns: Sequence[str],
        header: Mapping[str, Any] | None = None,
        flush_every: int = 100,
    ) -> None:
        self.path = Path(path)
        self.columns = list(columns)
        self.flush_every = max(1, int(flush_every))
        self._rows: List[Dict[str, Any]] = []
        self._header_written = False
        self.rows_written = 0

        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", encoding="utf-8", newline="") as fh:
            for key, value in (header or {}).items():
                fh.write(f"# {key}={value}\n")

    def write(self, row: Mapping[str, Any]) -> None:
        missing = [c for c in self.columns if c not in row]
        if missing:
            raise KeyError(f"Metrics row is missing columns: {missing}")
        self._rows.append({c: row[c] for c in self.columns})
        if len(self._rows) >= self.flush_every:
            self.flush()

    def flush(self) -> None:
        if not self._rows and self._header_written:
            return
        df = pd.DataFrame(self._rows, columns=self.columns)
        with self.path.open("a", encoding="utf-8", newline="") as fh:
            df.to_csv(fh, index=False, header=not self._header_written, float_format=FLOAT_FORMAT)
        self._header_written = True
        self.rows_written += len(self._rows)
        self._rows = []

    def close(self) -> None:
        self.flush()
        logger.info("💾 Metrics saved: %s (%d rows)", self.path, self.rows_written)

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def read_header(path: str | Path) -> Dict[str, str]:
    """The `# key=value` lines at the top of a metrics file."""
    out: Dict[str, str] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("# "):
                break
            key, _, value = line[2:].rstrip("\n").partition("=")
            out[key] = value
    return out
