"""Append-only JSONL metrics: one header line, one record per outer step,
optionally a final evaluation record."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

STEP_KEYS = ("step", "outer_loss", "query_acc", "pseudo_acc", "alpha",
             "gamma_mean", "wall_ms")


class MetricsWriter:
    def __init__(self, path: Path, config_text: str, seed: int) -> None:
        self.path = Path(path)
        self._fh = open(self.path, "a")
        if self.path.stat().st_size == 0:
            self._emit({"record": "header", "format": "metrics-v1",
                        "seed": seed, "config": config_text})

    def _emit(self, obj: dict) -> None:
        self._fh.write(json.dumps(obj) + "\n")
        self._fh.flush()

    def write_step(self, step: int, record: dict, timing: bool) -> None:
        row = {"step": step}
        row.update({k: record[k] for k in STEP_KEYS if k != "step"})
        if not timing:
            row["wall_ms"] = 0.0
        self._emit(row)

    def write_final_eval(self, summary: dict, seed: int) -> None:
        self._emit({"record": "final_eval", "seed": seed, **summary})

    def close(self) -> None:
        self._fh.close()


def read_metrics(path: Path) -> tuple[Optional[dict], list[dict], Optional[dict]]:
    """Returns (header, step records, final eval record or None)."""
    header, steps, final = None, [], None
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if obj.get("record") == "header":
            header = obj
        elif obj.get("record") == "final_eval":
            final = obj
        else:
            steps.append(obj)
    return header, steps, final
