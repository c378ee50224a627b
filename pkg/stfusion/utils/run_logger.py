import json
from pathlib import Path
from typing import Any

from loguru import logger
from pydantic import BaseModel, Field

from stfusion.core.entities import Metrics
from stfusion.core.metrics import csv_header, csv_row
from stfusion.utils.config.server import HISTORY_FILE_NAME, METRICS_FILE_NAME


class RunLogger(BaseModel):
    """Appends one JSON line per training event to <run dir>/history.jsonl and evaluation rows to metrics.csv."""

    run_dir: Path
    data: dict = Field(default_factory=dict)
    index: int = 0

    def __init__(self, run_dir: str | Path, data: dict | None = None, resume: bool = False):
        super().__init__(run_dir=Path(run_dir), data=data or {})
        self.run_dir.mkdir(parents=True, exist_ok=True)
        if resume and self.history_path.exists():
            with self.history_path.open(encoding="utf-8") as f:
                self.index = sum(1 for line in f if line.strip())
            logger.info(f"Continuing history at record {self.index}")
        elif self.history_path.exists():
            logger.warning(f"Overwriting existing history in {self.run_dir}")
            self.history_path.unlink()
            if self.metrics_path.exists():
                self.metrics_path.unlink()

    @property
    def history_path(self) -> Path:
        return self.run_dir / HISTORY_FILE_NAME

    @property
    def metrics_path(self) -> Path:
        return self.run_dir / METRICS_FILE_NAME

    def add(self, additional_data: dict[str, Any]) -> None:
        document = {**self.data, **additional_data, "index": self.index}
        self.index += 1
        with self.history_path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(document, sort_keys=True) + "\n")

    def add_metrics(self, iteration: int, metrics: Metrics) -> None:
        self.add({"event": "eval", "iteration": iteration, **metrics.dict()})
        new_file = not self.metrics_path.exists()
        with self.metrics_path.open("a", encoding="utf-8") as f:
            if new_file:
                f.write(f"iteration,{csv_header()}\n")
            f.write(f"{iteration},{csv_row(metrics)}\n")

    def read(self) -> list[dict[str, Any]]:
        if not self.history_path.exists():
            return []
        with self.history_path.open(encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]
