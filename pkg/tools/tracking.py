"""
tools/tracking.py
Per-epoch training log. Always written as CSV; mirrored to MLflow when
MLFLOW_TRACKING_URI is set in the environment (.env is honoured).
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

import pandas as pd
from dotenv import load_dotenv

from tools.log import get_logger

load_dotenv()
log = get_logger(__name__)

EXPERIMENT_NAME = os.getenv("MLFLOW_EXPERIMENT_NAME", "maveric-desk")


class TrainingTracker:
    def __init__(self, csv_path: str | Path, config_hash: str = "", params: Optional[dict] = None,
                 tracking_uri: Optional[str] = None):
        self.csv_path = Path(csv_path)
        self.config_hash = config_hash
        self.rows: list[dict] = []
        self._mlflow = None
        uri = tracking_uri if tracking_uri is not None else os.getenv("MLFLOW_TRACKING_URI")
        if uri:
            self._start_mlflow(uri, params or {})

    def _start_mlflow(self, uri: str, params: dict) -> None:
        try:
            import mlflow

            mlflow.set_tracking_uri(uri)
            mlflow.set_experiment(EXPERIMENT_NAME)
            mlflow.start_run()
            mlflow.log_params({**params, "config_hash": self.config_hash})
            self._mlflow = mlflow
            log.info("✅ MLflow tracking → %s", uri)
        except Exception as exc:  # tracking is optional; the CSV is the record
            log.warning("⚠️ MLflow unavailable (%s); CSV log only", exc)
            self._mlflow = None

    def log_epoch(self, row: dict) -> None:
        self.rows.append({**row, "config_hash": self.config_hash})
        if self._mlflow is not None:
            step = int(row["epoch"])
            for key, value in row.items():
                if key != "epoch":
                    self._mlflow.log_metric(key, float(value), step=step)

    def close(self) -> Path:
        self.csv_path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(self.rows).to_csv(self.csv_path, index=False)
        if self._mlflow is not None:
            self._mlflow.end_run()
            self._mlflow = None
        return self.csv_path
