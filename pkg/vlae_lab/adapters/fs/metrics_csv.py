import csv
from pathlib import Path

from vlae_lab.application.dto import MetricsRow
from vlae_lab.application.ports import MetricsSink

COLUMNS = list(MetricsRow.model_fields)


class CsvMetricsSink(MetricsSink):
    """Append-only metrics.csv; one row per training step."""

    def __init__(self, path: Path):
        self.path = Path(path)

    def append(self, row: MetricsRow) -> None:
        fresh = not self.path.exists()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=COLUMNS)
            if fresh:
                writer.writeheader()
            writer.writerow(row.model_dump())

    def truncate_after(self, step: int) -> None:
        if not self.path.exists():
            return
        kept = [row for row in self.rows() if row.step <= step]
        with self.path.open("w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=COLUMNS)
            writer.writeheader()
            for row in kept:
                writer.writerow(row.model_dump())

    def rows(self) -> list[MetricsRow]:
        if not self.path.exists():
            return []
        with self.path.open(newline="") as f:
            return [MetricsRow.model_validate(record) for record in csv.DictReader(f)]
