import csv
import io
import math
from dataclasses import dataclass

from .errors import ContractError

HEADER = ("step", "split", "loss", "accuracy", "epsilon_spent", "wall_seconds", "seed")


@dataclass
class MetricsRecord:
    step: int
    split: str
    loss: float
    accuracy: float
    epsilon_spent: float = None
    wall_seconds: float = 0.0
    seed: int = 0

    def row(self):
        eps = "" if self.epsilon_spent is None or math.isnan(self.epsilon_spent) else f"{self.epsilon_spent:.6f}"
        return [str(int(self.step)), self.split, f"{self.loss:.8f}", f"{self.accuracy:.6f}", eps,
                f"{self.wall_seconds:.3f}", str(int(self.seed))]


def check_records(records):
    last = {}
    for r in records:
        if not (0.0 <= r.accuracy <= 1.0) and not math.isnan(r.accuracy):
            raise ContractError(f"accuracy {r.accuracy} outside [0, 1] at step {r.step}")
        if r.split in last and r.step <= last[r.split]:
            raise ContractError(f"non-monotone step {r.step} after {last[r.split]} on split {r.split!r}")
        last[r.split] = r.step


def format_csv(records):
    check_records(records)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def write_csv(records, path):
    with open(path, "w", newline="") as fh:
        fh.write(format_csv(records))


def read_csv(path):
    """Parse a metrics CSV; raises ContractError naming the first missing column."""
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        cols = rd.fieldnames or []
        if not cols:
            return []
        for c in HEADER:
            if c not in cols:
                raise ContractError(f"{path}: missing column {c!r}")
        out = []
        for row in rd:
            eps = row["epsilon_spent"]
            out.append(MetricsRecord(int(row["step"]), row["split"], float(row["loss"]), float(row["accuracy"]),
                                     float(eps) if eps else None, float(row["wall_seconds"]), int(row["seed"])))
        return out


def summarize(records, mode, split="test"):
    """Representative accuracy: fl = mean of last 10 rounds, dp = final epoch,
    dpfl = mean of last 3 rounds, central = final epoch."""
    acc = [r.accuracy for r in records if r.split == split]
    if not acc:
        return math.nan
    window = {"fl": 10, "dpfl": 3}.get(mode, 1)
    tail = acc[-window:]
    return sum(tail) / len(tail)
