"""File formats: prediction CSVs, weight JSON, experiment configs, result tables.

Labels are 1-based in every file and 0-based in memory; the conversion
happens here and nowhere else.
"""

from __future__ import annotations

import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from .core import LabelShiftError, make_weight_vector, validate_prob_matrix
from .sim import RESULT_COLUMNS, ExperimentConfig, ResultRow

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class FileFormatError(LabelShiftError):
    """Malformed input file; the message names the file and the offending line."""


@dataclass(frozen=True)
class PredictionFile:
    ids: list[str]
    probs: np.ndarray
    labels: np.ndarray | None  # 0-based

    @property
    def class_count(self) -> int:
        return int(self.probs.shape[1])

    def __len__(self):
        return len(self.ids)


def _fmt(x: float) -> str:
    return "%.17g" % x


def read_predictions(path, require_labels: bool = False) -> PredictionFile:
    """Read ``id,p_1,...,p_K[,label]``; every row must be a valid probability vector."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FileFormatError(f"{path}: empty file") from None
        if not header or header[0] != "id":
            raise FileFormatError(f"{path}: header must start with 'id'")
        has_label = header[-1] == "label"
        pcols = header[1:-1] if has_label else header[1:]
        K = len(pcols)
        if K < 2 or pcols != [f"p_{k}" for k in range(1, K + 1)]:
            raise FileFormatError(f"{path}: expected columns p_1..p_K (K >= 2), got {pcols}")
        if require_labels and not has_label:
            raise FileFormatError(f"{path}: a 'label' column is required")
        ids, rows, labels = [], [], []
        for line, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise FileFormatError(f"{path}:{line}: expected {len(header)} fields, got {len(rec)}")
            ids.append(rec[0])
            try:
                rows.append([float(v) for v in rec[1:K + 1]])
                if has_label:
                    lab = int(rec[-1])
                    if not 1 <= lab <= K:
                        raise ValueError(f"label {lab} outside 1..{K}")
                    labels.append(lab - 1)
            except ValueError as exc:
                raise FileFormatError(f"{path}:{line}: {exc}") from None
    P = np.array(rows, dtype=float).reshape(-1, K)
    if len(P):
        try:
            # values are kept exactly as written so files round-trip
            P = validate_prob_matrix(P, renormalize=False)
        except LabelShiftError as exc:
            raise FileFormatError(f"{path}: {exc}") from None
    return PredictionFile(ids, P, np.array(labels, dtype=np.int64) if has_label else None)


def write_predictions(path_or_fh, pf: PredictionFile) -> None:
    """Write with 17 significant digits so that reading back is exact."""
    def _write(fh):
        w = csv.writer(fh, lineterminator="\n")
        K = pf.class_count
        w.writerow(["id"] + [f"p_{k}" for k in range(1, K + 1)]
                   + (["label"] if pf.labels is not None else []))
        for i, pid in enumerate(pf.ids):
            row = [pid] + [_fmt(v) for v in pf.probs[i]]
            if pf.labels is not None:
                row.append(str(int(pf.labels[i]) + 1))
            w.writerow(row)

    if hasattr(path_or_fh, "write"):
        _write(path_or_fh)
    else:
        with open(path_or_fh, "w", newline="", encoding="utf-8") as fh:
            _write(fh)


def read_weights(path) -> np.ndarray:
    """A JSON array of K nonnegative numbers."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, list) or not all(isinstance(v, (int, float)) for v in data):
        raise FileFormatError(f"{path}: weights must be a JSON array of numbers")
    try:
        return make_weight_vector(data)
    except LabelShiftError as exc:
        raise FileFormatError(f"{path}: {exc}") from None


def dump_weights(w: Sequence[float]) -> str:
    return json.dumps([float(v) for v in w])


def dump_matrix(C: np.ndarray) -> str:
    """Row-major nested JSON arrays."""
    return json.dumps(np.asarray(C, dtype=float).tolist())


def load_config(path) -> ExperimentConfig:
    """Parse a flat TOML config; nested tables and unknown keys are rejected."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise
    except tomllib.TOMLDecodeError as exc:
        raise FileFormatError(f"{path}: {exc}") from None
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise FileFormatError(f"{path}: config must be flat; found tables {nested}")
    if "pool" in data and not Path(data["pool"]).is_absolute():
        data["pool"] = str((path.parent / data["pool"]).resolve())
    try:
        return ExperimentConfig.from_mapping(data)
    except (LabelShiftError, TypeError, ValueError) as exc:
        raise FileFormatError(f"{path}: {exc}") from None


def _cell(v) -> str:
    if isinstance(v, tuple):
        return ";".join(_cell(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results(rows: Sequence[ResultRow], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow([_cell(getattr(r, c)) for c in RESULT_COLUMNS])


def read_results(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
