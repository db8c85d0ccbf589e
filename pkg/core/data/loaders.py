"""
Dataset Loaders
Bag CSV reading/writing and the MUSK1 "clean1" layout
"""

import io
import logging
import re
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from ..errors import ParseError
from ..models.bag import Bag, Dataset
from .serialization import atomic_write_text

logger = logging.getLogger(__name__)

BAG_CSV_PREFIX = ["bag_id", "bag_label", "instance_label"]
MUSK_FEATURES = 166
MUSK_COLUMNS = MUSK_FEATURES + 3
FLOAT_FORMAT = "%.17g"

_INTEGER = re.compile(r"^\s*[+-]?\d+\s*$")
_PARSER_LINE = re.compile(r"line (\d+)")


def _line(index: int) -> int:
    # header is line 1
    return int(index) + 2


def _read_frame(path: str, **kwargs) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False, **kwargs)
    except pd.errors.ParserError as e:
        match = _PARSER_LINE.search(str(e))
        raise ParseError(f"ragged row: {e}", int(match.group(1)) if match else None)
    except pd.errors.EmptyDataError:
        raise ParseError(f"{path} is empty")
    except (OSError, UnicodeDecodeError) as e:
        raise ParseError(f"cannot read {path}: {e}")


def _parse_label(text: str, name: str, line: int) -> Optional[int]:
    text = text.strip()
    if not text:
        return None
    if not _INTEGER.match(text) or int(text) < 1:
        raise ParseError(f"{name} must be a positive integer, got {text!r}", line)
    return int(text)


def _numeric_block(frame: pd.DataFrame, columns: List[str], first_line) -> np.ndarray:
    """Feature matrix parsed exactly (correctly rounded), so `%.17g` text round-trips"""
    cells = frame[columns].apply(lambda column: column.str.strip())
    try:
        matrix = cells.astype(float).to_numpy()
        if np.isfinite(matrix).all():
            return matrix
    except ValueError:
        pass

    # slow path: locate the first cell float() rejects or that is not finite
    for position, (index, row) in enumerate(cells.iterrows()):
        for column in columns:
            try:
                value = float(row[column])
            except ValueError:
                value = np.nan
            if not np.isfinite(value):
                raise ParseError(
                    f"non-numeric feature {column}={frame.iloc[position][column]!r}", first_line(index)
                )
    raise ParseError("non-numeric feature values")


def load_bag_csv(path: str, t: Optional[int] = None) -> Dataset:
    """Read `bag_id,bag_label,instance_label,f_1..f_p`; rows are grouped by bag_id in file order"""
    frame = _read_frame(path)
    frame.columns = [str(c).strip() for c in frame.columns]
    columns = list(frame.columns)
    feature_columns = columns[3:]
    if columns[:3] != BAG_CSV_PREFIX or not feature_columns:
        raise ParseError(f"header must start with {','.join(BAG_CSV_PREFIX)} followed by feature columns", 1)
    expected = [f"f_{k}" for k in range(1, len(feature_columns) + 1)]
    if feature_columns != expected:
        raise ParseError(f"feature columns must be named f_1..f_{len(feature_columns)}", 1)

    # short rows come back with NaN cells; blank lines are empty throughout
    cells = frame.fillna("").apply(lambda column: column.str.strip())
    blank_rows = (cells == "").all(axis=1)
    ragged = frame.isna().any(axis=1) & ~blank_rows
    if ragged.any():
        raise ParseError(f"ragged row, expected {len(columns)} fields", _line(ragged.idxmax()))
    frame = frame[~blank_rows]
    if frame.empty:
        raise ParseError(f"{path} has no data rows")

    features = _numeric_block(frame, feature_columns, _line)

    groups: Dict[str, List[int]] = {}
    bag_labels: Dict[str, Optional[int]] = {}
    gold: Dict[str, List[Optional[int]]] = {}
    for position, (index, row) in enumerate(frame.iterrows()):
        line = _line(index)
        bag_id = row["bag_id"].strip()
        if not bag_id:
            raise ParseError("empty bag_id", line)
        bag_label = _parse_label(row["bag_label"], "bag_label", line)
        instance_label = _parse_label(row["instance_label"], "instance_label", line)
        if bag_id not in groups:
            groups[bag_id] = []
            bag_labels[bag_id] = bag_label
            gold[bag_id] = []
        elif bag_labels[bag_id] != bag_label:
            raise ParseError(
                f"bag {bag_id!r} has bag_label {bag_label}, earlier rows say {bag_labels[bag_id]}", line
            )
        if gold[bag_id] and (gold[bag_id][-1] is None) != (instance_label is None):
            raise ParseError(f"bag {bag_id!r} mixes empty and non-empty instance labels", line)
        groups[bag_id].append(position)
        gold[bag_id].append(instance_label)

    bags = []
    for bag_id, rows in groups.items():
        labels = gold[bag_id]
        bags.append(
            Bag(
                instances=features[rows],
                bag_label=bag_labels[bag_id],
                gold_labels=None if labels[0] is None else labels,
                bag_id=bag_id,
            )
        )
    dataset = Dataset.from_bags(bags, t)
    logger.info(f"Loaded {dataset.n} bags / {dataset.instance_count} instances (p={dataset.p}, t={dataset.t}) from {path}")
    return dataset


def bag_csv_text(dataset: Dataset) -> str:
    """Bag CSV text with features written as %.17g"""
    records = []
    for bag in dataset.bags:
        for j in range(bag.m):
            records.append(
                [
                    bag.bag_id,
                    "" if bag.bag_label is None else str(bag.bag_label),
                    "" if bag.gold_labels is None else str(int(bag.gold_labels[j])),
                ]
            )
    frame = pd.DataFrame(records, columns=BAG_CSV_PREFIX)
    features = pd.DataFrame(
        dataset.pooled_instances(), columns=[f"f_{k}" for k in range(1, dataset.p + 1)]
    )
    frame = pd.concat([frame, features], axis=1)
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return buffer.getvalue()


def save_bag_csv(dataset: Dataset, path: str) -> None:
    """Write the dataset as a bag CSV, atomically"""
    atomic_write_text(path, bag_csv_text(dataset))
    logger.info(f"Wrote {dataset.n} bags to {path}")


def load_musk1(path: str) -> Dataset:
    """Molecule name, conformation name, 166 features, class; class 0 -> label 1, class 1 -> label 2"""
    frame = _read_frame(path, header=None)
    if frame.shape[1] != MUSK_COLUMNS:
        raise ParseError(f"MUSK rows need {MUSK_COLUMNS} columns, found {frame.shape[1]}", 1)
    frame = frame[~frame.isna().all(axis=1)]
    if frame.isna().any().any():
        index = frame.index[frame.isna().any(axis=1).to_numpy()][0]
        raise ParseError(f"ragged row, expected {MUSK_COLUMNS} fields", int(index) + 1)

    def musk_line(index):
        return int(index) + 1

    columns = list(frame.columns)
    features = _numeric_block(frame, columns[2:-1], musk_line)
    classes = pd.to_numeric(frame[columns[-1]].str.strip(), errors="coerce").to_numpy()
    bad = ~np.isin(classes, [0.0, 1.0])
    if bad.any():
        raise ParseError("class must be 0 or 1", musk_line(frame.index[np.flatnonzero(bad)[0]]))

    names = frame[columns[0]].str.strip().to_numpy()
    order: Dict[str, List[int]] = {}
    for position, name in enumerate(names):
        order.setdefault(name, []).append(position)

    bags = [
        Bag(
            instances=features[rows],
            bag_label=int(classes[rows].max()) + 1,
            bag_id=name,
        )
        for name, rows in order.items()
    ]
    dataset = Dataset.from_bags(bags, t=2)
    logger.info(f"Loaded MUSK data: {dataset.n} bags / {dataset.instance_count} instances (p={dataset.p})")
    return dataset
