"""Dataset ingestion, splitting and per-item record output."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import polars as pl
from pydantic import ValidationError

from .errors import InputError
from .logging_config import get_logger
from .models import Dataset, GradedResponse, LabeledResponse, ScoreScale

logger = get_logger(__name__)

MIN_SPLIT_ITEMS = 10
MIN_STRATUM = 3

Split = Tuple[List[LabeledResponse], List[LabeledResponse], List[LabeledResponse]]


def _read_frame(path: Path) -> Tuple[pl.DataFrame, str]:
    suffix = path.suffix.lower()
    if suffix in (".jsonl", ".ndjson"):
        return pl.read_ndjson(path), "ndjson"
    if suffix == ".csv":
        return pl.read_csv(path, infer_schema_length=None), "csv"
    if suffix == ".json":
        return pl.read_json(path), "json"
    raise InputError(f"Unsupported dataset format '{suffix}' for {path} (use .jsonl or .csv)")


def load_dataset(path: Path, num_classes: Optional[int] = None) -> Dataset:
    """Read ``id,text[,label][,split]`` records from NDJSON or CSV.

    The number of score levels is inferred as ``max(label) + 1`` when not given.
    """
    if not path.exists():
        raise InputError(f"Dataset not found: {path}")
    try:
        df, fmt = _read_frame(path)
    except (pl.exceptions.PolarsError, OSError, ValueError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"Could not read dataset {path}: {exc}") from exc

    missing = [col for col in ("id", "text") if col not in df.columns]
    if missing:
        raise InputError(f"Dataset {path} is missing column(s): {', '.join(missing)}")

    df = df.with_columns(pl.col("id").cast(pl.Utf8), pl.col("text").cast(pl.Utf8))
    if "label" in df.columns:
        try:
            df = df.with_columns(pl.col("label").cast(pl.Int64))
        except pl.exceptions.PolarsError as exc:
            raise InputError(f"Dataset {path} has non-integer labels") from exc
    columns = [col for col in ("id", "text", "label", "split") if col in df.columns]

    items: List[LabeledResponse] = []
    try:
        for number, row in enumerate(df.select(columns).iter_rows(named=True), start=1):
            if not (row["text"] or "").strip():
                raise InputError(f"Row {number} (id '{row['id']}') of {path} has empty text")
            items.append(
                LabeledResponse(
                    response_id=row["id"],
                    text=row["text"],
                    label=row.get("label"),
                    split=row.get("split") or None,
                )
            )
    except ValidationError as exc:
        raise InputError(f"Invalid record in {path}: {exc}") from exc

    labels = [item.label for item in items if item.label is not None]
    if any(label < 0 for label in labels):
        raise InputError(f"Dataset {path} has negative labels")
    k = num_classes or max(2, (max(labels) + 1) if labels else 2)
    try:
        dataset = Dataset(items=items, scale=ScoreScale(num_classes=k), source=str(path), format=fmt)
    except ValidationError as exc:
        raise InputError(f"Invalid dataset {path}: {exc.errors()[0]['msg']}") from exc
    logger.info("Loaded %d items (%d score levels) from %s", len(items), k, path)
    return dataset


def _floor_share(n: int, ratio: float) -> int:
    # 0.7 * 90 is 62.99999... in binary floating point.
    return math.floor(n * ratio + 1e-9)


def split_sizes(n: int, ratios: Sequence[float]) -> Tuple[int, int, int]:
    """Train and test sizes are floored; validation takes the remainder."""
    n_train = _floor_share(n, ratios[0])
    n_test = _floor_share(n, ratios[2])
    return n_train, n - n_train - n_test, n_test


def split_dataset(dataset: Dataset, ratios: Sequence[float], seed: int) -> Split:
    """Seeded train/val/test partition, stratified by label where every class has 3+ items."""
    items = dataset.items
    if len(items) < MIN_SPLIT_ITEMS:
        raise InputError(f"Need at least {MIN_SPLIT_ITEMS} items to split, got {len(items)}")
    n_train, n_val, _ = split_sizes(len(items), ratios)
    rng = np.random.default_rng(seed)

    labels = sorted({item.label for item in items if item.label is not None})
    groups = {label: [it for it in items if it.label == label] for label in labels}
    stratify = (
        dataset.labeled
        and len(labels) > 1
        and all(len(group) >= MIN_STRATUM for group in groups.values())
    )
    if stratify:
        # Interleave the shuffled classes by fractional rank so every prefix
        # keeps the class proportions.
        keyed = []
        for label in labels:
            group = groups[label]
            for rank, n in enumerate(rng.permutation(len(group))):
                keyed.append(((rank + 0.5) / len(group), label, group[int(n)]))
        keyed.sort(key=lambda entry: (entry[0], entry[1]))
        ordered = [entry[2] for entry in keyed]
    else:
        logger.info("Using an unstratified split (some class has fewer than %d items)", MIN_STRATUM)
        ordered = [items[int(n)] for n in rng.permutation(len(items))]

    return (
        ordered[:n_train],
        ordered[n_train : n_train + n_val],
        ordered[n_train + n_val :],
    )


def partitions(dataset: Dataset, ratios: Sequence[float], seed: int) -> Split:
    """Predefined ``split`` assignments when every item has one, else :func:`split_dataset`."""
    if dataset.items and all(item.split for item in dataset.items):
        parts = tuple([it for it in dataset.items if it.split == name] for name in ("train", "val", "test"))
        if not parts[0]:
            raise InputError("Predefined split has no training items")
        logger.info("Using predefined split %d/%d/%d", *(len(p) for p in parts))
        return parts  # type: ignore[return-value]
    return split_dataset(dataset, ratios, seed)


def write_dataset(path: Path, items: Iterable[LabeledResponse]) -> int:
    rows = [{"id": it.response_id, "text": it.text, "label": it.label} for it in items]
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pl.DataFrame(rows, schema={"id": pl.Utf8, "text": pl.Utf8, "label": pl.Int64})
    frame.write_ndjson(path)
    return len(rows)


def write_graded_records(path: Path, graded: Iterable[GradedResponse]) -> int:
    """One JSON object per line, in the given order."""
    lines = [g.model_dump_json() for g in graded]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    return len(lines)


def read_graded_records(path: Path) -> List[GradedResponse]:
    if not path.exists():
        return []
    return [
        GradedResponse.model_validate_json(line)
        for line in path.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
