import csv
import logging
from pathlib import Path
from typing import Dict, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from ..exceptions import DataError
from ..models.domain_models import CategoryPath, DatasetFormat, DuplicatePolicy
from .graph_service import RATING_COLUMNS, BipartiteGraph, build_graph_from_frame

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SEPARATORS = {
    DatasetFormat.MOVIELENS: "::",
    DatasetFormat.CSV: ",",
    DatasetFormat.TSV: "\t",
}


def _has_header(path: Path, separator: str) -> bool:
    with path.open(encoding="utf-8") as handle:
        first = handle.readline().strip()
    fields = first.split(separator)
    if len(fields) < 3:
        return False
    try:
        pd.to_numeric(fields[2].strip())
    except (ValueError, TypeError):
        return True
    return False


def _read_table(path: Path, fmt: DatasetFormat) -> pd.DataFrame:
    separator = SEPARATORS[fmt]
    header_lines = 1 if fmt != DatasetFormat.MOVIELENS and _has_header(path, separator) else 0
    try:
        raw = pd.read_csv(
            path,
            sep=separator,
            engine="python" if fmt == DatasetFormat.MOVIELENS else "c",
            header=None,
            skiprows=header_lines,
            dtype=str,
            skip_blank_lines=False,
            quoting=csv.QUOTE_NONE,
            keep_default_na=False,
            na_values=[""],
        )
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: file is empty") from None
    except pd.errors.ParserError as e:
        raise DataError(f"{path}: malformed input ({e})") from None

    # index + 1 + header is the 1-based line number
    raw.index = raw.index + 1 + header_lines
    raw = raw.dropna(how="all")
    if raw.empty:
        raise DataError(f"{path}: file contains no ratings")
    if raw.shape[1] < 3:
        raise DataError(f"{path}: line {raw.index[0]}: expected at least 3 fields, saw {raw.shape[1]}")
    return raw


def load_ratings(path: PathLike, fmt: DatasetFormat = DatasetFormat.MOVIELENS) -> pd.DataFrame:
    """Read a rating log into a ``user_id, item_id, rating`` frame.

    Supported layouts: ``user::item::rating::timestamp`` (MovieLens, the
    timestamp is ignored), ``user,item,rating`` CSV and tab separated
    ``user<TAB>item<TAB>rating`` dumps, both with an optional header row.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Dataset not found: {path}")

    raw = _read_table(path, fmt)
    frame = raw.iloc[:, :3].copy()
    frame.columns = RATING_COLUMNS
    for column in RATING_COLUMNS:
        frame[column] = frame[column].str.strip()

    missing = frame.isna().any(axis=1)
    if missing.any():
        raise DataError(f"{path}: line {frame.index[missing][0]}: malformed line, missing fields")

    ratings = pd.to_numeric(frame["rating"], errors="coerce")
    bad = ratings.isna() | (ratings < 1) | (ratings > 5) | (ratings != ratings.round())
    if bad.any():
        line = frame.index[bad][0]
        raise DataError(f"{path}: line {line}: rating {frame.loc[line, 'rating']!r} is not an integer in 1..5")

    frame["rating"] = ratings.astype(np.int64)
    frame = frame.reset_index(drop=True)
    logger.info(f"Loaded {len(frame)} ratings from {path} ({fmt.value})")
    return frame


def load_graph(
    path: PathLike,
    fmt: DatasetFormat = DatasetFormat.MOVIELENS,
    duplicate_policy: DuplicatePolicy = DuplicatePolicy.KEEP_LAST
) -> BipartiteGraph:
    return build_graph_from_frame(load_ratings(path, fmt), duplicate_policy)


def write_ratings(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    frame[RATING_COLUMNS].to_csv(
        path, sep="\t", header=False, index=False, encoding="utf-8", lineterminator="\n"
    )
    return path


def export_edge_list(g: BipartiteGraph, path: PathLike) -> Path:
    """Write ``user_id<TAB>item_id<TAB>weight`` lines, UTF-8, LF endings."""
    return write_ratings(g.to_frame(), path)


def import_edge_list(path: PathLike) -> BipartiteGraph:
    return load_graph(path, DatasetFormat.TSV)


def load_ontology(path: PathLike) -> Dict[str, CategoryPath]:
    """Read ``item_id<TAB>Category:Subcategory:...`` lines."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Ontology file not found: {path}")
    try:
        raw = pd.read_csv(
            path, sep="\t", header=None, names=["item_id", "path"], dtype=str,
            quoting=csv.QUOTE_NONE, keep_default_na=False, encoding="utf-8"
        )
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: ontology file is empty") from None
    except pd.errors.ParserError as e:
        raise DataError(f"{path}: malformed ontology ({e})") from None

    ontology: Dict[str, CategoryPath] = {}
    for line, (item_id, text) in enumerate(zip(raw["item_id"], raw["path"]), start=1):
        if not isinstance(item_id, str) or not isinstance(text, str):
            raise DataError(f"{path}: line {line}: expected item_id<TAB>category path")
        try:
            ontology[item_id.strip()] = CategoryPath.parse(text)
        except ValidationError:
            raise DataError(f"{path}: line {line}: empty category path for item {item_id}") from None
    logger.info(f"Loaded category paths for {len(ontology)} items from {path}")
    return ontology
