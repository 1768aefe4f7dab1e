"""Input/output datasets and their CSV representation

A dataset CSV has the header ``t,u1..u_nu,y1..y_ny[,mode][,x1..x_nx]``, one row
per sample, 1-based ``t`` and ``mode`` columns and floats written with 17
significant digits so a write/read round trip is lossless.
"""
import json
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from frictionless import validate

from switchid.files import atomic_path, write_json
from switchid.model import ModeSequence, StructuralError, ValidationError

DESCRIPTOR_FILENAME = "dataset.resource.json"
CSV_ENCODING = "utf8"  # only utf-8 is accepted in frictionless resources
CSV_FIELD_DELIMITER = ","
FLOAT_FORMAT = "%.17g"
DATASET_FORMAT_VERSION = "v1"
METADATA_SUFFIX = ".meta.json"

_COLUMN = re.compile(r"^(?P<kind>[uyx])(?P<index>[1-9][0-9]*)$")


class DatasetFormatError(ValidationError):
    """Raised when a dataset file is malformed"""

    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Aligned input/output samples

    Parameters
    ----------
    u : numpy.ndarray
        T x n_u inputs.
    y : numpy.ndarray
        T x n_y outputs. May hold NaN when the outputs are unknown, which only
        prediction accepts.
    true_modes : numpy.ndarray, optional
        Length-T ground-truth modes, 0-based.
    true_states : numpy.ndarray, optional
        T x n_x ground-truth states; row ``t`` is the state emitting ``y[t]``.
    sample_period : float, optional
        Seconds between samples, metadata only.
    """

    u: np.ndarray
    y: np.ndarray
    true_modes: Optional[np.ndarray] = None
    true_states: Optional[np.ndarray] = None
    sample_period: Optional[float] = None

    def __post_init__(self):
        u = np.array(self.u, dtype=float)
        y = np.array(self.y, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        if y.ndim == 1:
            y = y[:, None]
        if u.ndim != 2 or y.ndim != 2:
            raise StructuralError("u and y must be T x n arrays.")
        if u.shape[0] != y.shape[0] or u.shape[0] < 1:
            raise StructuralError(
                f"u and y must share a length T >= 1, got {u.shape[0]} and {y.shape[0]}."
            )
        if not np.all(np.isfinite(u)):
            raise ValidationError("Inputs contain non-finite values.")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)
        if self.true_modes is not None:
            modes = np.array(self.true_modes, dtype=int).ravel()
            if modes.shape[0] != u.shape[0]:
                raise StructuralError("true_modes must have length T.")
            if modes.size and modes.min() < 0:
                raise ValidationError("Mode labels must be positive.")
            object.__setattr__(self, "true_modes", modes)
        if self.true_states is not None:
            states = np.array(self.true_states, dtype=float)
            if states.ndim == 1:
                states = states[:, None]
            if states.shape[0] != u.shape[0]:
                raise StructuralError("true_states must have length T.")
            object.__setattr__(self, "true_states", states)
        for array in (self.u, self.y, self.true_modes, self.true_states):
            if array is not None:
                array.setflags(write=False)

    def __len__(self):
        return self.u.shape[0]

    @property
    def n_u(self) -> int:
        return self.u.shape[1]

    @property
    def n_y(self) -> int:
        return self.y.shape[1]

    @property
    def has_outputs(self) -> bool:
        return bool(np.all(np.isfinite(self.y)))

    def true_mode_sequence(self, K: Optional[int] = None) -> Optional[ModeSequence]:
        if self.true_modes is None:
            return None
        K = K if K is not None else int(self.true_modes.max()) + 1
        return ModeSequence(self.true_modes, max(K, int(self.true_modes.max()) + 1))

    def check_model(self, model) -> None:
        """Raise StructuralError when the dataset does not fit the model dimensions"""
        if (self.n_u, self.n_y) != (model.n_u, model.n_y):
            raise StructuralError(
                f"Dataset has n_u={self.n_u}, n_y={self.n_y}; "
                f"model expects n_u={model.n_u}, n_y={model.n_y}."
            )


def dataset_to_frame(dataset: Dataset) -> pd.DataFrame:
    """Dataset as a DataFrame with the CSV column layout"""
    columns = {"t": np.arange(1, len(dataset) + 1)}
    for i in range(dataset.n_u):
        columns[f"u{i + 1}"] = dataset.u[:, i]
    for i in range(dataset.n_y):
        columns[f"y{i + 1}"] = dataset.y[:, i]
    if dataset.true_modes is not None:
        columns["mode"] = dataset.true_modes + 1
    if dataset.true_states is not None:
        for i in range(dataset.true_states.shape[1]):
            columns[f"x{i + 1}"] = dataset.true_states[:, i]
    return pd.DataFrame(columns)


def frame_to_csv(df: pd.DataFrame, file_path) -> None:
    """Write a DataFrame as CSV, atomically, creating parent directories"""
    with atomic_path(file_path) as tmp_path:
        df.to_csv(
            tmp_path,
            sep=CSV_FIELD_DELIMITER,
            encoding=CSV_ENCODING,
            index=False,
            float_format=FLOAT_FORMAT,
            lineterminator="\n",
        )


def dataset_to_csv(dataset: Dataset, file_path, metadata: Optional[dict] = None) -> None:
    """Write a dataset CSV and, when ``metadata`` is given, its sidecar record

    Parameters
    ----------
    dataset : Dataset
    file_path : Path | str
        Destination CSV file.
    metadata : dict, optional
        Written to ``<stem>.meta.json`` next to the CSV together with the
        dataset format version.
    """
    file_path = Path(file_path)
    frame_to_csv(dataset_to_frame(dataset), file_path)
    if metadata is not None:
        write_json(
            metadata_path(file_path),
            {"format_version": DATASET_FORMAT_VERSION, **metadata},
        )


def metadata_path(file_path) -> Path:
    file_path = Path(file_path)
    return file_path.with_name(file_path.stem + METADATA_SUFFIX)


def _parse_float(value) -> Optional[float]:
    # float() is correctly rounded, so 17-digit values read back bit-exact
    try:
        number = float(value)
    except (TypeError, ValueError):
        return None
    return number if np.isfinite(number) else None


def _numeric_column(df: pd.DataFrame, name: str, file_path, allow_empty=False):
    values = np.empty(len(df))
    for row, raw in enumerate(df[name]):
        if allow_empty and raw == "":
            values[row] = np.nan
            continue
        number = _parse_float(raw)
        if number is None:
            # line 1 is the header
            raise DatasetFormatError(
                f"{file_path}: row {row + 2}, column '{name}': invalid value {raw!r}."
            )
        values[row] = number
    return values


def _indexed_columns(columns, kind, file_path):
    indices = sorted(
        int(match.group("index"))
        for match in (_COLUMN.match(name) for name in columns)
        if match and match.group("kind") == kind
    )
    if indices != list(range(1, len(indices) + 1)):
        raise DatasetFormatError(
            f"{file_path}: columns {kind}1..{kind}{len(indices)} must be contiguous."
        )
    return [f"{kind}{i}" for i in indices]


def read_dataset(
    file_path, require_outputs: bool = True, n_y: Optional[int] = None
) -> Dataset:
    """Read a dataset CSV

    Parameters
    ----------
    file_path : Path | str
    require_outputs : bool
        When False, missing ``y`` columns or empty ``y`` cells are accepted and
        read as NaN; ``n_y`` then gives the output width for absent columns.

    Returns
    -------
    Dataset

    Raises
    ------
    FileNotFoundError
        When the file does not exist.
    DatasetFormatError
        On a malformed header or row, naming the row number.
    """
    file_path = Path(file_path)
    if not file_path.is_file():
        raise FileNotFoundError(f"Dataset file {file_path} does not exist.")
    try:
        df = pd.read_csv(
            file_path,
            sep=CSV_FIELD_DELIMITER,
            encoding=CSV_ENCODING,
            dtype=str,
            keep_default_na=False,
        )
    except pd.errors.ParserError as exc:
        raise DatasetFormatError(f"{file_path}: {exc}")
    except pd.errors.EmptyDataError:
        raise DatasetFormatError(f"{file_path}: file is empty.")
    if df.empty:
        raise DatasetFormatError(f"{file_path}: no data rows.")

    known = {"t", "mode"}
    unknown = [c for c in df.columns if c not in known and not _COLUMN.match(c)]
    if unknown:
        raise DatasetFormatError(f"{file_path}: unknown column(s) {unknown}.")
    if "t" not in df.columns:
        raise DatasetFormatError(f"{file_path}: missing column 't'.")
    u_cols = _indexed_columns(df.columns, "u", file_path)
    y_cols = _indexed_columns(df.columns, "y", file_path)
    x_cols = _indexed_columns(df.columns, "x", file_path)
    if not u_cols:
        raise DatasetFormatError(f"{file_path}: missing input columns u1...")
    if not y_cols and require_outputs:
        raise DatasetFormatError(f"{file_path}: missing output columns y1...")

    t = _numeric_column(df, "t", file_path)
    if np.any(t != np.round(t)) or np.any(t < 1):
        row = int(np.flatnonzero((t != np.round(t)) | (t < 1))[0])
        raise DatasetFormatError(f"{file_path}: row {row + 2}, column 't' must be >= 1.")
    u = np.column_stack([_numeric_column(df, c, file_path) for c in u_cols])
    if y_cols:
        y = np.column_stack(
            [
                _numeric_column(df, c, file_path, allow_empty=not require_outputs)
                for c in y_cols
            ]
        )
    else:
        y = np.full((len(df), n_y or 1), np.nan)
    modes = None
    if "mode" in df.columns:
        labels = _numeric_column(df, "mode", file_path)
        invalid = (labels != np.round(labels)) | (labels < 1)
        if invalid.any():
            row = int(np.flatnonzero(invalid)[0])
            raise DatasetFormatError(
                f"{file_path}: row {row + 2}, column 'mode' must be a label >= 1."
            )
        modes = labels.astype(int) - 1
    states = None
    if x_cols:
        states = np.column_stack([_numeric_column(df, c, file_path) for c in x_cols])
    return Dataset(u, y, modes, states, _read_sample_period(file_path))


def _read_sample_period(file_path: Path) -> Optional[float]:
    meta = metadata_path(file_path)
    if not meta.is_file():
        return None
    try:
        period = json.loads(meta.read_text(encoding=CSV_ENCODING)).get("sample_period")
    except (json.JSONDecodeError, AttributeError):
        return None
    return float(period) if period is not None else None


def table_schema(dataset: Dataset) -> dict:
    """Frictionless Table Schema describing the CSV layout of ``dataset``"""
    label = {"type": "integer", "constraints": {"required": True, "minimum": 1}}
    fields = [{"name": "t", **label}]
    for name in dataset_to_frame(dataset).columns[1:]:
        if name == "mode":
            fields.append({"name": "mode", **label})
        else:
            fields.append({"name": name, "type": "number", "constraints": {"required": True}})
    return {"fields": fields}


def validate_dataset(dataset: Dataset):
    """Validate a dataset CSV rendering against its frictionless Table Schema

    Returns
    -------
    frictionless.Report
        ``report.valid`` is True for a well-formed dataset.
    """
    with tempfile.TemporaryDirectory() as tmp_dir:
        csv_path = Path(tmp_dir) / "dataset.csv"
        dataset_to_csv(dataset, csv_path)
        _write_resource_descriptor(csv_path, table_schema(dataset))
        return validate(Path(tmp_dir) / DESCRIPTOR_FILENAME)


def _write_resource_descriptor(csv_path: Path, schema: dict) -> None:
    content = {
        "name": "dataset",
        "path": csv_path.name,
        "format": "csv",
        "mediatype": "text/csv",
        "encoding": CSV_ENCODING,
        "dialect": {"delimiter": CSV_FIELD_DELIMITER},
        "schema": schema,
    }
    with open(csv_path.parent / DESCRIPTOR_FILENAME, "w") as outfile:
        json.dump(content, outfile, indent=4, sort_keys=True)
