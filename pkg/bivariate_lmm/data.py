"""Ingest, stack and design longitudinal two-marker data."""

import logging
import math

import numpy as np
import pandas as pd

from bivariate_lmm.config import (
    DEFAULT_MARKER_NAMES,
    DEFAULT_TIME_ORIGIN,
    GRID_TOLERANCE,
    INTERCEPT_TERM,
)
from bivariate_lmm.errors import (
    DataParseError,
    DuplicateObservationError,
    GridViolationError,
    InvalidArgumentError,
)
from bivariate_lmm.models import (
    LongRecord,
    Marker,
    StackedDataset,
    SubjectDesign,
)

logger = logging.getLogger(__name__)

LONG_COLUMNS = ("subject", "marker", "time", "response")


def piecewise_time(t, tau):
    """
    Split a time into the two pieces of a slope that changes at tau.

    Args:
        t: Time in months (>= 0)
        tau: Change point in months (> 0)

    Returns:
        Tuple (T1, T2) with T1 = min(t, tau) and T2 = max(t - tau, 0)

    Raises:
        InvalidArgumentError: If t is negative or tau is not positive

    Example:
        >>> piecewise_time(12, 4)
        (4.0, 8.0)
    """
    t, tau = float(t), float(tau)
    if not tau > 0:
        raise InvalidArgumentError(f"tau must be positive, got {tau}")
    if not t >= 0:
        raise InvalidArgumentError(f"time must be non-negative, got {t}")
    return min(t, tau), max(t - tau, 0.0)


def term_value(term, t, tau):
    """Value of one named time-transform term at time t."""
    if term == INTERCEPT_TERM:
        return 1.0
    if term == "T":
        return float(t)
    first, second = piecewise_time(t, tau)
    if term == "T1":
        return first
    if term == "T2":
        return second
    raise InvalidArgumentError(f"Unknown design term: {term}")


def occasion_of(time, occasion_spacing, time_origin=DEFAULT_TIME_ORIGIN, subject_id=None):
    """
    Map a measurement time onto the occasion grid.

    Args:
        time: Measurement time
        occasion_spacing: Months between consecutive occasions
        time_origin: Time of occasion 0
        subject_id: Used in the error message only

    Returns:
        Non-negative integer occasion index

    Raises:
        GridViolationError: If the time is off the grid or before the origin
    """
    position = (float(time) - time_origin) / occasion_spacing
    if not math.isfinite(position):
        raise GridViolationError(subject_id, time, occasion_spacing)
    occasion = int(round(position))
    if occasion < 0 or abs(position - occasion) > GRID_TOLERANCE:
        raise GridViolationError(subject_id, time, occasion_spacing)
    return occasion


def make_dataset(records, occasion_spacing, time_origin=DEFAULT_TIME_ORIGIN,
                 marker_names=DEFAULT_MARKER_NAMES):
    """
    Validate records and put them into canonical order.

    Args:
        records: Iterable of LongRecord
        occasion_spacing: Months between consecutive occasions
        time_origin: Time of occasion 0
        marker_names: Display names of the two markers

    Returns:
        StackedDataset sorted by subject, marker, occasion

    Raises:
        InvalidArgumentError: Non-positive spacing, non-finite response or bad occasion
        DuplicateObservationError: Repeated (subject, marker, occasion)
        GridViolationError: Time inconsistent with its occasion
    """
    if not occasion_spacing > 0:
        raise InvalidArgumentError(f"occasion spacing must be positive, got {occasion_spacing}")

    seen = set()
    checked = []
    for record in records:
        if not math.isfinite(record.response):
            raise InvalidArgumentError(
                f"Non-finite response for subject {record.subject_id!r} at time {record.time}"
            )
        if record.occasion < 0 or int(record.occasion) != record.occasion:
            raise InvalidArgumentError(
                f"Occasion must be a non-negative integer, got {record.occasion}"
            )
        expected = time_origin + record.occasion * occasion_spacing
        if abs(record.time - expected) > GRID_TOLERANCE * occasion_spacing:
            raise GridViolationError(record.subject_id, record.time, occasion_spacing)

        key = (record.subject_id, int(record.marker), int(record.occasion))
        if key in seen:
            raise DuplicateObservationError(record.subject_id, Marker(record.marker).name, record.occasion)
        seen.add(key)
        checked.append(record._replace(marker=Marker(record.marker), occasion=int(record.occasion)))

    checked.sort(key=lambda r: (r.subject_id, int(r.marker), r.occasion))
    return StackedDataset(
        records=tuple(checked),
        occasion_spacing=float(occasion_spacing),
        time_origin=float(time_origin),
        marker_names=tuple(marker_names),
    )


def _is_missing(value):
    if value is None:
        return True
    if isinstance(value, str):
        return value.strip() == ""
    try:
        return bool(pd.isna(value))
    except (TypeError, ValueError):
        return False


def _subject_key(value):
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    return str(value).strip()


def stack_wide(rows, occasion_spacing, subject_column="subject", time_column="time",
               marker_columns=DEFAULT_MARKER_NAMES, time_origin=DEFAULT_TIME_ORIGIN,
               marker_names=None):
    """
    Stack wide rows (one column per marker) into one long bivariate dataset.

    The first marker column becomes marker M1, the second M2. Empty cells are
    missing and produce no record.

    Args:
        rows: DataFrame or iterable of mappings with subject, time and marker columns
        occasion_spacing: Months between consecutive occasions
        subject_column: Name of the subject identifier column
        time_column: Name of the time column
        marker_columns: The two marker column names, in M1, M2 order
        time_origin: Time of occasion 0
        marker_names: Display names (default: the marker column names)

    Returns:
        StackedDataset

    Raises:
        DuplicateObservationError: If a (subject, marker, occasion) repeats
        GridViolationError: If a time is off the occasion grid

    Example:
        >>> data = stack_wide([{"CEN_PAT": 1001, "CD4": 166, "RNA": -3.02635, "T": 4}],
        ...                   4.0, "CEN_PAT", "T", ("RNA", "CD4"))
        >>> [(r.marker.name, r.occasion, r.response) for r in data.records]
        [('M1', 1, -3.02635), ('M2', 1, 166.0)]
    """
    if len(marker_columns) != 2:
        raise InvalidArgumentError(f"Exactly two marker columns are required, got {marker_columns}")
    if isinstance(rows, pd.DataFrame):
        rows = rows.to_dict("records")

    records = []
    for row in rows:
        subject_id = _subject_key(row[subject_column])
        time = float(row[time_column])
        occasion = None
        for marker, column in zip(Marker, marker_columns):
            value = row.get(column)
            if _is_missing(value):
                continue
            if occasion is None:
                occasion = occasion_of(time, occasion_spacing, time_origin, subject_id)
            records.append(LongRecord(subject_id, marker, time, occasion, float(value)))

    return make_dataset(
        records,
        occasion_spacing,
        time_origin,
        tuple(marker_names) if marker_names else tuple(marker_columns),
    )


def stack_long(rows, occasion_spacing, columns=LONG_COLUMNS, time_origin=DEFAULT_TIME_ORIGIN,
               marker_names=DEFAULT_MARKER_NAMES):
    """
    Build a dataset from long rows (subject, marker 0/1, time, response).

    Rows with an empty response are skipped.
    """
    if isinstance(rows, pd.DataFrame):
        rows = rows.to_dict("records")
    subject_column, marker_column, time_column, response_column = columns

    records = []
    for row in rows:
        if _is_missing(row.get(response_column)):
            continue
        subject_id = _subject_key(row[subject_column])
        marker = Marker(int(row[marker_column]))
        time = float(row[time_column])
        occasion = occasion_of(time, occasion_spacing, time_origin, subject_id)
        records.append(LongRecord(subject_id, marker, time, occasion, float(row[response_column])))
    return make_dataset(records, occasion_spacing, time_origin, marker_names)


def unstack_wide(dataset, subject_column="subject", time_column="time", marker_columns=None):
    """
    Inverse of ``stack_wide`` up to row order.

    Args:
        dataset: StackedDataset
        subject_column: Output subject column name
        time_column: Output time column name
        marker_columns: Output marker column names (default: dataset marker names)

    Returns:
        DataFrame with one row per (subject, occasion), missing markers as NaN
    """
    marker_columns = tuple(marker_columns or dataset.marker_names)
    table = {}
    for record in dataset.records:
        row = table.setdefault(
            (record.subject_id, record.occasion),
            {subject_column: record.subject_id, time_column: record.time,
             marker_columns[0]: np.nan, marker_columns[1]: np.nan},
        )
        row[marker_columns[int(record.marker)]] = record.response

    ordered = [table[key] for key in sorted(table)]
    return pd.DataFrame(ordered, columns=[subject_column, *marker_columns, time_column])


def to_long_frame(dataset, columns=LONG_COLUMNS):
    """Dataset as a long DataFrame (subject, marker 0/1, time, response)."""
    return pd.DataFrame(
        [(r.subject_id, int(r.marker), r.time, r.response) for r in dataset.records],
        columns=list(columns),
    )


def baseline_difference(dataset):
    """
    Replace each response by its change since the baseline (occasion 0) visit.

    Baseline rows are removed afterwards. A subject with a marker series that
    has no baseline is excluded, with a warning.

    Args:
        dataset: StackedDataset of raw marker values

    Returns:
        StackedDataset of changes from baseline
    """
    records = []
    for subject_id, subject_records in dataset.by_subject().items():
        baselines = {
            record.marker: record.response for record in subject_records if record.occasion == 0
        }
        markers = {record.marker for record in subject_records}
        missing = sorted(m.name for m in markers if m not in baselines)
        if missing:
            logger.warning(
                "Excluding subject %s: no baseline value for %s", subject_id, ", ".join(missing)
            )
            continue
        for record in subject_records:
            if record.occasion == 0:
                continue
            records.append(record._replace(response=record.response - baselines[record.marker]))

    return make_dataset(records, dataset.occasion_spacing, dataset.time_origin, dataset.marker_names)


def build_design(dataset, spec):
    """
    Build the per-subject block design matrices.

    Rows are marker-major then occasion-ascending. Columns are the marker-1
    terms followed by the marker-2 terms, so X = diag(X1, X2). Random effects
    are on every fixed term (Z = X).

    Args:
        dataset: StackedDataset
        spec: DesignSpec

    Returns:
        Tuple of SubjectDesign, one per subject, ordered by subject id
    """
    spec.validate()
    terms = spec.term_names
    p = len(terms)
    designs = []
    for subject_id, subject_records in sorted(dataset.by_subject().items()):
        ordered = sorted(subject_records, key=lambda r: (int(r.marker), r.occasion))
        n = len(ordered)
        X = np.zeros((n, 2 * p))
        for row, record in enumerate(ordered):
            offset = int(record.marker) * p
            for column, term in enumerate(terms):
                X[row, offset + column] = term_value(term, record.time, spec.tau)
        designs.append(SubjectDesign(
            subject_id=subject_id,
            y=np.array([r.response for r in ordered], dtype=float),
            X=X,
            Z=X.copy(),
            marker_of_row=np.array([int(r.marker) for r in ordered], dtype=int),
            occasion_of_row=np.array([r.occasion for r in ordered], dtype=int),
            time_of_row=np.array([r.time for r in ordered], dtype=float),
        ))
    return tuple(designs)


def describe_changes(dataset):
    """
    Per-occasion count, mean and standard deviation of each marker.

    Returns:
        DataFrame with columns marker, time, n, mean, sd (sorted by marker, time)
    """
    if not dataset.records:
        return pd.DataFrame(columns=["marker", "time", "n", "mean", "sd"])
    frame = pd.DataFrame(
        [(dataset.marker_names[int(r.marker)], int(r.marker), r.occasion, r.response)
         for r in dataset.records],
        columns=["marker", "marker_index", "occasion", "response"],
    )
    summary = (
        frame.groupby(["marker_index", "marker", "occasion"])["response"]
        .agg(["count", "mean", "std"])
        .reset_index()
        .sort_values(["marker_index", "occasion"])
    )
    summary["time"] = dataset.time_origin + summary["occasion"] * dataset.occasion_spacing
    summary = summary.rename(columns={"count": "n", "std": "sd"})
    return summary[["marker", "time", "n", "mean", "sd"]].reset_index(drop=True)


def _read_csv(path, dtype):
    try:
        return pd.read_csv(path, dtype=dtype, skipinitialspace=True)
    except pd.errors.EmptyDataError as e:
        raise DataParseError(f"{path} is empty (a header row is required)", line=1) from e
    except pd.errors.ParserError as e:
        raise DataParseError(f"Malformed CSV {path}: {e}") from e


def _require_columns(frame, columns, path):
    missing = [column for column in columns if column not in frame.columns]
    if missing:
        raise DataParseError(f"{path} is missing columns: {', '.join(missing)}", line=1)


def _numeric_column(frame, column, required):
    values = pd.to_numeric(frame[column], errors="coerce")
    present = frame[column].notna() & (frame[column].astype(str).str.strip() != "")
    bad = present & ~np.isfinite(values.to_numpy(dtype=float, na_value=np.nan))
    if required:
        bad |= ~present
    if bad.any():
        index = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataParseError(
            f"invalid value {frame[column].iloc[index]!r} in column {column!r}",
            line=index + 2,
        )
    return values


def read_wide_csv(path, occasion_spacing, subject_column="subject", time_column="time",
                  marker_columns=DEFAULT_MARKER_NAMES, time_origin=DEFAULT_TIME_ORIGIN,
                  marker_names=None):
    """
    Read a wide CSV (subject, one column per marker, time) into a dataset.

    Raises:
        FileNotFoundError: If the file does not exist
        DataParseError: Malformed CSV, missing columns or non-numeric cells (names the line)
    """
    frame = _read_csv(path, dtype={subject_column: str})
    _require_columns(frame, [subject_column, time_column, *marker_columns], path)
    frame[time_column] = _numeric_column(frame, time_column, required=True)
    for column in marker_columns:
        frame[column] = _numeric_column(frame, column, required=False)
    return stack_wide(frame, occasion_spacing, subject_column, time_column, marker_columns,
                      time_origin, marker_names)


def read_long_csv(path, occasion_spacing, columns=LONG_COLUMNS, time_origin=DEFAULT_TIME_ORIGIN,
                  marker_names=DEFAULT_MARKER_NAMES):
    """
    Read a long CSV (subject, marker 0/1, time, response) into a dataset.

    Raises:
        FileNotFoundError: If the file does not exist
        DataParseError: Malformed CSV, missing columns, bad marker codes (names the line)
    """
    subject_column, marker_column, time_column, response_column = columns
    frame = _read_csv(path, dtype={subject_column: str})
    _require_columns(frame, columns, path)
    frame[time_column] = _numeric_column(frame, time_column, required=True)
    frame[marker_column] = _numeric_column(frame, marker_column, required=True)
    frame[response_column] = _numeric_column(frame, response_column, required=False)
    invalid = ~frame[marker_column].isin([0, 1])
    if invalid.any():
        index = int(np.flatnonzero(invalid.to_numpy())[0])
        raise DataParseError(
            f"marker must be 0 or 1, got {frame[marker_column].iloc[index]!r}", line=index + 2
        )
    return stack_long(frame, occasion_spacing, columns, time_origin, marker_names)


def write_long_csv(dataset, path, columns=LONG_COLUMNS):
    """Write a dataset in the long CSV layout."""
    to_long_frame(dataset, columns).to_csv(path, index=False)


def write_wide_csv(dataset, path, subject_column="subject", time_column="time",
                   marker_columns=None):
    """Write a dataset in the wide CSV layout (empty cell = missing)."""
    unstack_wide(dataset, subject_column, time_column, marker_columns).to_csv(path, index=False)
