import csv
import hashlib
import json
import math
import os
from typing import List, Optional, Sequence, Union

import numpy as np

from errors import ChecksumError, CsvParseError, DataError, RaggedRowError
from logger import logger
from mfa import MfaParams
from mixture_density import GmmParams
from structures import TRACE_COLUMNS, Dataset, FitTrace, TraceRow

IRIS_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data", "iris.csv")
IRIS_SHA256 = "cdf459dcf51753a4f3f56e59a9c81d8c2aaf68889c0ce19ab347e46ff542e6f4"

# Enough significant digits to round-trip any 64-bit float
REAL_FORMAT = "{:.17g}"


def _real(v) -> str:
    return REAL_FORMAT.format(float(v))


#==================================================================#
#  Numeric CSV ingestion
#==================================================================#
def load_csv(path: str, has_header: bool = False, delimiter: str = ",", label_column: bool = False) -> Dataset:
    '''
    Read a rectangular numeric CSV. Row and column numbers in errors are
    1-based and count the header line. With `label_column` the last column
    is read as integer class labels.
    '''
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f, delimiter=delimiter))
    except OSError as e:
        raise DataError("Cannot read {}: {}".format(path, e.strerror or e))
    first = 1 if has_header else 0
    body = [(i + 1, r) for i, r in enumerate(rows[first:], start=first) if r and any(c.strip() for c in r)]
    if not body:
        raise CsvParseError("{} contains no data rows".format(path))
    width = len(body[0][1])
    values = []
    for line, row in body:
        if len(row) != width:
            raise RaggedRowError("{}: expected {} fields, found {}".format(path, width, len(row)), row=line, column=min(len(row), width) + 1)
        parsed = []
        for col, cell in enumerate(row, start=1):
            try:
                v = float(cell)
            except ValueError:
                raise CsvParseError("{}: cannot parse {!r} as a number".format(path, cell), row=line, column=col)
            if not math.isfinite(v):
                raise CsvParseError("{}: non-finite value {!r}".format(path, cell), row=line, column=col)
            parsed.append(v)
        values.append(parsed)
    X = np.array(values, dtype=float)
    labels = None
    if label_column:
        if width < 2:
            raise CsvParseError("{}: a label column needs at least one feature column".format(path))
        labels = X[:, -1]
        if np.any(labels != np.round(labels)):
            bad = int(np.argmax(labels != np.round(labels)))
            raise CsvParseError("{}: labels must be integers".format(path), row=body[bad][0], column=width)
        labels = labels.astype(int)
        X = X[:, :-1]
    logger.debug("Loaded {} rows x {} columns from {}".format(X.shape[0], X.shape[1], path))
    return Dataset(X, labels)


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def load_iris(path: str = IRIS_PATH) -> Dataset:
    '''The bundled iris measurements (150 x 4) with class labels 0, 1, 2.'''
    try:
        digest = file_sha256(path)
    except OSError as e:
        raise DataError("Cannot read {}: {}".format(path, e.strerror or e))
    if digest != IRIS_SHA256:
        raise ChecksumError("{} has checksum {} but {} was expected".format(path, digest, IRIS_SHA256))
    return load_csv(path, has_header=True, label_column=True)


#==================================================================#
#  Writers
#==================================================================#
def _open_for_write(path: str):
    try:
        folder = os.path.dirname(os.path.abspath(path))
        os.makedirs(folder, exist_ok=True)
        return open(path, "w", newline="")
    except OSError as e:
        raise DataError("Cannot write {}: {}".format(path, e.strerror or e))


def write_dataset(dataset: Dataset, path: str, labels: bool = False) -> None:
    with _open_for_write(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        for i, row in enumerate(np.asarray(dataset.X, dtype=float)):
            out = [_real(v) for v in row]
            if labels:
                if dataset.labels is None:
                    raise DataError("Dataset has no labels to write")
                out.append(str(int(dataset.labels[i])))
            writer.writerow(out)


def write_labels(labels: Sequence[int], path: str) -> None:
    with _open_for_write(path) as f:
        for label in labels:
            f.write("{}\n".format(int(label)))


def write_params(params: Union[GmmParams, MfaParams], path: str) -> None:
    with _open_for_write(path) as f:
        json.dump(params.to_dict(), f, indent="\t")
        f.write("\n")


def read_params(path: str) -> Union[GmmParams, MfaParams]:
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise DataError("Cannot read {}: {}".format(path, e.strerror or e))
    except json.JSONDecodeError as e:
        raise DataError("{} is not valid JSON: {}".format(path, e))
    if "loadings" in data:
        return MfaParams.from_dict(data)
    return GmmParams.from_dict(data)


class TraceWriter(object):
    '''
    Appends trace rows to a CSV as they arrive, so an interrupted run leaves
    a valid prefix. The header goes out with the first row; with
    `exact_column=None` that row decides whether exact_loglik is a column.
    Instances are callable and serve as a FitTrace sink.
    '''

    def __init__(self, path: str, exact_column: Optional[bool] = None):
        self.path = path
        self.exact_column = exact_column
        self.rows = 0

    @property
    def columns(self) -> List[str]:
        return TRACE_COLUMNS + (["exact_loglik"] if self.exact_column else [])

    def write(self, row: TraceRow) -> None:
        if self.rows == 0:
            if self.exact_column is None:
                self.exact_column = row.exact_loglik is not None
            with _open_for_write(self.path) as f:
                f.write(",".join(self.columns) + "\n")
        out = [str(int(row.iter)), _real(row.loglik), _real(row.grad_norm), _real(row.step), _real(row.elapsed_ms)]
        if self.exact_column:
            out.append(_real(row.exact_loglik) if row.exact_loglik is not None else "")
        try:
            with open(self.path, "a", newline="") as f:
                f.write(",".join(out) + "\n")
        except OSError as e:
            raise DataError("Cannot write {}: {}".format(self.path, e.strerror or e))
        self.rows += 1

    __call__ = write


def write_trace(trace: FitTrace, path: str, format: Optional[str] = None) -> None:
    if len(trace) == 0:
        raise DataError("Refusing to write an empty trace to {}".format(path))
    format = format or ("json" if path.endswith(".json") else "csv")
    if format == "json":
        with _open_for_write(path) as f:
            json.dump([r.as_dict() for r in trace], f, indent="\t")
            f.write("\n")
    elif format == "csv":
        writer = TraceWriter(path, exact_column=trace.has_exact_column)
        for row in trace:
            writer.write(row)
    else:
        raise DataError("Unknown trace format {!r}".format(format))


def read_trace(path: str) -> FitTrace:
    trace = FitTrace()
    try:
        with open(path, newline="") as f:
            if path.endswith(".json"):
                records = json.load(f)
            else:
                records = list(csv.DictReader(f))
    except OSError as e:
        raise DataError("Cannot read {}: {}".format(path, e.strerror or e))
    for line, rec in enumerate(records, start=2):
        try:
            exact = rec.get("exact_loglik")
            trace.append(TraceRow(int(rec["iter"]), float(rec["loglik"]), float(rec["grad_norm"]), float(rec["step"]),
                                  float(rec["elapsed_ms"]), float(exact) if exact not in (None, "") else None))
        except (KeyError, ValueError) as e:
            raise CsvParseError("{}: malformed trace record ({})".format(path, e), row=line, column=1)
    return trace
