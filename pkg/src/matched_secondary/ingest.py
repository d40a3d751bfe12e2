"""CSV ingestion into :class:`StratifiedDataset` and dataset round-tripping."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .config import AnalysisConfig, DeriveRule
from .data import StratifiedDataset
from .exceptions import InvalidInputError

NA_VALUES = ["", "NA"]
DATASET_COLUMNS = ("d", "z", "y")


@dataclass
class IngestionReport:
    rows_read: int
    rows_dropped: int
    strata: list = field(default_factory=list)

    def to_dict(self):
        return {"rows_read": self.rows_read, "rows_dropped": self.rows_dropped, "strata": self.strata}


def read_csv(path):
    try:
        return pd.read_csv(
            path, sep=",", encoding="utf-8", na_values=NA_VALUES, keep_default_na=False, float_precision="round_trip"
        )
    except FileNotFoundError:
        raise InvalidInputError(f"input file not found: {path}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise InvalidInputError(f"cannot parse {path}: {exc}") from None


def apply_rule(frame, rule: DeriveRule):
    """Evaluate one threshold rule; returns a float column of 0/1 with NaN where the source is missing."""
    if rule.column not in frame.columns:
        raise InvalidInputError(f"derive rule {rule.name!r} references unknown column {rule.column!r}")
    src = frame[rule.column]
    missing = src.isna()
    if rule.op == "in":
        hit = src.isin(list(rule.value))
    elif rule.op in ("==", "!="):
        hit = src == rule.value
        if rule.op == "!=":
            hit = ~hit
    else:
        num = pd.to_numeric(src, errors="coerce")
        bad = num.isna() & ~missing
        if bad.any():
            raise InvalidInputError(f"column {rule.column!r} has non-numeric values for rule {rule.name!r}")
        hit = {">": num > rule.value, ">=": num >= rule.value, "<": num < rule.value, "<=": num <= rule.value}[rule.op]
    out = hit.astype(float)
    out[missing] = np.nan
    return out


def _sort_key(v):
    # numbers before strings, each in natural order
    return (0, float(v), "") if isinstance(v, (int, float, np.integer, np.floating)) else (1, 0.0, str(v))


def cross_classify(frame, factors):
    """Stratum index 1..K over the level combinations of ``factors``, in lexicographic order.

    Returns
    -------
    z : ndarray of int
    codes : ndarray, shape (n, len(factors))
        Per-factor level codes (0-based, in sorted level order).
    labels : tuple of str
        ``"f1=a|f2=b"`` for each stratum.
    """
    level_lists = [sorted(pd.unique(frame[f]), key=_sort_key) for f in factors]
    codes = np.column_stack(
        [frame[f].map({lv: i for i, lv in enumerate(levels)}).to_numpy() for f, levels in zip(factors, level_lists)]
    ).astype(np.int64)
    combos = sorted(set(map(tuple, codes.tolist())))
    index = {c: k + 1 for k, c in enumerate(combos)}
    z = np.array([index[tuple(row)] for row in codes.tolist()], dtype=np.int64)
    labels = tuple(
        "|".join(f"{f}={level_lists[j][c[j]]}" for j, f in enumerate(factors)) for c in combos
    )
    return z, codes, labels


def ingest_csv(path, config: AnalysisConfig):
    """Read a CSV file and build the dataset described by ``config``.

    Rows with a missing value in any mapped column are dropped and counted.

    Returns
    -------
    StratifiedDataset, IngestionReport

    Raises
    ------
    InvalidInputError
        On unknown columns, non-binary disease/outcome columns, non-numeric
        covariates, or strata without cases or controls.
    """
    frame = read_csv(path)
    rows_read = len(frame)
    for rule in config.derive:
        frame[rule.name] = apply_rule(frame, rule)
    mapped = [config.disease, config.outcome, *config.covariates, *config.matching]
    unknown = [c for c in mapped if c not in frame.columns]
    if unknown:
        raise InvalidInputError(f"unknown column(s): {', '.join(unknown)}")
    kept = frame.dropna(subset=list(dict.fromkeys(mapped))).reset_index(drop=True)
    dropped = rows_read - len(kept)
    if kept.empty:
        raise InvalidInputError("no rows left after dropping missing values")

    def binary(col):
        v = pd.to_numeric(kept[col], errors="coerce")
        if v.isna().any() or not v.isin([0, 1]).all():
            raise InvalidInputError(f"column {col!r} must be coded 0/1 (derive it with a rule if needed)")
        return v.to_numpy().astype(np.int8)

    d = binary(config.disease)
    y = binary(config.outcome)
    try:
        x = kept[list(config.covariates)].apply(pd.to_numeric, errors="raise").to_numpy(dtype=float)
    except (ValueError, TypeError):
        raise InvalidInputError("covariate columns must be numeric") from None
    z, codes, labels = cross_classify(kept, list(config.matching))
    K = len(labels)
    n1 = np.bincount(z, weights=d, minlength=K + 1)[1:]
    nk = np.bincount(z, minlength=K + 1)[1:]
    bad = [f"{k + 1} ({labels[k]})" for k in range(K) if n1[k] == 0 or n1[k] == nk[k]]
    if bad:
        raise InvalidInputError(f"strata without cases or without controls: {', '.join(bad)}")
    data = StratifiedDataset(d=d, z=z, y=y, x=x, factors=codes, stratum_labels=labels)
    strata = [
        {"stratum": k + 1, "label": labels[k], "n": int(nk[k]), "cases": int(n1[k]), "controls": int(nk[k] - n1[k])}
        for k in range(K)
    ]
    return data, IngestionReport(rows_read, dropped, strata)


def write_dataset(data: StratifiedDataset, fh):
    """Write stored rows as ``d,z,y,x1..xq[,f1..fm]`` with shortest round-trip float text."""
    writer = csv.writer(fh, lineterminator="\n")
    fcols = [] if data.factors is None else [f"f{j + 1}" for j in range(data.factors.shape[1])]
    writer.writerow([*DATASET_COLUMNS, *[f"x{j + 1}" for j in range(data.q)], *fcols])
    for i in range(data.n):
        row = [int(data.d[i]), int(data.z[i]), int(data.y[i]), *[repr(float(v)) for v in data.x[i]]]
        if fcols:
            row += [int(v) for v in data.factors[i]]
        writer.writerow(row)


def read_dataset(path):
    """Inverse of :func:`write_dataset`."""
    frame = read_csv(path)
    missing = [c for c in DATASET_COLUMNS if c not in frame.columns]
    if missing:
        raise InvalidInputError(f"dataset file lacks column(s): {', '.join(missing)}")
    xcols = sorted((c for c in frame.columns if c.startswith("x") and c[1:].isdigit()), key=lambda c: int(c[1:]))
    fcols = sorted((c for c in frame.columns if c.startswith("f") and c[1:].isdigit()), key=lambda c: int(c[1:]))
    if not xcols:
        raise InvalidInputError("dataset file has no covariate columns x1..xq")
    if frame[[*DATASET_COLUMNS, *xcols]].isna().any().any():
        raise InvalidInputError("dataset file has missing values")
    return StratifiedDataset(
        d=frame["d"].to_numpy(),
        z=frame["z"].to_numpy(),
        y=frame["y"].to_numpy(),
        x=frame[xcols].to_numpy(dtype=float),
        factors=frame[fcols].to_numpy() if fcols else None,
    )
