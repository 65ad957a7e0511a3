"""File ingestion and result serialization.

Matrices come in as TSV with a mandatory header row. Results go out as CSV
and JSON with floats in scientific notation: 17 significant digits in JSON,
15 in CSV, enough to round-trip IEEE doubles. Every write is atomic (temp
file in the target directory, then rename).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import tempfile
from io import StringIO

import numpy as np

from .deconv import BulkMatrix, ProportionEstimate, SignatureMatrix
from .errors import ParseError

JSON_FMT = ".16e"        # 17 significant digits
CSV_FMT = ".14e"         # 15 significant digits

PVALUE_HEADER = ["draw_index", "unit_id", "cell_type", "p_value"]
CALLS_HEADER = ["unit_id", "cell_type", "hit_count", "cutoff", "called"]


def fmt_csv(x) -> str:
    return format(float(x), CSV_FMT)


def _emit_json(obj) -> str:
    """Serialize with controlled float formatting (non-finite -> null)."""
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return format(x, JSON_FMT) if math.isfinite(x) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _emit_json(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_emit_json(v) for v in obj) + "]"
    if isinstance(obj, dict):
        parts = []
        for k, v in obj.items():
            parts.append(json.dumps(str(k)) + ": " + _emit_json(v))
        return "{" + ", ".join(parts) + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def atomic_write_text(path: str, text: str) -> None:
    path = os.path.abspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path),
                               prefix="." + os.path.basename(path) + ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: str, obj) -> None:
    atomic_write_text(path, _emit_json(obj) + "\n")


def _write_csv_rows(path: str, rows) -> None:
    buf = StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def _read_table(path: str, delimiter: str):
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            return list(csv.reader(fh, delimiter=delimiter))
    except OSError as err:
        raise ParseError(f"{path}: {err.strerror or err}") from None


def _parse_matrix_tsv(path: str, min_cols: int):
    rows = _read_table(path, "\t")
    if not rows or not rows[0]:
        raise ParseError(f"{path}: line 1: missing header row")
    header = rows[0]
    names = header[1:]
    if len(names) < min_cols:
        raise ParseError(
            f"{path}: line 1: need an id column plus at least {min_cols} "
            f"value columns, found {len(names)}")
    if any(not c.strip() for c in header):
        raise ParseError(f"{path}: line 1: empty header field")
    ids, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}: line {lineno}: expected "
                             f"{len(header)} fields, found {len(row)}")
        ids.append(row[0])
        parsed = []
        for colno, cell in enumerate(row[1:], start=2):
            try:
                parsed.append(float(cell))
            except ValueError:
                raise ParseError(f"{path}: line {lineno}, column {colno}: "
                                 f"not a number: {cell!r}") from None
        values.append(parsed)
    if not ids:
        raise ParseError(f"{path}: no data rows")
    return ids, names, np.array(values, dtype=float)


def read_signature_tsv(path: str) -> SignatureMatrix:
    """TSV: id column, then one column per cell type; rows are genes."""
    ids, names, values = _parse_matrix_tsv(path, min_cols=2)
    return SignatureMatrix(values, ids, names)


def read_bulk_tsv(path: str) -> BulkMatrix:
    """TSV: id column, then one column per sample; rows are genes."""
    ids, names, values = _parse_matrix_tsv(path, min_cols=1)
    return BulkMatrix(values, ids, names)


def write_proportions_csv(path: str, sample_ids, cell_types, P) -> None:
    P = np.asarray(P, dtype=float)
    rows = [["sample_id"] + list(cell_types)]
    for sid, row in zip(sample_ids, P):
        rows.append([str(sid)] + [fmt_csv(v) for v in row])
    _write_csv_rows(path, rows)


def read_proportions_csv(path: str):
    rows = _read_table(path, ",")
    if not rows or rows[0][:1] != ["sample_id"]:
        raise ParseError(f"{path}: line 1: expected header starting 'sample_id'")
    cell_types = rows[0][1:]
    ids, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(rows[0]):
            raise ParseError(f"{path}: line {lineno}: expected "
                             f"{len(rows[0])} fields, found {len(row)}")
        ids.append(row[0])
        try:
            values.append([float(c) for c in row[1:]])
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: non-numeric value")
    return ids, cell_types, np.array(values, dtype=float)


def write_covariances_json(path: str, sample_ids, cell_types, covs) -> None:
    """Per-sample K x K sampling covariances, aligned with sample_ids."""
    write_json(path, {
        "cell_types": list(cell_types),
        "sample_ids": [str(s) for s in sample_ids],
        "covariances": [np.asarray(C, dtype=float) for C in covs],
    })


def read_covariances_json(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as err:
        raise ParseError(f"{path}: {err.strerror or err}") from None
    except json.JSONDecodeError as err:
        raise ParseError(f"{path}: line {err.lineno}, column {err.colno}: "
                         f"{err.msg}") from None
    try:
        ids = [str(s) for s in obj["sample_ids"]]
        cell_types = list(obj["cell_types"])
        covs = np.array(obj["covariances"], dtype=float)
    except (KeyError, TypeError, ValueError) as err:
        raise ParseError(f"{path}: malformed covariance file: {err}") from None
    if covs.shape != (len(ids), len(cell_types), len(cell_types)):
        raise ParseError(f"{path}: covariance array shape {covs.shape} does "
                         f"not match {len(ids)} samples x "
                         f"{len(cell_types)} cell types")
    return ids, cell_types, covs


def load_estimates(result_dir: str):
    """Rebuild per-sample estimates from a deconvolution output directory."""
    pp = os.path.join(result_dir, "proportions.csv")
    cp = os.path.join(result_dir, "covariances.json")
    ids, cell_types, P = read_proportions_csv(pp)
    cids, ctypes2, covs = read_covariances_json(cp)
    if ids != cids or list(cell_types) != list(ctypes2):
        raise ParseError(f"{pp} and {cp} disagree on samples or cell types")
    ests = [ProportionEstimate(P[i], covs[i], sample_id=ids[i])
            for i in range(len(ids))]
    return ests, cell_types


def write_intervals_csv(path: str, sample_ids, cell_types, est, lo, hi) -> None:
    rows = [["sample_id", "cell_type", "estimate", "lower", "upper"]]
    for i, sid in enumerate(sample_ids):
        for k, ct in enumerate(cell_types):
            rows.append([str(sid), str(ct), fmt_csv(est[i][k]),
                         fmt_csv(lo[i][k]), fmt_csv(hi[i][k])])
    _write_csv_rows(path, rows)


def write_coverage_csv(path: str, report) -> None:
    """Tidy per-replicate coverage: method, cell_type, replicate, coverage,
    mean_width."""
    rows = [["method", "cell_type", "replicate", "coverage", "mean_width"]]
    reps = [r for _, r in report.replicate_seeds]
    for row, rep in enumerate(reps):
        for k in range(len(report.coverage)):
            c = report.per_replicate[row, k]
            w = report.per_replicate_width[row, k]
            if np.isnan(c):
                continue
            rows.append([report.method, str(k), str(rep),
                         fmt_csv(c), fmt_csv(w)])
    _write_csv_rows(path, rows)


def write_draws(out_dir: str, draw_set) -> str:
    """One CSV per draw plus manifest.json with sha256 checksums.

    Returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    M = draw_set.draws.shape[0]
    width = max(4, len(str(M - 1)))
    header = ["sample_id"] + [str(c) for c in draw_set.cell_types]
    files = []
    for m in range(M):
        name = f"draw_{m:0{width}d}.csv"
        rows = [header]
        for i, sid in enumerate(draw_set.sample_ids):
            rows.append([str(sid)] + [fmt_csv(v)
                                      for v in draw_set.draws[m, i]])
        fpath = os.path.join(out_dir, name)
        _write_csv_rows(fpath, rows)
        with open(fpath, "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        files.append({"name": name, "sha256": digest})
    manifest = {
        "M": M,
        "seed": draw_set.seed,
        "sample_ids": [str(s) for s in draw_set.sample_ids],
        "cell_types": [str(c) for c in draw_set.cell_types],
        "files": files,
    }
    mpath = os.path.join(out_dir, "manifest.json")
    write_json(mpath, manifest)
    return mpath


def read_pvalues_csv(path: str):
    """CSV with columns draw_index, unit_id, cell_type, p_value.

    Returns {(unit_id, cell_type): p-value array ordered by draw_index}.
    An empty file yields an empty mapping."""
    rows = _read_table(path, ",")
    if not rows:
        return {}
    if rows[0] != PVALUE_HEADER:
        raise ParseError(f"{path}: line 1: expected header "
                         f"{','.join(PVALUE_HEADER)}")
    acc = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise ParseError(f"{path}: line {lineno}: expected 4 fields, "
                             f"found {len(row)}")
        try:
            idx = int(row[0])
            pv = float(row[3])
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: malformed row "
                             f"{row!r}") from None
        if not (0.0 <= pv <= 1.0):
            raise ParseError(f"{path}: line {lineno}: p-value {pv} "
                             f"outside [0, 1]")
        acc.setdefault((row[1], row[2]), []).append((idx, pv))
    out = {}
    for key, pairs in acc.items():
        pairs.sort()
        out[key] = np.array([pv for _, pv in pairs])
    return out


def write_calls_csv(path: str, decisions) -> None:
    rows = [CALLS_HEADER]
    for d in decisions:
        rows.append([d.unit_id, d.cell_type, str(d.hits), str(d.cutoff),
                     "true" if d.called else "false"])
    _write_csv_rows(path, rows)
