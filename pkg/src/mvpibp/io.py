"""Data ingestion, run configuration and posterior archives.

File formats
------------
occurrence CSV
    header ``<label>,<feature id>,...``; one row per sample, first cell the
    sample id, remaining cells 0 or 1.
covariates CSV
    header ``<label>,<covariate>,...``; first cell a sample id matching the
    occurrence file, remaining cells numeric.
config file
    flat ``key = value`` lines; ``#`` starts a comment.
draw table
    ``parameter:str,index:int,iteration:int,value:float`` header, then one
    line per scalar draw.  Floats are written with ``repr`` so tables are
    reproducible byte for byte.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from .model import FeatureMatrix

__all__ = ["ValidationError", "RunConfig", "load_config", "load_occurrence_csv",
           "save_occurrence_csv", "load_covariates_csv", "PosteriorArchive",
           "write_draw_table", "read_draw_table", "file_digest"]

DRAW_HEADER = ["parameter:str", "index:int", "iteration:int", "value:float"]
METHODS = ("ibp", "factor", "twostage-hier", "twostage-common", "twostage-cov", "flat-ablation")


class ValidationError(ValueError):
    """Bad user input: malformed files, inconsistent dimensions, bad settings."""


# -- configuration ------------------------------------------------------------------

@dataclass
class RunConfig:
    method: str = "factor"
    iterations: int = 2500
    burn_in: int = 500
    thin: int = 1
    seed: int = 0
    P: int = 300
    alpha: float | None = None  # initial alpha; None picks a moment estimate
    a_alpha: float | None = None  # None centres the gamma prior on mean(n_i)
    b_alpha: float = 1.0
    a_omega: float = 1.0
    b_omega: float = 1.0
    w0: float = 1.0
    k_max: int = 10
    data: str | None = None
    covariates: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.burn_in < 0 or self.iterations <= self.burn_in:
            raise ValidationError(f"need iterations > burn_in >= 0 (got {self.iterations}, {self.burn_in})")
        if self.thin < 1:
            raise ValidationError("thin must be >= 1")
        if self.P < 2:
            raise ValidationError("truncation P must be >= 2")

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        """Build from strings or values, coercing to the field types."""
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in values.items():
            if v is None:
                continue
            kind = str(known[k].type)
            try:
                if "int" in kind:
                    kw[k] = int(v)
                elif "float" in kind:
                    kw[k] = float(v)
                else:
                    kw[k] = str(v)
            except ValueError:
                raise ValidationError(f"config key {k!r}: cannot parse {v!r}") from None
        return cls(**kw)

    def hash(self, data_digest: str = "", covariates_digest: str = "") -> str:
        """Digest of every setting that influences the draws.

        File contents, not their paths, enter the hash.
        """
        d = asdict(self)
        d["data"] = data_digest
        d["covariates"] = covariates_digest
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path: str) -> dict:
    """Parse a flat ``key = value`` file into a dict of strings."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}: line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if not key:
                raise ValidationError(f"{path}: line {lineno}: empty key")
            out[key.replace("-", "_")] = val
    return out


def file_digest(path: str | None) -> str:
    if path is None:
        return ""
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# -- occurrence and covariate files -------------------------------------------------------

def _read_rows(path: str):
    if not os.path.exists(path):
        raise ValidationError(f"file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty file")
    return rows[0], rows[1:]


def _check_unique(ids, what: str, path: str):
    seen = set()
    for k, i in enumerate(ids):
        if i in seen:
            raise ValidationError(f"{path}: duplicate {what} {i!r} (position {k + 1})")
        seen.add(i)


def load_occurrence_csv(path: str) -> FeatureMatrix:
    """Read a binary samples x features table.

    Errors name the offending line and column (both 1-based, header = line 1).
    All-zero columns are kept.
    """
    header, body = _read_rows(path)
    features = [h.strip() for h in header[1:]]
    if not features:
        raise ValidationError(f"{path}: header has no feature columns")
    _check_unique(features, "feature id", path)
    width = len(header)
    y = np.zeros((len(body), len(features)), dtype=np.uint8)
    samples = []
    for r, row in enumerate(body):
        line = r + 2
        if len(row) != width:
            raise ValidationError(f"{path}: line {line}: expected {width} cells, found {len(row)}")
        samples.append(row[0].strip())
        for c, cell in enumerate(row[1:]):
            cell = cell.strip()
            if cell not in ("0", "1"):
                raise ValidationError(
                    f"{path}: non-binary cell {cell!r} at (row {r + 1}, col {c + 1}) "
                    f"[line {line}, feature {features[c]!r}]")
            y[r, c] = cell == "1"
    if not samples:
        raise ValidationError(f"{path}: no sample rows")
    _check_unique(samples, "sample id", path)
    return FeatureMatrix(y, samples, features)


def save_occurrence_csv(Y: FeatureMatrix, path: str, label: str = "sample") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([label, *Y.feature_ids])
        for sid, row in zip(Y.sample_ids, Y.entries):
            w.writerow([sid, *row.tolist()])


def load_covariates_csv(path: str, sample_ids=None) -> tuple[np.ndarray, list]:
    """Read a numeric covariate table and align it to ``sample_ids``.

    Returns ``(X, covariate names)`` with rows in ``sample_ids`` order.
    """
    header, body = _read_rows(path)
    names = [h.strip() for h in header[1:]]
    if not names:
        raise ValidationError(f"{path}: header has no covariate columns")
    width = len(header)
    X = np.empty((len(body), len(names)))
    ids = []
    for r, row in enumerate(body):
        if len(row) != width:
            raise ValidationError(f"{path}: line {r + 2}: expected {width} cells, found {len(row)}")
        ids.append(row[0].strip())
        for c, cell in enumerate(row[1:]):
            try:
                X[r, c] = float(cell)
            except ValueError:
                raise ValidationError(f"{path}: non-numeric cell {cell!r} at (row {r + 1}, col {c + 1})") from None
            if not np.isfinite(X[r, c]):
                raise ValidationError(f"{path}: non-finite cell at (row {r + 1}, col {c + 1})")
    _check_unique(ids, "sample id", path)
    if sample_ids is None:
        return X, names
    sample_ids = list(sample_ids)
    if len(ids) != len(sample_ids):
        raise ValidationError(
            f"{path}: {len(ids)} covariate rows but the occurrence data has {len(sample_ids)} samples")
    pos = {s: k for k, s in enumerate(ids)}
    order = []
    for k, s in enumerate(sample_ids):
        if s not in pos:
            raise ValidationError(f"{path}: sample {s!r} (occurrence row {k + 1}) has no covariate row")
        order.append(pos[s])
    return X[order], names


# -- draw tables and archives ---------------------------------------------------------

def write_draw_table(path: str, tables: dict) -> None:
    """``tables`` maps a parameter name to a (draws x ...) array; trailing axes
    are flattened into the index column in C order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DRAW_HEADER)
        for name in tables:
            arr = np.asarray(tables[name], dtype=float)
            arr = arr.reshape(arr.shape[0], -1)
            for it in range(arr.shape[0]):
                w.writerows([name, j, it, repr(float(v))] for j, v in enumerate(arr[it]))


def read_draw_table(path: str) -> dict:
    """Inverse of :func:`write_draw_table`: parameter -> (draws x index) array."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != DRAW_HEADER:
            raise ValidationError(f"{path}: unexpected draw-table header {header}")
        cells: dict = {}
        for lineno, (name, idx, it, val) in enumerate(r, 2):
            try:
                cells.setdefault(name, []).append((int(it), int(idx), float(val)))
            except ValueError:
                raise ValidationError(f"{path}: line {lineno}: malformed draw row") from None
    out = {}
    for name, rows in cells.items():
        a = np.array(rows)
        n_it, n_idx = int(a[:, 0].max()) + 1, int(a[:, 1].max()) + 1
        arr = np.full((n_it, n_idx), np.nan)
        arr[a[:, 0].astype(int), a[:, 1].astype(int)] = a[:, 2]
        out[name] = arr
    return out


class ArchiveConflict(ValidationError):
    """An archive with a different configuration hash already exists."""


class PosteriorArchive:
    """A directory holding ``manifest.json``, ``draws.csv`` (per-iteration
    draws) and ``summary.csv`` (posterior-mean matrices, iteration 0)."""

    def __init__(self, path: str):
        self.path = path

    @property
    def manifest_path(self) -> str:
        return os.path.join(self.path, "manifest.json")

    def exists(self) -> bool:
        return os.path.exists(self.manifest_path)

    def manifest(self) -> dict:
        with open(self.manifest_path) as fh:
            return json.load(fh)

    def check_writable(self, config_hash: str, force: bool = False) -> None:
        if self.exists() and not force:
            old = self.manifest().get("config_hash")
            if old != config_hash:
                raise ArchiveConflict(
                    f"{self.path} holds an archive with config hash {old}, not {config_hash}; "
                    "use --force to overwrite")

    def write(self, manifest: dict, draws: dict, summary: dict | None = None,
              force: bool = False) -> None:
        self.check_writable(manifest["config_hash"], force)
        n_kept = manifest.get("n_kept")
        for name, arr in draws.items():
            if n_kept is not None and np.asarray(arr).shape[0] != n_kept:
                raise ValueError(f"draw table {name!r} has {np.asarray(arr).shape[0]} rows, expected {n_kept}")
        os.makedirs(self.path, exist_ok=True)
        write_draw_table(os.path.join(self.path, "draws.csv"), draws)
        if summary:
            write_draw_table(os.path.join(self.path, "summary.csv"),
                             {k: np.asarray(v, dtype=float)[None] for k, v in summary.items()})
        with open(self.manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")

    def draws(self) -> dict:
        return read_draw_table(os.path.join(self.path, "draws.csv"))

    def summary(self) -> dict:
        p = os.path.join(self.path, "summary.csv")
        return read_draw_table(p) if os.path.exists(p) else {}
