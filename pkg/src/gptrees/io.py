"""CSV ingestion, min-max normalisation, and posterior persistence.

The posterior stream is line-delimited JSON: a self-describing header
record followed by one record per retained draw.  Floats go through the
shortest round-trip repr, so a saved stream reloads bit-exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import trees
from .sampler import Draw, Hyperparams, PosteriorDraws

FORMAT_NAME = "gptrees-posterior"
FORMAT_VERSION = 1

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"


@dataclass(frozen=True)
class ColumnSchema:
    """Feature names, kinds, and categorical level dictionaries."""

    names: tuple
    kinds: tuple
    levels: dict
    target: Optional[str] = None

    def kind_of(self, name: str) -> str:
        return self.kinds[self.names.index(name)]

    def to_dict(self) -> dict:
        return {"names": list(self.names), "kinds": list(self.kinds),
                "levels": {k: list(v) for k, v in self.levels.items()},
                "target": self.target}

    @staticmethod
    def from_dict(d: dict) -> "ColumnSchema":
        return ColumnSchema(names=tuple(d["names"]), kinds=tuple(d["kinds"]),
                            levels={k: tuple(v) for k, v in d["levels"].items()},
                            target=d.get("target"))


@dataclass
class Dataset:
    """Numeric feature matrix (categoricals code-encoded) plus the target."""

    x: np.ndarray
    y: Optional[np.ndarray]
    schema: ColumnSchema
    rejected: tuple = ()
    unknown_levels: int = 0

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def continuous_cols(self) -> tuple:
        return tuple(j for j, k in enumerate(self.schema.kinds) if k == CONTINUOUS)

    @property
    def categorical_cols(self) -> tuple:
        return tuple(j for j, k in enumerate(self.schema.kinds) if k == CATEGORICAL)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(x=self.x[idx], y=None if self.y is None else self.y[idx],
                       schema=self.schema)


def from_arrays(X: np.ndarray, y: np.ndarray, names=None,
                categorical_cols=()) -> Dataset:
    """Wrap in-memory arrays (e.g. from the generators) as a Dataset."""
    X = np.asarray(X, dtype=float)
    p = X.shape[1]
    if names is None:
        names = tuple(f"x{j + 1}" for j in range(p))
    kinds = tuple(CATEGORICAL if j in set(categorical_cols) else CONTINUOUS
                  for j in range(p))
    levels = {names[j]: tuple(str(v) for v in np.unique(X[:, j]))
              for j in set(categorical_cols)}
    schema = ColumnSchema(names=tuple(names), kinds=kinds, levels=levels, target="y")
    return Dataset(x=X, y=None if y is None else np.asarray(y, dtype=float), schema=schema)


def load_csv(path, target_column: Optional[str], categorical_columns=(),
             schema: Optional[ColumnSchema] = None, ignore_columns=()) -> Dataset:
    """Parse a headed CSV into a Dataset.

    Leading '#' comment lines (as written by the CLI) are skipped.  Rows
    with missing or unparseable cells are rejected and reported with their
    physical line number.  With a ``schema`` the feature columns are
    located by name, kinds come from the schema, the target may be absent,
    and unseen categorical levels encode as -1 (counted, not rejected).
    """
    header = None
    raw_rows = []
    with open(path, newline="") as fh:
        for line_no, parsed in enumerate(csv.reader(fh), start=1):
            if not parsed:
                continue
            if header is None and parsed[0].lstrip().startswith("#"):
                continue
            if header is None:
                header = [h.strip() for h in parsed]
            else:
                raw_rows.append((line_no, parsed))
    if header is None:
        raise ValueError(f"{path}: empty file")

    if schema is not None:
        target_column = schema.target if target_column is None else target_column
        feature_names = list(schema.names)
        for name in feature_names:
            if name not in header:
                raise ValueError(f"column {name!r} missing from {path}")
        kinds = list(schema.kinds)
        has_target = target_column is not None and target_column in header
    else:
        if target_column is None or target_column not in header:
            raise ValueError(f"target column {target_column!r} not found in {path}")
        skip = set(ignore_columns) | {target_column}
        missing_ignored = set(ignore_columns) - set(header)
        if missing_ignored:
            raise ValueError(f"ignored column(s) {sorted(missing_ignored)} not in {path}")
        feature_names = [h for h in header if h not in skip]
        cat = set(categorical_columns)
        unknown = cat - set(feature_names)
        if unknown:
            raise ValueError(f"categorical column(s) {sorted(unknown)} not in {path}")
        kinds = [CATEGORICAL if h in cat else CONTINUOUS for h in feature_names]
        has_target = True

    col_idx = [header.index(name) for name in feature_names]
    target_idx = header.index(target_column) if has_target else None

    kept_tokens = []
    kept_y = []
    rejected = []
    for line_no, row in raw_rows:
        if len(row) != len(header):
            rejected.append((line_no, f"expected {len(header)} cells, got {len(row)}"))
            continue
        cells = [row[j].strip() for j in col_idx]
        y_cell = row[target_idx].strip() if target_idx is not None else None
        reason = None
        if any(c == "" for c in cells) or (y_cell == "" if has_target else False):
            reason = "missing value"
        else:
            for name, kind, cell in zip(feature_names, kinds, cells):
                if kind == CONTINUOUS:
                    try:
                        float(cell)
                    except ValueError:
                        reason = f"unparseable value {cell!r} in column {name!r}"
                        break
            if reason is None and has_target:
                try:
                    float(y_cell)
                except ValueError:
                    reason = f"non-numeric target {y_cell!r}"
        if reason is None:
            kept_tokens.append(cells)
            if has_target:
                kept_y.append(float(y_cell))
        else:
            rejected.append((line_no, reason))

    if not kept_tokens:
        raise ValueError(f"{path}: no usable rows ({len(rejected)} rejected)")

    if schema is None:
        levels = {}
        for j, (name, kind) in enumerate(zip(feature_names, kinds)):
            if kind == CATEGORICAL:
                levels[name] = tuple(sorted({toks[j] for toks in kept_tokens}))
        schema = ColumnSchema(names=tuple(feature_names), kinds=tuple(kinds),
                              levels=levels, target=target_column)

    unknown_count = 0
    x = np.empty((len(kept_tokens), len(feature_names)))
    for j, (name, kind) in enumerate(zip(feature_names, kinds)):
        if kind == CONTINUOUS:
            x[:, j] = [float(toks[j]) for toks in kept_tokens]
        else:
            code = {lvl: float(c) for c, lvl in enumerate(schema.levels[name])}
            col = np.array([code.get(toks[j], -1.0) for toks in kept_tokens])
            unknown_count += int(np.count_nonzero(col < 0))
            x[:, j] = col

    y = np.array(kept_y) if has_target else None
    return Dataset(x=x, y=y, schema=schema, rejected=tuple(rejected),
                   unknown_levels=unknown_count)


@dataclass(frozen=True)
class NormalizationTransform:
    """Min-max maps fitted on training data: X columns to [0,1], y to [-0.5, 0.5]."""

    x_min: np.ndarray
    x_max: np.ndarray
    y_min: float
    y_max: float
    continuous_cols: tuple

    @property
    def y_scale(self) -> float:
        return self.y_max - self.y_min

    def transform_x(self, X: np.ndarray) -> np.ndarray:
        X = np.array(X, dtype=float, copy=True)
        for j in self.continuous_cols:
            X[:, j] = (X[:, j] - self.x_min[j]) / (self.x_max[j] - self.x_min[j])
        return X

    def inverse_x(self, X_norm: np.ndarray) -> np.ndarray:
        X = np.array(X_norm, dtype=float, copy=True)
        for j in self.continuous_cols:
            X[:, j] = X[:, j] * (self.x_max[j] - self.x_min[j]) + self.x_min[j]
        return X

    def transform_y(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.y_min) / self.y_scale - 0.5

    def inverse_y(self, y_model: np.ndarray) -> np.ndarray:
        return (np.asarray(y_model, dtype=float) + 0.5) * self.y_scale + self.y_min

    def to_dict(self) -> dict:
        return {"x_min": self.x_min.tolist(), "x_max": self.x_max.tolist(),
                "y_min": self.y_min, "y_max": self.y_max,
                "continuous_cols": list(self.continuous_cols)}

    @staticmethod
    def from_dict(d: dict) -> "NormalizationTransform":
        return NormalizationTransform(
            x_min=np.array(d["x_min"]), x_max=np.array(d["x_max"]),
            y_min=float(d["y_min"]), y_max=float(d["y_max"]),
            continuous_cols=tuple(d["continuous_cols"]))


def fit_transform(train: Dataset):
    """Fit the min-max transform on training data and apply it.

    Constant continuous columns (or a constant target) cannot be scaled and
    are reported by name.
    """
    if train.y is None:
        raise ValueError("training data needs a target")
    x_min = np.zeros(train.p)
    x_max = np.ones(train.p)
    for j in train.continuous_cols:
        lo, hi = float(train.x[:, j].min()), float(train.x[:, j].max())
        if hi <= lo:
            raise ValueError(f"column {train.schema.names[j]!r} is constant")
        x_min[j], x_max[j] = lo, hi
    y_min, y_max = float(train.y.min()), float(train.y.max())
    if y_max <= y_min:
        raise ValueError("target is constant")
    tf = NormalizationTransform(x_min=x_min, x_max=x_max, y_min=y_min, y_max=y_max,
                                continuous_cols=train.continuous_cols)
    norm = Dataset(x=tf.transform_x(train.x), y=tf.transform_y(train.y),
                   schema=train.schema, rejected=train.rejected,
                   unknown_levels=train.unknown_levels)
    return tf, norm


def _hp_to_dict(hp: Hyperparams) -> dict:
    from dataclasses import asdict

    d = asdict(hp)
    for key in ("move_probs", "angle_grid", "lengthscale_grid"):
        d[key] = list(d[key])
    return d


def _hp_from_dict(d: dict) -> Hyperparams:
    d = dict(d)
    for key in ("move_probs", "angle_grid", "lengthscale_grid"):
        d[key] = tuple(d[key])
    return Hyperparams(**d)


def save_draws(draws: PosteriorDraws, path, config_hash: Optional[str] = None) -> None:
    """Write the posterior stream: one header record, then one record per draw."""
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "seed": draws.seed,
        "config_hash": config_hash,
        "variant": draws.variant,
        "n_draws": len(draws.draws),
        "hyperparams": _hp_to_dict(draws.hp),
        "transform": draws.transform.to_dict() if draws.transform is not None else None,
        "schema": draws.schema.to_dict() if draws.schema is not None else None,
        "gp_cols": list(draws.gp_cols),
        "rot_cols": list(draws.rot_cols),
        "continuous_cols": list(draws.continuous_cols),
        "categorical_cols": list(draws.categorical_cols),
        "x_train": draws.x_train.tolist(),
        "tau_trace": draws.tau_trace.tolist(),
        "acceptance": draws.acceptance,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for i, draw in enumerate(draws.draws):
            rec = {
                "draw": i,
                "tau": draw.tau,
                "trees": [trees.tree_to_records(t) for t in draw.trees],
                "lengthscales": draw.lengthscales.tolist(),
                "leaf_values": [{str(k): v.tolist() for k, v in sorted(lv.items())}
                                for lv in draw.leaf_values],
                "fitted": draw.fitted.tolist(),
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_draws(path) -> PosteriorDraws:
    """Reload a posterior stream; leaf row sets are re-derived by routing."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise IOError(f"{path}: empty posterior stream")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise IOError(f"{path}: corrupted header record: {exc}") from None
    if header.get("format") != FORMAT_NAME:
        raise IOError(f"{path}: not a {FORMAT_NAME} stream")
    if header.get("version") != FORMAT_VERSION:
        raise IOError(f"{path}: format version {header.get('version')} "
                      f"unsupported (expected {FORMAT_VERSION})")
    n_draws = int(header["n_draws"])
    if len(lines) - 1 < n_draws:
        raise IOError(f"{path}: truncated stream: header declares {n_draws} draws, "
                      f"found {len(lines) - 1}")
    x_train = np.array(header["x_train"], dtype=float)
    if x_train.size == 0:
        x_train = x_train.reshape(0, 0)

    draw_list = []
    for i in range(n_draws):
        try:
            rec = json.loads(lines[1 + i])
            tree_list = tuple(trees.tree_from_records(r, x_train) for r in rec["trees"])
            draw_list.append(Draw(
                trees=tree_list,
                lengthscales=np.array(rec["lengthscales"], dtype=float),
                tau=float(rec["tau"]),
                fitted=np.array(rec["fitted"], dtype=float),
                leaf_values=tuple({int(k): np.array(v, dtype=float)
                                   for k, v in lv.items()}
                                  for lv in rec["leaf_values"]),
            ))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise IOError(f"{path}: corrupted draw record {i}: {exc}") from None

    return PosteriorDraws(
        draws=draw_list,
        hp=_hp_from_dict(header["hyperparams"]),
        variant=header["variant"],
        seed=header["seed"],
        x_train=x_train,
        gp_cols=tuple(header["gp_cols"]),
        rot_cols=tuple(header["rot_cols"]),
        continuous_cols=tuple(header["continuous_cols"]),
        categorical_cols=tuple(header["categorical_cols"]),
        tau_trace=np.array(header["tau_trace"], dtype=float),
        acceptance=header["acceptance"],
        transform=(NormalizationTransform.from_dict(header["transform"])
                   if header["transform"] is not None else None),
        schema=(ColumnSchema.from_dict(header["schema"])
                if header["schema"] is not None else None),
    )
