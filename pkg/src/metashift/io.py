"""Text file formats shared by the CLI and the harness.

Meta-label matrices and priors carry a ``# C=<c> K=<k>`` comment line so
the file is self-describing; columns are in canonical ``m = y * K + z``
order. Floats are written with Python's shortest round-trip ``repr``.
"""
from __future__ import annotations

import csv
import io
import json
import re

import numpy as np

from .adapt import EmResult
from .calibrate import CalibrationParams
from .core import JointPrior, MetaLabelSpace
from .exceptions import InvalidInputError
from .synthdata import LabeledDataset
from .train import LinearSoftmaxModel

_HEADER_RE = re.compile(r"#\s*C\s*=\s*(\d+)\s+K\s*=\s*(\d+)")


def fmt(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def _write_rows(path, header, rows, comment=None):
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def _read_rows(path):
    """Return ``(space or None, header, rows)``; ``#`` lines are comments."""
    space = None
    try:
        with open(path, newline="") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from exc
    body = []
    for line in lines:
        if line.startswith("#"):
            match = _HEADER_RE.match(line)
            if match:
                space = MetaLabelSpace(int(match.group(1)), int(match.group(2)))
            continue
        if line.strip():
            body.append(line)
    if not body:
        raise InvalidInputError(f"{path} has no header row")
    reader = list(csv.reader(body))
    return space, reader[0], reader[1:]


def _float_matrix(rows, path, n_cols):
    try:
        data = np.array([[float(v) for v in row] for row in rows], dtype=np.float64)
    except ValueError as exc:
        raise InvalidInputError(f"{path}: non-numeric entry ({exc})") from exc
    return data.reshape(len(rows), n_cols)


# datasets ---------------------------------------------------------------

def write_dataset(path, dataset: LabeledDataset):
    d = dataset.features.shape[1]
    header = [f"x{j}" for j in range(d)] + ["y", "z"]
    rows = ([*map(float, x), int(y), int(z)] for x, y, z in zip(dataset.features, dataset.y, dataset.z))
    _write_rows(path, header, rows)


def read_dataset(path, space: MetaLabelSpace | None = None, require_labels=True):
    """Read ``x0..x{D-1}[,y,z]``. Without labels, ``y`` and ``z`` are ``None``."""
    file_space, header, rows = _read_rows(path)
    space = space or file_space
    x_cols = [i for i, name in enumerate(header) if re.fullmatch(r"x\d+", name)]
    if not x_cols:
        raise InvalidInputError(f"{path}: expected feature columns x0..x(D-1), found {header}")
    has_labels = "y" in header and "z" in header
    if require_labels and not has_labels:
        raise InvalidInputError(f"{path}: expected columns y and z")
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise InvalidInputError(f"{path}: row {i + 1} has {len(row)} fields, expected {len(header)}")
    table = _float_matrix(rows, path, len(header))
    features = table[:, x_cols]
    if not has_labels:
        return features, None, None, space
    y = table[:, header.index("y")]
    z = table[:, header.index("z")]
    if np.any(y != np.round(y)) or np.any(z != np.round(z)):
        raise InvalidInputError(f"{path}: y and z must be integers")
    y, z = y.astype(np.int64), z.astype(np.int64)
    if space is None and len(y):
        space = MetaLabelSpace(int(y.max()) + 1, int(z.max()) + 1)
    if space is not None and len(y) and (y.max() >= space.num_classes or z.max() >= space.num_groups
                                         or y.min() < 0 or z.min() < 0):
        raise InvalidInputError(
            f"{path}: labels out of range for C={space.num_classes} K={space.num_groups}")
    return features, y, z, space


# meta-label matrices ----------------------------------------------------

def write_matrix(path, matrix, space: MetaLabelSpace, prefix):
    matrix = np.asarray(matrix, dtype=np.float64)
    header = [f"{prefix}{m}" for m in range(space.size)]
    _write_rows(path, header, matrix.tolist(), comment=f"C={space.num_classes} K={space.num_groups}")


def read_matrix(path, space: MetaLabelSpace | None = None):
    file_space, header, rows = _read_rows(path)
    if space is not None and file_space is not None and space != file_space:
        raise InvalidInputError(
            f"{path}: declares C={file_space.num_classes} K={file_space.num_groups}, "
            f"expected C={space.num_classes} K={space.num_groups}")
    space = space or file_space
    if space is None:
        raise InvalidInputError(f"{path}: missing '# C=<c> K=<k>' header line")
    if len(header) != space.size:
        raise InvalidInputError(
            f"{path}: expected {space.size} columns for C={space.num_classes} K={space.num_groups}, "
            f"found {len(header)}")
    for i, row in enumerate(rows):
        if len(row) != space.size:
            raise InvalidInputError(f"{path}: row {i + 1} has {len(row)} columns, expected {space.size}")
    return _float_matrix(rows, path, space.size), space


# priors -----------------------------------------------------------------

def write_prior(path, prior: JointPrior):
    space = prior.space
    rows = ([*space.decode(m), p] for m, p in enumerate(prior.probs))
    _write_rows(path, ["y", "z", "prob"], rows, comment=f"C={space.num_classes} K={space.num_groups}")


def read_prior(path, space: MetaLabelSpace | None = None) -> JointPrior:
    file_space, header, rows = _read_rows(path)
    if header != ["y", "z", "prob"]:
        raise InvalidInputError(f"{path}: expected header y,z,prob, found {','.join(header)}")
    if space is not None and file_space is not None and space != file_space:
        raise InvalidInputError(
            f"{path}: declares C={file_space.num_classes} K={file_space.num_groups}, "
            f"expected C={space.num_classes} K={space.num_groups}")
    space = space or file_space
    if space is None:
        raise InvalidInputError(f"{path}: missing '# C=<c> K=<k>' header line")
    if len(rows) != space.size:
        raise InvalidInputError(f"{path}: expected {space.size} prior entries, found {len(rows)}")
    table = _float_matrix(rows, path, 3)
    probs = np.zeros(space.size)
    for y, z, p in table:
        probs[space.encode(int(y), int(z))] = p
    return JointPrior(space, probs)


# json records -----------------------------------------------------------

def _dump_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from exc


def write_calibration(path, params: CalibrationParams):
    _dump_json(path, params.to_dict())


def read_calibration(path) -> CalibrationParams:
    data = _load_json(path)
    try:
        return CalibrationParams.from_dict(data)
    except (KeyError, TypeError) as exc:
        raise InvalidInputError(f"{path}: malformed calibration record ({exc})") from exc


def model_to_dict(model: LinearSoftmaxModel):
    return {
        "num_classes": model.space.num_classes,
        "num_groups": model.space.num_groups,
        "num_features": model.n_features,
        "mode": model.mode,
        "training_prior": model.training_prior.probs.tolist(),
        "feature_mean": model.feature_mean.tolist(),
        "feature_scale": model.feature_scale.tolist(),
        "weights": model.weights.ravel().tolist(),
        "bias": model.bias.tolist(),
    }


def model_from_dict(data) -> LinearSoftmaxModel:
    try:
        space = MetaLabelSpace(int(data["num_classes"]), int(data["num_groups"]))
        d = int(data["num_features"])
        weights = np.asarray(data["weights"], dtype=np.float64).reshape(space.size, d)
        return LinearSoftmaxModel(
            space, weights, np.asarray(data["bias"]), data["mode"],
            JointPrior(space, data["training_prior"]),
            np.asarray(data["feature_mean"]), np.asarray(data["feature_scale"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InvalidInputError):
            raise
        raise InvalidInputError(f"malformed model record ({exc})") from exc


def write_model(path, model: LinearSoftmaxModel):
    _dump_json(path, model_to_dict(model))


def read_model(path) -> LinearSoftmaxModel:
    return model_from_dict(_load_json(path))


def write_em_result(path, result: EmResult):
    space = result.target_prior.space
    _dump_json(path, {
        "num_classes": space.num_classes,
        "num_groups": space.num_groups,
        "target_prior": result.target_prior.probs.tolist(),
        "iterations": result.iterations,
        "converged": result.converged,
        "log_likelihood_trace": [float(v) for v in result.log_likelihood_trace],
        "expected_counts": result.expected_counts.tolist(),
    })


# key=value config files -------------------------------------------------

def read_key_values(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from exc
    values = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise InvalidInputError(f"{path}:{lineno}: empty key")
        values[key] = value
    return values
