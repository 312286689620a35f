"""File formats: longitudinal CSV datasets, JSON parameter and fit
archives, and the CSV tables the command-line tools emit.

The dataset format is one row per observed point, ``subject_id,x,y``,
with a required header.  Subjects with no points cannot appear in the
CSV, so an optional JSON manifest carries the full subject roster (and
optionally the domain).  Floats are serialized with 17 significant
digits, which round-trips IEEE doubles exactly.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from markcov.basis import BasisSystem
from markcov.model import (
    Dataset,
    MarkedRealization,
    Theta,
    param_slices,
    theta_from_dict,
    theta_to_dict,
)

FLOAT_FMT = ".17g"


class DatasetFormatError(ValueError):
    """Malformed dataset file; the message names the offending line."""


def default_ids(n: int) -> tuple[str, ...]:
    width = max(4, len(str(n)))
    return tuple(f"s{i + 1:0{width}d}" for i in range(n))


def write_dataset_csv(path, data: Dataset) -> None:
    ids = data.ids if data.ids is not None else default_ids(data.n)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "x", "y"])
        for sid, obs in zip(ids, data.realizations):
            for xj, yj in zip(obs.x, obs.y):
                writer.writerow([sid, format(xj, FLOAT_FMT), format(yj, FLOAT_FMT)])


def write_subject_manifest(path, data: Dataset) -> None:
    ids = data.ids if data.ids is not None else default_ids(data.n)
    write_json(path, {"subjects": list(ids), "domain": list(data.domain)})


def read_dataset_csv(path, domain: tuple[float, float] | None = None,
                     manifest=None) -> Dataset:
    """Parse a longitudinal CSV into a Dataset.

    Subject order is first appearance, unless ``manifest`` (a path to a
    subjects JSON) fixes the roster; manifest subjects absent from the
    CSV become empty realizations.  The domain is taken from the
    ``domain`` argument, else the manifest, else the observed x range.
    """
    by_subject: dict[str, list[tuple[float, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["subject_id", "x", "y"]:
            raise DatasetFormatError(f"{path}: line 1: expected header 'subject_id,x,y', got {header!r}")
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DatasetFormatError(f"{path}: line {ln}: expected 3 fields, got {len(row)}")
            sid = row[0].strip()
            if not sid:
                raise DatasetFormatError(f"{path}: line {ln}: empty subject_id")
            try:
                x, y = float(row[1]), float(row[2])
            except ValueError:
                raise DatasetFormatError(f"{path}: line {ln}: non-numeric x or y ({row[1]!r}, {row[2]!r})") from None
            if not (np.isfinite(x) and np.isfinite(y)):
                raise DatasetFormatError(f"{path}: line {ln}: non-finite x or y")
            by_subject.setdefault(sid, []).append((x, y))

    manifest_domain = None
    if manifest is not None:
        payload = read_json(manifest)
        roster = [str(s) for s in payload["subjects"]]
        unknown = sorted(set(by_subject) - set(roster))
        if unknown:
            raise DatasetFormatError(f"{path}: subjects {unknown} missing from manifest {manifest}")
        if "domain" in payload:
            manifest_domain = tuple(float(v) for v in payload["domain"])
    else:
        roster = list(by_subject)

    realizations = []
    for sid in roster:
        pts = by_subject.get(sid, [])
        xs = np.array([p[0] for p in pts])
        ys = np.array([p[1] for p in pts])
        realizations.append(MarkedRealization(x=xs, y=ys))

    if domain is None:
        domain = manifest_domain
    if domain is None:
        all_x = np.concatenate([r.x for r in realizations]) if realizations else np.zeros(0)
        if all_x.size == 0:
            raise DatasetFormatError(f"{path}: no points and no domain given")
        domain = (float(all_x.min()), float(all_x.max()))
        if domain[0] == domain[1]:
            raise DatasetFormatError(f"{path}: degenerate x range {domain}")
    try:
        return Dataset(realizations=tuple(realizations), domain=domain, ids=tuple(roster))
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from None


def normalize_domain(data: Dataset) -> tuple[Dataset, tuple[float, float]]:
    """Affinely map the domain onto [0, 1]; returns the original scale."""
    a, b = data.domain
    if (a, b) == (0.0, 1.0):
        return data, (a, b)
    scale = b - a
    reals = tuple(MarkedRealization(x=(r.x - a) / scale, y=r.y)
                  for r in data.realizations)
    return Dataset(realizations=reals, domain=(0.0, 1.0), ids=data.ids), (a, b)


def denormalize_x(x01: np.ndarray, original: tuple[float, float]) -> np.ndarray:
    a, b = original
    return a + (b - a) * np.asarray(x01)


# ---------------------------------------------------------------------------
# JSON archives.

def write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def fit_payload(theta: Theta, basis: BasisSystem, *, objective: float,
                trace, converged: bool, n_outer: int, scores_u, scores_v,
                ids, config: dict, domain_original) -> dict:
    return {
        "format": "markcov-fit",
        "version": 1,
        "theta": theta_to_dict(theta, basis),
        "objective": float(objective),
        "trace": [float(v) for v in trace],
        "converged": bool(converged),
        "n_outer": int(n_outer),
        "scores_u": np.asarray(scores_u).tolist(),
        "scores_v": np.asarray(scores_v).tolist(),
        "ids": list(ids),
        "config": config,
        "domain_original": list(domain_original),
    }


def load_fit(path) -> tuple[Theta, BasisSystem, dict]:
    payload = read_json(path)
    if payload.get("format") != "markcov-fit":
        raise DatasetFormatError(f"{path}: not a fit archive")
    theta, basis = theta_from_dict(payload["theta"])
    return theta, basis, payload


# ---------------------------------------------------------------------------
# CSV tables.

def write_curves_csv(path, x: np.ndarray, columns: dict) -> None:
    """Grid CSV with an x column followed by the named curves."""
    names = list(columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x"] + names)
        cols = [np.asarray(columns[name]) for name in names]
        for i, xi in enumerate(np.asarray(x)):
            writer.writerow([format(xi, FLOAT_FMT)] + [format(c[i], FLOAT_FMT) for c in cols])


def write_matrix_csv(path, mat: np.ndarray, row_labels, col_labels,
                     corner: str = "") -> None:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([corner] + list(col_labels))
        for label, row in zip(row_labels, mat):
            writer.writerow([label] + [format(v, FLOAT_FMT) for v in row])


def write_scores_csv(path, ids, scores_u: np.ndarray, scores_v: np.ndarray) -> None:
    scores_u, scores_v = np.asarray(scores_u), np.asarray(scores_v)
    header = (["subject_id"]
              + [f"u_{k + 1}" for k in range(scores_u.shape[1])]
              + [f"v_{l + 1}" for l in range(scores_v.shape[1])])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i, sid in enumerate(ids):
            row = np.concatenate([scores_u[i], scores_v[i]])
            writer.writerow([sid] + [format(v, FLOAT_FMT) for v in row])


def write_residuals_csv(path, data: Dataset, fitted_per_subject) -> None:
    ids = data.ids if data.ids is not None else default_ids(data.n)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "x", "y", "fitted", "residual"])
        for sid, obs, fitted in zip(ids, data.realizations, fitted_per_subject):
            for xj, yj, fj in zip(obs.x, obs.y, np.asarray(fitted)):
                writer.writerow([sid, format(xj, FLOAT_FMT), format(yj, FLOAT_FMT),
                                 format(fj, FLOAT_FMT), format(yj - fj, FLOAT_FMT)])


def write_cv_table_csv(path, table) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["xi_1", "xi_2", "xi_3", "xi_4", "score"])
        for xi, score in table:
            writer.writerow([format(v, FLOAT_FMT) for v in xi] + [format(score, FLOAT_FMT)])


def save_avar(path_base, avar: np.ndarray, theta: Theta) -> None:
    """Binary covariance dump plus a JSON header describing the layout."""
    path_base = Path(path_base)
    np.save(path_base.with_suffix(".npy"), np.asarray(avar, dtype=float))
    sl = param_slices(theta.p1, theta.p2, theta.q)
    write_json(path_base.with_suffix(".json"), {
        "format": "markcov-avar",
        "shape": list(np.asarray(avar).shape),
        "blocks": {name: [s.start, s.stop] for name, s in sl.items()},
        "note": "sigma_uv entries are vectorized column by column",
    })
