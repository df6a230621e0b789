"""Trajectory metrology: association, rigid alignment, ATE and segment drift.

The protocol associates estimate and ground-truth poses by timestamp,
fits a rigid (scale-free) alignment on the first part of the matched
pairs only, then reports

* the absolute trajectory error, ``|x*_i - (R x_i + t)|`` for every pair;
* the translation drift of every segment that starts at a matched pair
  and ends at the first matched pair at least ``segment_len`` meters of
  ground-truth path later, ``|l* - l| / l*``.
"""

from __future__ import annotations

import bisect
import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .geometry import matrix_to_quat, quat_to_matrix
from .trajectory import Trajectory
from .validation import AssociationError, DegenerateGeometryError, check_points

DEFAULT_SEGMENT_LEN = 10.0
DEFAULT_ALIGN_FRACTION = 1.0 / 3.0
DEFAULT_MAX_DT = 0.02
COLLINEAR_TOL = 1e-9


class Correspondences(NamedTuple):
    gt_idx: np.ndarray
    est_idx: np.ndarray
    max_dt: float

    def __len__(self) -> int:
        return len(self.gt_idx)


def _times(traj) -> np.ndarray:
    return np.asarray(traj.t if isinstance(traj, Trajectory) else traj, dtype=float)


def associate_by_timestamp(gt, est, max_dt: float = DEFAULT_MAX_DT) -> Correspondences:
    """Greedy nearest-timestamp matching.

    Candidate pairs within ``max_dt`` are accepted in order of increasing
    time gap, skipping any pair that reuses a pose or would cross an
    accepted pair, so both index sequences come out strictly increasing.
    """
    tg, te = _times(gt), _times(est)
    if len(tg) == 0 or len(te) == 0:
        raise AssociationError("both trajectories must be non-empty")
    if not max_dt > 0:
        raise ValueError("max_dt must be positive")
    lo = np.searchsorted(tg, te - max_dt, side="left")
    hi = np.searchsorted(tg, te + max_dt, side="right")
    cand_i, cand_j = [], []
    for j in range(len(te)):
        for i in range(lo[j], hi[j]):
            cand_i.append(i)
            cand_j.append(j)
    cand_i = np.asarray(cand_i, dtype=np.int64)
    cand_j = np.asarray(cand_j, dtype=np.int64)
    gaps = np.abs(tg[cand_i] - te[cand_j]) if len(cand_i) else np.empty(0)
    keep = gaps <= max_dt
    cand_i, cand_j, gaps = cand_i[keep], cand_j[keep], gaps[keep]
    order = np.lexsort((cand_j, cand_i, gaps))

    used_i: set[int] = set()
    used_j: set[int] = set()
    acc_i: list[int] = []  # accepted gt indices, sorted
    acc_j: list[int] = []  # matching est indices, same order
    for c in order:
        i, j = int(cand_i[c]), int(cand_j[c])
        if i in used_i or j in used_j:
            continue
        pos = bisect.bisect_left(acc_i, i)
        if pos > 0 and acc_j[pos - 1] >= j:
            continue
        if pos < len(acc_i) and acc_j[pos] <= j:
            continue
        acc_i.insert(pos, i)
        acc_j.insert(pos, j)
        used_i.add(i)
        used_j.add(j)
    if not acc_i:
        raise AssociationError(f"no timestamp pairs within max_dt={max_dt} s")
    return Correspondences(np.asarray(acc_i), np.asarray(acc_j), float(max_dt))


def horn_quaternion(source, target) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form ``(R, t)`` minimising ``sum |target - (R source + t)|^2``.

    Uses the unit-quaternion eigenvector formulation: the optimal rotation
    is the eigenvector of the symmetric 4x4 matrix built from the
    cross-covariance that has the largest eigenvalue.
    """
    X = check_points(source, min_points=3, name="source")
    Y = check_points(target, min_points=3, name="target")
    if X.shape != Y.shape:
        raise ValueError("source and target must be the same shape")
    cx, cy = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - cx, Y - cy
    for name, pts in (("source", Xc), ("target", Yc)):
        s = np.linalg.svd(pts, compute_uv=False)
        if s[0] == 0 or s[1] <= COLLINEAR_TOL * s[0]:
            raise DegenerateGeometryError(f"{name} points are collinear; rotation is unobservable")
    S = Xc.T @ Yc
    (sxx, sxy, sxz), (syx, syy, syz), (szx, szy, szz) = S
    N = np.array(
        [
            [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
            [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
            [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
            [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
        ]
    )
    vals, vecs = np.linalg.eigh(N)
    q = vecs[:, -1]
    # one inverse-iteration step sharpens the eigenvector to near working precision
    with np.errstate(all="ignore"):
        try:
            refined = np.linalg.solve(N - (q @ N @ q) * np.eye(4), q)
        except np.linalg.LinAlgError:
            refined = q
    if np.all(np.isfinite(refined)) and np.linalg.norm(refined) > 0:
        q = refined / np.linalg.norm(refined)
    w, x, y, z = q
    R = quat_to_matrix(np.array([x, y, z, w]))
    return R, cy - R @ cx


@dataclass
class AlignmentResult:
    rotation: np.ndarray
    translation: np.ndarray
    rms_residual: float
    pairs_used: int

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.R.T + self.translation

    def to_dict(self) -> dict:
        return {
            "rotation_xyzw": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "rms_residual": self.rms_residual,
            "pairs_used": self.pairs_used,
        }


def prefix_count(n_pairs: int, align_fraction: float) -> int:
    if not 0 < align_fraction <= 1:
        raise ValueError("align_fraction must lie in (0, 1]")
    # guard against 1/3 * 3n landing a hair above an integer
    return min(n_pairs, math.ceil(align_fraction * n_pairs - 1e-9))


def horn_align(corr: Correspondences, gt: Trajectory, est: Trajectory,
               align_fraction: float = DEFAULT_ALIGN_FRACTION) -> AlignmentResult:
    """Rigidly align the estimate on the first ``ceil(fraction * pairs)`` pairs."""
    m = prefix_count(len(corr), align_fraction)
    if m < 3:
        raise DegenerateGeometryError(f"alignment needs >= 3 pairs, prefix has {m}")
    X = est.p[corr.est_idx[:m]]
    Y = gt.p[corr.gt_idx[:m]]
    R, t = horn_quaternion(X, Y)
    q = matrix_to_quat(R)
    # residuals from the stored quaternion so that apply() reproduces them exactly
    R = quat_to_matrix(q)
    resid = Y - (X @ R.T + t)
    rms = float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))
    return AlignmentResult(q, t, rms, m)


class HornAligner(TransformerMixin, BaseEstimator):
    """Scale-free rigid alignment of corresponded point sets.

    ``fit(X, y)`` finds the motion taking points ``X`` onto ``y``;
    ``transform`` applies it.
    """

    def fit(self, X, y):
        X = check_points(X, min_points=3)
        y = check_points(y, min_points=3, name="y")
        R, t = horn_quaternion(X, y)
        self.rotation_ = R
        self.translation_ = t
        self.quaternion_ = matrix_to_quat(R)
        resid = y - self._apply(X)
        self.rms_residual_ = float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))
        self.n_features_in_ = 3
        return self

    def _apply(self, X):
        return X @ self.rotation_.T + self.translation_

    def transform(self, X):
        check_is_fitted(self, "rotation_")
        return self._apply(check_points(X, min_points=0))


def compute_ate(corr: Correspondences, gt: Trajectory, est: Trajectory,
                alignment: AlignmentResult) -> np.ndarray:
    aligned = alignment.apply(est.p[corr.est_idx])
    return np.linalg.norm(gt.p[corr.gt_idx] - aligned, axis=1)


def cumulative_length(traj: Trajectory) -> np.ndarray:
    steps = np.linalg.norm(np.diff(traj.p, axis=0), axis=1)
    out = np.zeros(len(traj))
    np.cumsum(steps, out=out[1:])
    return out


def arc_length(traj: Trajectory, i: int, j: int) -> float:
    """Path length from pose ``i`` to pose ``j`` (``i <= j``)."""
    if i > j:
        raise ValueError("arc_length needs i <= j")
    return float(np.linalg.norm(np.diff(traj.p[i : j + 1], axis=0), axis=1).sum())


class DriftSeries(NamedTuple):
    values: np.ndarray
    anchors: np.ndarray
    ends: np.ndarray
    gt_lengths: np.ndarray
    est_lengths: np.ndarray


def compute_drift_segments(corr: Correspondences, gt: Trajectory, est: Trajectory,
                           segment_len: float = DEFAULT_SEGMENT_LEN) -> DriftSeries:
    """Drift per anchor pair, with the pair indices that bound each segment."""
    if not segment_len > 0:
        raise ValueError("segment_len must be positive")
    cg = cumulative_length(gt)[corr.gt_idx]
    ce = cumulative_length(est)[corr.est_idx]
    n = len(corr)
    anchors, ends = [], []
    b = 0
    for a in range(n):
        b = max(b, a + 1)
        while b < n and cg[b] - cg[a] < segment_len:
            b += 1
        if b >= n:
            break
        anchors.append(a)
        ends.append(b)
    if not anchors:
        raise ValueError(f"ground truth has no complete {segment_len} m segment")
    anchors = np.asarray(anchors)
    ends = np.asarray(ends)
    lg = cg[ends] - cg[anchors]
    le = ce[ends] - ce[anchors]
    return DriftSeries(np.abs(lg - le) / lg, anchors, ends, lg, le)


def compute_drift(corr: Correspondences, gt: Trajectory, est: Trajectory,
                  segment_len: float = DEFAULT_SEGMENT_LEN) -> np.ndarray:
    """Relative path-length error of every complete segment (a fraction)."""
    return compute_drift_segments(corr, gt, est, segment_len).values


def rms(values) -> float:
    values = np.asarray(values, dtype=float)
    return float(np.sqrt(np.mean(values * values)))


def summarize(ate_series, drift_series) -> dict:
    ate = np.asarray(ate_series, dtype=float)
    drift = np.asarray(drift_series, dtype=float)
    if ate.size == 0 or drift.size == 0:
        raise ValueError("cannot summarize an empty series")
    return {
        "ate_rms": rms(ate),
        "ate_median": float(np.median(ate)),
        "drift_rms": rms(drift),
        "drift_median": float(np.median(drift)),
    }


@dataclass
class MetricsReport:
    ate_series: np.ndarray
    drift_series: np.ndarray
    alignment: AlignmentResult
    ate_stamps: np.ndarray
    ate_distance: np.ndarray
    drift_stamps: np.ndarray
    drift_distance: np.ndarray
    ate_rms: float
    ate_median: float
    drift_rms: float | None
    drift_median: float | None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ate_rms": self.ate_rms,
            "ate_median": self.ate_median,
            "drift_rms": self.drift_rms,
            "drift_median": self.drift_median,
            "alignment": self.alignment.to_dict(),
            "metadata": self.metadata,
            "ate_series": self.ate_series.tolist(),
            "drift_series": self.drift_series.tolist(),
        }

    def summary_text(self) -> str:
        lines = [
            f"pairs          {self.metadata.get('pairs', len(self.ate_series))}",
            f"ATE rms        {self.ate_rms:.4f} m",
            f"ATE median     {self.ate_median:.4f} m",
        ]
        if self.drift_median is None:
            lines.append("TDr            n/a (no complete segment)")
        else:
            lines.append(f"TDr median     {100 * self.drift_median:.3f} %")
            lines.append(f"TDr rms        {100 * self.drift_rms:.3f} %")
        return "\n".join(lines)


def evaluate(gt: Trajectory, est: Trajectory, segment_len: float = DEFAULT_SEGMENT_LEN,
             align_fraction: float = DEFAULT_ALIGN_FRACTION, max_dt: float = DEFAULT_MAX_DT) -> MetricsReport:
    """Run the full metrology protocol on a ground-truth/estimate pair."""
    corr = associate_by_timestamp(gt, est, max_dt)
    alignment = horn_align(corr, gt, est, align_fraction)
    ate = compute_ate(corr, gt, est, alignment)
    dist = cumulative_length(gt)[corr.gt_idx]
    try:
        drift = compute_drift_segments(corr, gt, est, segment_len)
        d_stamps = gt.t[corr.gt_idx[drift.anchors]]
        d_dist = dist[drift.anchors]
        values = drift.values
        d_rms, d_med = rms(values), float(np.median(values))
    except ValueError as exc:
        warnings.warn(str(exc), RuntimeWarning, stacklevel=2)
        values = d_stamps = d_dist = np.empty(0)
        d_rms = d_med = None
    return MetricsReport(
        ate_series=ate,
        drift_series=values,
        alignment=alignment,
        ate_stamps=gt.t[corr.gt_idx],
        ate_distance=dist,
        drift_stamps=d_stamps,
        drift_distance=d_dist,
        ate_rms=rms(ate),
        ate_median=float(np.median(ate)),
        drift_rms=d_rms,
        drift_median=d_med,
        metadata={
            "segment_len": float(segment_len),
            "align_fraction": float(align_fraction),
            "max_dt": float(max_dt),
            "pairs": len(corr),
            "gt_poses": len(gt),
            "est_poses": len(est),
        },
    )


class TrajectoryEvaluator(BaseEstimator):
    """Estimator-style wrapper: ``fit(gt, est)`` computes ``report_``."""

    def __init__(self, segment_len: float = DEFAULT_SEGMENT_LEN,
                 align_fraction: float = DEFAULT_ALIGN_FRACTION, max_dt: float = DEFAULT_MAX_DT):
        self.segment_len = segment_len
        self.align_fraction = align_fraction
        self.max_dt = max_dt

    def fit(self, gt: Trajectory, est: Trajectory):
        self.report_ = evaluate(gt, est, self.segment_len, self.align_fraction, self.max_dt)
        return self

    def score(self, gt: Trajectory, est: Trajectory) -> float:
        """Negative ATE RMS, so larger is better."""
        return -self.fit(gt, est).report_.ate_rms


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _write_plot_data(path: Path, title: str, columns, xs, ys) -> Path:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"# {title}\n# {columns}\n")
        for x, y in zip(xs.tolist(), ys.tolist()):
            fh.write(f"{x!r} {y!r}\n")
    return path


def write_report(report: MetricsReport, out_dir) -> dict[str, Path]:
    """Series CSVs, gnuplot data files and the JSON report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "ate_csv": _write_csv(out / "ate.csv", ["t", "ate_m"],
                              zip(report.ate_stamps.tolist(), report.ate_series.tolist())),
        "drift_csv": _write_csv(out / "drift.csv", ["t", "tdr_fraction"],
                                zip(report.drift_stamps.tolist(), report.drift_series.tolist())),
        "ate_plot": _write_plot_data(out / "ate_vs_distance.dat", "absolute trajectory error",
                                     "distance_m ate_m", report.ate_distance, report.ate_series),
        "drift_plot": _write_plot_data(out / "drift_vs_distance.dat", "translation drift",
                                       "distance_m tdr_percent", report.drift_distance,
                                       100.0 * report.drift_series),
    }
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    paths["report"] = report_path
    return paths
