"""Frame-log (JSON lines), risk CSV, and calibration file round-trip IO.

The frame log is the backend-agnostic boundary: one self-describing record
per line, full float round-trip via repr, unknown keys ignored on read.
Every file starts with a schema header; readers reject unknown major
versions. Symmetric matrices are stored in full and re-validated on read.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterator

import numpy as np

from .errors import AsymmetricMatrixError, MalformedRecordError
from .geometry import Intrinsics
from .risk import RiskRecord

SCHEMA_FRAMELOG = "vorisk-framelog"
SCHEMA_RISK = "vorisk-risk"
SCHEMA_CALIBRATION = "vorisk-calibration"
VERSION = (1, 0)
SYMMETRY_RTOL = 1e-9

RISK_COLUMNS = (
    "frame_id", "t", "sigma_bar", "residual_bar", "kappa_bar",
    "n_features", "r_raw", "r_smooth", "r_dot", "margin", "trend",
    "saturated",
    # documented extensions after the fixed prefix
    "dt", "outlier_ratio", "sigma_term", "residual_term", "kappa_term",
)


@dataclass
class FeatureEntry:
    feature_id: int
    landmark_id: int
    residual: np.ndarray       # (2,)
    J: np.ndarray              # (2, 3)
    sigma_world: np.ndarray    # (3, 3) symmetric marginal covariance
    flags: int = 0


@dataclass
class FrameLogRecord:
    frame_id: int
    timestamp: float
    lambda_lm: float
    iterations: int
    converged: bool
    features: list[FeatureEntry] = field(default_factory=list)
    pose_error_m: float | None = None
    degenerate: bool = False

    @property
    def n_features(self) -> int:
        return len(self.features)


@dataclass
class HessianRecord:
    """Raw block normal matrix, for small windows / oracle replays."""

    frame_id: int
    lambda_lm: float
    pose_dim: int
    H_pp: np.ndarray           # (P, P)
    Bt: np.ndarray             # (L, 3, P) transposed coupling
    H_ll: np.ndarray           # (L, 3, 3)
    landmark_ids: np.ndarray   # (L,)


@dataclass
class LogHeader:
    run_tag: str
    intrinsics: Intrinsics | None = None
    frame_rate_hz: float = 20.0
    corruption: dict | None = None
    version: tuple[int, int] = VERSION


def _check_symmetric(M: np.ndarray, line_number: int | None) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    scale = float(np.linalg.norm(M))
    if scale > 0 and float(np.linalg.norm(M - M.T)) > SYMMETRY_RTOL * scale:
        raise AsymmetricMatrixError("asymmetric matrix in record",
                                    line_number)
    return M


def serialize_header(header: LogHeader) -> str:
    doc = {
        "record": "header",
        "schema": SCHEMA_FRAMELOG,
        "version": list(header.version),
        "run_tag": header.run_tag,
        "frame_rate_hz": header.frame_rate_hz,
        "corruption": header.corruption,
    }
    if header.intrinsics is not None:
        i = header.intrinsics
        doc["intrinsics"] = {
            "focal_px": i.focal_px, "cu": i.cu, "cv": i.cv,
            "baseline_m": i.baseline_m, "width": i.width,
            "height": i.height,
        }
    return json.dumps(doc)


def parse_header(line: str, line_number: int = 1) -> LogHeader:
    doc = _load_json(line, line_number)
    if doc.get("record") != "header" or doc.get("schema") != SCHEMA_FRAMELOG:
        raise MalformedRecordError("missing frame-log header", line_number)
    version = tuple(doc.get("version", (0, 0)))
    if version[0] != VERSION[0]:
        raise MalformedRecordError(
            f"unsupported schema major version {version}", line_number)
    intr = None
    if "intrinsics" in doc and doc["intrinsics"] is not None:
        d = doc["intrinsics"]
        intr = Intrinsics(d["focal_px"], d["cu"], d["cv"], d["baseline_m"],
                          int(d["width"]), int(d["height"]))
    return LogHeader(
        run_tag=doc.get("run_tag", ""),
        intrinsics=intr,
        frame_rate_hz=doc.get("frame_rate_hz", 20.0),
        corruption=doc.get("corruption"),
        version=version,  # type: ignore[arg-type]
    )


def serialize_frame(record: FrameLogRecord) -> str:
    feats = [{
        "id": int(f.feature_id),
        "lm": int(f.landmark_id),
        "r": [float(x) for x in np.asarray(f.residual).ravel()],
        "J": [float(x) for x in np.asarray(f.J).ravel()],
        "cov": [float(x) for x in np.asarray(f.sigma_world).ravel()],
        "flags": int(f.flags),
    } for f in record.features]
    doc = {
        "record": "frame",
        "frame_id": int(record.frame_id),
        "t": float(record.timestamp),
        "lambda": float(record.lambda_lm),
        "iters": int(record.iterations),
        "converged": bool(record.converged),
        "degenerate": bool(record.degenerate),
        "pose_error_m": (None if record.pose_error_m is None
                         else float(record.pose_error_m)),
        "n": len(feats),
        "features": feats,
    }
    return json.dumps(doc)


def _load_json(line: str, line_number: int | None) -> dict:
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecordError(f"bad JSON: {exc.msg}", line_number)
    if not isinstance(doc, dict):
        raise MalformedRecordError("record is not an object", line_number)
    return doc


def parse_frame(line: str, line_number: int | None = None) -> FrameLogRecord:
    doc = _load_json(line, line_number)
    if doc.get("record") != "frame":
        raise MalformedRecordError(
            f"expected frame record, got {doc.get('record')!r}", line_number)
    try:
        features = []
        for f in doc.get("features", []):
            cov = _check_symmetric(
                np.array(f["cov"], dtype=np.float64).reshape(3, 3),
                line_number)
            features.append(FeatureEntry(
                feature_id=int(f["id"]),
                landmark_id=int(f.get("lm", -1)),
                residual=np.array(f["r"], dtype=np.float64).reshape(2),
                J=np.array(f["J"], dtype=np.float64).reshape(2, 3),
                sigma_world=cov,
                flags=int(f.get("flags", 0)),
            ))
        return FrameLogRecord(
            frame_id=int(doc["frame_id"]),
            timestamp=float(doc["t"]),
            lambda_lm=float(doc.get("lambda", 0.0)),
            iterations=int(doc.get("iters", 0)),
            converged=bool(doc.get("converged", True)),
            features=features,
            pose_error_m=doc.get("pose_error_m"),
            degenerate=bool(doc.get("degenerate", False)),
        )
    except AsymmetricMatrixError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise MalformedRecordError(f"bad frame record: {exc!r}", line_number)


def serialize_hessian(record: HessianRecord) -> str:
    doc = {
        "record": "hessian",
        "frame_id": int(record.frame_id),
        "lambda": float(record.lambda_lm),
        "pose_dim": int(record.pose_dim),
        "Hpp": [float(x) for x in record.H_pp.ravel()],
        "Bt": [float(x) for x in record.Bt.ravel()],
        "Hll": [float(x) for x in record.H_ll.ravel()],
        "landmarks": [int(x) for x in record.landmark_ids],
    }
    return json.dumps(doc)


def parse_hessian(line: str, line_number: int | None = None
                  ) -> HessianRecord:
    doc = _load_json(line, line_number)
    if doc.get("record") != "hessian":
        raise MalformedRecordError("expected hessian record", line_number)
    try:
        P = int(doc["pose_dim"])
        lm = np.array(doc["landmarks"], dtype=np.int64)
        L = len(lm)
        H_pp = _check_symmetric(
            np.array(doc["Hpp"], dtype=np.float64).reshape(P, P),
            line_number)
        Bt = np.array(doc["Bt"], dtype=np.float64).reshape(L, 3, P)
        H_ll = np.array(doc["Hll"], dtype=np.float64).reshape(L, 3, 3)
        for i in range(L):
            _check_symmetric(H_ll[i], line_number)
        return HessianRecord(int(doc["frame_id"]), float(doc["lambda"]),
                             P, H_pp, Bt, H_ll, lm)
    except AsymmetricMatrixError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise MalformedRecordError(f"bad hessian record: {exc!r}",
                                   line_number)


class FrameLogWriter:
    def __init__(self, fp: IO[str], header: LogHeader):
        self.fp = fp
        self.fp.write(serialize_header(header) + "\n")

    def write_frame(self, record: FrameLogRecord) -> None:
        self.fp.write(serialize_frame(record) + "\n")

    def write_hessian(self, record: HessianRecord) -> None:
        self.fp.write(serialize_hessian(record) + "\n")


def read_framelog(fp: IO[str]) -> tuple[LogHeader, Iterator]:
    """Header plus an iterator of (kind, record) pairs."""
    first = fp.readline()
    if not first.strip():
        raise MalformedRecordError("empty frame log", 1)
    header = parse_header(first.strip(), 1)

    def records():
        for line_number, line in enumerate(fp, start=2):
            line = line.strip()
            if not line:
                continue
            doc = _load_json(line, line_number)
            kind = doc.get("record")
            if kind == "frame":
                yield "frame", parse_frame(line, line_number)
            elif kind == "hessian":
                yield "hessian", parse_hessian(line, line_number)
            else:
                # unknown record kinds are skipped (forward compatibility)
                continue
    return header, records()


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_risk_csv(fp: IO[str], records: list[RiskRecord],
                   threshold: float | None = None) -> None:
    fp.write(f"# {SCHEMA_RISK} v{VERSION[0]}.{VERSION[1]}"
             f" threshold={'' if threshold is None else repr(float(threshold))}\n")
    writer = csv.writer(fp, lineterminator="\n")
    writer.writerow(RISK_COLUMNS)
    for r in records:
        writer.writerow([
            _fmt(r.frame_id), _fmt(r.t), _fmt(r.sigma_bar),
            _fmt(r.residual_bar), _fmt(r.kappa_bar), _fmt(r.n_features),
            _fmt(r.r_raw), _fmt(r.r_smooth), _fmt(r.r_dot), _fmt(r.margin),
            _fmt(r.trend), _fmt(r.saturated), _fmt(r.dt),
            _fmt(r.outlier_ratio), _fmt(r.sigma_term),
            _fmt(r.residual_term), _fmt(r.kappa_term),
        ])


def read_risk_csv(fp: IO[str]) -> dict[str, np.ndarray]:
    """Columns of a risk CSV as float arrays (plus the int/bool ones)."""
    head = fp.readline()
    if not head.startswith(f"# {SCHEMA_RISK} v{VERSION[0]}"):
        raise MalformedRecordError("missing or incompatible risk CSV header",
                                   1)
    reader = csv.reader(fp)
    names = next(reader)
    cols: dict[str, list] = {n: [] for n in names}
    for row in reader:
        for n, v in zip(names, row):
            cols[n].append(v)
    out: dict[str, np.ndarray] = {}
    for n, vals in cols.items():
        if n in ("frame_id", "n_features"):
            out[n] = np.array([int(v) for v in vals], dtype=np.int64)
        elif n in ("trend", "saturated"):
            out[n] = np.array([v == "1" for v in vals], dtype=bool)
        else:
            out[n] = np.array([float(v) for v in vals], dtype=np.float64)
    return out


def write_calibration(fp: IO[str], threshold: float, quantile: float,
                      n_samples: int, risk_config,
                      trend_threshold: float | None = None) -> None:
    if trend_threshold is None:
        trend_threshold = risk_config.trend_threshold
    fp.write(f"# {SCHEMA_CALIBRATION} v{VERSION[0]}.{VERSION[1]}\n")
    fp.write(f"threshold = {threshold!r}\n")
    fp.write(f"quantile = {quantile!r}\n")
    fp.write(f"n_samples = {n_samples}\n")
    fp.write(f"lambda_weight = {risk_config.lambda_weight!r}\n")
    fp.write(f"clamp = {risk_config.clamp!r}\n")
    fp.write(f"norm_window = {risk_config.norm_window}\n")
    fp.write(f"warmup_samples = {risk_config.warmup_samples}\n")
    fp.write(f"smooth_window = {risk_config.smooth_window}\n")
    fp.write(f"trend_frames = {risk_config.trend_frames}\n")
    fp.write(f"trend_threshold = {trend_threshold!r}\n")
    fp.write(f"min_features = {risk_config.min_features}\n")


def read_calibration(fp: IO[str]) -> dict[str, float]:
    head = fp.readline()
    if not head.startswith(f"# {SCHEMA_CALIBRATION} v{VERSION[0]}"):
        raise MalformedRecordError("missing calibration header", 1)
    out: dict[str, float] = {}
    for i, line in enumerate(fp, start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise MalformedRecordError("expected key = value", i)
        key, _, val = line.partition("=")
        out[key.strip()] = float(val.strip())
    if "threshold" not in out:
        raise MalformedRecordError("calibration missing threshold", None)
    return out


def is_nan(x: float) -> bool:
    return isinstance(x, float) and math.isnan(x)
