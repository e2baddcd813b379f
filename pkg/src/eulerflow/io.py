"""Text formats for sequences, flows, tracks, reports and run configs.

Reals are written with 17 significant digits, which round-trips float64
exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .geom import FlowVectors, FrameSequence, PointCloud
from .ode import Trajectory

MANIFEST_NAME = "manifest.json"


def fmt_real(x: float) -> str:
    return format(float(x), ".17g")


@dataclass
class SequenceManifest:
    name: str
    frame_count: int
    frame_interval_s: float
    frame_files: list[str]
    has_gt: bool
    has_classes: bool

    def __post_init__(self):
        if len(self.frame_files) != self.frame_count:
            raise ValueError(f"manifest lists {len(self.frame_files)} files for {self.frame_count} frames")

    def to_json(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "frame_count": self.frame_count,
                "frame_interval_s": self.frame_interval_s,
                "frame_files": self.frame_files,
                "has_gt": self.has_gt,
                "has_classes": self.has_classes,
            },
            indent=2,
        ) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SequenceManifest":
        data = json.loads(text)
        try:
            return cls(
                name=str(data["name"]),
                frame_count=int(data["frame_count"]),
                frame_interval_s=float(data["frame_interval_s"]),
                frame_files=[str(f) for f in data["frame_files"]],
                has_gt=bool(data["has_gt"]),
                has_classes=bool(data["has_classes"]),
            )
        except KeyError as exc:
            raise ValueError(f"manifest missing field {exc}") from None


def _frame_header(has_gt: bool, has_classes: bool) -> list[str]:
    cols = ["x", "y", "z"]
    if has_gt:
        cols += ["fx", "fy", "fz"]
    if has_classes:
        cols += ["class_id", "dynamic"]
    return cols


def write_frame(cloud: PointCloud, path, has_gt: bool, has_classes: bool) -> None:
    lines = [",".join(_frame_header(has_gt, has_classes))]
    dynamic = cloud.is_dynamic
    if has_classes and dynamic is None:
        dynamic = np.zeros(len(cloud), dtype=bool)
    for i, p in enumerate(cloud.points):
        row = [fmt_real(v) for v in p]
        if has_gt:
            row += [fmt_real(v) for v in cloud.gt_flow[i]]
        if has_classes:
            row += [str(int(cloud.class_id[i])), "1" if dynamic[i] else "0"]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_frame(path, frame_index: int, timestamp: float) -> PointCloud:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError(f"{path}: empty frame file")
    header = text[0].strip().split(",")
    has_gt = "fx" in header
    has_classes = "class_id" in header
    if header != _frame_header(has_gt, has_classes):
        raise ValueError(f"{path}: unexpected header {text[0]!r}")
    rows = [line.split(",") for line in text[1:] if line.strip()]
    if any(len(r) != len(header) for r in rows):
        raise ValueError(f"{path}: ragged rows")
    width = len(header)
    table = np.array(rows, dtype=object).reshape(-1, width)
    points = table[:, 0:3].astype(np.float64)
    gt = table[:, 3:6].astype(np.float64) if has_gt else None
    cls = dyn = None
    if has_classes:
        c = 6 if has_gt else 3
        cls = table[:, c].astype(np.int64)
        dyn = table[:, c + 1].astype(np.int64).astype(bool)
    return PointCloud(points, frame_index=frame_index, timestamp=timestamp, gt_flow=gt, class_id=cls, is_dynamic=dyn)


def save_sequence(seq: FrameSequence, out_dir, name: str = "sequence") -> SequenceManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(seq) - 1)))
    files = [f"frame_{i:0{width}d}.csv" for i in range(len(seq))]
    manifest = SequenceManifest(name, len(seq), float(seq.frame_interval), files, seq.has_gt, seq.has_classes)
    for cloud, fname in zip(seq.frames, files):
        write_frame(cloud, out / fname, manifest.has_gt, manifest.has_classes)
    (out / MANIFEST_NAME).write_text(manifest.to_json())
    return manifest


def load_sequence(seq_dir) -> FrameSequence:
    root = Path(seq_dir)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {root}")
    manifest = SequenceManifest.from_json(path.read_text())
    frames = []
    for i, fname in enumerate(manifest.frame_files):
        fpath = root / fname
        if not fpath.exists():
            raise FileNotFoundError(f"manifest references missing frame file {fpath}")
        frames.append(read_frame(fpath, i, i * manifest.frame_interval_s))
    return FrameSequence(frames, manifest.frame_interval_s)


def write_flow(flow: FlowVectors, path) -> None:
    lines = ["point_id,fx,fy,fz"]
    for i, r in enumerate(flow.residuals):
        lines.append(f"{i},{fmt_real(r[0])},{fmt_real(r[1])},{fmt_real(r[2])}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_flow(path, source_frame: int = 0, target_frame: int = 1) -> FlowVectors:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "point_id,fx,fy,fz":
        raise ValueError(f"{path}: not a flow file")
    rows = [line.split(",") for line in text[1:] if line.strip()]
    res = np.array([[float(v) for v in r[1:4]] for r in rows]).reshape(-1, 3)
    return FlowVectors(res, source_frame, target_frame)


def read_points(path) -> np.ndarray:
    """Points file: header ``x,y,z`` then one row per point."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip().split(",")[:3] != ["x", "y", "z"]:
        raise ValueError(f"{path}: points file must start with an x,y,z header")
    rows = [line.split(",")[:3] for line in text[1:] if line.strip()]
    return np.array([[float(v) for v in r] for r in rows], dtype=np.float64).reshape(-1, 3)


def write_points(points, path) -> None:
    lines = ["x,y,z"] + [",".join(fmt_real(v) for v in p) for p in np.asarray(points).reshape(-1, 3)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_tracks(tracks: Sequence[Trajectory], path) -> None:
    lines = ["frame,point_id,x,y,z"]
    for pid, tr in enumerate(tracks):
        for frame, p in zip(tr.frames, tr.positions):
            lines.append(f"{frame},{pid},{fmt_real(p[0])},{fmt_real(p[1])},{fmt_real(p[2])}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_tracks(path) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """``point_id -> (frames, positions)`` in file order."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "frame,point_id,x,y,z":
        raise ValueError(f"{path}: not a track file")
    out: dict[int, tuple[list, list]] = {}
    for line in text[1:]:
        if not line.strip():
            continue
        f, pid, x, y, z = line.split(",")
        frames, pos = out.setdefault(int(pid), ([], []))
        frames.append(int(f))
        pos.append((float(x), float(y), float(z)))
    return {k: (np.array(f), np.array(p)) for k, (f, p) in out.items()}


def write_kv(pairs: Iterable[tuple[str, object]], path) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in pairs))


def read_kv(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_optional_real(value: str) -> Optional[float]:
    return None if value == "absent" else float(value)
