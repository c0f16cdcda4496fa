"""Keypoint frame files, fit files and OBJ meshes.

Frame file layout (JSON)::

    {"camera": {"fx": .., "fy": .., "cx": .., "cy": ..},      # optional default
     "frames": [
        {"frame_id": 0,
         "camera": {...},                                      # optional override
         "keypoints": [{"name": "pelvis", "x": .., "y": .., "z": ..,
                        "confidence": .., "u": .., "v": ..}, ...]}]}

Positions are metres in camera space, ``u``/``v`` are pixels.  Keypoints are
matched by name, so their order in the file is free.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .articulate import FitState, KeypointSet
from .errors import IoError, ParseError, UnknownKeypointName
from .geom3d import CameraIntrinsics
from .model import Pose

FIT_FORMAT = "kama-fit/1"
FRAMES_FORMAT = "kama-frames/1"


@dataclass(frozen=True, eq=False)
class FrameRecord:
    frame_id: int
    keypoints: KeypointSet
    camera: Optional[CameraIntrinsics] = None


def _read_json(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"{where}: expected a number, got {value!r}")
    if not math.isfinite(value):
        raise ParseError(f"{where}: value must be finite")
    return float(value)


def _camera(doc, where: str) -> Optional[CameraIntrinsics]:
    if doc is None:
        return None
    if not isinstance(doc, dict):
        raise ParseError(f"{where}: camera must be an object")
    try:
        vals = {k: _number(doc[k], f"{where}.{k}") for k in ("fx", "fy", "cx", "cy")}
    except KeyError as exc:
        raise ParseError(f"{where}: camera is missing {exc}") from exc
    try:
        return CameraIntrinsics(**vals)
    except ValueError as exc:
        raise ParseError(f"{where}: {exc}") from exc


def _names(model_or_names) -> Sequence[str]:
    tree = getattr(model_or_names, "tree", None)
    return tree.keypoint_names if tree is not None else tuple(model_or_names)


def parse_frames(doc, model_or_names, source: str = "<frames>") -> list[FrameRecord]:
    names = _names(model_or_names)
    index = {n: i for i, n in enumerate(names)}
    K = len(names)
    if not isinstance(doc, dict) or not isinstance(doc.get("frames"), list):
        raise ParseError(f"{source}: expected an object with a 'frames' list")
    default_cam = _camera(doc.get("camera"), f"{source}: camera")
    records = []
    seen = set()
    for i, fr in enumerate(doc["frames"]):
        where = f"{source}: frames[{i}]"
        if not isinstance(fr, dict):
            raise ParseError(f"{where}: frame must be an object")
        fid = fr.get("frame_id", i)
        if isinstance(fid, bool) or not isinstance(fid, int):
            raise ParseError(f"{where}: frame_id must be an integer, got {fid!r}")
        where = f"{source}: frame {fid}"
        if fid in seen:
            raise ParseError(f"{where}: duplicate frame_id")
        seen.add(fid)
        kps = fr.get("keypoints")
        if not isinstance(kps, list):
            raise ParseError(f"{where}: 'keypoints' must be a list")
        if len(kps) != K:
            raise ParseError(f"{where}: expected {K} keypoints, found {len(kps)}")
        pos = np.zeros((K, 3))
        conf = np.zeros(K)
        uv = np.zeros((K, 2))
        has_uv = []
        filled = [False] * K
        for j, kp in enumerate(kps):
            kw = f"{where}, keypoints[{j}]"
            if not isinstance(kp, dict):
                raise ParseError(f"{kw}: keypoint must be an object")
            name = kp.get("name")
            if name not in index:
                raise UnknownKeypointName(f"{kw}: unknown keypoint name {name!r}")
            k = index[name]
            if filled[k]:
                raise ParseError(f"{kw}: keypoint {name!r} appears twice")
            filled[k] = True
            try:
                pos[k] = [_number(kp[a], f"{kw}.{a}") for a in "xyz"]
                c = _number(kp["confidence"], f"{kw}.confidence")
            except KeyError as exc:
                raise ParseError(f"{kw}: missing field {exc}") from exc
            if not 0.0 <= c <= 1.0:
                raise ParseError(f"{kw}.confidence: {c} is outside [0, 1]")
            conf[k] = c
            present = ("u" in kp, "v" in kp)
            if present[0] != present[1]:
                raise ParseError(f"{kw}: 'u' and 'v' must be given together")
            has_uv.append(present[0])
            if present[0]:
                uv[k] = [_number(kp["u"], f"{kw}.u"), _number(kp["v"], f"{kw}.v")]
        if any(has_uv) and not all(has_uv):
            raise ParseError(f"{where}: either every keypoint or none carries u, v")
        cam = _camera(fr["camera"], f"{where}.camera") if "camera" in fr else default_cam
        records.append(FrameRecord(fid, KeypointSet(pos, conf, uv if all(has_uv) else None), cam))
    return records


def load_frames(path, model_or_names) -> list[FrameRecord]:
    """Parse a frame file; keypoint names are resolved against the model."""
    return parse_frames(_read_json(path), model_or_names, str(path))


def frames_to_dict(records: Sequence[FrameRecord], names: Sequence[str]) -> dict:
    frames = []
    for r in records:
        kps = []
        for k, n in enumerate(names):
            entry = {"name": n, "x": float(r.keypoints.positions[k, 0]),
                     "y": float(r.keypoints.positions[k, 1]), "z": float(r.keypoints.positions[k, 2]),
                     "confidence": float(r.keypoints.confidence[k])}
            if r.keypoints.projected_2d is not None:
                entry["u"] = float(r.keypoints.projected_2d[k, 0])
                entry["v"] = float(r.keypoints.projected_2d[k, 1])
            kps.append(entry)
        fr = {"frame_id": int(r.frame_id), "keypoints": kps}
        if r.camera is not None:
            c = r.camera
            fr["camera"] = {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy}
        frames.append(fr)
    return {"format": FRAMES_FORMAT, "frames": frames}


def write_frames(records: Sequence[FrameRecord], names: Sequence[str], path) -> None:
    _write_text(path, json.dumps(frames_to_dict(records, names), indent=1) + "\n")


# Fits ---------------------------------------------------------------------

def fits_to_dict(states: Sequence[FitState], frame_ids: Sequence[int] | None = None) -> dict:
    if frame_ids is None:
        frame_ids = range(len(states))
    frames = []
    for fid, st in zip(frame_ids, states):
        frames.append({
            "frame_id": int(fid),
            "theta": st.pose.axis_angle().tolist(),
            "beta": [float(b) for b in st.beta],
            "s": float(st.scale),
            "t": [float(c) for c in st.translation],
            "per_joint_source": list(st.per_joint_source),
        })
    return {"format": FIT_FORMAT, "frames": frames}


def write_fit(states: Sequence[FitState], path, frame_ids: Sequence[int] | None = None) -> None:
    """Write per-frame fits.  Floats are written with full precision, so the
    output is byte-identical for identical inputs and reloads exactly."""
    if frame_ids is not None and len(frame_ids) != len(states):
        raise ValueError("frame_ids and states differ in length")
    _write_text(path, json.dumps(fits_to_dict(states, frame_ids), indent=1) + "\n")


def _vector(value, n, where):
    if not isinstance(value, list) or len(value) != n:
        raise ParseError(f"{where}: expected a list of {n} numbers")
    return [_number(v, f"{where}[{i}]") for i, v in enumerate(value)]


def parse_fits(doc, source: str = "<fits>") -> tuple[list[int], list[FitState]]:
    if not isinstance(doc, dict) or not isinstance(doc.get("frames"), list):
        raise ParseError(f"{source}: expected an object with a 'frames' list")
    ids, states = [], []
    for i, fr in enumerate(doc["frames"]):
        where = f"{source}: frames[{i}]"
        if not isinstance(fr, dict):
            raise ParseError(f"{where}: frame must be an object")
        try:
            fid = fr["frame_id"]
            theta = fr["theta"]
            if not isinstance(theta, list) or not theta:
                raise ParseError(f"{where}.theta: expected a non-empty list of 3-vectors")
            rv = np.array([_vector(r, 3, f"{where}.theta[{j}]") for j, r in enumerate(theta)])
            beta = fr["beta"]
            if not isinstance(beta, list):
                raise ParseError(f"{where}.beta: expected a list")
            beta = np.array(_vector(beta, len(beta), f"{where}.beta"))
            s = _number(fr["s"], f"{where}.s")
            t = np.array(_vector(fr["t"], 3, f"{where}.t"))
            src = fr.get("per_joint_source", [])
        except KeyError as exc:
            raise ParseError(f"{where}: missing field {exc}") from exc
        if isinstance(fid, bool) or not isinstance(fid, int):
            raise ParseError(f"{where}.frame_id: expected an integer")
        if not isinstance(src, list) or not all(isinstance(x, str) for x in src):
            raise ParseError(f"{where}.per_joint_source: expected a list of strings")
        try:
            state = FitState(Pose.from_axis_angle(rv), beta, s, t, tuple(src))
        except ValueError as exc:
            raise ParseError(f"{where}: {exc}") from exc
        ids.append(fid)
        states.append(state)
    return ids, states


def load_fit(path) -> list[FitState]:
    return parse_fits(_read_json(path), str(path))[1]


def load_fit_with_ids(path) -> tuple[list[int], list[FitState]]:
    return parse_fits(_read_json(path), str(path))


# OBJ ----------------------------------------------------------------------

def write_obj(vertices, faces, path) -> None:
    v = np.asarray(vertices, dtype=float)
    f = np.asarray(faces, dtype=int)
    if v.ndim != 2 or v.shape[1] != 3 or f.ndim != 2 or f.shape[1] != 3:
        raise ValueError("vertices must be (V, 3) and faces (F, 3)")
    if f.size and (f.min() < 0 or f.max() >= len(v)):
        raise ValueError("face index out of range")
    lines = [f"v {x:.9f} {y:.9f} {z:.9f}" for x, y, z in v]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in f]
    _write_text(path, "\n".join(lines) + "\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Minimal OBJ reader: ``v`` and triangular ``f`` records, other lines ignored.

    Face entries may use the ``i/j/k`` form; negative indices are relative.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    verts, faces = [], []
    for ln, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(c) for c in parts[1:4]])
                if len(parts) < 4:
                    raise ValueError("vertex needs three coordinates")
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise ValueError("only triangles are supported")
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                if any(not 0 <= i < len(verts) for i in idx):
                    raise ValueError("face index out of range")
                faces.append(idx)
        except ValueError as exc:
            raise ParseError(f"{path}:{ln}: {exc}") from exc
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=int).reshape(-1, 3)
