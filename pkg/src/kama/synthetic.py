"""Procedural humanoid with the same structure as an SMPL-style body model.

The mesh is one closed capsule per bone.  Joint-centre keypoints are regressed
from the ring of vertices that sits exactly on the joint, so they follow the
joint under any pose; face and foot keypoints are single surface vertices that
are rigidly attached to one joint.
"""
from __future__ import annotations

import copy

import numpy as np

from .errors import InvalidSpec
from .geom3d import perpendicular_axis
from .model import NUM_BETAS, KinematicTree, SkinnedModel

BLEND_FRACTION = 0.25
SHAPE_GAIN = 0.15
AROUND = 16
CAP_RINGS = 2


def _mirror(entry: dict) -> dict:
    out = copy.deepcopy(entry)
    swap = lambda s: None if s is None else ("r_" + s[2:] if s.startswith("l_") else s)
    out["name"] = swap(out["name"])
    out["parent"] = swap(out.get("parent"))
    for key in ("position", "tip"):
        if out.get(key) is not None:
            out[key] = [-out[key][0]] + list(out[key][1:])
    site = out.get("site")
    if site:
        for key in ("joint", "child", "surface"):
            if key in site:
                site[key] = swap(site[key])
        if "direction" in site:
            site["direction"] = [-site["direction"][0]] + list(site["direction"][1:])
    if "map" in out:
        out["map"] = swap(out["map"])
    return out


def _with_right(entries: list[dict]) -> list[dict]:
    out = []
    for e in entries:
        out.append(e)
        if e["name"].startswith("l_"):
            out.append(_mirror(e))
    return out


_JOINTS = _with_right([
    {"name": "pelvis", "parent": None, "position": [0.0, 0.95, 0.0], "radius": 0.11},
    {"name": "l_hip", "parent": "pelvis", "position": [0.09, 0.87, 0.0], "radius": 0.09},
    {"name": "spine1", "parent": "pelvis", "position": [0.0, 1.06, -0.01], "radius": 0.12},
    {"name": "l_knee", "parent": "l_hip", "position": [0.10, 0.50, 0.015], "radius": 0.07},
    {"name": "spine2", "parent": "spine1", "position": [0.0, 1.18, 0.0], "radius": 0.12},
    {"name": "l_ankle", "parent": "l_knee", "position": [0.11, 0.09, -0.02], "radius": 0.05},
    {"name": "spine3", "parent": "spine2", "position": [0.0, 1.31, 0.01], "radius": 0.13},
    {"name": "l_foot", "parent": "l_ankle", "position": [0.12, 0.025, 0.10], "radius": 0.04,
     "tip": [0.125, 0.02, 0.19]},
    {"name": "neck", "parent": "spine3", "position": [0.0, 1.50, -0.01], "radius": 0.05},
    {"name": "l_collar", "parent": "spine3", "position": [0.07, 1.42, 0.0], "radius": 0.06},
    {"name": "head", "parent": "neck", "position": [0.0, 1.58, 0.01], "radius": 0.05,
     "tip": [0.0, 1.80, 0.02]},
    {"name": "l_shoulder", "parent": "l_collar", "position": [0.18, 1.42, -0.01], "radius": 0.055},
    {"name": "l_elbow", "parent": "l_shoulder", "position": [0.36, 1.20, -0.045], "radius": 0.045},
    {"name": "l_wrist", "parent": "l_elbow", "position": [0.52, 0.99, 0.005], "radius": 0.037},
    {"name": "l_hand", "parent": "l_wrist", "position": [0.58, 0.915, 0.01], "radius": 0.03,
     "tip": [0.64, 0.84, 0.015]},
])

# head capsule is wider than the neck joint radius suggests
_SEGMENT_RADIUS_OVERRIDE = {("head", None): 0.095}

_KEYPOINTS = _with_right([
    {"name": "pelvis", "parent": None, "site": {"joint": "pelvis"}, "map": "pelvis"},
    {"name": "l_hip", "parent": "pelvis", "site": {"joint": "l_hip"}, "map": "l_hip"},
    {"name": "spine", "parent": "pelvis", "site": {"joint": "spine2"}, "map": "spine2"},
    {"name": "l_knee", "parent": "l_hip", "site": {"joint": "l_knee"}, "map": "l_knee"},
    {"name": "neck", "parent": "spine", "site": {"joint": "neck"}, "map": "neck"},
    {"name": "l_shoulder", "parent": "spine", "site": {"joint": "l_shoulder"}, "map": "l_shoulder"},
    {"name": "l_ankle", "parent": "l_knee", "site": {"joint": "l_ankle"}, "map": "l_ankle"},
    {"name": "l_elbow", "parent": "l_shoulder", "site": {"joint": "l_elbow"}, "map": "l_elbow"},
    {"name": "nose", "parent": "neck", "map": "head",
     "site": {"surface": "head", "along": 0.4, "direction": [0.0, 0.0, 1.0]}},
    {"name": "l_eye", "parent": "neck", "map": None,
     "site": {"surface": "head", "along": 0.6, "direction": [0.4, 0.0, 1.0]}},
    {"name": "l_ear", "parent": "neck", "map": None,
     "site": {"surface": "head", "along": 0.5, "direction": [1.0, 0.0, -0.1]}},
    {"name": "l_wrist", "parent": "l_elbow", "site": {"joint": "l_wrist"}, "map": "l_wrist"},
    {"name": "l_heel", "parent": "l_ankle", "map": None,
     "site": {"surface": "l_ankle", "child": "l_foot", "along": 0.3, "direction": [0.0, -0.6, -1.0]}},
    {"name": "l_bigtoe", "parent": "l_ankle", "map": "l_foot",
     "site": {"surface": "l_foot", "along": 0.6, "direction": [-1.0, 0.0, 0.0]}},
    {"name": "l_smalltoe", "parent": "l_ankle", "map": None,
     "site": {"surface": "l_foot", "along": 0.6, "direction": [1.0, 0.0, 0.0]}},
])

_EVAL = ["l_ankle", "r_ankle", "l_knee", "r_knee", "l_hip", "r_hip", "l_wrist", "r_wrist",
         "l_elbow", "r_elbow", "l_shoulder", "r_shoulder", "neck", "nose"]

_TORSO = ["pelvis", "spine1", "spine2", "spine3"]
_ARMS = [s + j for s in ("l_", "r_") for j in ("collar", "shoulder", "elbow", "wrist", "hand")]
_LEGS = [s + j for s in ("l_", "r_") for j in ("hip", "knee", "ankle")]

# (owning joints, per-axis gain on the radial direction)
_SHAPE_FIELDS = [
    {"joints": "*", "axes": [1.0, 1.0, 1.0]},
    {"joints": _TORSO, "axes": [1.0, 1.0, 1.0]},
    {"joints": _TORSO, "axes": [0.3, 0.3, 1.0]},
    {"joints": _TORSO, "axes": [1.0, 0.3, 0.3]},
    {"joints": _ARMS, "axes": [1.0, 1.0, 1.0]},
    {"joints": ["l_shoulder", "r_shoulder"], "axes": [1.0, 1.0, 1.0]},
    {"joints": _LEGS, "axes": [1.0, 1.0, 1.0]},
    {"joints": ["l_hip", "r_hip"], "axes": [1.0, 1.0, 1.0]},
    {"joints": ["neck", "head"], "axes": [1.0, 1.0, 1.0]},
    {"joints": ["l_ankle", "r_ankle", "l_foot", "r_foot"], "axes": [1.0, 1.0, 1.0]},
]

DEFAULT_HUMANOID = {
    "joints": _JOINTS,
    "keypoints": _KEYPOINTS,
    "eval_keypoints": _EVAL,
    "shape_fields": _SHAPE_FIELDS,
    "segment_radius": {f"{j}:{c}": r for (j, c), r in _SEGMENT_RADIUS_OVERRIDE.items()},
}


def _topological(entries: list[dict], what: str) -> list[dict]:
    names = [e["name"] for e in entries]
    if len(set(names)) != len(names):
        raise InvalidSpec(f"duplicate {what} names")
    by_name = {e["name"]: e for e in entries}
    roots = [e for e in entries if e.get("parent") is None]
    if len(roots) != 1:
        raise InvalidSpec(f"{what} hierarchy needs exactly one root, found {len(roots)}")
    for e in entries:
        p = e.get("parent")
        if p is not None and p not in by_name:
            raise InvalidSpec(f"{what} '{e['name']}' has unknown parent '{p}'")
    ordered, placed = [], set()
    while len(ordered) < len(entries):
        progress = False
        for e in entries:
            if e["name"] in placed:
                continue
            p = e.get("parent")
            if p is None or p in placed:
                ordered.append(e)
                placed.add(e["name"])
                progress = True
        if not progress:
            stuck = sorted(set(names) - placed)
            raise InvalidSpec(f"{what} hierarchy contains a cycle through {stuck}")
    return ordered


class _MeshBuilder:
    def __init__(self):
        self.vertices: list[np.ndarray] = []
        self.faces: list[tuple[int, int, int]] = []
        self.owner: list[int] = []
        self.along: list[float] = []
        self.radial: list[np.ndarray] = []
        self.radius: list[float] = []
        self.segment: list[int] = []
        self.in_cylinder: list[bool] = []

    def _ring(self, centre, e1, e2, r, owner, along, seg, cyl, rad_scale):
        start = len(self.vertices)
        for m in range(AROUND):
            phi = 2.0 * np.pi * m / AROUND
            d = np.cos(phi) * e1 + np.sin(phi) * e2
            self.vertices.append(centre + r * d)
            self.owner.append(owner)
            self.along.append(along)
            self.radial.append(d * rad_scale)
            self.radius.append(r)
            self.segment.append(seg)
            self.in_cylinder.append(cyl)
        return start

    def _point(self, p, owner, along, seg, radial):
        self.vertices.append(np.asarray(p, dtype=float))
        self.owner.append(owner)
        self.along.append(along)
        self.radial.append(radial)
        self.radius.append(0.0)
        self.segment.append(seg)
        self.in_cylinder.append(False)
        return len(self.vertices) - 1

    def _stitch(self, a, b):
        for m in range(AROUND):
            n = (m + 1) % AROUND
            self.faces.append((a + m, b + m, b + n))
            self.faces.append((a + m, b + n, a + n))

    def _fan(self, pole, ring, flip):
        for m in range(AROUND):
            n = (m + 1) % AROUND
            self.faces.append((pole, ring + n, ring + m) if flip else (pole, ring + m, ring + n))

    def capsule(self, start, end, r, owner, seg, n_rings):
        axis = end - start
        length = np.linalg.norm(axis)
        u = axis / length
        e1 = perpendicular_axis(u)
        e2 = np.cross(u, e1)
        rings = []
        for c in range(CAP_RINGS, 0, -1):
            psi = c * (0.5 * np.pi) / (CAP_RINGS + 1)
            rings.append(self._ring(start - r * np.sin(psi) * u, e1, e2, r * np.cos(psi),
                                    owner, 0.0, seg, False, 1.0))
        for i in range(n_rings):
            t = i / (n_rings - 1)
            rings.append(self._ring(start + t * axis, e1, e2, r, owner, t, seg, True, 1.0))
        for c in range(1, CAP_RINGS + 1):
            psi = c * (0.5 * np.pi) / (CAP_RINGS + 1)
            rings.append(self._ring(end + r * np.sin(psi) * u, e1, e2, r * np.cos(psi),
                                    owner, 1.0, seg, False, 1.0))
        south = self._point(start - r * u, owner, 0.0, seg, np.zeros(3))
        north = self._point(end + r * u, owner, 1.0, seg, np.zeros(3))
        for a, b in zip(rings[:-1], rings[1:]):
            self._stitch(a, b)
        self._fan(south, rings[0], flip=True)
        self._fan(north, rings[-1], flip=False)
        # ring index of the t = 0 cylinder ring (sits on the joint centre)
        return rings[CAP_RINGS]


def _segments(joints: list[dict], index: dict, radius_override: dict):
    segs = []
    for j, e in enumerate(joints):
        start = np.asarray(e["position"], dtype=float)
        kids = [c for c, ce in enumerate(joints) if ce.get("parent") == e["name"]]
        for c in kids:
            r = radius_override.get(f"{e['name']}:{joints[c]['name']}", joints[c]["radius"])
            segs.append((j, c, start, np.asarray(joints[c]["position"], dtype=float), r))
        if e.get("tip") is not None:
            r = radius_override.get(f"{e['name']}:None", e["radius"])
            segs.append((j, None, start, np.asarray(e["tip"], dtype=float), r))
        if not kids and e.get("tip") is None:
            raise InvalidSpec(f"leaf joint '{e['name']}' needs a 'tip' to close its segment")
    for j, c, a, b, r in segs:
        if np.linalg.norm(b - a) < 1e-6 or not r > 0:
            raise InvalidSpec(f"degenerate segment from joint '{joints[j]['name']}'")
    return segs


def make_synthetic_model(joint_spec: dict | None = None, num_vertices: int = 4000) -> SkinnedModel:
    """Build a skinned humanoid from a joint/keypoint description.

    ``joint_spec`` defaults to :data:`DEFAULT_HUMANOID`; ``num_vertices`` is a
    target, the result lands within a few percent of it.  Each capsule keeps
    at least three rings, so the default humanoid never drops below ~3,500
    vertices.
    """
    spec = DEFAULT_HUMANOID if joint_spec is None else joint_spec
    try:
        joints = _topological(list(spec["joints"]), "joint")
        keypoints = _topological(list(spec["keypoints"]), "keypoint")
    except KeyError as exc:
        raise InvalidSpec(f"joint spec is missing {exc}") from exc
    jidx = {e["name"]: i for i, e in enumerate(joints)}
    kidx = {e["name"]: i for i, e in enumerate(keypoints)}
    parents = np.array([-1 if e.get("parent") is None else jidx[e["parent"]] for e in joints])
    positions = np.array([e["position"] for e in joints], dtype=float)
    segs = _segments(joints, jidx, spec.get("segment_radius", {}))

    # rings proportional to segment length, sized to hit the vertex target
    lengths = np.array([np.linalg.norm(b - a) for _, _, a, b, _ in segs])
    fixed = len(segs) * (2 * CAP_RINGS * AROUND + 2)
    ring_budget = max(num_vertices - fixed, 3 * AROUND * len(segs)) / AROUND
    n_rings = np.maximum(3, np.round(lengths / lengths.sum() * ring_budget)).astype(int)

    mesh = _MeshBuilder()
    joint_ring: dict[int, int] = {}
    seg_lookup = {}
    for s, ((j, c, a, b, r), nr) in enumerate(zip(segs, n_rings)):
        ring0 = mesh.capsule(a, b, r, j, s, nr)
        joint_ring.setdefault(j, ring0)
        seg_lookup[(j, c)] = s

    V = len(mesh.vertices)
    J = len(joints)
    verts = np.array(mesh.vertices)
    owner = np.array(mesh.owner)
    along = np.array(mesh.along)
    segment = np.array(mesh.segment)

    weights = np.zeros((V, J))
    for v in range(V):
        j = owner[v]
        child = segs[segment[v]][1]
        wp = 0.5 * max(0.0, 1.0 - along[v] / BLEND_FRACTION) if parents[j] >= 0 else 0.0
        wc = 0.5 * max(0.0, 1.0 - (1.0 - along[v]) / BLEND_FRACTION) if child is not None else 0.0
        weights[v, j] += 1.0 - wp - wc
        if wp:
            weights[v, parents[j]] += wp
        if wc:
            weights[v, child] += wc

    shape_dirs = np.zeros((V, 3, NUM_BETAS))
    fields = spec.get("shape_fields", _SHAPE_FIELDS)
    if len(fields) != NUM_BETAS:
        raise InvalidSpec(f"expected {NUM_BETAS} shape fields, got {len(fields)}")
    bump = np.where(np.array(mesh.in_cylinder), np.sin(np.pi * along) ** 2, 0.0)
    radial = np.array(mesh.radial)
    radius = np.array(mesh.radius)
    for b, fld in enumerate(fields):
        members = set(jidx) if fld["joints"] == "*" else set(fld["joints"])
        unknown = members - set(jidx)
        if unknown:
            raise InvalidSpec(f"shape field {b} names unknown joints {sorted(unknown)}")
        sel = np.array([joints[o]["name"] in members for o in owner])
        gain = (SHAPE_GAIN * bump * radius * sel)[:, None]
        shape_dirs[:, :, b] = gain * radial * np.asarray(fld["axes"], dtype=float)

    K = len(keypoints)
    W = np.zeros((K, V))
    kmap = []
    for k, e in enumerate(keypoints):
        site = e.get("site") or {}
        if "joint" in site:
            if site["joint"] not in jidx:
                raise InvalidSpec(f"keypoint '{e['name']}' sits on unknown joint '{site['joint']}'")
            ring = joint_ring[jidx[site["joint"]]]
            W[k, ring:ring + AROUND] = 1.0 / AROUND
        elif "surface" in site:
            jo = jidx.get(site["surface"])
            ch = site.get("child")
            key = (jo, None if ch is None else jidx.get(ch))
            if key not in seg_lookup:
                raise InvalidSpec(f"keypoint '{e['name']}' references a missing segment")
            s = seg_lookup[key]
            # rigid vertices only, so the site moves exactly with its joint
            cand = np.nonzero((segment == s) & np.array(mesh.in_cylinder) & (weights[:, jo] == 1.0))[0]
            if len(cand) == 0:
                raise InvalidSpec(f"segment for keypoint '{e['name']}' has no rigid vertices")
            d = np.asarray(site["direction"], dtype=float)
            d = d / np.linalg.norm(d)
            score = -np.abs(along[cand] - site.get("along", 0.5)) * 4.0 + radial[cand] @ d
            W[k, cand[int(np.argmax(score))]] = 1.0
        else:
            raise InvalidSpec(f"keypoint '{e['name']}' has no site")
        target = e.get("map")
        if target is not None and target not in jidx:
            raise InvalidSpec(f"keypoint '{e['name']}' maps to unknown joint '{target}'")
        kmap.append((k, None if target is None else jidx[target]))

    kparents = np.array([-1 if e.get("parent") is None else kidx[e["parent"]] for e in keypoints])
    tree = KinematicTree(tuple(jidx), parents, positions, tuple(kidx), kparents, tuple(kmap))
    return SkinnedModel(tree, verts, np.array(mesh.faces), weights, shape_dirs, W,
                        tuple(spec.get("eval_keypoints", ())))
