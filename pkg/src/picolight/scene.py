"""Declarative scene description, its YAML-based text format, validation,
procedural constructors, and compilation into traceable structures.

The text format is a single YAML document with an explicit `version: 1`
key; see docs/scene-format.md.  Parsing tracks source positions so
validation failures can point at the offending entity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import yaml

from . import shapes as shp
from .film import TemporalAxis
from .geometry import cross, normalize

SPEED_OF_LIGHT_PRESETS = {"meters_ns": 0.299792458}

INTEGRATOR_KINDS = ("path", "volpath", "nlos_path")
MATERIAL_TYPES = ("diffuse", "rough_plastic", "polarizer", "mirror")
EMITTER_TYPES = ("area", "point", "pulsed_laser")
SHAPE_TYPES = ("rectangle", "sphere", "mesh", "box")


class SceneError(Exception):
    """Base for scene file problems; formats as the CLI-visible message."""

    def __init__(self, entity, constraint, line=0, col=0):
        self.entity = entity
        self.constraint = constraint
        self.line = line
        self.col = col
        super().__init__(f"scene error @ {line}:{col}: {entity}: {constraint}")


class SceneParseError(SceneError):
    def __init__(self, message, line=0, col=0):
        super().__init__("document", message, line, col)


class SceneValidationError(SceneError):
    pass


# --------------------------------------------------------------------------
# description dataclasses (plain python values only, so == and YAML round
# trips are exact)
# --------------------------------------------------------------------------


@dataclass
class CameraDesc:
    origin: list
    look_at: list
    up: list = field(default_factory=lambda: [0.0, 1.0, 0.0])
    fov_degrees: float = 45.0
    width: int = 64
    height: int = 64


@dataclass
class IntegratorDesc:
    kind: str = "path"
    max_depth: int = 8
    rr_depth: int = 4
    polarized: bool = False


@dataclass
class MaterialDesc:
    id: str
    type: str
    albedo: list | None = None
    roughness: float | None = None
    ior: float | None = None
    transmission_axis_angle: float | None = None
    eta: list | None = None  # mirror: real part per channel
    k: list | None = None  # mirror: imaginary part per channel


@dataclass
class EmitterDesc:
    type: str
    id: str | None = None
    shape: str | None = None  # area: shape id it lives on
    radiance: list | None = None
    position: list | None = None
    intensity: list | None = None
    origin: list | None = None
    target: list | None = None
    power: list | None = None
    pulse_fwhm: float = 0.0


@dataclass
class MediumDesc:
    id: str
    sigma_a: list
    sigma_s: list
    g: float = 0.0
    ior: float = 1.0


@dataclass
class ShapeDesc:
    id: str
    type: str
    material: str | None = None
    interior_medium: str | None = None
    transform: list | None = None  # list of {translate|rotate_x|rotate_y|rotate_z|scale: v}
    # rectangle
    center: list | None = None
    edge_u: list | None = None
    edge_v: list | None = None
    # sphere
    radius: float | None = None
    # mesh
    vertices: list | None = None
    triangles: list | None = None
    # box
    min: list | None = None
    max: list | None = None


@dataclass
class FilmDesc:
    t_start: float
    bin_width: float
    n_bins: int
    gate: list | None = None
    unwarp: bool = False

    def to_axis(self) -> TemporalAxis:
        gate = tuple(self.gate) if self.gate is not None else None
        return TemporalAxis(self.t_start, self.bin_width, self.n_bins, gate, self.unwarp)


@dataclass
class SceneDescription:
    camera: CameraDesc
    film: FilmDesc
    shapes: list
    materials: list = field(default_factory=list)
    emitters: list = field(default_factory=list)
    media: list = field(default_factory=list)
    integrator: IntegratorDesc = field(default_factory=IntegratorDesc)
    speed_of_light: float = 1.0
    version: int = 1

    def to_dict(self) -> dict:
        d = {
            "version": self.version,
            "speed_of_light": self.speed_of_light,
            "camera": _strip(asdict(self.camera)),
            "film": _strip(asdict(self.film)),
            "integrator": _strip(asdict(self.integrator)),
            "shapes": [_strip(asdict(s)) for s in self.shapes],
        }
        if self.materials:
            d["materials"] = [_strip(asdict(m)) for m in self.materials]
        if self.emitters:
            d["emitters"] = [_strip(asdict(e)) for e in self.emitters]
        if self.media:
            d["media"] = [_strip(asdict(m)) for m in self.media]
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def validate(self):
        _validate(self, _Marks({}))
        return self


def _strip(d):
    if isinstance(d, dict):
        return {k: _strip(v) for k, v in d.items() if v is not None}
    if isinstance(d, list):
        return [_strip(v) for v in d]
    return d


# --------------------------------------------------------------------------
# parsing with source positions
# --------------------------------------------------------------------------


class _Marks:
    """Maps key paths like ('materials', 2, 'albedo') to (line, col)."""

    def __init__(self, table):
        self.table = table

    def at(self, *path):
        best = (0, 0)
        for i in range(len(path), -1, -1):
            if tuple(path[:i]) in self.table:
                best = self.table[tuple(path[:i])]
                break
        return best


def _node_to_value(node, marks, path):
    marks[tuple(path)] = (node.start_mark.line + 1, node.start_mark.column + 1)
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = k.value
            out[key] = _node_to_value(v, marks, path + [key])
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_node_to_value(v, marks, path + [i]) for i, v in enumerate(node.value)]
    return yaml.safe_load(yaml.serialize(node)) if False else _scalar(node)


def _scalar(node):
    # resolve scalars with the safe loader's implicit types
    loader = yaml.SafeLoader("")
    tag = loader.resolve(yaml.ScalarNode, node.value, (True, False))
    return loader.construct_object(yaml.ScalarNode(tag, node.value))


def parse_scene(text: str) -> SceneDescription:
    """Parse and fully validate a scene document."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark else 0
        col = mark.column + 1 if mark else 0
        raise SceneParseError(getattr(e, "problem", str(e)) or str(e), line, col) from e
    if node is None:
        raise SceneParseError("empty document")
    if not isinstance(node, yaml.MappingNode):
        raise SceneParseError("top level must be a mapping")
    marks = {}
    data = _node_to_value(node, marks, [])
    return scene_from_dict(data, _Marks(marks))


def scene_from_dict(data: dict, marks: _Marks | None = None) -> SceneDescription:
    marks = marks or _Marks({})

    def need(d, key, entity, path):
        if key not in d:
            raise SceneValidationError(entity, f"missing required key '{key}'", *marks.at(*path))
        return d[key]

    if "version" not in data:
        raise SceneValidationError("document", "missing required key 'version'", *marks.at())
    if data["version"] != 1:
        raise SceneValidationError(
            "document", f"unsupported version {data['version']!r}, expected 1", *marks.at("version")
        )

    c = data.get("speed_of_light", 1.0)
    if isinstance(c, str):
        if c not in SPEED_OF_LIGHT_PRESETS:
            raise SceneValidationError(
                "speed_of_light", f"unknown preset {c!r}", *marks.at("speed_of_light")
            )
        c = SPEED_OF_LIGHT_PRESETS[c]

    cam_d = need(data, "camera", "document", [])
    camera = _build(CameraDesc, cam_d, "camera", marks, ["camera"])
    film_d = need(data, "film", "document", [])
    filmdesc = _build(FilmDesc, film_d, "film", marks, ["film"])
    integ = _build(IntegratorDesc, data.get("integrator", {}), "integrator", marks, ["integrator"])

    materials = [
        _build(MaterialDesc, m, f"materials[{i}]", marks, ["materials", i])
        for i, m in enumerate(data.get("materials", []))
    ]
    emitters = [
        _build(EmitterDesc, e, f"emitters[{i}]", marks, ["emitters", i])
        for i, e in enumerate(data.get("emitters", []))
    ]
    media = [
        _build(MediumDesc, m, f"media[{i}]", marks, ["media", i])
        for i, m in enumerate(data.get("media", []))
    ]
    shapes_d = need(data, "shapes", "document", [])
    shapes = [
        _build(ShapeDesc, s, f"shapes[{i}]", marks, ["shapes", i])
        for i, s in enumerate(shapes_d)
    ]

    known = {
        "version",
        "speed_of_light",
        "camera",
        "film",
        "integrator",
        "materials",
        "emitters",
        "media",
        "shapes",
    }
    for k in data:
        if k not in known:
            raise SceneValidationError("document", f"unknown key '{k}'", *marks.at(k))

    desc = SceneDescription(
        camera=camera,
        film=filmdesc,
        shapes=shapes,
        materials=materials,
        emitters=emitters,
        media=media,
        integrator=integ,
        speed_of_light=float(c),
        version=1,
    )
    _validate(desc, marks)
    return desc


def _build(cls, d, entity, marks, path):
    if not isinstance(d, dict):
        raise SceneValidationError(entity, "expected a mapping", *marks.at(*path))
    fields = {f for f in cls.__dataclass_fields__}
    for k in d:
        if k not in fields:
            raise SceneValidationError(entity, f"unknown key '{k}'", *marks.at(*path, k))
    try:
        return cls(**d)
    except TypeError as e:
        raise SceneValidationError(entity, str(e), *marks.at(*path)) from e


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------


def _is_vec3(v):
    return (
        isinstance(v, (list, tuple))
        and len(v) == 3
        and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)
    )


def _validate(desc: SceneDescription, marks: _Marks):
    def err(entity, constraint, *path):
        raise SceneValidationError(entity, constraint, *marks.at(*path))

    if desc.speed_of_light <= 0:
        err("speed_of_light", "must be > 0", "speed_of_light")

    cam = desc.camera
    for key in ("origin", "look_at", "up"):
        if not _is_vec3(getattr(cam, key)):
            err("camera", f"{key} must be a 3-vector", "camera", key)
    if not (0.0 < cam.fov_degrees < 180.0):
        err("camera", "fov_degrees must be in (0, 180)", "camera", "fov_degrees")
    if cam.width < 1 or cam.height < 1:
        err("camera", "width and height must be >= 1", "camera")
    if np.allclose(cam.origin, cam.look_at):
        err("camera", "origin and look_at must differ", "camera")
    fwd = np.asarray(cam.look_at, float) - np.asarray(cam.origin, float)
    if np.linalg.norm(np.cross(fwd, np.asarray(cam.up, float))) < 1e-9:
        err("camera", "up must not be parallel to the viewing direction", "camera", "up")

    f = desc.film
    if not f.bin_width > 0:
        err("film", "bin_width must be > 0", "film", "bin_width")
    if f.n_bins < 1:
        err("film", "n_bins must be >= 1", "film", "n_bins")
    if f.gate is not None:
        if len(f.gate) != 2 or not f.gate[0] < f.gate[1]:
            err("film", "gate must be [t_open, t_close] with t_open < t_close", "film", "gate")
        if f.gate[0] < f.t_start or f.gate[1] > f.t_start + f.n_bins * f.bin_width:
            err("film", "gate must lie within the temporal axis", "film", "gate")

    integ = desc.integrator
    if integ.kind not in INTEGRATOR_KINDS:
        err("integrator", f"kind must be one of {INTEGRATOR_KINDS}", "integrator", "kind")
    if integ.max_depth < 1:
        err("integrator", "max_depth must be >= 1", "integrator", "max_depth")
    if integ.rr_depth < 1:
        err("integrator", "rr_depth must be >= 1", "integrator", "rr_depth")

    mat_ids = {}
    for i, m in enumerate(desc.materials):
        if m.id in mat_ids:
            err(f"materials[{i}] '{m.id}'", "duplicate material id", "materials", i)
        mat_ids[m.id] = m
        if m.type not in MATERIAL_TYPES:
            err(f"material '{m.id}'", f"type must be one of {MATERIAL_TYPES}", "materials", i)
        if m.type in ("diffuse", "rough_plastic"):
            if m.albedo is None or not _is_vec3(m.albedo):
                err(f"material '{m.id}'", "albedo must be an RGB triple", "materials", i)
            if not all(0.0 <= a <= 1.0 for a in m.albedo):
                err(
                    f"material '{m.id}'",
                    "albedo components must be in [0, 1]",
                    "materials",
                    i,
                    "albedo",
                )
        if m.type == "rough_plastic":
            if m.roughness is None or not (0.0 < m.roughness <= 1.0):
                err(f"material '{m.id}'", "roughness must be in (0, 1]", "materials", i)
            if m.ior is None or m.ior <= 1.0:
                err(f"material '{m.id}'", "ior must be > 1", "materials", i)
        if m.type == "polarizer" and m.transmission_axis_angle is None:
            err(f"material '{m.id}'", "transmission_axis_angle required", "materials", i)
        if m.type == "mirror":
            if m.eta is None or m.k is None or not (_is_vec3(m.eta) and _is_vec3(m.k)):
                err(f"material '{m.id}'", "mirror needs eta and k RGB triples", "materials", i)

    med_ids = {}
    for i, m in enumerate(desc.media):
        if m.id in med_ids:
            err(f"media[{i}] '{m.id}'", "duplicate medium id", "media", i)
        med_ids[m.id] = m
        for key in ("sigma_a", "sigma_s"):
            v = getattr(m, key)
            if not _is_vec3(v) or any(x < 0 for x in v):
                err(f"medium '{m.id}'", f"{key} must be a nonnegative RGB triple", "media", i)
        if not (-1.0 < m.g < 1.0):
            err(f"medium '{m.id}'", "g must satisfy |g| < 1", "media", i, "g")
        if m.ior < 1.0:
            err(f"medium '{m.id}'", "ior must be >= 1", "media", i, "ior")

    shape_ids = {}
    for i, s in enumerate(desc.shapes):
        if s.id in shape_ids:
            err(f"shapes[{i}] '{s.id}'", "duplicate shape id", "shapes", i)
        shape_ids[s.id] = s
        if s.type not in SHAPE_TYPES:
            err(f"shape '{s.id}'", f"type must be one of {SHAPE_TYPES}", "shapes", i)
        if s.material is not None and s.material not in mat_ids:
            err(f"shape '{s.id}'", f"unresolved material '{s.material}'", "shapes", i, "material")
        if s.material is None and s.interior_medium is None:
            err(f"shape '{s.id}'", "needs a material or an interior_medium", "shapes", i)
        if s.interior_medium is not None and s.interior_medium not in med_ids:
            err(
                f"shape '{s.id}'",
                f"unresolved interior_medium '{s.interior_medium}'",
                "shapes",
                i,
            )
        if s.type == "rectangle":
            for key in ("center", "edge_u", "edge_v"):
                if not _is_vec3(getattr(s, key) or None if getattr(s, key) is None else getattr(s, key)):
                    err(f"shape '{s.id}'", f"rectangle needs 3-vector '{key}'", "shapes", i)
            if np.linalg.norm(np.cross(s.edge_u, s.edge_v)) < 1e-12:
                err(f"shape '{s.id}'", "rectangle edges must not be collinear", "shapes", i)
        elif s.type == "sphere":
            if not _is_vec3(s.center) or s.radius is None or s.radius <= 0:
                err(f"shape '{s.id}'", "sphere needs center and radius > 0", "shapes", i)
        elif s.type == "mesh":
            if not s.vertices or not s.triangles:
                err(f"shape '{s.id}'", "mesh needs vertices and triangles", "shapes", i)
            nv = len(s.vertices)
            for t in s.triangles:
                if len(t) != 3 or any(not (0 <= int(ix) < nv) for ix in t):
                    err(f"shape '{s.id}'", "triangle indices out of range", "shapes", i)
        elif s.type == "box":
            if not _is_vec3(s.min) or not _is_vec3(s.max):
                err(f"shape '{s.id}'", "box needs min and max corners", "shapes", i)
            if not all(a < b for a, b in zip(s.min, s.max)):
                err(f"shape '{s.id}'", "box min must be < max componentwise", "shapes", i)
        if s.transform is not None:
            for op in s.transform:
                if not isinstance(op, dict) or len(op) != 1:
                    err(f"shape '{s.id}'", "transform ops are single-key mappings", "shapes", i)
                key = next(iter(op))
                if key not in ("translate", "rotate_x", "rotate_y", "rotate_z", "scale"):
                    err(f"shape '{s.id}'", f"unknown transform op '{key}'", "shapes", i)

    for i, e in enumerate(desc.emitters):
        name = e.id or f"emitters[{i}]"
        if e.type not in EMITTER_TYPES:
            err(f"emitter '{name}'", f"type must be one of {EMITTER_TYPES}", "emitters", i)
        if e.type == "area":
            if e.shape is None or e.shape not in shape_ids:
                err(f"emitter '{name}'", f"unresolved shape '{e.shape}'", "emitters", i)
            if shape_ids[e.shape].type != "rectangle":
                err(f"emitter '{name}'", "area emitters require a rectangle shape", "emitters", i)
            if e.radiance is None or not _is_vec3(e.radiance) or any(r < 0 for r in e.radiance):
                err(f"emitter '{name}'", "radiance must be a nonnegative RGB triple", "emitters", i)
        elif e.type == "point":
            if not _is_vec3(e.position):
                err(f"emitter '{name}'", "point emitter needs position", "emitters", i)
            if e.intensity is None or not _is_vec3(e.intensity):
                err(f"emitter '{name}'", "point emitter needs RGB intensity", "emitters", i)
        else:  # pulsed_laser
            for key in ("origin", "target", "power"):
                if not _is_vec3(getattr(e, key)):
                    err(f"emitter '{name}'", f"pulsed_laser needs 3-vector '{key}'", "emitters", i)
            if e.pulse_fwhm < 0:
                err(f"emitter '{name}'", "pulse_fwhm must be >= 0", "emitters", i)


# --------------------------------------------------------------------------
# transforms and compilation
# --------------------------------------------------------------------------


def _transform_matrix(ops):
    m = np.eye(4)
    if not ops:
        return m
    for op in ops:
        key, val = next(iter(op.items()))
        t = np.eye(4)
        if key == "translate":
            t[:3, 3] = val
        elif key == "scale":
            s = [val] * 3 if isinstance(val, (int, float)) else val
            t[0, 0], t[1, 1], t[2, 2] = s
        else:
            a = math.radians(val)
            ca, sa = math.cos(a), math.sin(a)
            if key == "rotate_x":
                t[1, 1], t[1, 2], t[2, 1], t[2, 2] = ca, -sa, sa, ca
            elif key == "rotate_y":
                t[0, 0], t[0, 2], t[2, 0], t[2, 2] = ca, sa, -sa, ca
            else:
                t[0, 0], t[0, 1], t[1, 0], t[1, 1] = ca, -sa, sa, ca
        m = t @ m
    return m


def _apply_point(m, p):
    p = np.asarray(p, dtype=np.float64)
    return m[:3, :3] @ p + m[:3, 3]


def _apply_vec(m, v):
    return m[:3, :3] @ np.asarray(v, dtype=np.float64)


def _box_rectangles(mn, mx, m):
    """Six outward-facing rectangle faces (center, edge_u, edge_v)."""
    mn = np.asarray(mn, dtype=np.float64)
    mx = np.asarray(mx, dtype=np.float64)
    c = 0.5 * (mn + mx)
    h = 0.5 * (mx - mn)
    ex = np.array([h[0], 0.0, 0.0])
    ey = np.array([0.0, h[1], 0.0])
    ez = np.array([0.0, 0.0, h[2]])
    faces = [
        (np.array([mx[0], c[1], c[2]]), ey, ez),
        (np.array([mn[0], c[1], c[2]]), ez, ey),
        (np.array([c[0], mx[1], c[2]]), ez, ex),
        (np.array([c[0], mn[1], c[2]]), ex, ez),
        (np.array([c[0], c[1], mx[2]]), ex, ey),
        (np.array([c[0], c[1], mn[2]]), ey, ex),
    ]
    return [(_apply_point(m, fc), _apply_vec(m, eu), _apply_vec(m, ev)) for fc, eu, ev in faces]


@dataclass
class CompiledCamera:
    origin: np.ndarray
    forward: np.ndarray
    right: np.ndarray
    up: np.ndarray
    tan_half_w: float
    tan_half_h: float
    width: int
    height: int

    def generate_rays(self, px, py, u1, u2):
        """Primary ray directions for pixel indices + jitter in [0,1)."""
        sx = ((px + u1) / self.width * 2.0 - 1.0) * self.tan_half_w
        sy = (1.0 - (py + u2) / self.height * 2.0) * self.tan_half_h
        d = self.forward[None, :] + sx[:, None] * self.right[None, :] + sy[:, None] * self.up[None, :]
        return normalize(d)

    def stokes_frame(self, directions):
        """Horizontal polarization reference axis per ray: camera right
        projected perpendicular to propagation."""
        r = self.right[None, :] - np.sum(self.right[None, :] * directions, axis=-1, keepdims=True) * directions
        n = np.sqrt(np.sum(r * r, axis=-1, keepdims=True))
        fallback = np.broadcast_to(self.up, r.shape)
        return np.where(n > 1e-9, r / np.where(n > 0, n, 1.0), fallback)


def compile_camera(cam: CameraDesc) -> CompiledCamera:
    origin = np.asarray(cam.origin, dtype=np.float64)
    forward = normalize(np.asarray(cam.look_at, dtype=np.float64) - origin)
    right = normalize(cross(forward, np.asarray(cam.up, dtype=np.float64)))
    up = cross(right, forward)
    tan_half_w = math.tan(math.radians(cam.fov_degrees) / 2.0)
    tan_half_h = tan_half_w * cam.height / cam.width
    return CompiledCamera(
        origin, forward, right, up, tan_half_w, tan_half_h, cam.width, cam.height
    )


@dataclass
class CompiledAreaEmitter:
    kind: str
    index: int
    radiance: np.ndarray
    center: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    normal: np.ndarray
    area: float
    shape_id: int


@dataclass
class CompiledPointEmitter:
    kind: str
    index: int
    position: np.ndarray
    intensity: np.ndarray


@dataclass
class CompiledLaserEmitter:
    kind: str
    index: int
    origin: np.ndarray
    power: np.ndarray
    pulse_fwhm: float
    spot: np.ndarray  # first hit of the beam
    spot_normal: np.ndarray
    spot_material: int  # material index at the spot
    spot_cos: float  # |cos| between beam and spot normal
    spot_time: float  # optical time origin -> spot
    spot_valid: bool


class CompiledScene:
    """Immutable traced representation: geometry, tables, camera, film axis."""

    def __init__(self, desc: SceneDescription):
        desc.validate()
        self.desc = desc
        self.speed_of_light = desc.speed_of_light
        self.axis = desc.film.to_axis()
        self.integrator = desc.integrator
        self.camera = compile_camera(desc.camera)

        self.material_index = {m.id: i for i, m in enumerate(desc.materials)}
        self.medium_index = {m.id: i for i, m in enumerate(desc.media)}
        from .materials import compile_material
        from .media import HomogeneousMedium

        self.materials = [compile_material(m) for m in desc.materials]
        self.media = [
            HomogeneousMedium(
                np.asarray(m.sigma_a, dtype=np.float64),
                np.asarray(m.sigma_s, dtype=np.float64),
                float(m.g),
                float(m.ior),
            )
            for m in desc.media
        ]

        # stable integer shape ids: rank in sorted id order, so intersection
        # tie-breaking is independent of insertion order
        sorted_ids = sorted(s.id for s in desc.shapes)
        self.shape_rank = {sid: i for i, sid in enumerate(sorted_ids)}

        # area emitters attach to rectangle shapes
        emitter_by_shape = {}
        for i, e in enumerate(desc.emitters):
            if e.type == "area":
                emitter_by_shape[e.shape] = i

        tri, rect, sph = [], [], []
        self.rect_lookup = {}
        for s in desc.shapes:
            sid = self.shape_rank[s.id]
            mat = self.material_index[s.material] if s.material is not None else -1
            med = self.medium_index[s.interior_medium] if s.interior_medium is not None else -1
            emit = emitter_by_shape.get(s.id, -1)
            m = _transform_matrix(s.transform)
            if s.type == "rectangle":
                c = _apply_point(m, s.center)
                eu = _apply_vec(m, s.edge_u)
                ev = _apply_vec(m, s.edge_v)
                rect.append((c, eu, ev, sid, mat, emit, med))
                self.rect_lookup[s.id] = (c, eu, ev)
            elif s.type == "sphere":
                c = _apply_point(m, s.center)
                scale = np.linalg.norm(m[:3, 0])
                sph.append((c, s.radius * scale, sid, mat, emit, med))
            elif s.type == "mesh":
                verts = [_apply_point(m, v) for v in s.vertices]
                for t in s.triangles:
                    tri.append((verts[int(t[0])], verts[int(t[1])], verts[int(t[2])], sid, mat, emit, med))
            else:  # box
                for fc, eu, ev in _box_rectangles(s.min, s.max, m):
                    rect.append((fc, eu, ev, sid, mat, emit, med))

        blocks = []
        if tri:
            a = np.array([t[0] for t in tri])
            b = np.array([t[1] for t in tri])
            cc = np.array([t[2] for t in tri])
            blocks.append(
                shp.make_triangle_block(
                    a,
                    b,
                    cc,
                    [t[3] for t in tri],
                    [t[4] for t in tri],
                    [t[5] for t in tri],
                    [t[6] for t in tri],
                )
            )
        if rect:
            blocks.append(
                shp.make_rectangle_block(
                    np.array([r[0] for r in rect]),
                    np.array([r[1] for r in rect]),
                    np.array([r[2] for r in rect]),
                    [r[3] for r in rect],
                    [r[4] for r in rect],
                    [r[5] for r in rect],
                    [r[6] for r in rect],
                )
            )
        if sph:
            blocks.append(
                shp.make_sphere_block(
                    np.array([s_[0] for s_ in sph]),
                    np.array([s_[1] for s_ in sph]),
                    [s_[2] for s_ in sph],
                    [s_[3] for s_ in sph],
                    [s_[4] for s_ in sph],
                    [s_[5] for s_ in sph],
                )
            )
        self.geometry = shp.Geometry(blocks)

        self.emitters = []
        for i, e in enumerate(desc.emitters):
            if e.type == "area":
                c, eu, ev = self.rect_lookup[e.shape]
                n = normalize(np.cross(eu, ev))
                area = 4.0 * float(np.linalg.norm(np.cross(eu, ev)))
                self.emitters.append(
                    CompiledAreaEmitter(
                        "area",
                        i,
                        np.asarray(e.radiance, dtype=np.float64),
                        c,
                        eu,
                        ev,
                        n,
                        area,
                        self.shape_rank[e.shape],
                    )
                )
            elif e.type == "point":
                self.emitters.append(
                    CompiledPointEmitter(
                        "point",
                        i,
                        np.asarray(e.position, dtype=np.float64),
                        np.asarray(e.intensity, dtype=np.float64),
                    )
                )
            else:
                self.emitters.append(self._compile_laser(e, i))

    def _compile_laser(self, e: EmitterDesc, index: int) -> CompiledLaserEmitter:
        from .geometry import Ray

        origin = np.asarray(e.origin, dtype=np.float64)
        target = np.asarray(e.target, dtype=np.float64)
        d = normalize(target - origin)
        si = self.geometry.intersect(Ray(origin[None, :], d[None, :]))
        valid = bool(si.valid[0])
        spot = si.position[0] if valid else target
        normal = si.geometric_normal[0] if valid else np.array([0.0, 0.0, 1.0])
        mat = int(si.material_id[0]) if valid else -1
        cosb = float(abs(np.dot(normal, d))) if valid else 0.0
        time = float(np.linalg.norm(spot - origin)) / self.speed_of_light if valid else 0.0
        return CompiledLaserEmitter(
            "pulsed_laser",
            index,
            origin,
            np.asarray(e.power, dtype=np.float64),
            float(e.pulse_fwhm),
            spot,
            normal,
            mat,
            cosb,
            time,
            valid,
        )


def compile_scene(desc: SceneDescription) -> CompiledScene:
    return CompiledScene(desc)


# --------------------------------------------------------------------------
# procedural scenes
# --------------------------------------------------------------------------


def cornell_box(width=64, height=64, spp_independent_axis=True) -> SceneDescription:
    """Classic two-block box with a ceiling light, camera at the opening.

    The temporal axis starts two bins before the shortest camera-to-wall
    time of flight and spans enough optical path that no max-depth
    contribution can overflow it.
    """
    bin_width = 0.12
    n_bins = 300
    t_start = 2.9 - 2 * bin_width
    materials = [
        MaterialDesc(id="white", type="diffuse", albedo=[0.73, 0.73, 0.73]),
        MaterialDesc(id="red", type="diffuse", albedo=[0.65, 0.05, 0.05]),
        MaterialDesc(id="green", type="diffuse", albedo=[0.12, 0.45, 0.15]),
    ]
    shapes = [
        ShapeDesc(
            id="floor",
            type="rectangle",
            center=[0.0, -1.0, 0.0],
            edge_u=[1.0, 0.0, 0.0],
            edge_v=[0.0, 0.0, 1.0],
            material="white",
        ),
        ShapeDesc(
            id="ceiling",
            type="rectangle",
            center=[0.0, 1.0, 0.0],
            edge_u=[1.0, 0.0, 0.0],
            edge_v=[0.0, 0.0, 1.0],
            material="white",
        ),
        ShapeDesc(
            id="back",
            type="rectangle",
            center=[0.0, 0.0, -1.0],
            edge_u=[1.0, 0.0, 0.0],
            edge_v=[0.0, 1.0, 0.0],
            material="white",
        ),
        ShapeDesc(
            id="left",
            type="rectangle",
            center=[-1.0, 0.0, 0.0],
            edge_u=[0.0, 0.0, 1.0],
            edge_v=[0.0, 1.0, 0.0],
            material="red",
        ),
        ShapeDesc(
            id="right",
            type="rectangle",
            center=[1.0, 0.0, 0.0],
            edge_u=[0.0, 0.0, 1.0],
            edge_v=[0.0, 1.0, 0.0],
            material="green",
        ),
        ShapeDesc(
            id="light",
            type="rectangle",
            center=[0.0, 0.995, 0.0],
            edge_u=[0.25, 0.0, 0.0],
            edge_v=[0.0, 0.0, 0.25],
            material="white",
        ),
        ShapeDesc(
            id="tall_block",
            type="box",
            min=[-0.3, -1.0, -0.3],
            max=[0.3, 0.2, 0.3],
            transform=[{"rotate_y": 18.0}, {"translate": [-0.45, 0.0, -0.3]}],
            material="white",
        ),
        ShapeDesc(
            id="short_block",
            type="box",
            min=[-0.28, -1.0, -0.28],
            max=[0.28, -0.4, 0.28],
            transform=[{"rotate_y": -17.0}, {"translate": [0.38, 0.0, 0.35]}],
            material="white",
        ),
    ]
    emitters = [EmitterDesc(type="area", id="lamp", shape="light", radiance=[18.4, 15.6, 8.0])]
    return SceneDescription(
        camera=CameraDesc(
            origin=[0.0, 0.0, 3.9],
            look_at=[0.0, 0.0, 0.0],
            up=[0.0, 1.0, 0.0],
            fov_degrees=38.0,
            width=width,
            height=height,
        ),
        film=FilmDesc(t_start=t_start, bin_width=bin_width, n_bins=n_bins),
        shapes=shapes,
        materials=materials,
        emitters=emitters,
        integrator=IntegratorDesc(kind="path", max_depth=8, rr_depth=4),
        speed_of_light=1.0,
    )


def polarizer_pair(theta_degrees=45.0, width=16, height=16, fov_degrees=20.0) -> SceneDescription:
    """Camera behind two polarizer sheets looking at a pulsed emitting wall.

    Transmission through the pair follows the Malus cosine-squared law in
    polarized mode; the second sheet's axis angle is `theta_degrees`.  A
    narrow fov keeps rays near-axial so the projected sheet axes stay at
    their nominal relative angle.
    """
    theta = math.radians(theta_degrees)
    materials = [
        MaterialDesc(id="front_pol", type="polarizer", transmission_axis_angle=0.0),
        MaterialDesc(id="back_pol", type="polarizer", transmission_axis_angle=theta),
        MaterialDesc(id="wall_mat", type="diffuse", albedo=[0.0, 0.0, 0.0]),
    ]
    shapes = [
        ShapeDesc(
            id="sheet_front",
            type="rectangle",
            center=[0.0, 0.0, 3.0],
            edge_u=[2.0, 0.0, 0.0],
            edge_v=[0.0, 2.0, 0.0],
            material="front_pol",
        ),
        ShapeDesc(
            id="sheet_back",
            type="rectangle",
            center=[0.0, 0.0, 2.0],
            edge_u=[2.0, 0.0, 0.0],
            edge_v=[0.0, 2.0, 0.0],
            material="back_pol",
        ),
        ShapeDesc(
            id="glow_wall",
            type="rectangle",
            center=[0.0, 0.0, 0.0],
            edge_u=[2.0, 0.0, 0.0],
            edge_v=[0.0, 2.0, 0.0],
            material="wall_mat",
        ),
    ]
    emitters = [EmitterDesc(type="area", id="glow", shape="glow_wall", radiance=[1.0, 1.0, 1.0])]
    return SceneDescription(
        camera=CameraDesc(
            origin=[0.0, 0.0, 4.0],
            look_at=[0.0, 0.0, 0.0],
            fov_degrees=fov_degrees,
            width=width,
            height=height,
        ),
        film=FilmDesc(t_start=3.8, bin_width=0.05, n_bins=16),
        shapes=shapes,
        materials=materials,
        emitters=emitters,
        integrator=IntegratorDesc(kind="path", max_depth=8, rr_depth=8, polarized=True),
        speed_of_light=1.0,
    )
