"""Terrain worlds: DTM rasters, displaced grids, rock populations and export."""

from __future__ import annotations

import math
import struct
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image
from scipy.spatial import ConvexHull

from .scene import TERRAIN_TAG, Scene
from .validation import RoverBenchError

EMBED_FRACTION = 0.25
MAX_EXPECTED_ROCKS = 1e7
ROCK_SAMPLE_POINTS = 64


@dataclass
class Heightfield:
    """Regular elevation grid.

    ``elevations[i, j]`` is the height of the vertex at world
    ``(origin[0] + i * cell_size, origin[1] + j * cell_size)``.
    """

    elevations: np.ndarray
    cell_size: float = 1.0
    origin: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.elevations = np.asarray(self.elevations, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(2)
        self.cell_size = float(self.cell_size)
        if self.elevations.ndim != 2 or min(self.elevations.shape) < 2:
            raise ValueError("heightfield needs at least 2x2 samples")
        if not (self.cell_size > 0 and math.isfinite(self.cell_size)):
            raise ValueError("cell_size must be positive")
        if not np.all(np.isfinite(self.elevations)):
            raise ValueError("elevations must be finite")

    @property
    def width(self) -> int:
        return self.elevations.shape[0]

    @property
    def height(self) -> int:
        return self.elevations.shape[1]

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """``(xmin, xmax, ymin, ymax)`` in meters."""
        x0, y0 = self.origin
        return (
            x0,
            x0 + (self.width - 1) * self.cell_size,
            y0,
            y0 + (self.height - 1) * self.cell_size,
        )

    @property
    def area(self) -> float:
        xmin, xmax, ymin, ymax = self.extent
        return (xmax - xmin) * (ymax - ymin)

    def contains(self, x, y, tol: float = 1e-9) -> np.ndarray:
        xmin, xmax, ymin, ymax = self.extent
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= xmin - tol) & (x <= xmax + tol) & (y >= ymin - tol) & (y <= ymax + tol)

    def height_at(self, x, y) -> np.ndarray:
        """Bilinear interpolation; coordinates are clamped to the grid."""
        fx = (np.asarray(x, dtype=float) - self.origin[0]) / self.cell_size
        fy = (np.asarray(y, dtype=float) - self.origin[1]) / self.cell_size
        fx = np.clip(fx, 0.0, self.width - 1.0)
        fy = np.clip(fy, 0.0, self.height - 1.0)
        i = np.minimum(np.floor(fx).astype(int), self.width - 2)
        j = np.minimum(np.floor(fy).astype(int), self.height - 2)
        u = fx - i
        v = fy - j
        e = self.elevations
        return (
            e[i, j] * (1 - u) * (1 - v)
            + e[i + 1, j] * u * (1 - v)
            + e[i, j + 1] * (1 - u) * v
            + e[i + 1, j + 1] * u * v
        )


@dataclass
class RockPopulation:
    density: float
    diameter_min: float
    diameter_max: float
    shape_irregularity: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.diameter_min <= self.diameter_max):
            raise ValueError("need 0 < diameter_min <= diameter_max")
        if not self.density >= 0:
            raise ValueError("density must be non-negative")
        if not 0 <= self.shape_irregularity <= 1:
            raise ValueError("shape_irregularity must lie in [0, 1]")


class RockPlacement(NamedTuple):
    population: int
    diameter: float
    position: tuple[float, float, float]
    yaw: float
    mesh_seed: int


def _png_bit_depth(path: Path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(33)
    if len(head) < 33 or head[:8] != b"\x89PNG\r\n\x1a\n" or head[12:16] != b"IHDR":
        raise RoverBenchError(f"{path}: not a PNG file")
    return head[24], head[25]


def _read_ascii_grid(path: Path) -> tuple[np.ndarray, float | None]:
    header: dict[str, float] = {}
    rows: list[list[float]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            key = parts[0].lower()
            if not rows and key[0].isalpha():
                if len(parts) != 2:
                    raise RoverBenchError(f"{path}:{lineno}: malformed header line")
                header[key] = float(parts[1])
                continue
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise RoverBenchError(f"{path}:{lineno}: {exc}") from None
    if "ncols" not in header or "nrows" not in header:
        raise RoverBenchError(f"{path}: ASCII grid needs ncols and nrows")
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    grid = np.array(rows, dtype=float) if rows else np.empty((0, 0))
    if grid.shape != (nrows, ncols):
        raise RoverBenchError(f"{path}: expected {nrows}x{ncols} values, got {grid.shape}")
    nodata = header.get("nodata_value")
    if nodata is not None and np.any(grid == nodata):
        raise RoverBenchError(f"{path}: NODATA cells are not supported")
    return grid, header.get("cellsize")


def load_heightfield(raster_path, cell_size: float | None = 1.0, z_scale: float = 1.0) -> Heightfield:
    """Read a grayscale PNG (8/16-bit) or ESRI-style ASCII grid.

    Raster values are mapped linearly onto ``[0, z_scale]``: PNG pixels by
    their bit depth, ASCII grids by their min/max. Raster columns run along
    +X and rows along +Y, both starting at the origin. ``cell_size=None``
    takes the ASCII header's ``cellsize``.
    """
    path = Path(raster_path)
    z_scale = float(z_scale)
    if not math.isfinite(z_scale):
        raise ValueError("z_scale must be finite")
    if not path.is_file():
        raise RoverBenchError(f"{path}: no such raster file")

    if path.suffix.lower() == ".png":
        depth, color_type = _png_bit_depth(path)
        if color_type != 0 or depth not in (8, 16):
            raise RoverBenchError(
                f"{path}: need 8- or 16-bit grayscale PNG (bit depth {depth}, color type {color_type})"
            )
        with Image.open(path) as img:
            pixels = np.array(img)
        normalized = pixels.astype(np.float64) / (2**depth - 1)
    else:
        grid, header_cell = _read_ascii_grid(path)
        if cell_size is None:
            cell_size = header_cell
        span = grid.max() - grid.min()
        normalized = (grid - grid.min()) / span if span > 0 else np.zeros_like(grid)
    if cell_size is None:
        raise ValueError("cell_size is required")
    return Heightfield(np.ascontiguousarray(normalized.T * z_scale), cell_size)


def crater_raster(size: int = 64, seed: int = 0, bumps: int = 12) -> np.ndarray:
    """Synthetic 16-bit crater DTM: a rimmed bowl plus smooth seeded bumps."""
    rng = np.random.default_rng(seed)
    g = np.linspace(-1.0, 1.0, size)
    X, Y = np.meshgrid(g, g, indexing="xy")
    r = np.hypot(X, Y)
    z = 0.55 - 0.35 * np.exp(-(r / 0.45) ** 2) + 0.25 * np.exp(-((r - 0.7) / 0.12) ** 2)
    for _ in range(bumps):
        cx, cy = rng.uniform(-1, 1, 2)
        w = rng.uniform(0.08, 0.3)
        z += rng.uniform(-0.08, 0.08) * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / w**2)
    z = (z - z.min()) / (z.max() - z.min())
    return np.round(z * 65535).astype(np.uint16)


def displace_plane(hf: Heightfield) -> np.ndarray:
    """Triangulate the heightfield: two upward-facing triangles per cell.

    Every cell is split along its (i, j)-(i+1, j+1) diagonal. Returns an
    ``((width-1)*(height-1)*2, 3, 3)`` array.
    """
    i, j = np.meshgrid(np.arange(hf.width), np.arange(hf.height), indexing="ij")
    verts = np.stack(
        [hf.origin[0] + i * hf.cell_size, hf.origin[1] + j * hf.cell_size, hf.elevations],
        axis=-1,
    )
    a = verts[:-1, :-1]
    b = verts[1:, :-1]
    c = verts[1:, 1:]
    d = verts[:-1, 1:]
    lower = np.stack([a, b, c], axis=-2)
    upper = np.stack([a, c, d], axis=-2)
    return np.stack([lower, upper], axis=2).reshape(-1, 3, 3)


def generate_rock_mesh(diameter: float, irregularity: float = 0.3, seed: int = 0,
                       n_points: int = ROCK_SAMPLE_POINTS) -> np.ndarray:
    """Convex rock centered at the origin, outward-wound triangles."""
    if not diameter > 0:
        raise ValueError("diameter must be positive")
    if n_points < 32:
        raise ValueError("at least 32 sample points are required")
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_points, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = 0.5 * diameter * (1.0 + 0.5 * irregularity * rng.uniform(-1.0, 1.0, n_points))
    pts = dirs * radii[:, None]
    hull = ConvexHull(pts)
    tris = pts[hull.simplices]
    normals = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    flip = np.einsum("ij,ij->i", normals, tris.mean(axis=1)) < 0
    tris[flip] = tris[flip][:, ::-1]
    return tris


def scatter_rocks(hf: Heightfield, populations: Sequence[RockPopulation],
                  global_seed: int = 0) -> list[RockPlacement]:
    """Poisson-count, log-uniform-diameter rock placements over the terrain.

    Each rock center sits at terrain height plus a quarter diameter, so the
    bottom of its nominal sphere is buried by a quarter diameter.
    """
    if not populations:
        raise ValueError("at least one rock population is required")
    xmin, xmax, ymin, ymax = hf.extent
    placements: list[RockPlacement] = []
    for k, pop in enumerate(populations):
        expected = pop.density * hf.area
        if expected > MAX_EXPECTED_ROCKS:
            raise RoverBenchError(f"population {k}: {expected:.3g} expected rocks exceeds limit")
        rng = np.random.default_rng([global_seed, pop.seed, k])
        n = int(rng.poisson(expected))
        x = rng.uniform(xmin, xmax, n)
        y = rng.uniform(ymin, ymax, n)
        log_d = rng.uniform(math.log(pop.diameter_min), math.log(pop.diameter_max), n)
        diam = np.clip(np.exp(log_d), pop.diameter_min, pop.diameter_max)
        yaw = rng.uniform(0.0, 2 * math.pi, n)
        mesh_seeds = rng.integers(0, 2**63 - 1, n)
        z = hf.height_at(x, y) + EMBED_FRACTION * diam
        placements.extend(
            RockPlacement(k, float(diam[m]), (float(x[m]), float(y[m]), float(z[m])),
                          float(yaw[m]), int(mesh_seeds[m]))
            for m in range(n)
        )
    return placements


def place_mesh(mesh: np.ndarray, position, yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return mesh @ R.T + np.asarray(position, dtype=float)


def build_scene(terrain_triangles, rocks: Sequence[tuple[RockPlacement, np.ndarray]] = ()) -> Scene:
    """Assemble terrain and placed rock meshes (given in rock-local frames)."""
    parts = [np.asarray(terrain_triangles, dtype=float).reshape(-1, 3, 3)]
    tags = [np.full(len(parts[0]), TERRAIN_TAG)]
    for rock_id, (placement, mesh) in enumerate(rocks):
        parts.append(place_mesh(mesh, placement.position, placement.yaw))
        tags.append(np.full(len(mesh), rock_id))
    return Scene(np.concatenate(parts), np.concatenate(tags))


def build_world(hf: Heightfield, populations: Sequence[RockPopulation] = (),
                global_seed: int = 0) -> tuple[Scene, list[RockPlacement]]:
    placements = scatter_rocks(hf, populations, global_seed) if populations else []
    pops = list(populations)
    rocks = [
        (p, generate_rock_mesh(p.diameter, pops[p.population].shape_irregularity, p.mesh_seed))
        for p in placements
    ]
    return build_scene(displace_plane(hf), rocks), placements


# -- export ------------------------------------------------------------------

def _indexed(triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = triangles.reshape(-1, 3)
    _, first, inverse = np.unique(flat, axis=0, return_index=True, return_inverse=True)
    # renumber unique vertices by first appearance to keep files stable and readable
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    faces = rank[inverse.reshape(-1)].reshape(-1, 3)
    vertices = flat[np.sort(first)]
    return vertices, faces


def write_obj(triangles, path) -> Path:
    vertices, faces = _indexed(np.asarray(triangles, dtype=float))
    path = Path(path)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for x, y, z in vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in (faces + 1).tolist():
            fh.write(f"f {a} {b} {c}\n")
    return path


def read_obj(path) -> np.ndarray:
    """Triangles from an OBJ's ``v``/``f`` records (polygons are fanned)."""
    vertices: list[list[float]] = []
    tris: list[list[int]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for ref in parts[1:]:
                    k = int(ref.split("/")[0])
                    idx.append(k - 1 if k > 0 else len(vertices) + k)
                if len(idx) < 3:
                    raise RoverBenchError(f"{path}:{lineno}: face with fewer than 3 vertices")
                tris.extend([idx[0], idx[m], idx[m + 1]] for m in range(1, len(idx) - 1))
    v = np.asarray(vertices, dtype=float).reshape(-1, 3)
    return v[np.asarray(tris, dtype=np.int64).reshape(-1, 3)]


_STL_DTYPE = np.dtype(
    [("normal", "<f4", (3,)), ("vertices", "<f4", (3, 3)), ("attr", "<u2")]
)


def write_stl(triangles, path) -> Path:
    tris = np.asarray(triangles, dtype=float).reshape(-1, 3, 3)
    n = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    rec = np.zeros(len(tris), dtype=_STL_DTYPE)
    rec["normal"] = n
    rec["vertices"] = tris
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(b"roverbench binary STL".ljust(80, b" "))
        fh.write(struct.pack("<I", len(tris)))
        fh.write(rec.tobytes())
    return path


def read_stl(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    (count,) = struct.unpack_from("<I", data, 80)
    rec = np.frombuffer(data, dtype=_STL_DTYPE, count=count, offset=84)
    return rec["vertices"].astype(np.float64)


def _pretty_xml(root: ET.Element) -> bytes:
    ET.indent(root, space="  ")
    return b'<?xml version="1.0"?>\n' + ET.tostring(root, encoding="utf-8") + b"\n"


def write_world_sdf(path, mesh_uris: dict[str, str], world_name: str = "roverbench") -> Path:
    sdf = ET.Element("sdf", version="1.6")
    world = ET.SubElement(sdf, "world", name=world_name)
    model = ET.SubElement(world, "model", name="terrain")
    ET.SubElement(model, "static").text = "true"
    link = ET.SubElement(model, "link", name="link")
    for kind in ("collision", "visual"):
        el = ET.SubElement(link, kind, name=kind)
        mesh = ET.SubElement(ET.SubElement(el, "geometry"), "mesh")
        ET.SubElement(mesh, "uri").text = mesh_uris[kind]
    path = Path(path)
    path.write_bytes(_pretty_xml(sdf))
    return path


def export_world(scene: Scene, out_dir, name: str = "world") -> dict[str, Path]:
    """Write ``<name>.obj``, ``<name>.stl`` and ``<name>.sdf`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    obj = write_obj(scene.triangles, out / f"{name}.obj")
    stl = write_stl(scene.triangles, out / f"{name}.stl")
    sdf = write_world_sdf(out / f"{name}.sdf", {"collision": stl.name, "visual": obj.name})
    return {"obj": obj, "stl": stl, "sdf": sdf}
