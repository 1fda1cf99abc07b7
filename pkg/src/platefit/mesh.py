"""Structured triangulations of a rectangular strip midplane.

The mesh carries the tags the rest of the pipeline needs: which boundary
edges are clamped (the side attached to the vibration stand) and which
triangles sit under the accelerometer footprint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, MeshFileError

_SIDES = ("left", "right", "bottom", "top")


@dataclass(frozen=True)
class GeometryConfig:
    """Geometry of the strip specimen and the measurement setup.

    Lengths are metres, the accelerometer mass is kilograms.  ``thickness``
    is the full plate thickness h = 2e.  ``accel_center`` may be ``None``
    when no accelerometer is attached.
    """

    length: float
    width: float
    thickness: float
    nx: int
    ny: int
    test_point: tuple[float, float]
    accel_center: tuple[float, float] | None = None
    accel_radius: float = 0.0
    accel_mass: float = 0.0
    clamped_side: str = "right"

    @property
    def half_thickness(self) -> float:
        return 0.5 * self.thickness

    def validate(self):
        if not (self.length > 0 and self.width > 0 and self.thickness > 0):
            raise GeometryError("length, width and thickness must be positive")
        if self.nx < 1 or self.ny < 1:
            raise GeometryError("nx and ny must be at least 1")
        xt, yt = self.test_point
        if not (0.0 <= xt <= self.length and 0.0 <= yt <= self.width):
            raise GeometryError(f"test point {self.test_point} outside the plate")
        if self.clamped_side not in _SIDES:
            raise GeometryError(f"clamped_side must be one of {_SIDES}")
        if self.accel_mass < 0:
            raise GeometryError("accelerometer mass must be nonnegative")
        if self.accel_center is not None:
            xa, ya = self.accel_center
            r = self.accel_radius
            if r <= 0:
                raise GeometryError("accelerometer radius must be positive")
            inside = (r <= xa <= self.length - r) and (r <= ya <= self.width - r)
            if not inside:
                raise GeometryError("accelerometer disk must lie inside the plate")
        elif self.accel_mass > 0:
            raise GeometryError("accel_mass > 0 requires an accel_center")


@dataclass(eq=False)
class Mesh:
    """Triangulated midplane with boundary and accelerometer tags.

    ``edge_nodes`` rows are sorted (low index first); ``edge_normals`` hold
    the fixed reference normal of each edge, flipped to point outward on
    boundary edges.  ``tri_edges[t, j]`` is the edge opposite local vertex
    ``j`` of triangle ``t``.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    edge_nodes: np.ndarray
    edge_midpoints: np.ndarray
    edge_normals: np.ndarray
    tri_edges: np.ndarray
    edge_tri_count: np.ndarray
    clamped_edges: np.ndarray
    accel_triangles: np.ndarray
    accel_area: float

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_nodes.shape[0]

    @property
    def clamped_nodes(self) -> np.ndarray:
        """Sorted indices of the nodes lying on clamped edges."""
        return np.unique(self.edge_nodes[self.clamped_edges])

    @property
    def boundary_edges(self) -> np.ndarray:
        return np.flatnonzero(self.edge_tri_count == 1)

    def triangle_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def triangle_centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    def same_as(self, other: "Mesh") -> bool:
        return (
            np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.triangles, other.triangles)
            and np.array_equal(self.clamped_edges, other.clamped_edges)
            and np.array_equal(self.accel_triangles, other.accel_triangles)
        )


def _build_connectivity(nodes, triangles):
    """Edges, midpoints, reference normals and triangle->edge map.

    Edge ordering is the lexicographic order of sorted node pairs, so it is
    reproducible from (nodes, triangles) alone.
    """
    pairs = np.concatenate(
        [triangles[:, [1, 2]], triangles[:, [2, 0]], triangles[:, [0, 1]]]
    )
    pairs = np.sort(pairs, axis=1)
    edge_nodes, inverse, counts = np.unique(
        pairs, axis=0, return_inverse=True, return_counts=True
    )
    tri_edges = inverse.reshape(3, -1).T.copy()

    a = nodes[edge_nodes[:, 0]]
    b = nodes[edge_nodes[:, 1]]
    mid = 0.5 * (a + b)
    tang = b - a
    lengths = np.hypot(tang[:, 0], tang[:, 1])
    if np.any(lengths == 0):
        raise GeometryError("mesh contains a zero-length edge")
    normals = np.column_stack([tang[:, 1], -tang[:, 0]]) / lengths[:, None]

    # flip boundary-edge normals outward (away from the adjacent centroid)
    boundary = counts == 1
    if np.any(boundary):
        owner = np.full(edge_nodes.shape[0], -1, dtype=np.int64)
        for t in range(tri_edges.shape[0]):
            for e in tri_edges[t]:
                owner[e] = t
        centroids = nodes[triangles].mean(axis=1)
        for e in np.flatnonzero(boundary):
            out = mid[e] - centroids[owner[e]]
            if np.dot(normals[e], out) < 0:
                normals[e] = -normals[e]
    return edge_nodes, mid, normals, tri_edges, counts.astype(np.int64)


def _accel_tags(nodes, triangles, cfg: GeometryConfig):
    if cfg.accel_center is None:
        return np.empty(0, dtype=np.int64), 0.0
    centroids = nodes[triangles].mean(axis=1)
    d = np.hypot(
        centroids[:, 0] - cfg.accel_center[0], centroids[:, 1] - cfg.accel_center[1]
    )
    tagged = np.flatnonzero(d <= cfg.accel_radius)
    if tagged.size == 0 and cfg.accel_mass > 0:
        raise GeometryError(
            "no triangle centroid falls inside the accelerometer footprint; "
            "the mesh is too coarse for radius %g" % cfg.accel_radius
        )
    p = nodes[triangles[tagged]]
    if tagged.size:
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        area = float(np.sum(0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])))
    else:
        area = 0.0
    return tagged, area


def generate_strip_mesh(cfg: GeometryConfig) -> Mesh:
    """Structured triangulation of [0, L] x [0, b] with 2*nx*ny triangles.

    Each grid cell is split along its (i, j) -> (i+1, j+1) diagonal.  The
    clamped side is tagged from grid indices, so the tags are exact no
    matter how the coordinates round.
    """
    cfg.validate()
    nx, ny = cfg.nx, cfg.ny
    ncol = ny + 1

    ix, iy = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="ij")
    nodes = np.column_stack(
        [ix.ravel() * cfg.length / nx, iy.ravel() * cfg.width / ny]
    )

    tris = []
    for i in range(nx):
        for j in range(ny):
            n00 = i * ncol + j
            n10 = (i + 1) * ncol + j
            n01 = n00 + 1
            n11 = n10 + 1
            tris.append((n00, n10, n11))
            tris.append((n00, n11, n01))
    triangles = np.array(tris, dtype=np.int64)

    edge_nodes, mid, normals, tri_edges, counts = _build_connectivity(nodes, triangles)

    node_ix = np.arange(nodes.shape[0]) // ncol
    node_iy = np.arange(nodes.shape[0]) % ncol
    on_side = {
        "left": node_ix == 0,
        "right": node_ix == nx,
        "bottom": node_iy == 0,
        "top": node_iy == ny,
    }[cfg.clamped_side]
    clamped = np.flatnonzero(on_side[edge_nodes[:, 0]] & on_side[edge_nodes[:, 1]])

    accel_tris, accel_area = _accel_tags(nodes, triangles, cfg)

    return Mesh(
        nodes=nodes,
        triangles=triangles,
        edge_nodes=edge_nodes,
        edge_midpoints=mid,
        edge_normals=normals,
        tri_edges=tri_edges,
        edge_tri_count=counts,
        clamped_edges=clamped,
        accel_triangles=accel_tris,
        accel_area=accel_area,
    )


def save_mesh(mesh: Mesh, path):
    """Write the mesh in the plain-text section format."""
    with open(path, "w") as fh:
        fh.write("# platefit mesh: sections nodes / triangles / clamped_edges / accel_triangles\n")
        fh.write("nodes\n")
        for x, y in mesh.nodes:
            fh.write(f"{x:.17g} {y:.17g}\n")
        fh.write("triangles\n")
        for a, b, c in mesh.triangles:
            fh.write(f"{a} {b} {c}\n")
        fh.write("clamped_edges\n")
        for e in mesh.clamped_edges:
            fh.write(f"{e}\n")
        fh.write("accel_triangles\n")
        for t in mesh.accel_triangles:
            fh.write(f"{t}\n")


def load_mesh(path) -> Mesh:
    """Read a mesh written by :func:`save_mesh`.

    Connectivity (edges, normals, areas) is rebuilt deterministically from
    the node and triangle records, so edge indices match the saved ones.
    """
    sections = {"nodes": [], "triangles": [], "clamped_edges": [], "accel_triangles": []}
    current = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line in sections:
                current = line
                continue
            if current is None:
                raise MeshFileError(f"data before any section header: {line!r}", lineno)
            sections[current].append((lineno, line))

    def parse_row(entry, n_fields, conv, what):
        lineno, line = entry
        parts = line.split()
        if len(parts) != n_fields:
            raise MeshFileError(
                f"expected {n_fields} fields for {what}, got {len(parts)}", lineno
            )
        try:
            return [conv(p) for p in parts]
        except ValueError:
            raise MeshFileError(f"could not parse {what}: {line!r}", lineno) from None

    if not sections["nodes"]:
        raise MeshFileError("mesh file has no nodes")
    nodes = np.array([parse_row(e, 2, float, "node") for e in sections["nodes"]])
    if not sections["triangles"]:
        raise MeshFileError("mesh file has no triangles")
    triangles = np.array(
        [parse_row(e, 3, int, "triangle") for e in sections["triangles"]], dtype=np.int64
    )
    for entry, tri in zip(sections["triangles"], triangles):
        if tri.min() < 0 or tri.max() >= nodes.shape[0]:
            raise MeshFileError(
                f"triangle references node index out of range: {tri.tolist()}", entry[0]
            )
    p = nodes[triangles]
    areas = 0.5 * (
        (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
        - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    )
    bad = np.flatnonzero(areas <= 0)
    if bad.size:
        raise MeshFileError(
            f"triangle {bad[0]} has nonpositive area", sections["triangles"][bad[0]][0]
        )

    edge_nodes, mid, normals, tri_edges, counts = _build_connectivity(nodes, triangles)

    clamped = np.array(
        [parse_row(e, 1, int, "clamped edge")[0] for e in sections["clamped_edges"]],
        dtype=np.int64,
    )
    for entry, e in zip(sections["clamped_edges"], clamped):
        if e < 0 or e >= edge_nodes.shape[0]:
            raise MeshFileError(f"clamped edge index out of range: {e}", entry[0])

    accel = np.array(
        [parse_row(e, 1, int, "accel triangle")[0] for e in sections["accel_triangles"]],
        dtype=np.int64,
    )
    for entry, t in zip(sections["accel_triangles"], accel):
        if t < 0 or t >= triangles.shape[0]:
            raise MeshFileError(f"accel triangle index out of range: {t}", entry[0])

    accel_area = float(np.sum(areas[accel])) if accel.size else 0.0
    return Mesh(
        nodes=nodes,
        triangles=triangles,
        edge_nodes=edge_nodes,
        edge_midpoints=mid,
        edge_normals=normals,
        tri_edges=tri_edges,
        edge_tri_count=counts,
        clamped_edges=clamped,
        accel_triangles=accel,
        accel_area=accel_area,
    )
