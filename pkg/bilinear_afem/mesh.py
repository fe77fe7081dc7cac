"""
Conforming triangulations and longest-edge bisection

Meshes are immutable values: refine() builds a new Mesh and never touches
the one it was given, so adaptive iteration records can keep references to
earlier meshes.

Local edge k of an element joins vertex k and vertex k+1 (mod 3); vertices
are stored counterclockwise.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .exceptions import MeshError

logger = logging.getLogger(__name__)

# Local edge k -> (first local vertex, second local vertex)
LOCAL_EDGES = np.array([[0, 1], [1, 2], [2, 0]])


class Vertex(NamedTuple):
    x: float
    y: float


class Element(NamedTuple):
    vertex_ids: tuple
    refinement_edge: int


class ElementGeometry(NamedTuple):
    area: float
    diameter: float
    edge_lengths: np.ndarray
    normals: np.ndarray


def edge_key(a, b):
    """Order-independent key of the edge joining vertices a and b."""
    a, b = int(a), int(b)
    return (a, b) if a < b else (b, a)


def _longest_local_edge(coords, ids):
    """
    Pick the refinement edge of a triangle.

    The longest edge wins; exact ties go to the lexicographically smallest
    (min vertex id, max vertex id) key so refinement is reproducible.

    Args:
        coords: (3, 2) vertex coordinates
        ids: the three global vertex ids

    Returns:
        int: local edge index in {0, 1, 2}
    """
    best = None
    for k in range(3):
        a, b = ids[k], ids[(k + 1) % 3]
        key = edge_key(a, b)
        lo, hi = (k, (k + 1) % 3) if a < b else ((k + 1) % 3, k)
        d = coords[hi] - coords[lo]
        length2 = d[0] * d[0] + d[1] * d[1]
        rank = (-length2, key)
        if best is None or rank < best[0]:
            best = (rank, k)
    return best[1]


@dataclass(frozen=True, eq=False)
class Mesh:
    """
    Conforming 2D simplicial mesh.

    Attributes:
        vertices: (Nv, 2) coordinates
        elements: (Ne, 3) vertex ids, counterclockwise
        refinement_edge: (Ne,) local index of the edge to bisect next
        parents: (Ne,) id of the ancestor element in the mesh this one was
            refined from, -1 for initial meshes
        vertex_parents: (Nv, 2) endpoints of the edge a vertex bisected,
            -1 rows for vertices inherited unchanged
    """
    vertices: np.ndarray
    elements: np.ndarray
    refinement_edge: np.ndarray
    parents: np.ndarray = None
    vertex_parents: np.ndarray = None
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=float)
        elements = np.ascontiguousarray(self.elements, dtype=np.int64)
        refinement_edge = np.ascontiguousarray(self.refinement_edge, dtype=np.int64)
        parents = self.parents
        if parents is None:
            parents = np.full(len(elements), -1, dtype=np.int64)
        vertex_parents = self.vertex_parents
        if vertex_parents is None:
            vertex_parents = np.full((len(vertices), 2), -1, dtype=np.int64)
        for name, value in (('vertices', vertices), ('elements', elements),
                            ('refinement_edge', refinement_edge),
                            ('parents', np.asarray(parents, dtype=np.int64)),
                            ('vertex_parents', np.asarray(vertex_parents, dtype=np.int64))):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

        if self.validate:
            if not np.all(np.isfinite(vertices)):
                raise MeshError("Mesh has non-finite vertex coordinates")
            if elements.ndim != 2 or elements.shape[1] != 3:
                raise MeshError("Elements must be an (Ne, 3) array")
            if elements.min(initial=0) < 0 or elements.max(initial=-1) >= len(vertices):
                raise MeshError("Element references a vertex that does not exist")
            bad = np.flatnonzero(self.signed_areas <= 0.0)
            if bad.size:
                raise MeshError(f"Element {bad[0]} has nonpositive signed area "
                                f"{self.signed_areas[bad[0]]:.3e}")
            counts = np.bincount(self.element_edges.ravel(), minlength=len(self.edges))
            if counts.max(initial=0) > 2:
                raise MeshError("An edge is shared by more than two elements")

    # ------------------------------------------------------------------
    # Sizes and entity access
    # ------------------------------------------------------------------

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_elements(self):
        return len(self.elements)

    def vertex(self, i):
        x, y = self.vertices[i]
        return Vertex(float(x), float(y))

    def element(self, t):
        return Element(tuple(int(v) for v in self.elements[t]), int(self.refinement_edge[t]))

    # ------------------------------------------------------------------
    # Geometry (vectorized over elements)
    # ------------------------------------------------------------------

    @cached_property
    def element_coords(self):
        """(Ne, 3, 2) vertex coordinates per element."""
        return self.vertices[self.elements]

    @cached_property
    def signed_areas(self):
        c = self.element_coords
        d1 = c[:, 1] - c[:, 0]
        d2 = c[:, 2] - c[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def areas(self):
        return np.abs(self.signed_areas)

    @cached_property
    def edge_vectors(self):
        """(Ne, 3, 2) vectors along local edges, v_{k+1} - v_k."""
        c = self.element_coords
        return c[:, LOCAL_EDGES[:, 1]] - c[:, LOCAL_EDGES[:, 0]]

    @cached_property
    def edge_lengths(self):
        return np.linalg.norm(self.edge_vectors, axis=2)

    @cached_property
    def diameters(self):
        """h_T: the longest edge of each triangle."""
        return self.edge_lengths.max(axis=1)

    @cached_property
    def outward_normals(self):
        """(Ne, 3, 2) outward unit normals of the local edges."""
        ev = self.edge_vectors
        normals = np.stack([ev[..., 1], -ev[..., 0]], axis=-1)
        return normals / self.edge_lengths[..., None]

    @cached_property
    def barycentric_gradients(self):
        """(Ne, 3, 2) constant gradients of the three hat functions."""
        # grad(lambda_k) = -n_opp * |e_opp| / (2|T|); edge opposite vertex k is k+1
        ev = self.edge_vectors
        opposite = ev[:, [1, 2, 0]]
        rotated = np.stack([opposite[..., 1], -opposite[..., 0]], axis=-1)
        return -rotated / (2.0 * self.signed_areas[:, None, None])

    @property
    def total_area(self):
        return float(self.areas.sum())

    def min_angle(self):
        """Smallest interior angle over all elements, in radians."""
        c = self.element_coords
        angles = []
        for k in range(3):
            u = c[:, (k + 1) % 3] - c[:, k]
            v = c[:, (k + 2) % 3] - c[:, k]
            cos = np.einsum('ij,ij->i', u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
            angles.append(np.arccos(np.clip(cos, -1.0, 1.0)))
        return float(np.min(angles))

    # ------------------------------------------------------------------
    # Topology
    # ------------------------------------------------------------------

    @cached_property
    def _edge_tables(self):
        local = self.elements[:, LOCAL_EDGES]  # (Ne, 3, 2)
        pairs = np.sort(local.reshape(-1, 2), axis=1)
        edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
        element_edges = inverse.reshape(-1, 3)
        edge_elements = np.full((len(edges), 2), -1, dtype=np.int64)
        edge_local = np.full((len(edges), 2), -1, dtype=np.int64)
        # Stable sort keeps element order: slot 0 holds the lower element id
        order = np.argsort(inverse, kind="stable")
        counts = np.bincount(inverse, minlength=len(edges))
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        first = order[starts]
        edge_elements[:, 0], edge_local[:, 0] = first // 3, first % 3
        two = np.flatnonzero(counts >= 2)
        second = order[starts[two] + 1]
        edge_elements[two, 1], edge_local[two, 1] = second // 3, second % 3
        return edges, element_edges, edge_elements, edge_local

    @property
    def edges(self):
        """(E, 2) sorted vertex pairs of all edges."""
        return self._edge_tables[0]

    @property
    def element_edges(self):
        """(Ne, 3) edge index of each local edge."""
        return self._edge_tables[1]

    @property
    def edge_elements(self):
        """(E, 2) incident elements of each edge, -1 where missing."""
        return self._edge_tables[2]

    @property
    def edge_local_index(self):
        """(E, 2) local edge index inside the incident elements."""
        return self._edge_tables[3]

    @cached_property
    def interior_edge_mask(self):
        return self.edge_elements[:, 1] >= 0

    @cached_property
    def boundary_edges(self):
        """Set of vertex-pair keys of edges on the domain boundary."""
        return {tuple(int(v) for v in e) for e in self.edges[~self.interior_edge_mask]}

    @cached_property
    def edge_to_elements(self):
        """Map from interior vertex-pair key to its two incident elements."""
        out = {}
        for e in np.flatnonzero(self.interior_edge_mask):
            a, b = self.edges[e]
            out[(int(a), int(b))] = (int(self.edge_elements[e, 0]), int(self.edge_elements[e, 1]))
        return out

    @cached_property
    def boundary_vertex_mask(self):
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.edges[~self.interior_edge_mask].ravel()] = True
        return mask

    def edge_index(self, key):
        """Index into self.edges of the edge with the given vertex-pair key."""
        key = edge_key(*key)
        lookup = self._edge_lookup
        if key not in lookup:
            raise MeshError(f"Edge {key} is not an edge of this mesh")
        return lookup[key]

    @cached_property
    def _edge_lookup(self):
        return {(int(a), int(b)): i for i, (a, b) in enumerate(self.edges)}


# ----------------------------------------------------------------------
# Construction
# ----------------------------------------------------------------------

def _from_triangles(vertices, triangles):
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    ref = np.array([_longest_local_edge(vertices[t], t) for t in triangles], dtype=np.int64)
    return Mesh(vertices, triangles, ref)


def build_unit_square(n):
    """
    Structured mesh of (0,1)^2 with 2 n^2 right triangles.

    Every cell is cut along its (i,j)-(i+1,j+1) diagonal.

    Args:
        n: cells per side, n >= 1

    Returns:
        Mesh
    """
    if n < 1:
        raise MeshError(f"build_unit_square needs n >= 1, got {n}")
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    triangles = []
    for j in range(n):
        for i in range(n):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            triangles.append((a, b, c))
            triangles.append((a, c, d))
    return _from_triangles(vertices, triangles)


def build_lshape(levels=0):
    """
    L-shaped domain (-1,1)^2 minus [0,1)x(-1,0].

    Level 0 is three unit squares split into two right triangles each, all
    diagonals ending at the re-entrant corner. Each further level is one
    uniform bisection pass.

    Args:
        levels: number of uniform passes, >= 0

    Returns:
        Mesh
    """
    if levels < 0:
        raise MeshError(f"build_lshape needs levels >= 0, got {levels}")
    vertices = [(-1.0, -1.0), (0.0, -1.0), (-1.0, 0.0), (0.0, 0.0),
                (1.0, 0.0), (-1.0, 1.0), (0.0, 1.0), (1.0, 1.0)]
    triangles = [
        (0, 1, 3), (0, 3, 2),   # [-1,0] x [-1,0]
        (2, 3, 5), (3, 6, 5),   # [-1,0] x [0,1]
        (3, 4, 7), (3, 7, 6),   # [0,1] x [0,1]
    ]
    mesh = _from_triangles(vertices, triangles)
    for _ in range(levels):
        mesh = refine_uniform(mesh)
    return mesh


# ----------------------------------------------------------------------
# Refinement
# ----------------------------------------------------------------------

class _Bisector:
    """Mutable working copy used while refine() runs."""

    def __init__(self, mesh):
        self.coords = [tuple(v) for v in mesh.vertices.tolist()]
        self.n_old_vertices = mesh.n_vertices
        self.vertex_parents = [(-1, -1)] * mesh.n_vertices
        self.tris = [tuple(t) for t in mesh.elements.tolist()]
        self.ref = mesh.refinement_edge.tolist()
        self.origin = list(range(mesh.n_elements))
        self.alive = [True] * mesh.n_elements
        self.edge_owners = {}
        for t, tri in enumerate(self.tris):
            for k in range(3):
                self.edge_owners.setdefault(edge_key(tri[k], tri[(k + 1) % 3]), []).append(t)

    def refinement_key(self, t):
        tri, k = self.tris[t], self.ref[t]
        return edge_key(tri[k], tri[(k + 1) % 3])

    def neighbor(self, t, key):
        for s in self.edge_owners[key]:
            if s != t:
                return s
        return None

    def refine_element(self, t):
        """Bisect along longest-edge propagation paths until t is split."""
        cap = 2 * sum(self.alive)
        steps = 0
        while self.alive[t]:
            current = t
            while True:
                key = self.refinement_key(current)
                other = self.neighbor(current, key)
                if other is None or self.refinement_key(other) == key:
                    self.bisect_edge(key)
                    break
                current = other
                steps += 1
                if steps > cap:
                    raise MeshError(f"Bisection of element {t} exceeded depth cap {cap}")

    def bisect_edge(self, key):
        a, b = key
        (xa, ya), (xb, yb) = self.coords[a], self.coords[b]
        m = len(self.coords)
        self.coords.append((0.5 * (xa + xb), 0.5 * (ya + yb)))
        self.vertex_parents.append(key)
        for t in list(self.edge_owners[key]):
            self.split(t, m)
        self.edge_owners.pop(key, None)

    def split(self, t, m):
        tri, k = self.tris[t], self.ref[t]
        a, b, o = tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]
        self.alive[t] = False
        for i in range(3):
            owners = self.edge_owners[edge_key(tri[i], tri[(i + 1) % 3])]
            owners.remove(t)
        for child in ((a, m, o), (m, b, o)):
            c = len(self.tris)
            self.tris.append(child)
            coords = np.array([self.coords[v] for v in child])
            self.ref.append(_longest_local_edge(coords, child))
            self.origin.append(self.origin[t])
            self.alive.append(True)
            for i in range(3):
                self.edge_owners.setdefault(edge_key(child[i], child[(i + 1) % 3]), []).append(c)

    def to_mesh(self):
        keep = [t for t, alive in enumerate(self.alive) if alive]
        return Mesh(
            vertices=np.array(self.coords),
            elements=np.array([self.tris[t] for t in keep], dtype=np.int64),
            refinement_edge=np.array([self.ref[t] for t in keep], dtype=np.int64),
            parents=np.array([self.origin[t] for t in keep], dtype=np.int64),
            vertex_parents=np.array(self.vertex_parents, dtype=np.int64),
        )


def refine(mesh, marked):
    """
    Longest-edge (Rivara) bisection of the marked elements.

    Each marked element is bisected at least once. Bisection always happens
    on a terminal edge of a longest-edge propagation path, so both triangles
    sharing it are split together and the mesh stays conforming.

    Args:
        mesh: Mesh to refine (left untouched)
        marked: iterable of element ids

    Returns:
        Mesh: the refined mesh, or `mesh` itself when nothing is marked
    """
    marked = sorted({int(t) for t in marked})
    if not marked:
        return mesh
    if marked[0] < 0 or marked[-1] >= mesh.n_elements:
        raise MeshError(f"Marked ids must lie in [0, {mesh.n_elements})")

    work = _Bisector(mesh)
    for t in marked:
        work.refine_element(t)
    refined = work.to_mesh()
    logger.debug("refine: %d marked, %d -> %d elements",
                 len(marked), mesh.n_elements, refined.n_elements)
    return refined


def refine_uniform(mesh):
    """Bisect every element at least once."""
    return refine(mesh, range(mesh.n_elements))


def check_child(old_mesh, new_mesh):
    """
    Raise MeshError unless new_mesh came from one refine() call on old_mesh.

    Old vertices keep their ids and coordinates, every new vertex records
    the edge it bisected, and every element records an ancestor in old_mesh.
    """
    n_old = old_mesh.n_vertices
    vp = new_mesh.vertex_parents
    ok = (
        new_mesh.n_vertices >= n_old
        and np.array_equal(new_mesh.vertices[:n_old], old_mesh.vertices)
        and np.all(vp[:n_old] == -1)
        and np.all((vp[n_old:] >= 0) & (vp[n_old:] < np.arange(n_old, new_mesh.n_vertices)[:, None]))
        and np.all((new_mesh.parents >= 0) & (new_mesh.parents < old_mesh.n_elements))
    )
    if not ok:
        raise MeshError(f"Mesh with {new_mesh.n_vertices} vertices is not a direct refinement "
                        f"of the mesh with {n_old} vertices")


def prolong_p1(old_mesh, new_mesh, values):
    """
    Carry nodal values from a mesh to its refinement.

    New vertices are edge midpoints and take the average of the two
    endpoints, which is exact for P1 functions.

    Args:
        old_mesh: coarse mesh
        new_mesh: refine(old_mesh, ...)
        values: (old_mesh.n_vertices,) nodal values

    Returns:
        np.ndarray: (new_mesh.n_vertices,) nodal values
    """
    if new_mesh is old_mesh:
        return np.array(values, dtype=float)
    check_child(old_mesh, new_mesh)
    out = np.empty(new_mesh.n_vertices)
    out[:old_mesh.n_vertices] = values
    parents = new_mesh.vertex_parents
    for v in range(old_mesh.n_vertices, new_mesh.n_vertices):
        a, b = parents[v]
        out[v] = 0.5 * (out[a] + out[b])
    return out


def prolong_p0(old_mesh, new_mesh, values):
    """Children inherit the value of their ancestor element."""
    if new_mesh is old_mesh:
        return np.array(values, dtype=float)
    check_child(old_mesh, new_mesh)
    return np.asarray(values, dtype=float)[new_mesh.parents]


# ----------------------------------------------------------------------
# Queries
# ----------------------------------------------------------------------

def star(mesh, t):
    """
    Elements sharing an interior edge with element t.

    Args:
        mesh: Mesh
        t: element id

    Returns:
        set: element ids; contains t itself iff t has an interior edge
    """
    result = set()
    for e in mesh.element_edges[t]:
        if mesh.interior_edge_mask[e]:
            result.update(int(s) for s in mesh.edge_elements[e])
    return result


def geometry(mesh, t):
    """
    Geometric data of one element.

    Args:
        mesh: Mesh
        t: element id

    Returns:
        ElementGeometry: area, diameter h_T, edge lengths and outward unit
            normals of the local edges
    """
    area = float(mesh.signed_areas[t])
    if not area > 0.0 or not math.isfinite(area):
        raise MeshError(f"Element {t} is degenerate (signed area {area:.3e}); mesh is corrupted")
    return ElementGeometry(
        area=area,
        diameter=float(mesh.diameters[t]),
        edge_lengths=mesh.edge_lengths[t].copy(),
        normals=mesh.outward_normals[t].copy(),
    )


def check_conforming(mesh):
    """
    Rebuild the edge table from scratch and look for hanging nodes.

    An edge seen by only one element must not have a mesh vertex at its
    midpoint; otherwise it is an interior edge with a hanging node.

    Raises:
        MeshError: if the mesh is not conforming
    """
    counts = {}
    for tri in mesh.elements.tolist():
        for k in range(3):
            key = edge_key(tri[k], tri[(k + 1) % 3])
            counts[key] = counts.get(key, 0) + 1
    if any(c > 2 for c in counts.values()):
        raise MeshError("Edge shared by more than two elements")
    points = {(round(x, 12), round(y, 12)) for x, y in mesh.vertices.tolist()}
    for (a, b), c in counts.items():
        if c == 1:
            mid = 0.5 * (mesh.vertices[a] + mesh.vertices[b])
            if (round(mid[0], 12), round(mid[1], 12)) in points:
                raise MeshError(f"Hanging node at the midpoint of edge {(a, b)}")
    if set(k for k, c in counts.items() if c == 2) != set(mesh.edge_to_elements):
        raise MeshError("Cached interior edge table is stale")


# ----------------------------------------------------------------------
# Plain-text dump
# ----------------------------------------------------------------------

def write_mesh_dump(mesh, path):
    """
    Write `v x y`, `t i j k` and `b i j` records, one per line.

    Args:
        mesh: Mesh
        path: output file path
    """
    with open(path, 'w', encoding='ascii') as fh:
        for x, y in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r}\n")
        for i, j, k in mesh.elements.tolist():
            fh.write(f"t {i} {j} {k}\n")
        for i, j in sorted(mesh.boundary_edges):
            fh.write(f"b {i} {j}\n")


def read_mesh_dump(path):
    """Read a mesh written by write_mesh_dump()."""
    vertices, triangles = [], []
    with open(path, encoding='ascii') as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            tag = parts[0]
            if tag == 'v':
                vertices.append((float(parts[1]), float(parts[2])))
            elif tag == 't':
                triangles.append((int(parts[1]), int(parts[2]), int(parts[3])))
            elif tag == 'b':
                continue
            else:
                raise MeshError(f"{path}:{lineno}: unknown record '{tag}'")
    return _from_triangles(vertices, triangles)
