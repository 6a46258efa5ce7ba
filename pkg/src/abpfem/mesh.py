"""Meshes over the benchmark domains.

Two cell kinds are supported on each domain:

* ``rect``: axis-aligned square cells organized as a 1-irregular quadtree
  (at most one hanging vertex per cell edge).  Sides are recovered
  geometrically by splitting every grid line into atomic segments, which
  also yields the hanging-vertex data consumed by the C1 space.
* ``tri``: triangles refined by newest-vertex bisection (adaptive) or red
  quadrisection (uniform).  A triangle is stored as (v0, v1, v2) with
  refinement edge (v0, v1) and peak v2; side identity is by vertex ids.

The slit square carries duplicated vertices along the slit so that the two
sheets touching it from above and below stay combinatorially separate.  On
rect meshes every slit-line grid vertex with 0 <= x <= 1 is duplicated and
the two copies of the tip (0, 0) are recorded as a tied pair (spaces glue
their DOFs back together); on tri meshes the tip stays a single vertex.

All rect coordinates are dyadic rationals, hence exact in binary floating
point; geometric matching below relies on that.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Domain",
    "Side",
    "Mesh",
    "MeshError",
    "InvalidH0",
    "build_initial_mesh",
    "refine_uniform",
    "refine_adaptive",
    "export_mesh",
]


class MeshError(Exception):
    pass


class InvalidH0(MeshError):
    pass


# ---------------------------------------------------------------------------
# domains


@dataclass(frozen=True)
class Domain:
    """Polygonal computational domain.

    kind is one of 'unit_square', 'l_shape', 'slit_square'.  `vertices`
    traces the boundary polygon (the slit square repeats the slit segment
    once per lip).  `diameter` is the Euclidean diameter of the closure,
    the quantity entering the ABP constant.
    """

    kind: str
    vertices: tuple
    diameter: float
    area: float
    perimeter: float

    @staticmethod
    def unit_square():
        return Domain(
            "unit_square",
            ((0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)),
            float(np.sqrt(2.0)),
            1.0,
            4.0,
        )

    @staticmethod
    def l_shape():
        return Domain(
            "l_shape",
            ((-1.0, -1.0), (0.0, -1.0), (0.0, 0.0), (1.0, 0.0), (1.0, 1.0),
             (-1.0, 1.0)),
            float(2.0 * np.sqrt(2.0)),
            3.0,
            8.0,
        )

    @staticmethod
    def slit_square():
        # Boundary walk enters the slit along the lower lip and returns
        # along the upper one; both lips belong to the boundary.
        return Domain(
            "slit_square",
            ((-1.0, -1.0), (1.0, -1.0), (1.0, 0.0), (0.0, 0.0), (1.0, 0.0),
             (1.0, 1.0), (-1.0, 1.0)),
            float(2.0 * np.sqrt(2.0)),
            4.0,
            10.0,
        )

    @staticmethod
    def by_kind(kind):
        return {
            "unit_square": Domain.unit_square,
            "l_shape": Domain.l_shape,
            "slit_square": Domain.slit_square,
        }[kind]()

    def grid_origin(self):
        return (0.0, 0.0) if self.kind == "unit_square" else (-1.0, -1.0)

    def grid_extent(self):
        return 1.0 if self.kind == "unit_square" else 2.0

    def cell_center_inside(self, cx, cy):
        if self.kind == "unit_square":
            return 0.0 < cx < 1.0 and 0.0 < cy < 1.0
        if self.kind == "l_shape":
            # remove the closed quadrant [0,1] x [-1,0]
            return not (cx > 0.0 and cy < 0.0)
        return -1.0 < cx < 1.0 and -1.0 < cy < 1.0

    def has_slit(self):
        return self.kind == "slit_square"


def _on_slit(domain, x, y, include_tip):
    if not domain.has_slit() or y != 0.0:
        return False
    lo = 0.0 if include_tip else np.nextafter(0.0, 1.0)
    return lo <= x <= 1.0


# ---------------------------------------------------------------------------
# mesh containers


@dataclass(frozen=True)
class Side:
    """One mesh side (atomic edge segment).

    cells holds the adjacent cell indices (two for interior sides, one for
    boundary sides).  normal is the unit normal oriented away from
    cells[0].  lip is 0 off the slit, +1 on the upper lip, -1 on the lower
    lip (boundary sides on the slit only).
    """

    v0: int
    v1: int
    cells: tuple
    h: float
    normal: tuple
    boundary: bool
    lip: int = 0


@dataclass(frozen=True)
class Mesh:
    domain: Domain
    cell_kind: str                 # 'rect' | 'tri'
    vertices: np.ndarray           # (V, 2)
    cells: np.ndarray              # (N, 4) rect / (N, 3) tri
    levels: np.ndarray             # (N,) per-cell generation
    level: int                     # refinement counter of the whole mesh
    sides: tuple = field(repr=False, default=())
    hanging: tuple = field(repr=False, default=())   # (slave, va, vb) rect only
    tied_pairs: tuple = ()         # ((primary, duplicate),...) slit tip on rect

    def __post_init__(self):
        self.vertices.flags.writeable = False
        self.cells.flags.writeable = False
        self.levels.flags.writeable = False

    @property
    def ncells(self):
        return self.cells.shape[0]

    @property
    def nvertices(self):
        return self.vertices.shape[0]

    def cell_sizes(self):
        """Edge length per cell (rect kind only)."""
        if self.cell_kind != "rect":
            raise MeshError("cell_sizes is defined for rect meshes")
        v = self.vertices
        return v[self.cells[:, 1], 0] - v[self.cells[:, 0], 0]

    def cell_diameters(self):
        v = self.vertices
        if self.cell_kind == "rect":
            return self.cell_sizes() * np.sqrt(2.0)
        p = v[self.cells]                      # (N,3,2)
        e = p - p[:, [1, 2, 0]]
        return np.sqrt((e ** 2).sum(axis=2)).max(axis=1)

    def cell_areas(self):
        v = self.vertices
        if self.cell_kind == "rect":
            return self.cell_sizes() ** 2
        p = v[self.cells]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def cell_centers(self):
        return self.vertices[self.cells].mean(axis=1)

    def vertex_lips(self):
        """Per-vertex slit tag: +1 upper sheet, -1 lower sheet, 0 off slit.

        A duplicated slit vertex is referenced only by cells on its own
        side; the single tri tip (referenced from both sides) stays 0.
        """
        lips = np.zeros(self.nvertices, dtype=np.int64)
        if not self.domain.has_slit():
            return lips
        cy = self.cell_centers()[:, 1]
        above = np.zeros(self.nvertices, dtype=bool)
        below = np.zeros(self.nvertices, dtype=bool)
        for c in range(self.ncells):
            if cy[c] > 0.0:
                above[self.cells[c]] = True
            else:
                below[self.cells[c]] = True
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        on = (y == 0.0) & (x >= 0.0) & (x <= 1.0)
        lips[on & above & ~below] = 1
        lips[on & below & ~above] = -1
        return lips


# ---------------------------------------------------------------------------
# vertex registry
#
# Keys are (x, y, cls) with cls = 0 off the slit, +-1 for the two sheets of
# a duplicated slit vertex.  Coordinates are exact dyadics on rect meshes.


class _VertexRegistry:
    def __init__(self, coords=None, classes=None):
        self.coords = [] if coords is None else [tuple(p) for p in coords]
        self.lookup = {}
        if coords is not None:
            classes = classes if classes is not None else [0] * len(self.coords)
            for i, (p, c) in enumerate(zip(self.coords, classes)):
                self.lookup[(p[0], p[1], c)] = i

    def get(self, x, y, cls=0):
        key = (x, y, cls)
        i = self.lookup.get(key)
        if i is None:
            i = len(self.coords)
            self.coords.append((x, y))
            self.lookup[key] = i
        return i

    def array(self):
        return np.array(self.coords, dtype=float)


def _slit_class(domain, x, y, side_sign, include_tip):
    """Registry class of the point (x, y) requested from a cell whose
    center lies on side_sign (+1 above / -1 below the slit line)."""
    if _on_slit(domain, x, y, include_tip):
        return side_sign
    return 0


# ---------------------------------------------------------------------------
# initial meshes


def _check_h0(domain, cell_kind, h0):
    if not (0.0 < h0 <= 1.0):
        raise InvalidH0(f"h0 = {h0} does not tile {domain.kind}")
    n = 1.0 / h0
    if abs(n - round(n)) > 1e-9:
        raise InvalidH0(f"h0 = {h0} does not tile {domain.kind}")
    if cell_kind == "rect":
        # dyadic pitch keeps every coordinate exact; geometric side matching
        # depends on it
        k = np.log2(round(n))
        if abs(k - round(k)) > 1e-9:
            raise InvalidH0(
                f"rect meshes need dyadic h0 (1, 1/2, 1/4, ...), got {h0}")
    return int(round(n))


def _grid_squares(domain, h0):
    """Lower-left corners (exact dyadics) of the grid squares inside the
    domain, in row-major order."""
    npc = int(round(domain.grid_extent() / h0))
    ox, oy = domain.grid_origin()
    squares = []
    for j in range(npc):
        for i in range(npc):
            x0 = ox + i * h0
            y0 = oy + j * h0
            if domain.cell_center_inside(x0 + 0.5 * h0, y0 + 0.5 * h0):
                squares.append((x0, y0))
    return squares


def build_initial_mesh(domain, cell_kind, h0=1.0):
    """Uniform initial mesh of pitch h0 (rect cells, or two triangles per
    grid square split along the SW-NE diagonal)."""
    if cell_kind not in ("rect", "tri"):
        raise MeshError(f"unknown cell kind {cell_kind!r}")
    _check_h0(domain, cell_kind, h0)
    squares = _grid_squares(domain, h0)
    include_tip = cell_kind == "rect"   # tri keeps a single tip vertex
    reg = _VertexRegistry()
    cells = []
    for (x0, y0) in squares:
        x1, y1 = x0 + h0, y0 + h0
        sgn = 1 if y0 + 0.5 * h0 > 0.0 else -1
        corner = [
            reg.get(x, y, _slit_class(domain, x, y, sgn, include_tip))
            for (x, y) in ((x0, y0), (x1, y0), (x1, y1), (x0, y1))
        ]
        if cell_kind == "rect":
            cells.append(corner)
        else:
            sw, se, ne, nw = corner
            # refinement edge first two (the diagonal), positive orientation
            cells.append([ne, sw, se])
            cells.append([sw, ne, nw])
    vertices = reg.array()
    cells = np.array(cells, dtype=np.int64)
    levels = np.zeros(len(cells), dtype=np.int64)
    tied = ()
    if domain.has_slit() and cell_kind == "rect":
        a = reg.lookup[(0.0, 0.0, 1)]
        b = reg.lookup[(0.0, 0.0, -1)]
        tied = ((min(a, b), max(a, b)),)
    sides, hanging = _build_sides(domain, cell_kind, vertices, cells)
    return Mesh(domain, cell_kind, vertices, cells, levels, 0,
                tuple(sides), tuple(hanging), tied)


# ---------------------------------------------------------------------------
# side construction
#
# rect: every cell edge is an axis-aligned segment on a grid line.  Segments
# on one line are chopped at the union of their endpoints into atoms; each
# atom with cells on both sides is an interior side, each single-sided atom
# a boundary side.  On the slit line y=0, x in [0,1] the two sheets get
# separate groups so the lips never pair up.  A cell edge covered by two
# atoms contributes a hanging vertex at the split point.


def _build_sides(domain, cell_kind, vertices, cells):
    if cell_kind == "rect":
        return _build_sides_rect(domain, vertices, cells)
    return _build_sides_tri(domain, vertices, cells)


def _rect_edges(vertices, cells):
    """Per cell: four (axis, line, lo, hi) edge records.

    axis 0 = edge along x (horizontal, line is its y); axis 1 = along y.
    """
    v = vertices
    out = []
    for c, (sw, se, ne, nw) in enumerate(cells):
        x0, y0 = v[sw]
        x1, y1 = v[ne]
        out.append((c, ((0, y0, x0, x1), (0, y1, x0, x1),
                        (1, x0, y0, y1), (1, x1, y0, y1))))
    return out


def _slit_group(domain, axis, line, lo, hi, sign):
    """Group tag separating the two slit sheets: nonzero only for
    horizontal segments inside the closed slit span."""
    if domain.has_slit() and axis == 0 and line == 0.0 and lo >= 0.0 and hi <= 1.0:
        return sign
    return 0


def _build_sides_rect(domain, vertices, cells):
    v = vertices
    centers = {}
    edge_recs = _rect_edges(vertices, cells)
    for c, _ in edge_recs:
        sw = cells[c][0]
        ne = cells[c][2]
        centers[c] = (0.5 * (v[sw, 0] + v[ne, 0]), 0.5 * (v[sw, 1] + v[ne, 1]))

    # group segments by (axis, line, slit-sheet)
    groups = {}
    seg_of_cell_edge = []
    for c, edges in edge_recs:
        cx, cy = centers[c]
        for (axis, line, lo, hi) in edges:
            coord = cy if axis == 0 else cx
            sgn = 1 if coord > line else -1
            grp = (axis, line, _slit_group(domain, axis, line, lo, hi, sgn))
            groups.setdefault(grp, []).append((lo, hi, c, sgn))
            seg_of_cell_edge.append((grp, lo, hi, c))

    # chop each group into atoms
    atom_map = {}   # (grp, a, b) -> {+1: cell, -1: cell}
    group_cuts = {}
    for grp, segs in groups.items():
        cuts = np.array(sorted({e for (lo, hi, _, _) in segs for e in (lo, hi)}))
        group_cuts[grp] = cuts
        for (lo, hi, c, sgn) in segs:
            i0 = int(np.searchsorted(cuts, lo))
            i1 = int(np.searchsorted(cuts, hi))
            for k in range(i0, i1):
                key = (grp, cuts[k], cuts[k + 1])
                slot = atom_map.setdefault(key, {})
                if sgn in slot:
                    raise MeshError("overlapping cells detected")
                slot[sgn] = c

    # vertex lookup by coordinates (several ids on duplicated slit points)
    by_coord = {}
    for i, p in enumerate(map(tuple, v)):
        by_coord.setdefault(p, []).append(i)

    def vid_at(x, y, adjacent_cells):
        cand = by_coord.get((x, y), [])
        if len(cand) == 1:
            return cand[0]
        for c in adjacent_cells:
            owned = set(int(t) for t in cells[c])
            for i in cand:
                if i in owned:
                    return i
        raise MeshError(f"no vertex at ({x},{y}) adjacent to {adjacent_cells}")

    sides = []
    for key in sorted(atom_map, key=lambda k: (k[0][0], k[0][1], k[1], k[0][2])):
        (axis, line, sheet), a, b = key
        slot = atom_map[key]
        h = b - a
        if axis == 0:
            p0, p1 = (a, line), (b, line)
        else:
            p0, p1 = (line, a), (line, b)
        plus = slot.get(1)
        minus = slot.get(-1)
        if plus is not None and minus is not None:
            adj = (plus, minus) if plus < minus else (minus, plus)
            va = vid_at(*p0, adj)
            vb = vid_at(*p1, adj)
            n = _outward_normal(axis, line, centers[adj[0]])
            sides.append(Side(va, vb, adj, h, n, False, 0))
        else:
            c = plus if plus is not None else minus
            va = vid_at(*p0, (c,))
            vb = vid_at(*p1, (c,))
            n = _outward_normal(axis, line, centers[c])
            sides.append(Side(va, vb, (c,), h, n, True, sheet))

    # hanging vertices: cell edges covered by two atoms
    hanging = []
    seen = set()
    for grp, lo, hi, c in seg_of_cell_edge:
        (axis, line, sheet) = grp
        cuts_all = group_cuts[grp]
        i0 = int(np.searchsorted(cuts_all, lo, side="right"))
        i1 = int(np.searchsorted(cuts_all, hi, side="left"))
        cuts = [float(e) for e in cuts_all[i0:i1]]
        if not cuts:
            continue
        if len(cuts) > 1:
            raise MeshError("mesh is not 1-irregular")
        mid = cuts[0]
        if axis == 0:
            pa, pm, pb = (lo, line), (mid, line), (hi, line)
        else:
            pa, pm, pb = (line, lo), (line, mid), (line, hi)
        va = vid_at(*pa, (c,))
        vb = vid_at(*pb, (c,))
        # the slave belongs to the fine cells across the two atoms
        fine = []
        for seg in ((lo, mid), (mid, hi)):
            slot = atom_map[(grp, seg[0], seg[1])]
            for cc in slot.values():
                if cc != c:
                    fine.append(cc)
        vm = vid_at(*pm, tuple(fine))
        if vm not in seen:
            seen.add(vm)
            hanging.append((vm, va, vb))
    return sides, hanging


def _outward_normal(axis, line, center_first):
    if axis == 0:
        n = (0.0, 1.0) if center_first[1] < line else (0.0, -1.0)
    else:
        n = (1.0, 0.0) if center_first[0] < line else (-1.0, 0.0)
    return n


def _build_sides_tri(domain, vertices, cells):
    v = vertices
    edge_cells = {}
    order = []
    for c, tri in enumerate(cells):
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            key = (a, b) if a < b else (b, a)
            if key not in edge_cells:
                edge_cells[key] = []
                order.append(key)
            edge_cells[key].append(c)
    centers = v[cells].mean(axis=1)
    sides = []
    for key in order:
        cs = edge_cells[key]
        if len(cs) > 2:
            raise MeshError("edge shared by more than two triangles")
        a, b = key
        pa, pb = v[a], v[b]
        t = pb - pa
        h = float(np.hypot(t[0], t[1]))
        n = np.array([t[1], -t[0]]) / h
        mid = 0.5 * (pa + pb)
        if np.dot(n, mid - centers[cs[0]]) < 0:
            n = -n
        lip = 0
        boundary = len(cs) == 1
        if boundary and domain.has_slit() and pa[1] == 0.0 and pb[1] == 0.0 \
                and min(pa[0], pb[0]) >= 0.0 and max(pa[0], pb[0]) <= 1.0:
            lip = 1 if centers[cs[0]][1] > 0.0 else -1
        sides.append(Side(a, b, tuple(sorted(cs)), h,
                          (float(n[0]), float(n[1])), boundary, lip))
    return sides, []


# ---------------------------------------------------------------------------
# refinement


def _rect_split(domain, mesh, to_split):
    """Split the given rect cells into four; shared midpoints resolved via
    the coordinate registry with slit-sheet classes."""
    v = mesh.vertices
    lips = mesh.vertex_lips()
    reg = _VertexRegistry(v, list(lips))
    new_cells = []
    new_levels = []
    for c in range(mesh.ncells):
        if c not in to_split:
            new_cells.append(list(mesh.cells[c]))
            new_levels.append(int(mesh.levels[c]))
            continue
        sw, se, ne, nw = (int(t) for t in mesh.cells[c])
        x0, y0 = v[sw]
        x1, y1 = v[ne]
        xm, ym = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
        sgn = 1 if ym > 0.0 else -1

        def gid(x, y):
            return reg.get(x, y, _slit_class(domain, x, y, sgn, True))

        ms = gid(xm, y0)
        me = gid(x1, ym)
        mn = gid(xm, y1)
        mw = gid(x0, ym)
        ce = gid(xm, ym)
        lvl = int(mesh.levels[c]) + 1
        for quad in ((sw, ms, ce, mw), (ms, se, me, ce),
                     (ce, me, ne, mn), (mw, ce, mn, nw)):
            new_cells.append(list(quad))
            new_levels.append(lvl)
    vertices = reg.array()
    cells = np.array(new_cells, dtype=np.int64)
    levels = np.array(new_levels, dtype=np.int64)
    sides, hanging = _build_sides(domain, "rect", vertices, cells)
    return Mesh(domain, "rect", vertices, cells, levels, mesh.level + 1,
                tuple(sides), tuple(hanging), mesh.tied_pairs)


def _rect_closure(mesh, marked):
    """Extend the split set so the refined mesh stays 1-irregular: splitting
    a cell forces any edge-neighbor one generation coarser to split too."""
    neighbors = {}
    for s in mesh.sides:
        if len(s.cells) == 2:
            a, b = s.cells
            neighbors.setdefault(a, set()).add(b)
            neighbors.setdefault(b, set()).add(a)
    to_split = set(int(c) for c in marked)
    stack = sorted(to_split)
    while stack:
        c = stack.pop()
        for nb in sorted(neighbors.get(c, ())):
            if mesh.levels[nb] < mesh.levels[c] and nb not in to_split:
                to_split.add(nb)
                stack.append(nb)
    return to_split


def _tri_bisect(domain, mesh, marked_cells):
    """Newest-vertex bisection with closure on the marked-edge set."""
    v = mesh.vertices
    cells = mesh.cells

    def edge_key(a, b):
        return (a, b) if a < b else (b, a)

    marked_edges = set()
    for c in marked_cells:
        a, b = int(cells[c][0]), int(cells[c][1])
        marked_edges.add(edge_key(a, b))
    # closure: any triangle touching a marked edge gets its refinement edge
    # marked; iterate to a fixpoint
    changed = True
    while changed:
        changed = False
        for c in range(mesh.ncells):
            t = cells[c]
            eref = edge_key(int(t[0]), int(t[1]))
            if eref in marked_edges:
                continue
            for k in range(3):
                if edge_key(int(t[k]), int(t[(k + 1) % 3])) in marked_edges:
                    marked_edges.add(eref)
                    changed = True
                    break

    lips = mesh.vertex_lips()
    reg = _VertexRegistry(v, list(lips))
    midpoint = {}

    def mid(a, b):
        key = edge_key(a, b)
        m = midpoint.get(key)
        if m is None:
            xa, ya = reg.coords[a]
            xb, yb = reg.coords[b]
            xm, ym = 0.5 * (xa + xb), 0.5 * (ya + yb)
            cls = 0
            if _on_slit(domain, xm, ym, False):
                # both endpoint ids live on one sheet; inherit it
                la, lb = lips[a] if a < len(lips) else 0, \
                         lips[b] if b < len(lips) else 0
                cls = int(la or lb)
            m = reg.get(xm, ym, cls)
            midpoint[key] = m
        return m

    new_cells = []
    new_levels = []

    def emit(v0, v1, v2, lvl):
        # keep positive orientation; swapping v0, v1 preserves the
        # refinement edge as an unordered pair
        p0, p1, p2 = reg.coords[v0], reg.coords[v1], reg.coords[v2]
        signed = (p1[0] - p0[0]) * (p2[1] - p0[1]) \
            - (p2[0] - p0[0]) * (p1[1] - p0[1])
        if signed < 0:
            v0, v1 = v1, v0
        new_cells.append([v0, v1, v2])
        new_levels.append(lvl)

    def bisect_once(v0, v1, v2, lvl, budget):
        """Children of (v0,v1 | peak v2); each child's refinement edge is an
        original outer edge and is split again if marked (budget limits the
        recursion to the two NVB rounds of one pass)."""
        m = mid(v0, v1)
        for (a, b) in ((v0, v2), (v1, v2)):
            # child (a, b | peak m) has refinement edge (a, b)
            if budget > 0 and edge_key(a, b) in marked_edges:
                m2 = mid(a, b)
                emit(a, m, m2, lvl + 2)
                emit(b, m, m2, lvl + 2)
            else:
                emit(a, b, m, lvl + 1)

    for c in range(mesh.ncells):
        v0, v1, v2 = (int(t) for t in cells[c])
        if edge_key(v0, v1) in marked_edges:
            bisect_once(v0, v1, v2, int(mesh.levels[c]), 1)
        else:
            emit(v0, v1, v2, int(mesh.levels[c]))

    vertices = reg.array()
    cells_arr = np.array(new_cells, dtype=np.int64)
    levels = np.array(new_levels, dtype=np.int64)
    sides, hanging = _build_sides(domain, "tri", vertices, cells_arr)
    return Mesh(domain, "tri", vertices, cells_arr, levels, mesh.level + 1,
                tuple(sides), tuple(hanging), mesh.tied_pairs)


def _tri_red(domain, mesh):
    """Red quadrisection of every triangle; children similar to the parent,
    refinement edges reassigned by the longest-edge rule."""
    v = mesh.vertices
    lips = mesh.vertex_lips()
    reg = _VertexRegistry(v, list(lips))
    midpoint = {}

    def edge_key(a, b):
        return (a, b) if a < b else (b, a)

    def mid(a, b):
        key = edge_key(a, b)
        m = midpoint.get(key)
        if m is None:
            xa, ya = reg.coords[a]
            xb, yb = reg.coords[b]
            xm, ym = 0.5 * (xa + xb), 0.5 * (ya + yb)
            cls = 0
            if _on_slit(domain, xm, ym, False):
                cls = int(lips[a] or lips[b])
            m = reg.get(xm, ym, cls)
            midpoint[key] = m
        return m

    new_cells = []
    new_levels = []
    for c in range(mesh.ncells):
        v0, v1, v2 = (int(t) for t in mesh.cells[c])
        m01, m12, m20 = mid(v0, v1), mid(v1, v2), mid(v2, v0)
        lvl = int(mesh.levels[c]) + 1
        for tri in ((v0, m01, m20), (m01, v1, m12), (m20, m12, v2),
                    (m01, m12, m20)):
            new_cells.append(_orient_refedge(reg.coords, tri))
            new_levels.append(lvl)
    vertices = reg.array()
    cells_arr = np.array(new_cells, dtype=np.int64)
    levels = np.array(new_levels, dtype=np.int64)
    sides, hanging = _build_sides(domain, "tri", vertices, cells_arr)
    return Mesh(domain, "tri", vertices, cells_arr, levels, mesh.level + 1,
                tuple(sides), tuple(hanging), mesh.tied_pairs)


def _orient_refedge(coords, tri):
    """Order (v0, v1, v2) so (v0, v1) is the longest edge (first wins ties,
    exact dyadic comparisons) and orientation is positive."""
    best, best_len = 0, -1.0
    for k in range(3):
        a, b = tri[k], tri[(k + 1) % 3]
        d2 = (coords[a][0] - coords[b][0]) ** 2 + (coords[a][1] - coords[b][1]) ** 2
        if d2 > best_len:
            best, best_len = k, d2
    out = [tri[best], tri[(best + 1) % 3], tri[(best + 2) % 3]]
    p0, p1, p2 = (coords[i] for i in out)
    signed = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])
    if signed < 0:
        out[0], out[1] = out[1], out[0]
    return out


def refine_uniform(mesh):
    """Refine every cell: rect cells quadrisect, triangles quadrisect (red).
    Maximum cell diameter halves exactly; the cell count quadruples."""
    if mesh.cell_kind == "rect":
        return _rect_split(mesh.domain, mesh, set(range(mesh.ncells)))
    return _tri_red(mesh.domain, mesh)


def refine_adaptive(mesh, marked):
    """Refine (at least) the marked cells.

    rect: quadrisection with 1-irregularity closure.  tri: newest-vertex
    bisection with marked-edge closure.  With nothing marked the mesh is
    returned unchanged."""
    marked = [int(c) for c in marked]
    if any(c < 0 or c >= mesh.ncells for c in marked):
        raise MeshError("marked cell index out of range")
    if not marked:
        return mesh
    if mesh.cell_kind == "rect":
        return _rect_split(mesh.domain, mesh, _rect_closure(mesh, marked))
    return _tri_bisect(mesh.domain, mesh, marked)


# ---------------------------------------------------------------------------
# export


def export_mesh(mesh):
    """Plain-text mesh dump: header, vertex lines, cell lines."""
    lines = [f"cells={mesh.ncells} vertices={mesh.nvertices} kind={mesh.cell_kind}"]
    for (x, y) in mesh.vertices:
        lines.append(f"{x:.17g} {y:.17g}")
    for cell in mesh.cells:
        lines.append(" ".join(str(int(i)) for i in cell))
    return "\n".join(lines) + "\n"
