"""Reference-configuration triangulations with a conformal internal interface.

A :class:`Mesh` stores nodes, region-tagged triangles, tagged boundary edges
and two-sided interface facets.  Facets carry the triangle on each side and a
unit normal ``m_s`` that points from the minus side to the plus side, so the
jump of a quantity reads ``[[a]] = a_plus - a_minus``.

The plain-text format is::

    poromix-mesh 1
    nodes N
    x y
    ...
    triangles M
    i j k region
    ...
    boundary B
    i j tag
    ...
    interface F
    i j tri_plus tri_minus
    ...

Indices are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import re

import numpy as np

__all__ = [
    "Mesh",
    "MeshError",
    "MeshParseError",
    "MeshTopologyError",
    "gen_two_squares",
    "refine_uniform",
    "load_mesh",
    "save_mesh",
    "read_mesh",
    "write_mesh",
    "validate_mesh",
    "triangle_areas",
]

_TAG_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_\-]*$")


class MeshError(ValueError):
    """Base class for mesh problems."""


class MeshParseError(MeshError):
    """Malformed mesh text; the message names the offending line."""

    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class MeshTopologyError(MeshError):
    """A mesh invariant does not hold."""


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable triangulation of the reference configuration.

    Parameters
    ----------
    nodes : (N, 2) float array
        Reference coordinates [m].
    triangles : (M, 3) int array
        Counterclockwise vertex indices.
    regions : (M,) str array
        Region tag of each triangle.
    boundary_edges : (B, 2) int array
    boundary_tags : (B,) str array
    facets : (F, 2) int array
        Interface facet vertices.
    facet_plus, facet_minus : (F,) int arrays
        Adjacent triangles on the plus and minus side.
    facet_normals : (F, 2) float array, optional
        Unit normal pointing from minus to plus.  Recomputed when omitted.
    h : float, optional
        Nominal mesh size.  Defaults to the longest edge.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    regions: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    facets: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), int))
    facet_plus: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    facet_minus: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    facet_normals: np.ndarray | None = None
    h: float | None = None

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "nodes", _frozen(np.reshape(self.nodes, (-1, 2)), float))
        set_(self, "triangles", _frozen(np.reshape(self.triangles, (-1, 3)), np.int64))
        set_(self, "regions", _frozen(self.regions, str))
        set_(self, "boundary_edges", _frozen(np.reshape(self.boundary_edges, (-1, 2)), np.int64))
        set_(self, "boundary_tags", _frozen(self.boundary_tags, str))
        set_(self, "facets", _frozen(np.reshape(self.facets, (-1, 2)), np.int64))
        set_(self, "facet_plus", _frozen(self.facet_plus, np.int64))
        set_(self, "facet_minus", _frozen(self.facet_minus, np.int64))
        if len(self.regions) != len(self.triangles):
            raise MeshTopologyError("one region tag per triangle is required")
        if len(self.boundary_tags) != len(self.boundary_edges):
            raise MeshTopologyError("one tag per boundary edge is required")
        if not (len(self.facet_plus) == len(self.facet_minus) == len(self.facets)):
            raise MeshTopologyError("each interface facet needs a plus and a minus triangle")
        if self.facet_normals is None:
            set_(self, "facet_normals", _frozen(_facet_normals(self), float))
        else:
            set_(self, "facet_normals", _frozen(np.reshape(self.facet_normals, (-1, 2)), float))
        if self.h is None:
            e = self.nodes[self.triangles[:, [1, 2, 0]]] - self.nodes[self.triangles]
            h = float(np.sqrt((e**2).sum(-1)).max()) if len(e) else 0.0
            set_(self, "h", h)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    @property
    def region_names(self) -> tuple[str, ...]:
        """Sorted distinct region tags."""
        return tuple(sorted(set(self.regions.tolist())))

    @property
    def boundary_names(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.boundary_tags.tolist())))

    def facet_lengths(self) -> np.ndarray:
        d = self.nodes[self.facets[:, 1]] - self.nodes[self.facets[:, 0]]
        return np.sqrt((d**2).sum(-1))

    def interface_length(self) -> float:
        return float(self.facet_lengths().sum())

    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)


def triangle_areas(mesh: Mesh) -> np.ndarray:
    """Signed areas of all triangles."""
    p = mesh.nodes[mesh.triangles]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    return 0.5 * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])


def _facet_normals(mesh: Mesh) -> np.ndarray:
    # left normal of i->j, flipped so it points away from the minus triangle
    if mesh.n_facets == 0:
        return np.zeros((0, 2))
    xi = mesh.nodes[mesh.facets[:, 0]]
    xj = mesh.nodes[mesh.facets[:, 1]]
    d = xj - xi
    nrm = np.stack([-d[:, 1], d[:, 0]], axis=1)
    length = np.sqrt((nrm**2).sum(-1, keepdims=True))
    nrm = nrm / np.where(length > 0, length, 1.0)
    cm = mesh.nodes[mesh.triangles[mesh.facet_minus]].mean(axis=1)
    mid = 0.5 * (xi + xj)
    flip = ((mid - cm) * nrm).sum(-1) < 0
    nrm[flip] *= -1.0
    return nrm


def _edge_key(edges: np.ndarray) -> np.ndarray:
    return np.sort(edges, axis=1)


def _triangle_edges(tris: np.ndarray) -> np.ndarray:
    """(M, 3, 2) local edges (0-1, 1-2, 2-0)."""
    return np.stack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]], axis=1)


def validate_mesh(mesh: Mesh, tol: float = 1e-12) -> None:
    """Check every mesh invariant, raising :class:`MeshTopologyError`.

    Checked: counterclockwise triangles, two-region interface facets with a
    consistent minus-to-plus unit normal, conformity of facets with element
    edges, the 1D manifold property of the interface, boundary edges matching
    the topological boundary, and that every edge separating two regions is
    an interface facet.
    """
    nn = mesh.n_nodes
    for name, arr in (("triangles", mesh.triangles), ("boundary", mesh.boundary_edges),
                      ("interface", mesh.facets)):
        if arr.size and (arr.min() < 0 or arr.max() >= nn):
            raise MeshTopologyError(f"{name}: node index out of range")
    areas = triangle_areas(mesh)
    scale = max(mesh.h, 1e-300) ** 2
    bad = np.nonzero(areas <= tol * scale)[0]
    if len(bad):
        raise MeshTopologyError(
            f"orientation: triangle {bad[0]} has non-positive signed area {areas[bad[0]]:.3e} "
            "(vertices must be counterclockwise)")

    edges = _edge_key(_triangle_edges(mesh.triangles).reshape(-1, 2))
    uniq, inverse, counts = np.unique(edges, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    if counts.max(initial=0) > 2:
        k = int(np.argmax(counts))
        raise MeshTopologyError(f"conformity: edge {tuple(uniq[k])} is shared by more than two triangles")
    edge_set = {tuple(e): c for e, c in zip(uniq.tolist(), counts.tolist())}
    owners: dict[tuple, list] = {}
    for idx, k in enumerate(inverse.tolist()):
        owners.setdefault(tuple(uniq[k].tolist()), []).append(idx // 3)

    # boundary edges = edges of exactly one triangle
    topo = {e for e, c in edge_set.items() if c == 1}
    bset = [tuple(sorted(e)) for e in mesh.boundary_edges.tolist()]
    if len(set(bset)) != len(bset):
        raise MeshTopologyError("boundary: duplicate boundary edge")
    missing = topo - set(bset)
    extra = set(bset) - topo
    if missing:
        raise MeshTopologyError(f"boundary: topological boundary edge {sorted(missing)[0]} is untagged")
    if extra:
        raise MeshTopologyError(f"boundary: tagged edge {sorted(extra)[0]} is not on the boundary")
    for t in mesh.boundary_tags.tolist():
        if not _TAG_RE.match(t):
            raise MeshTopologyError(f"boundary: invalid tag {t!r}")
    for t in set(mesh.regions.tolist()):
        if not _TAG_RE.match(t):
            raise MeshTopologyError(f"region: invalid tag {t!r}")

    nt = mesh.n_triangles
    fkeys = [tuple(sorted(f)) for f in mesh.facets.tolist()]
    if len(set(fkeys)) != len(fkeys):
        raise MeshTopologyError("interface: duplicate facet")
    for k, (key, tp, tm) in enumerate(zip(fkeys, mesh.facet_plus.tolist(), mesh.facet_minus.tolist())):
        if not (0 <= tp < nt and 0 <= tm < nt):
            raise MeshTopologyError(f"interface: facet {k} references a missing triangle")
        own = owners.get(key, [])
        if sorted(own) != sorted([tp, tm]) or tp == tm:
            raise MeshTopologyError(
                f"conformity: facet {k} is not the common edge of triangles {tp} and {tm}")
        if mesh.regions[tp] == mesh.regions[tm]:
            raise MeshTopologyError(
                f"interface: facet {k} separates triangles {tp} and {tm} of the same region "
                f"{mesh.regions[tp]!r}")
    if mesh.n_facets:
        m = mesh.facet_normals
        if not np.allclose((m**2).sum(-1), 1.0, atol=1e-12):
            raise MeshTopologyError("interface: facet normal is not a unit vector")
        d = mesh.nodes[mesh.facets[:, 1]] - mesh.nodes[mesh.facets[:, 0]]
        dots = np.abs((d * m).sum(-1)) / np.sqrt((d**2).sum(-1))
        if dots.max() > 1e-10:
            raise MeshTopologyError(f"interface: normal of facet {int(np.argmax(dots))} is not orthogonal")
        ref = _facet_normals(mesh)
        wrong = np.nonzero((ref * m).sum(-1) < 1 - 1e-10)[0]
        if len(wrong):
            raise MeshTopologyError(
                f"interface: normal of facet {wrong[0]} does not point from minus to plus")
        nodes, cnt = np.unique(mesh.facets, return_counts=True)
        if cnt.max() > 2:
            raise MeshTopologyError(
                f"interface: node {nodes[np.argmax(cnt)]} touches more than two facets (not a 1D manifold)")
    # every region boundary must be an interface facet
    fset = set(fkeys)
    for key, own in owners.items():
        if len(own) == 2 and mesh.regions[own[0]] != mesh.regions[own[1]] and key not in fset:
            raise MeshTopologyError(
                f"interface: edge {key} separates regions {mesh.regions[own[0]]!r} and "
                f"{mesh.regions[own[1]]!r} but is not an interface facet")


def gen_two_squares(L: float, n: int) -> Mesh:
    """Structured mesh of two stacked squares with a flat interface.

    Parameters
    ----------
    L : float
        Side length [m].  The domain is ``[0, L] x [0, 2L]``.
    n : int
        Cells per side of each square.

    Returns
    -------
    Mesh
        Region ``A`` below ``Y = L``, region ``B`` above.  The interface has
        ``m_s = (0, 1)`` (minus side ``A``).  Boundary tags are ``bottom``,
        ``top``, ``left`` and ``right``.
    """
    if not (np.isfinite(L) and L > 0):
        raise ValueError(f"L must be positive, got {L!r}")
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    nx, ny = n + 1, 2 * n + 1
    h = L / n
    jj, ii = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    nodes = np.stack([ii.ravel() * h, jj.ravel() * h], axis=1)

    def vid(i, j):
        return j * nx + i

    tris, regs = [], []
    for j in range(2 * n):
        for i in range(n):
            v00, v10, v11, v01 = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            r = "A" if j < n else "B"
            tris += [(v00, v10, v11), (v00, v11, v01)]
            regs += [r, r]
    tris = np.array(tris)

    def cell_tri(i, j, upper):
        return 2 * (j * n + i) + int(upper)

    bedges, btags = [], []
    for i in range(n):
        bedges.append((vid(i, 0), vid(i + 1, 0)))
        btags.append("bottom")
    for j in range(2 * n):
        bedges.append((vid(n, j), vid(n, j + 1)))
        btags.append("right")
    for i in range(n):
        bedges.append((vid(n - i, 2 * n), vid(n - i - 1, 2 * n)))
        btags.append("top")
    for j in range(2 * n):
        bedges.append((vid(0, 2 * n - j), vid(0, 2 * n - j - 1)))
        btags.append("left")

    facets, fplus, fminus = [], [], []
    for i in range(n):
        facets.append((vid(i, n), vid(i + 1, n)))
        fminus.append(cell_tri(i, n - 1, True))
        fplus.append(cell_tri(i, n, False))
    mesh = Mesh(nodes=nodes, triangles=tris, regions=np.array(regs), boundary_edges=bedges,
                boundary_tags=np.array(btags), facets=facets, facet_plus=fplus,
                facet_minus=fminus, h=h)
    return mesh


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every triangle into four through its edge midpoints.

    Tags are inherited, interface facets are split in two and keep their
    normal, and the nominal mesh size halves.
    """
    tris = mesh.triangles
    nn = mesh.n_nodes
    loc = _triangle_edges(tris)
    keys = _edge_key(loc.reshape(-1, 2))
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel().reshape(-1, 3) + nn
    mids = 0.5 * (mesh.nodes[uniq[:, 0]] + mesh.nodes[uniq[:, 1]])
    nodes = np.vstack([mesh.nodes, mids])
    edge_id = {tuple(e): nn + k for k, e in enumerate(uniq.tolist())}

    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    mab, mbc, mca = inv[:, 0], inv[:, 1], inv[:, 2]
    children = np.stack([
        np.stack([a, mab, mca], 1),
        np.stack([mab, b, mbc], 1),
        np.stack([mca, mbc, c], 1),
        np.stack([mab, mbc, mca], 1),
    ], axis=1)  # (M, 4, 3)
    new_tris = children.reshape(-1, 3)
    new_regions = np.repeat(mesh.regions, 4)

    def split(edges):
        out = []
        for i, j in edges.tolist():
            m = edge_id[tuple(sorted((i, j)))]
            out += [(i, m), (m, j)]
        return np.array(out, dtype=np.int64).reshape(-1, 2)

    bedges = split(mesh.boundary_edges)
    btags = np.repeat(mesh.boundary_tags, 2)
    facets = split(mesh.facets)

    def child_with(parent, i, j):
        for k in range(4):
            ch = children[parent, k]
            if i in ch and j in ch:
                return 4 * parent + k
        raise MeshTopologyError("refinement: child triangle not found")

    fplus, fminus = [], []
    for k, (i, j) in enumerate(facets.tolist()):
        parent = k // 2
        fplus.append(child_with(mesh.facet_plus[parent], i, j))
        fminus.append(child_with(mesh.facet_minus[parent], i, j))
    return Mesh(nodes=nodes, triangles=new_tris, regions=new_regions, boundary_edges=bedges,
                boundary_tags=btags, facets=facets, facet_plus=fplus, facet_minus=fminus,
                facet_normals=np.repeat(mesh.facet_normals, 2, axis=0), h=0.5 * mesh.h)


def save_mesh(mesh: Mesh) -> str:
    """Serialize a mesh to the plain-text format (17 significant digits)."""
    out = ["poromix-mesh 1", f"nodes {mesh.n_nodes}"]
    out += [f"{x:.17g} {y:.17g}" for x, y in mesh.nodes.tolist()]
    out.append(f"triangles {mesh.n_triangles}")
    out += [f"{i} {j} {k} {r}" for (i, j, k), r in zip(mesh.triangles.tolist(), mesh.regions.tolist())]
    out.append(f"boundary {len(mesh.boundary_edges)}")
    out += [f"{i} {j} {t}" for (i, j), t in zip(mesh.boundary_edges.tolist(), mesh.boundary_tags.tolist())]
    out.append(f"interface {mesh.n_facets}")
    out += [f"{i} {j} {p} {m}" for (i, j), p, m in
            zip(mesh.facets.tolist(), mesh.facet_plus.tolist(), mesh.facet_minus.tolist())]
    return "\n".join(out) + "\n"


def load_mesh(text: str, validate: bool = True) -> Mesh:
    """Parse the plain-text format.

    Raises
    ------
    MeshParseError
        Malformed content, with the 1-based line number.
    MeshTopologyError
        A mesh invariant fails.
    """
    lines = [(k + 1, ln.split("#", 1)[0].split()) for k, ln in enumerate(text.splitlines())]
    lines = [(k, toks) for k, toks in lines if toks]
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            last = lines[-1][0] if lines else 0
            raise MeshParseError(last + 1, "unexpected end of file")
        item = lines[pos]
        pos += 1
        return item

    k, toks = take()
    if toks != ["poromix-mesh", "1"]:
        raise MeshParseError(k, "expected header 'poromix-mesh 1'")

    def section(name):
        k, toks = take()
        if len(toks) != 2 or toks[0] != name:
            raise MeshParseError(k, f"expected '{name} <count>'")
        try:
            cnt = int(toks[1])
        except ValueError:
            raise MeshParseError(k, f"invalid count {toks[1]!r}") from None
        if cnt < 0:
            raise MeshParseError(k, "negative count")
        return cnt

    def rows(cnt, ncols, kinds):
        out = []
        for _ in range(cnt):
            k, toks = take()
            if len(toks) != ncols:
                raise MeshParseError(k, f"expected {ncols} fields, got {len(toks)}")
            row = []
            for tok, kind in zip(toks, kinds):
                try:
                    if kind == "f":
                        v = float(tok)
                        if not np.isfinite(v):
                            raise ValueError
                    elif kind == "i":
                        v = int(tok)
                    else:
                        if not _TAG_RE.match(tok):
                            raise ValueError
                        v = tok
                except ValueError:
                    raise MeshParseError(k, f"invalid value {tok!r}") from None
                row.append(v)
            out.append(row)
        return out

    nodes = rows(section("nodes"), 2, "ff")
    tris = rows(section("triangles"), 4, "iiis")
    bnd = rows(section("boundary"), 3, "iis")
    itf = rows(section("interface"), 4, "iiii")
    if pos != len(lines):
        raise MeshParseError(lines[pos][0], "trailing content")
    mesh = Mesh(
        nodes=np.array(nodes, float).reshape(-1, 2),
        triangles=np.array([r[:3] for r in tris], np.int64).reshape(-1, 3),
        regions=np.array([r[3] for r in tris], dtype=str),
        boundary_edges=np.array([r[:2] for r in bnd], np.int64).reshape(-1, 2),
        boundary_tags=np.array([r[2] for r in bnd], dtype=str),
        facets=np.array([r[:2] for r in itf], np.int64).reshape(-1, 2),
        facet_plus=np.array([r[2] for r in itf], np.int64),
        facet_minus=np.array([r[3] for r in itf], np.int64),
    ) if _indices_ok(nodes, tris, bnd, itf) else None
    if validate:
        validate_mesh(mesh)
    return mesh


def _indices_ok(nodes, tris, bnd, itf) -> bool:
    nn, nt = len(nodes), len(tris)
    for r in tris:
        if min(r[:3]) < 0 or max(r[:3]) >= nn:
            raise MeshTopologyError(f"triangles: node index out of range in {r[:3]}")
    for r in bnd:
        if min(r[:2]) < 0 or max(r[:2]) >= nn:
            raise MeshTopologyError(f"boundary: node index out of range in {r[:2]}")
    for k, r in enumerate(itf):
        if min(r[:2]) < 0 or max(r[:2]) >= nn:
            raise MeshTopologyError(f"interface: node index out of range in facet {k}")
        if not (0 <= r[2] < nt and 0 <= r[3] < nt):
            raise MeshTopologyError(f"interface: facet {k} references a missing triangle")
    return True


def read_mesh(path) -> Mesh:
    with open(path, encoding="ascii") as fh:
        return load_mesh(fh.read())


def write_mesh(mesh: Mesh, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(save_mesh(mesh))
