"""Lagrange shape functions, quadrature rules and the mixed degree-of-freedom map.

The mixed space combines

* ``u_s``: continuous P2 vector field,
* ``v_f``: P2 vector field with one copy of each interface node per region,
* ``p``: P1 scalar field, duplicated the same way,
* ``ip``: single-valued P1 multiplier living on interface vertices.

Reference triangle: vertices (0,0), (1,0), (0,1) with barycentric
coordinates ``l0 = 1 - xi - eta``, ``l1 = xi``, ``l2 = eta``.  P2 local
nodes are the three vertices followed by the midpoints of edges 0-1, 1-2 and
2-0.  Reference segment: ``s`` in [0, 1]; P2 nodes ordered end, end, middle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh

__all__ = [
    "Quadrature",
    "triangle_rule",
    "segment_rule",
    "collapsed_triangle_rule",
    "shape_eval",
    "p2_tri",
    "p1_tri",
    "DofMap",
    "build_dofmap",
    "trace_pair",
    "TracePair",
    "edge_barycentric",
    "affine_maps",
    "FIELDS",
]

FIELDS = ("u_s", "v_f", "p", "ip")

# local vertex pairs of the P2 edge nodes
P2_EDGES = ((0, 1), (1, 2), (2, 0))


@dataclass(frozen=True)
class Quadrature:
    """Quadrature rule on a reference element.

    Attributes
    ----------
    points : ndarray
        Barycentric coordinates ``(q, 3)`` for triangles, parameters ``(q,)``
        on ``[0, 1]`` for segments.
    weights : ndarray
        Positive weights summing to the reference measure (1/2 or 1).
    degree : int
        Polynomial degree integrated exactly.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int


def triangle_rule() -> Quadrature:
    """Six-point rule of degree 4."""
    a, wa = 0.445948490915965, 0.223381589678011
    b, wb = 0.091576213509771, 0.109951743655322
    pts = [(1 - 2 * a, a, a), (a, 1 - 2 * a, a), (a, a, 1 - 2 * a),
           (1 - 2 * b, b, b), (b, 1 - 2 * b, b), (b, b, 1 - 2 * b)]
    w = np.array([wa] * 3 + [wb] * 3)
    w = 0.5 * w / w.sum()
    return Quadrature(np.array(pts), w, 4)


def segment_rule(n: int = 3) -> Quadrature:
    """Gauss-Legendre rule on [0, 1] (degree ``2n - 1``)."""
    x, w = np.polynomial.legendre.leggauss(n)
    return Quadrature(0.5 * (x + 1.0), 0.5 * w, 2 * n - 1)


def collapsed_triangle_rule(n: int = 5) -> Quadrature:
    """Tensor Gauss rule collapsed onto the triangle (degree ``2n - 2``).

    Used for error norms, where a higher degree than the assembly rule is
    wanted.
    """
    s = segment_rule(n)
    u, v = np.meshgrid(s.points, s.points, indexing="ij")
    wu, wv = np.meshgrid(s.weights, s.weights, indexing="ij")
    xi = u.ravel()
    eta = (v * (1 - u)).ravel()
    w = (wu * wv * (1 - u)).ravel()
    pts = np.stack([1 - xi - eta, xi, eta], axis=1)
    return Quadrature(pts, w, 2 * n - 2)


_DLAM = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def p1_tri(lam: np.ndarray):
    """P1 values ``(q, 3)`` and reference gradients ``(q, 3, 2)``."""
    lam = np.atleast_2d(lam)
    grads = np.broadcast_to(_DLAM, (len(lam), 3, 2)).copy()
    return lam.copy(), grads


def p2_tri(lam: np.ndarray):
    """P2 values ``(q, 6)`` and reference gradients ``(q, 6, 2)``."""
    lam = np.atleast_2d(lam)
    l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
    vals = np.stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0,
    ], axis=1)
    d = _DLAM
    g = np.empty((len(lam), 6, 2))
    for i in range(3):
        g[:, i] = (4 * lam[:, i] - 1)[:, None] * d[i]
    for k, (i, j) in enumerate(P2_EDGES):
        g[:, 3 + k] = 4 * (lam[:, i, None] * d[j] + lam[:, j, None] * d[i])
    return vals, g


def shape_eval(kind: str, order: int, point):
    """Evaluate Lagrange shape functions on a reference element.

    Parameters
    ----------
    kind : {'triangle', 'segment'}
    order : {1, 2}
    point : array_like
        ``(xi, eta)`` on the triangle or ``s`` on the segment.

    Returns
    -------
    values : ndarray
    gradients : ndarray
        Reference gradients, ``(n, 2)`` on triangles and ``(n,)`` on segments.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if kind == "triangle":
        xi, eta = np.asarray(point, float)
        lam = np.array([[1 - xi - eta, xi, eta]])
        v, g = (p1_tri if order == 1 else p2_tri)(lam)
        return v[0], g[0]
    if kind == "segment":
        s = float(point)
        if order == 1:
            return np.array([1 - s, s]), np.array([-1.0, 1.0])
        return (np.array([(1 - s) * (1 - 2 * s), s * (2 * s - 1), 4 * s * (1 - s)]),
                np.array([4 * s - 3, 4 * s - 1, 4 - 8 * s]))
    raise ValueError(f"unknown element kind {kind!r}")


def affine_maps(mesh: Mesh, elems=None):
    """Per-element inverse-transpose Jacobian ``(E, 2, 2)`` and area ``(E,)``."""
    tri = mesh.triangles if elems is None else mesh.triangles[elems]
    p = mesh.nodes[tri]
    B = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns
    det = B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0]
    inv = np.empty_like(B)
    inv[:, 0, 0] = B[:, 1, 1]
    inv[:, 1, 1] = B[:, 0, 0]
    inv[:, 0, 1] = -B[:, 0, 1]
    inv[:, 1, 0] = -B[:, 1, 0]
    inv /= det[:, None, None]
    return np.transpose(inv, (0, 2, 1)), 0.5 * det


def edge_barycentric(tri_nodes: np.ndarray, i: np.ndarray, j: np.ndarray, s: np.ndarray):
    """Barycentric coordinates of ``(1-s) X_i + s X_j`` in each triangle.

    Parameters
    ----------
    tri_nodes : (E, 3) int
    i, j : (E,) int
        Global vertex ids of the edge, both belonging to the triangle.
    s : (q,) float

    Returns
    -------
    (E, q, 3) array
    """
    li = (tri_nodes == i[:, None]).astype(float)
    lj = (tri_nodes == j[:, None]).astype(float)
    if not (li.sum(1) == 1).all() or not (lj.sum(1) == 1).all():
        raise ValueError("edge vertices not found in triangle")
    return (1 - s)[None, :, None] * li[:, None, :] + s[None, :, None] * lj[:, None, :]


@dataclass(frozen=True, eq=False)
class DofMap:
    """Global layout of the mixed space.

    Global ordering is ``[u_s | v_f | p | ip]``; vector fields are stored
    node-major with interleaved components.

    Attributes
    ----------
    mesh : Mesh
    edges : (Ed, 2) int
        Unique mesh edges; P2 node ``n_vertices + k`` is the midpoint of edge k.
    elem_p2 : (M, 6) int
        P2 node ids of each triangle.
    p2_coords : (n_p2, 2) float
    vf_base, vf_region : per v_f node, its P2 node and region tag
    elem_vf : (M, 6) int
        v_f node ids used by each triangle.
    p_base, p_region, elem_p : same for the pressure (P1) nodes.
    ip_vertices : (n_ip,) int
        Mesh vertices carrying a multiplier dof.
    facet_ip : (F, 2) int
        Local ip node ids of each facet's two vertices.
    offsets : dict
        First global index of each field.
    elem_dofs : (M, 27) int
        Local-to-global map, ordered u_s (12), v_f (12), p (3).
    """

    mesh: Mesh
    edges: np.ndarray
    elem_edges: np.ndarray
    elem_p2: np.ndarray
    p2_coords: np.ndarray
    vf_base: np.ndarray
    vf_region: np.ndarray
    elem_vf: np.ndarray
    p_base: np.ndarray
    p_region: np.ndarray
    elem_p: np.ndarray
    ip_vertices: np.ndarray
    facet_ip: np.ndarray
    interface_p2: np.ndarray
    offsets: dict
    sizes: dict
    elem_dofs: np.ndarray

    @property
    def n_p2(self) -> int:
        return len(self.p2_coords)

    @property
    def total_dofs(self) -> int:
        return sum(self.sizes.values())

    def field_slice(self, name: str) -> slice:
        if name not in self.offsets:
            raise KeyError(f"unknown field {name!r}")
        o = self.offsets[name]
        return slice(o, o + self.sizes[name])

    def u_dofs(self, p2_nodes, comp=None):
        p2_nodes = np.asarray(p2_nodes)
        if comp is None:
            return (self.offsets["u_s"] + 2 * np.atleast_1d(p2_nodes)[:, None] + np.arange(2)).ravel()
        return self.offsets["u_s"] + 2 * p2_nodes + comp

    def vf_dofs(self, vf_nodes, comp=None):
        vf_nodes = np.asarray(vf_nodes)
        if comp is None:
            return (self.offsets["v_f"] + 2 * np.atleast_1d(vf_nodes)[:, None] + np.arange(2)).ravel()
        return self.offsets["v_f"] + 2 * vf_nodes + comp

    def p_dofs(self, p_nodes):
        return self.offsets["p"] + np.asarray(p_nodes)

    def ip_dofs(self, ip_nodes):
        return self.offsets["ip"] + np.asarray(ip_nodes)

    def split(self, z: np.ndarray):
        """Views ``(u (n_p2, 2), vf (n_vf, 2), p (n_p,), ip (n_ip,))`` of ``z``."""
        u = z[self.field_slice("u_s")].reshape(-1, 2)
        vf = z[self.field_slice("v_f")].reshape(-1, 2)
        return u, vf, z[self.field_slice("p")], z[self.field_slice("ip")]

    def boundary_p2_nodes(self, tag: str) -> np.ndarray:
        """Sorted P2 nodes on the boundary edges carrying ``tag``."""
        be = self.mesh.boundary_edges[self.mesh.boundary_tags == tag]
        if len(be) == 0:
            return np.zeros(0, np.int64)
        key = np.sort(be, axis=1)
        eid = _lookup_edges(self.edges, key)
        return np.unique(np.concatenate([be.ravel(), self.mesh.n_nodes + eid]))

    def vf_copies(self, p2_nodes) -> np.ndarray:
        """All v_f node ids whose base P2 node is in ``p2_nodes``."""
        return np.nonzero(np.isin(self.vf_base, p2_nodes))[0]

    def p_copies(self, vertices) -> np.ndarray:
        return np.nonzero(np.isin(self.p_base, vertices))[0]


def _lookup_edges(edges: np.ndarray, keys: np.ndarray) -> np.ndarray:
    nmax = int(max(edges.max(initial=0), keys.max(initial=0))) + 1
    code = edges[:, 0] * nmax + edges[:, 1]
    order = np.argsort(code)
    q = keys[:, 0] * nmax + keys[:, 1]
    pos = np.searchsorted(code[order], q)
    if np.any(pos >= len(code)) or np.any(code[order][np.minimum(pos, len(code) - 1)] != q):
        raise KeyError("edge not in mesh")
    return order[pos]


def build_dofmap(mesh: Mesh) -> DofMap:
    """Number the degrees of freedom of the mixed space.

    The numbering is a deterministic function of the mesh.  Interface nodes
    of ``v_f`` and ``p`` receive one copy per region touching them, in
    sorted region order.
    """
    nv, tris = mesh.n_nodes, mesh.triangles
    loc = np.stack([tris[:, list(e)] for e in P2_EDGES], axis=1)  # (M, 3, 2)
    keys = np.sort(loc.reshape(-1, 2), axis=1)
    edges, inv = np.unique(keys, axis=0, return_inverse=True)
    elem_edges = inv.ravel().reshape(-1, 3)
    elem_p2 = np.hstack([tris, nv + elem_edges])
    p2_coords = np.vstack([mesh.nodes, 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])])
    n_p2 = len(p2_coords)

    # interface P2 nodes: facet vertices and facet midpoints
    if mesh.n_facets:
        fkeys = np.sort(mesh.facets, axis=1)
        fe = _lookup_edges(edges, fkeys)
        iface_vertices = np.unique(mesh.facets)
        interface_p2 = np.unique(np.concatenate([iface_vertices, nv + fe]))
    else:
        iface_vertices = np.zeros(0, np.int64)
        interface_p2 = np.zeros(0, np.int64)

    regions = mesh.regions

    def duplicate(elem_nodes, n_nodes, dup_nodes):
        is_dup = np.zeros(n_nodes, bool)
        is_dup[dup_nodes] = True
        # regions around each node
        touch: dict[int, set] = {}
        for e, row in enumerate(elem_nodes.tolist()):
            for nd in row:
                touch.setdefault(nd, set()).add(regions[e])
        base, reg, ids = [], [], {}
        for nd in range(n_nodes):
            if is_dup[nd]:
                for r in sorted(touch.get(nd, ())):
                    ids[(nd, r)] = len(base)
                    base.append(nd)
                    reg.append(r)
            else:
                ids[(nd, None)] = len(base)
                base.append(nd)
                reg.append(min(touch.get(nd, {""})))
        elem_ids = np.empty_like(elem_nodes)
        for e, row in enumerate(elem_nodes.tolist()):
            r = regions[e]
            elem_ids[e] = [ids[(nd, r if is_dup[nd] else None)] for nd in row]
        return np.array(base, np.int64), np.array(reg, dtype=str), elem_ids

    vf_base, vf_region, elem_vf = duplicate(elem_p2, n_p2, interface_p2)
    p_base, p_region, elem_p = duplicate(tris, nv, iface_vertices)

    ip_vertices = iface_vertices
    ip_index = {v: k for k, v in enumerate(ip_vertices.tolist())}
    facet_ip = np.array([[ip_index[i], ip_index[j]] for i, j in mesh.facets.tolist()],
                        np.int64).reshape(-1, 2)

    sizes = {"u_s": 2 * n_p2, "v_f": 2 * len(vf_base), "p": len(p_base), "ip": len(ip_vertices)}
    offsets, o = {}, 0
    for name in FIELDS:
        offsets[name] = o
        o += sizes[name]
    eu = (offsets["u_s"] + 2 * elem_p2[:, :, None] + np.arange(2)).reshape(-1, 12)
    ev = (offsets["v_f"] + 2 * elem_vf[:, :, None] + np.arange(2)).reshape(-1, 12)
    ep = offsets["p"] + elem_p
    elem_dofs = np.hstack([eu, ev, ep])
    for a in (edges, elem_edges, elem_p2, p2_coords, vf_base, vf_region, elem_vf, p_base,
              p_region, elem_p, ip_vertices, facet_ip, interface_p2, elem_dofs):
        a.setflags(write=False)
    return DofMap(mesh=mesh, edges=edges, elem_edges=elem_edges, elem_p2=elem_p2,
                  p2_coords=p2_coords, vf_base=vf_base, vf_region=vf_region, elem_vf=elem_vf,
                  p_base=p_base, p_region=p_region, elem_p=elem_p, ip_vertices=ip_vertices,
                  facet_ip=facet_ip, interface_p2=interface_p2, offsets=offsets, sizes=sizes,
                  elem_dofs=elem_dofs)


@dataclass(frozen=True)
class TracePair:
    """Both traces of a field on one interface facet.

    ``plus_dofs``/``minus_dofs`` are global indices of the facet's nodes
    (segment P2 order: end i, end j, middle; P1: i, j), vector components
    interleaved.  ``s`` are shared segment parameters and ``lam_plus``,
    ``lam_minus`` their barycentric coordinates in the two triangles.
    """

    plus_dofs: np.ndarray
    minus_dofs: np.ndarray
    s: np.ndarray
    lam_plus: np.ndarray
    lam_minus: np.ndarray


def trace_pair(dofmap: DofMap, facet: int, field: str, quad: Quadrature | None = None) -> TracePair:
    """Plus/minus dofs of ``field`` on an interface facet and aligned points."""
    mesh = dofmap.mesh
    if not (0 <= facet < mesh.n_facets):
        raise IndexError(f"facet {facet} is not an interface facet")
    quad = quad or segment_rule()
    i, j = mesh.facets[facet]
    tp, tm = mesh.facet_plus[facet], mesh.facet_minus[facet]

    def side(t):
        tri = mesh.triangles[t]
        li, lj = int(np.nonzero(tri == i)[0][0]), int(np.nonzero(tri == j)[0][0])
        mid = 3 + [k for k, e in enumerate(P2_EDGES) if set(e) == {li, lj}][0]
        lam = edge_barycentric(tri[None], np.array([i]), np.array([j]), quad.points)[0]
        loc2, loc1 = [li, lj, mid], [li, lj]
        if field == "u_s":
            d = dofmap.u_dofs(dofmap.elem_p2[t, loc2])
        elif field == "v_f":
            d = dofmap.vf_dofs(dofmap.elem_vf[t, loc2])
        elif field == "p":
            d = dofmap.p_dofs(dofmap.elem_p[t, loc1])
        elif field == "ip":
            d = dofmap.ip_dofs(dofmap.facet_ip[facet])
        else:
            raise KeyError(f"unknown field {field!r}")
        return d, lam

    dp, lp = side(tp)
    dm, lm = side(tm)
    return TracePair(dp, dm, quad.points.copy(), lp, lm)
