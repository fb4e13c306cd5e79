"""Graded curved-triangle meshes of the annulus ``eps0 <= |x| <= 1``.

The annulus is tiled by concentric rings (layers).  Ring ``i`` has inner
radius ``eps_i``, thickness ``tau_i`` and ``N_i`` equally spaced nodes on its
outer circle; its inner circle is shared with ring ``i-1`` and carries
``N_{i-1}`` nodes (ring 0: ``N_0``).  A ring with equal counts is *uniform*
and holds ``N`` type-A (apex inward) and ``N`` type-B (apex outward) elements.
A ring with ``N_{i-1} = 2 N_i`` is *conforming*: each type-B element is split
along the radial line through its outer vertex into a C/D pair, giving
``3 N_i`` elements.  Every element of ring ``i`` thus has angular parameter
``N_i``, the count certified against ``(eps_i, tau_i)``.

Element templates (representative element, angles in the ring's frame)::

    A: a1 inner @ 0,      a2 outer @ -pi/N,   a3 outer @ +pi/N
    B: a1 outer @ 0,      a2 inner @ +pi/N,   a3 inner @ -pi/N
    C: a1 inner @ 0,      a2 outer @ 0,       a3 inner @ +pi/N
    D: a1 inner @ 0,      a2 inner @ -pi/N,   a3 outer @ 0

Edge nodes follow the mid-arc rule (mean radius, mean angle).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cavfem.geometry import EDGE_VERTICES, mid_arc_polar

KINDS = ("A", "B", "C", "D")
_CLOSE_RTOL = 1e-12


class InfeasibleConfigError(ValueError):
    """The mesh configuration admits no schedule."""


class InvalidScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class MeshConfig:
    """Parameters of the meshing strategy.

    ``nm_policy`` selects the outer ring count from ``[A1/h, A2/h]``:
    ``"min_inner"`` picks the count giving the smallest innermost ring
    (ties to the smaller count), ``"smallest"`` the least integer.  An
    explicit ``nm`` overrides the policy but must lie in the interval.
    """

    eps0: float
    h: float
    p: float = 1.5
    C: float = 2.0
    C1: float = 0.9
    C2: float = 0.5
    A1: float = 0.8
    A2: float = 1.0
    nm_policy: str = "min_inner"
    nm: int | None = None

    def admissible_h(self) -> float:
        p, C = self.p, self.C
        return min((2 - p) / (2 ** (2 - p) * C), (2 - p) / (2 ** (p - 1) * C))

    def nm_interval(self) -> range:
        lo = math.ceil(self.A1 / self.h - 1e-9)
        hi = math.floor(self.A2 / self.h + 1e-9)
        return range(max(lo, 1), hi + 1)

    def validate(self) -> None:
        if not 0.0 < self.eps0 < 1.0:
            raise InfeasibleConfigError(f"eps0={self.eps0} must lie in (0, 1)")
        if self.h <= 0.0:
            raise InfeasibleConfigError(f"h={self.h} must be positive")
        if not 1.0 < self.p < 2.0:
            raise InfeasibleConfigError(f"p={self.p} must lie in (1, 2)")
        if self.C < (2 - self.p) * 2 ** (self.p - 1) - 1e-12:
            raise InfeasibleConfigError(
                f"C={self.C} below (2-p)*2^(p-1)={(2 - self.p) * 2 ** (self.p - 1):.6g}"
            )
        if self.C1 <= 0 or self.C2 <= 0 or not 0 < self.A1 < self.A2:
            raise InfeasibleConfigError("need C1, C2 > 0 and 0 < A1 < A2")
        if self.h > self.admissible_h() * (1 + 1e-12):
            raise InfeasibleConfigError(
                f"h={self.h} exceeds the admissibility bound {self.admissible_h():.6g}"
            )
        if len(self.nm_interval()) == 0:
            raise InfeasibleConfigError(
                f"no integer in [A1/h, A2/h] = [{self.A1 / self.h:.4g}, {self.A2 / self.h:.4g}]"
            )
        if self.nm is not None and self.nm not in self.nm_interval():
            raise InfeasibleConfigError(f"nm={self.nm} outside [A1/h, A2/h]")
        if self.nm_policy not in ("min_inner", "smallest"):
            raise InfeasibleConfigError(f"unknown nm_policy {self.nm_policy!r}")


def energy_gauge(eps, tau, p: float):
    """``(eps + tau)**(2-p) - eps**(2-p)``."""
    return (np.asarray(eps) + tau) ** (2.0 - p) - np.asarray(eps) ** (2.0 - p)


def thickness_cap(x, h, p: float = 1.5, C: float = 2.0):
    """Thickness ``d`` with ``energy_gauge(x, d) == C*h``.

    Written as ``x ((1 + C h x^(p-2))^(1/(2-p)) - 1)`` via ``expm1``/``log1p``
    so that small ``C h`` loses no digits to cancellation.
    """
    x = np.asarray(x, dtype=float)
    return x * np.expm1(np.log1p(C * h * x ** (p - 2.0)) / (2.0 - p))


def ring_count_bound(eps: float, tau: float, cfg: MeshConfig) -> float:
    """Upper bound on 1/N: ``min(C2 (eps tau)^(1/4), (C^2 tau h^2)^(1/4))``."""
    return min(cfg.C2 * (eps * tau) ** 0.25, (cfg.C**2 * tau * cfg.h**2) ** 0.25)


def least_ring_count(eps: float, tau: float, cfg: MeshConfig) -> int:
    b = ring_count_bound(eps, tau, cfg)
    n = max(1, math.ceil(1.0 / b))
    # guard against 1/b landing a hair above an integer
    if n > 1 and 1.0 / (n - 1) <= b:
        n -= 1
    return n


@dataclass(frozen=True)
class LayerSpec:
    eps: float
    tau: float
    N: int
    k: int
    conforming: bool = False

    @property
    def outer(self) -> float:
        return self.eps + self.tau


@dataclass(frozen=True)
class LayerSchedule:
    layers: tuple[LayerSpec, ...]
    nm_tilde: int
    k: int
    config: MeshConfig | None = None
    n_opening: int | None = None  # node count on the innermost circle; default: N_0

    @property
    def m(self) -> int:
        return len(self.layers) - 1

    @property
    def taus(self) -> np.ndarray:
        return np.array([L.tau for L in self.layers])

    def outer_count(self, i: int) -> int:
        """Node count on the outer circle of ring ``i``."""
        return self.layers[i].N

    def inner_count(self, i: int) -> int:
        """Node count on the inner circle of ring ``i``."""
        if i > 0:
            return self.layers[i - 1].N
        return self.n_opening if self.n_opening is not None else self.layers[0].N

    def summary(self) -> dict:
        t = self.taus
        return {
            "m": self.m,
            "min_tau": float(t.min()),
            "max_tau": float(t.max()),
            "N_inner": self.layers[0].N,
            "N_outer": self.layers[-1].N,
            "k": self.k,
        }


def _recurse(cfg: MeshConfig, n_inner: int, k: int, nm_tilde: int) -> LayerSchedule:
    eps0, h, p, C, C1 = cfg.eps0, cfg.h, cfg.p, cfg.C, cfg.C1
    tau0 = min(C1 * math.sqrt(eps0), float(thickness_cap(eps0, h, p, C)))
    last = tau0 >= (1.0 - eps0) * (1.0 - _CLOSE_RTOL)
    if last:
        tau0 = 1.0 - eps0
    layers = [LayerSpec(eps0, tau0, n_inner, 0)]
    while not last:
        prev = layers[-1]
        eps = prev.eps + prev.tau
        cap = min(C1 * math.sqrt(eps), float(thickness_cap(eps, h, p, C)))
        # a cap that reaches 1 up to round-off closes the annulus (no sliver ring)
        last = cap >= (1.0 - eps) * (1.0 - _CLOSE_RTOL)
        tau = 1.0 - eps if last else cap
        ki, Ni = prev.k, prev.N
        # halve at most once per ring, and only while the k budget lasts
        if prev.k < k and prev.N % 2 == 0:
            nbar = prev.N // 2
            if 1.0 / nbar <= ring_count_bound(eps, tau, cfg):
                ki, Ni = prev.k + 1, nbar
        layers.append(LayerSpec(eps, tau, Ni, ki))
        if len(layers) > 100_000:
            raise InfeasibleConfigError("layer recursion does not terminate")
    # a ring is conforming when its count is half that of the ring inside it
    out = tuple(
        LayerSpec(L.eps, L.tau, L.N, L.k, i > 0 and layers[i - 1].N == 2 * L.N) for i, L in enumerate(layers)
    )
    return LayerSchedule(out, nm_tilde, k, cfg)


def _schedule_for(cfg: MeshConfig, nm_tilde: int) -> LayerSchedule:
    tau0 = min(cfg.C1 * math.sqrt(cfg.eps0), float(thickness_cap(cfg.eps0, cfg.h, cfg.p, cfg.C)))
    nbar0 = least_ring_count(cfg.eps0, tau0, cfg)
    k = 0
    while 2**k * nm_tilde < nbar0:
        k += 1
    return _recurse(cfg, 2**k * nm_tilde, k, nm_tilde)


def build_schedule(cfg: MeshConfig) -> LayerSchedule:
    """Run the layer recursion for ``cfg``.

    Raises :class:`InfeasibleConfigError` for inadmissible configurations.
    """
    cfg.validate()
    if cfg.nm is not None:
        return _schedule_for(cfg, cfg.nm)
    candidates = list(cfg.nm_interval())
    if cfg.nm_policy == "smallest":
        return _schedule_for(cfg, candidates[0])
    best = None
    for nm in candidates:
        s = _schedule_for(cfg, nm)
        if best is None or s.layers[0].N < best.layers[0].N:
            best = s
    return best


def schedule_with_counts(cfg: MeshConfig, n_inner: int, n_outer: int) -> LayerSchedule:
    """Recursion with a prescribed innermost count ``n_inner = 2^k n_outer``.

    Used to certify externally supplied ring counts (e.g. published ones).
    """
    ratio, rem = divmod(n_inner, n_outer)
    if rem or ratio & (ratio - 1):
        raise InvalidScheduleError("n_inner must be a power-of-two multiple of n_outer")
    return _recurse(cfg, n_inner, ratio.bit_length() - 1, n_outer)


def certify_schedule(schedule: LayerSchedule, cfg: MeshConfig | None = None) -> list[str]:
    """List every violated meshing constraint (empty list == certified)."""
    cfg = cfg or schedule.config
    problems = []
    L = schedule.layers
    if not L:
        return ["empty schedule"]
    if abs(L[-1].eps + L[-1].tau - 1.0) > 1e-14:
        problems.append("last ring does not close the annulus")
    for i, lay in enumerate(L):
        tag = f"ring {i}"
        if i > 0 and lay.eps != L[i - 1].eps + L[i - 1].tau:
            problems.append(f"{tag}: rings do not tile")
        if lay.tau > cfg.C1 * math.sqrt(lay.eps) * (1 + 1e-12):
            problems.append(f"{tag}: tau > C1 eps^1/2")
        if 1.0 / lay.N > cfg.C2 * (lay.eps * lay.tau) ** 0.25 * (1 + 1e-12):
            problems.append(f"{tag}: 1/N > C2 (eps tau)^1/4")
        if 1.0 / lay.N > (cfg.C**2 * lay.tau * cfg.h**2) ** 0.25 * (1 + 1e-12):
            problems.append(f"{tag}: 1/N > (C^2 tau h^2)^1/4")
        if energy_gauge(lay.eps, lay.tau, cfg.p) > cfg.C * cfg.h * (1 + 1e-12):
            problems.append(f"{tag}: A(eps, tau) > C h")
        if i < len(L) - 1 and L[i + 1].N not in (lay.N, lay.N // 2 if lay.N % 2 == 0 else -1):
            problems.append(f"{tag}: N_(i+1) not in {{N_i, N_i/2}}")
    if L[0].N != 2**schedule.k * schedule.nm_tilde:
        problems.append("N_0 != 2^k * Nm_tilde")
    return problems


# ---------------------------------------------------------------------------
# mesh assembly


@dataclass(frozen=True)
class Element:
    index: int
    kind: str
    node_ids: tuple[int, ...]
    layer: int
    eps: float
    tau: float
    N: int  # angular parameter of the template (half-angle pi/N)


@dataclass(frozen=True, eq=False)
class AnnulusMesh:
    nodes: np.ndarray  # (nn, 2)
    conn: np.ndarray  # (ne, 6) int
    kinds: np.ndarray  # (ne,) '<U1'
    layer_of: np.ndarray  # (ne,) int
    inner_boundary: np.ndarray
    outer_boundary: np.ndarray
    schedule: LayerSchedule
    elem_eps: np.ndarray = field(repr=False)
    elem_tau: np.ndarray = field(repr=False)
    elem_N: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.conn)

    @property
    def n_dofs(self) -> int:
        return 2 * len(self.nodes)

    def element(self, e: int) -> Element:
        return Element(
            int(e),
            str(self.kinds[e]),
            tuple(int(i) for i in self.conn[e]),
            int(self.layer_of[e]),
            float(self.elem_eps[e]),
            float(self.elem_tau[e]),
            int(self.elem_N[e]),
        )

    def elements(self):
        for e in range(self.n_elements):
            yield self.element(e)

    def coords(self) -> np.ndarray:
        """Element node coordinates, shape ``(ne, 6, 2)``."""
        return self.nodes[self.conn]

    def edges(self) -> dict[tuple[int, int, int], list[int]]:
        """Curved edges keyed by (vertex, edge node, vertex) -> owning elements."""
        out: dict[tuple[int, int, int], list[int]] = {}
        for e, c in enumerate(self.conn):
            for k, (a, b) in enumerate(EDGE_VERTICES):
                va, vb = int(c[a]), int(c[b])
                key = (min(va, vb), int(c[3 + k]), max(va, vb))
                out.setdefault(key, []).append(e)
        return out


def expected_counts(schedule: LayerSchedule) -> tuple[int, int]:
    """Closed-form (node count, element count) of the mesh for ``schedule``."""
    nodes, elems = 2 * schedule.inner_count(0), 0
    for i, lay in enumerate(schedule.layers):
        n_out = lay.N
        if schedule.inner_count(i) == 2 * n_out:
            elems += 3 * n_out
            nodes += 2 * n_out + 3 * n_out
        else:
            elems += 2 * lay.N
            nodes += 2 * n_out + 2 * lay.N
    return nodes, elems


class _Builder:
    def __init__(self):
        self.pos: list[tuple[float, float]] = []
        self.vertex_ids: dict[tuple[int, int], int] = {}
        self.edge_ids: dict[tuple[int, int], int] = {}

    def _new(self, r: float, t: float) -> int:
        self.pos.append((r * math.cos(t), r * math.sin(t)))
        return len(self.pos) - 1

    def vertex(self, circle: int, j: int, n: int, r: float, t: float) -> int:
        key = (circle, j % n)
        if key not in self.vertex_ids:
            self.vertex_ids[key] = self._new(r, t)
        return self.vertex_ids[key]

    def edge(self, va: int, vb: int, pa, pb) -> int:
        key = (min(va, vb), max(va, vb))
        if key not in self.edge_ids:
            self.edge_ids[key] = self._new(*mid_arc_polar(*pa, *pb))
        return self.edge_ids[key]


def build_mesh(schedule: LayerSchedule) -> AnnulusMesh:
    """Assemble the curved-triangle mesh for a layer schedule.

    Shared nodes are created once and looked up by integer keys (circle and
    angular index for vertices, vertex pair for edge nodes), so conformity
    never depends on floating-point matching.
    """
    L = schedule.layers
    if not L:
        raise InvalidScheduleError("empty schedule")
    for i in range(len(L)):
        n_in = schedule.inner_count(i)
        if n_in not in (L[i].N, 2 * L[i].N):
            raise InvalidScheduleError(f"ring {i}: inner count {n_in} not in {{N_i, 2 N_i}}")
    if any(lay.N < 3 for lay in L):
        raise InvalidScheduleError("ring counts below 3 are not supported")

    radii = [L[0].eps] + [lay.eps + lay.tau for lay in L]
    if abs(radii[-1] - 1.0) < 1e-14:
        radii[-1] = 1.0
    b = _Builder()
    conn, kinds, layer_of, eN = [], [], [], []
    phi = 0.0  # angular offset of the inner circle of the current ring

    def element(kind, verts, i, N):
        # verts: three (id, r, theta) tuples in template order
        ids = [v[0] for v in verts]
        for a, c in EDGE_VERTICES:
            ids.append(b.edge(verts[a][0], verts[c][0], verts[a][1:], verts[c][1:]))
        conn.append(ids)
        kinds.append(kind)
        layer_of.append(i)
        eN.append(N)

    for i, lay in enumerate(L):
        r_in, r_out = radii[i], radii[i + 1]
        n_in, n_out = schedule.inner_count(i), lay.N
        conforming = n_in == 2 * n_out
        if conforming:
            N = n_out
            step = math.pi / N

            def inner(j):
                t = phi + j * step
                return (b.vertex(i, j, n_in, r_in, t), r_in, t)

            def outer(q):
                t = phi + 2 * q * step
                return (b.vertex(i + 1, q, n_out, r_out, t), r_out, t)

            for q in range(N):
                element("A", [inner(2 * q + 1), outer(q), outer(q + 1)], i, N)
                element("C", [inner(2 * q), outer(q), inner(2 * q + 1)], i, N)
                element("D", [inner(2 * q), inner(2 * q - 1), outer(q)], i, N)
            phi_next = phi
        else:
            N = n_in
            step = math.pi / N

            def inner(j):
                t = phi + 2 * j * step
                return (b.vertex(i, j, n_in, r_in, t), r_in, t)

            def outer(j):
                t = phi + (2 * j + 1) * step
                return (b.vertex(i + 1, j, n_out, r_out, t), r_out, t)

            for j in range(N):
                element("A", [inner(j), outer(j - 1), outer(j)], i, N)
                element("B", [outer(j), inner(j + 1), inner(j)], i, N)
            phi_next = phi + step
        phi = phi_next

    conn = np.array(conn, dtype=np.int64)
    nodes = np.array(b.pos)
    n_last = len(L)
    inner_v = [v for (c, _), v in b.vertex_ids.items() if c == 0]
    outer_v = [v for (c, _), v in b.vertex_ids.items() if c == n_last]
    inner_set, outer_set = set(inner_v), set(outer_v)
    inner_e = [e for (u, v), e in b.edge_ids.items() if u in inner_set and v in inner_set]
    outer_e = [e for (u, v), e in b.edge_ids.items() if u in outer_set and v in outer_set]
    layer_of = np.array(layer_of, dtype=np.int64)
    return AnnulusMesh(
        nodes=nodes,
        conn=conn,
        kinds=np.array(kinds),
        layer_of=layer_of,
        inner_boundary=np.array(sorted(inner_v + inner_e), dtype=np.int64),
        outer_boundary=np.array(sorted(outer_v + outer_e), dtype=np.int64),
        schedule=schedule,
        elem_eps=np.array([L[i].eps for i in layer_of]),
        elem_tau=np.array([L[i].tau for i in layer_of]),
        elem_N=np.array(eN, dtype=np.int64),
    )


def single_ring_mesh(eps: float, tau: float, N: int, conforming: bool = False) -> AnnulusMesh:
    """One ring: uniform (N nodes on both circles) or conforming (2N inside, N outside)."""
    if conforming:
        lay = LayerSpec(eps, tau, N, 0, True)
        return build_mesh(LayerSchedule((lay,), N, 0, n_opening=2 * N))
    return build_mesh(LayerSchedule((LayerSpec(eps, tau, N, 0),), N, 0))


# ---------------------------------------------------------------------------
# text dump and SVG


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_mesh(mesh: AnnulusMesh, path) -> None:
    """Line-oriented dump: header, nodes, elements, boundaries."""
    path = Path(path)
    sched = mesh.schedule
    cfg = sched.config
    lines = [
        "# cavfem annulus mesh v1",
        f"counts {mesh.n_nodes} {mesh.n_elements} {len(mesh.inner_boundary)} {len(mesh.outer_boundary)}",
        f"eps0 {_fmt(sched.layers[0].eps)}",
        f"h {_fmt(cfg.h) if cfg is not None else 'nan'}",
    ]
    lines += [f"node {i} {_fmt(x)} {_fmt(y)}" for i, (x, y) in enumerate(mesh.nodes)]
    for e in range(mesh.n_elements):
        ids = " ".join(str(int(v)) for v in mesh.conn[e])
        lines.append(
            f"element {mesh.kinds[e]} {ids} {_fmt(mesh.elem_eps[e])} "
            f"{_fmt(mesh.elem_tau[e])} {int(mesh.elem_N[e])}"
        )
    lines.append("inner " + " ".join(str(int(v)) for v in mesh.inner_boundary))
    lines.append("outer " + " ".join(str(int(v)) for v in mesh.outer_boundary))
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write mesh to {path}: {exc}") from exc


def read_mesh_arrays(path) -> dict:
    """Parse a mesh dump back into arrays (nodes, conn, kinds, boundaries)."""
    nodes, conn, kinds, eps, tau, N = [], [], [], [], [], []
    inner = outer = np.zeros(0, dtype=np.int64)
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if tok[0] == "node":
            nodes.append((float(tok[2]), float(tok[3])))
        elif tok[0] == "element":
            kinds.append(tok[1])
            conn.append([int(t) for t in tok[2:8]])
            eps.append(float(tok[8]))
            tau.append(float(tok[9]))
            N.append(int(tok[10]))
        elif tok[0] == "inner":
            inner = np.array([int(t) for t in tok[1:]], dtype=np.int64)
        elif tok[0] == "outer":
            outer = np.array([int(t) for t in tok[1:]], dtype=np.int64)
    return {
        "nodes": np.array(nodes),
        "conn": np.array(conn, dtype=np.int64),
        "kinds": np.array(kinds),
        "eps": np.array(eps),
        "tau": np.array(tau),
        "N": np.array(N, dtype=np.int64),
        "inner": inner,
        "outer": outer,
    }


def mesh_to_svg(mesh: AnnulusMesh, path, segments: int = 8, size: float = 800.0) -> None:
    """Write the mesh as SVG, one closed path per element.

    Each curved edge is drawn as the image of its reference edge under the
    quadratic map, sampled with ``segments`` straight pieces.
    """
    from cavfem.geometry import map_eval

    if mesh.n_elements == 0:
        raise InvalidScheduleError("refusing to render an empty mesh")
    t = np.linspace(0.0, 1.0, segments + 1)
    # boundary of the reference triangle, counter-clockwise
    ref = np.concatenate(
        [
            np.stack([t, 0 * t], -1)[:-1],
            np.stack([1 - t, t], -1)[:-1],
            np.stack([0 * t, 1 - t], -1)[:-1],
        ]
    )
    pts = np.einsum("qa,eak->eqk", map_eval(np.eye(6), ref), mesh.coords())
    scale = size / 2.2
    paths = []
    for e, poly in enumerate(pts):
        xs = size / 2 + scale * poly[:, 0]
        ys = size / 2 - scale * poly[:, 1]
        d = "M " + " L ".join(f"{x:.4f} {y:.4f}" for x, y in zip(xs, ys)) + " Z"
        paths.append(
            f'<path d="{d}" class="{mesh.kinds[e]}" fill="none" stroke="black" '
            f'stroke-width="0.3"/>'
        )
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:g}" height="{size:g}" '
        f'viewBox="0 0 {size:g} {size:g}">\n' + "\n".join(paths) + "\n</svg>\n"
    )
    try:
        Path(path).write_text(svg)
    except OSError as exc:
        raise OSError(f"cannot write SVG to {path}: {exc}") from exc
