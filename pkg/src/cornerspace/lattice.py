"""Square-lattice geometry and the binary merge tree.

Sites are indexed ``y * Lx + x``. Bonds are unordered nearest-neighbour
pairs ``(j, l)`` with ``j < l`` and an integer multiplicity: on a periodic
axis of length 2 both wrap directions land on the same pair, which is then
stored once with multiplicity 2.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

__all__ = [
    "Geometry",
    "MergeNode",
    "MergeSchedule",
    "ScheduleError",
    "build_geometry",
    "plan_merge_schedule",
]

Bond = tuple  # (j, l, multiplicity)


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class Geometry:
    Lx: int
    Ly: int
    periodic_x: bool
    periodic_y: bool
    bonds: tuple = ()

    @property
    def n_sites(self) -> int:
        return self.Lx * self.Ly

    @property
    def shape(self) -> tuple:
        return (self.Lx, self.Ly)

    def coords(self, j: int) -> tuple:
        return (j % self.Lx, j // self.Lx)

    def index(self, x: int, y: int) -> int:
        return y * self.Lx + x

    def pairs(self) -> list:
        return [(j, l) for j, l, _ in self.bonds]

    def degree(self, j: int) -> int:
        return sum(m for a, b, m in self.bonds if j in (a, b))

    def coordination(self) -> int:
        """Largest weighted degree over sites (4 for a periodic 2D lattice)."""
        return max((self.degree(j) for j in range(self.n_sites)), default=0)

    def label(self) -> str:
        return f"{self.Lx}x{self.Ly}"


def build_geometry(Lx: int, Ly: int, periodic_x: bool = True, periodic_y: bool = True) -> Geometry:
    if Lx < 1 or Ly < 1:
        raise ValueError(f"lattice dimensions must be >= 1, got {Lx}x{Ly}")
    counts: Counter = Counter()
    for y in range(Ly):
        for x in range(Lx):
            j = y * Lx + x
            if x + 1 < Lx:
                counts[(j, j + 1)] += 1
            elif periodic_x and Lx > 1:
                counts[tuple(sorted((j, y * Lx)))] += 1
            if y + 1 < Ly:
                counts[(j, j + Lx)] += 1
            elif periodic_y and Ly > 1:
                counts[tuple(sorted((j, x)))] += 1
    bonds = tuple((j, l, m) for (j, l), m in sorted(counts.items()))
    return Geometry(Lx, Ly, bool(periodic_x), bool(periodic_y), bonds)


@dataclass(frozen=True)
class MergeNode:
    """One node of the merge tree.

    ``origin`` is the position of the node's corner site inside the target
    lattice; ``embed_a``/``embed_b`` map child-local site indices to this
    node's local indices. ``tracked`` lists every pair (local labels) whose
    hopping and density-density operators must be carried exactly at this
    node; ``cross`` are the tracked pairs first realized here (one endpoint
    in each child). ``assigned`` are the target bonds (local labels, with
    target multiplicity) whose endpoints first coexist at this node.
    """

    geometry: Geometry
    origin: tuple
    children: Optional[tuple] = None
    axis: Optional[str] = None
    embed_a: tuple = ()
    embed_b: tuple = ()
    tracked: tuple = ()
    cross: tuple = ()
    assigned: tuple = ()
    m: Optional[int] = None
    height: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    def root_sites(self, target: Geometry) -> tuple:
        ox, oy = self.origin
        g = self.geometry
        return tuple(target.index(ox + j % g.Lx, oy + j // g.Lx) for j in range(g.n_sites))

    def key(self) -> tuple:
        """Identity of the cluster this node solves (shape + tracked pairs).

        Two nodes with the same key produce interchangeable clusters.
        """
        return (self.geometry.Lx, self.geometry.Ly, self.tracked, self.m,
                None if self.is_leaf else (self.children[0].key(), self.children[1].key(), self.axis))

    def describe(self) -> dict:
        d = {
            "shape": [self.geometry.Lx, self.geometry.Ly],
            "origin": list(self.origin),
            "m": self.m,
            "tracked": [list(p) for p in self.tracked],
            "cross": [list(p) for p in self.cross],
            "assigned": [list(b) for b in self.assigned],
        }
        if not self.is_leaf:
            d["axis"] = self.axis
            d["children"] = [c.describe() for c in self.children]
        return d


@dataclass(frozen=True)
class MergeSchedule:
    target: Geometry
    base: Geometry
    root: MergeNode
    local_dim: int = 2

    def postorder(self) -> Iterator[MergeNode]:
        def walk(node):
            if not node.is_leaf:
                yield from walk(node.children[0])
                yield from walk(node.children[1])
            yield node
        return walk(self.root)

    def leaves(self) -> list:
        return [n for n in self.postorder() if n.is_leaf]

    def describe(self) -> str:
        return json.dumps(
            {"target": [self.target.Lx, self.target.Ly], "base": [self.base.Lx, self.base.Ly],
             "local_dim": self.local_dim, "root": self.root.describe()},
            sort_keys=True,
        )


def _split_axis(units_x: int, units_y: int, Lx: int, Ly: int) -> str:
    # split the longer splittable axis; ties go to y
    can_x, can_y = units_x > 1, units_y > 1
    if can_x and can_y:
        return "x" if Lx > Ly else "y"
    return "x" if can_x else "y"


def _m_for_height(m_schedule: Sequence[int], height: int) -> Optional[int]:
    if not m_schedule or height == 0:
        return None
    return int(m_schedule[min(height - 1, len(m_schedule) - 1)])


def plan_merge_schedule(
    target: Geometry,
    base: Geometry,
    m_schedule: Sequence[int] = (),
    local_dim: int = 2,
    leaf_cap: int = 4096,
) -> MergeSchedule:
    """Binary merge tree from `base`-shaped leaves up to `target`.

    The tree splits the longer axis first (ties: y), halving the number of
    base units with the larger half first, so 3 units become 2 + 1.
    ``m_schedule[h - 1]`` is the corner dimension used at merge height ``h``
    (last entry repeats).
    """
    bx, by = base.shape
    if target.Lx % bx or target.Ly % by:
        raise ScheduleError(
            f"target {target.label()} is not reachable from base {base.label()} by concatenation"
        )
    if local_dim ** base.n_sites > leaf_cap:
        raise ScheduleError(
            f"leaf dimension {local_dim}^{base.n_sites} exceeds the brute-force cap {leaf_cap}"
        )
    pbc = (target.periodic_x, target.periodic_y)
    target_pairs = {(j, l): m for j, l, m in target.bonds}

    def build(Lx, Ly, origin, required_root):
        geom = build_geometry(Lx, Ly, *pbc)
        ox, oy = origin
        to_root = [target.index(ox + j % Lx, oy + j // Lx) for j in range(Lx * Ly)]
        from_root = {r: j for j, r in enumerate(to_root)}
        own = {tuple(sorted((to_root[j], to_root[l]))) for j, l, _ in geom.bonds}
        inside = {p for p in required_root if p[0] in from_root and p[1] in from_root}
        needed_root = sorted(own | inside)

        def local(p):
            return tuple(sorted((from_root[p[0]], from_root[p[1]])))

        tracked = tuple(sorted(local(p) for p in needed_root))
        ux, uy = Lx // bx, Ly // by
        if ux == 1 and uy == 1:
            assigned = tuple(sorted(local(p) + (target_pairs[p],)
                                    for p in needed_root if p in target_pairs))
            return MergeNode(geom, origin, tracked=tracked, assigned=assigned, height=0)

        axis = _split_axis(ux, uy, Lx, Ly)
        if axis == "x":
            ua = (ux + 1) // 2
            shape_a, shape_b = (ua * bx, Ly), (Lx - ua * bx, Ly)
            origin_b = (ox + ua * bx, oy)
        else:
            ua = (uy + 1) // 2
            shape_a, shape_b = (Lx, ua * by), (Lx, Ly - ua * by)
            origin_b = (ox, oy + ua * by)
        a = build(*shape_a, origin, set(needed_root))
        b = build(*shape_b, origin_b, set(needed_root))

        def embed(child, child_origin):
            cx, cy = child_origin[0] - ox, child_origin[1] - oy
            cl = child.geometry.Lx
            return tuple(geom.index(cx + j % cl, cy + j // cl) for j in range(child.geometry.n_sites))

        embed_a, embed_b = embed(a, origin), embed(b, origin_b)
        in_a, in_b = set(embed_a), set(embed_b)
        cross = tuple(p for p in tracked
                      if (p[0] in in_a and p[1] in in_b) or (p[0] in in_b and p[1] in in_a))
        assigned = tuple(sorted(local(p) + (target_pairs[p],) for p in needed_root
                                if p in target_pairs and local(p) in cross))
        height = 1 + max(a.height, b.height)
        return MergeNode(geom, origin, children=(a, b), axis=axis, embed_a=embed_a,
                         embed_b=embed_b, tracked=tracked, cross=cross, assigned=assigned,
                         height=height)

    root = build(target.Lx, target.Ly, (0, 0), set(target_pairs))

    def annotate(node):
        if node.is_leaf:
            return node
        a, b = annotate(node.children[0]), annotate(node.children[1])
        return MergeNode(node.geometry, node.origin, children=(a, b), axis=node.axis,
                         embed_a=node.embed_a, embed_b=node.embed_b, tracked=node.tracked,
                         cross=node.cross, assigned=node.assigned,
                         m=_m_for_height(m_schedule, node.height), height=node.height)

    return MergeSchedule(target=target, base=base, root=annotate(root), local_dim=local_dim)
