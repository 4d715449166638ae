"""Spatial object tree: a pair of coordinate interval trees over object centers.

Each axis tree is a plain (unbalanced) binary search tree whose nodes hold a
fixed-length interval and the ids of the objects whose center coordinate falls
inside it. An object's neighborhood is the intersection of its x-node and
y-node members.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .core import InvalidInputError, Measurement, ObjectInstance, as_point, require

AXES = {"x": 0, "y": 1}


class IntervalNode:
    __slots__ = ("lo", "hi", "members", "left", "right")

    def __init__(self, lo: float, hi: float):
        self.lo = lo
        self.hi = hi
        self.members: dict[int, None] = {}  # insertion-ordered id set
        self.left: Optional[IntervalNode] = None
        self.right: Optional[IntervalNode] = None

    def __contains__(self, value: float) -> bool:
        return self.lo <= value <= self.hi

    def __repr__(self):
        return f"IntervalNode([{self.lo:.4f}, {self.hi:.4f}], n={len(self.members)})"


class IntervalTree:
    """Disjoint fixed-length intervals kept in BST order along one axis."""

    def __init__(self, axis: str, length: float):
        if axis not in AXES:
            raise InvalidInputError(f"axis must be 'x' or 'y', got {axis!r}")
        if length <= 0:
            raise InvalidInputError("interval length must be positive")
        self.axis = axis
        self.length = float(length)
        self.root: Optional[IntervalNode] = None

    def find(self, value: float) -> Optional[IntervalNode]:
        node = self.root
        while node is not None:
            if value < node.lo:
                node = node.left
            elif value > node.hi:
                node = node.right
            else:
                return node
        return None

    def find_or_create(self, value: float) -> IntervalNode:
        half = self.length / 2.0
        if self.root is None:
            self.root = IntervalNode(value - half, value + half)
            return self.root
        node = self.root
        below = above = None  # nearest existing intervals on either side
        while True:
            if value < node.lo:
                above = node
                if node.left is None:
                    break
                node = node.left
            elif value > node.hi:
                below = node
                if node.right is None:
                    break
                node = node.right
            else:
                return node
        # Clip to the gap between neighbours so intervals stay disjoint.
        lo = value - half
        hi = value + half
        if below is not None:
            lo = max(lo, float(np.nextafter(below.hi, np.inf)))
        if above is not None:
            hi = min(hi, float(np.nextafter(above.lo, -np.inf)))
        new = IntervalNode(lo, hi)
        if value < node.lo:
            node.left = new
        else:
            node.right = new
        return new

    def overlapping(self, lo: float, hi: float) -> list[IntervalNode]:
        """Nodes whose interval intersects [lo, hi], in increasing order."""
        out: list[IntervalNode] = []

        def visit(node):
            if node is None:
                return
            if lo < node.lo:
                visit(node.left)
            if node.lo <= hi and node.hi >= lo:
                out.append(node)
            if hi > node.hi:
                visit(node.right)

        visit(self.root)
        return out

    def nodes(self) -> Iterator[IntervalNode]:
        """In-order traversal."""
        stack: list[IntervalNode] = []
        node = self.root
        while stack or node is not None:
            while node is not None:
                stack.append(node)
                node = node.left
            node = stack.pop()
            yield node
            node = node.right

    def check_invariants(self) -> None:
        def check(node, lower, upper):
            if node is None:
                return
            require(node.lo <= node.hi, node)
            require(lower is None or node.lo > lower, (node, lower))
            require(upper is None or node.hi < upper, (node, upper))
            check(node.left, lower, node.lo)
            check(node.right, node.hi, upper)

        check(self.root, None, None)
        prev = None
        for node in self.nodes():
            if prev is not None:
                require(prev.hi < node.lo, (prev, node))
            prev = node


@dataclass(frozen=True)
class AssociationOutcome:
    kind: str              # "associated" | "instantiated"
    object_id: int
    updated: bool = False


class SpatialObjectTree:
    """Objects indexed by two interval trees (x and y).

    ``neighbor_margin`` > 0 widens neighborhood queries to every node within
    that distance of the query coordinate; 0 keeps the single-node rule.
    """

    def __init__(self, length: float = 1.2, neighbor_margin: float = 0.0):
        self.length = float(length)
        self.neighbor_margin = float(neighbor_margin)
        self.tx = IntervalTree("x", length)
        self.ty = IntervalTree("y", length)
        self.objects: dict[int, ObjectInstance] = {}
        self._nodes: dict[int, tuple] = {}
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.objects)

    def __iter__(self):
        return iter(self.all_objects())

    def __getitem__(self, object_id: int) -> ObjectInstance:
        return self.objects[object_id]

    def all_objects(self) -> list[ObjectInstance]:
        return [self.objects[i] for i in sorted(self.objects)]

    def _axis_members(self, tree: IntervalTree, value: float) -> Optional[set]:
        if self.neighbor_margin > 0:
            nodes = tree.overlapping(value - self.neighbor_margin, value + self.neighbor_margin)
            if not nodes:
                return None
            return set().union(*(n.members for n in nodes))
        node = tree.find(value)
        return None if node is None else node.members.keys()

    def query_neighborhood(self, p) -> list[ObjectInstance]:
        """Objects sharing both the x-node and the y-node of ``p``, sorted by id."""
        p = as_point(p)
        xs = self._axis_members(self.tx, p[0])
        if not xs:
            return []
        ys = self._axis_members(self.ty, p[1])
        if not ys:
            return []
        if len(xs) > len(ys):
            xs, ys = ys, xs
        return [self.objects[i] for i in sorted(i for i in xs if i in ys)]

    def add_object(self, shape_code, center, quality: float, label=None) -> ObjectInstance:
        obj = ObjectInstance(self._next_id, shape_code, center, quality, label)
        self._next_id += 1
        self.objects[obj.id] = obj
        self._place(obj)
        return obj

    def _place(self, obj: ObjectInstance) -> None:
        nx = self.tx.find_or_create(obj.center[0])
        ny = self.ty.find_or_create(obj.center[1])
        nx.members[obj.id] = None
        ny.members[obj.id] = None
        self._nodes[obj.id] = (nx, ny)

    def update_object(self, obj: ObjectInstance, shape_code, center, quality: float) -> None:
        """Replace an object's state, moving it to new nodes if its center left them."""
        obj.set_state(shape_code, center, quality)
        nx, ny = self._nodes[obj.id]
        if obj.center[0] not in nx or obj.center[1] not in ny:
            del nx.members[obj.id]
            del ny.members[obj.id]
            self._place(obj)

    def insert_or_associate(
        self, m: Measurement, delta_d: float = 0.02, delta_s: float = 0.9
    ) -> AssociationOutcome:
        """Associate ``m`` with a nearby, shape-similar object or start a new one.

        Among candidates closer than ``delta_d`` with similarity above
        ``delta_s`` the most similar wins (then nearest, then lowest id). The
        stored code and center are replaced only if ``m`` has higher quality.
        """
        if delta_d <= 0 or not (0.0 < delta_s < 1.0):
            raise InvalidInputError("need delta_d > 0 and delta_s in (0, 1)")
        center = as_point(m.center)
        code = m.shape_code
        unit = code / np.linalg.norm(code)
        best = None
        best_key = None
        for obj in self.query_neighborhood(center):
            dist = float(np.linalg.norm(obj.center - center))
            if dist >= delta_d:
                continue
            sim = float(obj.unit_code @ unit)
            if sim <= delta_s:
                continue
            key = (-sim, dist, obj.id)
            if best_key is None or key < best_key:
                best, best_key = obj, key
        if best is None:
            obj = self.add_object(code, center, m.quality, m.label)
            return AssociationOutcome("instantiated", obj.id)
        if m.quality > best.quality:
            self.update_object(best, code, center, m.quality)
            return AssociationOutcome("associated", best.id, updated=True)
        return AssociationOutcome("associated", best.id, updated=False)

    def check_invariants(self) -> None:
        self.tx.check_invariants()
        self.ty.check_invariants()
        seen_x: dict[int, IntervalNode] = {}
        seen_y: dict[int, IntervalNode] = {}
        for tree, seen in ((self.tx, seen_x), (self.ty, seen_y)):
            for node in tree.nodes():
                for oid in node.members:
                    require(oid not in seen, f"object {oid} in two {tree.axis}-nodes")
                    seen[oid] = node
        require(set(seen_x) == set(self.objects) == set(seen_y), "node membership out of sync")
        for oid, obj in self.objects.items():
            require(obj.center[0] in seen_x[oid], (oid, obj.center, seen_x[oid]))
            require(obj.center[1] in seen_y[oid], (oid, obj.center, seen_y[oid]))

    def to_dict(self) -> dict:
        def dump(tree):
            return [{"lo": n.lo, "hi": n.hi, "members": sorted(n.members)} for n in tree.nodes()]

        return {
            "length": self.length,
            "neighbor_margin": self.neighbor_margin,
            "x_nodes": dump(self.tx),
            "y_nodes": dump(self.ty),
            "objects": [o.to_dict() for o in self.all_objects()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SpatialObjectTree":
        """Rebuild a tree from a dump, replaying node creation in dump order.

        Node intervals are restored exactly; BST shape may differ from the
        original, which does not affect any query.
        """
        tree = cls(d["length"], d.get("neighbor_margin", 0.0))
        for obj_d in d["objects"]:
            obj = ObjectInstance.from_dict(obj_d)
            tree.objects[obj.id] = obj
            tree._next_id = max(tree._next_id, obj.id + 1)
        for axis_tree, key in ((tree.tx, "x_nodes"), (tree.ty, "y_nodes")):
            nodes = d[key]
            # Insert medians first so the rebuilt BST stays shallow.
            order = _median_order(len(nodes))
            for idx in order:
                nd = nodes[idx]
                node = IntervalNode(nd["lo"], nd["hi"])
                node.members = {oid: None for oid in nd["members"]}
                _bst_insert(axis_tree, node)
        by_x = {oid: n for n in tree.tx.nodes() for oid in n.members}
        by_y = {oid: n for n in tree.ty.nodes() for oid in n.members}
        tree._nodes = {oid: (by_x[oid], by_y[oid]) for oid in tree.objects}
        return tree

    @classmethod
    def from_json(cls, text: str) -> "SpatialObjectTree":
        return cls.from_dict(json.loads(text))


def _median_order(n: int) -> list[int]:
    out: list[int] = []
    spans = [(0, n)]
    while spans:
        lo, hi = spans.pop(0)
        if lo >= hi:
            continue
        mid = (lo + hi) // 2
        out.append(mid)
        spans.append((lo, mid))
        spans.append((mid + 1, hi))
    return out


def _bst_insert(tree: IntervalTree, new: IntervalNode) -> None:
    if tree.root is None:
        tree.root = new
        return
    node = tree.root
    while True:
        if new.hi < node.lo:
            if node.left is None:
                node.left = new
                return
            node = node.left
        else:
            if node.right is None:
                node.right = new
                return
            node = node.right
