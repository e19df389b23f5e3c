"""Static centered interval tree over closed integer intervals."""
from __future__ import annotations


class IntervalTree:
    """Stabbing queries over ``(start, stop, payload)`` with inclusive bounds.

    >>> t = IntervalTree([(2, 3, "a"), (1, 8, "b"), (3, 6, "c")])
    >>> sorted(t.stab(3))
    ['a', 'b', 'c']
    >>> sorted(t.stab(7))
    ['b']
    """

    __slots__ = ("center", "by_start", "by_stop", "left", "right")

    def __init__(self, intervals):
        intervals = list(intervals)
        self.left = self.right = None
        if not intervals:
            self.center = 0
            self.by_start = self.by_stop = []
            return
        points = sorted(p for s, e, _ in intervals for p in (s, e))
        self.center = points[len(points) // 2]
        here, lefts, rights = [], [], []
        for iv in intervals:
            if iv[1] < self.center:
                lefts.append(iv)
            elif iv[0] > self.center:
                rights.append(iv)
            else:
                here.append(iv)
        self.by_start = sorted(here, key=lambda iv: iv[0])
        self.by_stop = sorted(here, key=lambda iv: -iv[1])
        if lefts:
            self.left = IntervalTree(lefts)
        if rights:
            self.right = IntervalTree(rights)

    def stab(self, c) -> list:
        """Payloads of all intervals containing ``c``."""
        out = []
        node = self
        while node is not None:
            if c < node.center:
                for s, e, p in node.by_start:
                    if s > c:
                        break
                    out.append(p)
                node = node.left
            elif c > node.center:
                for s, e, p in node.by_stop:
                    if e < c:
                        break
                    out.append(p)
                node = node.right
            else:
                out.extend(p for _, _, p in node.by_start)
                break
        return out

    def __bool__(self):
        return bool(self.by_start) or self.left is not None or self.right is not None


class IntervalTreeSet:
    """Nested z -> y -> x interval trees over axis aligned boxes.

    ``boxes`` maps payload to ``(min_xyz, max_xyz)`` inclusive corners.  The
    z tree is built once; y and x trees are built on demand for a slice / line.
    """

    def __init__(self, boxes: dict):
        self.boxes = boxes
        self.z_tree = IntervalTree((lo[2], hi[2], k) for k, (lo, hi) in boxes.items())

    def slice_tree(self, z) -> IntervalTree:
        return IntervalTree((self.boxes[k][0][1], self.boxes[k][1][1], k) for k in self.z_tree.stab(z))

    def line_tree(self, y_tree: IntervalTree, y) -> IntervalTree:
        return IntervalTree((self.boxes[k][0][0], self.boxes[k][1][0], k) for k in y_tree.stab(y))

    def stab(self, x, y, z) -> list:
        return self.line_tree(self.slice_tree(z), y).stab(x)
