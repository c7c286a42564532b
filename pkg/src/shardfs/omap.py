"""Balanced ordered map used for the inode and dentry trees.

A treap keyed on comparable keys (ints or tuples). Expected O(log n)
insert/lookup/delete and exact in-order iteration, which is all the
partition trees require. Priorities come from a per-instance PRNG with a
fixed seed so identical operation sequences rebuild identical trees on
every replica (not required for correctness, but keeps runs reproducible).
"""

from __future__ import annotations

import random
from typing import Any, Iterator


class _Node:
    __slots__ = ("key", "value", "prio", "left", "right")

    def __init__(self, key, value, prio):
        self.key = key
        self.value = value
        self.prio = prio
        self.left: _Node | None = None
        self.right: _Node | None = None


class OrderedMap:
    """Sorted associative container with in-order iteration."""

    def __init__(self, items=None):
        self._root: _Node | None = None
        self._len = 0
        self._rng = random.Random(0x5EED)
        if items:
            for k, v in items:
                self[k] = v

    def __len__(self) -> int:
        return self._len

    def __contains__(self, key) -> bool:
        return self._find(key) is not None

    def __getitem__(self, key):
        node = self._find(key)
        if node is None:
            raise KeyError(key)
        return node.value

    def get(self, key, default=None):
        node = self._find(key)
        return default if node is None else node.value

    def __setitem__(self, key, value) -> None:
        self._root, created = self._insert(self._root, key, value)
        if created:
            self._len += 1

    def __delitem__(self, key) -> None:
        self._root, removed = self._delete(self._root, key)
        if not removed:
            raise KeyError(key)
        self._len -= 1

    def pop(self, key, default=_Node):
        node = self._find(key)
        if node is None:
            if default is _Node:
                raise KeyError(key)
            return default
        value = node.value
        del self[key]
        return value

    def clear(self) -> None:
        self._root = None
        self._len = 0

    def min_key(self):
        node = self._root
        if node is None:
            raise KeyError("empty map")
        while node.left is not None:
            node = node.left
        return node.key

    def max_key(self):
        node = self._root
        if node is None:
            raise KeyError("empty map")
        while node.right is not None:
            node = node.right
        return node.key

    def items(self, lo=None) -> Iterator[tuple[Any, Any]]:
        """In-order (key, value) pairs; starts at the first key >= lo."""
        stack: list[_Node] = []
        node = self._root
        while node is not None:
            if lo is not None and node.key < lo:
                node = node.right
            else:
                stack.append(node)
                node = node.left
        while stack:
            node = stack.pop()
            yield node.key, node.value
            node = node.right
            while node is not None:
                if lo is not None and node.key < lo:
                    node = node.right
                else:
                    stack.append(node)
                    node = node.left

    def keys(self, lo=None) -> Iterator[Any]:
        for k, _ in self.items(lo):
            yield k

    def values(self) -> Iterator[Any]:
        for _, v in self.items():
            yield v

    # -- internals ---------------------------------------------------------

    def _find(self, key) -> _Node | None:
        node = self._root
        while node is not None:
            if key < node.key:
                node = node.left
            elif node.key < key:
                node = node.right
            else:
                return node
        return None

    def _insert(self, node: _Node | None, key, value) -> tuple[_Node, bool]:
        if node is None:
            return _Node(key, value, self._rng.random()), True
        if key < node.key:
            node.left, created = self._insert(node.left, key, value)
            if node.left.prio < node.prio:
                node = self._rotate_right(node)
        elif node.key < key:
            node.right, created = self._insert(node.right, key, value)
            if node.right.prio < node.prio:
                node = self._rotate_left(node)
        else:
            node.value = value
            created = False
        return node, created

    def _delete(self, node: _Node | None, key) -> tuple[_Node | None, bool]:
        if node is None:
            return None, False
        if key < node.key:
            node.left, removed = self._delete(node.left, key)
        elif node.key < key:
            node.right, removed = self._delete(node.right, key)
        else:
            return self._merge(node.left, node.right), True
        return node, removed

    @staticmethod
    def _merge(a: _Node | None, b: _Node | None) -> _Node | None:
        if a is None:
            return b
        if b is None:
            return a
        if a.prio < b.prio:
            a.right = OrderedMap._merge(a.right, b)
            return a
        b.left = OrderedMap._merge(a, b.left)
        return b

    @staticmethod
    def _rotate_right(node: _Node) -> _Node:
        pivot = node.left
        node.left = pivot.right
        pivot.right = node
        return pivot

    @staticmethod
    def _rotate_left(node: _Node) -> _Node:
        pivot = node.right
        node.right = pivot.left
        pivot.left = node
        return pivot
