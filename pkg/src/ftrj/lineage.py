"""Lineage prior: adjacency over classes and the illegal-direction matrix."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class LineageError(ValueError):
    pass


@dataclass(frozen=True)
class LineageTree:
    """Directed adjacency ``A`` over classes; ``A[i, j] = 1`` means ``i`` may become ``j``."""

    class_names: tuple[str, ...]
    adjacency: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @classmethod
    def from_edges(cls, class_names, edges, transitive_closure: bool = False) -> "LineageTree":
        names = tuple(str(c) for c in class_names)
        index = {c: i for i, c in enumerate(names)}
        a = np.eye(len(names), dtype=np.int64)
        for src, dst in edges:
            try:
                a[index[str(src)], index[str(dst)]] = 1
            except KeyError as exc:
                raise LineageError(f"edge {src}->{dst} names an unknown class") from exc
        if transitive_closure:
            a = closure(a)
        return validate_tree(cls(names, a))

    def edges(self) -> list[tuple[str, str]]:
        return [(self.class_names[i], self.class_names[j])
                for i, j in zip(*np.nonzero(self.adjacency)) if i != j]

    def admissible(self, src: int, dst: int) -> bool:
        return bool(self.adjacency[src, dst])


def closure(a: np.ndarray) -> np.ndarray:
    reach = a.astype(bool)
    while True:
        nxt = reach | ((reach.astype(np.int64) @ reach.astype(np.int64)) > 0)
        if (nxt == reach).all():
            return nxt.astype(np.int64)
        reach = nxt


def validate_tree(tree: LineageTree) -> LineageTree:
    a = np.asarray(tree.adjacency)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise LineageError("adjacency must be square")
    if a.shape[0] != len(tree.class_names) or a.shape[0] < 1:
        raise LineageError(f"{len(tree.class_names)} class names for a {a.shape[0]}x{a.shape[0]} adjacency")
    if not np.isin(a, (0, 1)).all():
        raise LineageError("adjacency entries must be 0 or 1")
    missing = [tree.class_names[i] for i in range(a.shape[0]) if a[i, i] != 1]
    if missing:
        raise LineageError(f"missing self-loop for classes {missing}")
    return tree


def illegal_matrix(tree: LineageTree) -> np.ndarray:
    """``1 - A^T``: column ``c`` flags the classes not reachable in one step from ``c``."""
    a = validate_tree(tree).adjacency
    return (np.ones_like(a) - a.T).astype(np.float64)


def load_lineage(path, transitive_closure: bool = False) -> LineageTree:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        return LineageTree.from_edges(doc["classes"], doc.get("edges", []), transitive_closure)
    except KeyError as exc:
        raise LineageError(f"{path}: lineage file needs a 'classes' list") from exc


def save_lineage(tree: LineageTree, path) -> None:
    doc = {"classes": list(tree.class_names), "edges": [list(e) for e in tree.edges()]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
