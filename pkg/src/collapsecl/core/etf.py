"""
Fixed simplex-ETF prototypes and the class -> vertex assignment.

The prototype matrix is built once per experiment for every class of the
stream and never trained.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from ..errors import DimensionError, DomainError, MissingClassError, ShapeError


@dataclass(frozen=True)
class PrototypeSet:
    """K unit vectors in R^d with pairwise inner product -1/(K-1)."""
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] < 1 or vectors.shape[1] < 1:
            raise ShapeError(f"prototype matrix must be K x d, got shape {vectors.shape}")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def rows(self, vertices: Sequence[int]) -> np.ndarray:
        """Rows for a list of vertex indices, (len(vertices), d)."""
        return self.vectors[np.asarray(list(vertices), dtype=np.int64)].reshape(-1, self.dim)

    def to_dict(self) -> dict[str, Any]:
        return {
            "k": self.num_classes,
            "d": self.dim,
            "vectors": [[float(v) for v in row] for row in self.vectors],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PrototypeSet":
        vectors = np.asarray(data["vectors"], dtype=np.float64)
        if vectors.shape != (int(data["k"]), int(data["d"])):
            raise ShapeError(
                f"prototype document declares k={data['k']}, d={data['d']} "
                f"but holds shape {vectors.shape}"
            )
        return cls(vectors)


def _orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Orthonormalize a Gaussian rows x cols matrix (cols <= rows)."""
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    # Fix column signs so the factorization is unique.
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def generate_etf(num_classes: int, dim: int, seed: int) -> PrototypeSet:
    """Build Q = sqrt(K/(K-1)) U (I_K - 1 1^T / K) and return its columns as rows.

    For K <= d, U is the orthonormalized seeded Gaussian d x K matrix. For
    K = d + 1 no d x K matrix has orthonormal columns, so U is taken as
    V B^T with V an orthonormalized Gaussian d x (K-1) and B an orthonormal
    basis of the complement of 1_K; the Gram matrix is the same.
    """
    k, d = int(num_classes), int(dim)
    if k < 2:
        raise DomainError(f"an ETF needs K >= 2 vertices, got K={k}")
    if d < 1:
        raise DomainError(f"embedding dimension must be >= 1, got d={d}")
    if k > d + 1:
        raise DimensionError(f"K={k} exceeds d+1={d + 1}")

    rng = np.random.default_rng(seed)
    centering = np.eye(k) - np.ones((k, k)) / k
    if k <= d:
        basis = _orthonormal_columns(rng, d, k)
    else:
        v = _orthonormal_columns(rng, d, k - 1)
        b, _ = np.linalg.qr(centering[:, : k - 1])
        basis = v @ b.T
    q = np.sqrt(k / (k - 1)) * basis @ centering
    return PrototypeSet(q.T.copy())


def etf_geometry_error(prototypes: PrototypeSet) -> float:
    """Largest deviation of norms from 1 and of off-diagonal Gram entries from -1/(K-1)."""
    k = prototypes.num_classes
    gram = prototypes.vectors @ prototypes.vectors.T
    norm_err = np.max(np.abs(np.sqrt(np.diag(gram)) - 1.0))
    if k < 2:
        return float(norm_err)
    off = gram[~np.eye(k, dtype=bool)]
    pair_err = np.max(np.abs(off + 1.0 / (k - 1)))
    return float(max(norm_err, pair_err))


def verify_etf(prototypes: PrototypeSet, tol: float) -> bool:
    """True iff all norms are within tol of 1 and all pairwise products within tol of -1/(K-1)."""
    k = prototypes.num_classes
    norms = np.linalg.norm(prototypes.vectors, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        return False
    if k < 2:
        return True
    gram = prototypes.vectors @ prototypes.vectors.T
    off = gram[~np.eye(k, dtype=bool)]
    return bool(np.all(np.abs(off + 1.0 / (k - 1)) <= tol))


@dataclass
class ClassPrototypeMap:
    """Global class label -> ETF vertex, plus the vertices each task introduced."""
    class_to_vertex: dict[int, int] = field(default_factory=dict)
    per_task_ranges: dict[int, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        vertices = list(self.class_to_vertex.values())
        if len(set(vertices)) != len(vertices):
            raise DomainError("class -> vertex mapping must be injective")

    @classmethod
    def from_task_classes(cls, task_classes: Iterable[Iterable[int]]) -> "ClassPrototypeMap":
        """Assign vertices in order of first appearance; tasks are numbered from 1."""
        mapping: dict[int, int] = {}
        ranges: dict[int, tuple[int, ...]] = {}
        for t, classes in enumerate(task_classes, start=1):
            introduced = []
            for label in classes:
                label = int(label)
                if label not in mapping:
                    mapping[label] = len(mapping)
                    introduced.append(mapping[label])
            ranges[t] = tuple(introduced)
        return cls(class_to_vertex=mapping, per_task_ranges=ranges)

    @property
    def num_classes(self) -> int:
        return len(self.class_to_vertex)

    def vertex(self, label: int) -> int:
        try:
            return self.class_to_vertex[int(label)]
        except KeyError:
            raise MissingClassError(f"class {label} has no prototype") from None

    def vertices_for(self, labels: Iterable[int]) -> np.ndarray:
        return np.array([self.vertex(y) for y in labels], dtype=np.int64)

    def vertices_up_to(self, t: int) -> list[int]:
        """Vertex indices of P_{1:t}."""
        out: list[int] = []
        for task in sorted(self.per_task_ranges):
            if task <= t:
                out.extend(self.per_task_ranges[task])
        return out

    def vertices_before(self, t: int) -> list[int]:
        """Vertex indices of P_{1:t-1}."""
        return self.vertices_up_to(t - 1)

    def classes_for_vertices(self, vertices: Iterable[int]) -> list[int]:
        inverse = {v: c for c, v in self.class_to_vertex.items()}
        return [inverse[v] for v in vertices]


def prototype_for_class(proto_map: ClassPrototypeMap, prototypes: PrototypeSet, label: int) -> np.ndarray:
    """The stored ETF row for a label (pure lookup)."""
    return prototypes.vectors[proto_map.vertex(label)]


def prototypes_for_labels(proto_map: ClassPrototypeMap, prototypes: PrototypeSet, labels: Iterable[int]) -> np.ndarray:
    """Row i is the prototype of labels[i]."""
    return prototypes.vectors[proto_map.vertices_for(labels)]
