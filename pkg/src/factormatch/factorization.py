"""PCA and sparse-NMF factor loadings of a descriptor matrix.

Both factorizations compress a ``T x N`` descriptor matrix into a ``T x k``
loading matrix with unit-norm columns:

* PCA loadings are the top-k left singular vectors (orthonormal, signed so
  each column's largest-magnitude entry is positive).
* NMF loadings come from an alternating minimization of
  ``0.5 * ||M - L R||_F^2`` where every column of ``R`` has a single
  non-negative nonzero — i.e. each descriptor is explained by exactly one
  loading column scaled by a non-negative weight. This is a spherical
  clustering of the descriptor cloud: the assignment step picks the loading
  with the largest inner product, the update step replaces each loading by
  the (scale-weighted) normalized sum of its assigned descriptors. Both
  half-steps are exact coordinate minimizers, so the objective never
  increases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .descriptors import DescriptorMatrix

KIND_PCA = "pca"
KIND_NMF = "nmf"

UNIT_NORM_TOL = 1e-9
ORTHONORMAL_TOL = 1e-8


@dataclass(frozen=True)
class FactorLoadings:
    """A ``T x k`` loading matrix tagged by the factorization that made it."""

    image_id: str
    kind: str
    columns: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.kind not in (KIND_PCA, KIND_NMF):
            raise ValueError(f"kind must be {KIND_PCA!r} or {KIND_NMF!r}, got {self.kind!r}")
        cols = np.array(self.columns, dtype=np.float64, order="C")
        if cols.ndim != 2 or cols.shape[1] < 1:
            raise ValueError(f"loadings must be a T x k matrix with k >= 1, got {cols.shape}")
        object.__setattr__(self, "columns", cols)
        cols.setflags(write=False)

    @property
    def T(self) -> int:
        return self.columns.shape[0]

    @property
    def k(self) -> int:
        return self.columns.shape[1]

    def validate(self) -> None:
        """Check the loading invariants (unit columns; orthonormal/non-negative).

        Freshly factorized loadings satisfy these exactly; dequantized ones do
        not (quantization perturbs the lattice), so validation is explicit
        rather than run at construction.
        """
        norms = np.linalg.norm(self.columns, axis=0)
        if not np.allclose(norms, 1.0, atol=UNIT_NORM_TOL, rtol=0):
            raise ValueError(f"columns are not unit-norm (norms {norms})")
        if self.kind == KIND_PCA:
            gram = self.columns.T @ self.columns
            if not np.allclose(gram, np.eye(self.k), atol=ORTHONORMAL_TOL, rtol=0):
                raise ValueError("PCA loadings are not orthonormal")
        else:
            if (self.columns < 0).any():
                raise ValueError("NMF loadings contain negative entries")


@dataclass(frozen=True)
class FactorAssignment:
    """1-sparse factor matrix: descriptor ``j`` uses loading ``cluster_of[j]``
    with non-negative weight ``scale_of[j]`` (cluster indices are 0-based)."""

    k: int
    cluster_of: np.ndarray
    scale_of: np.ndarray

    def __post_init__(self) -> None:
        cluster = np.array(self.cluster_of, dtype=np.int64)
        scale = np.array(self.scale_of, dtype=np.float64)
        if cluster.shape != scale.shape or cluster.ndim != 1:
            raise ValueError("cluster_of and scale_of must be 1-D and equal length")
        if cluster.size and (cluster.min() < 0 or cluster.max() >= self.k):
            raise ValueError(f"cluster indices must lie in [0, {self.k})")
        if (scale < 0).any():
            raise ValueError("scales must be non-negative")
        object.__setattr__(self, "cluster_of", cluster)
        object.__setattr__(self, "scale_of", scale)
        cluster.setflags(write=False)
        scale.setflags(write=False)

    @property
    def N(self) -> int:
        return self.cluster_of.size

    def to_matrix(self) -> np.ndarray:
        """Densify to the ``k x N`` factor matrix (one nonzero per column)."""
        R = np.zeros((self.k, self.N))
        R[self.cluster_of, np.arange(self.N)] = self.scale_of
        return R


@dataclass(frozen=True)
class SvdResult:
    """Full SVD of a descriptor matrix: ``U @ diag(s) @ Vt`` reconstructs it."""

    U: np.ndarray = field(repr=False)
    singular_values: np.ndarray
    Vt: np.ndarray = field(repr=False)

    def reconstruct(self) -> np.ndarray:
        k = self.singular_values.size
        return (self.U[:, :k] * self.singular_values) @ self.Vt[:k, :]


def compute_svd(m: DescriptorMatrix) -> SvdResult:
    """SVD with a full ``T x T`` orthogonal U and non-increasing singular values."""
    values = m.values.astype(np.float64)
    T, N = values.shape
    try:
        U, s, Vt = np.linalg.svd(values, full_matrices=(T > N))
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"SVD failed on image {m.image_id!r}: {exc}") from exc
    return SvdResult(U=U, singular_values=s, Vt=Vt)


def _canonical_signs(H: np.ndarray) -> np.ndarray:
    """Flip column signs so each column's largest-|entry| (first on ties) is positive."""
    H = H.copy()
    for j in range(H.shape[1]):
        pivot = int(np.argmax(np.abs(H[:, j])))
        if H[pivot, j] < 0:
            H[:, j] = -H[:, j]
    return H


def pca_loadings(
    m: DescriptorMatrix, k: int, svd: SvdResult | None = None
) -> tuple[FactorLoadings, SvdResult]:
    """First ``k`` left singular vectors of the descriptor matrix, sign-canonicalized."""
    if not 1 <= k <= min(m.T, m.N):
        raise ValueError(f"k={k} out of range [1, {min(m.T, m.N)}]")
    if svd is None:
        svd = compute_svd(m)
    H = _canonical_signs(svd.U[:, :k])
    return FactorLoadings(image_id=m.image_id, kind=KIND_PCA, columns=H), svd


def _farthest_point_init(values: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Pick k descriptor columns: seeded first pick, then max-min-distance greedy."""
    N = values.shape[1]
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(N))]
    dist2 = np.sum((values - values[:, chosen[0]][:, None]) ** 2, axis=0)
    for _ in range(k - 1):
        nxt = int(np.argmax(dist2))  # argmax takes the first index on ties
        chosen.append(nxt)
        cand = np.sum((values - values[:, nxt][:, None]) ** 2, axis=0)
        dist2 = np.minimum(dist2, cand)
    L = values[:, chosen].copy()
    norms = np.linalg.norm(L, axis=0)
    norms[norms == 0] = 1.0
    return L / norms


def nmf_loadings(
    m: DescriptorMatrix,
    k: int,
    max_iters: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
) -> tuple[FactorLoadings, FactorAssignment, np.ndarray]:
    """Sparse NMF via alternating assignment/update; returns the objective trace.

    The trace holds ``0.5 * ||M - L R||_F^2`` once per iteration (measured
    after the assignment step) and is non-increasing. Iteration stops when
    the relative decrease falls below ``tol``, when a step yields no measured
    improvement (the previous iterate is kept), or at ``max_iters``.
    """
    if not 1 <= k <= m.N:
        raise ValueError(f"k={k} out of range [1, N={m.N}]")
    if max_iters < 1:
        raise ValueError("max_iters must be positive")
    if tol <= 0:
        raise ValueError("tol must be positive")
    values = m.values.astype(np.float64)
    N = m.N
    col_idx = np.arange(N)

    def assign(L: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        S = L.T @ values  # k x N inner products
        cluster = np.argmax(S, axis=0)
        scale = np.maximum(S[cluster, col_idx], 0.0)
        return cluster, scale

    def objective(L: np.ndarray, cluster: np.ndarray, scale: np.ndarray) -> float:
        approx = L[:, cluster] * scale
        return 0.5 * float(np.sum((values - approx) ** 2))

    L = _farthest_point_init(values, k, seed)
    cluster, scale = assign(L)
    trace = [objective(L, cluster, scale)]

    for _ in range(max_iters - 1):
        # Exact minimizer of the objective over unit-norm columns for the
        # frozen assignment: scale-weighted sum of each cluster's members.
        weighted = np.zeros((k, m.T))
        np.add.at(weighted, cluster, (values * scale).T)
        weighted = weighted.T
        norms = np.linalg.norm(weighted, axis=0)
        live = norms > 0
        L_new = np.zeros_like(L)
        L_new[:, live] = weighted[:, live] / norms[live]

        if not live.all():
            # Re-seed dead clusters (empty, or only zero-scale members) from
            # the worst-explained descriptors; their rows of R are all zero,
            # so this cannot change the objective.
            residual = np.sum((values - L_new[:, cluster] * scale) ** 2, axis=0)
            for j in np.where(~live)[0]:
                pick = int(np.argmax(residual))
                col = values[:, pick]
                L_new[:, j] = col / np.linalg.norm(col)
                residual[pick] = -1.0

        cluster_new, scale_new = assign(L_new)
        obj = objective(L_new, cluster_new, scale_new)
        if obj >= trace[-1]:
            break  # no measurable progress; keep the better iterate
        L, cluster, scale = L_new, cluster_new, scale_new
        converged = (trace[-1] - obj) < tol * trace[-1]
        trace.append(obj)
        if converged:
            break

    loadings = FactorLoadings(image_id=m.image_id, kind=KIND_NMF, columns=L)
    assignment = FactorAssignment(k=k, cluster_of=cluster, scale_of=scale)
    return loadings, assignment, np.array(trace)


def nmf_objective(
    m: DescriptorMatrix, loadings: FactorLoadings, assign: FactorAssignment
) -> float:
    """``0.5 * ||M - L R||_F^2`` with R densified from the assignment."""
    if loadings.T != m.T or assign.N != m.N or assign.k != loadings.k:
        raise ValueError(
            f"shape mismatch: M is {m.T}x{m.N}, L is {loadings.T}x{loadings.k}, "
            f"R is {assign.k}x{assign.N}"
        )
    residual = m.values.astype(np.float64) - loadings.columns @ assign.to_matrix()
    return 0.5 * float(np.sum(residual * residual))
