"""Storage and compute compression kernels for embedding matrices and attention.

Three independent tools:

* clustered low-rank decomposition of a vocabulary-sized embedding matrix
  (seeded k-means row clustering, per-cluster truncated SVD around the
  cluster mean, sparse residual correction of the worst entries);
* linear attention via the ELU+1 feature map and right-associated products,
  O(N d^2) instead of O(N^2 d), with multiply-count instrumentation;
* fused query-key attention sharing one projection for Q and K, cutting the
  four d x d attention matrices to three.

Decompositions serialize to a "TVC1" container with a trailing CRC32.
"""

from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    ChecksumMismatch,
    EmptyCluster,
    ShapeMismatch,
    TruncatedFile,
    UnsupportedVersion,
)

_MAGIC = b"TVC1"
_VERSION = 1

_DENOM_GUARD = 1e-9


# -- operation counting ------------------------------------------------------

@dataclass
class OpCounter:
    """Counts scalar multiplies of the matrix products in an attention call."""

    multiplies: int = 0

    def matmul(self, m: int, k: int, n: int) -> None:
        self.multiplies += m * k * n


def _mm(a: np.ndarray, b: np.ndarray, counter: OpCounter | None) -> np.ndarray:
    if counter is not None:
        counter.matmul(a.shape[0], a.shape[1], b.shape[1])
    return a @ b


# -- attention kernels -------------------------------------------------------

def elu1(x) -> np.ndarray:
    """Positive feature map: x + 1 for x > 0, e^x otherwise (phi(0) = 1)."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def _check_nxd(*mats):
    shapes = {m.shape for m in mats}
    if len(shapes) != 1 or any(m.ndim != 2 for m in mats):
        raise ShapeMismatch(f"Q/K/V must share one N x d shape, got {sorted(shapes)}")
    if mats[0].shape[0] < 1:
        raise ShapeMismatch("need at least one row")


def linear_attention(q, k, v, counter: OpCounter | None = None) -> np.ndarray:
    """phi(Q) (phi(K)^T V) / (phi(Q) . sum phi(K)), right-associated.

    The d x d summary phi(K)^T V and the d-vector sum of phi(K) rows are
    built once, so cost grows linearly in N. Denominators are guarded at
    1e-9 (phi > 0 keeps them positive anyway).
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_nxd(q, k, v)
    fq = elu1(q)
    fk = elu1(k)
    kv = _mm(fk.T, v, counter)          # d x d summary
    ksum = fk.sum(axis=0)               # d
    num = _mm(fq, kv, counter)          # N x d
    denom = fq @ ksum                   # N  (counted as a matmul with n=1)
    if counter is not None:
        counter.matmul(fq.shape[0], fq.shape[1], 1)
    denom = np.maximum(denom, _DENOM_GUARD)
    return num / denom[:, None]


def kernel_attention_naive(q, k, v, counter: OpCounter | None = None) -> np.ndarray:
    """Quadratic-cost evaluation of the same feature-map attention.

    Materializes the full N x N weight matrix phi(Q) phi(K)^T and normalizes
    each row; the linear version must match this within float tolerance.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_nxd(q, k, v)
    fq = elu1(q)
    fk = elu1(k)
    a = _mm(fq, fk.T, counter)          # N x N kernel scores, all positive
    denom = np.maximum(a.sum(axis=1), _DENOM_GUARD)
    out = _mm(a, v, counter)
    return out / denom[:, None]


def kernel_attention_weights(q, k) -> np.ndarray:
    """Row-normalized attention weights of the feature-map kernel (oracle aid)."""
    a = elu1(np.asarray(q, dtype=np.float64)) @ elu1(np.asarray(k, dtype=np.float64)).T
    return a / np.maximum(a.sum(axis=1, keepdims=True), _DENOM_GUARD)


def softmax_attention(q, k, v, counter: OpCounter | None = None) -> np.ndarray:
    """Standard scaled-dot-product attention (the quadratic baseline)."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_nxd(q, k, v)
    d = q.shape[1]
    s = _mm(q, k.T, counter) / np.sqrt(d)
    s = s - s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    return _mm(p, v, counter)


@dataclass(frozen=True)
class AttentionWeights:
    """Standard four-matrix attention parameters, all d x d."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def __post_init__(self):
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            m = getattr(self, name)
            if m.shape != (d, d):
                raise ShapeMismatch(f"{name} must be {d} x {d}, got {m.shape}")

    @property
    def d(self) -> int:
        return int(self.w_q.shape[0])


@dataclass(frozen=True)
class FusedAttentionWeights:
    """Three-matrix variant: one shared projection serves as both Q and K."""

    w_fused: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def __post_init__(self):
        d = self.w_fused.shape[0]
        for name in ("w_fused", "w_v", "w_o"):
            m = getattr(self, name)
            if m.shape != (d, d):
                raise ShapeMismatch(f"{name} must be {d} x {d}, got {m.shape}")

    @property
    def d(self) -> int:
        return int(self.w_fused.shape[0])


def attention_param_counts(d: int) -> dict:
    """Parameter accounting for the two variants at width d."""
    separate = 4 * d * d
    fused = 3 * d * d
    return {
        "d": int(d),
        "separate_params": separate,
        "fused_params": fused,
        "saving_fraction": 1.0 - fused / separate,
    }


def fused_scores(x, w: FusedAttentionWeights) -> np.ndarray:
    """Pre-softmax score matrix with Q = K = X W_fused^T (symmetric)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.d:
        raise ShapeMismatch(f"input must be N x {w.d}, got {x.shape}")
    g = x @ w.w_fused.T
    return g @ g.T / np.sqrt(w.d)


def fused_attention(x, w: FusedAttentionWeights,
                    counter: OpCounter | None = None) -> np.ndarray:
    """Softmax attention with the shared query/key projection."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.d:
        raise ShapeMismatch(f"input must be N x {w.d}, got {x.shape}")
    g = _mm(x, w.w_fused.T, counter)
    s = _mm(g, g.T, counter) / np.sqrt(w.d)
    s = s - s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    v = _mm(x, w.w_v.T, counter)
    return _mm(_mm(p, v, counter), w.w_o.T, counter)


def separate_attention(x, w: AttentionWeights,
                       counter: OpCounter | None = None) -> np.ndarray:
    """Standard attention with distinct Q/K projections (baseline)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.d:
        raise ShapeMismatch(f"input must be N x {w.d}, got {x.shape}")
    q = _mm(x, w.w_q.T, counter)
    k = _mm(x, w.w_k.T, counter)
    s = _mm(q, k.T, counter) / np.sqrt(w.d)
    s = s - s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    v = _mm(x, w.w_v.T, counter)
    return _mm(_mm(p, v, counter), w.w_o.T, counter)


def attention_benchmark(ns, d: int, seed: int = 42) -> list[dict]:
    """Multiply counts, agreement, and wall time per sequence length."""
    rng = np.random.default_rng(seed)
    rows = []
    for n in ns:
        q = rng.standard_normal((n, d))
        k = rng.standard_normal((n, d))
        v = rng.standard_normal((n, d))
        c_naive, c_linear = OpCounter(), OpCounter()
        t0 = time.perf_counter()
        ref = kernel_attention_naive(q, k, v, c_naive)
        t1 = time.perf_counter()
        fast = linear_attention(q, k, v, c_linear)
        t2 = time.perf_counter()
        rows.append({
            "n": int(n),
            "d": int(d),
            "naive_multiplies": c_naive.multiplies,
            "linear_multiplies": c_linear.multiplies,
            "max_abs_diff": float(np.max(np.abs(ref - fast))),
            "naive_seconds": t1 - t0,
            "linear_seconds": t2 - t1,
        })
    return rows


# -- clustered low-rank decomposition ---------------------------------------

@dataclass(frozen=True)
class ClusteredLowRank:
    """Per-cluster mean + rank-r factors + sparse residual for a V x d matrix.

    Row v reconstructs as centroid[c] + U_c[pos(v)] @ Vt_c, where pos(v) is
    the row's position among its cluster's members in ascending row order,
    plus any residual entries addressed at (row, col).
    """

    shape: tuple[int, int]
    assignments: np.ndarray          # (V,) cluster id per row
    centroids: np.ndarray            # (C, d)
    factors_u: tuple                 # per cluster (n_c, r_c)
    factors_vt: tuple                # per cluster (r_c, d)
    residual_indices: np.ndarray     # (R,) flat indices into the V x d matrix
    residual_values: np.ndarray      # (R,)
    rank: int                        # requested rank

    def __post_init__(self):
        v_rows, d = self.shape
        if self.assignments.shape != (v_rows,):
            raise ValueError("one cluster assignment per row required")
        c = self.centroids.shape[0]
        if not (1 <= c <= v_rows):
            raise ValueError("cluster count must be in 1..V")
        if len(self.factors_u) != c or len(self.factors_vt) != c:
            raise ValueError("need factor pair per cluster")
        if self.residual_indices.shape != self.residual_values.shape:
            raise ValueError("residual indices and values must align")
        if self.residual_indices.size and (
            self.residual_indices.min() < 0
            or self.residual_indices.max() >= v_rows * d
        ):
            raise ValueError("residual index out of range")

    @property
    def n_clusters(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def n_residual(self) -> int:
        return int(self.residual_values.size)


def _kmeanspp_seeds(rows: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ initial centroids (distance-squared weighted sampling)."""
    n = rows.shape[0]
    first = int(rng.integers(0, n))
    centers = [rows[first]]
    d2 = np.sum((rows - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(0, n))  # all points coincide; any row works
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(rows[idx])
        d2 = np.minimum(d2, np.sum((rows - centers[-1]) ** 2, axis=1))
    return np.stack(centers)


def kmeans_rows(rows: np.ndarray, k: int, seed: int = 42, iters: int = 25,
                reseed_attempts: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-iteration Lloyd k-means with k-means++ seeding.

    An empty cluster is re-seeded at the point farthest from its centroid,
    up to ``reseed_attempts`` times per run; a persistently empty cluster
    raises EmptyCluster.
    """
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"cluster count {k} outside 1..{n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_seeds(rows, k, rng)
    reseeds_left = reseed_attempts
    assignments = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        d2 = ((rows[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assignments = np.argmin(d2, axis=1)
        for c in range(k):
            members = assignments == c
            if members.any():
                centroids[c] = rows[members].mean(axis=0)
            else:
                if reseeds_left == 0:
                    raise EmptyCluster(
                        f"cluster {c} stayed empty after {reseed_attempts} re-seeds"
                    )
                reseeds_left -= 1
                far = int(np.argmax(d2.min(axis=1)))
                centroids[c] = rows[far]
                assignments[far] = c
    return assignments, centroids


def decompose(e: np.ndarray, n_clusters: int, rank: int,
              residual_budget: int = 0, seed: int = 42) -> ClusteredLowRank:
    """Cluster rows, factor each cluster around its mean at the given rank,
    then patch the ``residual_budget`` largest reconstruction errors."""
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 2:
        raise ShapeMismatch("expected a V x d matrix")
    v_rows, d = e.shape
    if not 1 <= n_clusters <= v_rows:
        raise ValueError(f"cluster count {n_clusters} outside 1..{v_rows}")
    if rank < 0 or rank > d:
        raise ValueError(f"rank {rank} outside 0..{d}")
    if residual_budget < 0 or residual_budget > v_rows * d:
        raise ValueError("residual budget outside 0..V*d")

    assignments, centroids = kmeans_rows(e, n_clusters, seed=seed)
    factors_u, factors_vt = [], []
    recon = np.empty_like(e)
    for c in range(n_clusters):
        members = np.flatnonzero(assignments == c)
        centered = e[members] - centroids[c]
        r_c = min(rank, members.size, d)
        if r_c == 0:
            u_c = np.zeros((members.size, 0))
            vt_c = np.zeros((0, d))
        else:
            u, s, vt = np.linalg.svd(centered, full_matrices=False)
            u_c = u[:, :r_c] * s[:r_c]
            vt_c = vt[:r_c]
        factors_u.append(u_c)
        factors_vt.append(vt_c)
        recon[members] = centroids[c] + u_c @ vt_c

    err = e - recon
    if residual_budget > 0:
        flat = np.abs(err).ravel()
        top = np.argsort(-flat, kind="stable")[:residual_budget]
        top = np.sort(top)
        res_idx = top.astype(np.int64)
        res_val = err.ravel()[top].copy()
    else:
        res_idx = np.zeros(0, dtype=np.int64)
        res_val = np.zeros(0)
    return ClusteredLowRank(
        shape=(v_rows, d),
        assignments=assignments.astype(np.int64),
        centroids=centroids,
        factors_u=tuple(factors_u),
        factors_vt=tuple(factors_vt),
        residual_indices=res_idx,
        residual_values=res_val,
        rank=rank,
    )


def reconstruct(clr: ClusteredLowRank) -> np.ndarray:
    v_rows, d = clr.shape
    out = np.empty((v_rows, d))
    for c in range(clr.n_clusters):
        members = np.flatnonzero(clr.assignments == c)
        out[members] = clr.centroids[c] + clr.factors_u[c] @ clr.factors_vt[c]
    if clr.n_residual:
        out.ravel()[clr.residual_indices] += clr.residual_values
    return out


def stored_value_count(clr: ClusteredLowRank) -> int:
    """Numeric values kept: centroids, both factors, residual values."""
    v_count = clr.centroids.size
    for u, vt in zip(clr.factors_u, clr.factors_vt):
        v_count += u.size + vt.size
    return int(v_count + clr.n_residual)


def stored_bytes(clr: ClusteredLowRank, value_bytes: int = 4,
                 index_bytes: int = 4) -> int:
    """Byte accounting: values at ``value_bytes`` each, plus the per-row
    cluster map and one flat index per residual entry at ``index_bytes``."""
    return (value_bytes * stored_value_count(clr)
            + index_bytes * clr.shape[0]
            + index_bytes * clr.n_residual)


def compression_ratio(clr: ClusteredLowRank, unit: str = "values",
                      value_bytes: int = 4, index_bytes: int = 4) -> float:
    """Original size over stored size; < 1 honestly reports expansion."""
    v_rows, d = clr.shape
    if unit == "values":
        return (v_rows * d) / stored_value_count(clr)
    if unit == "bytes":
        return (value_bytes * v_rows * d) / stored_bytes(clr, value_bytes, index_bytes)
    raise ValueError(f"unknown unit {unit!r}")


def reconstruction_error(e: np.ndarray, clr: ClusteredLowRank) -> float:
    """Frobenius norm of the reconstruction error."""
    return float(np.linalg.norm(np.asarray(e, dtype=np.float64) - reconstruct(clr)))


# -- TVC1 container ----------------------------------------------------------

def pack_clr(clr: ClusteredLowRank) -> bytes:
    """Serialize factors to TVC1 bytes (f32 values, u32 indices, CRC32)."""
    v_rows, d = clr.shape
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<HIIHHI", _VERSION, v_rows, d, clr.n_clusters,
                       clr.rank, clr.n_residual)
    out += clr.assignments.astype("<u4").tobytes()
    out += clr.centroids.astype("<f4").tobytes()
    for u, vt in zip(clr.factors_u, clr.factors_vt):
        out += struct.pack("<IH", u.shape[0], u.shape[1])
        out += u.astype("<f4").tobytes()
        out += vt.astype("<f4").tobytes()
    out += clr.residual_indices.astype("<u4").tobytes()
    out += clr.residual_values.astype("<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def unpack_clr(blob: bytes) -> ClusteredLowRank:
    if len(blob) < 4 or blob[:4] != _MAGIC:
        raise BadMagic("not a TVC1 factor container")
    if len(blob) < 4 + 18 + 4:
        raise TruncatedFile("TVC1 header truncated")
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise ChecksumMismatch("TVC1 checksum mismatch")
    version, v_rows, d, n_clusters, rank, n_residual = struct.unpack_from(
        "<HIIHHI", blob, 4)
    if version != _VERSION:
        raise UnsupportedVersion(f"TVC1 version {version} not supported")
    off = 4 + struct.calcsize("<HIIHHI")

    def grab(count, dtype, itemsize):
        nonlocal off
        nbytes = count * itemsize
        if off + nbytes > len(blob) - 4:
            raise TruncatedFile("TVC1 payload truncated")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
        off += nbytes
        return arr

    assignments = grab(v_rows, "<u4", 4).astype(np.int64)
    centroids = grab(n_clusters * d, "<f4", 4).astype(np.float64).reshape(n_clusters, d)
    factors_u, factors_vt = [], []
    for _ in range(n_clusters):
        if off + 6 > len(blob) - 4:
            raise TruncatedFile("TVC1 factor header truncated")
        n_c, r_c = struct.unpack_from("<IH", blob, off)
        off += 6
        factors_u.append(grab(n_c * r_c, "<f4", 4).astype(np.float64).reshape(n_c, r_c))
        factors_vt.append(grab(r_c * d, "<f4", 4).astype(np.float64).reshape(r_c, d))
    residual_indices = grab(n_residual, "<u4", 4).astype(np.int64)
    residual_values = grab(n_residual, "<f4", 4).astype(np.float64)
    if off != len(blob) - 4:
        raise TruncatedFile("trailing bytes inside TVC1 container")
    counts = np.bincount(assignments, minlength=n_clusters)
    for c in range(n_clusters):
        if factors_u[c].shape[0] != counts[c]:
            raise TruncatedFile(f"cluster {c} factor rows disagree with assignments")
    return ClusteredLowRank(
        shape=(v_rows, d),
        assignments=assignments,
        centroids=centroids,
        factors_u=tuple(factors_u),
        factors_vt=tuple(factors_vt),
        residual_indices=residual_indices,
        residual_values=residual_values,
        rank=rank,
    )


def save_clr(clr: ClusteredLowRank, path) -> None:
    with open(path, "wb") as fh:
        fh.write(pack_clr(clr))


def load_clr(path) -> ClusteredLowRank:
    with open(path, "rb") as fh:
        return unpack_clr(fh.read())
