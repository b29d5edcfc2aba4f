"""Geo-aware semantic IDs by residual k-means.

Each item feature is content ⊕ location context, unit-normalized. Level i
clusters the residuals left by level i-1 and assigns every residual to its
nearest centroid; the T centroid indices form the item's semantic ID.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

GSID_MAGIC = b"GSID"
GSID_VERSION = 1
_HEADER = struct.Struct("<4sIIIIQ")

SemanticId = tuple[int, ...]


class TokenizerError(ValueError):
    pass


class DegenerateClusterError(TokenizerError):
    def __init__(self, level: int, n_distinct: int, n_codes: int):
        super().__init__(
            f"level {level}: {n_distinct} distinct residuals cannot fill {n_codes} clusters")
        self.level = level


def build_feature(content, loc_ctx) -> np.ndarray:
    v = np.concatenate([np.asarray(content, dtype=np.float64), np.asarray(loc_ctx, dtype=np.float64)])
    if not np.all(np.isfinite(v)):
        raise TokenizerError("feature has non-finite entries")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise TokenizerError("cannot normalize a zero feature vector")
    return v / norm


def _sq_dists(x: np.ndarray, c: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = np.empty((len(x), len(c)))
    for s in range(0, len(x), chunk):
        diff = x[s:s + chunk, None, :] - c[None, :, :]
        out[s:s + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def nearest(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid per row; ties go to the smallest index."""
    return np.argmin(_sq_dists(x, c), axis=1)


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = rng.integers(len(x))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, len(x) - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    k = len(centers)
    centers = centers.copy()
    labels = None
    for _ in range(max_iter):
        new = nearest(x, centers)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
        empty = [j for j in range(k) if not (labels == j).any()]
        if empty:
            # reseed each empty cluster with the point farthest from its centroid
            far = np.einsum("nd,nd->n", x - centers[labels], x - centers[labels])
            for j in empty:
                i = int(np.argmax(far))
                centers[j] = x[i]
                far[i] = -1.0
            labels = None
    labels = nearest(x, centers)
    return centers, labels


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, n_init: int = 3,
           max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """k-means++ seeding plus Lloyd iterations; best of ``n_init`` restarts by inertia."""
    best = None
    for _ in range(n_init):
        centers, labels = lloyd(x, kmeans_pp_init(x, k, rng), max_iter)
        diff = x - centers[labels]
        inertia = float(np.einsum("nd,nd->", diff, diff))
        if best is None or inertia < best[0]:
            best = (inertia, centers, labels)
    return best[1], best[2]


@dataclass(frozen=True)
class CodebookStack:
    levels: np.ndarray  # (T, N_c, d_feat)
    seed: int = 0

    @property
    def n_levels(self) -> int:
        return self.levels.shape[0]

    @property
    def n_codes(self) -> int:
        return self.levels.shape[1]

    @property
    def dim(self) -> int:
        return self.levels.shape[2]

    def save(self, path) -> None:
        t, k, d = self.levels.shape
        with open(path, "wb") as f:
            f.write(_HEADER.pack(GSID_MAGIC, GSID_VERSION, t, k, d, self.seed))
            f.write(np.ascontiguousarray(self.levels, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "CodebookStack":
        raw = Path(path).read_bytes()
        magic, version, t, k, d, seed = _HEADER.unpack_from(raw)
        if magic != GSID_MAGIC:
            raise TokenizerError(f"{path}: not a codebook file")
        if version != GSID_VERSION:
            raise TokenizerError(f"{path}: unsupported codebook version {version}")
        body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
        if body.size != t * k * d:
            raise TokenizerError(f"{path}: truncated codebook body")
        return cls(body.reshape(t, k, d).astype(np.float64), seed)

    def to_table(self) -> str:
        lines = [f"# codebook stack T={self.n_levels} N_c={self.n_codes} d={self.dim} seed={self.seed}",
                 "level\tcode\t" + "\t".join(f"x{j}" for j in range(self.dim))]
        for i, level in enumerate(self.levels):
            for k, c in enumerate(level):
                lines.append(f"{i + 1}\t{k}\t" + "\t".join(f"{v:.17g}" for v in c))
        return "\n".join(lines) + "\n"


def train_codebooks(features, n_levels: int, n_codes: int, seed: int,
                    n_init: int = 3, max_iter: int = 100) -> CodebookStack:
    x = np.asarray(features, dtype=np.float64)
    if n_levels < 1:
        raise TokenizerError("need at least one level")
    if x.ndim != 2 or len(x) == 0:
        raise TokenizerError("features must be a non-empty 2-D array")
    rng = np.random.default_rng(seed)
    residual = x.copy()
    levels = []
    for level in range(1, n_levels + 1):
        n_distinct = len(np.unique(residual, axis=0))
        if n_distinct < n_codes:
            raise DegenerateClusterError(level, n_distinct, n_codes)
        centers, labels = kmeans(residual, n_codes, rng, n_init, max_iter)
        levels.append(centers)
        residual = residual - centers[labels]
    return CodebookStack(np.array(levels), seed)


def encode_all(features, stack: CodebookStack) -> tuple[np.ndarray, np.ndarray]:
    """Codes (n, T) and final residuals (n, d) for a batch of features."""
    r = np.array(features, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] != stack.dim:
        raise TokenizerError(f"feature dimension {r.shape[-1]} != codebook dimension {stack.dim}")
    codes = np.empty((len(r), stack.n_levels), dtype=np.int64)
    for i, level in enumerate(stack.levels):
        codes[:, i] = nearest(r, level)
        r = r - level[codes[:, i]]
    return codes, r


def tokenize(feature, stack: CodebookStack) -> SemanticId:
    codes, _ = encode_all(np.asarray(feature)[None], stack)
    return tuple(int(c) for c in codes[0])


def reconstruction_error(stack: CodebookStack, features) -> list[float]:
    """Mean squared residual norm after each level."""
    r = np.array(features, dtype=np.float64)
    if len(r) == 0:
        raise TokenizerError("no features")
    out = []
    for level in stack.levels:
        r = r - level[nearest(r, level)]
        out.append(float(np.einsum("nd,nd->n", r, r).mean()))
    return out


class VideoIndex:
    """Semantic ID → videos, each bucket ordered by popularity then id."""

    def __init__(self, buckets: Mapping[SemanticId, list]):
        self._buckets = {tuple(k): list(v) for k, v in buckets.items()}
        self._sid_of = {vid: sid for sid, vids in self._buckets.items() for vid in vids}

    def lookup(self, sid: Sequence[int]) -> list:
        return list(self._buckets.get(tuple(int(c) for c in sid), ()))

    def sid_of(self, video_id: Hashable) -> SemanticId:
        return self._sid_of[video_id]

    def __contains__(self, sid) -> bool:
        return tuple(sid) in self._buckets

    def __len__(self) -> int:
        return len(self._buckets)

    def items(self):
        return self._buckets.items()

    def collision_rate(self) -> float:
        n_videos = len(self._sid_of)
        return 1.0 - len(self._buckets) / n_videos if n_videos else 0.0


def build_video_index(videos: Iterable[tuple[Hashable, Sequence[int]]],
                      popularity: Mapping[Hashable, float] | None = None) -> VideoIndex:
    popularity = popularity or {}
    buckets: dict[SemanticId, list] = {}
    seen = set()
    for vid, sid in videos:
        if vid in seen:
            raise TokenizerError(f"duplicate video id {vid!r}")
        seen.add(vid)
        buckets.setdefault(tuple(int(c) for c in sid), []).append(vid)
    for vids in buckets.values():
        vids.sort(key=lambda v: (-popularity.get(v, 0.0), v))
    return VideoIndex(buckets)
