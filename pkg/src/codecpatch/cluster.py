"""Offline clustering and the multi-label discrimination objective.

Centroid banks are fit per modality (object-level for images, motion-level
for videos) with seeded k-means++ plus Lloyd iterations. Each sample takes
its top-L nearest centroids as positive pseudo-labels; the loss contrasts
them against a seeded uniform sample of the remaining centroids of the same
modality, with analytic gradients for both embeddings and centroids.

Embedding/bank files share one layout (little-endian):
    header {magic "OVEM", D u32, N u32, modality u8} + f32 row-major vectors
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputFormatError, InvariantError

MODALITIES = ("obj", "vid")
_MODALITY_CODE = {"obj": 0, "vid": 1}
_MODALITY_NAME = {v: k for k, v in _MODALITY_CODE.items()}

EMB_MAGIC = b"OVEM"
UNIT_NORM_TOL = 1e-6
DEFAULT_TOP_L = 10
DEFAULT_NEG_RATIO = 0.1
DEFAULT_VIDEO_FRAMES = 16


@dataclass(frozen=True)
class Embedding:
    """Unit-norm sample embedding; normalization happens on construction."""

    vector: np.ndarray
    modality: str
    sample_id: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        v = np.asarray(self.vector, dtype=np.float64)
        norm = float(np.linalg.norm(v))
        if norm < UNIT_NORM_TOL:
            raise ConfigError(f"embedding {self.sample_id}: zero-norm vector")
        object.__setattr__(self, "vector", v / norm)
        self.vector.setflags(write=False)


@dataclass(frozen=True)
class CentroidBank:
    """Cluster centers of one modality, or the stacked union of both."""

    centroids: np.ndarray  # (K, D) float64
    modality: str          # "obj" | "vid" | "uni"
    k_obj: int = 0
    k_vid: int = 0

    def __post_init__(self):
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ConfigError("centroid bank must be a nonempty (K, D) matrix")
        if self.modality == "uni" and self.k_obj + self.k_vid != self.k:
            raise InvariantError("union bank segment sizes do not sum to K")
        self.centroids.setflags(write=False)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @classmethod
    def union(cls, obj_bank: "CentroidBank", vid_bank: "CentroidBank"
              ) -> "CentroidBank":
        if (obj_bank.modality, vid_bank.modality) != ("obj", "vid"):
            raise ConfigError("union needs one obj bank and one vid bank")
        return cls(centroids=np.vstack([obj_bank.centroids, vid_bank.centroids]),
                   modality="uni", k_obj=obj_bank.k, k_vid=vid_bank.k)

    def segment(self, modality: str) -> tuple[np.ndarray, int]:
        """(centroids of that modality, row offset into this bank)."""
        if self.modality == modality:
            return self.centroids, 0
        if self.modality == "uni":
            if modality == "obj":
                return self.centroids[: self.k_obj], 0
            if modality == "vid":
                return self.centroids[self.k_obj :], self.k_obj
        raise ConfigError(
            f"bank of modality {self.modality!r} has no {modality!r} centroids")


@dataclass(frozen=True)
class LabelAssignment:
    """Top-L positive centroid indices for one sample (modality-local)."""

    sample_id: str
    modality: str
    positives: tuple

    def __post_init__(self):
        if len(set(self.positives)) != len(self.positives):
            raise InvariantError("duplicate positive indices")


def _as_matrix(embeddings) -> np.ndarray:
    if isinstance(embeddings, np.ndarray):
        return np.asarray(embeddings, dtype=np.float64)
    return np.stack([e.vector for e in embeddings]).astype(np.float64)


def _sq_distances(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d2 = (np.sum(x * x, axis=1)[:, None] - 2.0 * x @ c.T
          + np.sum(c * c, axis=1)[None, :])
    return np.maximum(d2, 0.0)


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[rng.integers(n)]
    closest = _sq_distances(x, centroids[:1]).ravel()
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centroids[i] = x[rng.integers(n)]
        else:
            centroids[i] = x[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, _sq_distances(x, centroids[i : i + 1]).ravel())
    return centroids


def kmeans(embeddings, k: int, iters: int = 50, seed: int = 0,
           return_history: bool = False):
    """Seeded k-means++ plus Lloyd iterations; objective never increases.

    Empty clusters are re-seeded to the point farthest from its assigned
    centroid. Raises if the within-cluster objective ever goes up.
    """
    x = _as_matrix(embeddings)
    n = x.shape[0]
    if n < k:
        raise ConfigError(f"need at least k={k} samples, got {n}")
    rng = np.random.default_rng(seed)
    if isinstance(embeddings, np.ndarray):
        modality = "obj"
    else:
        modalities = {e.modality for e in embeddings}
        if len(modalities) != 1:
            raise ConfigError(f"mixed modalities in one fit: {sorted(modalities)}")
        modality = modalities.pop()
    centroids = _kmeanspp_init(x, k, rng)
    history = []
    for _ in range(max(1, iters)):
        d2 = _sq_distances(x, centroids)
        labels = d2.argmin(axis=1)
        # objective from direct differences: exact zero on exact fits, which
        # the expanded form x^2 - 2xc + c^2 cannot guarantee
        objective = float(np.sum((x - centroids[labels]) ** 2))
        if history and objective > history[-1] + 1e-9:
            raise InvariantError(
                f"k-means objective increased: {history[-1]} -> {objective}")
        history.append(objective)
        new_centroids = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new_centroids[j] = x[members].mean(axis=0)
        empty = [j for j in range(k) if not (labels == j).any()]
        if empty:
            point_d2 = np.sum((x - centroids[labels]) ** 2, axis=1)
            order = np.argsort(-point_d2, kind="stable")
            for j, idx in zip(empty, order):
                new_centroids[j] = x[idx]
        if np.array_equal(new_centroids, centroids):
            break
        centroids = new_centroids
    bank = CentroidBank(centroids=centroids, modality=modality)
    if return_history:
        return bank, history
    return bank


def assign_topL(e: Embedding, bank: CentroidBank, top_l: int = DEFAULT_TOP_L
                ) -> LabelAssignment:
    """Indices of the top-L centroids by inner product, ties by smallest index."""
    centroids, _ = bank.segment(e.modality)
    sims = centroids @ e.vector
    k = centroids.shape[0]
    order = np.lexsort((np.arange(k), -sims))[: min(top_l, k)]
    return LabelAssignment(sample_id=e.sample_id, modality=e.modality,
                           positives=tuple(int(i) for i in order))


def video_embed(frame_embeddings, sample_id: str = "",
                expected_frames: int = DEFAULT_VIDEO_FRAMES) -> Embedding:
    """Normalize each frame vector, concatenate, normalize again."""
    if len(frame_embeddings) != expected_frames:
        raise ConfigError(
            f"expected {expected_frames} frame embeddings, got "
            f"{len(frame_embeddings)}")
    parts = []
    for i, f in enumerate(frame_embeddings):
        v = np.asarray(f, dtype=np.float64)
        norm = float(np.linalg.norm(v))
        if norm < UNIT_NORM_TOL:
            raise ConfigError(f"frame embedding {i} has zero norm")
        parts.append(v / norm)
    return Embedding(vector=np.concatenate(parts), modality="vid",
                     sample_id=sample_id)


def sample_pairs(batch: list[Embedding], bank: CentroidBank,
                 assignments: list[LabelAssignment],
                 neg_ratio: float = DEFAULT_NEG_RATIO, seed: int = 0
                 ) -> list[tuple[int, str, int, int]]:
    """Sampled (sample_index, modality, centroid_index, label) pairs.

    Positives are always included; floor(neg_ratio * (K - L)) negatives per
    sample (at least 1 when any non-positive centroid exists) are drawn
    uniformly without replacement from the same modality.
    """
    if not batch:
        raise ConfigError("empty batch")
    if not 0.0 < neg_ratio <= 1.0:
        raise ConfigError(f"negative ratio {neg_ratio} outside (0, 1]")
    if len(batch) != len(assignments):
        raise ConfigError("batch and assignments differ in length")
    rng = np.random.default_rng(seed)
    pairs = []
    for u, (e, a) in enumerate(zip(batch, assignments)):
        if a.modality != e.modality:
            raise ConfigError(
                f"sample {e.sample_id}: assignment modality mismatch")
        centroids, _ = bank.segment(e.modality)
        k = centroids.shape[0]
        if any(i >= k for i in a.positives):
            raise InvariantError("assignment references centroid outside bank")
        pos = set(a.positives)
        for i in a.positives:
            pairs.append((u, e.modality, int(i), +1))
        nonpos = np.array([i for i in range(k) if i not in pos], dtype=np.intp)
        if len(nonpos):
            n_neg = max(1, int(neg_ratio * len(nonpos)))
            chosen = rng.choice(nonpos, size=min(n_neg, len(nonpos)),
                                replace=False)
            for i in np.sort(chosen):
                pairs.append((u, e.modality, int(i), -1))
    return pairs


def pair_loss_and_grad(batch: list[Embedding], bank: CentroidBank,
                       pairs: list[tuple[int, str, int, int]]) -> dict:
    """Loss and analytic gradients on a fixed sampled pair set.

    Loss is the sum over modalities of the mean softplus(-y * e.c) over that
    modality's pairs. Gradients are dense arrays aligned with the batch and
    the bank's own row indexing.
    """
    x = _as_matrix(batch)
    grad_e = np.zeros_like(x)
    grad_c = np.zeros_like(bank.centroids)
    loss = 0.0
    by_modality: dict[str, list] = {}
    for pair in pairs:
        by_modality.setdefault(pair[1], []).append(pair)
    for modality, mpairs in by_modality.items():
        centroids, offset = bank.segment(modality)
        count = len(mpairs)
        for u, _, ki, y in mpairs:
            c = centroids[ki]
            sigma = float(x[u] @ c)
            loss += float(np.logaddexp(0.0, -y * sigma)) / count
            # d softplus(-y s)/d s = -y * sigmoid(-y s)
            coeff = -y * 0.5 * (1.0 + np.tanh(-0.5 * y * sigma)) / count
            grad_e[u] += coeff * c
            grad_c[offset + ki] += coeff * x[u]
    return {"loss": loss, "grad_e": grad_e, "grad_c": grad_c}


def discrimination_loss(batch: list[Embedding], bank: CentroidBank,
                        assignments: list[LabelAssignment],
                        neg_ratio: float = DEFAULT_NEG_RATIO,
                        seed: int = 0) -> dict:
    """Sample pairs and evaluate the multi-label discrimination objective."""
    pairs = sample_pairs(batch, bank, assignments, neg_ratio, seed)
    out = pair_loss_and_grad(batch, bank, pairs)
    out["pairs"] = pairs
    return out


def write_vectors(path, vectors: np.ndarray, modality: str) -> None:
    """Write an embedding or bank file (f32 rows)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    n, d = vectors.shape
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<IIB", d, n, _MODALITY_CODE[modality]))
        f.write(vectors.astype("<f4").tobytes())


def read_vectors(path) -> tuple[np.ndarray, str]:
    """Read an embedding or bank file; returns (float64 rows, modality)."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise InputFormatError(f"cannot read {path}: {exc}") from exc
    if len(data) < 13 or data[:4] != EMB_MAGIC:
        raise InputFormatError(f"{path}: not an embedding file (bad magic)")
    d, n, code = struct.unpack_from("<IIB", data, 4)
    if code not in _MODALITY_NAME:
        raise InputFormatError(f"{path}: unknown modality code {code}")
    expected = 13 + 4 * n * d
    if len(data) != expected:
        raise InputFormatError(f"{path}: size {len(data)} != expected {expected}")
    vectors = np.frombuffer(data, dtype="<f4", count=n * d, offset=13)
    return vectors.reshape(n, d).astype(np.float64), _MODALITY_NAME[code]


def load_embeddings(path) -> list[Embedding]:
    vectors, modality = read_vectors(path)
    return [Embedding(vector=v, modality=modality, sample_id=str(i))
            for i, v in enumerate(vectors)]
