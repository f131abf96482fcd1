"""Embedding vectors, geometry kernels, and the content-addressed store.

Vectors are stored and compared at float32; all accumulations (means, dot
products, norms) run in float64. Zero-norm or non-finite vectors are
rejected at ingestion, so the distance kernels can assume valid input.
Every tie (medoid, selection) breaks toward the lowest index so results are
reproducible.
"""

from __future__ import annotations

import hashlib
import json
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Protocol

import numpy as np

from ._kernels import cosine_distances_to

EMBED_MAGIC = b"EMB1"
_RECORD_HEADER = struct.Struct("<4sH64sI")  # magic, version, image digest hex, dimension


class EmbeddingError(ValueError):
    """Raised for invalid vectors, store corruption, or provider failures."""


class MissingEmbeddingError(EmbeddingError):
    """Raised when a lookup has no stored vector for the requested key(s)."""

    def __init__(self, missing: list[str]):
        self.missing = list(missing)
        preview = ", ".join(self.missing[:5])
        more = "" if len(self.missing) <= 5 else f" (+{len(self.missing) - 5} more)"
        super().__init__(f"no stored embedding for: {preview}{more}")


class ProviderContractError(EmbeddingError):
    """Provider returned something inconsistent with its declared contract."""


def _validate_vector(vector: np.ndarray, dimension: int | None = None) -> np.ndarray:
    vector = np.asarray(vector, dtype=np.float32).reshape(-1)
    if vector.size == 0:
        raise EmbeddingError("empty embedding vector")
    if dimension is not None and vector.size != dimension:
        raise ProviderContractError(
            f"embedding dimension {vector.size} != declared {dimension}")
    if not np.all(np.isfinite(vector)):
        raise EmbeddingError("embedding vector contains NaN or Inf")
    if not np.any(vector):
        raise EmbeddingError("embedding vector is all-zero")
    return vector


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray  # (D,) float32
    provider_id: str
    model_id: str
    source_digest: str  # sha256 of the embedded PNG bytes

    def __post_init__(self):
        object.__setattr__(self, "vector", _validate_vector(self.vector))

    @property
    def dimension(self) -> int:
        return int(self.vector.size)


@dataclass(frozen=True)
class Centroid:
    """Arithmetic mean of a set of embeddings (float32, like any vector)."""

    vector: np.ndarray
    member_count: int

    def __post_init__(self):
        if self.member_count < 1:
            raise EmbeddingError("centroid needs at least one member")
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=np.float32))


# ---------------------------------------------------------------------------
# geometry kernels
# ---------------------------------------------------------------------------


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - cos(u, v); in [0, 2] for nonzero vectors of equal dimension."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.size != v.size:
        raise EmbeddingError(f"dimension mismatch: {u.size} vs {v.size}")
    nu = np.sqrt(u @ u)
    nv = np.sqrt(v @ v)
    if nu == 0.0 or nv == 0.0:
        raise EmbeddingError("cosine distance undefined for zero-norm vector")
    return float(1.0 - (u @ v) / (nu * nv))


def centroid(vectors: np.ndarray | list[np.ndarray]) -> Centroid:
    """Componentwise arithmetic mean (float64 accumulation, float32 result)."""
    mat = np.asarray(vectors, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] == 0:
        raise EmbeddingError("centroid requires a non-empty set of equal-dimension vectors")
    return Centroid(vector=mat.mean(axis=0).astype(np.float32), member_count=mat.shape[0])


def representativeness(vector: np.ndarray, ref: Centroid) -> float:
    """Distance of a member to its class centroid."""
    return cosine_distance(vector, ref.vector)


def medoid(vectors: np.ndarray | list[np.ndarray]) -> int:
    """Index of the member closest (cosine) to the set's arithmetic mean.

    Ties break toward the lowest index. Unlike the centroid, the medoid is
    always an actual member of the set.
    """
    mat = np.asarray(vectors, dtype=np.float32)
    if mat.ndim != 2 or mat.shape[0] == 0:
        raise EmbeddingError("medoid requires a non-empty set")
    center = centroid(mat)
    distances = cosine_distances_to(mat, center.vector)
    return int(np.argmin(distances))


# ---------------------------------------------------------------------------
# content-addressed store
# ---------------------------------------------------------------------------


class EmbeddingStore:
    """On-disk store: one binary record per image digest plus a JSONL index
    mapping (subject, trial_index, config_digest) to the image digest.

    Reads are lock-free once a record exists (records are immutable);
    writes are serialized and atomic, so readers never observe a partial
    vector.
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        (self.root / "vectors").mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._index: dict[tuple[str, int, str], str] = {}
        self._meta: dict | None = None
        self._load()

    @property
    def index_path(self) -> Path:
        return self.root / "index.jsonl"

    @property
    def meta_path(self) -> Path:
        return self.root / "meta.json"

    def _load(self) -> None:
        if self.meta_path.exists():
            self._meta = json.loads(self.meta_path.read_text(encoding="utf-8"))
        if self.index_path.exists():
            for line in self.index_path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                row = json.loads(line)
                key = (row["subject_id"], int(row["trial_index"]), row["config_digest"])
                self._index[key] = row["image_digest"]

    @property
    def meta(self) -> dict | None:
        return self._meta

    def set_meta(self, provider_id: str, model_id: str, dimension: int) -> None:
        """Record vector provenance; immutable once set."""
        new = {"provider_id": provider_id, "model_id": model_id, "dimension": dimension}
        with self._lock:
            if self._meta is not None:
                if self._meta != new:
                    raise EmbeddingError(
                        f"store at {self.root} already holds vectors from "
                        f"{self._meta}; refusing to mix with {new}")
                return
            self._meta = new
            self.meta_path.write_text(json.dumps(new, indent=2) + "\n", encoding="utf-8")

    def _vector_path(self, image_digest: str) -> Path:
        return self.root / "vectors" / f"{image_digest}.emb"

    def has(self, image_digest: str) -> bool:
        return self._vector_path(image_digest).exists()

    def get(self, image_digest: str) -> np.ndarray | None:
        path = self._vector_path(image_digest)
        if not path.exists():
            return None
        blob = path.read_bytes()
        magic, version, digest_hex, dim = _RECORD_HEADER.unpack_from(blob)
        if magic != EMBED_MAGIC or version != 1:
            raise EmbeddingError(f"corrupt embedding record: {path}")
        if digest_hex.decode("ascii") != image_digest:
            raise EmbeddingError(f"digest mismatch inside record: {path}")
        vector = np.frombuffer(blob, dtype="<f4", count=dim, offset=_RECORD_HEADER.size)
        return vector.copy()

    def put(self, image_digest: str, vector: np.ndarray) -> None:
        vector = _validate_vector(vector)
        path = self._vector_path(image_digest)
        with self._lock:
            if path.exists():
                existing = self.get(image_digest)
                if not np.array_equal(existing, vector):
                    raise EmbeddingError(
                        f"refusing to overwrite record {image_digest} with different vector")
                return
            header = _RECORD_HEADER.pack(EMBED_MAGIC, 1, image_digest.encode("ascii"),
                                         vector.size)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(header + vector.astype("<f4").tobytes())
            tmp.replace(path)

    def index_put(self, subject_id: str, trial_index: int, config_digest: str,
                  image_digest: str) -> None:
        key = (subject_id, trial_index, config_digest)
        row = json.dumps({
            "subject_id": subject_id,
            "trial_index": trial_index,
            "config_digest": config_digest,
            "image_digest": image_digest,
        }, sort_keys=True)
        with self._lock:
            if self._index.get(key) == image_digest:
                return
            with self.index_path.open("a", encoding="utf-8") as fh:
                fh.write(row + "\n")
            self._index[key] = image_digest

    def index_get(self, subject_id: str, trial_index: int, config_digest: str) -> str | None:
        return self._index.get((subject_id, trial_index, config_digest))

    def iter_index(self) -> Iterator[tuple[str, int, str, str]]:
        for (subject_id, trial_index, config_digest), image_digest in sorted(self._index.items()):
            yield subject_id, trial_index, config_digest, image_digest


# ---------------------------------------------------------------------------
# providers
# ---------------------------------------------------------------------------


class EmbeddingProvider(Protocol):
    provider_id: str
    model_id: str
    dimension: int
    deterministic: bool

    def embed_png(self, png_bytes: bytes) -> np.ndarray: ...


class FileProvider:
    """Serves vectors precomputed into an :class:`EmbeddingStore`; lookups
    that miss raise with the full list of missing digests."""

    provider_id = "file"

    def __init__(self, store: EmbeddingStore):
        self.store = store
        meta = store.meta
        if meta is None:
            raise EmbeddingError(f"store at {store.root} has no metadata; nothing precomputed")
        self.model_id = meta["model_id"]
        self.dimension = int(meta["dimension"])
        self.deterministic = True

    def embed_png(self, png_bytes: bytes) -> np.ndarray:
        digest = hashlib.sha256(png_bytes).hexdigest()
        vector = self.store.get(digest)
        if vector is None:
            raise MissingEmbeddingError([digest])
        return vector


class HttpProvider:
    """Remote embedding service speaking the POST /embed + GET /info contract."""

    provider_id = "http"

    def __init__(self, base_url: str, timeout_s: float = 60.0, client=None):
        import httpx

        self.base_url = base_url.rstrip("/")
        self._client = client or httpx.Client(timeout=timeout_s)
        info = self._client.get(f"{self.base_url}/info")
        if info.status_code != 200:
            raise ProviderContractError(
                f"embed service /info returned HTTP {info.status_code}")
        doc = info.json()
        self.model_id = str(doc["model_id"])
        self.dimension = int(doc["dimension"])
        self.deterministic = bool(doc.get("deterministic", False))

    def embed_png(self, png_bytes: bytes) -> np.ndarray:
        resp = self._client.post(
            f"{self.base_url}/embed",
            content=png_bytes,
            headers={"content-type": "image/png"},
        )
        if resp.status_code != 200:
            raise ProviderContractError(
                f"embed service returned HTTP {resp.status_code}: {resp.text[:200]}")
        doc = resp.json()
        vector = np.asarray(doc["vector"], dtype=np.float32)
        if int(doc.get("dimension", vector.size)) != self.dimension or vector.size != self.dimension:
            raise ProviderContractError(
                f"service returned dimension {vector.size}, declared {self.dimension}")
        return _validate_vector(vector, self.dimension)


class PixelStatsProvider:
    """Local deterministic image featurizer (grid of color/gradient stats).

    Not a learned encoder; exists so the full pipeline can run offline
    without the embedding service. Good enough to separate visually distinct
    waveform classes.
    """

    provider_id = "pixelstats"
    model_id = "pixelstats-8x8-v1"
    deterministic = True
    GRID = 8

    def __init__(self):
        self.dimension = self.GRID * self.GRID * 8

    def embed_png(self, png_bytes: bytes) -> np.ndarray:
        from . import pngio

        pixels = pngio.decode_rgb(png_bytes).astype(np.float64) / 255.0
        h, w, _ = pixels.shape
        g = self.GRID
        feats = np.empty((g, g, 8), dtype=np.float64)
        ys = np.linspace(0, h, g + 1).astype(int)
        xs = np.linspace(0, w, g + 1).astype(int)
        dy = np.abs(np.diff(pixels.mean(axis=2), axis=0))
        dx = np.abs(np.diff(pixels.mean(axis=2), axis=1))
        for i in range(g):
            for j in range(g):
                cell = pixels[ys[i]:ys[i + 1], xs[j]:xs[j + 1]]
                feats[i, j, 0:3] = cell.mean(axis=(0, 1))
                feats[i, j, 3:6] = cell.std(axis=(0, 1))
                feats[i, j, 6] = dy[ys[i]:min(ys[i + 1], h - 1), xs[j]:xs[j + 1]].mean()
                feats[i, j, 7] = dx[ys[i]:ys[i + 1], xs[j]:min(xs[j + 1], w - 1)].mean()
        return feats.reshape(-1).astype(np.float32)


def embed_image(png_bytes: bytes, provider: EmbeddingProvider,
                store: EmbeddingStore | None = None,
                trial_ref: tuple[str, int, str] | None = None) -> Embedding:
    """Embed PNG bytes, consulting/populating the store by image digest.

    A cache hit returns the stored vector bitwise; a miss computes, validates
    against the provider's declared dimension, and persists before returning.
    ``trial_ref`` = (subject_id, trial_index, config_digest) also records the
    index entry.
    """
    digest = hashlib.sha256(png_bytes).hexdigest()
    vector = store.get(digest) if store is not None else None
    if vector is None:
        vector = _validate_vector(provider.embed_png(png_bytes), provider.dimension)
        if store is not None:
            store.set_meta(provider.provider_id, provider.model_id, provider.dimension)
            store.put(digest, vector)
    if store is not None and trial_ref is not None:
        store.index_put(trial_ref[0], trial_ref[1], trial_ref[2], digest)
    return Embedding(vector=vector, provider_id=provider.provider_id,
                     model_id=provider.model_id, source_digest=digest)


# ---------------------------------------------------------------------------
# trial-keyed lookup used by support-set selection
# ---------------------------------------------------------------------------


class EmbeddingLookup(Protocol):
    def vector_for(self, subject_id: str, trial_index: int) -> np.ndarray: ...


class StoreLookup:
    """Resolves trial references through a store's index for one render config."""

    def __init__(self, store: EmbeddingStore, config_digest: str):
        self.store = store
        self.config_digest = config_digest

    def vector_for(self, subject_id: str, trial_index: int) -> np.ndarray:
        image_digest = self.store.index_get(subject_id, trial_index, self.config_digest)
        if image_digest is None:
            raise MissingEmbeddingError([f"{subject_id}/{trial_index} (no index entry)"])
        vector = self.store.get(image_digest)
        if vector is None:
            raise MissingEmbeddingError([image_digest])
        return vector


class MappingLookup:
    """In-memory lookup keyed by (subject_id, trial_index); test/bench helper."""

    def __init__(self, table: dict[tuple[str, int], np.ndarray]):
        self.table = {k: _validate_vector(v) for k, v in table.items()}

    def vector_for(self, subject_id: str, trial_index: int) -> np.ndarray:
        try:
            return self.table[(subject_id, trial_index)]
        except KeyError:
            raise MissingEmbeddingError([f"{subject_id}/{trial_index}"]) from None
