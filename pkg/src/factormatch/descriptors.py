"""Per-image descriptor matrices: validation, file formats, synthetic corpora.

A descriptor matrix stacks the keypoint descriptors of one image as columns
of a ``T x N`` array (``T`` = descriptor length, e.g. 128 for SIFT; ``N`` =
number of keypoints). Everything downstream consumes this type, so the
invariants are enforced at construction: finite, non-negative entries and no
all-zero column (zero columns would break the unit-norm constraints used by
the factorizations).
"""

from __future__ import annotations

import io
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BINARY_MAGIC = b"DMT1"
_TRAILER_RE = re.compile(rb"\nID:(?P<img>[^;]*);OBJ:(?P<obj>[^;\n]*)\n\Z")


class DescriptorFormatError(ValueError):
    """Raised when a descriptor file does not conform to the on-disk format."""


def _validate_values(values: np.ndarray) -> np.ndarray:
    values = np.array(values, dtype=np.float32)
    if values.ndim != 2:
        raise ValueError(f"descriptor matrix must be 2-D, got shape {values.shape}")
    T, N = values.shape
    if T < 2:
        raise ValueError(f"descriptor length T must be >= 2, got {T}")
    if N < 1:
        raise ValueError(f"descriptor count N must be >= 1, got {N}")
    if not np.isfinite(values).all():
        raise ValueError("descriptor matrix contains non-finite entries")
    if (values < 0).any():
        raise ValueError("descriptor matrix contains negative entries")
    zero_cols = np.where(~values.any(axis=0))[0]
    if zero_cols.size:
        raise ValueError(f"all-zero descriptor column(s) at index {zero_cols[:8].tolist()}")
    return values


@dataclass(frozen=True)
class DescriptorMatrix:
    """Stacked keypoint descriptors of one image (columns = descriptors)."""

    image_id: str
    object_id: str
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _validate_values(self.values))
        self.values.setflags(write=False)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DescriptorMatrix):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.object_id == other.object_id
            and self.values.shape == other.values.shape
            and bool(np.array_equal(self.values, other.values))
        )


def save_descriptors(m: DescriptorMatrix, fmt: str = "binary") -> bytes:
    """Serialize a descriptor matrix to the binary or csv on-disk format.

    Binary layout: magic ``DMT1``, u32 T, u32 N (little-endian), ``T*N``
    float32 values column-major, then an optional UTF-8 trailer
    ``\\nID:<image_id>;OBJ:<object_id>\\n`` (written whenever either id is
    non-empty). CSV: one row per descriptor dimension, comma-separated.
    """
    if fmt == "binary":
        out = io.BytesIO()
        out.write(BINARY_MAGIC)
        out.write(struct.pack("<II", m.T, m.N))
        out.write(np.asfortranarray(m.values).tobytes(order="F"))
        if m.image_id or m.object_id:
            out.write(f"\nID:{m.image_id};OBJ:{m.object_id}\n".encode("utf-8"))
        return out.getvalue()
    if fmt == "csv":
        lines = [",".join(repr(float(x)) if x != int(x) else str(int(x)) for x in row)
                 for row in m.values]
        return ("\n".join(lines) + "\n").encode("utf-8")
    raise ValueError(f"unknown descriptor format {fmt!r}")


def load_descriptors(
    data: bytes,
    fmt: str = "binary",
    image_id: str = "",
    object_id: str = "",
) -> DescriptorMatrix:
    """Parse a descriptor file; exact inverse of :func:`save_descriptors`.

    ``image_id``/``object_id`` are fallbacks for payloads without a trailer
    (e.g. csv files, where ids live in the filename).
    """
    if fmt == "binary":
        return _load_binary(data, image_id, object_id)
    if fmt == "csv":
        return _load_csv(data, image_id, object_id)
    raise ValueError(f"unknown descriptor format {fmt!r}")


def _load_binary(data: bytes, image_id: str, object_id: str) -> DescriptorMatrix:
    if len(data) < 12:
        raise DescriptorFormatError("truncated descriptor file (missing header)")
    if data[:4] != BINARY_MAGIC:
        raise DescriptorFormatError(f"bad magic {data[:4]!r}, expected {BINARY_MAGIC!r}")
    T, N = struct.unpack("<II", data[4:12])
    if T < 2 or N < 1:
        raise DescriptorFormatError(f"invalid dimensions T={T}, N={N}")
    body_end = 12 + 4 * T * N
    if len(data) < body_end:
        raise DescriptorFormatError(
            f"dimension mismatch: header declares {T}x{N} float32 values "
            f"({4 * T * N} bytes) but only {len(data) - 12} payload bytes present"
        )
    trailer = data[body_end:]
    if trailer:
        match = _TRAILER_RE.match(trailer)
        if match is None:
            raise DescriptorFormatError(
                f"dimension mismatch or malformed trailer: {len(trailer)} unexpected "
                "bytes after the declared payload"
            )
        image_id = match.group("img").decode("utf-8")
        object_id = match.group("obj").decode("utf-8")
    values = np.frombuffer(data[12:body_end], dtype="<f4").reshape((T, N), order="F")
    return DescriptorMatrix(image_id=image_id, object_id=object_id, values=values)


def _load_csv(data: bytes, image_id: str, object_id: str) -> DescriptorMatrix:
    text = data.decode("utf-8")
    rows = []
    width = None
    for ln, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = [float(tok) for tok in line.split(",")]
        except ValueError as exc:
            raise DescriptorFormatError(f"csv line {ln}: {exc}") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise DescriptorFormatError(
                f"csv line {ln}: expected {width} values, got {len(row)}"
            )
        rows.append(row)
    if not rows:
        raise DescriptorFormatError("empty csv descriptor file")
    return DescriptorMatrix(image_id=image_id, object_id=object_id,
                            values=np.array(rows, dtype=np.float32))


@dataclass(frozen=True)
class SynthCorpusSpec:
    """Parameters of a deterministic synthetic descriptor corpus.

    Each object gets ``planted_rank`` non-negative unit-norm centroid vectors;
    every view of the object mixes those centroids with per-descriptor convex
    weights, then adds Gaussian noise truncated at zero. Same spec, same
    bytes.

    Two shape knobs imitate real keypoint-descriptor statistics. Centroids
    blend a corpus-wide common direction with the per-object part
    (``common_direction_weight``), the way all descriptor clouds share
    global gradient statistics. Each view re-weights how strongly it
    expresses each centroid (``view_emphasis``), the way a viewpoint change
    shifts which features dominate; emphasis is floored so every centroid
    stays expressed and the planted rank survives in every view.
    """

    num_objects: int
    views_per_object: int
    T: int
    descriptors_per_view: int
    planted_rank: int
    view_noise_sigma: float
    seed: int

    # Dirichlet concentration of the mixing weights; < 1 pushes descriptors
    # toward individual centroids so the planted rank is well expressed.
    mixture_concentration: float = 0.3
    common_direction_weight: float = 0.5
    view_emphasis: float = 0.7

    def __post_init__(self) -> None:
        for name in ("num_objects", "views_per_object", "T",
                     "descriptors_per_view", "planted_rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.view_noise_sigma < 0:
            raise ValueError("view_noise_sigma must be non-negative")
        if self.planted_rank >= min(self.T, self.descriptors_per_view):
            raise ValueError(
                f"planted_rank {self.planted_rank} must be < min(T, N) = "
                f"{min(self.T, self.descriptors_per_view)}"
            )

    @classmethod
    def from_string(cls, text: str) -> "SynthCorpusSpec":
        """Parse ``objects=50,views=5,T=32,N=400,r=4,sigma=0.05,seed=1``."""
        keys = {
            "objects": "num_objects",
            "views": "views_per_object",
            "T": "T",
            "N": "descriptors_per_view",
            "r": "planted_rank",
            "sigma": "view_noise_sigma",
            "seed": "seed",
        }
        kwargs = {}
        for part in text.split(","):
            if not part.strip():
                continue
            try:
                key, value = part.split("=", 1)
            except ValueError:
                raise ValueError(f"bad corpus spec fragment {part!r}") from None
            key = key.strip()
            if key not in keys:
                raise ValueError(f"unknown corpus spec key {key!r}")
            field_name = keys[key]
            kwargs[field_name] = float(value) if field_name == "view_noise_sigma" else int(value)
        missing = set(keys.values()) - set(kwargs)
        if missing:
            raise ValueError(f"corpus spec missing {sorted(missing)}")
        return cls(**kwargs)

    def label(self) -> str:
        return (f"synthetic:objects={self.num_objects},views={self.views_per_object},"
                f"T={self.T},N={self.descriptors_per_view},r={self.planted_rank},"
                f"sigma={self.view_noise_sigma},seed={self.seed}")


def generate_corpus(spec: SynthCorpusSpec) -> list[DescriptorMatrix]:
    """Generate the synthetic corpus described by ``spec``.

    Views of one object share its centroids; different objects draw
    independent centroids. With ``view_noise_sigma == 0`` every view has
    numerical rank exactly ``planted_rank``.
    """
    rng = np.random.default_rng(spec.seed)
    r = spec.planted_rank
    T, N = spec.T, spec.descriptors_per_view
    mu, tau = spec.common_direction_weight, spec.view_emphasis
    common = rng.uniform(size=(T, 1))
    common /= np.linalg.norm(common)
    corpus: list[DescriptorMatrix] = []
    for o in range(spec.num_objects):
        object_id = f"obj{o:04d}"
        centroids = mu * common + (1 - mu) * rng.uniform(size=(T, r))
        centroids /= np.linalg.norm(centroids, axis=0)
        for v in range(1, spec.views_per_object + 1):
            emphasis = (1 - tau) / r + tau * rng.dirichlet(np.ones(r))
            weights = rng.dirichlet(spec.mixture_concentration * r * emphasis, size=N).T
            values = centroids @ weights
            if spec.view_noise_sigma > 0:
                noise = spec.view_noise_sigma * rng.standard_normal((T, N))
                values = np.maximum(values + noise, 0.0)
                # Truncation can only zero a column if the noise swamped it;
                # restore the noiseless column to keep the no-zero-column
                # invariant unconditional.
                dead = ~values.any(axis=0)
                if dead.any():
                    values[:, dead] = (centroids @ weights)[:, dead]
            corpus.append(DescriptorMatrix(
                image_id=f"{object_id}_v{v}",
                object_id=object_id,
                values=values.astype(np.float32),
            ))
    return corpus


def view_index(image_id: str) -> int:
    """1-based view number encoded in a synthetic image id (``..._v<i>``)."""
    _, _, tail = image_id.rpartition("_v")
    try:
        return int(tail)
    except ValueError:
        raise ValueError(f"image id {image_id!r} carries no view suffix") from None


def save_corpus(corpus: list[DescriptorMatrix], directory: str | Path) -> None:
    """Write one ``<image_id>.dmt`` binary descriptor file per image."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for m in corpus:
        (directory / f"{m.image_id}.dmt").write_bytes(save_descriptors(m, "binary"))


def load_corpus(directory: str | Path) -> list[DescriptorMatrix]:
    """Load every ``.dmt``/``.csv`` descriptor file in a directory, sorted by name.

    Ids embedded in binary trailers win; otherwise they derive from the
    filename (``<object>_v<i>.<ext>`` or plain ``<stem>``).
    """
    directory = Path(directory)
    corpus = []
    for path in sorted(directory.iterdir()):
        stem = path.stem
        obj = stem.rsplit("_v", 1)[0] if "_v" in stem else stem
        if path.suffix == ".dmt":
            corpus.append(load_descriptors(path.read_bytes(), "binary",
                                           image_id=stem, object_id=obj))
        elif path.suffix == ".csv":
            corpus.append(load_descriptors(path.read_bytes(), "csv",
                                           image_id=stem, object_id=obj))
    if not corpus:
        raise DescriptorFormatError(f"no descriptor files found in {directory}")
    return corpus
