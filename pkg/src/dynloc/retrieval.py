"""Global image description and top-k database lookup.

The built-in descriptor concatenates a 4x4-grid color histogram (8 bins per
channel) with a 4x4-grid gradient-orientation histogram (8 bins), then
L2-normalizes. Precomputed descriptors can be ingested from `.gdesc` files
for higher-fidelity retrieval.
"""

from dataclasses import dataclass

import numpy as np

from .features import to_gray

GRID = 4
COLOR_BINS = 8
ORI_BINS = 8


class DimensionMismatch(Exception):
    """Query and index descriptor lengths disagree."""


@dataclass(frozen=True)
class GlobalDescriptor:
    vector: np.ndarray
    source: str = "builtin"  # "builtin" | "ingested"

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float32).ravel().copy()
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)


def describe(image):
    """Builtin grid color + gradient-orientation histogram descriptor."""
    img = np.asarray(image)
    if img.size == 0:
        raise ValueError("empty image")
    gray = to_gray(img)
    h, w = gray.shape
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    obin = np.floor((ang + np.pi) / (2 * np.pi) * ORI_BINS).astype(int) % ORI_BINS

    ys = np.linspace(0, h, GRID + 1).astype(int)
    xs = np.linspace(0, w, GRID + 1).astype(int)
    parts = []
    for i in range(GRID):
        for j in range(GRID):
            sl = (slice(ys[i], ys[i + 1]), slice(xs[j], xs[j + 1]))
            if img.ndim == 3:
                for c in range(3):
                    hist, _ = np.histogram(img[..., c][sl], bins=COLOR_BINS,
                                           range=(0, 256))
                    parts.append(hist.astype(np.float64))
            else:
                hist, _ = np.histogram(img[sl], bins=COLOR_BINS, range=(0, 256))
                parts.append(hist.astype(np.float64))
            ohist = np.bincount(obin[sl].ravel(), weights=mag[sl].ravel(),
                                minlength=ORI_BINS)
            parts.append(ohist)
    vec = np.concatenate(parts)
    n = np.linalg.norm(vec)
    if n > 0:
        vec = vec / n
    return GlobalDescriptor(vector=vec, source="builtin")


def find_closest_images(query, index, k):
    """Ids of the k index entries with the highest dot product against the
    query, descending; ties broken by ascending image id.

    `index` maps image id -> GlobalDescriptor.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not index:
        raise ValueError("empty index")
    ids = sorted(index)
    mat = np.stack([index[i].vector for i in ids])
    if mat.shape[1] != query.vector.shape[0]:
        raise DimensionMismatch(
            "query dim %d vs index dim %d" % (query.vector.shape[0], mat.shape[1])
        )
    sims = mat @ query.vector
    # ids are pre-sorted ascending, so a stable sort on -sims breaks ties
    # by ascending id
    order = np.argsort(-sims, kind="stable")
    return [ids[i] for i in order[: min(k, len(ids))]]


GDESC_MAGIC = b"GDS1"


def save_descriptor(path, desc):
    """`.gdesc` file: magic GDS1, u32 length, little-endian f32 values."""
    v = np.ascontiguousarray(desc.vector, dtype="<f4")
    with open(path, "wb") as f:
        f.write(GDESC_MAGIC)
        f.write(np.array([v.size], dtype="<u4").tobytes())
        f.write(v.tobytes())


def load_descriptor(path):
    with open(path, "rb") as f:
        if f.read(4) != GDESC_MAGIC:
            raise ValueError("bad gdesc magic in %s" % path)
        (n,) = np.frombuffer(f.read(4), dtype="<u4")
        vec = np.frombuffer(f.read(int(n) * 4), dtype="<f4")
    if vec.size != n:
        raise ValueError("truncated gdesc file %s" % path)
    return GlobalDescriptor(vector=vec, source="ingested")
