"""Local features: Harris corners, RootSIFT-style patch descriptors, and
mutual-nearest-neighbor matching with a ratio test.

The built-in detector/descriptor is deliberately classical; precomputed
keypoints and matches can be ingested from text files instead (see
`load_keypoints` / `load_matches`).
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

PATCH = 16          # descriptor patch size (pixels)
CELLS = 4           # spatial cells per axis
ORI_BINS = 8
DESC_DIM = CELLS * CELLS * ORI_BINS  # 128
BORDER = PATCH // 2 + 1
MAX_DESC_DIST = np.sqrt(2.0)  # max L2 distance between unit descriptors


class DimensionMismatch(Exception):
    """Descriptor dimensionalities disagree."""


@dataclass(frozen=True)
class Keypoint:
    position: tuple  # (x, y) pixels, origin top-left
    response: float


@dataclass(frozen=True)
class Match:
    idx_a: int
    idx_b: int
    score: float


@dataclass
class ImageFeatures:
    """Detected keypoints plus their descriptors, array-backed."""

    positions: np.ndarray    # (N, 2) float, x then y
    responses: np.ndarray    # (N,)
    descriptors: np.ndarray  # (N, 128) float32

    def __len__(self):
        return len(self.positions)

    def keypoints(self):
        return [Keypoint(position=(float(x), float(y)), response=float(r))
                for (x, y), r in zip(self.positions, self.responses)]


def to_gray(image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    return img


def _cell_weights():
    # per-cell Gaussian weights, sigma = half the patch
    offs = (np.arange(CELLS) - (CELLS - 1) / 2.0) * (PATCH // CELLS)
    dy, dx = np.meshgrid(offs, offs, indexing="ij")
    return np.exp(-(dx ** 2 + dy ** 2) / (2.0 * (PATCH / 2.0) ** 2))


_CELL_W = _cell_weights()


def harris_response(gray, sigma=1.5, k=0.04):
    dx = ndimage.sobel(gray, axis=1, mode="nearest") / 8.0
    dy = ndimage.sobel(gray, axis=0, mode="nearest") / 8.0
    a = ndimage.gaussian_filter(dx * dx, sigma, mode="nearest")
    b = ndimage.gaussian_filter(dy * dy, sigma, mode="nearest")
    c = ndimage.gaussian_filter(dx * dy, sigma, mode="nearest")
    return (a * b - c * c) - k * (a + b) ** 2, dx, dy


def detect_and_describe(image, exclusion_mask=None, max_keypoints=2048,
                        nms_radius=4):
    """Harris corners with non-maximum suppression + RootSIFT-style
    descriptors (4x4 cells x 8 orientation bins over a 16x16 patch,
    L1-normalize then element-wise square root).

    Keypoints whose pixel is set in `exclusion_mask` are discarded before
    the response ranking; the strongest `max_keypoints` survivors are kept.
    """
    gray = to_gray(image)
    h, w = gray.shape
    resp, dx, dy = harris_response(gray)

    footprint = 2 * nms_radius + 1
    local_max = ndimage.maximum_filter(resp, size=footprint, mode="nearest")
    floor = max(1e-10, 1e-4 * resp.max()) if resp.max() > 0 else np.inf
    peaks = (resp >= local_max) & (resp > floor)
    peaks[:BORDER, :] = False
    peaks[-BORDER:, :] = False
    peaks[:, :BORDER] = False
    peaks[:, -BORDER:] = False
    if exclusion_mask is not None:
        peaks &= ~np.asarray(exclusion_mask, dtype=bool)

    ys, xs = np.nonzero(peaks)
    if len(xs) == 0:
        return ImageFeatures(
            positions=np.zeros((0, 2)),
            responses=np.zeros(0),
            descriptors=np.zeros((0, DESC_DIM), dtype=np.float32),
        )
    scores = resp[ys, xs]
    order = np.argsort(-scores, kind="stable")[:max_keypoints]
    xs, ys, scores = xs[order], ys[order], scores[order]

    desc = _describe_patches(dx, dy, xs, ys)
    positions = np.stack([xs, ys], axis=1).astype(float)
    return ImageFeatures(positions=positions, responses=scores, descriptors=desc)


def _describe_patches(dx, dy, xs, ys):
    """Orientation-binned gradient histograms over 16x16 patches at integer
    centers (xs, ys). Returns (N, 128) float32, each row L2-normalized
    (RootSIFT: L1 norm followed by square root), zero rows for flat patches.
    """
    n = len(xs)
    half = PATCH // 2
    offs = np.arange(-half, half)
    py = ys[:, None, None] + offs[None, :, None]   # (N, 16, 1)
    px = xs[:, None, None] + offs[None, None, :]   # (N, 1, 16)
    gx = dx[py, px]
    gy = dy[py, px]
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)  # [-pi, pi]
    obin = np.floor((ang + np.pi) / (2 * np.pi) * ORI_BINS).astype(np.int64) % ORI_BINS

    cell = PATCH // CELLS
    cy = (np.arange(PATCH) // cell)
    cell_y = np.broadcast_to(cy[None, :, None], mag.shape)
    cell_x = np.broadcast_to(cy[None, None, :], mag.shape)
    w = mag * _CELL_W[cell_y, cell_x]

    hist = np.zeros((n, CELLS, CELLS, ORI_BINS))
    idx = (
        np.broadcast_to(np.arange(n)[:, None, None], mag.shape),
        cell_y,
        cell_x,
        obin,
    )
    np.add.at(hist, idx, w)
    desc = hist.reshape(n, DESC_DIM)
    s = desc.sum(axis=1, keepdims=True)
    nz = s[:, 0] > 0
    desc[nz] = np.sqrt(desc[nz] / s[nz])
    return desc.astype(np.float32)


def match(desc_a, desc_b, ratio=0.85):
    """Mutual-nearest-neighbor matches passing the Lowe ratio test.

    Returns a list of Match with score = 1 - dist / sqrt(2).
    """
    a = np.asarray(desc_a, dtype=np.float32)
    b = np.asarray(desc_b, dtype=np.float32)
    if len(a) == 0 or len(b) == 0:
        return []
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch("descriptor dims %d vs %d" % (a.shape[1], b.shape[1]))

    d2 = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    np.maximum(d2, 0.0, out=d2)

    nn_b = np.argmin(d2, axis=1)                 # best b for each a
    nn_a = np.argmin(d2, axis=0)                 # best a for each b
    best = d2[np.arange(len(a)), nn_b]
    if b.shape[0] >= 2:
        part = np.partition(d2, 1, axis=1)
        second = part[:, 1]
    else:
        second = np.full(len(a), np.inf)

    out = []
    for ia in range(len(a)):
        ib = nn_b[ia]
        if nn_a[ib] != ia:
            continue
        d1 = np.sqrt(best[ia])
        d2nd = np.sqrt(second[ia]) if np.isfinite(second[ia]) else np.inf
        if d2nd > 0 and d1 >= ratio * d2nd:
            continue
        score = float(np.clip(1.0 - d1 / MAX_DESC_DIST, 0.0, 1.0))
        out.append(Match(idx_a=ia, idx_b=int(ib), score=score))
    return out


# ---------------------------------------------------------------------------
# file ingestion / persistence

def save_keypoints(path, feats_or_positions, responses=None):
    """Write `x y response` lines."""
    if isinstance(feats_or_positions, ImageFeatures):
        pos, resp = feats_or_positions.positions, feats_or_positions.responses
    else:
        pos = np.asarray(feats_or_positions, dtype=float)
        resp = np.zeros(len(pos)) if responses is None else np.asarray(responses)
    with open(path, "w") as f:
        for (x, y), r in zip(pos, resp):
            f.write("%.17g %.17g %.17g\n" % (x, y, r))


def load_keypoints(path):
    """Read `x y response` lines; returns (positions (N,2), responses (N,))."""
    pos, resp = [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            x, y, r = (float(v) for v in line.split())
            pos.append((x, y))
            resp.append(r)
    return np.array(pos).reshape(-1, 2), np.array(resp)


def save_matches(path, matches):
    """Write `ia ib score` lines for an image pair."""
    with open(path, "w") as f:
        for m in matches:
            f.write("%d %d %.17g\n" % (m.idx_a, m.idx_b, m.score))


def load_matches(path):
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            ia, ib, s = line.split()
            out.append(Match(idx_a=int(ia), idx_b=int(ib), score=float(s)))
    return out


DESC_MAGIC = b"LDS1"


def save_descriptors(path, descriptors):
    """Binary descriptor block: magic LDS1, u32 count, u32 dim, f32 data."""
    d = np.ascontiguousarray(descriptors, dtype="<f4")
    with open(path, "wb") as f:
        f.write(DESC_MAGIC)
        f.write(np.array([d.shape[0], d.shape[1] if d.ndim == 2 else 0],
                         dtype="<u4").tobytes())
        f.write(d.tobytes())


def load_descriptors(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DESC_MAGIC:
            raise ValueError("bad descriptor file magic in %s" % path)
        count, dim = np.frombuffer(f.read(8), dtype="<u4")
        data = np.frombuffer(f.read(int(count) * int(dim) * 4), dtype="<f4")
    return data.reshape(int(count), int(dim))
