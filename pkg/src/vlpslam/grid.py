"""Log-odds occupancy grids and the PGM + YAML map format.

Cell ``(ix, iy)`` covers ``[ix*res, (ix+1)*res) x [iy*res, (iy+1)*res)`` in the
grid frame; ``origin`` is the world pose of that frame. Arrays are indexed
``[iy, ix]``. On disk the image is stored top row first (largest ``y``), the
usual map-server convention, so third-party maps load unchanged.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .geometry import Pose2D

L_MIN = -4.0
L_MAX = 4.0

FREE = 0
OCCUPIED = 1
UNKNOWN = -1

# gray values written to PGM; 127 decodes to p ~= 0.5, between the default thresholds
PGM_OCCUPIED = 0
PGM_FREE = 254
PGM_UNKNOWN = 127

DEFAULT_OCC_THRESHOLD = 0.65
DEFAULT_FREE_THRESHOLD = 0.25


class MapFormatError(ValueError):
    pass


def logistic(l):
    return 1.0 / (1.0 + np.exp(-l))


@dataclass
class OccupancyGrid:
    logodds: np.ndarray
    resolution: float
    origin: Pose2D = field(default_factory=lambda: Pose2D(0.0, 0.0, 0.0))
    l_min: float = L_MIN
    l_max: float = L_MAX

    def __post_init__(self):
        self.logodds = np.asarray(self.logodds, dtype=np.float64)
        if self.logodds.ndim != 2:
            raise ValueError("logodds must be 2-D")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")

    @classmethod
    def empty(cls, width, height, resolution, origin=None):
        return cls(np.zeros((height, width)), resolution, origin or Pose2D(0.0, 0.0, 0.0))

    @classmethod
    def from_occupancy(cls, occ, resolution, origin=None):
        """Binary ground-truth grid: occupied cells at ``l_max``, the rest at ``l_min``."""
        occ = np.asarray(occ, dtype=bool)
        return cls(np.where(occ, L_MAX, L_MIN), resolution, origin or Pose2D(0.0, 0.0, 0.0))

    @property
    def width(self):
        return self.logodds.shape[1]

    @property
    def height(self):
        return self.logodds.shape[0]

    @property
    def shape(self):
        return self.logodds.shape

    def copy(self):
        return OccupancyGrid(self.logodds.copy(), self.resolution, self.origin, self.l_min, self.l_max)

    def with_origin(self, origin: Pose2D):
        """Same cells, re-expressed under a different frame origin."""
        return OccupancyGrid(self.logodds.copy(), self.resolution, origin, self.l_min, self.l_max)

    def probability(self):
        return logistic(self.logodds)

    def occupied_mask(self, threshold=DEFAULT_OCC_THRESHOLD):
        return self.probability() > threshold

    # frame conversions ------------------------------------------------------

    def origin_params(self):
        """(ox, oy, otheta, resolution) tuple consumed by the kernels."""
        return self.origin.x, self.origin.y, self.origin.theta, self.resolution

    def world_to_grid(self, x, y):
        """Continuous grid-frame coordinates in cell units."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        c, s = math.cos(self.origin.theta), math.sin(self.origin.theta)
        dx, dy = x - self.origin.x, y - self.origin.y
        return (c * dx + s * dy) / self.resolution, (-s * dx + c * dy) / self.resolution

    def world_to_cell(self, x, y):
        gx, gy = self.world_to_grid(x, y)
        return np.floor(gx).astype(np.int64), np.floor(gy).astype(np.int64)

    def cell_center(self, ix, iy):
        gx = (np.asarray(ix, dtype=float) + 0.5) * self.resolution
        gy = (np.asarray(iy, dtype=float) + 0.5) * self.resolution
        c, s = math.cos(self.origin.theta), math.sin(self.origin.theta)
        return self.origin.x + c * gx - s * gy, self.origin.y + s * gx + c * gy

    def in_bounds(self, ix, iy):
        ix = np.asarray(ix)
        iy = np.asarray(iy)
        return (ix >= 0) & (ix < self.width) & (iy >= 0) & (iy < self.height)

    def is_occupied_at(self, x, y, threshold=DEFAULT_OCC_THRESHOLD):
        ix, iy = self.world_to_cell(x, y)
        if not self.in_bounds(ix, iy):
            return True
        return bool(logistic(self.logodds[iy, ix]) > threshold)

    def clamp(self):
        np.clip(self.logodds, self.l_min, self.l_max, out=self.logodds)


def binarize(grid: OccupancyGrid, occ_threshold=DEFAULT_OCC_THRESHOLD,
             free_threshold=DEFAULT_FREE_THRESHOLD):
    """Trinary map: ``OCCUPIED``, ``FREE`` or ``UNKNOWN`` per cell (int8)."""
    if not 0.0 < free_threshold < occ_threshold < 1.0:
        raise ValueError("thresholds must satisfy 0 < free < occ < 1")
    p = grid.probability()
    out = np.full(grid.shape, UNKNOWN, dtype=np.int8)
    out[p > occ_threshold] = OCCUPIED
    out[p < free_threshold] = FREE
    return out


# ---------------------------------------------------------------------------
# PGM + metadata I/O

def write_pgm(path, image):
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(image.tobytes())


def write_ppm(path, image):
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(image.tobytes())


def _pgm_tokens(data):
    """Yield header tokens and the offset just past the last one."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    tokens, offset = _pgm_tokens(data)
    if tokens[0] != b"P5":
        raise MapFormatError(f"{path}: only binary PGM (P5) is supported")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise MapFormatError(f"{path}: 16-bit PGM not supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=offset)
    img = pixels.reshape(h, w).astype(np.float64)
    if maxval != 255:
        img = np.round(img * 255.0 / maxval)
    return img.astype(np.uint8)


def trinary_to_pgm(trinary):
    img = np.full(trinary.shape, PGM_UNKNOWN, dtype=np.uint8)
    img[trinary == OCCUPIED] = PGM_OCCUPIED
    img[trinary == FREE] = PGM_FREE
    return img[::-1]


def save_map(grid: OccupancyGrid, yaml_path, occ_threshold=DEFAULT_OCC_THRESHOLD,
             free_threshold=DEFAULT_FREE_THRESHOLD, extra=None):
    """Write ``<name>.pgm`` next to ``yaml_path`` plus the metadata sidecar."""
    yaml_path = os.fspath(yaml_path)
    image_path = os.path.splitext(yaml_path)[0] + ".pgm"
    write_pgm(image_path, trinary_to_pgm(binarize(grid, occ_threshold, free_threshold)))
    meta = {
        "image": os.path.basename(image_path),
        "resolution": float(grid.resolution),
        "origin": [float(grid.origin.x), float(grid.origin.y), float(grid.origin.theta)],
        "negate": 0,
        "occupied_thresh": float(occ_threshold),
        "free_thresh": float(free_threshold),
    }
    if extra:
        meta.update(extra)
    with open(yaml_path, "w") as f:
        yaml.safe_dump(meta, f, sort_keys=True)
    return image_path


def load_map(yaml_path) -> OccupancyGrid:
    yaml_path = os.fspath(yaml_path)
    with open(yaml_path) as f:
        meta = yaml.safe_load(f)
    for key in ("image", "resolution", "origin"):
        if key not in meta:
            raise MapFormatError(f"{yaml_path}: missing '{key}'")
    image_path = meta["image"]
    if not os.path.isabs(image_path):
        image_path = os.path.join(os.path.dirname(yaml_path), image_path)
    img = read_pgm(image_path)[::-1].astype(np.float64)
    if meta.get("negate", 0):
        img = 255.0 - img
    p = (255.0 - img) / 255.0
    occ_t = float(meta.get("occupied_thresh", DEFAULT_OCC_THRESHOLD))
    free_t = float(meta.get("free_thresh", DEFAULT_FREE_THRESHOLD))
    logodds = np.zeros(img.shape)
    logodds[p > occ_t] = L_MAX
    logodds[p < free_t] = L_MIN
    ox, oy, oth = (list(meta["origin"]) + [0.0])[:3]
    return OccupancyGrid(logodds, float(meta["resolution"]), Pose2D(ox, oy, oth))


def load_map_metadata(yaml_path):
    with open(yaml_path) as f:
        return yaml.safe_load(f)
