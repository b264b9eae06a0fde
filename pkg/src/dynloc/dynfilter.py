"""Movable-object filtering: the segmentation-mask taxonomy
(static / dynamic / unknown), small-mask reassignment, the moving-object
criterion used to decide whether an unknown mask is backed by map geometry,
and the resulting match filter.

An unknown mask is kept (reassigned static) when enough keypoint
observations with long tracks and a correspondence to the current query lie
inside it; otherwise it is treated as moving and its matches are dropped.
"""

import json
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

STATIC = "static"
DYNAMIC = "dynamic"
UNKNOWN = "unknown"
LAYERS = (STATIC, DYNAMIC, UNKNOWN)


class DimensionMismatch(Exception):
    """Mask rasters have different shapes."""


@dataclass(frozen=True)
class MaskInstance:
    instance_id: int
    class_name: str
    layer: str
    pixel_count: int


@dataclass(frozen=True)
class MaskSet:
    """Instance-segmentation partition of one image.

    `labels` holds one instance id per pixel (0 = unsegmented background,
    which counts as static). Each instance is assigned to exactly one layer,
    so the three layers are disjoint and exhaustive by construction.
    """

    labels: np.ndarray
    instances: tuple

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError("labels raster must be 2-D")
        labels = labels.copy()
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "instances", tuple(self.instances))
        ids = [inst.instance_id for inst in self.instances]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate instance ids")
        if any(i <= 0 for i in ids):
            raise ValueError("instance ids must be positive (0 is background)")
        counts = np.bincount(labels.ravel())
        for inst in self.instances:
            if inst.layer not in LAYERS:
                raise ValueError("bad layer %r" % inst.layer)
            actual = int(counts[inst.instance_id]) if inst.instance_id < len(counts) else 0
            if actual != inst.pixel_count:
                raise ValueError(
                    "instance %d pixel_count %d != rasterized %d"
                    % (inst.instance_id, inst.pixel_count, actual)
                )

    @property
    def shape(self):
        return self.labels.shape

    def instance(self, instance_id):
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        raise KeyError(instance_id)

    def in_layer(self, layer):
        return tuple(i for i in self.instances if i.layer == layer)

    def _layer_raster(self, layer):
        lut = np.zeros(
            max((i.instance_id for i in self.instances), default=0) + 1, dtype=bool
        )
        for inst in self.instances:
            if inst.layer == layer:
                lut[inst.instance_id] = True
        out = np.where(lut[self.labels], self.labels, 0)
        return out

    @property
    def static_layer(self):
        return self._layer_raster(STATIC)

    @property
    def dynamic_layer(self):
        return self._layer_raster(DYNAMIC)

    @property
    def unknown_layer(self):
        return self._layer_raster(UNKNOWN)

    def footprint(self, layer):
        """Boolean raster of pixels belonging to instances of `layer`.
        Background pixels are not part of any instance footprint."""
        return self._layer_raster(layer) > 0

    def layer_at(self, xy):
        """Layer of each (x, y) pixel position; background resolves to static."""
        pts = np.atleast_2d(np.asarray(xy))
        xs = np.clip(np.round(pts[:, 0]).astype(int), 0, self.shape[1] - 1)
        ys = np.clip(np.round(pts[:, 1]).astype(int), 0, self.shape[0] - 1)
        ids = self.labels[ys, xs]
        lut = {inst.instance_id: inst.layer for inst in self.instances}
        return np.array([lut.get(int(i), STATIC) for i in ids])

    def with_layers(self, new_layers):
        """Copy with some instances moved to new layers ({id: layer})."""
        insts = tuple(
            replace(inst, layer=new_layers.get(inst.instance_id, inst.layer))
            for inst in self.instances
        )
        return MaskSet(labels=self.labels, instances=insts)


def empty_mask_set(height, width):
    return MaskSet(labels=np.zeros((height, width), dtype=np.uint16), instances=())


@dataclass(frozen=True)
class ClassTaxonomy:
    """class_name -> layer mapping; unmapped classes default to unknown."""

    mapping: dict

    def __post_init__(self):
        for cls, layer in self.mapping.items():
            if layer not in LAYERS:
                raise ValueError("bad layer %r for class %r" % (layer, cls))

    def layer_for(self, class_name):
        return self.mapping.get(class_name, UNKNOWN)


DEFAULT_TAXONOMY = ClassTaxonomy(
    mapping={"background": STATIC, "tv": STATIC, "refrigerator": STATIC,
             "person": DYNAMIC}
)


@dataclass(frozen=True)
class MovingObjectCriterion:
    combiner: str = "density_ratio"  # "density_ratio" | "paper_difference"
    delta: float = 1e-9
    min_track_length: int = 3

    def __post_init__(self):
        if self.combiner not in ("density_ratio", "paper_difference"):
            raise ValueError("bad combiner %r" % self.combiner)
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.min_track_length < 2:
            raise ValueError("min_track_length must be >= 2")


def reassign_small_masks(masks, gamma):
    """Unknown instances smaller than gamma * (W*H) pixels become static."""
    h, w = masks.shape
    limit = gamma * w * h
    moves = {
        inst.instance_id: STATIC
        for inst in masks.in_layer(UNKNOWN)
        if inst.pixel_count < limit
    }
    return masks.with_layers(moves) if moves else masks


def moving_object_score(masks, instance_id, observations_xy, track_lengths, crit):
    """Moving-object criterion beta for one unknown instance.

    `observations_xy` are keypoint positions (in this image) that participate
    in a 2D-2D correspondence with the current query; `track_lengths` gives
    the length of the 3D track behind each one. g counts the observations
    inside the instance footprint whose track is long enough.
    """
    inst = masks.instance(instance_id)
    if inst.layer != UNKNOWN:
        raise ValueError("instance %d is not in the unknown layer" % instance_id)
    g = 0
    obs = np.atleast_2d(np.asarray(observations_xy, dtype=float))
    if obs.size:
        tl = np.asarray(track_lengths)
        xs = np.clip(np.round(obs[:, 0]).astype(int), 0, masks.shape[1] - 1)
        ys = np.clip(np.round(obs[:, 1]).astype(int), 0, masks.shape[0] - 1)
        inside = masks.labels[ys, xs] == instance_id
        g = int(np.sum(inside & (tl >= crit.min_track_length)))
    num_px = inst.pixel_count
    if crit.combiner == "paper_difference":
        return float(g - num_px)
    return g / num_px if num_px > 0 else 0.0


def reassign_unknown_masks(masks, betas, delta):
    """Resolve every unknown instance: beta > delta -> static, else dynamic.
    The unknown layer is empty afterwards."""
    moves = {}
    for inst in masks.in_layer(UNKNOWN):
        if inst.instance_id not in betas:
            raise ValueError("missing beta for unknown instance %d" % inst.instance_id)
        moves[inst.instance_id] = STATIC if betas[inst.instance_id] > delta else DYNAMIC
    return masks.with_layers(moves) if moves else masks


def filter_matches(matches, masks_a, masks_b, keypoints_a, keypoints_b):
    """Keep only matches whose keypoints lie in the static layer of both
    images. Requires unknown layers to have been resolved already."""
    if masks_a.in_layer(UNKNOWN) or masks_b.in_layer(UNKNOWN):
        raise ValueError("unknown layer must be empty; run reassign_unknown_masks")
    if not matches:
        return list(matches)
    ka = np.asarray(keypoints_a, dtype=float)
    kb = np.asarray(keypoints_b, dtype=float)
    ia = np.array([m.idx_a for m in matches])
    ib = np.array([m.idx_b for m in matches])
    la = masks_a.layer_at(ka[ia])
    lb = masks_b.layer_at(kb[ib])
    keep = (la == STATIC) & (lb == STATIC)
    return [m for m, k in zip(matches, keep) if k]


def mask_accuracy(predicted, ground_truth):
    """Pixel-wise agreement of the dynamic-vs-nondynamic binarization."""
    if predicted.shape != ground_truth.shape:
        raise DimensionMismatch(
            "mask shapes %r vs %r" % (predicted.shape, ground_truth.shape)
        )
    p = predicted.footprint(DYNAMIC)
    g = ground_truth.footprint(DYNAMIC)
    return float(np.mean(p == g))


# ---------------------------------------------------------------------------
# mask files: `<id>.mask.png` (16-bit instance labels) + `<id>.mask.json`
# (instance_id -> class_name); layers come from the taxonomy at load time

def save_mask_set(png_path, masks):
    labels = masks.labels.astype(np.uint16)
    Image.fromarray(labels).save(png_path)
    table = {str(inst.instance_id): inst.class_name for inst in masks.instances}
    with open(str(png_path).replace(".png", ".json"), "w") as f:
        json.dump(table, f, indent=0, sort_keys=True)


def load_mask_set(png_path, taxonomy=DEFAULT_TAXONOMY):
    labels = np.asarray(Image.open(png_path)).astype(np.uint16)
    json_path = str(png_path).replace(".png", ".json")
    try:
        with open(json_path) as f:
            table = json.load(f)
    except FileNotFoundError:
        table = {}
    counts = np.bincount(labels.ravel())
    instances = []
    for instance_id in sorted(int(i) for i in table):
        n = int(counts[instance_id]) if instance_id < len(counts) else 0
        if n == 0:
            continue  # listed but absent from the raster
        cls = table[str(instance_id)]
        instances.append(
            MaskInstance(
                instance_id=instance_id,
                class_name=cls,
                layer=taxonomy.layer_for(cls),
                pixel_count=n,
            )
        )
    listed = {int(i) for i in table}
    for instance_id in np.nonzero(counts)[0]:
        if instance_id != 0 and int(instance_id) not in listed:
            instances.append(
                MaskInstance(
                    instance_id=int(instance_id),
                    class_name="unlabeled",
                    layer=taxonomy.layer_for("unlabeled"),
                    pixel_count=int(counts[instance_id]),
                )
            )
    instances.sort(key=lambda i: i.instance_id)
    return MaskSet(labels=labels, instances=tuple(instances))


def load_taxonomy(path):
    """Taxonomy config: one `class_name static|dynamic|unknown` per line."""
    mapping = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cls, layer = line.split()
            mapping[cls] = layer
    return ClassTaxonomy(mapping=mapping)


def save_taxonomy(path, taxonomy):
    with open(path, "w") as f:
        for cls in sorted(taxonomy.mapping):
            f.write("%s %s\n" % (cls, taxonomy.mapping[cls]))
