"""Deterministic synthetic person renderer with exact parsing ground truth.

Replaces real ReID datasets and external human-parsing models: every pixel's
part id is known by construction, identities are separable from per-part
colors, and cameras differ by background palette and a mild gain so that
cross-camera retrieval is non-trivial.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .config import DataConfig

# Reserved parsing id for cells/pixels removed by erasing augmentation.
IGNORE_ID = 255

# Part vocabulary; index 0 is always background. Truncated to num_parts.
PART_NAMES = (
    "background", "head", "torso", "legs", "shoes",
    "hat", "hair", "face", "arms", "hands",
    "coat", "dress", "pants", "skirt", "socks",
    "scarf", "gloves", "belt", "bag", "sunglasses",
)

# Background base colors per camera (cycled when cameras > len).
_CAMERA_BACKGROUNDS = np.array(
    [
        [0.20, 0.28, 0.22],
        [0.30, 0.22, 0.18],
        [0.16, 0.20, 0.32],
        [0.28, 0.28, 0.28],
        [0.34, 0.30, 0.16],
        [0.18, 0.30, 0.30],
    ],
    dtype=np.float64,
)

# Shared clothing palette: interior body parts (torso, legs, ...) draw from
# this small pool, so identity evidence concentrates in the small outer parts
# (head, shoes) the way non-salient cues carry identity in real footage.
# Clutter blobs reuse the same pool, making global color statistics ambiguous.
_CLOTHING_PALETTE = np.array(
    [
        [0.25, 0.25, 0.30],
        [0.55, 0.55, 0.60],
        [0.35, 0.20, 0.20],
        [0.20, 0.30, 0.45],
        [0.50, 0.45, 0.30],
        [0.30, 0.45, 0.30],
    ],
    dtype=np.float64,
)


class RenderError(ValueError):
    """A sample cannot be rendered under the requested geometry."""


class DatasetError(ValueError):
    """The requested dataset configuration violates the split protocol."""


@dataclass(frozen=True)
class PartLabel:
    id: int
    name: str


def part_vocabulary(num_parts: int) -> list[PartLabel]:
    """Dense, stable id->name mapping; id 0 is background."""
    if not (2 <= num_parts <= len(PART_NAMES)):
        raise ValueError(f"num_parts must be in [2, {len(PART_NAMES)}]")
    return [PartLabel(i, PART_NAMES[i]) for i in range(num_parts)]


@dataclass(frozen=True)
class IdentitySpec:
    """Appearance recipe for one identity.

    part_colors has one RGB row per non-background part; proportions are the
    vertical extents of those parts inside the body box (they sum to 1) and
    width_fracs their horizontal extents relative to the box width.
    """

    identity: int
    part_colors: np.ndarray   # (num_parts-1, 3) in [0,1]
    proportions: np.ndarray   # (num_parts-1,) in (0,1), sum == 1
    width_fracs: np.ndarray   # (num_parts-1,) in (0,1]

    def validate(self, num_parts: int):
        k = num_parts - 1
        if self.part_colors.shape != (k, 3):
            raise ValueError(f"part_colors must be ({k}, 3)")
        if self.proportions.shape != (k,) or self.width_fracs.shape != (k,):
            raise ValueError(f"proportions/width_fracs must be ({k},)")
        if not np.isclose(self.proportions.sum(), 1.0):
            raise ValueError("proportions must sum to 1")
        if (self.proportions <= 0).any() or (self.width_fracs <= 0).any():
            raise ValueError("proportions and width_fracs must be positive")
        return self


@dataclass
class SyntheticSample:
    image: np.ndarray    # (H, W, 3) float32 in [0,1]
    parsing: np.ndarray  # (H, W) uint8 part ids
    identity: int
    camera: int

    def validate(self, num_parts: int, min_part_frac: float = 0.01):
        h, w, _ = self.image.shape
        if self.parsing.shape != (h, w):
            raise ValueError("parsing dims must match image dims")
        ids = np.unique(self.parsing)
        if ids.max(initial=0) >= num_parts:
            raise ValueError(f"parsing ids not in [0, {num_parts})")
        counts = np.bincount(self.parsing.ravel(), minlength=num_parts)
        floor = int(np.ceil(min_part_frac * h * w))
        for pid in range(1, num_parts):
            if counts[pid] < floor:
                raise RenderError(
                    f"part {PART_NAMES[pid]!r} covers {counts[pid]} px "
                    f"< {floor} (1% of {h}x{w}); enlarge the image or reduce num_parts"
                )
        return self


@dataclass
class DatasetSplit:
    train: list[SyntheticSample]
    query: list[SyntheticSample]
    gallery: list[SyntheticSample]
    part_names: list[str] = field(default_factory=list)
    config: DataConfig | None = None


def _unique_part_indices(num_parts: int) -> list[int]:
    """Foreground part slots carrying identity-unique colors (first and last)."""
    k = num_parts - 1
    return [0] if k == 1 else [0, k - 1]


def sample_identity_specs(count: int, cfg: DataConfig, rng: np.random.Generator,
                          start_identity: int = 0) -> list[IdentitySpec]:
    """Draw identity recipes until every pair meets the color-separation floor.

    Interior parts wear shared clothing-palette colors (with a small tint);
    the outer parts are drawn freely and carry the separation requirement.
    """
    k = cfg.num_parts - 1
    unique_slots = _unique_part_indices(cfg.num_parts)
    specs: list[IdentitySpec] = []
    colors: list[np.ndarray] = []
    for i in range(count):
        for attempt in range(500):
            cand = np.empty((k, 3))
            for j in range(k):
                if j in unique_slots:
                    cand[j] = rng.uniform(0.08, 0.92, size=3)
                else:
                    base = _CLOTHING_PALETTE[rng.integers(0, len(_CLOTHING_PALETTE))]
                    cand[j] = np.clip(base + rng.uniform(-0.04, 0.04, size=3), 0.0, 1.0)
            if all(_separated(cand, other, cfg.color_separation, unique_slots)
                   for other in colors):
                break
        else:
            raise DatasetError(
                f"could not draw {count} identities with color separation "
                f">= {cfg.color_separation}; lower the separation or the identity count"
            )
        # outer (identity-unique) parts stay small, interior parts dominate,
        # mirroring how identity cues hide in non-salient regions
        base = np.where(np.isin(np.arange(k), unique_slots), 1.0, 3.0) if k > 1 \
            else np.ones(1)
        props = base * (1.0 + 0.2 * rng.uniform(-1.0, 1.0, size=k))
        props = props / props.sum()
        widths = rng.uniform(0.55, 0.9, size=k)
        colors.append(cand)
        specs.append(IdentitySpec(start_identity + i, cand, props, widths))
    return specs


def _separated(a: np.ndarray, b: np.ndarray, delta: float, unique_slots) -> bool:
    # some part must differ by >= delta in max-channel terms, and the
    # identity-unique slots must not be globally close (keeps nearest-centroid
    # identification solvable)
    per_part = np.abs(a - b).max(axis=1)
    gap = np.linalg.norm(a[unique_slots] - b[unique_slots])
    return per_part.max() >= delta and gap >= 0.5


def render_sample(spec: IdentitySpec, variation_seed: int, camera: int,
                  cfg: DataConfig | None = None) -> SyntheticSample:
    """Render one sample; bit-identical for equal (spec, seed, camera)."""
    cfg = cfg or DataConfig()
    spec.validate(cfg.num_parts)
    h, w = cfg.height, cfg.width
    rng = np.random.default_rng(np.random.SeedSequence([int(variation_seed) & 0xFFFFFFFFFFFFFFFF]))

    img = np.empty((h, w, 3), dtype=np.float64)
    bg = _CAMERA_BACKGROUNDS[camera % len(_CAMERA_BACKGROUNDS)]
    img[:] = bg
    parsing = np.zeros((h, w), dtype=np.uint8)

    # background clutter: blobs wearing clothing-palette or free colors, so
    # global color statistics alone do not identify the person
    n_blobs = int(rng.integers(cfg.clutter_blobs_min, cfg.clutter_blobs_max + 1))
    for _ in range(n_blobs):
        bh = int(rng.integers(max(2, h // 16), max(3, h // 4)))
        bw = int(rng.integers(max(2, w // 12), max(3, w // 3)))
        y0 = int(rng.integers(0, h - bh + 1))
        x0 = int(rng.integers(0, w - bw + 1))
        if rng.random() < 0.7:
            color = _CLOTHING_PALETTE[rng.integers(0, len(_CLOTHING_PALETTE))] \
                + rng.uniform(-0.06, 0.06, size=3)
        else:
            color = rng.uniform(0.08, 0.92, size=3)
        img[y0:y0 + bh, x0:x0 + bw] = np.clip(color, 0.0, 1.0)

    # body box with pose offset and scale jitter
    scale = 1.0 + cfg.scale_jitter * rng.uniform(-1.0, 1.0)
    box_h = int(round(cfg.person_height_frac * h * scale))
    box_w = int(round(cfg.person_width_frac * w * scale))
    box_h = min(box_h, h)
    box_w = min(box_w, w)
    dy = int(round(rng.uniform(-0.05, 0.05) * h))
    dx = int(round(rng.uniform(-0.12, 0.12) * w))
    top = np.clip((h - box_h) // 2 + dy, 0, h - box_h)
    left = np.clip((w - box_w) // 2 + dx, 0, w - box_w)

    k = cfg.num_parts - 1
    edges = np.round(np.concatenate([[0.0], np.cumsum(spec.proportions)]) * box_h).astype(int)
    for j in range(k):
        y0, y1 = top + edges[j], top + edges[j + 1]
        pw = max(1, int(round(spec.width_fracs[j] * box_w)))
        wobble = int(rng.integers(-1, 2))
        x0 = int(np.clip(left + (box_w - pw) // 2 + wobble, 0, w - pw))
        if y1 <= y0:
            raise RenderError(
                f"part {PART_NAMES[j + 1]!r} has zero rows for identity {spec.identity} "
                f"(proportion {spec.proportions[j]:.3f} of a {box_h}px body); "
                "increase image height or the part proportion"
            )
        img[y0:y1, x0:x0 + pw] = spec.part_colors[j]
        parsing[y0:y1, x0:x0 + pw] = j + 1

    # occluders paint over anything, including the person; occluded pixels
    # become background in the parsing. An occluder that would push a part
    # below the 1% coverage floor is skipped, keeping samples valid.
    floor = int(np.ceil(0.01 * h * w))
    n_occ = int(rng.integers(cfg.occluders_min, cfg.occluders_max + 1))
    for _ in range(n_occ):
        oh = int(rng.integers(max(2, h // 8), max(3, h // 4)))
        ow = int(rng.integers(max(2, w // 6), max(3, w // 2)))
        y0 = int(rng.integers(0, h - oh + 1))
        x0 = int(rng.integers(0, w - ow + 1))
        if rng.random() < 0.7:
            color = np.clip(_CLOTHING_PALETTE[rng.integers(0, len(_CLOTHING_PALETTE))]
                            + rng.uniform(-0.06, 0.06, size=3), 0.0, 1.0)
        else:
            color = rng.uniform(0.08, 0.92, size=3)
        trial = parsing.copy()
        trial[y0:y0 + oh, x0:x0 + ow] = 0
        counts = np.bincount(trial.ravel(), minlength=cfg.num_parts)
        if (counts[1:cfg.num_parts] >= floor).all():
            parsing = trial
            img[y0:y0 + oh, x0:x0 + ow] = color

    # per-camera gain plus per-instance brightness jitter
    cams = max(1, cfg.cameras)
    cam_gain = 0.94 + 0.12 * (camera % cams) / max(1, cams - 1) if cams > 1 else 1.0
    gain = cam_gain * (1.0 + cfg.brightness_jitter * rng.uniform(-1.0, 1.0))
    img = np.clip(img * gain, 0.0, 1.0)

    # quantize to the on-disk 8-bit grid so disk round-trips are lossless
    img = (np.round(img * 255.0) / 255.0).astype(np.float32)
    sample = SyntheticSample(img, parsing, spec.identity, camera)
    return sample.validate(cfg.num_parts)


def _variation_seed(dataset_seed: int, identity: int, instance: int) -> int:
    # counter-based per-sample seed: generation order and worker count never matter
    ss = np.random.SeedSequence([dataset_seed, identity, instance])
    return int(ss.generate_state(1, np.uint64)[0])


def generate_dataset(cfg: DataConfig, seed: int = 0, workers: int = 1) -> DatasetSplit:
    """Build train/query/gallery splits with disjoint identity sets."""
    cfg.validate()
    if cfg.test_identities > 0:
        if cfg.cameras < 2:
            raise DatasetError("query protocol needs >= 2 cameras")
        if cfg.instances_per_identity < 2:
            raise DatasetError("query protocol needs >= 2 instances per identity")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11CE]))
    train_specs = sample_identity_specs(cfg.train_identities, cfg, rng)
    test_specs = sample_identity_specs(cfg.test_identities, cfg, rng,
                                       start_identity=cfg.train_identities)

    def cameras_for(identity: int) -> np.ndarray:
        # round-robin over a per-identity seeded permutation
        id_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCA3, identity]))
        for _ in range(32):
            perm = id_rng.permutation(cfg.cameras)
            cams = np.array([perm[j % cfg.cameras] for j in range(cfg.instances_per_identity)])
            if cfg.cameras == 1 or len(np.unique(cams)) > 1:
                return cams
        raise DatasetError(f"identity {identity}: all instances landed on one camera")

    jobs = []
    for spec in train_specs + test_specs:
        cams = cameras_for(spec.identity)
        for j in range(cfg.instances_per_identity):
            jobs.append((spec, j, int(cams[j])))

    def render_job(job):
        spec, j, cam = job
        return render_sample(spec, _variation_seed(seed, spec.identity, j), cam, cfg)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            rendered = list(pool.map(render_job, jobs))
    else:
        rendered = [render_job(job) for job in jobs]

    by_identity: dict[int, list[SyntheticSample]] = {}
    for s in rendered:
        by_identity.setdefault(s.identity, []).append(s)

    train = [s for spec in train_specs for s in by_identity[spec.identity]]
    query, gallery = [], []
    for spec in test_specs:
        samples = by_identity[spec.identity]
        q, g = samples[:2], samples[2:]
        gallery_cams = {s.camera for s in g}
        for qs in q:
            if not (gallery_cams - {qs.camera}):
                raise DatasetError(
                    f"identity {spec.identity}: query on camera {qs.camera} has no "
                    "cross-camera gallery positive"
                )
        query.extend(q)
        gallery.extend(g)

    names = [p.name for p in part_vocabulary(cfg.num_parts)]
    return DatasetSplit(train, query, gallery, names, cfg)


def downsample_parsing(parsing: np.ndarray, stride: int) -> np.ndarray:
    """Majority part id per stride x stride block.

    Ties break toward the smaller id; erased (IGNORE_ID) pixels never vote, and
    a block with no votes maps to IGNORE_ID.
    """
    h, w = parsing.shape
    if stride <= 0 or h % stride or w % stride:
        raise ValueError(f"stride {stride} does not divide {h}x{w}")
    blocks = parsing.reshape(h // stride, stride, w // stride, stride)
    valid = blocks != IGNORE_ID
    max_id = int(parsing[parsing != IGNORE_ID].max()) if valid.any() else 0
    counts = np.stack(
        [((blocks == pid) & valid).sum(axis=(1, 3)) for pid in range(max_id + 1)],
        axis=0,
    )
    out = counts.argmax(axis=0).astype(np.uint8)  # argmax takes the smallest id on ties
    out[counts.sum(axis=0) == 0] = IGNORE_ID
    return out


# ---------------------------------------------------------------------------
# oracle-feature separability: the synthetic task must be solvable from
# per-part mean colors, so downstream failures indict the learner
# ---------------------------------------------------------------------------

def part_color_features(samples: list[SyntheticSample], num_parts: int) -> np.ndarray:
    feats = np.zeros((len(samples), (num_parts - 1) * 3), dtype=np.float64)
    for i, s in enumerate(samples):
        for pid in range(1, num_parts):
            mask = s.parsing == pid
            if mask.any():
                feats[i, (pid - 1) * 3:(pid - 1) * 3 + 3] = s.image[mask].mean(axis=0)
    return feats


def separability_score(split: DatasetSplit) -> float:
    """Nearest-centroid identity accuracy on train-set part-mean colors."""
    num_parts = split.config.num_parts if split.config else len(split.part_names)
    feats = part_color_features(split.train, num_parts)
    ids = np.array([s.identity for s in split.train])
    uniq = np.unique(ids)
    centroids = np.stack([feats[ids == u].mean(axis=0) for u in uniq])
    d = ((feats[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    pred = uniq[d.argmin(axis=1)]
    return float((pred == ids).mean())


# ---------------------------------------------------------------------------
# disk format: PNG image + PNG parsing + JSONL manifest per split
# ---------------------------------------------------------------------------

def save_dataset(split: DatasetSplit, root: str):
    os.makedirs(root, exist_ok=True)
    meta = {
        "part_names": split.part_names,
        "config": split.config.__dict__ if split.config else None,
    }
    with open(os.path.join(root, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    for split_name in ("train", "query", "gallery"):
        samples = getattr(split, split_name)
        subdir = os.path.join(root, split_name)
        os.makedirs(subdir, exist_ok=True)
        lines = []
        for i, s in enumerate(samples):
            img_name = f"{i:05d}.png"
            parse_name = f"{i:05d}_parsing.png"
            arr = np.round(s.image * 255.0).astype(np.uint8)
            Image.fromarray(arr, mode="RGB").save(os.path.join(subdir, img_name))
            Image.fromarray(s.parsing, mode="L").save(os.path.join(subdir, parse_name))
            lines.append(json.dumps(
                {"file": img_name, "parsing": parse_name,
                 "identity": s.identity, "camera": s.camera},
                sort_keys=True))
        with open(os.path.join(subdir, "manifest.jsonl"), "w") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))


def load_dataset(root: str) -> DatasetSplit:
    with open(os.path.join(root, "meta.json")) as fh:
        meta = json.load(fh)
    cfg = DataConfig(**meta["config"]) if meta.get("config") else None
    out = {}
    for split_name in ("train", "query", "gallery"):
        subdir = os.path.join(root, split_name)
        samples = []
        with open(os.path.join(subdir, "manifest.jsonl")) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                img = np.asarray(Image.open(os.path.join(subdir, rec["file"])),
                                 dtype=np.float32) / 255.0
                parsing = np.asarray(Image.open(os.path.join(subdir, rec["parsing"])),
                                     dtype=np.uint8)
                samples.append(SyntheticSample(img, parsing, rec["identity"], rec["camera"]))
        out[split_name] = samples
    return DatasetSplit(out["train"], out["query"], out["gallery"],
                        meta["part_names"], cfg)
