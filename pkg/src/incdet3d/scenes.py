"""Synthetic desk-scale point-cloud scenes and class-incremental task streams.

Twelve object classes: four surface primitives (box shell, sphere shell,
cylinder, pyramid) crossed with three size buckets. Class c maps to
primitive c % 4 and bucket c // 4.

Every primitive sampler emits its extremal surface points explicitly (box
corners, sphere poles, cylinder rim extremes, pyramid apex and base corners)
and the declared box is the tight axis-aligned bound of the noise-free
points, so the label is exact by construction instead of approximate.
Gaussian jitter is applied only after the box has been recorded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .rng import SeededRng
from .serialize import read_container, write_container

SCENE_MAGIC = b"PCSCENE\0"
SCENE_VERSION = 1

NUM_PRIMITIVES = 4
NUM_BUCKETS = 3
NUM_CLASSES = NUM_PRIMITIVES * NUM_BUCKETS

_PRIM_NAMES = ("box", "sphere", "cyl", "pyr")
_BUCKET_NAMES = ("sm", "md", "lg")
# nominal full-extent range per size bucket, in scene units
_BUCKET_RANGES = ((0.25, 0.40), (0.45, 0.65), (0.75, 1.00))

FLOOR_EXTENT = 1.0


def class_name(c: int) -> str:
    return f"{_PRIM_NAMES[c % NUM_PRIMITIVES]}_{_BUCKET_NAMES[c // NUM_PRIMITIVES]}"


@dataclass
class Scene:
    scene_id: int
    points: np.ndarray          # (P, 3) float64
    point_instance: np.ndarray  # (P,) int64, -1 for floor
    boxes: np.ndarray           # (n, 6) center xyz + full size xyz
    classes: np.ndarray         # (n,) int64

    def num_objects(self) -> int:
        return int(self.classes.shape[0])


def tight_box(points: np.ndarray) -> np.ndarray:
    """Center+size of the axis-aligned bound, exact in the input arithmetic."""
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    return np.concatenate([(lo + hi) * 0.5, hi - lo])


# ---------------------------------------------------------------------------
# primitive surface samplers, canonical cube [-1, 1]^3


def _sample_box_shell(rng: SeededRng, n: int) -> np.ndarray:
    corners = np.array([[sx, sy, sz] for sx in (-1.0, 1.0)
                        for sy in (-1.0, 1.0) for sz in (-1.0, 1.0)])
    m = n - len(corners)
    face = np.array([rng.randint(6) for _ in range(m)])
    uv = rng.uniform((m, 2), -1.0, 1.0)
    pts = np.zeros((m, 3))
    axis = face // 2
    side = np.where(face % 2 == 0, -1.0, 1.0)
    for i in range(m):
        others = [a for a in range(3) if a != axis[i]]
        pts[i, axis[i]] = side[i]
        pts[i, others[0]] = uv[i, 0]
        pts[i, others[1]] = uv[i, 1]
    return np.vstack([corners, pts])


def _sample_sphere_shell(rng: SeededRng, n: int) -> np.ndarray:
    poles = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0],
                      [0, -1.0, 0], [0, 0, 1.0], [0, 0, -1.0]])
    m = n - len(poles)
    v = rng.normal((m, 3))
    norm = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
    norm[norm < 1e-12] = 1.0
    pts = np.clip(v / norm, -1.0, 1.0)
    return np.vstack([poles, pts])


def _sample_cylinder(rng: SeededRng, n: int) -> np.ndarray:
    rim = np.array([[1.0, 0, z] for z in (-1.0, 1.0)]
                   + [[-1.0, 0, z] for z in (-1.0, 1.0)]
                   + [[0, 1.0, z] for z in (-1.0, 1.0)]
                   + [[0, -1.0, z] for z in (-1.0, 1.0)])
    m = n - len(rim)
    n_side = m * 2 // 3
    theta = rng.uniform((m,), 0.0, 2.0 * np.pi)
    cos, sin = np.clip(np.cos(theta), -1, 1), np.clip(np.sin(theta), -1, 1)
    pts = np.zeros((m, 3))
    pts[:n_side, 0] = cos[:n_side]
    pts[:n_side, 1] = sin[:n_side]
    pts[:n_side, 2] = rng.uniform((n_side,), -1.0, 1.0)
    # caps: uniform over the disk, alternating top and bottom
    r = np.sqrt(rng.uniform((m - n_side,)))
    pts[n_side:, 0] = r * cos[n_side:]
    pts[n_side:, 1] = r * sin[n_side:]
    pts[n_side:, 2] = np.where(np.arange(m - n_side) % 2 == 0, -1.0, 1.0)
    return np.vstack([rim, pts])


def _sample_pyramid(rng: SeededRng, n: int) -> np.ndarray:
    fixed = np.array([[0.0, 0.0, 1.0], [-1.0, -1.0, -1.0], [1.0, -1.0, -1.0],
                      [-1.0, 1.0, -1.0], [1.0, 1.0, -1.0]])
    m = n - len(fixed)
    n_base = m // 3
    base = np.zeros((n_base, 3))
    base[:, :2] = rng.uniform((n_base, 2), -1.0, 1.0)
    base[:, 2] = -1.0
    n_side = m - n_base
    # lateral faces: lerp a base-edge point toward the apex
    edge = np.array([rng.randint(4) for _ in range(n_side)])
    u = rng.uniform((n_side,), -1.0, 1.0)
    t = rng.uniform((n_side,))
    bx = np.where(edge == 0, u, np.where(edge == 1, u, np.where(edge == 2, -1.0, 1.0)))
    by = np.where(edge == 0, -1.0, np.where(edge == 1, 1.0, u))
    side = np.zeros((n_side, 3))
    side[:, 0] = (1.0 - t) * bx
    side[:, 1] = (1.0 - t) * by
    side[:, 2] = (1.0 - t) * -1.0 + t * 1.0
    return np.vstack([fixed, base, side])


_SAMPLERS = (_sample_box_shell, _sample_sphere_shell, _sample_cylinder, _sample_pyramid)
_MIN_OBJECT_POINTS = 16
# fixed points each sampler prepends, indexed by primitive
_FIXED_COUNTS = (8, 6, 8, 5)


def sample_object_points(rng: SeededRng, cls: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Canonical surface points and their per-axis half extents for class cls."""
    if n < _MIN_OBJECT_POINTS:
        raise InputError(f"objects need at least {_MIN_OBJECT_POINTS} points, got {n}")
    prim = cls % NUM_PRIMITIVES
    bucket = cls // NUM_PRIMITIVES
    lo, hi = _BUCKET_RANGES[bucket]
    base = rng.uniform(None, lo, hi)
    aspect = rng.uniform((3,), 0.85, 1.15)
    half = 0.5 * base * aspect
    return _SAMPLERS[prim](rng, n), half


def _boxes_overlap_xy(center_a, half_a, center_b, half_b, gap=0.05) -> bool:
    return (abs(center_a[0] - center_b[0]) < half_a[0] + half_b[0] + gap
            and abs(center_a[1] - center_b[1]) < half_a[1] + half_b[1] + gap)


def generate_scene(rng: SeededRng, scene_id: int, allowed_classes,
                   num_points: int = 2048, max_objects: int = 3,
                   noise_std: float = 0.005, first_class=None) -> Scene:
    """One scene: objects resting on a square floor, floor clutter after.

    Points are ordered object 0, object 1, ..., floor. first_class pins the
    class of the first object so a stream can guarantee coverage.
    """
    allowed = list(allowed_classes)
    if not allowed:
        raise InputError("a scene needs at least one allowed class")
    n_obj = 1 + rng.randint(max_objects)
    per_obj = max(_MIN_OBJECT_POINTS, num_points // (max_objects + 2))
    if n_obj * per_obj + 1 > num_points:
        raise ConfigError(f"num_points={num_points} too small for {max_objects} objects")

    placed = []  # (center, half)
    chunks, instances, boxes, classes = [], [], [], []
    for i in range(n_obj):
        cls = first_class if (i == 0 and first_class is not None) else rng.choice(allowed)
        canonical, half = sample_object_points(rng, cls, per_obj)
        margin = float(max(half[0], half[1]))
        center = None
        for _ in range(60):
            cand = np.array([
                rng.uniform(None, -FLOOR_EXTENT + margin, FLOOR_EXTENT - margin),
                rng.uniform(None, -FLOOR_EXTENT + margin, FLOOR_EXTENT - margin),
                float(half[2]),
            ])
            if all(not _boxes_overlap_xy(cand, half, c, h) for c, h in placed):
                center = cand
                break
        if center is None:
            center = cand  # crowded scene, tolerate the overlap
        placed.append((center, half))
        pts = center + half * canonical
        chunks.append(pts)
        instances.append(np.full(per_obj, i, dtype=np.int64))
        boxes.append(tight_box(pts))
        classes.append(cls)

    n_floor = num_points - n_obj * per_obj
    floor = np.zeros((n_floor, 3))
    floor[:, :2] = rng.uniform((n_floor, 2), -FLOOR_EXTENT, FLOOR_EXTENT)
    chunks.append(floor)
    instances.append(np.full(n_floor, -1, dtype=np.int64))

    points = np.vstack(chunks)
    if noise_std > 0:
        points = points + rng.normal(points.shape, 0.0, noise_std)
    return Scene(
        scene_id=scene_id,
        points=points,
        point_instance=np.concatenate(instances),
        boxes=np.vstack(boxes),
        classes=np.asarray(classes, dtype=np.int64),
    )


def seed_center_targets(scene: Scene, seeds_xyz: np.ndarray):
    """Vote targets for seed points: the center of the box each seed sits in.

    A seed participates iff it lies inside at least one ground-truth box;
    when boxes overlap, the nearest box center wins. Returns
    (targets (M, 3), mask (M,) bool); unmasked rows carry zeros.
    """
    seeds = np.asarray(seeds_xyz, dtype=np.float64)
    m = seeds.shape[0]
    targets = np.zeros((m, 3))
    mask = np.zeros(m, dtype=bool)
    if scene.num_objects() == 0:
        return targets, mask
    centers = scene.boxes[:, :3]
    halves = scene.boxes[:, 3:] * 0.5
    inside = np.all(np.abs(seeds[:, None, :] - centers[None, :, :]) <= halves[None, :, :], axis=2)
    d2 = np.sum((seeds[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    d2 = np.where(inside, d2, np.inf)
    hit = inside.any(axis=1)
    nearest = np.argmin(d2, axis=1)
    targets[hit] = centers[nearest[hit]]
    mask[hit] = True
    return targets, mask


# ---------------------------------------------------------------------------
# task streams


@dataclass
class Task:
    index: int                # 1-based task position
    new_classes: list
    seen_classes: list        # union of class blocks up to and including this task
    train_scenes: list = field(default_factory=list)
    eval_scenes: list = field(default_factory=list)


def split_classes(class_counts) -> list:
    """Consecutive disjoint class blocks, e.g. [5, 5] -> [0..4], [5..9]."""
    counts = [int(c) for c in class_counts]
    if any(c <= 0 for c in counts):
        raise ConfigError("every task must introduce at least one class")
    if sum(counts) > NUM_CLASSES:
        raise ConfigError(f"catalog has {NUM_CLASSES} classes, asked for {sum(counts)}")
    blocks, start = [], 0
    for c in counts:
        blocks.append(list(range(start, start + c)))
        start += c
    return blocks


def make_task_stream(seed: int, class_counts, train_per_task: int, eval_per_task: int,
                     num_points: int = 2048, max_objects: int = 3,
                     noise_std: float = 0.005) -> list:
    """Class-incremental stream over consecutive class blocks.

    Scenes of task t sample objects from everything seen so far, the way a
    real environment keeps containing earlier object kinds; each train scene
    is pinned to hold at least one instance of a task-t class. Which boxes
    are visible as labels at training time is the trainer's business, not
    the stream's: scenes always carry full ground truth.
    """
    blocks = split_classes(class_counts)
    root = SeededRng(seed)
    tasks = []
    seen = []
    for t, block in enumerate(blocks, start=1):
        seen = seen + block
        task = Task(index=t, new_classes=list(block), seen_classes=list(seen))
        for i in range(train_per_task):
            srng = root.split("task", t, "train", i)
            sid = t * 100000 + i
            task.train_scenes.append(generate_scene(
                srng, sid, seen, num_points, max_objects, noise_std,
                first_class=block[i % len(block)]))
        for i in range(eval_per_task):
            srng = root.split("task", t, "eval", i)
            sid = t * 100000 + 50000 + i
            task.eval_scenes.append(generate_scene(
                srng, sid, seen, num_points, max_objects, noise_std,
                first_class=seen[i % len(seen)]))
        tasks.append(task)
    return tasks


# ---------------------------------------------------------------------------
# on-disk form


def save_scenes(path, scenes) -> None:
    arrays, ids = {}, []
    for i, sc in enumerate(scenes):
        arrays[f"s{i:05d}.points"] = sc.points
        arrays[f"s{i:05d}.instance"] = sc.point_instance
        arrays[f"s{i:05d}.boxes"] = sc.boxes
        arrays[f"s{i:05d}.classes"] = sc.classes
        ids.append(int(sc.scene_id))
    write_container(path, SCENE_MAGIC, SCENE_VERSION, arrays,
                    {"count": len(ids), "scene_ids": ids})


def save_scene(path, scene: Scene) -> None:
    save_scenes(path, [scene])


def load_scene(path) -> Scene:
    scenes = load_scenes(path)
    if len(scenes) != 1:
        raise InputError(f"expected a single-scene file, found {len(scenes)}")
    return scenes[0]


def load_scenes(path) -> list:
    arrays, meta = read_container(path, SCENE_MAGIC, SCENE_VERSION)
    scenes = []
    for i in range(int(meta["count"])):
        sc = Scene(
            scene_id=int(meta["scene_ids"][i]),
            points=arrays[f"s{i:05d}.points"],
            point_instance=arrays[f"s{i:05d}.instance"],
            boxes=arrays[f"s{i:05d}.boxes"],
            classes=arrays[f"s{i:05d}.classes"],
        )
        validate_scene(sc)
        scenes.append(sc)
    return scenes


def validate_scene(sc: Scene) -> None:
    if sc.points.ndim != 2 or sc.points.shape[1] != 3:
        raise InputError("scene points must be (P, 3)")
    if sc.point_instance.shape[0] != sc.points.shape[0]:
        raise InputError("per-point instance labels must match the point count")
    n = sc.num_objects()
    if sc.boxes.shape != (n, 6):
        raise InputError("boxes must be (n, 6) center+size")
    if n:
        counts = np.bincount(sc.point_instance[sc.point_instance >= 0], minlength=n)
        if sc.point_instance.max() >= n:
            raise InputError("instance label refers to a missing object")
        if counts.min() < _MIN_OBJECT_POINTS:
            raise InputError(f"every object needs >= {_MIN_OBJECT_POINTS} points")
        if sc.classes.min() < 0 or sc.classes.max() >= NUM_CLASSES:
            raise InputError("object class id outside the catalog")
        if np.any(sc.boxes[:, 3:] <= 0):
            raise InputError("box sizes must be positive")
