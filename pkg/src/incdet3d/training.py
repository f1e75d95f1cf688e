"""Experiment configuration, the incremental training loop, and checkpoints.

A run walks a task stream: before each later task the current detector is
frozen as the teacher, the class table grows, and the student trains with
supervised loss plus ramped retention terms against the teacher. Variants
switch individual pieces off to form baselines and an ablation ladder.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, no_grad, reset_tape
from .detector import (PROFILE_DIM, DetectorParams, compute_geometry,
                       decode_and_nms, expand_classifier, init_detector,
                       backbone_features, propose, supervised_loss,
                       vote_centers)
from .distill import (compute_threshold, logit_distillation_loss, rdd_loss,
                      rfd_loss)
from .errors import ConfigError, FormatError, StateError
from .metrics import aggregate_report, evaluate_detections, forgetting_delta
from .optim import Adam
from .prompts import (PromptHeadParams, PromptPool, init_prompt_head, pgb_loss,
                      prompting_attention, refine_centers)
from .rng import SeededRng
from .scenes import NUM_CLASSES, Task, make_task_stream, seed_center_targets
from .serialize import read_container, write_container

VARIANTS = ("full", "no_pgb", "no_pgb_rdd", "no_pgb_rdd_rfd",
            "freeze_add", "finetune", "joint")

CKPT_MAGIC = b"PCCKPT\0\0"
CKPT_VERSION = 1


@dataclass
class ExperimentConfig:
    seed: int = 0
    variant: str = "full"
    # data
    class_counts: list = field(default_factory=lambda: [6, 6])
    train_scenes: int = 20
    eval_scenes: int = 10
    num_points: int = 2048
    max_objects: int = 3
    noise_std: float = 0.005
    # detector
    num_seeds: int = 64
    feature_dim: int = 32
    num_proposals: int = 16
    num_heads: int = 2
    num_prompts: int = 10
    prompt_hidden: int = 64
    radius: float = 0.3
    cluster_radius: float = 0.4
    initial_box_size: float = 0.35
    # supervised loss
    pos_radius: float = 0.3
    neg_radius: float = 0.6
    w_obj: float = 0.5
    w_box: float = 1.0
    w_cls: float = 0.1
    w_vote: float = 1.0
    # retention terms
    alpha: float = 10.0
    beta: float = 0.8
    gamma: float = 1.0
    xi: float = 1.0
    zeta: float = 1.2
    kd_temperature: float = 1.0
    rdd_squared: bool = True
    rfd_max_pairs: int = 1024
    shield_objectness: float = 0.5
    # optimization
    lr: float = 0.001
    epochs: int = 60
    batch_size: int = 8
    ramp_fraction: float = 0.2
    # inference
    objectness_threshold: float = 0.05
    nms_iou: float = 0.25
    eval_iou: float = 0.25

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        counts = list(self.class_counts)
        if not counts or any(int(c) != c or c <= 0 for c in counts):
            raise ConfigError("class_counts must be positive integers")
        if sum(counts) > NUM_CLASSES:
            raise ConfigError(f"class_counts exceed the {NUM_CLASSES}-class catalog")
        for name in ("train_scenes", "eval_scenes", "num_points", "max_objects",
                     "num_seeds", "feature_dim", "num_proposals", "num_heads",
                     "num_prompts", "prompt_hidden", "epochs", "batch_size",
                     "rfd_max_pairs"):
            v = getattr(self, name)
            if int(v) != v or v <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.num_prompts % 2 != 0:
            raise ConfigError("num_prompts must be even")
        if self.feature_dim % self.num_heads != 0:
            raise ConfigError("feature_dim must divide evenly across heads")
        if self.num_proposals > self.num_seeds:
            raise ConfigError("cannot have more proposals than seeds")
        if self.num_seeds > self.num_points:
            raise ConfigError("cannot have more seeds than points")
        if not 0.0 <= self.ramp_fraction <= 1.0:
            raise ConfigError("ramp_fraction must lie in [0, 1]")
        for name in ("lr", "kd_temperature", "radius", "cluster_radius",
                     "initial_box_size", "pos_radius", "neg_radius"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("alpha", "beta", "gamma", "xi", "zeta", "noise_std",
                     "w_obj", "w_box", "w_cls", "w_vote", "objectness_threshold"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 <= self.shield_objectness <= 1.0:
            raise ConfigError("shield_objectness must lie in [0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_counts"] = [int(c) for c in d["class_counts"]]
        return d


def canonical_config_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_config_json(cfg).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# model container


@dataclass
class Model:
    det: DetectorParams
    prompt_head: PromptHeadParams
    pool: PromptPool

    def trainable_parameters(self, include_prompts: bool):
        params = self.det.parameters()
        if include_prompts:
            params = params + self.prompt_head.parameters() + [self.pool.active]
        return params

    def copy_frozen(self) -> "Model":
        """Deep value copy with gradients off everywhere; used as the teacher."""
        det = self.det.copy(requires_grad=False)

        def frozen(t):
            return Tensor(t.data.copy(), requires_grad=False)

        head = PromptHeadParams(
            attn_q=[frozen(t) for t in self.prompt_head.attn_q],
            attn_k=[frozen(t) for t in self.prompt_head.attn_k],
            attn_v=[frozen(t) for t in self.prompt_head.attn_v],
            mlp_w1=frozen(self.prompt_head.mlp_w1),
            mlp_b1=frozen(self.prompt_head.mlp_b1),
            mlp_w2=frozen(self.prompt_head.mlp_w2),
            mlp_b2=frozen(self.prompt_head.mlp_b2),
            conv_w=frozen(self.prompt_head.conv_w),
            conv_b=frozen(self.prompt_head.conv_b),
        )
        pool = PromptPool.from_state(self.pool.active.data, self.pool.archive,
                                     capacity=self.pool.capacity,
                                     requires_grad=False)
        return Model(det=det, prompt_head=head, pool=pool)


def init_model(rng: SeededRng, cfg: ExperimentConfig, num_classes: int) -> Model:
    return Model(
        det=init_detector(rng.split("det"), cfg.feature_dim, num_classes,
                          cfg.initial_box_size),
        prompt_head=init_prompt_head(rng.split("head"), cfg.feature_dim,
                                     cfg.num_heads, cfg.prompt_hidden),
        pool=PromptPool(rng.split("pool"), cfg.num_prompts, cfg.feature_dim),
    )


class GeometryStore:
    """Per-scene sampling geometry plus seed-level vote targets.

    All of it depends only on the input scene, so teacher and student share
    one entry and repeated epochs pay the neighborhood search once. Vote
    targets follow box containment: a seed participates iff it sits inside
    a ground-truth box, and each masked seed also remembers the class of the
    box it belongs to so the trainer can restrict supervision to the labels
    visible at the current task.
    """

    def __init__(self, num_seeds: int, radius: float):
        self.num_seeds = num_seeds
        self.radius = radius
        self._cache = {}

    def get(self, scene):
        key = scene.scene_id
        if key not in self._cache:
            geom = compute_geometry(scene.points, self.num_seeds, self.radius)
            targets, mask = seed_center_targets(scene, geom.seed_xyz)
            seed_cls = np.full(mask.shape[0], -1, dtype=np.int64)
            if mask.any() and scene.num_objects() > 0:
                centers = scene.boxes[:, :3]
                d2 = np.sum((targets[mask][:, None, :] - centers[None, :, :]) ** 2,
                            axis=2)
                seed_cls[mask] = scene.classes[np.argmin(d2, axis=1)]
            self._cache[key] = (geom, mask, targets, seed_cls)
        return self._cache[key]


def forward_scene(model: Model, geom, cfg: ExperimentConfig, use_prompts: bool):
    """Returns (proposals, final per-seed vote table).

    Every variant votes; with prompts on, attention over prompt-extended
    keys/values drives a further two-stage refinement of the votes. Clusters
    form over the final votes, and either way the cluster features aggregate
    the raw backbone features.
    """
    feats = backbone_features(model.det, geom)
    centers = vote_centers(model.det, feats, geom.seed_xyz)
    if use_prompts:
        heads = prompting_attention(feats, model.pool.active, model.prompt_head)
        _, centers = refine_centers(centers, heads, model.prompt_head)
    props = propose(model.det, centers, feats, geom,
                    cfg.num_proposals, cfg.cluster_radius)
    return props, centers


def _mean_scalars(terms):
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    if len(terms) == 1:
        return total
    return ad.mul(total, 1.0 / len(terms))


def batch_loss(model: Model, teacher, batch, cfg: ExperimentConfig,
               geo: GeometryStore, task: Task, ramp: float,
               counters=None) -> Tensor:
    """Weighted supervised + retention loss over one batch of scenes.

    Supervision only sees boxes of the task's own classes; scenes may well
    contain earlier-class objects, but those arrive unlabeled, exactly the
    regime the retention terms exist for. The retention terms run from the
    second task on and need the frozen teacher, which is evaluated on the
    student's proposal geometry so every term compares the two models index
    by index on the same regions. Proposals the teacher confidently claims
    as an old class are additionally kept out of the background set of the
    objectness loss. ramp in [0, 1] scales the retention terms jointly.
    """
    variant = cfg.variant
    use_prompts = variant == "full"
    use_kd = variant in ("full", "no_pgb", "no_pgb_rdd", "no_pgb_rdd_rfd")
    use_rdd = variant in ("full", "no_pgb")
    use_rfd = variant in ("full", "no_pgb", "no_pgb_rdd")
    distill_active = use_kd and task.index > 1
    if distill_active and teacher is None:
        raise StateError("retention terms need the previous-task model")
    c_old = teacher.det.num_classes() if teacher is not None else 0

    sup_terms, dis_terms = [], []
    for scene in batch:
        geom, seed_mask, seed_targets, seed_cls = geo.get(scene)
        props, centers = forward_scene(model, geom, cfg, use_prompts)

        # every variant regresses the votes of seeds on labeled objects
        # toward the object center; with prompts the refined table is what
        # clusters form over, so that is what the regression reads
        vmask = seed_mask & np.isin(seed_cls, task.new_classes)
        vote = pgb_loss(centers, seed_targets, vmask)

        teacher_props = None
        ignore = None
        if distill_active:
            t_feats = backbone_features(teacher.det, geom)
            teacher_props = propose(
                teacher.det, Tensor(centers.data.copy()), t_feats,
                geom, cfg.num_proposals, cfg.cluster_radius,
                plan=(props.anchor_idx, props.cluster_of_seed))
            # the old model's confident detections are evidence of unlabeled
            # old-class objects; pushing their objectness toward background
            # would erase exactly what the retention terms try to keep
            t_sel = compute_threshold(
                teacher_props.class_scores.data, range(1, c_old + 1), cfg.zeta)
            objecty = np.nonzero(teacher_props.objectness() > cfg.shield_objectness)[0]
            ignore = np.union1d(t_sel.indices, objecty)

        visible = np.isin(scene.classes, task.new_classes)
        sup, sup_info = supervised_loss(
            props, centers.data, scene.boxes[visible], scene.classes[visible],
            vote_loss=vote, ignore_idx=ignore,
            pos_radius=cfg.pos_radius, neg_radius=cfg.neg_radius,
            w_obj=cfg.w_obj, w_box=cfg.w_box, w_cls=cfg.w_cls,
            w_vote=cfg.w_vote)
        sup_terms.append(ad.mul(sup, cfg.alpha))

        if distill_active:
            if counters is not None:
                counters["distill_invocations"] += 1
            # proposals matched to a current label learn from that label.
            # Where the old detector confidently claims an old class, its
            # full belief is the target, zero mass on new columns included;
            # elsewhere only the relative balance of the old columns is
            # held, so an unlabeled object of a new class stays claimable.
            unlabeled = np.setdiff1d(np.arange(cfg.num_proposals),
                                     sup_info["positive_idx"])
            strict = np.intersect1d(unlabeled, t_sel.indices)
            lax = np.setdiff1d(unlabeled, strict)
            kd = ad.add(
                logit_distillation_loss(
                    props.class_logits, teacher_props.class_logits.data,
                    cfg.kd_temperature, rows=strict),
                logit_distillation_loss(
                    props.class_logits, teacher_props.class_logits.data,
                    cfg.kd_temperature, rows=lax, pad=False))
            term = ad.mul(kd, cfg.xi)
            if use_rdd:
                # columns 1..c_old are the trained classes; the background
                # column is shared, not an old class, so it stays out of the
                # reliability statistic
                selection = compute_threshold(
                    props.class_scores.data, range(1, c_old + 1), cfg.zeta)
                r = rdd_loss(props.boxes, teacher_props.boxes.data, selection,
                             cfg.rdd_squared)
                term = ad.add(term, ad.mul(r, cfg.beta))
            if use_rfd:
                rel = rfd_loss(props.features, teacher_props.features.data,
                               cfg.rfd_max_pairs)
                term = ad.add(term, ad.mul(rel, cfg.gamma))
            dis_terms.append(term)

    total = _mean_scalars(sup_terms)
    if dis_terms:
        total = ad.add(total, ad.mul(_mean_scalars(dis_terms), ramp))
    return total


def train_task(model: Model, teacher, task: Task, cfg: ExperimentConfig,
               geo: GeometryStore, rng: SeededRng, counters: dict) -> None:
    variant = cfg.variant
    use_prompts = variant == "full"

    # freeze-and-add touches only the class table on later tasks; both it and
    # plain fine-tuning keep the already-learned class rows pinned (the
    # background row counts as part of the old classifier, hence the +1)
    masked_rows = 0
    if task.index > 1 and variant in ("freeze_add", "finetune"):
        masked_rows = 1 + teacher.det.num_classes() if teacher is not None else 0
    if variant == "freeze_add" and task.index > 1:
        params = [model.det.cls_w, model.det.cls_b]
    else:
        params = model.trainable_parameters(use_prompts)

    n = len(task.train_scenes)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    opt = Adam(params, lr=cfg.lr, total_steps=total_steps)
    ramp_den = max(1.0, cfg.ramp_fraction * total_steps)

    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.split("perm", task.index, epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = [task.train_scenes[i] for i in perm[start:start + cfg.batch_size]]
            reset_tape()
            ramp = min(1.0, step / ramp_den)
            total = batch_loss(model, teacher, batch, cfg, geo, task,
                               ramp, counters)
            backward(total, params)
            if masked_rows:
                model.det.cls_w.grad[:masked_rows] = 0.0
                model.det.cls_b.grad[:masked_rows] = 0.0
            opt.step()
            counters["train_steps"] += 1
            step += 1


def evaluate_model(model: Model, scenes, class_ids, cfg: ExperimentConfig,
                   geo: GeometryStore, use_prompts: bool):
    """Per-class (AP, recall) fractions over a scene pool."""
    preds, gts = [], []
    with no_grad():
        for scene in scenes:
            geom = geo.get(scene)[0]
            props, _ = forward_scene(model, geom, cfg, use_prompts)
            for cls, conf, box in decode_and_nms(props, cfg.objectness_threshold,
                                                 cfg.nms_iou):
                preds.append((scene.scene_id, cls, conf, box))
            for i in range(scene.num_objects()):
                gts.append((scene.scene_id, int(scene.classes[i]), scene.boxes[i]))
    return evaluate_detections(preds, gts, class_ids, cfg.eval_iou)


def _percent(values: dict) -> dict:
    return {c: (None if v is None else 100.0 * v) for c, v in values.items()}


def task_report(ap: dict, recall: dict, task: Task):
    """Percent-scale grouped report: old classes as base, this task's as novel.

    On the first task everything seen so far counts as base, so retention
    comparisons against later tasks read the same field.
    """
    old = [c for c in task.seen_classes if c not in task.new_classes]
    base = old if old else task.new_classes
    novel = task.new_classes if old else []
    return aggregate_report(_percent(ap), _percent(recall), base, novel)


def run_experiment(cfg: ExperimentConfig, scene_tasks=None,
                   checkpoint_path=None) -> dict:
    """Full incremental run; returns a json-ready report.

    scene_tasks lets callers reuse one generated stream across variants;
    when omitted the stream is derived from the config. checkpoint_path,
    when given, receives the final model.
    """
    tasks = scene_tasks
    if tasks is None:
        tasks = make_task_stream(cfg.seed, cfg.class_counts, cfg.train_scenes,
                                 cfg.eval_scenes, cfg.num_points,
                                 cfg.max_objects, cfg.noise_std)
    if cfg.variant == "joint":
        pooled = Task(index=1,
                      new_classes=list(tasks[-1].seen_classes),
                      seen_classes=list(tasks[-1].seen_classes))
        for t in tasks:
            pooled.train_scenes.extend(t.train_scenes)
            pooled.eval_scenes.extend(t.eval_scenes)
        tasks = [pooled]

    rng = SeededRng(cfg.seed)
    model = init_model(rng.split("model"), cfg, len(tasks[0].new_classes))
    geo = GeometryStore(cfg.num_seeds, cfg.radius)
    counters = {"distill_invocations": 0, "train_steps": 0}
    use_prompts = cfg.variant == "full"

    report_tasks = {}
    reports = {}
    teacher = None
    eval_pool = []
    for task in tasks:
        if task.index > 1:
            teacher = model.copy_frozen()
            expand_classifier(model.det, len(task.new_classes),
                              rng.split("expand", task.index))
        if use_prompts:
            model.pool.select(task.index)
        train_task(model, teacher, task, cfg, geo, rng, counters)
        if use_prompts:
            model.pool.store(task.index)
        eval_pool = eval_pool + task.eval_scenes
        ap, recall = evaluate_model(model, eval_pool, task.seen_classes, cfg,
                                    geo, use_prompts)
        report = task_report(ap, recall, task)
        reports[task.index] = report
        entry = report.to_dict()
        if task.index > 1:
            entry["forgetting"] = {
                str(c): v
                for c, v in forgetting_delta(reports[1], report).items()}
        report_tasks[str(task.index)] = entry

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, cfg, tasks[-1].index)
    return {
        "version": 1,
        "seed": int(cfg.seed),
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "variant": cfg.variant,
        "tasks": report_tasks,
        "counters": counters,
    }


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model, cfg: ExperimentConfig, task_index: int):
    arrays = {}
    for name in ("bb_w1", "bb_b1", "bb_w2", "bb_b2",
                 "vote_w1", "vote_b1", "vote_w2", "vote_b2",
                 "trunk_w1", "trunk_b1", "trunk_w2", "trunk_b2",
                 "obj_w", "obj_b", "cls_w", "cls_b", "box_w", "box_b"):
        arrays[f"det.{name}"] = getattr(model.det, name).data
    arrays["det.rff_freq"] = model.det.rff_freq
    arrays["det.rff_phase"] = model.det.rff_phase
    for h in range(model.prompt_head.num_heads):
        arrays[f"prompt.attn_q.{h}"] = model.prompt_head.attn_q[h].data
        arrays[f"prompt.attn_k.{h}"] = model.prompt_head.attn_k[h].data
        arrays[f"prompt.attn_v.{h}"] = model.prompt_head.attn_v[h].data
    for name in ("mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "conv_w", "conv_b"):
        arrays[f"prompt.{name}"] = getattr(model.prompt_head, name).data
    arrays["pool.active"] = model.pool.active.data
    for t in sorted(model.pool.archive):
        arrays[f"pool.archive.{t}"] = model.pool.archive[t]
    meta = {"config": cfg.to_dict(), "task_index": int(task_index),
            "archive_tasks": sorted(int(t) for t in model.pool.archive)}
    write_container(path, CKPT_MAGIC, CKPT_VERSION, arrays, meta)


def _expect_shape(name: str, arr: np.ndarray, shape: tuple) -> None:
    if tuple(arr.shape) != shape:
        raise FormatError(
            f"checkpoint array {name} has shape {tuple(arr.shape)}, expected {shape}")


def load_checkpoint(path):
    arrays, meta = read_container(path, CKPT_MAGIC, CKPT_VERSION)
    cfg = ExperimentConfig.from_dict(meta["config"])
    d = cfg.feature_dim
    head_dim = d // cfg.num_heads
    try:
        cls_rows = arrays["det.cls_w"].shape[0]  # background row + class rows
        n_fixed = d // 2
        for name, shape in (
                ("det.bb_w1", (6, d)), ("det.bb_b1", (d,)),
                ("det.bb_w2", (d, d - n_fixed)), ("det.bb_b2", (d - n_fixed,)),
                ("det.rff_freq", (n_fixed, 3)), ("det.rff_phase", (n_fixed,)),
                ("det.vote_w1", (d, d)), ("det.vote_b1", (d,)),
                ("det.vote_w2", (d, 3)), ("det.vote_b2", (3,)),
                ("det.trunk_w1", (d + 6, d)), ("det.trunk_b1", (d,)),
                ("det.trunk_w2", (d, d)), ("det.trunk_b2", (d,)),
                ("det.obj_w", (d + 6 + PROFILE_DIM, 1)), ("det.obj_b", (1,)),
                ("det.cls_w", (cls_rows, d + 6 + PROFILE_DIM)),
                ("det.cls_b", (cls_rows,)),
                ("det.box_w", (d + 6 + PROFILE_DIM, 6)), ("det.box_b", (6,)),
                ("prompt.mlp_w1", (d, cfg.prompt_hidden)),
                ("prompt.mlp_b1", (cfg.prompt_hidden,)),
                ("prompt.mlp_w2", (cfg.prompt_hidden, 3)),
                ("prompt.mlp_b2", (3,)),
                ("prompt.conv_w", (3, 3, 3)), ("prompt.conv_b", (3,)),
                ("pool.active", (cfg.num_prompts, d))):
            _expect_shape(name, arrays[name], shape)
        for h in range(cfg.num_heads):
            for part in ("attn_q", "attn_k", "attn_v"):
                _expect_shape(f"prompt.{part}.{h}",
                              arrays[f"prompt.{part}.{h}"], (d, head_dim))

        det = DetectorParams(**{
            name: (arrays[f"det.{name}"].copy() if name.startswith("rff_")
                   else Tensor(arrays[f"det.{name}"], requires_grad=True))
            for name in DetectorParams.__dataclass_fields__})
        head = PromptHeadParams(
            attn_q=[Tensor(arrays[f"prompt.attn_q.{h}"], requires_grad=True)
                    for h in range(cfg.num_heads)],
            attn_k=[Tensor(arrays[f"prompt.attn_k.{h}"], requires_grad=True)
                    for h in range(cfg.num_heads)],
            attn_v=[Tensor(arrays[f"prompt.attn_v.{h}"], requires_grad=True)
                    for h in range(cfg.num_heads)],
            **{name: Tensor(arrays[f"prompt.{name}"], requires_grad=True)
               for name in ("mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
                            "conv_w", "conv_b")})
        pool = PromptPool.from_state(
            arrays["pool.active"],
            {t: arrays[f"pool.archive.{t}"] for t in meta["archive_tasks"]})
    except KeyError as e:
        raise FormatError(f"checkpoint missing array {e}") from e
    return Model(det=det, prompt_head=head, pool=pool), cfg, int(meta["task_index"])
