"""A small vote-style 3-d detector built on the autodiff core.

Pipeline per scene: farthest-point sampling picks M seed points, each seed
pools an MLP embedding of its radius neighborhood (relative coordinates, so
the feature sees local shape, not absolute position), every seed votes for
the center of whatever it sits on, the votes optionally get prompt-guided
refinement, a farthest-point pass over the votes picks K anchors, seeds
join their nearest anchor, and three heads read the cluster feature:
objectness, class scores, box residuals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, InputError
from .rng import SeededRng


# ---------------------------------------------------------------------------
# sampling and geometry


def farthest_point_indices(points: np.ndarray, m: int) -> np.ndarray:
    """Greedy max-min subset of size m.

    Starts from the lexicographically smallest point and breaks distance ties
    lexicographically, so the returned point set is independent of the input
    row order.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if m <= 0 or m > n:
        raise InputError(f"cannot pick {m} of {n} points")
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    chosen = [int(order[0])]
    diff = pts - pts[chosen[0]]
    dist = np.sum(diff * diff, axis=1)
    dist[chosen[0]] = -1.0
    for _ in range(m - 1):
        best = dist.max()
        cands = np.nonzero(dist == best)[0]
        if cands.size > 1:
            sub = np.lexsort((pts[cands, 2], pts[cands, 1], pts[cands, 0]))
            nxt = int(cands[sub[0]])
        else:
            nxt = int(cands[0])
        chosen.append(nxt)
        diff = pts - pts[nxt]
        dist = np.minimum(dist, np.sum(diff * diff, axis=1))
        dist[nxt] = -1.0
    return np.asarray(chosen, dtype=np.int64)


@dataclass
class SceneGeometry:
    """Input-only quantities reused across epochs and across teacher/student."""
    seed_idx: np.ndarray      # (M,) into the scene points
    seed_xyz: np.ndarray      # (M, 3)
    pair_seed: np.ndarray     # (T,) seed id per neighbor pair
    pair_offset: np.ndarray   # (T, 3) neighbor minus seed


def compute_geometry(points: np.ndarray, num_seeds: int, radius: float) -> SceneGeometry:
    seed_idx = farthest_point_indices(points, num_seeds)
    # order seeds by coordinates: the refinement stage convolves along the
    # seed axis, and that only makes sense if axis neighbors are near in space
    seeds = points[seed_idx]
    order = np.lexsort((seeds[:, 2], seeds[:, 1], seeds[:, 0]))
    seed_idx = seed_idx[order]
    seeds = seeds[order]
    pair_seed, pair_offset = [], []
    r2 = radius * radius
    for i in range(num_seeds):
        diff = points - seeds[i]
        near = np.nonzero(np.sum(diff * diff, axis=1) <= r2)[0]
        pair_seed.append(np.full(near.size, i, dtype=np.int64))
        pair_offset.append(diff[near])
    return SceneGeometry(
        seed_idx=seed_idx,
        seed_xyz=seeds,
        pair_seed=np.concatenate(pair_seed),
        pair_offset=np.vstack(pair_offset),
    )


# ---------------------------------------------------------------------------
# parameters


@dataclass
class DetectorParams:
    bb_w1: Tensor
    bb_b1: Tensor
    bb_w2: Tensor
    bb_b2: Tensor
    rff_freq: np.ndarray   # (F, 3) fixed random frequencies, never trained
    rff_phase: np.ndarray  # (F,)
    vote_w1: Tensor
    vote_b1: Tensor
    vote_w2: Tensor
    vote_b2: Tensor
    trunk_w1: Tensor
    trunk_b1: Tensor
    trunk_w2: Tensor
    trunk_b2: Tensor
    obj_w: Tensor
    obj_b: Tensor
    cls_w: Tensor   # (1 + C, D): background row 0, one row per class after,
    cls_b: Tensor   # (1 + C,)   and the table grows by appending rows
    box_w: Tensor
    box_b: Tensor

    def parameters(self):
        return [self.bb_w1, self.bb_b1, self.bb_w2, self.bb_b2,
                self.vote_w1, self.vote_b1, self.vote_w2, self.vote_b2,
                self.trunk_w1, self.trunk_b1, self.trunk_w2, self.trunk_b2,
                self.obj_w, self.obj_b, self.cls_w, self.cls_b,
                self.box_w, self.box_b]

    def num_classes(self) -> int:
        # row 0 of the class table is the background bucket, not a class
        return int(self.cls_w.data.shape[0]) - 1

    def copy(self, requires_grad: bool) -> "DetectorParams":
        fields = {}
        for name in self.__dataclass_fields__:
            t = getattr(self, name)
            if isinstance(t, Tensor):
                fields[name] = Tensor(t.data.copy(), requires_grad=requires_grad)
            else:
                fields[name] = t.copy()
        return DetectorParams(**fields)


def init_detector(rng: SeededRng, dim: int, num_classes: int,
                  initial_size: float = 0.35) -> DetectorParams:
    def he(shape, fan_in):
        return Tensor(rng.normal(shape, 0.0, (2.0 / fan_in) ** 0.5), requires_grad=True)

    box_b = np.zeros(6)
    box_b[3:] = np.log(initial_size)  # decoded size starts at a plausible extent
    # half the seed feature is a fixed random Fourier bank over the local
    # offsets; pooled cosines estimate the neighborhood's characteristic
    # function, a shape signature that exists for classes never trained on.
    # frequency scale ~ pi / neighborhood radius so phases actually vary.
    n_fixed = dim // 2
    head_in = dim + 6 + PROFILE_DIM
    return DetectorParams(
        bb_w1=he((6, dim), 6), bb_b1=Tensor(np.zeros(dim), requires_grad=True),
        bb_w2=he((dim, dim - n_fixed), dim),
        bb_b2=Tensor(np.zeros(dim - n_fixed), requires_grad=True),
        rff_freq=rng.normal((n_fixed, 3), 0.0, 8.0),
        rff_phase=rng.uniform((n_fixed,), 0.0, 2.0 * np.pi),
        vote_w1=he((dim, dim), dim), vote_b1=Tensor(np.zeros(dim), requires_grad=True),
        # near-zero final layer: votes start at the seed positions and only
        # move once the regression asks them to
        vote_w2=Tensor(rng.normal((dim, 3), 0.0, 0.01), requires_grad=True),
        vote_b2=Tensor(np.zeros(3), requires_grad=True),
        # trunk input: mean member feature, then first and second moments of
        # the member seed offsets to the anchor vote
        trunk_w1=he((dim + 6, dim), dim + 6), trunk_b1=Tensor(np.zeros(dim), requires_grad=True),
        trunk_w2=he((dim, dim), dim), trunk_b2=Tensor(np.zeros(dim), requires_grad=True),
        # the heads read the trunk output with the raw moments and the shape
        # profile appended; the appended part cannot be collapsed by earlier
        # training, so it stays readable for classes that arrive later
        obj_w=Tensor(rng.normal((head_in, 1), 0.0, 0.05), requires_grad=True),
        obj_b=Tensor(np.zeros(1), requires_grad=True),
        # class table row 0 is a background bucket trained on clusters that sit
        # on no object; it anchors the overall scale of the class logits, so a
        # later task cannot win its own positives by raising every new logit
        # everywhere and must separate along feature directions instead
        cls_w=Tensor(rng.normal((1 + num_classes, head_in), 0.0, 0.05), requires_grad=True),
        cls_b=Tensor(np.zeros(1 + num_classes), requires_grad=True),
        box_w=Tensor(rng.normal((head_in, 6), 0.0, 0.01), requires_grad=True),
        box_b=Tensor(box_b, requires_grad=True),
    )


def expand_classifier(params: DetectorParams, extra: int, rng: SeededRng) -> None:
    """Widen the class table in place; existing rows keep their exact bits."""
    if extra < 0:
        raise ContractError("the class table never shrinks")
    if extra == 0:
        return
    dim = params.cls_w.data.shape[1]
    new_rows = rng.normal((extra, dim), 0.0, 0.05)
    params.cls_w.data = np.vstack([params.cls_w.data, new_rows])
    params.cls_b.data = np.concatenate([params.cls_b.data, np.zeros(extra)])


# ---------------------------------------------------------------------------
# forward passes


def backbone_features(params: DetectorParams, geom: SceneGeometry) -> Tensor:
    """Per-seed feature: learned and fixed embeddings of the neighborhood.

    The learned half is a mean-pooled MLP over each offset and its square
    (the squares carry per-axis spread that symmetric neighborhoods would
    otherwise average away). The fixed half mean-pools a random cosine bank
    of the offsets, a training-free signature of the local point
    distribution that stays informative for never-seen classes.
    """
    off = geom.pair_offset
    offsets = Tensor(np.concatenate([off, off * off], axis=1))
    emb = ad.mlp2(offsets, params.bb_w1, params.bb_b1, params.bb_w2, params.bb_b2)
    fixed = Tensor(np.cos(off @ params.rff_freq.T + params.rff_phase))
    both = ad.concat([emb, fixed], axis=1)
    return ad.segment_mean(both, geom.pair_seed, geom.seed_xyz.shape[0])


def vote_centers(params: DetectorParams, seed_features: Tensor,
                 seed_xyz: np.ndarray) -> Tensor:
    """Each seed votes for the center of the object it sits on.

    Surface seeds of one object collapse onto a common point, so clustering
    the votes instead of the raw positions gathers whole objects and leaves
    the floor behind. Offsets come from a small MLP on the seed features and
    start near zero.
    """
    offset = ad.mlp2(seed_features, params.vote_w1, params.vote_b1,
                     params.vote_w2, params.vote_b2)
    return ad.add(Tensor(seed_xyz), offset)


# stats + radial histogram + ring histogram, see shape_profile
PROFILE_DIM = 11 + 6 + 4


def shape_profile(rel: np.ndarray) -> np.ndarray:
    """Distribution statistics of points around a cluster center.

    rel holds offsets of the cluster's raw points from the anchor. The
    profile is built from the radial, cylindrical-radial and vertical
    coordinates: means, spreads, vertical skew, shell and ring ratios, and
    coarse normalized histograms. Nothing here is learned, so the profile
    describes any object the same way whether or not its class has ever
    been trained on; the heads read it alongside the learned features.
    """
    out = np.zeros(PROFILE_DIM)
    if rel.shape[0] == 0:
        return out
    s = np.sqrt(np.sum(rel * rel, axis=1))
    rho = np.sqrt(rel[:, 0] ** 2 + rel[:, 1] ** 2)
    z = rel[:, 2]
    s_max = max(float(s.max()), 1e-9)
    zc = z - z.mean()
    z_std = max(float(z.std()), 1e-9)
    out[0] = s.mean()
    out[1] = s.std()
    out[2] = rho.mean()
    out[3] = rho.std()
    out[4] = np.abs(z).mean()
    out[5] = z.std()
    out[6] = float((zc ** 3).mean()) / z_std ** 3   # apex asymmetry
    out[7] = s_max
    out[8] = float(s.min()) / s_max                 # hollow-shell ratio
    out[9] = rho.std() / max(float(rho.mean()), 1e-9)  # ring tightness
    out[10] = s.std() / max(float(s.mean()), 1e-9)
    hist_s, _ = np.histogram(s / s_max, bins=6, range=(0.0, 1.0))
    out[11:17] = hist_s / rel.shape[0]
    hist_rho, _ = np.histogram(rho / max(float(rho.max()), 1e-9), bins=4,
                               range=(0.0, 1.0))
    out[17:21] = hist_rho / rel.shape[0]
    return out


def vote_regression_loss(votes: Tensor, targets: np.ndarray, mask: np.ndarray):
    """Mean L1 between masked votes and their object centers; 0 if none."""
    idx = np.nonzero(np.asarray(mask, dtype=bool))[0]
    if idx.size == 0:
        return Tensor(np.float64(0.0))
    gap = ad.sub(ad.take_rows(votes, idx), Tensor(targets[idx]))
    return ad.mul(ad.l1_sum(gap), 1.0 / idx.size)


@dataclass
class Proposals:
    anchor_idx: np.ndarray        # (K,) into the seeds
    cluster_of_seed: np.ndarray   # (M,) anchor id each seed votes into, -1 none
    centers: Tensor               # (K, 3) decoded box centers
    sizes: Tensor                 # (K, 3) decoded box sizes
    boxes: Tensor                 # (K, 6) centers and sizes side by side
    objectness_logits: Tensor     # (K,)
    class_logits: Tensor          # (K, C)
    class_scores: Tensor          # (K, C) row softmax
    features: Tensor              # (K, D) mean-aggregated cluster features

    def num_proposals(self) -> int:
        return int(self.anchor_idx.shape[0])

    def objectness(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.objectness_logits.data))


def propose(params: DetectorParams, votes: Tensor, seed_features: Tensor,
            geom: SceneGeometry, num_proposals: int, cluster_radius: float = 0.4,
            plan=None) -> Proposals:
    """Cluster seeds in vote space and decode one box per cluster.

    Anchors are a farthest-point subset of the votes; each seed joins its
    nearest anchor if the votes agree to within cluster_radius. On a trained
    voter the seeds of one object all land near its center, so clusters are
    per-object and floor seeds stay out.

    plan, when given, is (anchor_idx, cluster_of_seed) from another forward
    pass; the clustering is reused instead of recomputed, which keeps two
    models' proposals aligned index by index on the same scene.
    """
    seed_xyz = geom.seed_xyz
    votes_np = votes.data
    if plan is None:
        anchor_idx = farthest_point_indices(votes_np, num_proposals)
        # membership is gated: a distant seed would wash the cluster feature
        # out to the scene average
        d2 = np.sum((votes_np[:, None, :] - votes_np[anchor_idx][None, :, :]) ** 2, axis=2)
        assign = np.argmin(d2, axis=1)
        near = d2[np.arange(assign.shape[0]), assign] <= cluster_radius * cluster_radius
        near[anchor_idx] = True  # an anchor always hears itself
        assign = np.where(near, assign, -1)
    else:
        anchor_idx, assign = plan
        if anchor_idx.shape[0] != num_proposals:
            raise ContractError("cluster plan disagrees with num_proposals")
    member_idx = np.nonzero(assign >= 0)[0]

    members = ad.take_rows(seed_features, member_idx)
    # each member also contributes where its surface point sits relative to
    # the anchor vote, as offset and squared offset; the first moment places
    # the anchor within the object, the second carries per-axis extent and
    # shape, neither of which survives mean pooling of the features alone
    anchors = ad.take_rows(votes, anchor_idx)
    rel = ad.sub(Tensor(seed_xyz[member_idx]),
                 ad.take_rows(anchors, assign[member_idx]))
    ext = ad.concat([members, rel, ad.mul(rel, rel)], axis=1)
    cluster_ext = ad.segment_mean(ext, assign[member_idx], num_proposals)
    trunk = ad.mlp2(cluster_ext, params.trunk_w1, params.trunk_b1,
                    params.trunk_w2, params.trunk_b2)
    dim = seed_features.data.shape[1]
    cluster = ad.take_cols(cluster_ext, np.arange(dim))

    # shape profile over the raw points that back the member seeds: for a
    # member seed s with neighbor offsets o, the point s + o sits at
    # o + (s - anchor) relative to the anchor. computed off-tape; it
    # describes geometry, it is not a function being learned
    anchor_pos = votes_np[anchor_idx]
    pair_cluster = assign[geom.pair_seed]
    valid = pair_cluster >= 0
    owner = pair_cluster[valid]
    rel_pts = (geom.pair_offset[valid]
               + seed_xyz[geom.pair_seed[valid]]
               - anchor_pos[owner])
    profile = np.zeros((num_proposals, PROFILE_DIM))
    for k in range(num_proposals):
        profile[k] = shape_profile(rel_pts[owner == k])

    moments = ad.take_cols(cluster_ext, np.arange(dim, dim + 6))
    head_in = ad.concat([trunk, moments, Tensor(profile)], axis=1)
    obj_logits = ad.reshape(ad.affine(head_in, params.obj_w, params.obj_b), (num_proposals,))
    cls_logits = ad.add_bias(ad.matmul(head_in, ad.transpose(params.cls_w)), params.cls_b)
    box_raw = ad.affine(head_in, params.box_w, params.box_b)

    delta = ad.take_cols(box_raw, np.arange(3))
    log_size = ad.take_cols(box_raw, np.arange(3, 6))
    centers = ad.add(anchors, delta)
    sizes = ad.exp(log_size)
    return Proposals(
        anchor_idx=anchor_idx,
        cluster_of_seed=assign,
        centers=centers,
        sizes=sizes,
        boxes=ad.concat([centers, sizes], axis=1),
        objectness_logits=obj_logits,
        class_logits=cls_logits,
        class_scores=ad.softmax(cls_logits, axis=1),
        features=cluster,
    )


# ---------------------------------------------------------------------------
# training targets and losses


def assign_targets(anchor_xyz: np.ndarray, gt_boxes: np.ndarray,
                   pos_radius: float = 0.3, neg_radius: float = 0.6):
    """Positive within pos_radius of a box center, negative beyond neg_radius.

    Returns (nearest_gt, positive_mask, negative_mask); the band between the
    radii is ignored by the objectness loss.
    """
    if gt_boxes.shape[0] == 0:
        k = anchor_xyz.shape[0]
        return (np.zeros(k, dtype=np.int64), np.zeros(k, dtype=bool), np.ones(k, dtype=bool))
    d2 = np.sum((anchor_xyz[:, None, :] - gt_boxes[None, :, :3]) ** 2, axis=2)
    nearest = np.argmin(d2, axis=1)
    dist = np.sqrt(d2[np.arange(anchor_xyz.shape[0]), nearest])
    return nearest, dist <= pos_radius, dist > neg_radius


def supervised_loss(props: Proposals, seed_xyz_refined: np.ndarray,
                    gt_boxes: np.ndarray, gt_classes: np.ndarray,
                    vote_loss=None, ignore_idx=None,
                    pos_radius: float = 0.3, neg_radius: float = 0.6,
                    w_obj: float = 0.5, w_box: float = 1.0, w_cls: float = 0.1,
                    w_vote: float = 1.0):
    """Objectness + box + class loss for one scene, plus the vote term.

    Assignment runs on the anchor positions (votes), not on the decoded
    centers, so the matching cannot chase its own residuals.
    vote_loss, when given, is the seed-to-center regression scalar computed
    upstream; it folds into the supervised total with weight w_vote.
    ignore_idx lists proposals to keep out of the negative objectness set:
    when labels cover only part of what is in the scene, proposals sitting
    on unlabeled-but-real objects must not be pushed toward background.
    Returns (loss tensor, dict of diagnostics).
    """
    anchor_xyz = seed_xyz_refined[props.anchor_idx]
    nearest, pos, neg = assign_targets(anchor_xyz, gt_boxes, pos_radius, neg_radius)
    k = props.num_proposals()
    if ignore_idx is not None and len(ignore_idx) > 0:
        neg = neg.copy()
        neg[np.asarray(ignore_idx, dtype=np.int64)] = False

    terms = []
    care = pos | neg
    if np.any(care):
        targets = pos.astype(np.float64)
        # balance the two sides; otherwise a handful of positives drowns in
        # background and every confidence is pushed to zero
        weights = np.zeros(k)
        if pos.any() and neg.any():
            weights[pos] = 0.5 / pos.sum()
            weights[neg] = 0.5 / neg.sum()
        else:
            weights[care] = 1.0 / care.sum()
        obj = ad.weighted_bce_logits(props.objectness_logits, targets, weights)
        terms.append(ad.mul(obj, w_obj))

    n_pos = int(pos.sum())
    if n_pos > 0:
        pos_idx = np.nonzero(pos)[0]
        pred = ad.take_rows(props.boxes, pos_idx)
        target_boxes = Tensor(gt_boxes[nearest[pos_idx]])
        box = ad.mul(ad.l1_sum(ad.sub(pred, target_boxes)), 1.0 / n_pos)
        terms.append(ad.mul(box, w_box))

        logits = ad.take_rows(props.class_logits, pos_idx)
        # +1: class table row 0 is the background bucket
        cls = ad.cross_entropy(logits, gt_classes[nearest[pos_idx]] + 1)
        terms.append(ad.mul(cls, w_cls))
    if neg.any():
        # clusters off every labeled object are labeled with the background
        # row. Weighting each by its own objectness focuses the pressure on
        # clusters that look like objects but carry no label; a plain mean
        # would let the easy floor clusters drown exactly the ones where a
        # freshly added class row could otherwise inflate its logits freely.
        neg_idx = np.nonzero(neg)[0]
        w_rows = props.objectness()[neg_idx] ** 2 + 0.02
        bg = ad.cross_entropy(ad.take_rows(props.class_logits, neg_idx),
                              np.zeros(len(neg_idx), dtype=np.int64), w_rows)
        terms.append(ad.mul(bg, w_cls))

    if vote_loss is not None:
        terms.append(ad.mul(vote_loss, w_vote))

    info = {"num_pos": n_pos, "num_neg": int(neg.sum()), "num_proposals": k,
            "positive_idx": np.nonzero(pos)[0]}
    if not terms:
        return Tensor(np.float64(0.0)), info
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total, info


# ---------------------------------------------------------------------------
# inference


def decode_and_nms(props: Proposals, objectness_threshold: float = 0.05,
                   iou_threshold: float = 0.25):
    """Scored boxes after class-wise greedy suppression.

    Proposals below the objectness gate are dropped outright. Confidence is
    objectness times the winning class score, and the survivors come back
    sorted by it, highest first. Within a class, a box is dropped when it
    overlaps an already kept box by more than the threshold. Equal
    confidences keep proposal order.
    """
    from .metrics import iou_axis_aligned

    obj = props.objectness()
    scores = props.class_scores.data[:, 1:]  # column 0 is background
    cls_id = np.argmax(scores, axis=1)
    conf = obj * scores[np.arange(scores.shape[0]), cls_id]
    boxes = props.boxes.data
    order = np.argsort(-conf, kind="stable")

    kept = []
    kept_by_class = {}
    for i in order:
        if obj[i] <= objectness_threshold:
            continue
        c = int(cls_id[i])
        if any(iou_axis_aligned(boxes[i], boxes[j]) > iou_threshold
               for j in kept_by_class.get(c, [])):
            continue
        kept_by_class.setdefault(c, []).append(int(i))
        kept.append((c, float(conf[i]), boxes[i].copy()))
    return kept
