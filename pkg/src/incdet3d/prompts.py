"""Prompt pool and prompt-conditioned refinement of proposal seeds.

A small learnable table of prompt rows is split in half: the first half
joins the attention keys, the second half joins the values, while the seed
features serve as queries (and as the trailing key/value rows). Each head
carries its own learned query/key/value projections. The concatenated head
outputs drive two residual corrections of the seed centers, both taken
against the original centers rather than chained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, StateError
from .rng import SeededRng


class PromptPool:
    """Active prompt table plus per-task frozen snapshots."""

    def __init__(self, rng: SeededRng, num_prompts: int, dim: int, capacity: int = 64):
        if num_prompts % 2 != 0:
            raise ConfigError(f"prompt count must be even, got {num_prompts}")
        if num_prompts <= 0 or dim <= 0:
            raise ConfigError("prompt table must be non-empty")
        if capacity < 1:
            raise ConfigError("archive capacity must be positive")
        self.num_prompts = num_prompts
        self.dim = dim
        self.capacity = capacity
        self.active = Tensor(rng.normal((num_prompts, dim), 0.0, 0.1), requires_grad=True)
        self.archive = {}

    @classmethod
    def from_state(cls, active: np.ndarray, archive: dict, capacity: int = 64,
                   requires_grad: bool = True) -> "PromptPool":
        pool = cls.__new__(cls)
        pool.num_prompts, pool.dim = active.shape
        pool.capacity = capacity
        pool.active = Tensor(active.copy(), requires_grad=requires_grad)
        pool.archive = {int(k): np.asarray(v).copy() for k, v in archive.items()}
        return pool

    def select(self, task_index: int) -> Tensor:
        """Prompts to train for this task; later tasks resume from the last snapshot."""
        if task_index < 1:
            raise StateError("task indices start at 1")
        if task_index > 1:
            prev = task_index - 1
            if prev not in self.archive:
                raise StateError(f"no stored prompts for task {prev}")
            self.active.data = self.archive[prev].copy()
        return self.active

    def store(self, task_index: int) -> None:
        if task_index in self.archive:
            raise StateError(f"prompts for task {task_index} already stored")
        if len(self.archive) >= self.capacity:
            raise StateError(f"prompt archive full ({self.capacity} snapshots)")
        self.archive[task_index] = self.active.data.copy()


@dataclass
class PromptHeadParams:
    """Per-head attention projections plus the two center-correction stages."""

    attn_q: list
    attn_k: list
    attn_v: list
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    conv_w: Tensor
    conv_b: Tensor

    @property
    def num_heads(self) -> int:
        return len(self.attn_q)

    def parameters(self):
        return [*self.attn_q, *self.attn_k, *self.attn_v,
                self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2,
                self.conv_w, self.conv_b]


def init_prompt_head(rng: SeededRng, dim: int, num_heads: int, hidden: int = 64) -> PromptHeadParams:
    if dim % num_heads != 0:
        raise ConfigError(f"feature width {dim} not divisible by {num_heads} heads")
    d = dim // num_heads
    proj_scale = (1.0 / dim) ** 0.5
    attn_q, attn_k, attn_v = [], [], []
    for h in range(num_heads):
        attn_q.append(Tensor(rng.split("q", h).normal((dim, d), 0.0, proj_scale), requires_grad=True))
        attn_k.append(Tensor(rng.split("k", h).normal((dim, d), 0.0, proj_scale), requires_grad=True))
        attn_v.append(Tensor(rng.split("v", h).normal((dim, d), 0.0, proj_scale), requires_grad=True))
    # small output scales keep the initial refinement close to the identity
    return PromptHeadParams(
        attn_q=attn_q, attn_k=attn_k, attn_v=attn_v,
        mlp_w1=Tensor(rng.split("m1").normal((dim, hidden), 0.0, (2.0 / dim) ** 0.5), requires_grad=True),
        mlp_b1=Tensor(np.zeros(hidden), requires_grad=True),
        mlp_w2=Tensor(rng.split("m2").normal((hidden, 3), 0.0, 0.01), requires_grad=True),
        mlp_b2=Tensor(np.zeros(3), requires_grad=True),
        conv_w=Tensor(rng.split("cv").normal((3, 3, 3), 0.0, 0.01), requires_grad=True),
        conv_b=Tensor(np.zeros(3), requires_grad=True),
    )


def prompting_attention(features: Tensor, prompts: Tensor, params: PromptHeadParams,
                        return_weights: bool = False):
    """Multi-head attention whose keys and values are extended by prompt rows.

    features is (M, D). The first half of the prompt rows is prepended to the
    keys, the second half to the values, so each seed's attention row spans
    M + S/2 entries and decides how much stored prompt content it absorbs.
    With an empty prompt table this is plain self-attention over the seeds.

    Returns a list of per-head outputs, each (M, d); with return_weights also
    a list of detached (M, M + S/2) attention matrices.
    """
    if features.data.ndim != 2:
        raise DimensionError("features must be a matrix")
    m, dim = features.data.shape
    s = prompts.data.shape[0] if prompts.data.size else 0
    if s and (prompts.data.ndim != 2 or prompts.data.shape[1] != dim):
        raise DimensionError("prompt rows must match the feature width")
    if s % 2 != 0:
        raise ConfigError("prompt count must be even to split into key/value halves")
    if params.attn_q[0].data.shape[0] != dim:
        raise DimensionError("projection input width must match the feature width")
    d = params.attn_q[0].data.shape[1]
    scale = 1.0 / np.sqrt(d)
    if s:
        p_k = ad.take_rows(prompts, np.arange(s // 2))
        p_v = ad.take_rows(prompts, np.arange(s // 2, s))
        key_rows = ad.concat([p_k, features], axis=0)
        value_rows = ad.concat([p_v, features], axis=0)
    else:
        key_rows = features
        value_rows = features
    heads, weights = [], []
    for h in range(params.num_heads):
        q = ad.matmul(features, params.attn_q[h])
        k = ad.matmul(key_rows, params.attn_k[h])
        v = ad.matmul(value_rows, params.attn_v[h])
        attn = ad.softmax(ad.mul(ad.matmul(q, ad.transpose(k)), scale), axis=1)
        heads.append(ad.matmul(attn, v))
        if return_weights:
            weights.append(attn.data.copy())
    if return_weights:
        return heads, weights
    return heads


REFINE_GAIN = 0.25


def refine_centers(centers: Tensor, heads: list, params: PromptHeadParams):
    """Two residual corrections of the seed centers.

    The concatenated head outputs regress a per-seed offset (first stage),
    then a short convolution along the coordinate-sorted seed axis smooths
    the corrected centers into the second stage. Both stages add to the
    original centers, so zero correction weights reproduce them exactly.
    The fixed gain caps how far either stage can drag a center; unbounded
    corrections were observed to wreck cluster formation faster than the
    regression could repair them.

    Returns (stage_one, refined).
    """
    cat = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
    delta = ad.mlp2(cat, params.mlp_w1, params.mlp_b1, params.mlp_w2, params.mlp_b2)
    stage_one = ad.add(centers, ad.mul(delta, REFINE_GAIN))
    smooth = ad.conv1d_seq(stage_one, params.conv_w, params.conv_b)
    refined = ad.add(centers, ad.mul(smooth, REFINE_GAIN))
    return stage_one, refined


def pgb_loss(refined_centers: Tensor, target_centers: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean city-block distance between refined seeds and their object centers.

    Only seeds inside a ground-truth box contribute (per mask); with nothing
    flagged the loss is zero and contributes no gradient.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[0] != refined_centers.data.shape[0]:
        raise DimensionError("mask length must equal the seed count")
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return Tensor(np.float64(0.0))
    picked = ad.take_rows(refined_centers, idx)
    target = Tensor(np.asarray(target_centers, dtype=np.float64)[idx])
    return ad.mul(ad.l1_sum(ad.sub(picked, target)), 1.0 / idx.size)
