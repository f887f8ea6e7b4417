"""Self-supervised objectives and their multi-task compositions.

All losses are differentiable graph expressions over float32 tensors:

* ``info_nce`` -- instance-level contrastive loss between two views of a
  batch, cosine similarity, temperature-scaled, in-batch negatives from
  both views (self excluded).
* ``mms_pair`` / ``mms_total`` -- bidirectional masked margin softmax
  between aligned modality batches; the margin is subtracted from the
  positive logit only.
* ``recon_loss`` -- per-modality mean squared error, summed.
* ``clustering_loss`` -- softmax over dot products between fused
  embeddings and fixed centroids, margin on the assigned centroid.
* ``multitask_loss`` -- unweighted sums of the above per training method.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import MASK_NEG, Tensor
from .data import MODALITIES
from .errors import ConfigError, ContractError, ShapeError


class Method(str, Enum):
    INSTANCE_CONT = "InstanceCont"
    MULTI_CONT = "MultiCont"
    GENERATIVE = "Generative"
    CON_CLU = "ConClu"
    CON_GEN = "ConGen"
    CON_CLU_GEN = "ConCluGen"

    @property
    def uses_info_nce(self) -> bool:
        return self is Method.INSTANCE_CONT

    @property
    def uses_mms(self) -> bool:
        return self in (Method.MULTI_CONT, Method.CON_CLU, Method.CON_GEN,
                        Method.CON_CLU_GEN)

    @property
    def uses_clustering(self) -> bool:
        return self in (Method.CON_CLU, Method.CON_CLU_GEN)

    @property
    def uses_reconstruction(self) -> bool:
        return self in (Method.GENERATIVE, Method.CON_GEN, Method.CON_CLU_GEN)

    @property
    def required_modalities(self) -> tuple:
        if self is Method.INSTANCE_CONT:
            return ("video",)
        return MODALITIES

    @staticmethod
    def parse(value) -> "Method":
        if isinstance(value, Method):
            return value
        try:
            return Method(value)
        except ValueError:
            names = [m.value for m in Method]
            raise ConfigError(f"unknown method '{value}' (expected one of {names})") from None


@dataclass
class LossConfig:
    temperature: float = 0.1
    margin: float = 0.001
    normalize_embeddings: bool = True
    method: str = Method.CON_CLU_GEN.value

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.margin < 0:
            raise ConfigError(f"margin must be non-negative, got {self.margin}")
        Method.parse(self.method)


@dataclass
class LossBreakdown:
    """Total loss plus the per-objective components that produced it."""

    total: float
    components: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def feature_augment(x, seed: int, noise_sigma: float, mask_prob: float) -> Tensor:
    """Feature-space view: add Gaussian noise, then drop coordinates.

    Deterministic for a fixed seed: the noise field is drawn first, the
    keep-mask second. Gradients flow through kept coordinates only.
    """
    if noise_sigma < 0:
        raise ConfigError(f"noise_sigma must be non-negative, got {noise_sigma}")
    if not (0.0 <= mask_prob < 1.0):
        raise ConfigError(f"mask_prob must lie in [0, 1), got {mask_prob}")
    t = x if isinstance(x, Tensor) else Tensor.leaf(x)
    rng = np.random.default_rng([int(seed), 0xA6])
    noise = rng.normal(0.0, noise_sigma, size=t.shape).astype(np.float32)
    keep = (rng.random(size=t.shape) >= mask_prob).astype(np.float32)
    return ad.mul(ad.add(t, Tensor(noise)), Tensor(keep))


# ---------------------------------------------------------------------------
# contrastive losses
# ---------------------------------------------------------------------------


def _pair_check(a: Tensor, b: Tensor, op: str) -> int:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"{op} needs two equal-shape [B x d] batches, "
                         f"got {a.shape} and {b.shape}")
    return a.shape[0]


def info_nce(view_a, view_b, temperature: float = 0.1) -> Tensor:
    """Instance-level contrastive loss over two aligned views.

    Row i of the two batches must be views of the same instance. The
    anchor set is the first view; each anchor's positive is its paired
    view and its negatives are every other embedding in the joint batch.
    With a single instance there are no negatives and the loss is 0.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    a = view_a if isinstance(view_a, Tensor) else Tensor.leaf(view_a)
    b = view_b if isinstance(view_b, Tensor) else Tensor.leaf(view_b)
    n = _pair_check(a, b, "info_nce")

    joint = ad.l2_normalize_rows(ad.concat([a, b], axis=0))
    sims = ad.scale(ad.matmul(joint, ad.transpose(joint)), 1.0 / temperature)
    self_mask = np.zeros((2 * n, 2 * n), dtype=np.float32)
    np.fill_diagonal(self_mask, MASK_NEG)
    log_probs = ad.log_softmax(ad.add(sims, Tensor(self_mask)), axis=1)

    pick = np.zeros((2 * n, 2 * n), dtype=np.float32)
    for i in range(n):
        pick[i, n + i] = 1.0
    return ad.scale(ad.sum_(ad.mul(log_probs, Tensor(pick))), -1.0 / n)


def _margin_eye(n: int, margin: float) -> Tensor:
    m = np.zeros((n, n), dtype=np.float32)
    np.fill_diagonal(m, -np.float32(margin))
    return Tensor(m)


def mms_pair(emb_a, emb_b, margin: float = 0.001,
             normalize_embeddings: bool = True) -> Tensor:
    """Bidirectional masked margin softmax between two aligned batches.

    Matched rows are positives; the margin is subtracted from the
    positive logit only. One direction softmaxes each column of the
    similarity matrix over candidate rows, the other each row over
    candidate columns; the loss is the sum of both directions.
    """
    if margin < 0:
        raise ConfigError(f"margin must be non-negative, got {margin}")
    a = emb_a if isinstance(emb_a, Tensor) else Tensor.leaf(emb_a)
    b = emb_b if isinstance(emb_b, Tensor) else Tensor.leaf(emb_b)
    n = _pair_check(a, b, "mms_pair")
    if normalize_embeddings:
        a = ad.l2_normalize_rows(a)
        b = ad.l2_normalize_rows(b)

    sims = ad.add(ad.matmul(a, ad.transpose(b)), _margin_eye(n, margin))
    eye = Tensor(np.eye(n, dtype=np.float32))
    diag_col = ad.sum_(ad.mul(ad.log_softmax(sims, axis=0), eye))
    diag_row = ad.sum_(ad.mul(ad.log_softmax(sims, axis=1), eye))
    return ad.scale(ad.add(diag_col, diag_row), -1.0 / n)


def mms_total(projections: dict, margin: float = 0.001,
              normalize_embeddings: bool = True) -> Tensor:
    """Sum of pairwise masked margin softmax losses over all modality pairs."""
    missing = [m for m in MODALITIES if m not in projections]
    if missing:
        raise ContractError(f"mms_total needs all modalities, missing {missing}")
    video, text, audio = (projections[m] for m in MODALITIES)
    pair_va = mms_pair(video, audio, margin, normalize_embeddings)
    pair_vt = mms_pair(video, text, margin, normalize_embeddings)
    pair_at = mms_pair(audio, text, margin, normalize_embeddings)
    return ad.add(ad.add(pair_va, pair_vt), pair_at)


# ---------------------------------------------------------------------------
# generative and clustering losses
# ---------------------------------------------------------------------------


def recon_loss(inputs: dict, reconstructions: dict):
    """Per-modality MSE plus their sum.

    Returns ``(total, parts)`` where parts maps modality name to the
    scalar loss node for that modality.
    """
    if set(inputs) != set(reconstructions):
        raise ContractError(f"reconstruction modalities {sorted(reconstructions)} do not "
                            f"match inputs {sorted(inputs)}")
    parts = {}
    total = None
    for m in (mod for mod in MODALITIES if mod in inputs):
        x = inputs[m] if isinstance(inputs[m], Tensor) else Tensor.leaf(inputs[m])
        r = reconstructions[m]
        r = r if isinstance(r, Tensor) else Tensor.leaf(r)
        part = ad.mse(r, x)
        parts[m] = part
        total = part if total is None else ad.add(total, part)
    if total is None:
        raise ContractError("recon_loss needs at least one modality")
    return total, parts


def clustering_loss(fused, assignments, centroids, margin: float = 0.001) -> Tensor:
    """Softmax attraction of fused embeddings toward their assigned centroid.

    Centroids are constants inside the step: gradients flow only into the
    fused embeddings. With a single centroid the loss equals the margin
    exactly.
    """
    if margin < 0:
        raise ConfigError(f"margin must be non-negative, got {margin}")
    r = fused if isinstance(fused, Tensor) else Tensor.leaf(fused)
    c = np.asarray(centroids, dtype=np.float32)
    if c.ndim != 2 or c.shape[0] < 1:
        raise ContractError(f"centroids must be a non-empty [K x d] matrix, "
                            f"got shape {c.shape}")
    if c.shape[1] != r.shape[1]:
        raise ShapeError(f"centroid dim {c.shape[1]} != embedding dim {r.shape[1]}")
    n, k = r.shape[0], c.shape[0]
    idx = np.asarray(assignments, dtype=int)
    if idx.shape != (n,) or idx.min(initial=0) < 0 or idx.max(initial=0) >= k:
        raise ContractError(f"assignments must be {n} indices below {k}")

    logits = ad.matmul(r, Tensor(np.ascontiguousarray(c.T)))
    onehot = np.zeros((n, k), dtype=np.float32)
    onehot[np.arange(n), idx] = 1.0
    picked = ad.sum_(ad.mul(ad.log_softmax(logits, axis=1), Tensor(onehot)))
    return ad.add(ad.scale(picked, -1.0 / n), Tensor(np.float32(margin)))


# ---------------------------------------------------------------------------
# multi-task composition
# ---------------------------------------------------------------------------

_REQUIRED = {
    Method.INSTANCE_CONT: ("info_nce",),
    Method.MULTI_CONT: ("mms",),
    Method.GENERATIVE: ("reconstruction",),
    Method.CON_CLU: ("mms", "clustering"),
    Method.CON_GEN: ("mms", "reconstruction"),
    Method.CON_CLU_GEN: ("mms", "clustering", "reconstruction"),
}


def multitask_loss(method, mms=None, clustering=None, reconstruction=None,
                   info_nce=None):
    """Unweighted sum of the method's components, in equation order.

    Returns ``(total, breakdown)``: the loss node for backward plus a
    float breakdown whose total matches the node bit-exactly. Components
    may be scalar tensors or plain floats; components the method does not
    use are ignored.
    """
    method = Method.parse(method)
    supplied = {"mms": mms, "clustering": clustering,
                "reconstruction": reconstruction, "info_nce": info_nce}
    parts = {}
    for name in _REQUIRED[method]:
        value = supplied[name]
        if value is None:
            raise ContractError(f"method {method.value} requires component '{name}'")
        node = value if isinstance(value, Tensor) else Tensor(np.float32(value))
        if node.data.size != 1:
            raise ContractError(f"component '{name}' must be scalar, got {node.shape}")
        parts[name] = node

    total = None
    for name in _REQUIRED[method]:
        total = parts[name] if total is None else ad.add(total, parts[name])
    breakdown = LossBreakdown(total=total.item(),
                              components={k: v.item() for k, v in parts.items()})
    return total, breakdown
