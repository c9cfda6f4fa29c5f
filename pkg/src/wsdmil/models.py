"""MIL heads over feature bags.

Four pooling strategies share one parameter convention (name-keyed Glorot
init, biases zero) and one output shape: 4 class logits, an instance
attention vector, a bag embedding, and optionally a sigmoid difficulty
prediction used by the multi-task objective.

  maxmil       per-instance MLP, per-class max pooling over instance logits
  abmil        attention pooling, tanh scorer
  gated_abmil  attention pooling, tanh scorer gated by a sigmoid branch
  dsmil        dual stream: instance max stream + critical-instance
               attention stream, averaged
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat_rows, take_rows
from .bags import Bag

__all__ = [
    "HEAD_KINDS",
    "N_CLASSES",
    "ModelConfig",
    "BagOutput",
    "init_model",
    "forward_bag",
    "forward_maxmil",
    "forward_abmil",
    "forward_dsmil",
    "extract_attention",
]

HEAD_KINDS = ("maxmil", "abmil", "gated_abmil", "dsmil")

N_CLASSES = 4


@dataclass(frozen=True)
class ModelConfig:
    head_kind: str
    input_dim: int
    hidden_dim: int = 256
    attention_dim: int = 128
    with_regression_head: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"unknown head {self.head_kind!r}, "
                             f"expected one of {HEAD_KINDS}")
        if min(self.input_dim, self.hidden_dim, self.attention_dim) < 1:
            raise ValueError("input_dim, hidden_dim and attention_dim must be >= 1")


@dataclass
class BagOutput:
    """Forward-pass result for one bag.

    class_logits and wsd_prediction stay attached to the graph for loss
    backprop; attention and bag_embedding are detached copies.
    """

    class_logits: Tensor
    attention: np.ndarray
    bag_embedding: np.ndarray
    wsd_prediction: Tensor | None = None

    def predicted_class(self) -> int:
        return int(np.argmax(self.class_logits.data[0]))


def _param_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    d, h, l = config.input_dim, config.hidden_dim, config.attention_dim
    if config.head_kind == "maxmil":
        shapes = {"embed.w": (d, h), "embed.b": (1, h),
                  "cls.w": (h, N_CLASSES), "cls.b": (1, N_CLASSES)}
    elif config.head_kind in ("abmil", "gated_abmil"):
        shapes = {"embed.w": (d, h), "embed.b": (1, h),
                  "attn_v.w": (h, l), "attn_w.w": (l, 1),
                  "cls.w": (h, N_CLASSES), "cls.b": (1, N_CLASSES)}
        if config.head_kind == "gated_abmil":
            shapes["attn_u.w"] = (h, l)
    else:
        shapes = {"inst.w": (d, N_CLASSES), "inst.b": (1, N_CLASSES),
                  "query.w": (d, l), "query.b": (1, l),
                  "value.w": (d, h), "value.b": (1, h),
                  "bag_cls.w": (N_CLASSES, h), "bag_cls.b": (1, N_CLASSES)}
    if config.with_regression_head:
        shapes["reg.w"] = (h, 1)
        shapes["reg.b"] = (1, 1)
    return shapes


def init_model(config: ModelConfig) -> dict[str, Tensor]:
    """Deterministic Glorot-uniform weights and zero biases.

    Each parameter draws from its own stream keyed by (init_seed, name),
    so enabling the regression head never shifts the other weights.
    """
    params: dict[str, Tensor] = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            rng = np.random.default_rng([config.init_seed, zlib.crc32(name.encode())])
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, name=name)
    return params


def _check_dim(params: dict[str, Tensor], first_layer: str, features: np.ndarray):
    want = params[first_layer].shape[0]
    if features.shape[1] != want:
        raise ValueError(f"bag feature dim {features.shape[1]} does not match "
                         f"model input dim {want}")


def _regress(params: dict[str, Tensor], pooled: Tensor) -> Tensor | None:
    if "reg.w" not in params:
        return None
    return (pooled @ params["reg.w"] + params["reg.b"]).sigmoid()


def _minmax(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; constant input maps to 0.5, except a
    single value which is a trivially dominant instance and maps to 1.0."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 1:
        return np.ones(1)
    lo, hi = values.min(), values.max()
    if hi - lo == 0.0:
        return np.full(values.shape, 0.5)
    return (values - lo) / (hi - lo)


def forward_maxmil(params: dict[str, Tensor], features: np.ndarray) -> BagOutput:
    """Instance-level MLP with per-class max pooling of instance logits."""
    _check_dim(params, "embed.w", features)
    x = Tensor(features, name="features")
    hidden = (x @ params["embed.w"] + params["embed.b"]).relu()   # (n, H)
    inst_logits = hidden @ params["cls.w"] + params["cls.b"]      # (n, 4)
    logits = inst_logits.max_rows()                               # (1, 4)
    pooled = hidden.mean_rows()                                   # (1, H)
    scores = inst_logits.data.max(axis=1)
    return BagOutput(class_logits=logits,
                     attention=_minmax(scores),
                     bag_embedding=pooled.data[0].copy(),
                     wsd_prediction=_regress(params, pooled))


def forward_abmil(params: dict[str, Tensor], features: np.ndarray,
                  gated: bool = False) -> BagOutput:
    """Attention pooling over embedded instances, optionally gated."""
    _check_dim(params, "embed.w", features)
    x = Tensor(features, name="features")
    hidden = (x @ params["embed.w"] + params["embed.b"]).relu()   # (n, H)
    branch = (hidden @ params["attn_v.w"]).tanh()                 # (n, L)
    if gated:
        branch = branch * (hidden @ params["attn_u.w"]).sigmoid()
    scores = branch @ params["attn_w.w"]                          # (n, 1)
    attn = scores.transpose().softmax_rows()                      # (1, n)
    z = attn @ hidden                                             # (1, H)
    logits = z @ params["cls.w"] + params["cls.b"]                # (1, 4)
    return BagOutput(class_logits=logits,
                     attention=attn.data[0].copy(),
                     bag_embedding=z.data[0].copy(),
                     wsd_prediction=_regress(params, z))


def forward_dsmil(params: dict[str, Tensor], features: np.ndarray) -> BagOutput:
    """Dual-stream head.

    Stream 1 scores instances with a linear classifier and max-pools.
    Stream 2 finds each class's critical (top-scoring) instance, attends
    all instances against its query, and classifies the attention-pooled
    value vectors per class.  Final logits average the two streams.
    """
    _check_dim(params, "inst.w", features)
    x = Tensor(features, name="features")
    inst_logits = x @ params["inst.w"] + params["inst.b"]         # (n, 4)
    queries = x @ params["query.w"] + params["query.b"]           # (n, L)
    values = x @ params["value.w"] + params["value.b"]            # (n, H)

    crit = np.argmax(inst_logits.data, axis=0)                    # per class
    attn_rows = []
    bag_rows = []
    for c in range(N_CLASSES):
        q_crit = take_rows(queries, [int(crit[c])])               # (1, L)
        scores = (queries @ q_crit.transpose()).transpose()       # (1, n)
        attn_c = scores.softmax_rows()
        attn_rows.append(attn_c)
        bag_rows.append(attn_c @ values)                          # (1, H)
    bag_embed = concat_rows(bag_rows)                             # (4, H)
    ones = Tensor(np.ones((params["value.w"].shape[1], 1)))
    bag_logits = ((bag_embed * params["bag_cls.w"]) @ ones).transpose() \
        + params["bag_cls.b"]                                     # (1, 4)
    logits = (inst_logits.max_rows() + bag_logits).scale(0.5)

    predicted = int(np.argmax(logits.data[0]))
    pooled = bag_embed.mean_rows()                                # (1, H)
    return BagOutput(class_logits=logits,
                     attention=attn_rows[predicted].data[0].copy(),
                     bag_embedding=pooled.data[0].copy(),
                     wsd_prediction=_regress(params, pooled))


def forward_bag(params: dict[str, Tensor], config: ModelConfig, bag: Bag) -> BagOutput:
    """Dispatch a bag through the configured head."""
    if config.head_kind == "maxmil":
        return forward_maxmil(params, bag.features)
    if config.head_kind == "abmil":
        return forward_abmil(params, bag.features, gated=False)
    if config.head_kind == "gated_abmil":
        return forward_abmil(params, bag.features, gated=True)
    return forward_dsmil(params, bag.features)


def extract_attention(output: BagOutput, bag: Bag) -> list[tuple[tuple[int, int], float]]:
    """Pair patch coordinates with min-max normalized attention weights."""
    if output.attention.shape[0] != bag.n:
        raise ValueError(f"attention length {output.attention.shape[0]} does not "
                         f"match bag of {bag.n} instances")
    weights = _minmax(output.attention)
    return [((int(cx), int(cy)), float(w))
            for (cx, cy), w in zip(bag.coords, weights)]
