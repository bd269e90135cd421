"""Radiance field, learned semantic head, and the two primitive-derived fields."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ClassTable:
    """Semantic classes, the thing subset, the sky class and the scene's instances.

    ``instances`` lists ``(instance_id, semantic_class)`` pairs; its order
    fixes the columns of instance distributions. Instance ids are >= 1 so
    that 0 can mean "no instance" in label maps.
    """

    names: tuple[str, ...]
    things: frozenset[int]
    sky: int
    instances: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "things", frozenset(int(t) for t in self.things))
        object.__setattr__(self, "instances", tuple((int(i), int(c)) for i, c in self.instances))
        m = len(self.names)
        if not 0 <= self.sky < m:
            raise ValueError(f"sky class {self.sky} out of range for {m} classes")
        if self.sky in self.things:
            raise ValueError("the sky class must be stuff, not a thing")
        bad = [t for t in self.things if not 0 <= t < m]
        if bad:
            raise ValueError(f"thing classes {bad} out of range for {m} classes")
        ids = [i for i, _ in self.instances]
        if len(set(ids)) != len(ids) or any(i < 1 for i in ids):
            raise ValueError("instance ids must be unique and >= 1")
        for i, c in self.instances:
            if c not in self.things:
                raise ValueError(f"instance {i} has class {c}, which is not a thing class")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def num_instances(self) -> int:
        return len(self.instances)

    @property
    def instance_ids(self) -> np.ndarray:
        return np.array([i for i, _ in self.instances], dtype=np.int64)

    @property
    def instance_classes(self) -> np.ndarray:
        return np.array([c for _, c in self.instances], dtype=np.int64)

    def instance_column(self, instance_id: int) -> int:
        for col, (i, _) in enumerate(self.instances):
            if i == instance_id:
                return col
        raise KeyError(f"unknown instance id {instance_id}")

    def is_thing(self, cls) -> np.ndarray:
        return np.isin(cls, sorted(self.things))


# ---------------------------------------------------------------------------
# positional encoding

def encode(p: np.ndarray, bands: int) -> np.ndarray:
    """Sin/cos features at frequencies ``2**k * pi``, ``k < bands``, per component.

    For input (..., D) the output is (..., D * 2 * bands), ordered
    ``sin(f0 p0), cos(f0 p0), sin(f1 p0), ...`` then the next component.
    """
    p = np.asarray(p, dtype=np.float64)
    freqs = np.pi * 2.0 ** np.arange(bands)
    ang = p[..., :, None] * freqs  # (..., D, L)
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (..., D, L, 2)
    return out.reshape(p.shape[:-1] + (p.shape[-1] * 2 * bands,))


def normalize_positions(x: np.ndarray, center: np.ndarray, half_extent: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - center) / half_extent


# ---------------------------------------------------------------------------
# networks

@dataclass(frozen=True)
class FieldConfig:
    """MLP shapes. Defaults reproduce the NeRF-style network with L=15/L=4."""

    num_classes: int = 12
    pos_bands: int = 15
    dir_bands: int = 4
    depth: int = 8
    width: int = 256
    skip: int | None = 5  # layer whose input also receives the encoded position
    color_width: int = 128
    semantic_width: int = 128

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def pos_dim(self) -> int:
        return 3 * 2 * self.pos_bands

    @property
    def dir_dim(self) -> int:
        return 3 * 2 * self.dir_bands


SEMANTIC_PREFIX = "semantic."


def _layer_shapes(cfg: FieldConfig) -> list[tuple[str, int, int, str]]:
    shapes = []
    fan_in = cfg.pos_dim
    for i in range(cfg.depth):
        if cfg.skip is not None and i == cfg.skip:
            fan_in += cfg.pos_dim
        shapes.append((f"trunk.{i}", fan_in, cfg.width, "relu"))
        fan_in = cfg.width
    shapes += [
        ("sigma", cfg.width, 1, "linear"),
        ("feature", cfg.width, cfg.width, "linear"),
        ("color.0", cfg.width + cfg.dir_dim, cfg.color_width, "relu"),
        ("color.1", cfg.color_width, 3, "linear"),
        ("semantic.0", cfg.width, cfg.semantic_width, "relu"),
        ("semantic.1", cfg.semantic_width, cfg.num_classes, "linear"),
    ]
    return shapes


def init_params(cfg: FieldConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Uniform fan-in initialisation: Kaiming bound for ReLU layers, LeCun bound for linear outputs."""
    params: dict[str, Tensor] = {}
    for name, fan_in, fan_out, act in _layer_shapes(cfg):
        bound = np.sqrt((6.0 if act == "relu" else 3.0) / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
        params[f"{name}.b"] = Tensor(np.zeros((1, fan_out)), requires_grad=True, name=f"{name}.b")
    return params


def semantic_param_names(params: Iterable[str]) -> list[str]:
    return [n for n in params if n.startswith(SEMANTIC_PREFIX)]


def radiance_param_names(params: Iterable[str]) -> list[str]:
    return [n for n in params if not n.startswith(SEMANTIC_PREFIX)]


def _linear(h: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return h @ params[f"{name}.w"] + params[f"{name}.b"]


def radiance(x_enc, d_enc, params: dict[str, Tensor], cfg: FieldConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Density, color and trunk feature for encoded positions/directions.

    Density is read off the trunk before the direction enters the network,
    so it cannot depend on the viewing direction.
    """
    x_enc = ad.as_tensor(x_enc)
    h = x_enc
    for i in range(cfg.depth):
        if cfg.skip is not None and i == cfg.skip:
            h = ad.concat([h, x_enc])
        h = ad.relu(_linear(h, params, f"trunk.{i}"))
    sigma = ad.softplus(_linear(h, params, "sigma"))[:, 0]
    feat = _linear(h, params, "feature")
    hc = ad.relu(_linear(ad.concat([feat, ad.as_tensor(d_enc)]), params, "color.0"))
    rgb = ad.sigmoid(_linear(hc, params, "color.1"))
    return sigma, rgb, h


def semantic_logits(feat: Tensor, params: dict[str, Tensor]) -> Tensor:
    h = ad.relu(_linear(feat, params, "semantic.0"))
    return _linear(h, params, "semantic.1")


def semantic_learned(feat: Tensor, params: dict[str, Tensor]) -> Tensor:
    return ad.softmax(semantic_logits(feat, params))


# ---------------------------------------------------------------------------
# primitive-derived fields

def semantic_fixed(candidates: Iterable[int], num_classes: int) -> np.ndarray:
    """One-hot for a single candidate class, uniform over several."""
    cands = sorted(set(int(c) for c in candidates))
    if not cands:
        raise ValueError("semantic_fixed: empty candidate class set")
    out = np.zeros(num_classes, dtype=np.float32)
    out[cands] = 1.0 / len(cands)
    return out


def instance_fixed(enclosing_instances: Iterable[int], classes: ClassTable) -> np.ndarray:
    """Distribution over the scene's instances for a point.

    ``enclosing_instances`` are the instance ids of the thing primitives that
    contain the point; stuff primitives contribute nothing.
    """
    out = np.zeros(classes.num_instances, dtype=np.float32)
    cols = sorted({classes.instance_column(i) for i in enclosing_instances if i})
    if cols:
        out[cols] = 1.0 / len(cols)
    return out


def fixed_fields(inside: np.ndarray, slot_cls: np.ndarray, slot_inst: np.ndarray,
                 classes: ClassTable) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched fixed semantic and instance distributions.

    ``inside`` (R, P, S) marks which interval slots enclose each sample;
    ``slot_cls`` / ``slot_inst`` (R, S) give each slot's class and instance id
    (0 for stuff or sky). Returns ``(s_fixed (R,P,M), t_fixed (R,P,Mt),
    n_candidates (R,P))``.
    """
    m = classes.num_classes
    onehot_cls = np.zeros(slot_cls.shape + (m,), dtype=np.float32)
    ok = slot_cls >= 0
    r_idx, s_idx = np.nonzero(ok)
    onehot_cls[r_idx, s_idx, slot_cls[ok]] = 1.0
    member = np.einsum("rps,rsm->rpm", inside.astype(np.float32), onehot_cls) > 0
    n_cand = member.sum(axis=-1)
    s_fixed = member / np.maximum(n_cand, 1)[..., None]

    mt = classes.num_instances
    if mt == 0:
        return s_fixed.astype(np.float32), np.zeros(inside.shape[:2] + (0,), np.float32), n_cand
    ids = classes.instance_ids
    lut = np.full(int(max(ids.max(), slot_inst.max(initial=0))) + 1, -1, dtype=np.int64)
    lut[ids] = np.arange(mt)
    cols = np.where(slot_inst > 0, lut[np.maximum(slot_inst, 0)], -1)
    onehot_inst = np.zeros(slot_inst.shape + (mt,), dtype=np.float32)
    ok = cols >= 0
    r_idx, s_idx = np.nonzero(ok)
    onehot_inst[r_idx, s_idx, cols[ok]] = 1.0
    imember = np.einsum("rps,rsm->rpm", inside.astype(np.float32), onehot_inst) > 0
    t_fixed = imember / np.maximum(imember.sum(axis=-1), 1)[..., None]
    return s_fixed.astype(np.float32), t_fixed.astype(np.float32), n_cand
