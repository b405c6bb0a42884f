"""Multi-branch segmentation model: shared backbone, per-source experts and
classifiers, a compressor feeding the integration head, and an EMA teacher.

Desk-scale stand-in for a large backbone: four stride-1 3x3 conv + ReLU
blocks, experts of one 3x3 conv + ReLU, 1x1 conv classifiers. Spatial size
is preserved end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mscada import hypergraph
from mscada.tensor import Tensor, conv2d, relu

BACKBONE_DEPTH = 4


@dataclass
class ModelConfig:
    num_sources: int = 2
    backbone_channels: int = 64
    expert_channels: int = 64   # N_f
    num_union_classes: int = 6
    num_target_classes: int = 6
    height: int = 32
    width: int = 32
    ema_decay: float = 0.999
    k_spatial: int | None = None
    k_feature: int | None = None

    def __post_init__(self):
        if self.num_sources < 1:
            raise ValueError(f"num_sources must be >= 1, got {self.num_sources}")
        if self.num_target_classes > self.num_union_classes:
            raise ValueError(
                f"target classes ({self.num_target_classes}) exceed union ({self.num_union_classes})")
        if self.height < 8 or self.width < 8:
            raise ValueError(f"spatial size {self.height}x{self.width} below 8x8 minimum")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")

    @property
    def head_classes(self) -> int:
        # Equality scenario: target count equals the union count. Inclusion:
        # the head has no outputs for outlier classes.
        return self.num_target_classes


class MultiBranchModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor],
                 head: hypergraph.IntegrationHead):
        self.config = config
        self._params = params
        self.head = head

    @property
    def num_sources(self) -> int:
        return self.config.num_sources

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def set_requires_grad(self, flag: bool) -> None:
        for p in self._params.values():
            p.requires_grad = flag

    # -- forward paths -------------------------------------------------------

    def backbone(self, x: Tensor) -> Tensor:
        h = x
        for i in range(BACKBONE_DEPTH):
            h = relu(conv2d(h, self._params[f"backbone.conv{i}.w"],
                            self._params[f"backbone.conv{i}.b"]))
        return h

    def _check_branch(self, i: int) -> None:
        if not 1 <= i <= self.num_sources:
            raise IndexError(f"branch index {i} out of range 1..{self.num_sources}")

    def expert(self, i: int, backbone_feat: Tensor) -> Tensor:
        self._check_branch(i)
        return relu(conv2d(backbone_feat, self._params[f"expert.{i}.w"],
                           self._params[f"expert.{i}.b"]))

    def classify(self, i: int, expert_feat: Tensor) -> Tensor:
        self._check_branch(i)
        return conv2d(expert_feat, self._params[f"classifier.{i}.w"],
                      self._params[f"classifier.{i}.b"])

    def forward_branch(self, i: int, x: Tensor) -> Tensor:
        """Logits of branch i over the union class space, (B, N_CS, H, W)."""
        self._check_branch(i)
        return self.classify(i, self.expert(i, self.backbone(x)))

    def compress(self, backbone_feat: Tensor) -> Tensor:
        return relu(conv2d(backbone_feat, self._params["compressor.w"],
                           self._params["compressor.b"]))

    def forward_features(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        """All expert feature maps plus the compressed backbone map."""
        base = self.backbone(x)
        experts = [self.expert(i, base) for i in range(1, self.num_sources + 1)]
        return experts, self.compress(base)

    def forward_target(self, x: Tensor) -> Tensor:
        """Integration-head logits, (B, head_classes, H, W)."""
        experts, compressed = self.forward_features(x)
        return hypergraph.integrate(self.head, experts + [compressed])


def init_model(config: ModelConfig, seed: int) -> MultiBranchModel:
    """He-uniform fan-in initialization, deterministic in (config, seed)."""
    rng = np.random.default_rng(seed)

    def he_conv(out_ch, in_ch, ksize):
        fan_in = in_ch * ksize * ksize
        bound = np.sqrt(6.0 / fan_in)
        w = Tensor(rng.uniform(-bound, bound, size=(out_ch, in_ch, ksize, ksize)),
                   requires_grad=True)
        b = Tensor(np.zeros(out_ch), requires_grad=True)
        return w, b

    params: dict[str, Tensor] = {}
    cb, nf = config.backbone_channels, config.expert_channels
    in_ch = 3
    for i in range(BACKBONE_DEPTH):
        w, b = he_conv(cb, in_ch, 3)
        params[f"backbone.conv{i}.w"] = w
        params[f"backbone.conv{i}.b"] = b
        in_ch = cb
    for i in range(1, config.num_sources + 1):
        w, b = he_conv(nf, cb, 3)
        params[f"expert.{i}.w"] = w
        params[f"expert.{i}.b"] = b
    for i in range(1, config.num_sources + 1):
        w, b = he_conv(config.num_union_classes, nf, 1)
        params[f"classifier.{i}.w"] = w
        params[f"classifier.{i}.b"] = b
    w, b = he_conv(nf, cb, 3)
    params["compressor.w"] = w
    params["compressor.b"] = b
    head = hypergraph.init_integration_head(
        rng, config.num_sources, nf, config.height, config.width,
        config.head_classes, config.k_spatial, config.k_feature)
    params.update(head.parameters())
    return MultiBranchModel(config, params, head)


class EmaTeacher:
    """Parameter-for-parameter copy of the student, never receiving gradients.

    Initialized as an exact copy; updated with theta' <- m*theta' + (1-m)*theta
    after every student optimizer step.
    """

    def __init__(self, student: MultiBranchModel):
        self.model = init_model(student.config, seed=0)
        self.model.set_requires_grad(False)
        for name, p in self.model.parameters().items():
            p.data = student.parameters()[name].data.copy()

    @property
    def num_sources(self) -> int:
        return self.model.num_sources

    def parameters(self) -> dict[str, Tensor]:
        return self.model.parameters()

    def forward_branch(self, i: int, x: Tensor) -> Tensor:
        return self.model.forward_branch(i, x)

    def forward_features(self, x: Tensor):
        return self.model.forward_features(x)

    def forward_target(self, x: Tensor) -> Tensor:
        return self.model.forward_target(x)


def ema_update(teacher: EmaTeacher, student: MultiBranchModel,
               decay: float | None = None) -> None:
    """theta' <- m*theta' + (1-m)*theta over the mirrored parameter sets."""
    m = student.config.ema_decay if decay is None else decay
    t_params = teacher.parameters()
    s_params = student.parameters()
    if t_params.keys() != s_params.keys():
        missing = set(s_params) ^ set(t_params)
        raise ValueError(f"teacher/student parameter sets differ: {sorted(missing)}")
    for name, tp in t_params.items():
        sp = s_params[name]
        if tp.data.shape != sp.data.shape:
            raise ValueError(f"parameter {name} shape mismatch: {tp.data.shape} vs {sp.data.shape}")
        tp.data *= m
        tp.data += (1.0 - m) * sp.data
