"""Dynamic-weighted multi-level fusion decoder and its ablation variants."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .features import NUM_CLASSES, FeatureStack
from .tensor import Tensor

GN_EPS = 1e-5


@dataclass(frozen=True)
class FusionMode:
    """``NWFF`` (uniform over the deepest ``layers`` levels), ``SWFF`` or ``DWFF``."""

    kind: str
    layers: int | None = None

    def __post_init__(self):
        if self.kind not in ("NWFF", "SWFF", "DWFF"):
            raise ValueError(f"unknown fusion mode {self.kind!r}")
        if self.kind == "NWFF":
            if self.layers is None or not 1 <= self.layers <= 4:
                raise ValueError(f"NWFF needs a layer count in 1..4, got {self.layers}")
        elif self.layers is not None:
            raise ValueError(f"{self.kind} takes no layer count")

    @classmethod
    def parse(cls, text: str) -> "FusionMode":
        text = text.strip().upper()
        m = re.fullmatch(r"NWFF-?(\d+)", text)
        if m:
            return cls("NWFF", int(m.group(1)))
        return cls(text)

    def __str__(self) -> str:
        return f"NWFF-{self.layers}" if self.kind == "NWFF" else self.kind

    def selected(self, m: int) -> list[int]:
        """Level indices that carry weight (NWFF keeps the deepest ones)."""
        if self.kind != "NWFF":
            return list(range(m))
        if self.layers > m:
            raise ValueError(f"{self} needs at least {self.layers} levels, stack has {m}")
        return list(range(m - self.layers, m))


ABLATION_MODES = tuple(FusionMode.parse(s) for s in ("NWFF-1", "NWFF-2", "NWFF-3", "NWFF-4", "SWFF", "DWFF"))


@dataclass(frozen=True)
class DecoderConfig:
    m: int = 4
    c_in: int = 32
    c_fus: int = 64
    hidden: int = 128
    num_classes: int = NUM_CLASSES
    groups: int = 8
    learn_temperature: bool = True
    swff_fixed: bool = False

    def __post_init__(self):
        if self.c_fus % self.groups:
            raise ValueError(f"group count {self.groups} does not divide C_fus={self.c_fus}")
        for name in ("m", "c_in", "c_fus", "hidden", "num_classes", "groups"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


class DecoderParams:
    """Named decoder parameters in a fixed enumeration order."""

    def __init__(self, cfg: DecoderConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = tensors
        expected = self.expected_shapes(cfg)
        if list(tensors) != list(expected):
            raise ValueError("parameter names do not match the decoder layout")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {tensors[name].shape}")

    @staticmethod
    def expected_shapes(cfg: DecoderConfig) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for i in range(cfg.m):
            shapes[f"proj.{i}.weight"] = (cfg.c_fus, cfg.c_in)
            shapes[f"proj.{i}.bias"] = (cfg.c_fus,)
            shapes[f"proj.{i}.gn_gain"] = (cfg.c_fus,)
            shapes[f"proj.{i}.gn_bias"] = (cfg.c_fus,)
        shapes["mlp.w1"] = (cfg.hidden, cfg.m * cfg.c_fus)
        shapes["mlp.b1"] = (cfg.hidden,)
        shapes["mlp.w2"] = (cfg.m, cfg.hidden)
        shapes["mlp.b2"] = (cfg.m,)
        shapes["temp.tau"] = ()
        shapes["static_logits"] = (cfg.m,)
        shapes["head.weight"] = (cfg.num_classes, cfg.c_fus)
        shapes["head.bias"] = (cfg.num_classes,)
        return shapes

    @classmethod
    def init(cls, cfg: DecoderConfig, seed: int = 0) -> "DecoderParams":
        rng = np.random.default_rng([int(seed), 0xDEC0])
        t: dict[str, Tensor] = {}
        for name, shape in cls.expected_shapes(cfg).items():
            if name.endswith("weight") or name in ("mlp.w1", "mlp.w2"):
                arr = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), size=shape)
            elif name.endswith("gn_gain"):
                arr = np.ones(shape)
            elif name == "mlp.b1":
                arr = rng.normal(0.0, 0.1, size=shape)
            else:
                arr = np.zeros(shape)
            t[name] = Tensor(arr, requires_grad=True, name=name)
        return cls(cfg, t)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable_names(self, mode: FusionMode) -> list[str]:
        used = set(mode.selected(self.cfg.m))
        out = []
        for name in self.tensors:
            if name.startswith("proj."):
                if int(name.split(".")[1]) in used:
                    out.append(name)
            elif name.startswith("mlp."):
                if mode.kind == "DWFF":
                    out.append(name)
            elif name == "temp.tau":
                if mode.kind == "DWFF" and self.cfg.learn_temperature:
                    out.append(name)
            elif name == "static_logits":
                if mode.kind == "SWFF" and not self.cfg.swff_fixed:
                    out.append(name)
            else:
                out.append(name)
        return out

    def l2_names(self, mode: FusionMode) -> list[str]:
        """Trainable multiplicative weight matrices."""
        return [n for n in self.trainable_names(mode) if n.endswith(".weight") or n in ("mlp.w1", "mlp.w2")]

    def copy(self) -> "DecoderParams":
        return DecoderParams(
            self.cfg,
            {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.tensors.items()},
        )

    def temperature(self) -> float:
        return float(np.exp(self.tensors["temp.tau"].data))


# ---------------------------------------------------------------------------
# Forward components
# ---------------------------------------------------------------------------


def project_level(
    feat: Tensor,
    weight: Tensor,
    bias: Tensor,
    gn_gain: Tensor,
    gn_bias: Tensor,
    groups: int,
    eps: float = GN_EPS,
) -> Tensor:
    """ReLU(GroupNorm(conv1x1(feat)))."""
    c_fus = weight.shape[0]
    if c_fus % groups:
        raise ValueError(f"group count {groups} does not divide C_fus={c_fus}")
    b, _, h, w = feat.shape
    x = T.conv1x1(feat, weight) + T.reshape(bias, (1, c_fus, 1, 1))
    xg = T.reshape(x, (b, groups, (c_fus // groups) * h * w))
    mu = T.mean(xg, axes=2, keepdims=True)
    d = xg - mu
    var = T.mean(d * d, axes=2, keepdims=True)
    xhat = T.reshape(d * T.power(var + eps, -0.5), (b, c_fus, h, w))
    y = xhat * T.reshape(gn_gain, (1, c_fus, 1, 1)) + T.reshape(gn_bias, (1, c_fus, 1, 1))
    return T.relu(y)


def project_stack(stack: FeatureStack, params: DecoderParams) -> FeatureStack:
    cfg = params.cfg
    if stack.m != cfg.m:
        raise ValueError(f"stack has {stack.m} levels, decoder expects {cfg.m}")
    out = [
        project_level(
            lvl,
            params[f"proj.{i}.weight"],
            params[f"proj.{i}.bias"],
            params[f"proj.{i}.gn_gain"],
            params[f"proj.{i}.gn_bias"],
            cfg.groups,
        )
        for i, lvl in enumerate(stack.levels)
    ]
    return FeatureStack(out, list(stack.layer_ids))


def weight_scores(projected: FeatureStack, params: DecoderParams) -> Tensor:
    """GAP each level, concatenate, Linear -> ReLU -> Linear; returns B x m scores."""
    pooled = [T.mean(lvl, axes=(2, 3)) for lvl in projected.levels]
    z = T.concat(pooled, axis=1)
    h = T.relu(T.matmul(z, T.transpose(params["mlp.w1"], (1, 0))) + params["mlp.b1"])
    return T.matmul(h, T.transpose(params["mlp.w2"], (1, 0))) + params["mlp.b2"]


def compute_weights(projected: FeatureStack, params: DecoderParams, mode: FusionMode) -> Tensor:
    b, m = projected.shape[0], projected.m
    if mode.kind == "DWFF":
        temp = T.exp(params["temp.tau"])
        return T.softmax_temperature(weight_scores(projected, params), temp)
    if mode.kind == "SWFF":
        row = T.softmax(T.reshape(params["static_logits"], (1, m)), axis=1)
        return Tensor(np.ones((b, m))) * row
    w = np.zeros((b, m))
    sel = mode.selected(m)
    w[:, sel] = 1.0 / len(sel)
    return Tensor(w)


def fuse(projected: FeatureStack, weights: Tensor) -> Tensor:
    """Per-sample convex combination of the projected levels."""
    b, m = projected.shape[0], projected.m
    if weights.shape != (b, m):
        raise ValueError(f"weights shape {weights.shape} does not match batch {b} x levels {m}")
    sums = weights.data.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(weights.data < 0):
        raise ValueError(f"weight rows must be distributions, row sums {sums}")
    return T.weighted_sum(projected.levels, weights)


def head(fused: Tensor, params: DecoderParams) -> Tensor:
    c = params["head.weight"].shape[0]
    return T.conv1x1(fused, params["head.weight"]) + T.reshape(params["head.bias"], (1, c, 1, 1))


def class_probs(logits: Tensor) -> Tensor:
    return T.softmax(logits, axis=1)


def forward(
    stack: FeatureStack, params: DecoderParams, mode: FusionMode, projected: FeatureStack | None = None
) -> tuple[Tensor, Tensor]:
    """Returns ``(logits B x C x H x W, fusion weights B x m)``.

    ``projected`` short-circuits the projection stage when the caller already
    holds ``project_stack(stack, params)``.
    """
    mode.selected(stack.m)
    if projected is None:
        projected = project_stack(stack, params)
    weights = compute_weights(projected, params, mode)
    return head(fuse(projected, weights), params), weights


def predict(stack: FeatureStack, params: DecoderParams, mode: FusionMode) -> tuple[np.ndarray, np.ndarray]:
    """Argmax labels and fusion weights as plain arrays."""
    logits, weights = forward(stack, params, mode)
    return logits.data.argmax(axis=1).astype(np.uint8), weights.data
