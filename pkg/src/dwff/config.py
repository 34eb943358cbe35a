"""Flat ``key = value`` run configuration.

Keys carry a module prefix (``loss.gamma = 2.0``); ``#`` starts a comment.
Defaults are the desk-scale profile.  Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .decoder import DecoderConfig, FusionMode
from .features import NUM_CLASSES
from .losses import LossConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/desk"

    data_dir: str = "data/desk"
    data_n_scenes: int = 80
    data_patch: int = 4
    data_h_p: int = 16
    data_w_p: int = 16
    data_c_in: int = 32
    data_layer_ids: tuple[int, ...] = (1, 8, 16, 24)
    data_min_classes: int = 1
    data_max_classes: int = 8
    data_noise: float = 0.12
    data_split: tuple[int, ...] = (6, 1, 1)

    model_mode: str = "DWFF"
    model_c_fus: int = 64
    model_hidden: int = 128
    model_groups: int = 8
    model_num_classes: int = NUM_CLASSES
    model_learn_temperature: bool = True
    model_swff_fixed: bool = False

    loss_lambda1: float = 0.04
    loss_lambda2: float = 0.01
    loss_alpha: float = 0.5
    loss_beta: float = 0.5
    loss_eps: float = 1.0
    loss_gamma: float = 2.0
    loss_alpha_t: float = 0.25

    optim_lr_max: float = 1e-3
    optim_lr_min: float = 1e-5
    optim_beta1: float = 0.9
    optim_beta2: float = 0.999
    optim_eps: float = 1e-8
    optim_weight_decay: float = 0.0
    optim_schedule: str = "step"

    train_epochs: int = 20
    train_batch: int = 4
    train_accum: int = 1
    train_steps: int = 0
    train_eval_split: str = "val"

    eval_split: str = "test"
    eval_batch: int = 8

    entropy_split: str = "test"
    entropy_bins: int = 20

    gradcheck_batch: int = 2
    gradcheck_h: float = 1e-5
    gradcheck_tol: float = 1e-4

    # -- derived views -----------------------------------------------------

    @property
    def m(self) -> int:
        return len(self.data_layer_ids)

    @property
    def mode(self) -> FusionMode:
        return FusionMode.parse(self.model_mode)

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            m=self.m,
            c_in=self.data_c_in,
            c_fus=self.model_c_fus,
            hidden=self.model_hidden,
            num_classes=self.model_num_classes,
            groups=self.model_groups,
            learn_temperature=self.model_learn_temperature,
            swff_fixed=self.model_swff_fixed,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            lambda1=self.loss_lambda1,
            lambda2=self.loss_lambda2,
            alpha=self.loss_alpha,
            beta=self.loss_beta,
            eps=self.loss_eps,
            gamma=self.loss_gamma,
            alpha_t=self.loss_alpha_t,
        )

    def validate(self) -> "RunConfig":
        try:
            self.decoder_config()
            self.loss_config()
            self.mode.selected(self.m)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        checks = [
            (self.seed >= 0, "seed must be non-negative"),
            (self.data_n_scenes >= 8, "data.n_scenes must be >= 8"),
            (self.data_patch >= 1, "data.patch must be positive"),
            (self.data_h_p >= 1 and self.data_w_p >= 1, "data.h_p and data.w_p must be positive"),
            (self.m >= 1, "data.layer_ids must not be empty"),
            (all(b > a for a, b in zip(self.data_layer_ids, self.data_layer_ids[1:])), "data.layer_ids must be strictly increasing"),
            (self.data_layer_ids[0] >= 1 if self.data_layer_ids else False, "data.layer_ids must be positive"),
            (1 <= self.data_min_classes <= self.data_max_classes <= NUM_CLASSES, "need 1 <= data.min_classes <= data.max_classes <= 15"),
            (self.data_max_classes <= self.data_h_p * self.data_w_p, "data.max_classes exceeds grid size"),
            (self.model_num_classes == NUM_CLASSES, "model.num_classes must be 15"),
            (len(self.data_split) == 3 and all(r >= 0 for r in self.data_split) and sum(self.data_split) > 0, "data.split needs three non-negative parts"),
            (self.data_noise >= 0, "data.noise must be non-negative"),
            (self.optim_lr_max > 0 and self.optim_lr_min >= 0, "learning rates must be positive"),
            (0 <= self.optim_beta1 < 1 and 0 <= self.optim_beta2 < 1, "betas must lie in [0, 1)"),
            (self.optim_eps > 0, "optim.eps must be positive"),
            (self.optim_weight_decay >= 0, "optim.weight_decay must be non-negative"),
            (self.optim_schedule in ("step", "epoch"), "optim.schedule must be 'step' or 'epoch'"),
            (self.train_epochs >= 0, "train.epochs must be non-negative"),
            (self.train_batch >= 1, "train.batch must be positive"),
            (self.train_accum >= 1, "train.accum must be positive"),
            (self.train_steps >= 0, "train.steps must be non-negative"),
            (self.train_eval_split in ("train", "val", "test"), "train.eval_split must name a split"),
            (self.eval_split in ("train", "val", "test"), "eval.split must name a split"),
            (self.entropy_split in ("train", "val", "test"), "entropy.split must name a split"),
            (self.eval_batch >= 1, "eval.batch must be positive"),
            (self.entropy_bins >= 1, "entropy.bins must be positive"),
            (self.gradcheck_batch >= 1, "gradcheck.batch must be positive"),
            (self.gradcheck_h > 0 and self.gradcheck_tol > 0, "gradcheck.h and gradcheck.tol must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{_key_of(f.name)} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


_PREFIXES = ("data", "model", "loss", "optim", "train", "eval", "entropy", "gradcheck")


def _key_of(attr: str) -> str:
    for p in _PREFIXES:
        if attr.startswith(p + "_"):
            return f"{p}.{attr[len(p) + 1:]}"
    return attr


def _attr_of(key: str) -> str:
    if "." in key:
        prefix, rest = key.split(".", 1)
        if prefix not in _PREFIXES or "." in rest:
            raise ConfigError(f"unknown key {key!r}")
        return f"{prefix}_{rest}"
    if key not in ("seed", "out"):
        raise ConfigError(f"unknown key {key!r}")
    return key


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_DEFAULTS = RunConfig()


def _convert(key: str, attr: str, raw: str):
    default = getattr(_DEFAULTS, attr)
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        attr = _attr_of(key)
        if attr not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if attr in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[attr] = _convert(key, attr, raw)
    cfg = dataclasses.replace(base or RunConfig(), **values)
    return cfg.validate()


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
