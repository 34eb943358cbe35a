"""AdamW with decoupled weight decay, cosine learning-rate annealing and gradient accumulation."""

from __future__ import annotations

import json
import math
import os
from typing import Callable, Sequence

import numpy as np

from .tensor import GradTape, Tensor
from .tensorfile import read_tensor_file, write_tensor_file


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; step rejected")
        self.name = name


class CheckpointShapeError(ValueError):
    pass


def cosine_lr(t: float, total: int, lr_max: float, lr_min: float) -> float:
    if total < 1:
        raise ValueError(f"total steps must be >= 1, got {total}")
    if t < 0:
        raise ValueError(f"step must be non-negative, got {t}")
    if t >= total:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


class AdamW:
    """Adam moments with bias correction; weight decay applied to the parameter directly."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr_max: float = 1e-3,
        lr_min: float = 1e-5,
        total_steps: int = 1,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = dict(params)
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.total_steps = total_steps
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def scheduled_lr(self) -> float:
        return cosine_lr(self.t, self.total_steps, self.lr_max, self.lr_min)

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                raise KeyError(f"missing gradient for {name!r}")
            if np.shape(g) != p.shape:
                raise ValueError(f"gradient for {name!r} has shape {np.shape(g)}, parameter {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(name)
        if lr is None:
            lr = self.scheduled_lr()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data[...] = p.data - lr * update


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamW, lr: float | None = None):
    """Functional spelling of :meth:`AdamW.step`; ``params`` must be the ones ``state`` owns."""
    if set(params) != set(state.params):
        raise ValueError("parameter set differs from optimizer state")
    state.step(grads, lr)
    return params


def accumulate_and_step(
    micro_batches: Sequence,
    accumulation: int,
    loss_fn: Callable,
    opt: AdamW,
    lr_fn: Callable[[AdamW], float] | None = None,
) -> list:
    """Average gradients over windows of ``accumulation`` micro-batches, one step per window.

    ``loss_fn(batch)`` returns ``(scalar Tensor, record)``; records are returned
    in micro-batch order.  A trailing short window is averaged over its own size.
    """
    if accumulation < 1:
        raise ValueError(f"accumulation must be >= 1, got {accumulation}")
    names = list(opt.params)
    tensors = [opt.params[n] for n in names]
    records = []
    for start in range(0, len(micro_batches), accumulation):
        window = micro_batches[start : start + accumulation]
        acc = {n: np.zeros_like(opt.params[n].data) for n in names}
        for batch in window:
            with GradTape() as tape:
                loss, rec = loss_fn(batch)
            for n, g in zip(names, tape.gradient(loss, tensors)):
                acc[n] += g
            records.append(rec)
        k = float(len(window))
        opt.step({n: g / k for n, g in acc.items()}, None if lr_fn is None else lr_fn(opt))
    return records


# ---------------------------------------------------------------------------
# Checkpoints: one float64 DWF1 vector plus a JSON manifest
# ---------------------------------------------------------------------------


def save_checkpoint(prefix, params: dict[str, Tensor], opt: AdamW | None = None, meta: dict | None = None) -> None:
    """Write ``<prefix>.dwf`` (flat float64) and ``<prefix>.json`` (names, shapes, offsets)."""
    chunks, entries, offset = [], [], 0
    sections = [("param", {n: p.data for n, p in params.items()})]
    if opt is not None:
        sections += [("adam_m", opt.m), ("adam_v", opt.v)]
    for section, arrays in sections:
        for name, arr in arrays.items():
            flat = np.asarray(arr, dtype=np.float64).reshape(-1)
            entries.append({"section": section, "name": name, "shape": list(np.shape(arr)), "offset": offset, "size": int(flat.size)})
            chunks.append(flat)
            offset += flat.size
    manifest = {
        "format": "DWF1-checkpoint",
        "entries": entries,
        "optimizer_step": None if opt is None else opt.t,
        "meta": meta or {},
    }
    prefix = os.fspath(prefix)
    write_tensor_file(prefix + ".dwf", np.concatenate(chunks) if chunks else np.zeros(1), dtype="<f8")
    with open(prefix + ".json", "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(prefix, expected_shapes: dict[str, tuple[int, ...]] | None = None):
    """Returns ``(params, moments, manifest)``; ``moments`` maps section -> name -> array."""
    prefix = os.fspath(prefix)
    with open(prefix + ".json") as fh:
        manifest = json.load(fh)
    flat = read_tensor_file(prefix + ".dwf", dtype="<f8", ndim=1)
    out: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for e in manifest["entries"]:
        arr = flat[e["offset"] : e["offset"] + e["size"]].reshape(e["shape"]).copy()
        out[e["section"]][e["name"]] = arr
    if expected_shapes is not None:
        got = {n: tuple(a.shape) for n, a in out["param"].items()}
        if got != {n: tuple(s) for n, s in expected_shapes.items()}:
            diffs = [
                f"{n}: checkpoint {got.get(n)} vs config {tuple(expected_shapes[n]) if n in expected_shapes else None}"
                for n in sorted(set(got) | set(expected_shapes))
                if got.get(n) != (tuple(expected_shapes[n]) if n in expected_shapes else None)
            ]
            raise CheckpointShapeError("checkpoint does not match config: " + "; ".join(diffs))
    moments = {"adam_m": out["adam_m"], "adam_v": out["adam_v"]}
    return out["param"], moments, manifest
