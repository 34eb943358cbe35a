"""Dataset generation, training, evaluation, ablation and gradient checking drivers."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import shutil

import numpy as np

from . import entropy_lab
from .config import RunConfig
from .decoder import ABLATION_MODES, DecoderParams, FusionMode, class_probs, forward, predict, project_level
from .features import (
    ABBREV,
    SPLITS,
    FeatureStack,
    SceneDataset,
    SurrogateBackbone,
    generate_scene,
    item_name,
    split_dataset,
    write_item,
)
from .losses import LOG_COLUMNS, LossBreakdown, total_loss
from .metrics import ClassReport, ConfusionMatrix, report
from .optim import AdamW, NonFiniteGradientError, accumulate_and_step, cosine_lr, load_checkpoint, save_checkpoint
from .tensor import Tensor, grad_check, recording

log = logging.getLogger(__name__)


class PathCollisionError(FileExistsError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step


def _write_text(path, text: str) -> None:
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(text)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index, 0xC0DE]).generate_state(1, dtype=np.uint64)[0])


def make_scene_stack(cfg: RunConfig, index: int, backbone: SurrogateBackbone | None = None):
    """Scene ``index`` of the run's synthetic corpus as ``(FeatureStack, labels)``."""
    s = scene_seed(cfg.seed, index)
    count = int(np.random.default_rng(s).integers(cfg.data_min_classes, cfg.data_max_classes + 1))
    image, labels = generate_scene(s, cfg.data_h_p, cfg.data_w_p, count, patch=cfg.data_patch, noise=cfg.data_noise)
    backbone = backbone or SurrogateBackbone(cfg.seed, cfg.data_c_in, cfg.data_patch, cfg.m)
    return backbone.features(image[None], cfg.data_layer_ids), labels


def generate_dataset(cfg: RunConfig, root, force: bool = False) -> dict[str, list[str]]:
    root = os.fspath(root)
    if os.path.exists(root) and (not os.path.isdir(root) or os.listdir(root)):
        if not force:
            raise PathCollisionError(f"{root} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(root) if os.path.isdir(root) else os.remove(root)
    os.makedirs(root, exist_ok=True)
    parts = split_dataset(cfg.data_n_scenes, cfg.data_split, cfg.seed)
    backbone = SurrogateBackbone(cfg.seed, cfg.data_c_in, cfg.data_patch, cfg.m)
    manifest = {}
    for split, ids in zip(SPLITS, parts):
        names = [item_name(i) for i in ids]
        manifest[split] = names
        for i, name in zip(ids, names):
            stack, labels = make_scene_stack(cfg, i, backbone)
            write_item(root, split, name, stack, labels)
        _write_text(os.path.join(root, f"{split}.txt"), "".join(n + "\n" for n in names))
    meta = {
        "seed": cfg.seed,
        "n_scenes": cfg.data_n_scenes,
        "layer_ids": list(cfg.data_layer_ids),
        "c_in": cfg.data_c_in,
        "h_p": cfg.data_h_p,
        "w_p": cfg.data_w_p,
        "patch": cfg.data_patch,
        "split": list(cfg.data_split),
        "sizes": {k: len(v) for k, v in manifest.items()},
    }
    _write_text(os.path.join(root, "dataset.json"), json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return manifest


class CachedDataset(SceneDataset):
    """SceneDataset that keeps decoded items in memory."""

    def __init__(self, root, split):
        super().__init__(root, split)
        self._cache: dict[str, tuple] = {}

    def load(self, name):
        if name not in self._cache:
            self._cache[name] = super().load(name)
        return self._cache[name]


def open_split(cfg: RunConfig, split: str) -> CachedDataset:
    ds = CachedDataset(cfg.data_dir, split)
    if ds.layer_ids != list(cfg.data_layer_ids):
        raise ValueError(f"dataset layer ids {ds.layer_ids} differ from config {list(cfg.data_layer_ids)}")
    if ds.meta["c_in"] != cfg.data_c_in:
        raise ValueError(f"dataset C_in {ds.meta['c_in']} differs from config {cfg.data_c_in}")
    return ds


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def batch_loss(params: DecoderParams, mode: FusionMode, stack: FeatureStack, labels, cfg: RunConfig, projected=None):
    logits, weights = forward(stack, params, mode, projected)
    l2_weights = [params[n] for n in params.l2_names(mode)]
    return total_loss(class_probs(logits), labels, weights, l2_weights, cfg.loss_config())


def evaluate(params: DecoderParams, mode: FusionMode, ds: SceneDataset, batch: int = 8) -> ConfusionMatrix:
    cm = ConfusionMatrix(params.cfg.num_classes)
    names = list(ds.ids)
    for start in range(0, len(names), batch):
        stack, labels = ds.batch(names[start : start + batch])
        pred, _ = predict(stack, params, mode)
        cm.accumulate(pred, labels)
    return cm


def micro_batches(ids: list[str], batch: int, seed: int, epoch: int) -> list[list[str]]:
    order = np.random.default_rng([seed, epoch, 0x5A1E]).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return [shuffled[i : i + batch] for i in range(0, len(shuffled), batch)]


def plan_steps(cfg: RunConfig, n_train: int) -> tuple[int, int]:
    """(optimizer steps per epoch, total optimizer steps)."""
    n_micro = math.ceil(n_train / cfg.train_batch)
    per_epoch = math.ceil(n_micro / cfg.train_accum)
    total = cfg.train_steps if cfg.train_steps > 0 else cfg.train_epochs * per_epoch
    return per_epoch, total


def train(cfg: RunConfig, out_dir, mode: FusionMode | None = None) -> dict:
    """Train one decoder; writes loss_log.csv, val_log.csv and checkpoints to ``out_dir``."""
    mode = mode or cfg.mode
    os.makedirs(out_dir, exist_ok=True)
    ds_train = open_split(cfg, "train")
    ds_val = open_split(cfg, cfg.train_eval_split)
    params = DecoderParams.init(cfg.decoder_config(), cfg.seed)
    names = params.trainable_names(mode)
    opt = AdamW(
        {n: params[n] for n in names},
        lr_max=cfg.optim_lr_max,
        lr_min=cfg.optim_lr_min,
        beta1=cfg.optim_beta1,
        beta2=cfg.optim_beta2,
        eps=cfg.optim_eps,
        weight_decay=cfg.optim_weight_decay,
    )
    per_epoch, total_steps = plan_steps(cfg, len(ds_train))
    opt.total_steps = max(total_steps, 1)
    n_epochs = cfg.train_epochs if cfg.train_steps == 0 else math.ceil(total_steps / max(per_epoch, 1))
    meta = {"mode": str(mode), "seed": cfg.seed}
    prefix = os.path.join(out_dir, "checkpoint")

    def snapshot(tag: str, extra: dict | None = None):
        save_checkpoint(f"{prefix}_{tag}", params.tensors, opt, {**meta, **(extra or {})})

    snapshot("last_good", {"epoch": 0})
    best_miou = report(evaluate(params, mode, ds_val, cfg.eval_batch)).m_iou
    snapshot("best", {"epoch": 0, "val_miou": best_miou})
    loss_rows, val_rows = [], [[0, repr(best_miou)]]

    def loss_fn(chunk):
        stack, labels = ds_train.batch(chunk)
        loss, rec = batch_loss(params, mode, stack, labels, cfg)
        if not math.isfinite(rec.total):
            raise TrainingAborted(opt.t + 1, f"non-finite loss {rec.total}")
        return loss, rec

    for epoch in range(n_epochs):
        if opt.t >= total_steps:
            break
        batches = micro_batches(ds_train.ids, cfg.train_batch, cfg.seed, epoch)
        for start in range(0, len(batches), cfg.train_accum):
            if opt.t >= total_steps:
                break
            if cfg.optim_schedule == "step":
                lr = cosine_lr(opt.t, total_steps, cfg.optim_lr_max, cfg.optim_lr_min)
            else:
                lr = cosine_lr(epoch, max(n_epochs, 1), cfg.optim_lr_max, cfg.optim_lr_min)
            window = batches[start : start + cfg.train_accum]
            try:
                parts = accumulate_and_step(window, cfg.train_accum, loss_fn, opt, lambda _opt: lr)
            except NonFiniteGradientError as exc:
                raise TrainingAborted(opt.t + 1, str(exc)) from None
            loss_rows.append(LossBreakdown.mean(parts).csv_row(opt.t))
        miou = report(evaluate(params, mode, ds_val, cfg.eval_batch)).m_iou
        val_rows.append([epoch + 1, repr(miou)])
        snapshot("last_good", {"epoch": epoch + 1})
        if miou > best_miou:
            best_miou = miou
            snapshot("best", {"epoch": epoch + 1, "val_miou": miou})
        log.info("%s epoch %d step %d val mIoU %.4f", mode, epoch + 1, opt.t, miou)

    _write_text(os.path.join(out_dir, "loss_log.csv"), _csv(LOG_COLUMNS, loss_rows))
    _write_text(os.path.join(out_dir, "val_log.csv"), _csv(["epoch", "val_miou"], val_rows))
    snapshot("final", {"steps": opt.t})
    return {"params": params, "steps": opt.t, "loss_rows": loss_rows, "best_val_miou": best_miou}


def load_params(cfg: RunConfig, prefix) -> tuple[DecoderParams, dict]:
    dcfg = cfg.decoder_config()
    arrays, _, manifest = load_checkpoint(prefix, DecoderParams.expected_shapes(dcfg))
    tensors = {n: Tensor(arrays[n], requires_grad=True, name=n) for n in DecoderParams.expected_shapes(dcfg)}
    return DecoderParams(dcfg, tensors), manifest


def write_report(out_dir, rep: ClassReport, stem: str = "metrics") -> None:
    _write_text(os.path.join(out_dir, f"{stem}.csv"), rep.to_csv())
    _write_text(os.path.join(out_dir, f"{stem}.txt"), rep.to_table())


def run_eval(cfg: RunConfig, prefix, out_dir, mode: FusionMode | None = None) -> ClassReport:
    params, manifest = load_params(cfg, prefix)
    mode = mode or FusionMode.parse(manifest["meta"].get("mode", cfg.model_mode))
    rep = report(evaluate(params, mode, open_split(cfg, cfg.eval_split), cfg.eval_batch))
    write_report(out_dir, rep)
    return rep


def run_entropy(cfg: RunConfig, prefix, out_dir, mode: FusionMode | None = None) -> list:
    params, manifest = load_params(cfg, prefix)
    mode = mode or FusionMode.parse(manifest["meta"].get("mode", cfg.model_mode))
    records = entropy_lab.collect_records(params, mode, open_split(cfg, cfg.entropy_split), cfg.eval_batch)
    entropy_lab.write_artifacts(out_dir, records, cfg.data_layer_ids, cfg.entropy_bins)
    return records


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------


def run_ablation(cfg: RunConfig, out_dir, modes=ABLATION_MODES) -> dict:
    """Train and evaluate every fusion variant with identical data, seed and schedule."""
    ds_eval = open_split(cfg, cfg.eval_split)
    summary_rows, losses, reports = [], {}, {}
    for mode in modes:
        run_dir = os.path.join(out_dir, str(mode))
        result = train(cfg, run_dir, mode)
        rep = report(evaluate(result["params"], mode, ds_eval, cfg.eval_batch))
        write_report(run_dir, rep)
        reports[str(mode)] = rep
        last = result["loss_rows"][-1] if result["loss_rows"] else None
        losses[str(mode)] = (float(last[6]), float(last[3])) if last else (math.nan, math.nan)
        summary_rows.append([str(mode), *map(repr, rep.means)])
    _write_text(os.path.join(out_dir, "ablation.csv"), _csv(["method", "mPrecision", "mRecall", "mF1", "mIoU"], summary_rows))
    header = ["class", "abbrev"]
    for name in reports:
        header += [f"{name}_f1", f"{name}_iou"]
    rows = []
    for c, ab in enumerate(ABBREV):
        row = [c, ab]
        for rep in reports.values():
            row += [repr(rep.f1[c]), repr(rep.iou[c])]
        rows.append(row)
    _write_text(os.path.join(out_dir, "ablation_per_class.csv"), _csv(header, rows))
    _write_text(
        os.path.join(out_dir, "final_losses.csv"),
        _csv(["method", "final_total", "final_seg"], [[k, repr(t), repr(s)] for k, (t, s) in losses.items()]),
    )
    flags = []
    if "DWFF" in losses and "NWFF-1" in losses and not losses["DWFF"][0] <= losses["NWFF-1"][0]:
        flags.append(f"DWFF final loss {losses['DWFF'][0]:.6f} exceeds NWFF-1 {losses['NWFF-1'][0]:.6f}")
    return {"reports": reports, "losses": losses, "flags": flags}


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


class ProjectionMemo:
    """Per-level projections reused while that level's parameters are unchanged.

    Exact memoization for untaped finite-difference passes: a level is
    recomputed whenever any of its parameter values differ from the cached key.
    """

    _PARTS = ("weight", "bias", "gn_gain", "gn_bias")

    def __init__(self, stack: FeatureStack, params: DecoderParams):
        self.stack = stack
        self.params = params
        self.keys: list[list[bytes] | None] = [None] * stack.m
        self.values: list[Tensor | None] = [None] * stack.m

    def __call__(self) -> FeatureStack:
        out = []
        for i, lvl in enumerate(self.stack.levels):
            arrs = [self.params[f"proj.{i}.{p}"].data for p in self._PARTS]
            key = self.keys[i]
            if key is None or any(a.tobytes() != k for a, k in zip(arrs, key)):
                self.values[i] = project_level(
                    lvl, *(self.params[f"proj.{i}.{p}"] for p in self._PARTS), self.params.cfg.groups
                )
                self.keys[i] = [a.tobytes() for a in arrs]
            out.append(self.values[i])
        return FeatureStack(out, list(self.stack.layer_ids))


def gradcheck_batch(cfg: RunConfig) -> tuple[FeatureStack, np.ndarray]:
    backbone = SurrogateBackbone(cfg.seed, cfg.data_c_in, cfg.data_patch, cfg.m)
    items = [make_scene_stack(cfg, i, backbone) for i in range(cfg.gradcheck_batch)]
    stack = FeatureStack(
        [Tensor(np.concatenate([it[0].levels[k].data for it in items])) for k in range(cfg.m)],
        list(cfg.data_layer_ids),
    )
    return stack, np.stack([it[1] for it in items])


def gradcheck_model(cfg: RunConfig, mode: FusionMode | None = None) -> float:
    """Max relative error of the full forward + total loss on a fresh-init micro-batch."""
    mode = mode or cfg.mode
    params = DecoderParams.init(cfg.decoder_config(), cfg.seed)
    stack, labels = gradcheck_batch(cfg)
    memo = ProjectionMemo(stack, params)
    l2_weights = [params[n] for n in params.l2_names(mode)]
    loss_cfg = cfg.loss_config()

    def f():
        logits, weights = forward(stack, params, mode, None if recording() else memo())
        return total_loss(class_probs(logits), labels, weights, l2_weights, loss_cfg)[0]

    names = params.trainable_names(mode)
    return grad_check(f, [params[n] for n in names], cfg.gradcheck_h)
