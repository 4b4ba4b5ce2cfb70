"""Adam, the step learning-rate schedule, evaluation, and the training loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (ManifestRecord, assemble, center_crop, epoch_plan, load_pair, read_manifest,
                   split_records)
from .losses import LossWeights, psnr, ssim, total_loss
from .model import ModelConfig, ParamStore, init_params, sdnet_forward
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

CSV_COLUMNS = ["iter", "lr", "loss_total", "loss_l1", "loss_ssim", "loss_ide", "test_psnr", "test_ssim"]


def lr_at(it: int, total: int, lr0: float = 5e-4) -> float:
    """``lr0`` until 3/5 of training, then ``lr0/10`` until 4/5, then ``lr0/100``."""
    if not 0 <= it < total:
        raise ValueError(f"iteration {it} outside [0, {total})")
    if it < -(-3 * total // 5):
        return lr0
    if it < -(-4 * total // 5):
        return lr0 / 10
    return lr0 / 100


class MissingGradError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class Adam:
    """Adam with bias correction. State is keyed by parameter name."""

    def __init__(self, params: Mapping[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise MissingGradError(f"no gradient for parameter {missing[0]!r}"
                                   + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.t], dtype=np.float32)}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        if "t" not in arrays:
            raise ValueError("checkpoint carries no optimizer state")
        for k, p in self.params.items():
            for buf, src in ((self.m, f"m.{k}"), (self.v, f"v.{k}")):
                if src not in arrays:
                    raise ValueError(f"optimizer state missing {src!r}")
                buf[k] = np.array(arrays[src], dtype=p.dtype).reshape(p.shape)
        self.t = int(arrays["t"][0])


def adam_step(params: Mapping[str, Tensor], state: Adam, lr: float) -> None:
    if state.params is not params:
        state.params = params
    state.step(lr)


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values()))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params.values():
            p.grad = p.grad * p.grad.dtype.type(factor)
    return total


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------

def padded_size(n: int, multiple: int) -> int:
    return -(-n // multiple) * multiple


def predict(params: Mapping[str, Tensor], cfg: ModelConfig, image: np.ndarray) -> np.ndarray:
    """Run the network on one ``[H, W, 3]`` image of any size.

    The image is reflect-padded on the bottom/right to the next multiple of
    ``patch_size * window_size`` and the output is cropped back. Unclamped.
    """
    h, w = image.shape[:2]
    mult = cfg.block.multiple
    ph, pw = padded_size(h, mult) - h, padded_size(w, mult) - w
    x = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="symmetric") if ph or pw else image
    with T.no_grad():
        out = sdnet_forward(Tensor(x), params, cfg)
    return out.data[:h, :w]


def image_metrics(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """(PSNR, SSIM) of a prediction clamped to [0, 1], computed in float64."""
    p = np.clip(np.asarray(pred, dtype=np.float64), 0.0, 1.0)
    t = np.asarray(target, dtype=np.float64)
    with T.no_grad():
        s = ssim(Tensor(p), Tensor(t)).item()
    return psnr(p, t), s


def evaluate(params: Mapping[str, Tensor], cfg: ModelConfig, records: Sequence[ManifestRecord],
             crop: int | None = None) -> tuple[float, float]:
    """Mean PSNR / SSIM over ``records``, center-cropped to ``crop`` when given."""
    ps, ss = [], []
    for rec in records:
        pair = load_pair(rec)
        rainy, clean = pair.rainy, pair.clean
        if crop is not None:
            rainy, clean = center_crop(rainy, crop, crop), center_crop(clean, crop, crop)
        p, s = image_metrics(predict(params, cfg, rainy), clean)
        ps.append(p)
        ss.append(s)
    return float(np.mean(ps)), float(np.mean(ss))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ParamStore
    metrics_path: Path
    checkpoints: list[Path] = field(default_factory=list)
    rows: list[dict] = field(default_factory=list)


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def _read_rows(path: Path, before: int) -> list[dict]:
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        return [row for row in csv.DictReader(fh) if int(row["iter"]) < before]


def train(run: RunConfig, manifest, out_dir, resume=None) -> TrainResult:
    """Train from scratch (or resume from a checkpoint) and log metrics to CSV.

    Checkpoints land in ``out_dir`` as ``ckpt_<iter>.sdn`` plus ``last.sdn``;
    the effective configuration is written to ``out_dir/config.txt``.
    """
    model_cfg = run.model_config()
    weights: LossWeights = run.loss_weights()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if run.crop % model_cfg.block.multiple:
        raise ValueError(f"crop {run.crop} is not a multiple of {model_cfg.block.multiple}")

    records = read_manifest(manifest) if not isinstance(manifest, list) else manifest
    train_recs = split_records(records, "train")
    test_recs = [r for r in records if r.split == "test"]
    (out_dir / "config.txt").write_text(run.to_text(), encoding="utf-8")

    params = init_params(model_cfg, run.seed)
    opt = Adam(params)
    start = 0
    if resume is not None:
        loaded, arrays = load_checkpoint(resume)
        if list(loaded) != list(params):
            raise ValueError(f"checkpoint {resume} does not match the model configuration")
        params = loaded
        opt = Adam(params)
        opt.load_state(arrays)
        start = opt.t

    metrics_path = out_dir / "metrics.csv"
    rows = _read_rows(metrics_path, start) if start else []
    fh = metrics_path.open("w", newline="")
    writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
    writer.writeheader()
    writer.writerows(rows)
    fh.flush()

    per_epoch = -(-len(train_recs) // run.batch)
    plan_epoch, plan = -1, []
    result = TrainResult(params, metrics_path, rows=list(rows))
    t0 = time.perf_counter()
    try:
        for it in range(start, run.total_iters):
            epoch, k = divmod(it, per_epoch)
            if epoch != plan_epoch:
                plan, plan_epoch = epoch_plan(train_recs, run.crop, run.seed, epoch), epoch
            rainy, clean = assemble(train_recs, plan[k * run.batch:(k + 1) * run.batch], run.crop)
            lr = lr_at(it, run.total_iters, run.lr0)
            parts: dict[str, float] = {}
            try:
                params.zero_grad()
                b = rainy.shape[0]
                out = sdnet_forward(T.concatenate([rainy, clean], axis=0), params, model_cfg)
                loss, parts = total_loss(out[:b], clean, params, model_cfg, weights, ide_pred=out[b:])
                if not math.isfinite(loss.item()):
                    raise NonFiniteError("loss is not finite")
                T.backward(loss)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"iteration {it}, lr {lr:g}, components {parts}: {exc}") from exc
            if run.clip_grad_norm:
                clip_grad_norm(params, run.clip_grad_norm)
            opt.step(lr)

            row = {"iter": it, "lr": _fmt(lr), "loss_total": _fmt(loss.item()),
                   **{k2: _fmt(v) for k2, v in parts.items()}, "test_psnr": "", "test_ssim": ""}
            done = it + 1
            last = done == run.total_iters
            if test_recs and ((run.eval_every and done % run.eval_every == 0) or last):
                tp, ts = evaluate(params, model_cfg, test_recs, run.crop)
                row["test_psnr"], row["test_ssim"] = _fmt(tp), _fmt(ts)
            writer.writerow(row)
            fh.flush()
            result.rows.append(row)
            if (run.checkpoint_every and done % run.checkpoint_every == 0) or last:
                path = out_dir / f"ckpt_{done:06d}.sdn"
                save_checkpoint(params, path, opt)
                save_checkpoint(params, out_dir / "last.sdn", opt)
                result.checkpoints.append(path)
            if done % 50 == 0 or last:
                log.info("iter %d/%d lr %.1e loss %.5f (%.1fs)", done, run.total_iters, lr,
                         loss.item(), time.perf_counter() - t0)
    finally:
        fh.close()
    result.params = params
    return result
