"""Training loop, evaluation, BN recalibration, checkpoints and metrics."""

from __future__ import annotations

import logging
import math
import os
import time
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from . import serialize
from .config import TrainConfig, config_hash, dump_config, load_config
from .data import Dataset, augment, batches
from .errors import DataError, FormatError, NumericalError
from .losses import (
    RepBatch,
    combine,
    cross_entropy,
    fre,
    fre_regularizer_backward,
    rep_instance,
    rep_instance_backward,
    rep_label_aware,
    rep_label_aware_backward,
)
from .models import Model, _stem_forward, backward_dual, build, forward_dual
from .optim import Adam, cosine_lr
from .tensor import Rng

log = logging.getLogger(__name__)

EVAL_MODES = ("eval_B", "eval_W", "eval_W_outdated")
METRICS_VERSION = 1
METRICS_COLUMNS = ("epoch", "lr", "ce", "rep", "acc_B", "acc_W", "fre")

# seed streams: 0 = parameter init, 1 = data order and augmentation
INIT_STREAM = 0
DATA_STREAM = 1


@dataclass
class StepResult:
    ce: float
    rep: float
    fre: float
    lr: float


def check_compatible(cfg: TrainConfig, ds: Dataset):
    if ds.num_classes != cfg.model.num_classes:
        raise DataError(f"dataset has {ds.num_classes} classes but the model is built for {cfg.model.num_classes}")
    if tuple(ds.images.shape[1:]) != cfg.model.input_shape:
        raise DataError(
            f"dataset images {tuple(ds.images.shape[1:])} do not match model.input_shape {cfg.model.input_shape}"
        )


# ---------------------------------------------------------------------------
# evaluation


def predict(model: Model, images, mode="eval_B", batch_size=500):
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}; choose from {EVAL_MODES}")
    out = []
    for start in range(0, len(images), batch_size):
        res = forward_dual(model, images[start : start + batch_size], mode)
        out.append(res.logits_b if mode == "eval_B" else res.logits_w)
    if not out:
        return np.zeros((0, model.spec.num_classes), dtype=model.dtype)
    return np.concatenate(out)


def evaluate(model: Model, dataset: Dataset, mode="eval_B", batch_size=500):
    """Top-1 accuracy in [0, 1]."""
    logits = predict(model, dataset.images, mode, batch_size)
    return float((logits.argmax(axis=1) == dataset.labels).mean())


class ChannelMoments:
    """Exact per-channel mean and biased variance over a stream of NCHW batches.

    Batches are merged with the pairwise update of Chan et al. in float64,
    so the result equals the moments of the concatenated stream.
    """

    def __init__(self):
        self.count = 0
        self.mean = None
        self.m2 = None

    def add(self, z):
        zb = z.astype(np.float64)
        n_b = zb.shape[0] * zb.shape[2] * zb.shape[3]
        mb = zb.mean(axis=(0, 2, 3))
        m2b = ((zb - mb[None, :, None, None]) ** 2).sum(axis=(0, 2, 3))
        if self.count == 0:
            self.count, self.mean, self.m2 = n_b, mb, m2b
            return
        n_a = self.count
        tot = n_a + n_b
        delta = mb - self.mean
        self.mean = self.mean + delta * (n_b / tot)
        self.m2 = self.m2 + m2b + delta * delta * (n_a * n_b / tot)
        self.count = tot

    @property
    def var(self):
        return self.m2 / self.count


def recalibrate_bn(model: Model, dataset: Dataset, n_batches, batch_size=128):
    """Recompute every stats_W from the latent branch with hard_tanh inputs.

    The first ``n_batches`` batches are streamed in dataset order. Each layer
    normalizes with its batch statistics during the stream (as in training),
    and stats_W is overwritten with the exact mean and biased variance of
    that layer's pre-normalization activations over the whole stream. A
    channel that is constant over the stream gets variance 0, and evaluation
    then divides by sqrt(eps).
    """
    if n_batches < 1:
        raise ValueError(f"n_batches must be >= 1, got {n_batches}")
    moments = [ChannelMoments() for _ in model.blocks]
    for b, (images, _) in enumerate(batches(dataset, batch_size, shuffle=False)):
        if b >= n_batches:
            break
        y, _ = _stem_forward(model, images, use_batch_stats=False, update=False)
        for blk, acc in zip(model.blocks, moments):
            y = blk.latent_forward(y, use_batch_stats=True, update_stats=False, on_bn_input=acc.add)
    for blk, acc in zip(model.blocks, moments):
        st = blk.bn.stats_W
        st.mean[...] = acc.mean
        st.var[...] = acc.var
        st.initialized = True
    return model


def fre_report(model: Model, dataset: Dataset, batch_size=128):
    """Per dual layer: FRE averaged over every element of ``dataset``.

    Both branches normalize with batch statistics (probe mode), so the table
    reflects the features as they exist during training. The final row is the
    mean over layers.
    """
    nb = len(model.blocks)
    sq = np.zeros(nb)
    n = np.zeros(nb)
    for images, _ in batches(dataset, batch_size, shuffle=False):
        res = forward_dual(model, images, "probe")
        for i, (y, yt) in enumerate(res.per_layer_pairs):
            sq[i] += fre(yt, y) * y.size
            n[i] += y.size
    rows = [(f"blocks.{i}", float(sq[i] / n[i])) for i in range(nb)]
    rows.append(("average", float(np.mean([v for _, v in rows]))))
    return rows


def write_fre_csv(rows, path):
    with open(path, "w") as f:
        f.write("layer,fre\n")
        for name, v in rows:
            f.write(f"{name},{v:.9g}\n")


def export_features(model: Model, dataset: Dataset, path, batch_size=500):
    """CSV: label, then the binary-path and latent-path penultimate features."""
    pen_b, pen_w = [], []
    for images, _ in batches(dataset, batch_size, shuffle=False):
        res = forward_dual(model, images, "eval_dual")
        pen_b.append(res.penult_b)
        pen_w.append(res.penult_w)
    pen_b = np.concatenate(pen_b)
    pen_w = np.concatenate(pen_w)
    f_dim = pen_b.shape[1]
    header = ",".join(["label"] + [f"b{i}" for i in range(f_dim)] + [f"w{i}" for i in range(f_dim)])
    table = np.concatenate([dataset.labels[:, None].astype(np.float64), pen_b, pen_w], axis=1)
    np.savetxt(path, table, delimiter=",", fmt=["%d"] + ["%.9g"] * (2 * f_dim), header=header, comments="")


# ---------------------------------------------------------------------------
# training


class Trainer:
    def __init__(self, cfg: TrainConfig, model: Model | None = None):
        self.cfg = cfg
        self.model = model if model is not None else build(cfg.model, Rng(cfg.seed, INIT_STREAM))
        self.rng = Rng(cfg.seed, DATA_STREAM)
        self.opt = Adam(
            self.model.named_parameters(),
            lr=cfg.lr0,
            weight_decay=cfg.weight_decay,
            decays=Model.decays,
        )
        self.epoch = 0
        self.history = []
        self.total_steps = None

    @property
    def params(self):
        return self.model.named_parameters()

    def _aux_loss(self, res, labels):
        """Strategy loss, gradients into the binary path, and the layer-mean FRE."""
        cfg = self.cfg
        rep, g_pen, g_proj, layer_grads = 0.0, None, None, None
        if cfg.strategy in ("instance", "label_aware"):
            if cfg.projection:
                batch = RepBatch(res.proj_b, res.proj_w, labels)
            else:
                batch = RepBatch(res.penult_b, res.penult_w, labels)
            if cfg.strategy == "instance":
                rep, g = rep_instance(batch), rep_instance_backward(batch)
            else:
                rep, g = rep_label_aware(batch), rep_label_aware_backward(batch)
            g = (cfg.lam * g).astype(self.model.dtype)
            if cfg.projection:
                g_proj = g
            else:
                g_pen = g
            aux = combine(0.0, rep, cfg.lam)
        elif cfg.strategy == "min_fre":
            rep = sum(fre(yt, y) for y, yt in res.per_layer_pairs)
            layer_grads = fre_regularizer_backward(res.per_layer_pairs, cfg.mu_fre)
            aux = cfg.mu_fre * rep
        else:
            aux = 0.0
        fre_mean = float("nan")
        if res.per_layer_pairs:
            fre_mean = float(np.mean([fre(yt, y) for y, yt in res.per_layer_pairs]))
        return rep, aux, g_pen, g_proj, layer_grads, fre_mean

    def train_step(self, images, labels, lr):
        res = forward_dual(self.model, images, "train", latent=self.cfg.uses_latent())
        ce, g_logits = cross_entropy(res.logits_b, labels)
        rep, aux, g_pen, g_proj, layer_grads, fre_mean = self._aux_loss(res, labels)
        total = ce + aux
        if not math.isfinite(total):
            raise NumericalError(f"non-finite loss at epoch {self.epoch + 1}, step {self.opt.step_count + 1}: ce={ce}, aux={aux}")
        grads = backward_dual(self.model, res, g_logits, g_pen, g_proj, layer_grads)
        params = self.params
        self.opt.step(params, grads, lr)
        if self.cfg.clamp_latent:
            for blk in self.model.blocks:
                np.clip(blk.w, -1, 1, out=blk.w)
        return StepResult(ce, float(rep), fre_mean, lr)

    def run_epoch(self, train_set: Dataset):
        cfg = self.cfg
        steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
        total = cfg.epochs * steps_per_epoch
        ce, rep, lr = [], [], 0.0
        for images, labels in batches(train_set, cfg.batch_size, self.rng, shuffle=True):
            images = augment(images, cfg.augment, self.rng)
            lr = cosine_lr(self.opt.step_count, total, cfg.lr0)
            r = self.train_step(images, labels, lr)
            ce.append(r.ce)
            rep.append(r.rep)
        self.epoch += 1
        return float(np.mean(ce)), float(np.mean(rep)), lr

    def epoch_metrics(self, test_set: Dataset, ce, rep, lr):
        m = self.model
        bs = self.cfg.eval_batch_size
        acc_b = evaluate(m, test_set, "eval_B", bs)
        acc_w = evaluate(m, test_set, "eval_W", bs) if _stats_w_ready(m) else float("nan")
        fre_avg = fre_report(m, test_set, bs)[-1][1]
        row = (self.epoch, lr, ce, rep, acc_b, acc_w, fre_avg)
        self.history.append(row)
        return row

    def fit(self, train_set: Dataset, test_set: Dataset, out_dir=None, progress=None):
        check_compatible(self.cfg, train_set)
        check_compatible(self.cfg, test_set)
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "config.ini"), "w") as f:
                f.write(dump_config(self.cfg))
        while self.epoch < self.cfg.epochs:
            t0 = time.perf_counter()
            ce, rep, lr = self.run_epoch(train_set)
            row = self.epoch_metrics(test_set, ce, rep, lr)
            log.info("epoch %d: ce %.4f rep %.4g acc_B %.4f acc_W %.4f fre %.4g (%.1fs)",
                     row[0], row[2], row[3], row[4], row[5], row[6], time.perf_counter() - t0)
            if progress is not None:
                progress(row)
            if out_dir is not None:
                write_metrics(self.history, self.cfg, os.path.join(out_dir, "metrics.csv"))
                every = self.cfg.checkpoint_every
                if every and self.epoch % every == 0 and self.epoch < self.cfg.epochs:
                    self.save(os.path.join(out_dir, f"checkpoint_epoch{self.epoch}.bnnf"))
        if out_dir is not None:
            self.save(os.path.join(out_dir, "checkpoint.bnnf"))
        return self

    # -- checkpoints --------------------------------------------------------

    def state_records(self):
        rec = OrderedDict()
        rec["config"] = np.frombuffer(dump_config(self.cfg).encode(), dtype=np.uint8)
        rec["epoch"] = np.array(self.epoch, dtype=np.int64)
        for name, p in self.params.items():
            rec[f"param/{name}"] = p
        for name, st in self.model.named_stats().items():
            rec[f"stats/{name}/mean"] = st.mean
            rec[f"stats/{name}/var"] = st.var
            rec[f"stats/{name}/initialized"] = np.array(st.initialized, dtype=np.uint8)
        rec["adam/step"] = np.array(self.opt.step_count, dtype=np.int64)
        for name in self.params:
            rec[f"adam/m/{name}"] = self.opt.m[name]
            rec[f"adam/v/{name}"] = self.opt.v[name]
        rec["rng/data"] = self.rng.get_state()
        rec["history"] = np.array(self.history, dtype=np.float64).reshape(-1, len(METRICS_COLUMNS))
        return rec

    def save(self, path):
        serialize.save(path, self.state_records(), serialize.CHECKPOINT_MAGIC)

    @classmethod
    def from_records(cls, rec):
        try:
            cfg = load_config(bytes(rec["config"]).decode())
            tr = cls(cfg)
            for name, p in tr.params.items():
                _assign(p, rec[f"param/{name}"], name)
            for name, st in tr.model.named_stats().items():
                _assign(st.mean, rec[f"stats/{name}/mean"], name)
                _assign(st.var, rec[f"stats/{name}/var"], name)
                st.initialized = bool(rec[f"stats/{name}/initialized"])
            tr.opt.step_count = int(rec["adam/step"])
            for name in tr.params:
                _assign(tr.opt.m[name], rec[f"adam/m/{name}"], name)
                _assign(tr.opt.v[name], rec[f"adam/v/{name}"], name)
            tr.rng.set_state(rec["rng/data"])
            tr.epoch = int(rec["epoch"])
            tr.history = [tuple(r) for r in rec["history"].tolist()]
        except KeyError as exc:
            raise FormatError(f"checkpoint is missing record {exc}") from None
        return tr

    @classmethod
    def load(cls, path):
        return cls.from_records(serialize.load(path, serialize.CHECKPOINT_MAGIC))


def _assign(dst, src, name):
    if dst.shape != src.shape:
        raise FormatError(f"checkpoint record {name!r} has shape {src.shape}, model expects {dst.shape}")
    dst[...] = src


def _stats_w_ready(model):
    return all(b.bn.stats_W.initialized for b in model.blocks)


def write_metrics(history, cfg, path):
    with open(path, "w") as f:
        f.write(f"# latentbnn metrics v{METRICS_VERSION} config={config_hash(cfg)}\n")
        f.write(",".join(METRICS_COLUMNS) + "\n")
        for row in history:
            f.write(f"{int(row[0])}," + ",".join(f"{v:.9g}" for v in row[1:]) + "\n")


def train(cfg: TrainConfig, train_set: Dataset, test_set: Dataset, out_dir=None, progress=None):
    return Trainer(cfg).fit(train_set, test_set, out_dir, progress)


def sweep_lambda(cfg: TrainConfig, lambdas, train_set, test_set, out_dir=None):
    """Train once per lambda; one result row per value, no auto-selection."""
    rows = []
    for lam in lambdas:
        sub = None if out_dir is None else os.path.join(out_dir, f"lambda_{lam:g}")
        tr = train(replace(cfg, lam=float(lam)), train_set, test_set, sub)
        last = tr.history[-1]
        rows.append({"lambda": float(lam), "acc_B": last[4], "acc_W": last[5], "ce": last[2], "rep": last[3]})
    return rows
