"""Semi-supervised dual-task training loop, sliding-window inference and experiments.

One iteration: draw labeled and unlabeled patches, run a single forward pass
over the whole batch, assemble the enabled loss terms, backpropagate once and
take one SGD step. Evaluation always uses the final weights.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import losses as L
from .dtrans import TransformConfig, exact_signed, t_s2r
from .errors import ConfigError, CoverageGap, NonFiniteLoss
from .metrics import evaluate_case, summarize
from .net import BRANCHES, DualNet, DualOutput, SgdState, forward, sgd_step
from .synth import Dataset, SynthConfig, crop, patch_corner
from .tensor import Tensor, backward, no_grad

LABEL_MODES = ("on_the_fly", "pre_generated")
TARGET_SOURCES = ("exact", "approx")
FLAGS = ("reg_task", "pse_sup", "ct_sup", "all_con", "ct_con", "it_con", "unified_pseudo")


@dataclass
class TrainConfig:
    max_iterations: int = 2000
    labeled_bs: int = 2
    unlabeled_bs: int = 2
    patch_size: int = 32
    stride: int = 16
    reg_task: bool = True
    pse_sup: bool = True
    ct_sup: bool = True
    all_con: bool = True
    ct_con: bool = True
    it_con: bool = True
    unified_pseudo: bool = True
    label_mode: str = "on_the_fly"
    target_source: str = "exact"
    seed: int = 0
    widths: tuple = (8, 16, 32)
    dropout: float = 0.1
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_power: float = 0.9
    grad_clip: float = 5.0  # global gradient-norm cap; 0 disables
    ramp_frac: float = 0.4

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.validate()

    def validate(self):
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.labeled_bs < 1 or self.unlabeled_bs < 0:
            raise ConfigError("need labeled_bs >= 1 and unlabeled_bs >= 0")
        step = 2 ** (len(self.widths) - 1)
        if self.patch_size < step or self.patch_size % step:
            raise ConfigError(f"patch_size must be a multiple of {step}")
        if not 1 <= self.stride <= self.patch_size:
            raise ConfigError("stride must lie in [1, patch_size]")
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"label_mode must be one of {LABEL_MODES}")
        if self.target_source not in TARGET_SOURCES:
            raise ConfigError(f"target_source must be one of {TARGET_SOURCES}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0 \
                or self.grad_clip < 0:
            raise ConfigError("invalid optimizer settings")
        if not 0 <= self.ramp_frac <= 1:
            raise ConfigError("ramp_frac must lie in [0, 1]")
        if self.uses_unlabeled and self.unlabeled_bs < 1:
            raise ConfigError("unsupervised losses need unlabeled_bs >= 1")

    # effective switches: all_con gates both consistency terms, reg_task gates
    # everything that touches the regression heads
    @property
    def it_con_on(self):
        return self.all_con and self.it_con

    @property
    def ct_con_on(self):
        return self.all_con and self.ct_con and self.reg_task

    @property
    def ct_sup_on(self):
        return self.ct_sup and self.reg_task

    @property
    def uses_unlabeled(self):
        return self.pse_sup or self.it_con_on or self.ct_con_on

    @property
    def batch_unlabeled(self):
        return self.unlabeled_bs if self.uses_unlabeled else 0

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass
class TrainBatch:
    x: np.ndarray
    y: np.ndarray
    r: np.ndarray
    labeled_mask: np.ndarray
    corners: list = field(default_factory=list)

    @property
    def n_labeled(self):
        return int(self.labeled_mask.sum())


# -- regression targets -------------------------------------------------------------
def make_regression_target(y, mode="on_the_fly", full=None, corner=None, tcfg=None,
                           source="exact"):
    """Signed-map target for a label patch.

    ``on_the_fly`` transforms the cropped patch itself. ``pre_generated``
    crops a map computed on the whole volume: pass the full mask (or its
    precomputed signed map) as ``full`` and the patch ``corner``.
    """
    y = np.asarray(y).astype(bool)
    if mode not in LABEL_MODES:
        raise ConfigError(f"label_mode must be one of {LABEL_MODES}")
    if mode == "pre_generated":
        if full is None or corner is None:
            raise ConfigError("pre_generated targets need the full volume and the corner")
        full = np.asarray(full)
        fmap = full if full.dtype.kind == "f" else _signed(full, tcfg, source)
        return crop(fmap, corner, y.shape).astype(np.float32)
    return _signed(y, tcfg, source).astype(np.float32)


def _signed(mask, tcfg, source):
    mask = np.asarray(mask).astype(bool)
    if source == "exact":
        return exact_signed(mask)
    with no_grad():
        return t_s2r(Tensor(mask.astype(np.float32)), tcfg or TransformConfig()).data


# -- batches -----------------------------------------------------------------------
class BatchSampler:
    """Per-iteration seeded patch draws over a dataset split."""

    def __init__(self, data, cfg, tcfg=None):
        self.data, self.cfg, self.tcfg = data, cfg, tcfg or TransformConfig()
        self._full = {}

    def full_target(self, i):
        if i not in self._full:
            self._full[i] = _signed(self.data[i].mask, self.tcfg,
                                    self.cfg.target_source).astype(np.float32)
        return self._full[i]

    def __call__(self, t):
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 11, int(t)])
        split = self.data.split
        lab = rng.choice(split.labeled, size=cfg.labeled_bs)
        nu = cfg.batch_unlabeled
        unl = rng.choice(split.unlabeled, size=nu) if nu else []
        xs, ys, rs, corners = [], [], [], []
        for i in list(lab) + list(unl):
            vol = self.data[int(i)]
            corner = patch_corner(vol.image.shape, cfg.patch_size, rng)
            xs.append(crop(vol.image, corner, cfg.patch_size))
            corners.append(corner)
            if len(ys) < cfg.labeled_bs:
                y = crop(vol.mask, corner, cfg.patch_size)
                ys.append(y)
                if cfg.reg_task:
                    full = self.full_target(int(i)) if cfg.label_mode == "pre_generated" else None
                    rs.append(make_regression_target(y, cfg.label_mode, full, corner,
                                                     self.tcfg, cfg.target_source))
        x = np.stack(xs)[:, None].astype(np.float32)
        y = np.stack(ys)[:, None].astype(np.float32)
        r = np.stack(rs)[:, None].astype(np.float32) if rs else None
        flags = np.zeros(len(xs), dtype=bool)
        flags[:cfg.labeled_bs] = True
        return TrainBatch(x, y, r, flags, corners)


def _rows(out, sl):
    return DualOutput(*(t[sl] for t in out.tensors()))


# -- one optimization step ------------------------------------------------------------
def compute_losses(out, batch, cfg, weights, t, tcfg=None):
    """Enabled loss terms for one forward output; returns (parts, mask_fraction, sub-terms)."""
    tcfg = tcfg or TransformConfig()
    nl = batch.n_labeled
    lab = _rows(out, slice(0, nl))
    reg = cfg.reg_task
    parts, sub = {}, {}
    parts["sup_it"] = L.sup_intra(lab, batch.y, batch.r if reg else None, weights)

    s2r = None
    if cfg.ct_sup_on or cfg.ct_con_on:
        s2r = L.branch_s2r(out, tcfg, rate=tcfg.down_rate)
    if cfg.ct_sup_on:
        lab_s2r = {br: s2r[br][0:nl] for br in BRANCHES}
        parts["sup_ct"] = L.sup_cross(lab, batch.y, batch.r, tcfg, s2r=lab_s2r, weights=weights)
    if cfg.it_con_on:
        parts["con_it"] = L.con_intra(out, reg=reg)
    if cfg.ct_con_on:
        parts["con_ct"] = L.con_cross(out, tcfg, s2r=s2r)

    mask_fraction = float("nan")
    if cfg.pse_sup:
        target = out if cfg.unified_pseudo else _rows(out, slice(nl, None))
        ybar = L.pseudo_label(target, harden=weights.harden_pseudo)
        m = L.confidence_mask(target, reg=reg)
        mask_fraction = float(m.mean())
        parts["pse"] = L.pse_loss(target, ybar, m)
    for name, term in parts.items():
        v = float(term.data)
        if not math.isfinite(v):
            raise NonFiniteLoss(name, v)
    return parts, mask_fraction, sub


def active_params(net, cfg):
    """Parameters that receive gradients under ``cfg`` (regression heads need reg_task)."""
    return [n for n in net.params if cfg.reg_task or not n.endswith((".reg.w", ".reg.b"))]


def train_step(net, batch, cfg, weights, t, opt, tcfg=None):
    """Forward, loss assembly, backward and one SGD step; returns (net, LossReport)."""
    net.train()
    net.reseed_dropout(t)
    net.zero_grad()
    out = forward(net, Tensor(batch.x))
    parts, mfrac, sub = compute_losses(out, batch, cfg, weights, t, tcfg)
    total = L.total_loss(parts, weights, t)
    tv = float(total.data)
    if not math.isfinite(tv):
        raise NonFiniteLoss("total", tv)
    backward(total)
    sgd_step(net, opt, active_params(net, cfg))
    report = L.LossReport(
        **{k: float(parts[k].data) if k in parts else 0.0 for k in L.TERMS},
        total=tv, beta=weights.beta(t), lambda_=weights.lambda_,
        mask_fraction=mfrac, parts=sub)
    return net, report


# -- inference -------------------------------------------------------------------------
def window_starts(dim, patch, stride):
    if patch > dim:
        raise CoverageGap(f"patch {patch} larger than volume extent {dim}")
    starts = list(range(0, dim - patch + 1, stride))
    if starts[-1] != dim - patch:
        starts.append(dim - patch)
    return starts


def coverage_counts(shape, patch_size, stride):
    counts = np.zeros(shape, dtype=np.int32)
    for z in window_starts(shape[0], patch_size, stride):
        for y in window_starts(shape[1], patch_size, stride):
            for x in window_starts(shape[2], patch_size, stride):
                counts[z:z + patch_size, y:y + patch_size, x:x + patch_size] += 1
    return counts


def sliding_window_predict(net, volume, patch_size, stride, batch=4):
    """Average of both segmentation branches over overlapping windows."""
    if stride > patch_size or stride < 1:
        raise CoverageGap("stride must lie in [1, patch_size]")
    vol = np.asarray(volume, dtype=np.float32)
    shape = vol.shape
    acc = np.zeros(shape, dtype=np.float64)
    counts = np.zeros(shape, dtype=np.int32)
    corners = [(z, y, x) for z in window_starts(shape[0], patch_size, stride)
               for y in window_starts(shape[1], patch_size, stride)
               for x in window_starts(shape[2], patch_size, stride)]
    was_training = net.training
    net.eval()
    try:
        with no_grad():
            for i in range(0, len(corners), batch):
                group = corners[i:i + batch]
                x = np.stack([crop(vol, c, patch_size) for c in group])[:, None]
                out = forward(net, Tensor(x))
                prob = 0.5 * (out.y_phi.data + out.y_psi.data)
                for c, p in zip(group, prob):
                    sl = tuple(slice(a, a + patch_size) for a in c)
                    acc[sl] += p[0]
                    counts[sl] += 1
    finally:
        net.training = was_training
    if (counts == 0).any():
        raise CoverageGap("some voxels were not covered by any window")
    return (acc / counts).astype(np.float32)


# -- experiments -----------------------------------------------------------------------
@dataclass
class ExperimentReport:
    config: dict
    test: dict
    unlabeled: dict
    test_cases: list
    mask_fraction: float | None
    final_loss: dict
    iterations: int
    wall_seconds: float

    def to_json(self, timing=True):
        d = asdict(self)
        if not timing:
            d.pop("wall_seconds")
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d.setdefault("wall_seconds", float("nan"))
        return cls(**{f.name: d[f.name] for f in fields(cls)})


LOSS_COLUMNS = ["iter", "lr", *L.TERMS, "total", "beta", "mask_fraction"]


def make_net(cfg):
    return DualNet(cfg.widths, seed=cfg.seed, dropout=cfg.dropout)


def make_optimizer(cfg):
    return SgdState(lr0=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                    power=cfg.lr_power, total_iters=cfg.max_iterations,
                    max_grad_norm=cfg.grad_clip or None)


def make_weights(cfg, weights=None):
    base = weights.to_dict() if weights else {}
    if base.get("ramp_len") is None:
        base["ramp_len"] = int(round(cfg.ramp_frac * cfg.max_iterations))
    return L.LossWeights(**base)


def train(cfg, data=None, tcfg=None, weights=None, on_step=None):
    """Run ``cfg.max_iterations`` steps; returns (net, list of LossReport)."""
    data = data or Dataset()
    tcfg = tcfg or TransformConfig()
    weights = weights or make_weights(cfg)
    net = make_net(cfg)
    opt = make_optimizer(cfg)
    sampler = BatchSampler(data, cfg, tcfg)
    history = []
    for t in range(cfg.max_iterations):
        _, rep = train_step(net, sampler(t), cfg, weights, t, opt, tcfg)
        history.append(rep)
        if on_step is not None:
            on_step(t, rep, opt)
    return net, history


def evaluate(net, data, ids, cfg):
    cases, preds = [], {}
    for i in ids:
        vol = data[i]
        prob = sliding_window_predict(net, vol.image, cfg.patch_size, cfg.stride)
        pred = prob >= 0.5
        preds[i] = pred
        cases.append(evaluate_case(pred, vol.mask))
    return cases, preds


def run_experiment(cfg, data=None, tcfg=None, weights=None, on_step=None):
    """Train, then score the final weights on the test and unlabeled sets."""
    start = time.perf_counter()
    data = data or Dataset()
    tcfg = tcfg or TransformConfig()
    weights = make_weights(cfg, weights)
    net, history = train(cfg, data, tcfg, weights, on_step)
    test_cases, _ = evaluate(net, data, data.split.test, cfg)
    unl_cases, _ = evaluate(net, data, data.split.unlabeled, cfg)
    unl = summarize(unl_cases)
    unl = {k: unl[k] for k in ("dice", "precision", "recall", "n_cases")}
    tail = [h.mask_fraction for h in history[-max(1, len(history) // 10):]
            if not math.isnan(h.mask_fraction)]
    report = ExperimentReport(
        config={"train": cfg.to_dict(), "transform": tcfg.to_dict(),
                "loss": weights.to_dict(), "synth": data.cfg.to_dict()},
        test=summarize(test_cases),
        unlabeled=unl,
        test_cases=[c.to_dict() for c in test_cases],
        mask_fraction=float(np.mean(tail)) if tail else None,
        final_loss={k: v for k, v in history[-1].row().items()
                    if not (isinstance(v, float) and math.isnan(v))},
        iterations=len(history),
        wall_seconds=time.perf_counter() - start,
    )
    return net, history, report


def baseline_config(cfg):
    """Labeled-only counterpart of ``cfg``: segmentation supervision alone."""
    d = cfg.to_dict()
    d.update(reg_task=False, pse_sup=False, ct_sup=False, all_con=False,
             ct_con=False, it_con=False)
    return TrainConfig(**d)


__all__ = ["TrainConfig", "TrainBatch", "BatchSampler", "ExperimentReport", "FLAGS",
           "make_regression_target", "compute_losses", "train_step", "train",
           "sliding_window_predict", "coverage_counts", "window_starts", "evaluate",
           "run_experiment", "baseline_config", "make_net", "make_optimizer",
           "make_weights", "active_params", "SynthConfig", "LOSS_COLUMNS"]
