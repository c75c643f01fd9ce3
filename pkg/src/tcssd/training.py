"""Margin-softmax loss, optimizer, learning-rate schedule and training loop.

Both countermeasures (and the toy frontend) are optimized with additive
angular margin softmax over 2 classes, Adam, and a linear-warmup /
inverse-square-root learning-rate schedule.  Training is fully
deterministic given the seed: batch composition, crops and augmentation
masks all derive from one seeded generator consumed in a fixed order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .cm_distribution import Cm2Net
from .cm_temporal import Cm1Config, Cm1Net
from .encoder import ClassWeights, EncoderConfig, FrontendNet
from .errors import DataError, TrainingError
from .frontend import AugmentPolicy, FeatureMap, random_crop, spec_augment
from .layers import init_layers

LABEL_BONAFIDE = 0
LABEL_SPOOF = 1

CM_IDS = ("cm1", "cm2", "frontend-toy")


@dataclass(frozen=True)
class AamConfig:
    margin: float = 0.4
    scale: float = 30.0
    n_classes: int = 2

    def __post_init__(self):
        if not 0.0 <= self.margin < np.pi / 2:
            raise DataError("margin must be in [0, pi/2)")
        if self.scale <= 0:
            raise DataError("scale must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    base_lr: float = 3e-4
    warmup_steps: int = 1000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_steps: int = 0          # 0: run epochs * steps_per_epoch
    crop_min_s: float = 2.0
    crop_max_s: float = 4.0
    augment: bool = False

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise DataError("epochs and batch_size must be positive")
        if self.base_lr <= 0 or self.warmup_steps <= 0:
            raise DataError("base_lr and warmup_steps must be positive")


def toy_train_config(seed: int = 0) -> TrainConfig:
    """Desk-scale settings: small batches, short warmup, 200 steps.

    A little weight decay reins in overfitting to a 200-utterance corpus.
    """
    return TrainConfig(epochs=30, batch_size=32, base_lr=1e-2, warmup_steps=20,
                       seed=seed, max_steps=200, weight_decay=1e-3)


def aam_softmax_loss(embeddings: np.ndarray, labels: np.ndarray,
                     class_weights: np.ndarray, cfg: AamConfig):
    """Additive-angular-margin softmax cross-entropy with analytic gradients.

    Embeddings and class rows are normalized to unit length; the target
    logit is s*cos(theta_y + m) while theta_y + m stays below pi (the
    standard stability branch uses s*(cos(theta_y) - m*sin(m)) otherwise);
    non-target logits are s*cos(theta_j).  Returns (mean loss, gradient on
    the raw embeddings, gradient on the raw class weights).
    """
    emb = np.asarray(embeddings)
    w = np.asarray(class_weights)
    y = np.asarray(labels, dtype=np.int64)
    b = emb.shape[0]
    rows = np.arange(b)
    norms_e = np.linalg.norm(emb, axis=1)
    if np.any(norms_e == 0):
        raise DataError("zero-norm embedding cannot be normalized")
    norms_w = np.linalg.norm(w, axis=1)
    if np.any(norms_w == 0):
        raise DataError("zero-norm class weight row")
    ehat = emb / norms_e[:, None]
    what = w / norms_w[:, None]
    cos = ehat @ what.T
    cos_y = cos[rows, y]
    sin_y = np.sqrt(np.clip(1.0 - cos_y * cos_y, 0.0, 1.0))
    cos_m = np.cos(cfg.margin)
    sin_m = np.sin(cfg.margin)
    stable = cos_y > -cos_m
    phi = np.where(stable, cos_y * cos_m - sin_y * sin_m,
                   cos_y - cfg.margin * sin_m)
    logits = cfg.scale * cos
    logits[rows, y] = cfg.scale * phi
    zmax = logits.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
    loss = float(np.mean(lse - logits[rows, y]))

    p = np.exp(logits - lse[:, None])
    g = p
    g[rows, y] -= 1.0
    g /= b
    dcos = g * cfg.scale
    dphi = np.where(stable, cos_m + sin_m * cos_y / np.maximum(sin_y, 1e-12), 1.0)
    dcos[rows, y] *= dphi
    corr_b = (dcos * cos).sum(axis=1, keepdims=True)
    demb = (dcos @ what - corr_b * ehat) / norms_e[:, None]
    corr_j = (dcos * cos).sum(axis=0)[:, None]
    dw = (dcos.T @ ehat - corr_j * what) / norms_w[:, None]
    return loss, demb, dw


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then inverse-square-root decay."""
    if step < 1:
        raise DataError(f"step must be >= 1, got {step}")
    return cfg.base_lr * min(step / cfg.warmup_steps,
                             np.sqrt(cfg.warmup_steps / step))


class Adam:
    """Adam with bias correction; updates only the given tensor names."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict, grads: dict, lr: float, trainable) -> None:
        cfg = self.cfg
        for name in sorted(trainable):
            if name not in grads:
                continue
            g = grads[name].astype(params[name].dtype, copy=False)
            if cfg.weight_decay:
                g = g + cfg.weight_decay * params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = cfg.beta1 * self.m[name] + (1 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1 - cfg.beta2) * g * g
            mhat = self.m[name] / (1 - cfg.beta1 ** t)
            vhat = self.v[name] / (1 - cfg.beta2 ** t)
            params[name] -= (lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(
                params[name].dtype, copy=False)


@dataclass
class TrainItem:
    utt_id: str
    label: int
    features: FeatureMap


@dataclass
class LogEntry:
    step: int
    lr: float
    loss: float

    def line(self) -> str:
        return f"{self.step}\t{self.lr:.10g}\t{self.loss:.10g}"


def build_checkpoint(enc_cfg: EncoderConfig, cm1_cfg: Cm1Config, seed: int,
                     init_from: Checkpoint | None = None) -> Checkpoint:
    """Fresh full checkpoint: frontend, CM1 head, CM2 head (copied tail).

    The CM2 tail (MFA conv, pooling, projection, class rows) starts as a
    copy of the frontend's own tail, mirroring retraining from pretrained
    weights.  Tensors present in ``init_from`` take precedence.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    frontend = FrontendNet(enc_cfg)
    frontend.init(rng, params)
    ClassWeights("frontend.cls", 2, enc_cfg.embed_dim).init(params, rng)
    cm1 = Cm1Net(cm1_cfg)
    init_layers(cm1.layers(), rng, params)
    ClassWeights("cm1.cls", 2, cm1_cfg.fc2_out).init(params, rng)
    for src, dst in [("frontend.mfa.conv.w", "cm2.mfa.conv.w"),
                     ("frontend.mfa.conv.b", "cm2.mfa.conv.b"),
                     ("frontend.pool.att.fc1.w", "cm2.pool.att.fc1.w"),
                     ("frontend.pool.att.fc1.b", "cm2.pool.att.fc1.b"),
                     ("frontend.pool.att.fc2.w", "cm2.pool.att.fc2.w"),
                     ("frontend.pool.att.fc2.b", "cm2.pool.att.fc2.b"),
                     ("frontend.proj.w", "cm2.proj.w"),
                     ("frontend.proj.b", "cm2.proj.b"),
                     ("frontend.cls.w", "cm2.cls.w")]:
        params[dst] = params[src].copy()
    if init_from is not None:
        for name, tensor in init_from.tensors.items():
            if name in params and params[name].shape != tensor.shape:
                raise DataError(
                    f"init checkpoint tensor {name} has shape {tensor.shape}, "
                    f"expected {params[name].shape}")
            params[name] = tensor.copy()
    config = {"encoder": _cfg_dict(enc_cfg), "cm1": _cfg_dict(cm1_cfg)}
    return Checkpoint(tensors=params, frozen_names=set(), config=config)


def _cfg_dict(cfg) -> dict:
    from dataclasses import asdict
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _feature_kind(item: TrainItem, enc_cfg: EncoderConfig) -> str:
    m = item.features.n_channels
    if enc_cfg.n_mels == enc_cfg.mfa_dim:
        raise DataError("n_mels == mfa_dim makes feature kinds ambiguous")
    if m == enc_cfg.n_mels:
        return "fbank"
    if m == enc_cfg.mfa_dim:
        return "speaker"
    raise DataError(
        f"{item.utt_id}: {m} channels match neither n_mels ({enc_cfg.n_mels}) "
        f"nor mfa_dim ({enc_cfg.mfa_dim})")


def _wrap_pad(values: np.ndarray, length: int) -> np.ndarray:
    if values.shape[0] == length:
        return values
    idx = np.arange(length) % values.shape[0]
    return values[idx]


class _BalancedSampler:
    """Class-balanced batches: half bonafide, half spoof, cyclic reshuffle."""

    def __init__(self, labels, rng: np.random.Generator):
        self.rng = rng
        self.pools = {
            LABEL_BONAFIDE: np.flatnonzero(np.asarray(labels) == LABEL_BONAFIDE),
            LABEL_SPOOF: np.flatnonzero(np.asarray(labels) == LABEL_SPOOF),
        }
        self.order = {k: rng.permutation(v) for k, v in self.pools.items()}
        self.pos = {k: 0 for k in self.pools}

    def _take(self, label: int, n: int):
        out = []
        while len(out) < n:
            if self.pos[label] >= len(self.order[label]):
                self.order[label] = self.rng.permutation(self.pools[label])
                self.pos[label] = 0
            out.append(int(self.order[label][self.pos[label]]))
            self.pos[label] += 1
        return out

    def batch(self, batch_size: int):
        n_bona = batch_size - batch_size // 2
        return self._take(LABEL_BONAFIDE, n_bona) + self._take(
            LABEL_SPOOF, batch_size // 2)


def train(cm_id: str, items: list[TrainItem], enc_cfg: EncoderConfig,
          cm1_cfg: Cm1Config, train_cfg: TrainConfig, aam_cfg: AamConfig,
          augment: AugmentPolicy | None = None, out_dir: str | None = None,
          init_ckpt: Checkpoint | None = None):
    """Train one system and return (final checkpoint, training log).

    Adam touches only the trainable tensors of the selected system; for the
    countermeasures every ``frontend.*`` tensor is frozen and recorded as
    such in the checkpoint.  A checkpoint is saved per epoch plus ``init``
    and ``final`` when ``out_dir`` is given, along with the tab-separated
    ``train.log``.
    """
    if cm_id not in CM_IDS:
        raise DataError(f"unknown system '{cm_id}', expected one of {CM_IDS}")
    if not items:
        raise DataError("empty training manifest")
    labels = np.array([it.label for it in items])
    if len(set(labels.tolist())) < 2:
        raise DataError("training manifest must contain both classes")
    kinds = {_feature_kind(it, enc_cfg) for it in items}
    if len(kinds) > 1:
        raise DataError("training manifest mixes fbank and speaker feature kinds")
    kind = kinds.pop()
    if cm_id == "frontend-toy" and kind != "fbank":
        raise DataError("frontend-toy training needs fbank-kind features")

    ckpt = build_checkpoint(enc_cfg, cm1_cfg, seed=train_cfg.seed,
                            init_from=init_ckpt)
    params = ckpt.tensors
    frontend = FrontendNet(enc_cfg)
    cm1 = Cm1Net(cm1_cfg)
    cm2 = Cm2Net(enc_cfg)
    frontend_names = set(frontend.tensor_names()) | {"frontend.cls.w"}
    if cm_id == "cm1":
        trainable = set(cm1.tensor_names())
        frozen = frontend_names
    elif cm_id == "cm2":
        trainable = set(cm2.tensor_names(with_mfa=True))
        frozen = frontend_names
    else:
        trainable = set(frontend_names)
        frozen = set()
    ckpt.frozen_names = frozen

    rng = np.random.default_rng(train_cfg.seed)
    sampler = _BalancedSampler(labels, rng)
    steps_per_epoch = max(1, int(np.ceil(len(items) / train_cfg.batch_size)))
    total_steps = train_cfg.max_steps or train_cfg.epochs * steps_per_epoch
    opt = Adam(train_cfg)
    log: list[LogEntry] = []

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(ckpt, os.path.join(out_dir, "init"))

    for step in range(1, total_steps + 1):
        idx = sampler.batch(train_cfg.batch_size)
        batch_maps = []
        for i in idx:
            f = items[i].features
            crop_seed = int(rng.integers(2 ** 31))
            f = random_crop(f, train_cfg.crop_min_s, train_cfg.crop_max_s, crop_seed)
            if kind == "fbank" and train_cfg.augment and augment is not None:
                f = spec_augment(f, augment, int(rng.integers(2 ** 31)))
            batch_maps.append(f.values)
        max_t = max(v.shape[0] for v in batch_maps)
        x = np.stack([_wrap_pad(v, max_t) for v in batch_maps]).astype(np.float32)
        y = labels[idx]

        grads: dict[str, np.ndarray] = {}
        if cm_id == "cm1":
            if kind == "fbank":
                feats, _ = frontend.forward_features(params, x)
            else:
                feats = x
            diffs = np.diff(feats, axis=1)
            emb, cache = cm1.forward(params, diffs)
            loss, demb, dw = aam_softmax_loss(emb, y, params["cm1.cls.w"], aam_cfg)
            cm1.backward(params, cache, demb, grads)
            grads["cm1.cls.w"] = dw
        elif cm_id == "cm2":
            if kind == "fbank":
                feats, fcache = frontend.forward_features(params, x, mfa_prefix="cm2")
            else:
                feats, fcache = x, None
            emb, cache = cm2.forward_tail(params, feats)
            loss, demb, dw = aam_softmax_loss(emb, y, params["cm2.cls.w"], aam_cfg)
            dfeats = cm2.backward_tail(params, cache, demb, grads)
            if fcache is not None:
                frontend.backward_features(params, fcache, dfeats, grads,
                                           through_frontend=False)
            grads["cm2.cls.w"] = dw
        else:  # frontend-toy
            feats, fcache = frontend.forward_features(params, x)
            stats, c_pool = frontend.pool.forward(params, feats)
            emb, c_proj = frontend.proj.forward(params, stats)
            loss, demb, dw = aam_softmax_loss(emb, y, params["frontend.cls.w"], aam_cfg)
            dstats = frontend.proj.backward(params, c_proj, demb, grads)
            dfeats = frontend.pool.backward(params, c_pool, dstats, grads)
            frontend.backward_features(params, fcache, dfeats, grads,
                                       through_frontend=True)
            grads["frontend.cls.w"] = dw

        lr = lr_schedule(step, train_cfg)
        if not np.isfinite(loss):
            raise TrainingError(
                f"non-finite loss at step {step} (lr={lr:.6g}); aborting")
        opt.step(params, grads, lr, trainable)
        log.append(LogEntry(step=step, lr=float(lr), loss=loss))

        if out_dir and step % steps_per_epoch == 0:
            epoch = step // steps_per_epoch
            save_checkpoint(ckpt, os.path.join(out_dir, f"epoch_{epoch:04d}"))

    if out_dir:
        save_checkpoint(ckpt, os.path.join(out_dir, "final"))
        with open(os.path.join(out_dir, "train.log"), "w") as fh:
            for entry in log:
                fh.write(entry.line() + "\n")
    return ckpt, log
