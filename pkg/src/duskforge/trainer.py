"""Day pretraining, darkener training, and adaptation of the extractor.

Randomness is derived from ``(seed, stage, purpose, step)`` rather than from a
running generator, so a run resumed from a checkpoint replays exactly the
batches, augmentations and exposure maps of an uninterrupted run.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import losses
from .autodiff import SGD, Adam, Module, NonFiniteError, Tensor, backward, cosine_lr, no_grad, ops
from .autodiff import serialize
from .config import Config
from .darkening import MappingEstimator, darken_image
from .data.manifest import DatasetManifest, load_batch
from .diagnostics import mmd
from .exposure import ExposureMap, sample_stage1, sample_stage2, stack
from .models import AdaptationModel

log = logging.getLogger("duskforge")

STAGES = ("pretrain_day", "train_darkener", "adapt")
STAGE1_EVAL_LEVELS = (0.05, 0.1, 0.2, 0.3, 0.4)
EVAL_CHUNK = 100

LOG_KEYS = ("l_sim_d", "l_c_exp", "l_col", "l_ltv", "l_flex", "l_sim_f", "l_task", "total")

# purposes mixed into per-step seeds
_PERMUTATION, _AUGMENT, _EXPOSURE = 0, 1, 2


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, component: str, step: int):
        super().__init__(f"non-finite value in {component} at step {step}")
        self.component = component
        self.step = step


class FrozenStateError(TrainingError):
    """A module that should have stayed frozen changed during a stage."""


# -- configuration ------------------------------------------------------------

@dataclass
class TrainConfig:
    stage: str
    steps: int
    batch_size: int
    optimizer: str
    lr: float
    schedule: str
    weights: losses.LossWeights
    noise: object
    curve: object
    seed: int
    data_root: Path
    out_dir: Path
    eval_every: int
    augment: bool = False
    day_checkpoint: Path | None = None
    darkener_checkpoint: Path | None = None
    mode: str = "stepwise"
    alternate_block: int = 100
    config: Config = field(default_factory=Config)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps < 1 or self.batch_size < 2:
            raise ValueError("steps must be >= 1 and batch_size >= 2")

    @classmethod
    def from_config(cls, cfg: Config, stage: str, out_dir, day_checkpoint=None,
                    darkener_checkpoint=None) -> TrainConfig:
        if stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
        section = {"pretrain_day": "pretrain", "train_darkener": "darkener", "adapt": "adapt"}[stage]
        return cls(
            stage=stage, steps=cfg[f"{section}.steps"], batch_size=cfg[f"{section}.batch_size"],
            optimizer=cfg["train.optimizer"], lr=cfg[f"{section}.lr"], schedule=cfg["train.schedule"],
            weights=cfg.loss_weights(), noise=cfg.noise_spec(), curve=cfg.curve_family(),
            seed=cfg["train.seed"], data_root=Path(cfg["data.root"]), out_dir=Path(out_dir),
            eval_every=cfg["train.eval_every"], augment=cfg["data.augment"],
            day_checkpoint=Path(day_checkpoint) if day_checkpoint else None,
            darkener_checkpoint=Path(darkener_checkpoint) if darkener_checkpoint else None,
            mode=cfg["adapt.mode"], alternate_block=cfg["adapt.alternate_block"], config=cfg)

    def lr_at(self, step: int) -> float:
        if self.schedule == "cosine":
            return cosine_lr(self.lr, step, self.steps)
        return self.lr


# -- run log ------------------------------------------------------------------

class RunLog:
    """Append-only JSON-lines log; step indices strictly increase per record kind."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        self._last: dict[str, int] = {}

    def append(self, record: dict) -> None:
        kind = record.get("kind", "step")
        if kind == "step":
            record = {**dict.fromkeys(LOG_KEYS), **record}
        step = int(record["step"])
        if step <= self._last.get(kind, -1):
            raise TrainingError(f"run log step {step} does not increase (last {self._last[kind]})")
        self._last[kind] = step
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def steps(self, kind: str = "step") -> list[dict]:
        return [r for r in self.records if r.get("kind", "step") == kind]

    @classmethod
    def read(cls, path: str | os.PathLike) -> RunLog:
        out = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                out.append(json.loads(line))
        return out

    @classmethod
    def resume(cls, path: str | os.PathLike, before_step: int) -> RunLog:
        """Reopen a log, dropping records at or after ``before_step``."""
        path = Path(path)
        kept = []
        if path.exists():
            kept = [r for r in cls.read(path).records if r["step"] < before_step]
        path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in kept), encoding="utf-8")
        out = cls()
        for r in kept:
            out.append(r)
        out.path = path
        return out


# -- helpers ------------------------------------------------------------------

def stage_rng(seed: int, stage: str, purpose: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, STAGES.index(stage), purpose, index])


class BatchSampler:
    """Epoch-wise shuffling where epoch ``e`` uses its own derived permutation."""

    def __init__(self, n: int, batch_size: int, seed: int, stage: str):
        if n < 1:
            raise TrainingError("empty training split")
        self.n, self.batch_size, self.seed, self.stage = n, batch_size, seed, stage
        self.per_epoch = math.ceil(n / batch_size)
        self._cache: tuple[int, np.ndarray] | None = None

    def indices(self, step: int) -> np.ndarray:
        epoch, k = divmod(step, self.per_epoch)
        if self._cache is None or self._cache[0] != epoch:
            self._cache = (epoch, stage_rng(self.seed, self.stage, _PERMUTATION, epoch).permutation(self.n))
        return self._cache[1][k * self.batch_size:(k + 1) * self.batch_size]


def state_hash(module: Module) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def prefixed(prefix: str, state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in state.items()}


def unprefixed(prefix: str, state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    sub = {k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + "/")}
    if not sub:
        raise TrainingError(f"checkpoint has no '{prefix}/' tensors")
    return sub


def load_split(root: Path, split: str) -> DatasetManifest:
    path = Path(root) / f"{split}.manifest"
    if not path.exists():
        raise FileNotFoundError(f"missing split {split!r}: {path} not found")
    return DatasetManifest.load(path).preload()


def make_optimizer(tc: TrainConfig, named_params):
    if tc.optimizer == "sgd":
        return SGD(named_params, tc.lr)
    return Adam(named_params, tc.lr)


def build_model(cfg: Config, num_classes: int, image_size: int, seed: int | None = None) -> AdaptationModel:
    return AdaptationModel(num_classes, cfg.extractor_spec(image_size), cfg.head_spec(), cfg["model.tau"],
                           cfg["train.seed"] if seed is None else seed)


def build_darkener(cfg: Config, seed: int | None = None) -> MappingEstimator:
    seed = cfg["train.seed"] if seed is None else seed
    return MappingEstimator(cfg.estimator_spec(), cfg.curve_family(), np.random.default_rng([seed, 99]))


def load_day_model(cfg: Config, path, num_classes: int, image_size: int) -> AdaptationModel:
    model = build_model(cfg, num_classes, image_size)
    state = serialize.load(path)
    model.load_component_state(state, ["extractor", "classifier"])
    model.reset_target()
    return model


def load_darkener(cfg: Config, path) -> MappingEstimator:
    net = build_darkener(cfg)
    net.load_state_dict(unprefixed("darkener", serialize.load(path)))
    net.requires_grad_(False)
    net.eval()
    return net


def _check_finite(parts: dict[str, float], step: int) -> None:
    for name, value in parts.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(name, step)


def _check_params(groups: dict[str, Module], step: int) -> None:
    for name, mod in groups.items():
        if not all(np.isfinite(p.data).all() for p in mod.parameters()):
            raise NonFiniteLossError(f"{name} parameters", step)


def _guard(step: int, fn: Callable):
    try:
        return fn()
    except NonFiniteError as exc:
        raise NonFiniteLossError(f"forward op {exc.op}", step) from exc


def _prepare_out(tc: TrainConfig) -> None:
    tc.out_dir.mkdir(parents=True, exist_ok=True)
    cfg = tc.config
    cfg.save(tc.out_dir / "config.txt")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _round(record: dict) -> dict:
    return {k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in record.items()}


# -- evaluation primitives ----------------------------------------------------

def extract_features(model: AdaptationModel, images: np.ndarray) -> np.ndarray:
    was = model.extractor.training
    model.extractor.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), EVAL_CHUNK):
            out.append(model.features(images[i:i + EVAL_CHUNK]).data)
    model.extractor.train(was)
    return np.concatenate(out).astype(np.float64)


def top1(model: AdaptationModel, images: np.ndarray, labels: np.ndarray) -> float:
    feats = extract_features(model, images)
    with no_grad():
        logits = model.classifier(Tensor(feats.astype(model.classifier.weight.dtype))).data
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def darken_batch(net: MappingEstimator, images: np.ndarray, exposures: np.ndarray, family) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), EVAL_CHUNK):
            out.append(darken_image(images[i:i + EVAL_CHUNK], exposures[i:i + EVAL_CHUNK], net, family).data)
    return np.concatenate(out)


def eval_exposures(cfg: Config, n: int, h: int, w: int) -> np.ndarray:
    """Deterministic compound exposure maps used for synthetic-night evaluation."""
    rng = np.random.default_rng(cfg["eval.exposure_seed"])
    return stack([sample_stage2(rng, h, w, cfg.noise_spec()) for _ in range(n)])


def alignment_metrics(day_features: np.ndarray, night_features: np.ndarray) -> dict:
    """Mean paired cosine similarity and MMD^2 between two feature sets."""
    a = np.asarray(day_features, dtype=np.float64)
    b = np.asarray(night_features, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"paired feature sets differ in shape: {a.shape} vs {b.shape}")
    denom = np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), losses.NORM_FLOOR)
    cos = float(np.mean(np.sum(a * b, axis=1) / denom))
    report = mmd(a, b)
    return {"mean_day_night_cosine": cos, "mmd": report.mmd2, "mmd_bandwidth": report.bandwidth}


def synthetic_alignment(cfg: Config, model: AdaptationModel, net: MappingEstimator,
                        images: np.ndarray) -> dict:
    n, _, h, w = images.shape
    dark = darken_batch(net, images, eval_exposures(cfg, n, h, w), cfg.curve_family())
    return alignment_metrics(extract_features(model, images), extract_features(model, dark))


def exposure_fidelity(net: MappingEstimator, images: np.ndarray, family,
                      levels: Iterable[float] = STAGE1_EVAL_LEVELS) -> dict[str, float]:
    """Mean ``|channel-avg(D(I, E)) - E|`` for each constant exposure level."""
    n, _, h, w = images.shape
    out = {}
    for level in levels:
        e = np.full((n, h, w), level, dtype=images.dtype)
        dark = darken_batch(net, images, e, family)
        out[f"{level:g}"] = float(np.mean(np.abs(dark.mean(axis=1) - level)))
    return out


def darkener_similarity(cfg: Config, model: AdaptationModel, net: MappingEstimator,
                        images: np.ndarray) -> float:
    """sim_loss_D on held-out images with fixed stage-1 exposure levels."""
    n, _, h, w = images.shape
    rng = np.random.default_rng(cfg["eval.exposure_seed"])
    e = stack([sample_stage1(rng, h, w) for _ in range(n)]).astype(images.dtype)
    dark = darken_batch(net, images, e, cfg.curve_family())
    return float(alignment_metrics(extract_features(model, images), extract_features(model, dark))
                 ["mean_day_night_cosine"])


# -- stage 0: day pretraining -------------------------------------------------

def pretrain_day(tc: TrainConfig, stop_after: int | None = None, resume: bool = False) -> dict:
    """Cross-entropy training on day images; keeps the best-on-val weights.

    Writes ``best.dftn`` (extractor and classifier with the highest validation
    accuracy so far), ``checkpoint.dftn`` (latest state plus optimizer) and
    ``runlog.jsonl`` into ``tc.out_dir``.
    """
    cfg = tc.config
    train, val = load_split(tc.data_root, "train"), load_split(tc.data_root, "val")
    size = train._cache.shape[-1]
    model = build_model(cfg, train.num_classes, size)
    # zero classifier weights: fresh logits are uniform
    model.classifier.weight.data[:] = 0.0
    modules = model.task_modules()
    named = [(f"{p}/{n}", t) for p, m in modules.items() for n, t in m.named_parameters()]
    opt = make_optimizer(tc, named)
    _prepare_out(tc)
    ckpt_path, best_path = tc.out_dir / "checkpoint.dftn", tc.out_dir / "best.dftn"

    start, best = 0, -1.0
    if resume:
        state = serialize.load(ckpt_path)
        model.load_component_state(state, ["extractor", "classifier"])
        opt.load_state_dict(unprefixed("optim", state))
        start, best = int(state["meta/step"]), float(state["meta/best_val_top1"])
        runlog = RunLog.resume(tc.out_dir / "runlog.jsonl", start)
    else:
        (tc.out_dir / "runlog.jsonl").write_text("", encoding="utf-8")
        runlog = RunLog(tc.out_dir / "runlog.jsonl")

    sampler = BatchSampler(len(train), tc.batch_size, tc.seed, tc.stage)
    end = tc.steps if stop_after is None else min(stop_after, tc.steps)
    model.train()
    for step in range(start, end):
        idx = sampler.indices(step)
        x, y = load_batch(train, idx, tc.augment, stage_rng(tc.seed, tc.stage, _AUGMENT, step))
        lr = tc.lr_at(step)

        def forward():
            return ops.cross_entropy(model.logits(x), y)
        loss = _guard(step, forward)
        _check_finite({"l_task": loss.item()}, step)
        opt.zero_grad()
        backward(loss)
        opt.step(lr)
        _check_params(modules, step)
        runlog.append({"step": step, "l_task": loss.item(), "total": loss.item(), "lr": lr})

        done = step + 1
        if done % tc.eval_every == 0 or done == tc.steps:
            acc = top1(model, val._cache, val.labels)
            runlog.append({"kind": "eval", "step": step, "val_top1": acc})
            log.info("pretrain step %d loss %.4f val_top1 %.4f", done, loss.item(), acc)
            if acc > best:
                best = acc
                serialize.save(best_path, {**prefixed("extractor", model.extractor.state_dict()),
                                           **prefixed("classifier", model.classifier.state_dict()),
                                           "meta/step": np.float64(done), "meta/val_top1": np.float64(acc)})

    state = {**prefixed("extractor", model.extractor.state_dict()),
             **prefixed("classifier", model.classifier.state_dict()),
             **prefixed("optim", opt.state_dict()),
             "meta/step": np.float64(end), "meta/best_val_top1": np.float64(best)}
    serialize.save(ckpt_path, state)
    summary = {"stage": tc.stage, "seed": tc.seed, "steps": end, "best_val_top1": best,
               "checkpoint": str(best_path), "final_loss": runlog.steps()[-1]["total"] if runlog.steps() else None}
    _write_json(tc.out_dir / "summary.json", summary)
    return summary


# -- stage 1: darkener --------------------------------------------------------

def darkener_step_losses(model: AdaptationModel, net: MappingEstimator, images: np.ndarray,
                         exposure: np.ndarray, tc: TrainConfig, step: int):
    """Forward pass of the darkener objective; the extractor must be in eval mode."""
    def forward():
        with no_grad():
            feat_day = model.features(images)
        dark, maps = darken_image(images, exposure, net, tc.curve, return_maps=True)
        feat_dark = model.features(dark)
        parts = {
            "l_sim_d": losses.sim_loss_D(feat_day, feat_dark),
            "l_c_exp": losses.exposure_loss(dark, exposure),
            "l_col": losses.color_loss(dark),
            "l_ltv": losses.ltv_loss(maps.A, tc.weights.alpha_ltv),
            "l_flex": losses.flex_loss(maps.B),
        }
        return losses.total_loss_D(parts, tc.weights)
    return _guard(step, forward)


def train_darkener(tc: TrainConfig, stop_after: int | None = None, resume: bool = False) -> dict:
    """Train the mapping estimator against the frozen day extractor."""
    cfg = tc.config
    if tc.day_checkpoint is None:
        raise TrainingError("train_darkener needs a day checkpoint")
    if not tc.curve.learnable:
        raise TrainingError(f"curve family {tc.curve.tag!r} has no learnable maps")
    train, val = load_split(tc.data_root, "train"), load_split(tc.data_root, "val")
    size = train._cache.shape[-1]
    model = load_day_model(cfg, tc.day_checkpoint, train.num_classes, size)
    model.eval()
    model.requires_grad_(False)
    frozen_hash = state_hash(model.extractor)

    net = build_darkener(cfg, tc.seed)
    opt = make_optimizer(tc, [(f"darkener/{n}", p) for n, p in net.named_parameters()])
    _prepare_out(tc)
    ckpt_path = tc.out_dir / "checkpoint.dftn"

    start = 0
    if resume:
        state = serialize.load(ckpt_path)
        net.load_state_dict(unprefixed("darkener", state))
        opt.load_state_dict(unprefixed("optim", state))
        start = int(state["meta/step"])
        runlog = RunLog.resume(tc.out_dir / "runlog.jsonl", start)
        sim_initial = float(state["meta/sim_d_initial"])
    else:
        (tc.out_dir / "runlog.jsonl").write_text("", encoding="utf-8")
        runlog = RunLog(tc.out_dir / "runlog.jsonl")
        sim_initial = darkener_similarity(cfg, model, net, val._cache)

    sampler = BatchSampler(len(train), tc.batch_size, tc.seed, tc.stage)
    end = tc.steps if stop_after is None else min(stop_after, tc.steps)
    h, w = train._cache.shape[-2:]
    for step in range(start, end):
        x, _ = load_batch(train, sampler.indices(step), tc.augment, stage_rng(tc.seed, tc.stage, _AUGMENT, step))
        erng = stage_rng(tc.seed, tc.stage, _EXPOSURE, step)
        e = stack([sample_stage1(erng, h, w) for _ in range(len(x))]).astype(x.dtype)
        lr = tc.lr_at(step)
        total, record = darkener_step_losses(model, net, x, e, tc, step)
        _check_finite(record, step)
        opt.zero_grad()
        backward(total)
        opt.step(lr)
        _check_params({"darkener": net}, step)
        runlog.append({"step": step, **record, "lr": lr})
        if (step + 1) % tc.eval_every == 0:
            log.info("darkener step %d total %.4f sim_d %.4f exp %.4f", step + 1, record["total"],
                     record["l_sim_d"], record["l_c_exp"])

    if state_hash(model.extractor) != frozen_hash:
        raise FrozenStateError("extractor changed while training the darkener")
    serialize.save(ckpt_path, {**prefixed("darkener", net.state_dict()), **prefixed("optim", opt.state_dict()),
                               "meta/step": np.float64(end), "meta/sim_d_initial": np.float64(sim_initial)})
    summary = {"stage": tc.stage, "seed": tc.seed, "steps": end, "checkpoint": str(ckpt_path),
               "extractor_hash": frozen_hash, "sim_d_initial": sim_initial}
    if end == tc.steps:
        summary["sim_d_final"] = darkener_similarity(cfg, model, net, val._cache)
        summary["exposure_error"] = exposure_fidelity(net, val._cache, tc.curve)
    _write_json(tc.out_dir / "summary.json", summary)
    return summary


# -- stage 2: adaptation ------------------------------------------------------

def adaptation_step_losses(model: AdaptationModel, images: np.ndarray, dark: np.ndarray,
                           labels: np.ndarray, weights: losses.LossWeights, step: int):
    """Symmetric BYOL plus task loss, with both views sharing one batch pass.

    Day and darkened images go through the online network as one batch (so
    batch statistics cover both domains) and likewise through the target.
    """
    n = len(images)

    def forward():
        both = np.concatenate([images, dark])
        feats = model.features(both)
        logits = model.classifier(feats)
        preds = model.head_z(model.head_q(feats))
        swapped = model.target.project(np.concatenate([dark, images]))
        sim = ops.add(losses.byol_loss(preds[:n], swapped[:n]), losses.byol_loss(preds[n:], swapped[n:]))
        task = losses.task_loss(logits[:n], logits[n:], labels)
        return losses.total_loss_F(sim, task, weights)
    return _guard(step, forward)


def _adapt_state(model: AdaptationModel, opt, step: int, extra: dict | None = None) -> dict:
    state = {**model.component_state(), **prefixed("optim", opt.state_dict()), "meta/step": np.float64(step)}
    state.update(extra or {})
    return state


def adapt(tc: TrainConfig, stop_after: int | None = None, resume: bool = False) -> dict:
    """Adapt extractor, classifier and heads against the frozen darkener."""
    cfg = tc.config
    if tc.day_checkpoint is None or tc.darkener_checkpoint is None:
        raise TrainingError("adapt needs a day checkpoint and a darkener checkpoint")
    train, val = load_split(tc.data_root, "train"), load_split(tc.data_root, "val")
    size = train._cache.shape[-1]
    model = load_day_model(cfg, tc.day_checkpoint, train.num_classes, size)
    # fresh heads per seed; the target twin starts equal to the online branch
    fresh = build_model(cfg, train.num_classes, size, seed=tc.seed)
    model.head_q.copy_from(fresh.head_q)
    model.head_z.copy_from(fresh.head_z)
    model.reset_target()
    if tc.mode == "alternating":
        net = build_darkener(cfg)
        net.load_state_dict(unprefixed("darkener", serialize.load(tc.darkener_checkpoint)))
    else:
        net = load_darkener(cfg, tc.darkener_checkpoint)
    darkener_hash = state_hash(net)

    online = model.online_modules()
    opt = make_optimizer(tc, list(model.named_online_parameters()))
    dopt = Adam([(f"darkener/{n}", p) for n, p in net.named_parameters()], cfg["darkener.lr"]) \
        if tc.mode == "alternating" else None
    _prepare_out(tc)
    ckpt_path = tc.out_dir / "checkpoint.dftn"

    start = 0
    if resume:
        state = serialize.load(ckpt_path)
        model.load_component_state(state)
        opt.load_state_dict(unprefixed("optim", state))
        if dopt is not None:
            net.load_state_dict(unprefixed("darkener", state))
            dopt.load_state_dict(unprefixed("doptim", state))
        start = int(state["meta/step"])
        runlog = RunLog.resume(tc.out_dir / "runlog.jsonl", start)
        initial = json.loads((tc.out_dir / "initial.json").read_text(encoding="utf-8"))
    else:
        (tc.out_dir / "runlog.jsonl").write_text("", encoding="utf-8")
        runlog = RunLog(tc.out_dir / "runlog.jsonl")
        initial = {"val_top1": top1(model, val._cache, val.labels), **synthetic_alignment(cfg, model, net, val._cache)}
        _write_json(tc.out_dir / "initial.json", initial)

    sampler = BatchSampler(len(train), tc.batch_size, tc.seed, tc.stage)
    end = tc.steps if stop_after is None else min(stop_after, tc.steps)
    h, w = train._cache.shape[-2:]
    for step in range(start, end):
        x, y = load_batch(train, sampler.indices(step), tc.augment, stage_rng(tc.seed, tc.stage, _AUGMENT, step))
        erng = stage_rng(tc.seed, tc.stage, _EXPOSURE, step)
        lr = tc.lr_at(step)
        darkener_turn = dopt is not None and (step // tc.alternate_block) % 2 == 1
        if darkener_turn:
            e = stack([sample_stage1(erng, h, w) for _ in range(len(x))]).astype(x.dtype)
            model.eval()
            model.requires_grad_(False)
            net.requires_grad_(True)
            total, record = darkener_step_losses(model, net, x, e, tc, step)
            _check_finite(record, step)
            dopt.zero_grad()
            backward(total)
            dopt.step(cosine_lr(dopt.lr, step, tc.steps) if tc.schedule == "cosine" else dopt.lr)
            _check_params({"darkener": net}, step)
            runlog.append({"step": step, "phase": "darkener", **record, "lr": lr})
            continue

        e = stack([sample_stage2(erng, h, w, tc.noise) for _ in range(len(x))]).astype(x.dtype)
        net.requires_grad_(False)
        for mod in online.values():
            mod.train()
            mod.requires_grad_(True)
        model.target_extractor.train()
        dark = darken_batch(net, x, e, tc.curve)
        total, record = adaptation_step_losses(model, x, dark, y, tc.weights, step)
        _check_finite(record, step)
        opt.zero_grad()
        backward(total)
        for name, mod in model.target_modules().items():
            if any(p.grad is not None for p in mod.parameters()):
                raise TrainingError(f"{name} received gradients")
        opt.step(lr)
        _check_params(online, step)
        model.ema_update()
        runlog.append({"step": step, **record, "lr": lr})
        if (step + 1) % tc.eval_every == 0:
            log.info("adapt step %d total %.4f sim_f %.4f task %.4f", step + 1, record["total"],
                     record["l_sim_f"], record["l_task"])

    if dopt is None and state_hash(net) != darkener_hash:
        raise FrozenStateError("darkener changed during adaptation")
    extra = {}
    if dopt is not None:
        extra = {**prefixed("darkener", net.state_dict()), **prefixed("doptim", dopt.state_dict())}
    serialize.save(ckpt_path, _adapt_state(model, opt, end, extra))
    summary = {"stage": tc.stage, "seed": tc.seed, "steps": end, "mode": tc.mode, "checkpoint": str(ckpt_path),
               "darkener_hash": darkener_hash, "initial": initial}
    if end == tc.steps:
        summary["final"] = {"val_top1": top1(model, val._cache, val.labels),
                            **synthetic_alignment(cfg, model, net, val._cache)}
    _write_json(tc.out_dir / "summary.json", summary)
    return summary


def run_stage(tc: TrainConfig, stop_after: int | None = None, resume: bool = False) -> dict:
    fn = {"pretrain_day": pretrain_day, "train_darkener": train_darkener, "adapt": adapt}[tc.stage]
    return fn(tc, stop_after=stop_after, resume=resume)


# -- evaluation ---------------------------------------------------------------

def evaluate(cfg: Config, checkpoint, split: str, darkener_checkpoint=None, output=None) -> dict:
    """Top-1 on ``split`` plus day/night feature alignment.

    With a darkener the split's images are paired with their synthetic-night
    versions. Without one, ``test_day`` and ``test_night`` are compared as
    unpaired sets, so only MMD is reported.
    """
    data = load_split(Path(cfg["data.root"]), split)
    size = data._cache.shape[-1]
    model = build_model(cfg, data.num_classes, size)
    model.load_component_state(serialize.load(checkpoint), ["extractor", "classifier"])
    metrics = {"split": split, "checkpoint": str(checkpoint), "top1": top1(model, data._cache, data.labels)}
    if darkener_checkpoint is not None:
        net = load_darkener(cfg, darkener_checkpoint)
        metrics.update(synthetic_alignment(cfg, model, net, data._cache))
    else:
        other = {"test_day": "test_night", "test_night": "test_day"}.get(split)
        metrics["mean_day_night_cosine"] = None
        metrics["mmd"] = None
        if other and (Path(cfg["data.root"]) / f"{other}.manifest").exists():
            o = load_split(Path(cfg["data.root"]), other)
            report = mmd(extract_features(model, data._cache), extract_features(model, o._cache))
            metrics["mmd"] = report.mmd2
            metrics["mmd_bandwidth"] = report.bandwidth
    if output is not None:
        Path(output).parent.mkdir(parents=True, exist_ok=True)
        _write_json(Path(output), metrics)
    return metrics


def run_pipeline(cfg: Config, out_root, stages: Iterable[str] = STAGES) -> dict:
    """Run the three stages in order under ``out_root`` and evaluate both test splits."""
    out_root = Path(out_root)
    dirs = {"pretrain_day": out_root / "pretrain", "train_darkener": out_root / "darkener",
            "adapt": out_root / "adapt"}
    day_ckpt = dirs["pretrain_day"] / "best.dftn"
    dark_ckpt = dirs["train_darkener"] / "checkpoint.dftn"
    result = {}
    for stage in stages:
        tc = TrainConfig.from_config(cfg, stage, dirs[stage], day_ckpt, dark_ckpt)
        start = time.perf_counter()
        result[stage] = run_stage(tc)
        result[stage]["seconds"] = time.perf_counter() - start
    result["evaluation"] = {}
    for name, ckpt in (("baseline", day_ckpt), ("adapted", dirs["adapt"] / "checkpoint.dftn")):
        if ckpt.exists():
            result["evaluation"][name] = {
                split: evaluate(cfg, ckpt, split, output=out_root / "eval" / f"{name}_{split}.json")["top1"]
                for split in ("test_day", "test_night")}
    _write_json(out_root / "pipeline.json", result)
    return result
