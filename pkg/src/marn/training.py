"""Training loop, optimizer, run logging, and attention export.

Weights update in float64 and are rounded to float32 at each epoch boundary,
so the checkpoint written for an epoch evaluates exactly like the in-memory
model that produced its logged metrics.  All stochasticity (initialization,
shuffling) derives from the config seed, so a run is bit-reproducible.
"""

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from marn import autodiff as ad
from marn.checkpoint import save_checkpoint
from marn.data import (
    BOS_ID,
    UNK_ID,
    DatasetManifest,
    QueryTokens,
    Vocabulary,
    encode_query,
    load_feature_file,
    load_manifest,
    resample_features,
    resolve_feature_path,
)
from marn.errors import ConfigError, DataError, NumericError
from marn.evaluate import MetricReport, run_evaluation
from marn.model import ModelConfig, ModelParams, clip_grid, forward, init_params, proposal_grid
from marn.reconstruct import caption_loss, total_loss

log = logging.getLogger("marn")

_OPTIMIZER_ALIASES = {"β1": "beta1", "β2": "beta2"}
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0

    def __post_init__(self):
        kind = "adam" if self.kind == "adaptive-moment" else self.kind
        object.__setattr__(self, "kind", kind)
        if kind != "adam":
            raise ConfigError(f"optimizer kind must be 'adam', got {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {value}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    @classmethod
    def from_dict(cls, obj) -> "OptimizerConfig":
        if not isinstance(obj, dict):
            raise ConfigError("optimizer config must be an object")
        obj = dict(obj)
        for alias, target in _OPTIMIZER_ALIASES.items():
            if alias in obj:
                if target in obj:
                    raise ConfigError(f"config sets both {alias!r} and {target!r}")
                obj[target] = obj.pop(alias)
        unknown = sorted(set(obj) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown optimizer key(s): {', '.join(unknown)}")
        return cls(**obj)


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    optimizer: OptimizerConfig = OptimizerConfig()
    batch_size: int = 32
    epochs: int = 15
    seed: int = 0
    grad_clip_norm: float = 5.0
    checkpoint_dir: str = "checkpoints"
    log_every: int = 10
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be > 0")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")

    def to_json_dict(self) -> dict:
        out = {"model": self.model.to_dict()}
        out["optimizer"] = {f.name: getattr(self.optimizer, f.name) for f in fields(self.optimizer)}
        for f in fields(self):
            if f.name not in ("model", "optimizer"):
                out[f.name] = getattr(self, f.name)
        return out


def load_train_config(path, env=None) -> TrainConfig:
    """Parse a JSON training config; MARN_SEED in the environment overrides
    the config seed."""
    env = os.environ if env is None else env
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    obj = dict(obj)
    if "model" not in obj:
        raise ConfigError(f"config {path} missing 'model' section")
    model = ModelConfig.from_dict(obj.pop("model"))
    optimizer = OptimizerConfig.from_dict(obj.pop("optimizer", {}))
    known = {f.name for f in fields(TrainConfig)} - {"model", "optimizer"}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) in {path}: {', '.join(unknown)}")
    config = TrainConfig(model=model, optimizer=optimizer, **obj)
    if "MARN_SEED" in env:
        try:
            seed = int(env["MARN_SEED"])
        except ValueError as exc:
            raise ConfigError(f"MARN_SEED must be an integer, got {env['MARN_SEED']!r}") from exc
        config = TrainConfig(
            model=config.model, optimizer=config.optimizer, batch_size=config.batch_size,
            epochs=config.epochs, seed=seed, grad_clip_norm=config.grad_clip_norm,
            checkpoint_dir=config.checkpoint_dir, log_every=config.log_every,
            deterministic=config.deterministic,
        )
    return config


@dataclass
class StepRecord:
    step: int
    l_p: float
    l_c: Optional[float]
    total: float


@dataclass
class EpochRecord:
    epoch: int
    val_miou: float
    report: MetricReport


@dataclass
class RunLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "steps": [
                {"step": s.step, "l_p": s.l_p, "l_c": s.l_c, "total": s.total}
                for s in self.steps
            ],
            "epochs": [
                {"epoch": e.epoch, "val_miou": e.val_miou, "report": e.report.to_json_dict()}
                for e in self.epochs
            ],
        }


@dataclass
class TrainResult:
    best_path: str
    last_path: str
    best_miou: float
    run_log: RunLog


class Adam:
    """Bias-corrected adaptive-moment optimizer over a ModelParams set."""

    def __init__(self, params: ModelParams, config: OptimizerConfig):
        self.params = params
        self.config = config
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        cfg = self.config
        self.t += 1
        bias1 = 1.0 - cfg.beta1 ** self.t
        bias2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            p.data = p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def clip_gradient_norm(params: ModelParams, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, p in params.items():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for _, p in params.items():
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class Sample:
    video_id: str
    features: np.ndarray  # (T, d_v) resampled
    query: QueryTokens


def prepare_samples(manifest: DatasetManifest, manifest_path, vocab: Vocabulary,
                    config: ModelConfig) -> list:
    samples = []
    for entry in manifest.entries:
        raw = load_feature_file(resolve_feature_path(manifest_path, entry.feature_path))
        if raw.dim != config.d_v:
            raise DataError(f"{entry.video_id}: feature dim {raw.dim} != config d_v {config.d_v}")
        video = resample_features(raw, config.T)
        query = encode_query(entry.sentence, vocab, config.max_query_len)
        samples.append(Sample(entry.video_id, video.data, query))
    return samples


def _set_single_threaded_blas() -> None:
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def sample_loss(sample: Sample, params: ModelParams, config: ModelConfig,
                bos_embedding: np.ndarray):
    """Forward + caption losses for one sample; returns (node, l_p, l_c)."""
    outputs = forward(sample.features, sample.query, params, config)
    l_p = caption_loss(outputs.f_p_global, sample.query, params, config, bos_embedding, "proposal")
    l_c = None
    if config.multilevel_train:
        l_c = caption_loss(outputs.f_c_global, sample.query, params, config, bos_embedding, "clip")
    return total_loss(l_p, l_c, config.clip_loss_weight), l_p, l_c


def train(config: TrainConfig, train_manifest_path, val_manifest_path,
          vocab: Vocabulary) -> TrainResult:
    """Optimize from scratch; saves best-by-validation-mIoU and last
    checkpoints under config.checkpoint_dir."""
    model_cfg = config.model
    if len(vocab.tokens) != model_cfg.vocab_size:
        raise ConfigError(
            f"vocabulary holds {len(vocab.tokens)} tokens but config vocab_size is "
            f"{model_cfg.vocab_size}"
        )
    if vocab.embedding_dim != model_cfg.d_w:
        raise ConfigError(
            f"embeddings are {vocab.embedding_dim}-dimensional but config d_w is {model_cfg.d_w}"
        )
    if config.deterministic:
        _set_single_threaded_blas()
    train_manifest = load_manifest(train_manifest_path)
    if not train_manifest.entries:
        raise DataError(f"training manifest {train_manifest_path} is empty")
    val_manifest = load_manifest(val_manifest_path)
    samples = prepare_samples(train_manifest, train_manifest_path, vocab, model_cfg)
    params = init_params(model_cfg, config.seed)
    optimizer = Adam(params, config.optimizer)
    shuffle_rng = np.random.default_rng([int(config.seed), 23])
    bos_embedding = vocab.embeddings[BOS_ID]
    os.makedirs(config.checkpoint_dir, exist_ok=True)
    best_path = os.path.join(config.checkpoint_dir, "best.ckpt")
    last_path = os.path.join(config.checkpoint_dir, "last.ckpt")
    run_log = RunLog()
    best_miou = -1.0
    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(samples))
        for lo in range(0, len(order), config.batch_size):
            batch = [samples[i] for i in order[lo : lo + config.batch_size]]
            params.zero_grad()
            sum_p, sum_c, sum_total = 0.0, 0.0, 0.0
            for sample in batch:
                node, l_p, l_c = sample_loss(sample, params, model_cfg, bos_embedding)
                value = float(node.data)
                if not math.isfinite(value):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} step {step} "
                        f"(video {sample.video_id})"
                    )
                ad.mul(node, 1.0 / len(batch)).backward()
                sum_p += l_p.value
                sum_c += l_c.value if l_c is not None else 0.0
                sum_total += value
            clip_gradient_norm(params, config.grad_clip_norm)
            optimizer.step()
            step += 1
            record = StepRecord(
                step=step,
                l_p=sum_p / len(batch),
                l_c=(sum_c / len(batch)) if model_cfg.multilevel_train else None,
                total=sum_total / len(batch),
            )
            run_log.steps.append(record)
            if step % config.log_every == 0:
                extra = f" l_c {record.l_c:.4f}" if record.l_c is not None else ""
                log.info(
                    "epoch %d step %d loss %.4f (l_p %.4f%s)",
                    epoch, step, record.total, record.l_p, extra,
                )
        # round to float32 so the saved checkpoint equals the evaluated model
        params.quantize_float32()
        _, report = run_evaluation(params, model_cfg, vocab, val_manifest, val_manifest_path)
        run_log.epochs.append(EpochRecord(epoch=epoch, val_miou=report.miou, report=report))
        log.info("epoch %d val mIoU %.4f", epoch, report.miou)
        save_checkpoint(last_path, params, vocab)
        if report.miou > best_miou:
            best_miou = report.miou
            save_checkpoint(best_path, params, vocab)
    with open(os.path.join(config.checkpoint_dir, "runlog.json"), "w", encoding="utf-8") as fh:
        json.dump(run_log.to_json_dict(), fh, indent=2)
        fh.write("\n")
    return TrainResult(
        best_path=best_path, last_path=last_path, best_miou=best_miou, run_log=run_log
    )


def query_is_all_unk(query: QueryTokens) -> bool:
    """True when every real (non-EOS) token mapped to UNK."""
    word_ids = query.ids[: query.M - 1]
    return len(word_ids) > 0 and bool((word_ids == UNK_ID).all())


def export_attention(params: ModelParams, config: ModelConfig, vocab: Vocabulary,
                     raw, sentence: str, out_prefix: str) -> list:
    """Write attention maps as CSV: proposal grid (T rows, one column per
    scale) and, when present, the clip vector.  Returns written paths."""
    video = resample_features(raw, config.T)
    query = encode_query(sentence, vocab, config.max_query_len)
    with ad.no_grad():
        outputs = forward(video, query, params, config)
    paths = []
    proposal_path = f"{out_prefix}_proposal.csv"
    with open(proposal_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"scale_{s}" for s in proposal_grid(config).scales])
        writer.writerows(outputs.att_p.data.tolist())
    paths.append(proposal_path)
    if outputs.att_c is not None:
        clip_path = f"{out_prefix}_clip.csv"
        with open(clip_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"scale_{s}" for s in clip_grid(config).scales])
            writer.writerows(outputs.att_c.data.tolist())
        paths.append(clip_path)
    return paths
