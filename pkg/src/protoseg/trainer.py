"""Two-stage episodic optimization.

Stage one pretrains the encoder behind a parameter-free prototype head;
stage two fine-tunes encoder and attention head jointly with the
bidirectional prototypical objective. Shared machinery: cosine-annealed
learning rate with exact endpoints, decoupled weight-decay adaptive-moment
updates, global gradient-norm clipping, JSON-lines episode logs, and a
versioned single-file checkpoint that round-trips bitwise.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attention import VARIANTS, AttentionConfig, AttentionHead
from .autodiff import Tensor, no_grad
from .data import EpisodeSpec, LoadedDataset, sample_episode
from .encoder import Encoder, EncoderConfig
from .errors import ContractViolationError, TrainingError
from .losses import (
    LossConfig,
    finetune_loss,
    pretrain_loss,
    proto_loss,
    query_loss,
    support_loss,
)
from .metrics import (
    AggregateReport,
    MetricReport,
    aggregate_reports,
    compute_metrics,
    confusion_matrix,
)
from .protohead import ProtoHead, ProtoHeadConfig

CHECKPOINT_VERSION = 1
STAGES = ("pretrain", "finetune")


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    episodes: int = 1000
    batch_episodes: int = 1
    lr_init: float = 1e-3
    lr_min: float = 1e-6
    schedule_T: int = 50
    schedule_stride: int = 20
    weight_decay: float = 1e-5
    clip_norm: float = 1.0
    seed: int = 42
    episode_spec: EpisodeSpec | None = None
    loss_config: LossConfig = field(default_factory=LossConfig)
    attention_variant: str = "none"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractViolationError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.attention_variant not in VARIANTS:
            raise ContractViolationError(
                f"attention variant must be one of {VARIANTS}, got {self.attention_variant!r}")
        if self.clip_norm <= 0:
            raise ContractViolationError("clip_norm must be positive")
        if not self.lr_min < self.lr_init:
            raise ContractViolationError("lr_min must lie below lr_init")
        if min(self.episodes, self.batch_episodes, self.schedule_T, self.schedule_stride) < 1:
            raise ContractViolationError("episode and schedule counts must be at least 1")
        if self.episode_spec is None:
            # stage one defaults to all eight defect ways (background makes nine
            # classes per episode); stage two to the 2-way 5-shot protocol
            ways = 8 if self.stage == "pretrain" else 2
            self.episode_spec = EpisodeSpec(n_ways=ways, k_shots=5, n_query=1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        if isinstance(raw.get("episode_spec"), dict):
            raw["episode_spec"] = EpisodeSpec(**raw["episode_spec"])
        if isinstance(raw.get("loss_config"), dict):
            raw["loss_config"] = LossConfig(**raw["loss_config"])
        return cls(**raw)

    @property
    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:12]


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Cosine annealing from lr_init to lr_min over schedule_T steps.

    Both endpoints are returned exactly; past schedule_T the rate stays at
    lr_min."""
    if step < 0:
        raise ContractViolationError("schedule step must be nonnegative")
    if step <= 0:
        return config.lr_init
    if step >= config.schedule_T:
        return config.lr_min
    cosine = math.cos(math.pi * step / config.schedule_T)
    return config.lr_min + 0.5 * (config.lr_init - config.lr_min) * (1.0 + cosine)


class AdamW:
    """Adaptive moment estimation with decoupled weight decay."""

    def __init__(self, parameters: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.parameters = dict(parameters)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.parameters.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.parameters.items()}

    def zero_grad(self):
        for p in self.parameters.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for name, p in self.parameters.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            adaptive = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = p.data - self.lr * (adaptive + self.weight_decay * p.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {}
        for name in self.parameters:
            state[f"m/{name}"] = self.m[name]
            state[f"v/{name}"] = self.v[name]
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray], step_count: int):
        for name in self.parameters:
            self.m[name] = state[f"m/{name}"].copy()
            self.v[name] = state[f"v/{name}"].copy()
        self.step_count = step_count


def clip_gradients(parameters, max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns the pre-clip norm for logging."""
    tensors = parameters.values() if isinstance(parameters, dict) else parameters
    grads = [p.grad for p in tensors if p.grad is not None]
    total_sq = sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)
    total = math.sqrt(total_sq)
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


@dataclass
class Model:
    encoder: Encoder
    attention: AttentionHead | None
    head: ProtoHead

    def head_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        if self.attention is not None:
            params.update(self.attention.named_parameters())
        params.update(self.head.named_parameters())
        return params

    def trainable_parameters(self) -> dict[str, Tensor]:
        params = {f"encoder.{k}": v for k, v in self.encoder.named_parameters()}
        params.update(self.head_parameters())
        return params


def build_model(config: TrainConfig, encoder_config: EncoderConfig | None = None,
                proto_config: ProtoHeadConfig | None = None,
                attention_config: AttentionConfig | None = None) -> Model:
    encoder_config = encoder_config or EncoderConfig.desk()
    encoder = Encoder(encoder_config, seed=config.seed)
    attention = None
    if config.attention_variant != "none":
        attention = AttentionHead(encoder_config.pyramid_channels, config.attention_variant,
                                  config=attention_config, seed=config.seed + 1,
                                  dtype=encoder_config.np_dtype)
    head = ProtoHead(proto_config, dtype=encoder_config.np_dtype)
    return Model(encoder=encoder, attention=attention, head=head)


@dataclass
class Checkpoint:
    """Named parameter blobs plus a JSON header, one .npz file on disk."""

    header: dict
    arrays: dict[str, np.ndarray]

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"header.json": np.array(json.dumps(self.header, sort_keys=True))}
        payload.update(self.arrays)
        with open(path, "wb") as fh:
            np.savez(fh, **payload)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise ContractViolationError(f"no checkpoint at {path}")
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header.json"][()]))
            if header.get("version") != CHECKPOINT_VERSION:
                raise ContractViolationError(
                    f"unsupported checkpoint version {header.get('version')}")
            arrays = {k: data[k] for k in data.files if k != "header.json"}
        return cls(header=header, arrays=arrays)


def make_checkpoint(model: Model, optimizer: AdamW, config: TrainConfig,
                    episodes_trained: int, rng_state: dict) -> Checkpoint:
    arrays: dict[str, np.ndarray] = {}
    for k, v in model.encoder.state_arrays().items():
        arrays[f"encoder/{k}"] = v
    if model.attention is not None:
        for k, v in model.attention.state_arrays().items():
            arrays[f"attention/{k}"] = v
    for k, v in model.head.state_arrays().items():
        arrays[f"head/{k}"] = v
    for k, v in optimizer.state_arrays().items():
        arrays[f"opt/{k}"] = v
    header = {
        "version": CHECKPOINT_VERSION,
        "stage": config.stage,
        "episodes_trained": episodes_trained,
        "optimizer_steps": optimizer.step_count,
        "config": config.to_dict(),
        "config_digest": config.digest,
        "seed": config.seed,
        "rng_state": rng_state,
        "encoder_config": asdict(model.encoder.config),
        "attention_variant": model.attention.variant if model.attention else "none",
        "attention_config": asdict(model.attention.config) if model.attention else None,
        "proto_config": asdict(model.head.config),
    }
    # canonicalize through JSON so in-memory and reloaded headers compare equal
    return Checkpoint(header=json.loads(json.dumps(header)), arrays=arrays)


def restore_model(checkpoint: Checkpoint) -> Model:
    """Rebuild encoder, attention, and head exactly as checkpointed."""
    header = checkpoint.header
    enc_raw = dict(header["encoder_config"])
    enc_raw["stage_channels"] = tuple(enc_raw["stage_channels"])
    config = TrainConfig.from_dict(header["config"])
    encoder = Encoder(EncoderConfig(**enc_raw), seed=header["seed"])
    encoder.load_state_arrays(
        {k.split("/", 1)[1]: v for k, v in checkpoint.arrays.items()
         if k.startswith("encoder/")})
    attention = None
    if header["attention_variant"] != "none":
        attention = AttentionHead(
            enc_raw["pyramid_channels"], header["attention_variant"],
            config=AttentionConfig(**header["attention_config"]),
            seed=header["seed"] + 1, dtype=encoder.config.np_dtype)
        attention.load_state_arrays(
            {k.split("/", 1)[1]: v for k, v in checkpoint.arrays.items()
             if k.startswith("attention/")})
    head = ProtoHead(ProtoHeadConfig(**header["proto_config"]),
                     dtype=encoder.config.np_dtype)
    head.load_state_arrays(
        {k.split("/", 1)[1]: v for k, v in checkpoint.arrays.items()
         if k.startswith("head/")})
    return Model(encoder=encoder, attention=attention, head=head)


def _episode_stream(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1]))


def _eval_stream(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 2]))


def _ensure_finite(value: float, episode_idx: int, episode, record: dict):
    if np.isfinite(value):
        return
    dump = {
        "episode": episode_idx,
        "support_ids": list(episode.support_ids),
        "query_ids": list(episode.query_ids),
        "classes": list(episode.episode_classes),
        "record": record,
    }
    error = TrainingError(f"non-finite loss {value!r} at episode {episode_idx}: {dump}")
    error.dump = dump
    raise error


def dump_log(records: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def _train_loop(dataset: LoadedDataset, config: TrainConfig, params: dict,
                optimizer: AdamW, forward) -> tuple[np.random.Generator, list[dict]]:
    """Shared episode loop: schedule, accumulate over batch_episodes, clip, step."""
    rng = _episode_stream(config.seed)
    log: list[dict] = []
    episode_idx = 0
    while episode_idx < config.episodes:
        batch = min(config.batch_episodes, config.episodes - episode_idx)
        optimizer.lr = lr_schedule(episode_idx // config.schedule_stride, config)
        optimizer.zero_grad()
        total: Tensor | None = None
        pending: list[dict] = []
        for _ in range(batch):
            episode = sample_episode(dataset, config.episode_spec, rng, split="train")
            loss, record = forward(episode)
            record["episode"] = episode_idx
            record["lr"] = optimizer.lr
            record["classes"] = list(episode.episode_classes)
            _ensure_finite(record["loss"], episode_idx, episode, record)
            total = loss if total is None else total + loss
            pending.append(record)
            episode_idx += 1
        if batch > 1:
            total = total * (1.0 / batch)
        total.backward()
        grad_norm = clip_gradients(params, config.clip_norm)
        for record in pending:
            record["grad_norm"] = grad_norm
        optimizer.step()
        log.extend(pending)
    return rng, log


def pretrain_stage(dataset: LoadedDataset, config: TrainConfig | None = None,
                   encoder_config: EncoderConfig | None = None,
                   proto_config: ProtoHeadConfig | None = None,
                   ) -> tuple[Checkpoint, list[dict]]:
    """Stage one: episodic encoder training behind a frozen head.

    The head stays parameter-free (no attention, fixed temperature), so the
    optimizer only ever sees encoder tensors."""
    config = config or TrainConfig(stage="pretrain")
    if config.stage != "pretrain":
        raise ContractViolationError("pretrain_stage needs a pretrain config")
    model = build_model(TrainConfig.from_dict({**config.to_dict(), "attention_variant": "none"}),
                        encoder_config, proto_config)
    params = {f"encoder.{k}": v for k, v in model.encoder.named_parameters()}
    optimizer = AdamW(params, lr=config.lr_init, weight_decay=config.weight_decay)
    model.encoder.train()

    def forward(episode):
        prediction = model.head.predict_episode(episode, model.encoder, attention=None)
        breakdown = pretrain_loss(prediction.query_probs, episode.query_masks,
                                  config.loss_config)
        record = {
            "stage": "pretrain",
            "loss": float(breakdown.total.data),
            "ce": breakdown.ce,
            "dice": breakdown.dice,
            "focal": breakdown.focal,
        }
        return breakdown.total, record

    rng, log = _train_loop(dataset, config, params, optimizer, forward)
    checkpoint = make_checkpoint(model, optimizer, config, config.episodes,
                                 rng.bit_generator.state)
    return checkpoint, log


def finetune_stage(checkpoint: Checkpoint, dataset: LoadedDataset,
                   config: TrainConfig | None = None,
                   proto_config: ProtoHeadConfig | None = None,
                   attention_config: AttentionConfig | None = None,
                   ) -> tuple[Checkpoint, list[dict]]:
    """Stage two: joint encoder + head updates with the prototypical loss.

    The encoder starts from the stage-one checkpoint; the attention head is
    built fresh at neutral initialization for the configured variant."""
    config = config or TrainConfig(stage="finetune")
    if config.stage != "finetune":
        raise ContractViolationError("finetune_stage needs a finetune config")
    base = restore_model(checkpoint)
    if proto_config is None:
        proto_config = ProtoHeadConfig(**checkpoint.header["proto_config"])
    model = build_model(config, base.encoder.config, proto_config, attention_config)
    model.encoder.load_state_arrays(base.encoder.state_arrays())
    params = model.trainable_parameters()
    head_params = model.head_parameters()
    optimizer = AdamW(params, lr=config.lr_init, weight_decay=config.weight_decay)
    model.encoder.train()

    def forward(episode):
        prediction = model.head.predict_episode(episode, model.encoder, model.attention)
        q_term = query_loss(prediction.query_probs, episode.query_masks)
        s_term = None
        if config.loss_config.bidirectional:
            reversed_probs = model.head.predict_reversed(
                prediction, episode.support_images.shape[1])
            s_term = support_loss(reversed_probs, episode.support_masks,
                                  episode.n_ways, episode.k_shot)
        proto = proto_loss(q_term, s_term, config.loss_config)
        breakdown = finetune_loss(proto, head_params, config.loss_config,
                                  query=q_term, support=s_term)
        record = {
            "stage": "finetune",
            "loss": float(breakdown.total.data),
            "query": breakdown.query,
            "support": breakdown.support,
            "proto": breakdown.proto,
            "reg": breakdown.reg,
        }
        return breakdown.total, record

    rng, log = _train_loop(dataset, config, params, optimizer, forward)
    out = make_checkpoint(model, optimizer, config, config.episodes,
                          rng.bit_generator.state)
    return out, log


def evaluate(checkpoint: Checkpoint, dataset: LoadedDataset,
             spec: EpisodeSpec | None = None, episodes: int = 1000,
             seed: int | None = None, split: str = "test",
             ) -> tuple[AggregateReport, list[MetricReport]]:
    """Episodic test-split evaluation; no parameter updates.

    A dedicated RNG stream keyed by the seed draws the episodes, so repeated
    calls with equal arguments score identical episode sequences."""
    model = restore_model(checkpoint)
    config = TrainConfig.from_dict(checkpoint.header["config"])
    spec = spec or config.episode_spec
    seed = config.seed if seed is None else seed
    rng = _eval_stream(seed)
    model.encoder.eval()
    reports: list[MetricReport] = []
    with no_grad():
        for _ in range(episodes):
            episode = sample_episode(dataset, spec, rng, split=split)
            prediction = model.head.predict_episode(episode, model.encoder, model.attention)
            cm = confusion_matrix(prediction.predicted_masks, episode.query_masks,
                                  episode.n_ways + 1)
            reports.append(compute_metrics(cm))
    return aggregate_reports(reports), reports
