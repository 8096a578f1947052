"""Adam training loop, dev-loss model selection and the binary checkpoint format.

Checkpoint layout::

    b"DASCCKPT" | uint64 LE header length | UTF-8 JSON header | raw f64 LE blobs

The header lists every tensor's name, shape and byte offset into the blob
section, so files can be inspected without this package.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .controllers import METHODS, DascHead, DirectorHead, make_head, prepare_batch, total_loss
from .errors import (
    CheckpointFormatError,
    CheckpointVersionError,
    ConfigError,
    DataError,
    DivergenceError,
    MethodMismatchError,
    SchemaMismatchError,
)
from .model import ModelConfig, Seq2SeqModel
from .synthlang import AttributeSchema, DialogueSample, Vocab
from .tensor import Tape, Tensor, no_grad

log = logging.getLogger(__name__)

MAGIC = b"DASCCKPT"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    method: str = "dasc"
    epochs: int = 6
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta: float = 0.1
    lambda_reg: float = 1.0
    seed: int = 0
    p: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int | None = None  # stop early after this many optimizer steps
    # decoupled weight decay on the DASC head; keeps its raw logits on the base model's scale
    dasc_weight_decay: float = 3.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.beta < 0 or self.lambda_reg < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.dasc_weight_decay < 0:
            raise ConfigError("dasc_weight_decay must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Adam; ``decay[i]`` adds decoupled weight decay to parameter ``i``."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
                 decay: Sequence[float] | None = None):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.decay = [0.0] * len(self.params) if decay is None else [float(x) for x in decay]
        if len(self.decay) != len(self.params):
            raise ConfigError("one decay value per parameter is required")
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v, wd in zip(self.params, self.m, self.v, self.decay):
            if p.grad is None:
                continue
            if wd:
                p.data *= 1.0 - self.lr * wd
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class Checkpoint:
    method: str
    model_config: ModelConfig
    schema: AttributeSchema
    vocab: Vocab
    model_params: dict[str, np.ndarray]
    head_config: dict | None = None
    head_params: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def schema_hash(self) -> str:
        return self.schema.digest()


def build_model(ckpt: Checkpoint) -> tuple[Seq2SeqModel, DirectorHead | DascHead | None]:
    model = Seq2SeqModel(ckpt.model_config)
    _assign(model.params, ckpt.model_params, "model")
    head = None
    if ckpt.method in ("director", "dasc"):
        hc = ckpt.head_config or {}
        head = make_head(ckpt.method, hc["d"], hc["V"], hc["K"], p=hc.get("p", 32))
        _assign(head.params, ckpt.head_params, "head")
    return model, head


def _assign(params: dict[str, Tensor], values: dict[str, np.ndarray], where: str) -> None:
    if set(params) != set(values):
        missing = sorted(set(params) ^ set(values))
        raise CheckpointFormatError(f"{where} tensors do not match the architecture: {missing[:5]}")
    for name, t in params.items():
        if t.shape != values[name].shape:
            raise CheckpointFormatError(f"{where} tensor {name} has shape {values[name].shape}, expected {t.shape}")
        t.data = np.array(values[name], dtype=np.float64)


def snapshot(model: Seq2SeqModel, head) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    mp = {k: v.data.copy() for k, v in model.params.items()}
    hp = {k: v.data.copy() for k, v in head.params.items()} if head is not None else {}
    return mp, hp


# --- persistence ------------------------------------------------------------


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors = []
    blobs = []
    offset = 0
    for group, params in (("model", ckpt.model_params), ("head", ckpt.head_params)):
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            tensors.append({"name": f"{group}/{name}", "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = {
        "version": ckpt.version,
        "method": ckpt.method,
        "model_config": ckpt.model_config.to_dict(),
        "schema": ckpt.schema.to_dict(),
        "schema_hash": ckpt.schema_hash,
        "vocab": {"tokens": ckpt.vocab.tokens, "tags": ckpt.vocab.tags},
        "head_config": ckpt.head_config,
        "tensors": tensors,
        "metadata": ckpt.metadata,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(raw)) + raw + b"".join(blobs)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic bytes)")
    (n,) = struct.unpack("<Q", data[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + n > len(data):
        raise CheckpointFormatError("truncated checkpoint header")
    try:
        header = json.loads(data[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unparsable checkpoint header: {exc}") from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {header.get('version')!r}, this build reads {FORMAT_VERSION}"
        )
    schema = AttributeSchema.from_dict(header["schema"])
    if schema.digest() != header["schema_hash"]:
        raise SchemaMismatchError("checkpoint schema does not match its recorded hash")
    blob = memoryview(data)[start + n:]
    groups: dict[str, dict[str, np.ndarray]] = {"model": {}, "head": {}}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        end = t["offset"] + 8 * count
        if end > len(blob):
            raise CheckpointFormatError(f"truncated checkpoint: tensor {t['name']} runs past end of file")
        arr = np.frombuffer(blob[t["offset"]:end], dtype="<f8").astype(np.float64).reshape(t["shape"])
        group, name = t["name"].split("/", 1)
        groups[group][name] = arr
    return Checkpoint(
        method=header["method"],
        model_config=ModelConfig(**header["model_config"]),
        schema=schema,
        vocab=Vocab(header["vocab"]["tokens"], header["vocab"]["tags"]),
        model_params=groups["model"],
        head_config=header["head_config"],
        head_params=groups["head"],
        metadata=header["metadata"],
        version=header["version"],
    )


def load_checkpoint(
    path: str | Path, method: str | None = None, schema: AttributeSchema | None = None
) -> Checkpoint:
    """Read a checkpoint, optionally requiring a method tag and schema."""
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    ckpt = parse_checkpoint(data)
    if method is not None and ckpt.method != method:
        raise MethodMismatchError(f"checkpoint was trained with {ckpt.method!r}, not {method!r}")
    if schema is not None and schema.digest() != ckpt.schema_hash:
        raise SchemaMismatchError(
            f"schema hash {schema.digest()} does not match checkpoint {ckpt.schema_hash}"
        )
    return ckpt


# --- training ---------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    l_clm: float
    l_t: float
    l_s: float
    l_reg: float
    train_total: float
    dev_total: float
    steps: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochMetrics]
    best_epoch: int


def batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def evaluate_loss(
    method: str, model, head, samples: Sequence[DialogueSample], schema, vocab, cfg: TrainConfig, batch_size=128
) -> float:
    """Sample-weighted mean of the batch total loss over ``samples``."""
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            batch = prepare_batch(method, chunk, schema, vocab)
            total += total_loss(method, model, head, batch, cfg.beta, cfg.lambda_reg).total * len(chunk)
            count += len(chunk)
    return total / count


def train(
    train_samples: Sequence[DialogueSample],
    dev_samples: Sequence[DialogueSample],
    schema: AttributeSchema,
    vocab: Vocab,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    metrics_path: str | Path | None = None,
    on_step: Callable[[int, float], None] | None = None,
    metadata: dict | None = None,
) -> TrainResult:
    """Train ``cfg.method`` and return the checkpoint with the lowest dev total loss."""
    if not train_samples:
        raise DataError("training split is empty")
    if not dev_samples:
        raise DataError("dev split is empty")
    model_cfg = model_cfg or ModelConfig(vocab_size=len(vocab))
    if model_cfg.vocab_size != len(vocab):
        raise ConfigError(f"model vocab_size {model_cfg.vocab_size} != vocabulary size {len(vocab)}")
    model = Seq2SeqModel(model_cfg, seed=cfg.seed)
    head = make_head(cfg.method, model_cfg.d_model, len(vocab), schema.K, p=cfg.p, seed=cfg.seed + 1)
    head_params = head.parameters() if head is not None else []
    params = model.parameters() + head_params
    head_decay = cfg.dasc_weight_decay if cfg.method == "dasc" else 0.0
    decay = [0.0] * (len(params) - len(head_params)) + [head_decay] * len(head_params)
    opt = Adam(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, decay=decay)
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        Path(metrics_path).write_text("")

    history: list[EpochMetrics] = []
    best: tuple[float, int, dict, dict] | None = None
    step = 0
    last_finite: tuple[int, float] | None = None
    for epoch in range(cfg.epochs):
        sums = np.zeros(5)
        n_seen = 0
        model.training = True
        for idx in batches(len(train_samples), cfg.batch_size, cfg.seed, epoch):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            chunk = [train_samples[i] for i in idx]
            batch = prepare_batch(cfg.method, chunk, schema, vocab)
            with Tape() as tape:
                parts = total_loss(cfg.method, model, head, batch, cfg.beta, cfg.lambda_reg)
                if not math.isfinite(parts.total):
                    where = f"step {last_finite[0]} (loss {last_finite[1]:.6g})" if last_finite else "no finite step"
                    raise DivergenceError(
                        f"loss became {parts.total} at step {step}, epoch {epoch}; last finite: {where}"
                    )
                opt.zero_grad()
                tape.backward(parts.tensor)
            opt.step()
            step += 1
            last_finite = (step, parts.total)
            sums += len(chunk) * np.array([parts.l_clm, parts.l_t, parts.l_s, parts.l_reg, parts.total])
            n_seen += len(chunk)
            if on_step is not None:
                on_step(step, parts.total)
        model.training = False
        if n_seen == 0:
            break
        dev = evaluate_loss(cfg.method, model, head, dev_samples, schema, vocab, cfg)
        if not math.isfinite(dev):
            raise DivergenceError(f"dev loss became {dev} after epoch {epoch}")
        means = sums / n_seen
        m = EpochMetrics(epoch, *map(float, means[:4]), float(means[4]), dev, step)
        history.append(m)
        log.info("epoch %d: train %.4f dev %.4f", epoch, m.train_total, dev)
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(m.as_dict()) + "\n")
        if best is None or dev < best[0]:
            best = (dev, epoch, *snapshot(model, head))

    assert best is not None
    dev_loss, best_epoch, mp, hp = best
    ckpt = Checkpoint(
        method=cfg.method,
        model_config=model_cfg,
        schema=schema,
        vocab=vocab,
        model_params=mp,
        head_config=head.config() if head is not None else None,
        head_params=hp,
        metadata={
            "epoch": best_epoch,
            "dev_loss": dev_loss,
            "steps": step,
            "train_config": cfg.to_dict(),
            **(metadata or {}),
        },
    )
    return TrainResult(ckpt, history, best_epoch)
