"""Training loop: warmup + cosine schedule, per-scene box subsampling, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import model as M
from . import nn
from .dataset import DatasetShard
from .world import render

log = logging.getLogger(__name__)

MAGIC = b"FXCP"
VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch: int = 32
    lr: float = 3e-4
    warmup: int = 200
    weight_decay: float = 0.05
    max_boxes: int = 8
    clip_norm: float = 1.0
    init_seed: int = 0
    data_seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.steps <= 0 or self.batch <= 0 or self.lr <= 0 or self.max_boxes <= 0:
            raise ValueError("steps, batch, lr and max_boxes must be positive")
        if not 0 <= self.warmup < self.steps:
            raise ValueError("warmup must be shorter than the run")


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to the peak, then cosine decay to zero at ``config.steps``."""
    if step < config.warmup:
        return config.lr * step / config.warmup
    progress = (step - config.warmup) / (config.steps - config.warmup)
    progress = min(max(progress, 0.0), 1.0)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class BatchSampler:
    """Draws scenes uniformly, then up to ``max_boxes`` distinct boxes per scene and
    one caption per chosen box."""

    def __init__(self, shard: DatasetShard, max_boxes: int = 8, image_cache: int = 2048):
        if not shard.triplets:
            raise ValueError("cannot sample from an empty shard")
        groups = shard.groups()
        scenes = shard.scene_map()
        self.seeds = [s for s in sorted(groups)]
        self.boxes = [list(groups[s].items()) for s in self.seeds]
        self.max_boxes = max_boxes
        self._scenes = scenes
        self._image = lru_cache(maxsize=image_cache)(lambda seed: render(self._scenes[seed]))

    def sample(self, rng: np.random.Generator, batch: int):
        """Returns ``(picks, batch)`` where picks lists ``(scene seed, Triplet)``."""
        picks = []
        while len(picks) < batch:
            s = int(rng.integers(len(self.seeds)))
            boxes = self.boxes[s]
            order = rng.permutation(len(boxes))[:self.max_boxes]
            for b in order:
                caps = boxes[b][1]
                picks.append((self.seeds[s], caps[int(rng.integers(len(caps)))]))
                if len(picks) == batch:
                    break
        return picks, self.collate(picks)

    def collate(self, picks) -> M.Batch:
        seeds = list(dict.fromkeys(seed for seed, _ in picks))
        slot = {seed: i for i, seed in enumerate(seeds)}
        return M.Batch(
            images=np.stack([self._image(seed) for seed in seeds]),
            image_index=np.array([slot[seed] for seed, _ in picks]),
            boxes=np.array([t.box for _, t in picks], dtype=np.float32),
            tokens=np.array([t.tokens for _, t in picks]),
        )


def sample_batch(shard: DatasetShard, rng: np.random.Generator, batch: int,
                 max_boxes: int = 8) -> M.Batch:
    return BatchSampler(shard, max_boxes).sample(rng, batch)[1]


@dataclass
class TrainResult:
    params: nn.Params
    curve: list[tuple[int, float, float]] = field(default_factory=list)


def train(model_config: M.ModelConfig, train_config: TrainConfig, shard: DatasetShard,
          checkpoint_path=None, curve_path=None, progress=None) -> TrainResult:
    """Runs ``train_config.steps`` AdamW updates on batches drawn from ``shard``."""
    params = M.init_params(model_config, train_config.init_seed)
    opt = nn.AdamW(params, weight_decay=train_config.weight_decay)
    sampler = BatchSampler(shard, train_config.max_boxes)
    rng = np.random.default_rng(train_config.data_seed)
    result = TrainResult(params)
    for step in range(train_config.steps):
        lr = lr_at(step, train_config)
        _, batch = sampler.sample(rng, train_config.batch)
        loss, grads = M.loss_and_grads(params, model_config, batch)
        loss = float(loss)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}")
        grads, _ = nn.clip_by_global_norm(grads, train_config.clip_norm)
        opt.step(params, grads, lr)
        result.curve.append((step, loss, lr))
        if train_config.log_every and step % train_config.log_every == 0:
            log.info("step %d loss %.4f lr %.2e", step, loss, lr)
        if progress is not None:
            progress(step, loss, lr)
        if (checkpoint_path and train_config.checkpoint_every
                and (step + 1) % train_config.checkpoint_every == 0):
            save_checkpoint(params, model_config, checkpoint_path)
    if checkpoint_path:
        save_checkpoint(params, model_config, checkpoint_path)
    if curve_path:
        write_curve(result.curve, curve_path)
    return result


def write_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in curve:
            w.writerow([step, f"{loss:.6f}", f"{lr:.8e}"])


# ---------------------------------------------------------------- checkpoints
#
# "FXCP" | u16 version | u32 config length | config JSON (utf-8)
# then per array: u16 name length | name | u8 rank | u32 dims... | float32 LE payload

def save_checkpoint(params: nn.Params, config: M.ModelConfig, path) -> None:
    blob = json.dumps(asdict(config), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", VERSION, len(blob)) + blob)
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            key = name.encode()
            fh.write(struct.pack("<HB", len(key), arr.ndim) + key)
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path, expected: M.ModelConfig | None = None):
    """Returns ``(params, config)``; raises if ``expected`` shapes disagree."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 10 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, clen = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    try:
        config = M.ModelConfig(**json.loads(data[pos:pos + clen]))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable config block") from exc
    pos += clen
    params = {}
    try:
        while pos < len(data):
            nlen, rank = struct.unpack_from("<HB", data, pos)
            pos += 3
            name = data[pos:pos + nlen].decode()
            pos += nlen
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
            params[name] = arr.astype(np.float32).reshape(shape)
            pos += 4 * count
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated array section") from exc
    M.check_params(params, config)
    if expected is not None:
        M.check_params(params, expected)
    return params, config
