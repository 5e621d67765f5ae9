"""Greedy and nucleus decoding with length / text-prefix conditioning."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import model as M
from . import nn
from .vocab import EOS, PAD, Vocab
from .world import Box, Scene, render


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "greedy"
    p: float = 0.9
    temperature: float = 1.0
    samples: int = 1
    seed: int = 0
    prefix: str = "LEN_2"

    def __post_init__(self):
        if self.mode not in ("greedy", "nucleus"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if not 0 < self.p <= 1:
            raise ValueError("nucleus p must lie in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.samples < 1:
            raise ValueError("need at least one sample")


@dataclass
class DecodeResult:
    box: tuple[float, float, float, float]
    prefix: list[str]
    words: list[str]
    terminated_by: str  # "eos" or "max_steps"
    logprob: float
    tokens: list[int] = field(default_factory=list, repr=False)

    def to_record(self) -> dict:
        return {"box": list(self.box), "prefix": self.prefix, "words": self.words,
                "terminated_by": self.terminated_by, "logprob": self.logprob}


def next_token_dist(logits, temperature: float = 1.0, p: float = 0.9):
    """Nucleus of a next-token distribution.

    Returns ``(ids, probs)``: the smallest descending-probability prefix whose
    mass reaches ``p`` (ties broken toward the lower id, first token always
    kept), renormalised.
    """
    probs = nn.softmax(np.asarray(logits, dtype=np.float64) / temperature)
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    n = min(int(np.searchsorted(cum, p, side="left")) + 1, len(order))
    ids = order[:n]
    kept = probs[ids]
    return ids, kept / kept.sum()


def _masked(logits, vocab: Vocab):
    out = np.array(logits, dtype=np.float64)
    out[..., vocab.structural_ids] = -np.inf
    return out


class ModelCaptioner:
    """Decodes captions from model parameters; caches image features per scene."""

    def __init__(self, params, config: M.ModelConfig, vocab: Vocab | None = None):
        self.params = params
        self.config = config
        self.vocab = vocab or Vocab()
        self._features = lru_cache(maxsize=64)(self._encode)

    def _encode(self, scene: Scene) -> np.ndarray:
        return M.encode_image(self.params, self.config, render(scene))

    def _cache(self, scene: Scene, boxes: Sequence[Box]):
        vision = self._features(scene)
        box_arr = np.array([b.as_tuple() for b in boxes])
        box_tok = M.embed_box(self.params, box_arr)
        vis = np.broadcast_to(vision, (len(boxes),) + vision.shape)
        return M.prefix_cache(self.params, self.config, vis, box_tok)

    def _rollout(self, cache, prefixes: np.ndarray, choose):
        """Extend every row of ``prefixes`` until EOS or the token budget runs out."""
        rows, start = prefixes.shape
        tokens = prefixes
        logprob = np.zeros(rows)
        done = np.zeros(rows, dtype=bool)
        for step in range(self.config.max_tokens - start):
            logits = M.cached_text_logits(self.params, self.config, cache, tokens)[:, -1]
            masked = _masked(logits, self.vocab)
            nxt = choose(masked, step)
            logp = nn.log_softmax(masked)[np.arange(rows), nxt]
            nxt = np.where(done, PAD, nxt)
            logprob += np.where(done, 0.0, logp)
            tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
        return tokens, logprob, done

    def _results(self, boxes, prefixes, tokens, logprob, done):
        out = []
        for r in range(len(tokens)):
            start = len(prefixes[r])
            gen = [int(t) for t in tokens[r, start:]]
            if EOS in gen:
                gen = gen[:gen.index(EOS) + 1]
            words = self.vocab.detokenize([t for t in gen if t != EOS])
            out.append(DecodeResult(
                box=boxes[r].as_tuple(), prefix=self.vocab.detokenize(prefixes[r]),
                words=words, terminated_by="eos" if done[r] else "max_steps",
                logprob=float(logprob[r]), tokens=gen))
        return out

    def greedy(self, scene: Scene, boxes: Sequence[Box], prefixes: Sequence[Sequence[int]]):
        """One greedy caption per (box, prefix) request on ``scene``."""
        boxes, prefixes = list(boxes), [list(p) for p in prefixes]
        results: list = [None] * len(boxes)
        for length in sorted({len(p) for p in prefixes}):
            rows = [i for i, p in enumerate(prefixes) if len(p) == length]
            _check_prefix(length, self.config)
            cache = self._cache(scene, [boxes[i] for i in rows])
            tokens, logprob, done = self._rollout(
                cache, np.array([prefixes[i] for i in rows]),
                lambda logits, step: np.argmax(logits, axis=-1))
            for i, res in zip(rows, self._results([boxes[i] for i in rows],
                                                  [prefixes[i] for i in rows],
                                                  tokens, logprob, done)):
                results[i] = res
        return results

    def sample(self, scene: Scene, box: Box, prefixes: Sequence[Sequence[int]], k: int,
               p: float = 0.9, temperature: float = 1.0, seed: int = 0, trace=None):
        """``k`` nucleus rollouts for each prefix (all prefixes of equal length).

        Rollout ``r`` draws from its own generator seeded with ``(seed, r)``. When
        ``trace`` is a list, each step appends ``(row, nucleus_ids, token)``.
        """
        prefixes = [list(q) for q in prefixes for _ in range(k)]
        if len({len(q) for q in prefixes}) != 1:
            raise ValueError("sampled prefixes must share a length")
        _check_prefix(len(prefixes[0]), self.config)
        rngs = [np.random.default_rng([seed, r]) for r in range(len(prefixes))]

        def choose(logits, step):
            out = np.empty(len(logits), dtype=np.int64)
            for r, row in enumerate(logits):
                ids, probs = next_token_dist(row, temperature, p)
                j = int(np.searchsorted(np.cumsum(probs), rngs[r].random(), side="right"))
                out[r] = ids[min(j, len(ids) - 1)]
                if trace is not None:
                    trace.append((r, ids, int(out[r])))
            return out

        cache = self._cache(scene, [box])
        cache = [(np.repeat(ck, len(prefixes), axis=0), np.repeat(cv, len(prefixes), axis=0))
                 for ck, cv in cache]
        tokens, logprob, done = self._rollout(cache, np.array(prefixes), choose)
        return self._results([box] * len(prefixes), prefixes, tokens, logprob, done)


def _check_prefix(length: int, config: M.ModelConfig) -> None:
    if not 1 <= length < config.max_tokens:
        raise ValueError(f"prefix must hold 1..{config.max_tokens - 1} tokens")


def greedy(params, config: M.ModelConfig, scene: Scene, box: Box, prefix: Sequence[int],
           vocab: Vocab | None = None) -> DecodeResult:
    return ModelCaptioner(params, config, vocab).greedy(scene, [box], [prefix])[0]


def nucleus_sample(params, config: M.ModelConfig, scene: Scene, box: Box,
                   prefix: Sequence[int], p: float = 0.9, temperature: float = 1.0,
                   k: int = 20, seed: int = 0, vocab: Vocab | None = None):
    return ModelCaptioner(params, config, vocab).sample(scene, box, [prefix], k, p,
                                                        temperature, seed)
