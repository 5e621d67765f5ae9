"""Localized-caption dataset pipeline.

alt text -> n-grams -> filtered n-grams -> (object, n-gram) matches -> length-prefixed
triplets, plus the prefix-sharing statistic and the JSONL shard format.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from . import world
from .vocab import BOS, EOS, PAD, Vocab, length_token
from .world import Scene, dumps_fixed

UNINFORMATIVE = frozenset(
    {"image", "photo", "picture", "and", "the", "a", "at", "near", "of", "in", "on", "is"})
START_STOPWORDS = frozenset(
    {"of", "on", "in", "at", "the", "and", "a", "an", "near", "is", "to", "with"})
END_STOPWORDS = frozenset(
    {"a", "an", "the", "to", "on", "at", "and", "near", "of", "in", "with", "is"})

DEFAULT_MAX_TOKENS = 12
MATCH_THRESHOLD = 0.1


class ShardFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Triplet:
    scene: int
    box: tuple[float, float, float, float]
    length: int
    tokens: tuple[int, ...]


@dataclass
class DatasetShard:
    scenes: list[Scene] = field(default_factory=list)
    triplets: list[Triplet] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.triplets)

    def scene_map(self) -> dict[int, Scene]:
        return {s.seed: s for s in self.scenes}

    def groups(self) -> dict[int, dict[tuple, list[Triplet]]]:
        """scene seed -> box -> triplets, in first-appearance order."""
        out: dict[int, dict[tuple, list[Triplet]]] = defaultdict(dict)
        for t in self.triplets:
            out[t.scene].setdefault(t.box, []).append(t)
        return dict(out)


def extract_ngrams(text: str, n_max: int = 8) -> list[list[str]]:
    words = text.split()
    return [words[i:i + n]
            for i in range(len(words))
            for n in range(1, n_max + 1)
            if i + n <= len(words)]


def filter_ngrams(ngrams) -> list[list[str]]:
    kept = []
    for g in ngrams:
        if not g or all(w in UNINFORMATIVE for w in g):
            continue
        if g[0] in START_STOPWORDS or g[-1] in END_STOPWORDS:
            continue
        kept.append(list(g))
    return kept


Scorer = Callable[[Sequence[str], Scene, int], float]


def grammar_score(ngram: Sequence[str], scene: Scene, index: int) -> float:
    """1.0 when the n-gram parses as a grammar phrase true of object ``index``, else 0.

    Accepted form: ``[SIZE] [COLOR] SHAPE [at REGION] [near the [COLOR2] SHAPE2]``
    where every stated attribute agrees with the object (or its nearest neighbour).
    """
    obj = scene.objects[index]
    words = list(ngram)
    i = 0
    while i < len(words) and (words[i] in world.SIZES or words[i] in world.COLORS):
        if words[i] not in (obj.size, obj.color):
            return 0.0
        i += 1
    if i >= len(words) or words[i] != obj.shape:
        return 0.0
    i += 1
    if words[i:i + 1] == ["at"]:
        if words[i + 1:i + 2] != [world.region_word(obj.cx, obj.cy)]:
            return 0.0
        i += 2
    if words[i:i + 2] == ["near", "the"]:
        j = world.nearest_neighbor(scene, index)
        if j is None:
            return 0.0
        other = scene.objects[j]
        rest = words[i + 2:]
        if rest not in ([other.shape], [other.color, other.shape]):
            return 0.0
        i = len(words)
    return 1.0 if i == len(words) else 0.0


def match_ngrams(scene: Scene, ngrams, scorer: Scorer = grammar_score,
                 threshold: float = MATCH_THRESHOLD) -> list[tuple[int, list[str]]]:
    matches, seen = [], set()
    for g in ngrams:
        for idx in range(len(scene.objects)):
            key = (idx, tuple(g))
            if key in seen:
                continue
            if scorer(g, scene, idx) > threshold:
                seen.add(key)
                matches.append((idx, list(g)))
    return matches


def build_triplets(scene: Scene, matches, vocab: Vocab, max_tokens: int = DEFAULT_MAX_TOKENS,
                   p_attr: float = 0.3, seed: int = 0) -> list[Triplet]:
    out = []

    def emit(idx, words):
        if len(words) > max_tokens - 2:
            raise ValueError(f"caption {' '.join(words)!r} exceeds {max_tokens - 2} words")
        box = scene.objects[idx].box.as_tuple()
        out.append(Triplet(scene.seed, box, len(words),
                           tuple(vocab.encode_caption(words, max_tokens))))

    for idx, words in matches:
        emit(idx, words)
    rng = np.random.default_rng([seed, 29])
    for idx, obj in enumerate(scene.objects):
        if rng.random() < p_attr:
            for attr in world.ATTRIBUTES:
                emit(idx, world.attribute_caption(obj, attr))
    return out


def build_scene_triplets(scene: Scene, vocab: Vocab, max_tokens: int = DEFAULT_MAX_TOKENS,
                         p_attr: float = 0.3, scorer: Scorer = grammar_score) -> list[Triplet]:
    text = world.alt_text(scene, scene.seed)
    grams = filter_ngrams(extract_ngrams(text))
    return build_triplets(scene, match_ngrams(scene, grams, scorer), vocab,
                          max_tokens, p_attr, scene.seed)


def build_dataset(scenes, vocab: Vocab | None = None, max_tokens: int = DEFAULT_MAX_TOKENS,
                  p_attr: float = 0.3) -> DatasetShard:
    vocab = vocab or Vocab()
    shard = DatasetShard()
    for scene in sorted(scenes, key=lambda s: s.seed):
        shard.scenes.append(scene)
        shard.triplets.extend(build_scene_triplets(scene, vocab, max_tokens, p_attr))
    return shard


def _conditioned(t: Triplet, mode: str) -> tuple[int, ...]:
    body = []
    for tok in t.tokens[1:]:
        if tok in (EOS, PAD):
            break
        body.append(tok)
    if mode == "bos-token":
        head = BOS
    elif mode == "length-token":
        head = length_token(len(body))
    else:
        raise ValueError(f"unknown prefix mode {mode!r}")
    return (head, *body)


def _is_proper_prefix(a, b) -> bool:
    return len(a) < len(b) and b[:len(a)] == a


def prefix_share_fraction(shard: DatasetShard, mode: str = "bos-token",
                          reduce: str = "image") -> float:
    """Fraction of same-box caption pairs where one conditioned sequence is a
    proper prefix of the other.

    ``reduce="image"`` averages per-image ratios (images without any pair are
    skipped); ``reduce="pooled"`` divides total sharing pairs by total pairs.
    Exact duplicate captions of a box are collapsed before pairing.
    """
    if not shard.triplets:
        raise ValueError("prefix statistic of an empty shard")
    if reduce not in ("image", "pooled"):
        raise ValueError(f"unknown reduction {reduce!r}")
    ratios, shared_total, pairs_total = [], 0, 0
    for boxes in shard.groups().values():
        shared = pairs = 0
        for triplets in boxes.values():
            seqs = sorted({_conditioned(t, mode) for t in triplets})
            for a, b in combinations(seqs, 2):
                pairs += 1
                shared += _is_proper_prefix(a, b) or _is_proper_prefix(b, a)
        if pairs:
            ratios.append(shared / pairs)
            shared_total += shared
            pairs_total += pairs
    if not pairs_total:
        return 0.0
    if reduce == "pooled":
        return shared_total / pairs_total
    return float(np.mean(ratios))


def length_histogram(shard: DatasetShard) -> dict[int, int]:
    counts = {k: 0 for k in range(1, 9)}
    for t in shard.triplets:
        counts[t.length] = counts.get(t.length, 0) + 1
    return counts


def write_shard(shard: DatasetShard, path) -> None:
    by_scene = defaultdict(list)
    for t in shard.triplets:
        by_scene[t.scene].append(t)
    with open(path, "w", encoding="utf-8") as fh:
        for scene in sorted(shard.scenes, key=lambda s: s.seed):
            fh.write(dumps_fixed({"kind": "scene", **scene.to_dict()}) + "\n")
            for t in by_scene.pop(scene.seed, []):
                fh.write(dumps_fixed({"kind": "triplet", "scene": t.scene, "box": list(t.box),
                                      "len": t.length, "tokens": list(t.tokens)}) + "\n")
        if by_scene:
            raise ValueError(f"triplets reference unknown scenes {sorted(by_scene)}")


def read_shard(path, vocab_size: int | None = None) -> DatasetShard:
    shard = DatasetShard()
    seeds = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                kind = rec["kind"]
                if kind == "scene":
                    scene = Scene.from_dict(rec)
                    shard.scenes.append(scene)
                    seeds.add(scene.seed)
                elif kind == "triplet":
                    t = Triplet(int(rec["scene"]), tuple(float(x) for x in rec["box"]),
                                int(rec["len"]), tuple(int(x) for x in rec["tokens"]))
                    _check_triplet(t, seeds, vocab_size)
                    shard.triplets.append(t)
                else:
                    raise ValueError(f"unknown record kind {kind!r}")
            except (ValueError, KeyError, TypeError) as exc:
                raise ShardFormatError(f"{path}:{lineno}: {exc}") from exc
    return shard


def _check_triplet(t: Triplet, seeds, vocab_size) -> None:
    if t.scene not in seeds:
        raise ValueError(f"triplet before its scene record (scene {t.scene})")
    if len(t.box) != 4:
        raise ValueError("box must have 4 coordinates")
    if not 1 <= t.length <= 8 or t.tokens[0] != length_token(t.length):
        raise ValueError("length field disagrees with tokens")
    if t.tokens[t.length + 1] != EOS or any(x != PAD for x in t.tokens[t.length + 2:]):
        raise ValueError("tokens are not [LEN_K, K words, EOS, PAD...]")
    if vocab_size is not None and max(t.tokens) >= vocab_size:
        raise ValueError("token id outside vocabulary")
