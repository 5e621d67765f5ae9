"""Word-level vocabulary with structural tokens."""

from __future__ import annotations

from .world import lexicon

PAD, EOS, BOS = 0, 1, 2
MAX_LENGTH_TOKEN = 8
SPECIAL = ["<pad>", "<e>", "<s>"] + [f"LEN_{k}" for k in range(1, MAX_LENGTH_TOKEN + 1)]
FIRST_WORD_ID = len(SPECIAL)


def length_token(k: int) -> int:
    if not 1 <= k <= MAX_LENGTH_TOKEN:
        raise ValueError(f"no length token for {k}")
    return BOS + k


class Vocab:
    """PAD=0, EOS=1, BOS=2, LEN_1..LEN_8=3..10, then sorted lexicon words."""

    def __init__(self, words=None):
        words = sorted(set(words if words is not None else lexicon()))
        self.itos = SPECIAL + words
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    @property
    def structural_ids(self) -> list[int]:
        """Tokens a decoder must never emit (everything special except EOS)."""
        return [i for i in range(FIRST_WORD_ID) if i != EOS]

    def tokenize(self, words) -> list[int]:
        try:
            return [self.stoi[w] for w in words]
        except KeyError as exc:
            raise KeyError(f"out-of-vocabulary word {exc.args[0]!r}") from None

    def detokenize(self, ids) -> list[str]:
        return [self.itos[i] for i in ids]

    def words_of(self, ids) -> list[str]:
        """Content words of a token row: drops the conditioning token, stops at EOS."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS or i == PAD:
                break
            if i >= FIRST_WORD_ID:
                out.append(self.itos[i])
        return out

    def encode_caption(self, words, max_len: int) -> list[int]:
        """``[LEN_K, w1..wK, EOS]`` padded to ``max_len``."""
        k = len(words)
        if k + 2 > max_len:
            raise ValueError(f"caption of {k} words does not fit in {max_len} tokens")
        ids = [length_token(k)] + self.tokenize(words) + [EOS]
        return ids + [PAD] * (max_len - len(ids))

    def parse_prefix(self, text: str) -> list[int]:
        """Parse e.g. ``"LEN_4 the color is"`` into token ids."""
        return self.tokenize(text.split())
