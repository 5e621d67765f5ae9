"""Finite-difference check of the full caption loss on a tiny model."""

from __future__ import annotations

import numpy as np

from . import model as M
from . import nn
from .vocab import EOS, FIRST_WORD_ID, PAD, Vocab, length_token

TINY = dict(image_size=16, patch=8, d_model=16, enc_layers=1, dec_layers=1, heads=2, max_tokens=6)


def tiny_problem(seed: int = 0, dtype=np.float64, **overrides):
    """A two-caption batch over one random image, with params in ``dtype``."""
    config = M.ModelConfig(vocab_size=len(Vocab()), **{**TINY, **overrides})
    rng = np.random.default_rng([seed, 7])
    size = config.image_size
    images = rng.random((1, size, size, 3)).astype(dtype)
    words = rng.integers(FIRST_WORD_ID, config.vocab_size, size=(2, 3))
    tokens = np.full((2, config.max_tokens), PAD)
    tokens[0, :5] = [length_token(3), *words[0], EOS]
    tokens[1, :3] = [length_token(1), words[1, 0], EOS]
    boxes = np.array([[0.3, 0.4, 0.2, 0.2], [0.6, 0.5, 0.1, 0.3]], dtype=dtype)
    batch = M.Batch(images, np.array([0, 0]), boxes, tokens)
    return config, M.init_params(config, seed, dtype), batch


def check_loss_gradient(seed: int = 0, eps: float = 1e-5, dtype=np.longdouble,
                        max_coords: int | None = None, **overrides) -> float:
    """Max relative error between backprop and central differences of the loss."""
    config, params, batch = tiny_problem(seed, dtype, **overrides)
    return nn.grad_check(
        lambda p: M.loss_and_grads(p, config, batch),
        params, eps=eps, max_coords=max_coords, seed=seed, dtype=dtype,
        value_fun=lambda p: M.loss_and_grads(p, config, batch, with_grads=False)[0])
