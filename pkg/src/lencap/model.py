"""Region captioner: patch-embedded image tokens and a box token form an unmasked
prefix for a causal text decoder.

Parameters live in a flat ``dict[str, ndarray]``; ``forward``/``backward`` are
hand-derived for this fixed architecture (pre-norm blocks, GELU MLP, learned
positional embeddings, untied output head).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .vocab import EOS, PAD, Vocab

# pixels are shifted so the grey background embeds near zero; without this every
# patch carries the same large offset and object content trains very slowly
PIXEL_MEAN = 0.5
PIXEL_SCALE = 0.25


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch: int = 8
    d_model: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    vocab_size: int = len(Vocab())
    max_tokens: int = 12
    ff_mult: int = 4
    # the length-token position is trained to predict the first word
    loss_on_first: bool = True

    def __post_init__(self):
        for name in ("image_size", "patch", "d_model", "heads", "vocab_size", "max_tokens",
                     "ff_mult"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.enc_layers < 0 or self.dec_layers < 1:
            raise ValueError("need at least one decoder layer")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.image_size % self.patch:
            raise ValueError("image_size must be a multiple of patch")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def d_ff(self) -> int:
        return self.ff_mult * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    images: np.ndarray  # (S, H, W, 3)
    image_index: np.ndarray  # (B,) row of ``images`` each triplet uses
    boxes: np.ndarray  # (B, 4) cx, cy, w, h
    tokens: np.ndarray  # (B, M)

    def __len__(self) -> int:
        return len(self.tokens)


# ---------------------------------------------------------------- parameters

def _block_shapes(prefix: str, d: int, d_ff: int) -> dict[str, tuple]:
    return {
        f"{prefix}.ln1.g": (d,), f"{prefix}.ln1.b": (d,),
        f"{prefix}.attn.wqkv": (d, 3 * d),
        f"{prefix}.attn.bq": (d,), f"{prefix}.attn.bv": (d,),
        f"{prefix}.attn.wo": (d, d), f"{prefix}.attn.bo": (d,),
        f"{prefix}.ln2.g": (d,), f"{prefix}.ln2.b": (d,),
        f"{prefix}.mlp.w1": (d, d_ff), f"{prefix}.mlp.b1": (d_ff,),
        f"{prefix}.mlp.w2": (d_ff, d), f"{prefix}.mlp.b2": (d,),
    }


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    d, V = config.d_model, config.vocab_size
    shapes = {
        "patch.w": (config.patch_dim, d), "patch.b": (d,),
        "vision_pos": (config.n_patches, d),
    }
    for i in range(config.enc_layers):
        shapes.update(_block_shapes(f"enc{i}", d, config.d_ff))
    shapes.update({"enc_ln.g": (d,), "enc_ln.b": (d,),
                   "box.w": (4, d), "box.b": (d,),
                   "tok_emb": (V, d), "text_pos": (config.max_tokens, d)})
    for i in range(config.dec_layers):
        shapes.update(_block_shapes(f"dec{i}", d, config.d_ff))
    shapes.update({"dec_ln.g": (d,), "dec_ln.b": (d,), "head.w": (d, V), "head.b": (V,)})
    return shapes


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> nn.Params:
    """Truncated-normal (std 0.02) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape, dtype=dtype)
        elif len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = nn.truncated_normal(rng, shape, 0.02, dtype)
    return params


def check_params(params: nn.Params, config: ModelConfig) -> None:
    shapes = param_shapes(config)
    if set(params) != set(shapes):
        raise ValueError(f"parameter names differ from config: "
                         f"{sorted(set(params) ^ set(shapes))}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape} != expected {shape}")


# ---------------------------------------------------------------- blocks

def _linear_backward(dy, x, w):
    d_in, d_out = w.shape
    dw = x.reshape(-1, d_in).T @ dy.reshape(-1, d_out)
    db = dy.reshape(-1, d_out).sum(axis=0)
    return dy @ w.T, dw, db


def _qkv_bias(params, prefix):
    # keys carry no bias: a shared key offset cancels inside the softmax
    bq = params[f"{prefix}.attn.bq"]
    return np.concatenate([bq, np.zeros_like(bq), params[f"{prefix}.attn.bv"]])


def block_forward(params, prefix, x, mask, heads):
    p = lambda k: params[f"{prefix}.{k}"]  # noqa: E731
    a, c_ln1 = nn.layer_norm_forward(x, p("ln1.g"), p("ln1.b"))
    qkv = a @ p("attn.wqkv") + _qkv_bias(params, prefix)
    q, k, v = (nn.split_heads(t, heads) for t in np.split(qkv, 3, axis=-1))
    o, c_att = nn.attention_forward(q, k, v, mask)
    om = nn.merge_heads(o)
    x1 = x + om @ p("attn.wo") + p("attn.bo")
    b, c_ln2 = nn.layer_norm_forward(x1, p("ln2.g"), p("ln2.b"))
    h = b @ p("mlp.w1") + p("mlp.b1")
    g, c_gelu = nn.gelu_forward(h)
    out = x1 + g @ p("mlp.w2") + p("mlp.b2")
    return out, (prefix, heads, a, c_ln1, c_att, om, b, c_ln2, g, c_gelu)


def block_backward(params, dout, cache, grads):
    prefix, heads, a, c_ln1, c_att, om, b, c_ln2, g, c_gelu = cache
    p = lambda k: params[f"{prefix}.{k}"]  # noqa: E731

    dg, grads[f"{prefix}.mlp.w2"], grads[f"{prefix}.mlp.b2"] = _linear_backward(
        dout, g, p("mlp.w2"))
    dh = nn.gelu_backward(dg, c_gelu)
    db, grads[f"{prefix}.mlp.w1"], grads[f"{prefix}.mlp.b1"] = _linear_backward(
        dh, b, p("mlp.w1"))
    dx1, grads[f"{prefix}.ln2.g"], grads[f"{prefix}.ln2.b"] = nn.layer_norm_backward(db, c_ln2)
    dx1 = dx1 + dout

    dom, grads[f"{prefix}.attn.wo"], grads[f"{prefix}.attn.bo"] = _linear_backward(
        dx1, om, p("attn.wo"))
    dq, dk, dv = nn.attention_backward(nn.split_heads(dom, heads), c_att)
    dqkv = np.concatenate([nn.merge_heads(t) for t in (dq, dk, dv)], axis=-1)
    da, grads[f"{prefix}.attn.wqkv"], dbias = _linear_backward(dqkv, a, p("attn.wqkv"))
    d = dbias.shape[0] // 3
    grads[f"{prefix}.attn.bq"], grads[f"{prefix}.attn.bv"] = dbias[:d], dbias[2 * d:]
    dx, grads[f"{prefix}.ln1.g"], grads[f"{prefix}.ln1.b"] = nn.layer_norm_backward(da, c_ln1)
    return dx + dx1


# ---------------------------------------------------------------- model pieces

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    s, h, w, c = images.shape
    x = images.reshape(s, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(s, (h // patch) * (w // patch), patch * patch * c)


def _check_images(images, config):
    if images.ndim != 4 or images.shape[1:] != (config.image_size, config.image_size, 3):
        raise ValueError(f"expected images of shape (S, {config.image_size}, "
                         f"{config.image_size}, 3), got {images.shape}")


def encode_image_forward(params, config: ModelConfig, images):
    _check_images(images, config)
    images = (images.astype(params["patch.w"].dtype, copy=False) - PIXEL_MEAN) / PIXEL_SCALE
    patches = patchify(images, config.patch)
    x = patches @ params["patch.w"] + params["patch.b"] + params["vision_pos"]
    full = np.ones((config.n_patches, config.n_patches), dtype=bool)
    caches = []
    for i in range(config.enc_layers):
        x, c = block_forward(params, f"enc{i}", x, full, config.heads)
        caches.append(c)
    out, c_ln = nn.layer_norm_forward(x, params["enc_ln.g"], params["enc_ln.b"])
    return out, (patches, caches, c_ln)


def encode_image_backward(params, config, dout, cache, grads):
    patches, caches, c_ln = cache
    dx, grads["enc_ln.g"], grads["enc_ln.b"] = nn.layer_norm_backward(dout, c_ln)
    for c in reversed(caches):
        dx = block_backward(params, dx, c, grads)
    grads["vision_pos"] = dx.sum(axis=0)
    _, grads["patch.w"], grads["patch.b"] = _linear_backward(dx, patches, params["patch.w"])


def encode_image(params, config: ModelConfig, image: np.ndarray) -> np.ndarray:
    """(H, W, 3) image -> (n, d) features; a leading batch axis is also accepted."""
    single = image.ndim == 3
    feats, _ = encode_image_forward(params, config, image[None] if single else image)
    return feats[0] if single else feats


def embed_box(params, box) -> np.ndarray:
    """Affine map of (cx, cy, w, h) to one d-dimensional token."""
    box = np.asarray(box, dtype=params["box.w"].dtype)
    return box @ params["box.w"] + params["box.b"]


def decoder_mask(n_prefix: int, n_text: int) -> np.ndarray:
    """Prefix slots see each other; text position i sees the prefix and text <= i."""
    total = n_prefix + n_text
    mask = np.zeros((total, total), dtype=bool)
    mask[:, :n_prefix] = True
    mask[n_prefix:, n_prefix:] = np.tril(np.ones((n_text, n_text), dtype=bool))
    return mask


def _check_tokens(tokens, config):
    if tokens.shape[-1] > config.max_tokens:
        raise ValueError(f"at most {config.max_tokens} text tokens")
    if tokens.size and (tokens.max() >= config.vocab_size or tokens.min() < 0):
        raise ValueError("token id outside vocabulary")


def decode_forward(params, config: ModelConfig, vision, box_tok, tokens):
    """vision (B, n, d), box_tok (B, d), tokens (B, T) -> logits (B, T, V)."""
    tokens = np.asarray(tokens)
    _check_tokens(tokens, config)
    t = tokens.shape[-1]
    text = params["tok_emb"][tokens] + params["text_pos"][:t]
    x = np.concatenate([vision, box_tok[:, None, :], text], axis=1)
    n_prefix = vision.shape[1] + 1
    mask = decoder_mask(n_prefix, t)
    caches = []
    for i in range(config.dec_layers):
        x, c = block_forward(params, f"dec{i}", x, mask, config.heads)
        caches.append(c)
    hid, c_ln = nn.layer_norm_forward(x[:, n_prefix:], params["dec_ln.g"], params["dec_ln.b"])
    logits = hid @ params["head.w"] + params["head.b"]
    return logits, (tokens, n_prefix, caches, c_ln, hid, x.shape)


def decode_backward(params, config, dlogits, cache, grads):
    tokens, n_prefix, caches, c_ln, hid, xshape = cache
    dhid, grads["head.w"], grads["head.b"] = _linear_backward(dlogits, hid, params["head.w"])
    dtext, grads["dec_ln.g"], grads["dec_ln.b"] = nn.layer_norm_backward(dhid, c_ln)
    dx = np.zeros(xshape, dtype=dlogits.dtype)
    dx[:, n_prefix:] = dtext
    for c in reversed(caches):
        dx = block_backward(params, dx, c, grads)
    dtext = dx[:, n_prefix:]
    t = tokens.shape[-1]
    grads["text_pos"] = np.zeros_like(params["text_pos"])
    grads["text_pos"][:t] = dtext.sum(axis=0)
    grads["tok_emb"] = np.zeros_like(params["tok_emb"])
    np.add.at(grads["tok_emb"], tokens.reshape(-1), dtext.reshape(-1, dtext.shape[-1]))
    return dx[:, :n_prefix - 1], dx[:, n_prefix - 1]


def decode_logits(params, config: ModelConfig, vision, box_tok, tokens) -> np.ndarray:
    """Logits over text positions for one (n, d) vision array or a batch of them."""
    single = np.ndim(tokens) == 1
    if single:
        vision, box_tok, tokens = vision[None], np.asarray(box_tok).reshape(1, -1), \
            np.asarray(tokens)[None]
    logits, _ = decode_forward(params, config, vision, box_tok, tokens)
    return logits[0] if single else logits


# ---------------------------------------------------------------- loss

def targets_and_mask(tokens: np.ndarray, config: ModelConfig):
    """Targets are the inputs shifted left by one; PAD targets carry no loss.

    Anything after the first EOS target is masked too, so whatever sits in the
    padding never contributes.
    """
    tokens = np.asarray(tokens)
    targets = np.concatenate([tokens[:, 1:], np.full((len(tokens), 1), PAD)], axis=1)
    eos_before = np.cumsum(targets == EOS, axis=1) - (targets == EOS)
    mask = (targets != PAD) & (eos_before == 0)
    if not config.loss_on_first:
        mask[:, 0] = False
    return targets, mask


def forward(params, config: ModelConfig, batch: Batch):
    vision, c_enc = encode_image_forward(params, config, batch.images)
    vis = vision[batch.image_index]
    box_tok = embed_box(params, batch.boxes)
    logits, c_dec = decode_forward(params, config, vis, box_tok, batch.tokens)
    return logits, (c_enc, c_dec, vision.shape)


def caption_loss(params, config: ModelConfig, batch: Batch) -> float:
    """Mean token negative log-likelihood of the batch captions."""
    return loss_and_grads(params, config, batch, with_grads=False)[0]


def loss_and_grads(params, config: ModelConfig, batch: Batch, with_grads: bool = True):
    if len(batch) == 0:
        raise ValueError("empty batch")
    logits, (c_enc, c_dec, vshape) = forward(params, config, batch)
    targets, mask = targets_and_mask(batch.tokens, config)
    loss, c_ce = nn.cross_entropy_forward(logits, targets, mask)
    if not with_grads:
        return loss, None
    grads: nn.Params = {}
    dlogits = nn.cross_entropy_backward(c_ce)
    dvis, dbox = decode_backward(params, config, dlogits, c_dec, grads)
    boxes = np.asarray(batch.boxes, dtype=dbox.dtype)
    grads["box.w"] = boxes.T @ dbox
    grads["box.b"] = dbox.sum(axis=0)
    dvision = np.zeros(vshape, dtype=dvis.dtype)
    np.add.at(dvision, np.asarray(batch.image_index), dvis)
    encode_image_backward(params, config, dvision, c_enc, grads)
    return loss, grads


# ---------------------------------------------------------------- cached decoding

def prefix_cache(params, config: ModelConfig, vision, box_tok):
    """Per-layer attention keys/values of the (vision, box) prefix.

    The prefix never attends to text, so these are fixed for a whole rollout.
    vision (R, n, d), box_tok (R, d) -> list of (k, v) with shape (R, h, n+1, dh).
    """
    x = np.concatenate([vision, box_tok[:, None, :]], axis=1)
    full = np.ones((x.shape[1], x.shape[1]), dtype=bool)
    cache = []
    for i in range(config.dec_layers):
        pre = f"dec{i}"
        a = nn.layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        qkv = a @ params[f"{pre}.attn.wqkv"] + _qkv_bias(params, pre)
        _, k, v = (nn.split_heads(t, config.heads) for t in np.split(qkv, 3, axis=-1))
        cache.append((k, v))
        if i + 1 < config.dec_layers:
            x, _ = block_forward(params, pre, x, full, config.heads)
    return cache


def cached_text_logits(params, config: ModelConfig, cache, tokens) -> np.ndarray:
    """Text logits (R, T, V) given a prefix cache with leading dimension R."""
    tokens = np.asarray(tokens)
    _check_tokens(tokens, config)
    t = tokens.shape[-1]
    x = params["tok_emb"][tokens] + params["text_pos"][:t]
    n_prefix = cache[0][0].shape[-2]
    mask = decoder_mask(n_prefix, t)[n_prefix:]
    for i, (pk, pv) in enumerate(cache):
        pre = f"dec{i}"
        p = lambda k: params[f"{pre}.{k}"]  # noqa: E731
        a = nn.layer_norm(x, p("ln1.g"), p("ln1.b"))
        qkv = a @ p("attn.wqkv") + _qkv_bias(params, pre)
        q, k, v = (nn.split_heads(z, config.heads) for z in np.split(qkv, 3, axis=-1))
        o = nn.attention(q, np.concatenate([pk, k], axis=-2),
                         np.concatenate([pv, v], axis=-2), mask)
        x = x + nn.merge_heads(o) @ p("attn.wo") + p("attn.bo")
        b = nn.layer_norm(x, p("ln2.g"), p("ln2.b"))
        x = x + nn.gelu_forward(b @ p("mlp.w1") + p("mlp.b1"))[0] @ p("mlp.w2") + p("mlp.b2")
    hid = nn.layer_norm(x, params["dec_ln.g"], params["dec_ln.b"])
    return hid @ params["head.w"] + params["head.b"]
