"""Causal self-attention sequence encoder over left-padded item-id matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    num_items: int
    max_len: int = 50
    d: int = 64
    layers: int = 2
    heads: int = 2
    dropout: float = 0.2
    ln_eps: float = 1e-5

    @property
    def vocab_rows(self) -> int:
        # row 0 is padding
        return self.num_items + 1

    def validate(self) -> None:
        if self.d % self.heads != 0:
            raise ConfigError(f"hidden size d={self.d} is not divisible by heads={self.heads}")
        if self.num_items < 1 or self.max_len < 1 or self.layers < 1:
            raise ConfigError("num_items, max_len and layers must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")


LAYER_KEYS = ("wq", "wk", "wv", "wo", "ff1", "ff2", "ln1_g", "ln1_b", "ln2_g", "ln2_b")


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(ad.DTYPE)


class EncoderParams:
    """Named parameter tensors of one encoder.

    ``item_embeddings`` may be the very same Tensor object held by another
    encoder; that is how embedding sharing is expressed.
    """

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    @property
    def item_embeddings(self) -> Tensor:
        return self.tensors["item_embeddings"]

    def layer(self, i: int) -> dict[str, Tensor]:
        return {k: self.tensors[f"layer{i}.{k}"] for k in LAYER_KEYS}

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + k: v for k, v in self.tensors.items()}


def init_params(config: EncoderConfig, seed: int, item_embeddings: Tensor | None = None) -> EncoderParams:
    """Draw encoder weights from a truncated normal (std 0.02); padding row zeroed.

    Passing ``item_embeddings`` reuses an existing table instead of drawing one.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    d, ff = config.d, 4 * config.d
    t: dict[str, Tensor] = {}
    emb = _trunc_normal(rng, (config.vocab_rows, d))
    emb[0] = 0.0
    if item_embeddings is None:
        t["item_embeddings"] = ad.parameter(emb, "item_embeddings")
    else:
        if item_embeddings.shape != (config.vocab_rows, d):
            raise ConfigError(f"shared embedding table has shape {item_embeddings.shape}")
        t["item_embeddings"] = item_embeddings
    t["positional_embeddings"] = ad.parameter(_trunc_normal(rng, (config.max_len, d)), "positional_embeddings")
    for i in range(config.layers):
        p = f"layer{i}."
        for k in ("wq", "wk", "wv", "wo"):
            t[p + k] = ad.parameter(_trunc_normal(rng, (d, d)), p + k)
        t[p + "ff1"] = ad.parameter(_trunc_normal(rng, (d, ff)), p + "ff1")
        t[p + "ff2"] = ad.parameter(_trunc_normal(rng, (ff, d)), p + "ff2")
        for k in ("ln1", "ln2"):
            t[p + k + "_g"] = ad.parameter(np.ones(d), p + k + "_g")
            t[p + k + "_b"] = ad.parameter(np.zeros(d), p + k + "_b")
    t["final_ln_g"] = ad.parameter(np.ones(d), "final_ln_g")
    t["final_ln_b"] = ad.parameter(np.zeros(d), "final_ln_b")
    return EncoderParams(config, t)


def causal_mask(T: int, validity: np.ndarray) -> np.ndarray:
    """Additive attention mask of shape [B, 1, T, T].

    Entry (t, j) is 0 when key j is at or before query t and is a real item,
    MASK_VALUE otherwise.
    """
    validity = np.asarray(validity, dtype=bool)
    allowed = np.tril(np.ones((T, T), dtype=bool))[None, :, :] & validity[:, None, :]
    return np.where(allowed, 0.0, ad.MASK_VALUE).astype(ad.DTYPE)[:, None, :, :]


def _future_penalty(T: int) -> np.ndarray:
    # a padding query has every key blocked; pushing future keys one step further
    # down keeps its (unused) output a function of positions <= t only
    return np.triu(np.full((T, T), ad.MASK_VALUE, dtype=ad.DTYPE), k=1)


def encode(
    ids: np.ndarray,
    params: EncoderParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
    valid: np.ndarray | None = None,
) -> Tensor:
    """Map a [B, T] id matrix to per-position hidden states [B, T, d].

    Pre-norm blocks: x + Attn(LN(x)), then x + FFN(LN(x)), final LayerNorm.
    ``valid`` marks real items; it defaults to ``ids != 0``.
    """
    cfg = params.config
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ad.ShapeError(f"encode expects [B, T] ids, got {ids.shape}")
    B, T = ids.shape
    if T != cfg.max_len:
        raise ad.ShapeError(f"batch width {T} != max_len {cfg.max_len}")
    if valid is None:
        valid = ids != 0
    valid = np.asarray(valid, dtype=bool)
    # leading columns that are padding in every row cannot influence any real
    # position; encode the rest and zero-fill the output
    cols = np.flatnonzero(valid.any(axis=0))
    start = int(cols[0]) if len(cols) else T - 1
    if start > 0:
        inner = _encode_window(ids[:, start:], valid[:, start:], params, start, train, rng)
        return ad.pad_axis1(inner, start)
    return _encode_window(ids, valid, params, 0, train, rng)


def _encode_window(ids, valid, params: EncoderParams, offset: int, train: bool, rng) -> Tensor:
    cfg = params.config
    B, T = ids.shape
    H, d = cfg.heads, cfg.d
    dh = d // H
    rate = cfg.dropout if train else 0.0

    x = ad.embedding_lookup(params.item_embeddings, ids)
    pos = params["positional_embeddings"]
    if offset:
        pos = ad.slice_rows(pos, offset)
    x = x * float(np.sqrt(d)) + pos
    x = ad.dropout(x, rate, rng, train)
    mask = causal_mask(T, valid) + _future_penalty(T)
    scale = 1.0 / float(np.sqrt(dh))

    for i in range(cfg.layers):
        w = params.layer(i)
        h = ad.layer_norm(x, w["ln1_g"], w["ln1_b"], cfg.ln_eps)

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q = heads(h @ w["wq"])
        k = heads(h @ w["wk"])
        v = heads(h @ w["wv"])
        att = ad.softmax((q @ k.transpose(0, 1, 3, 2)) * scale + mask)
        att = ad.dropout(att, rate, rng, train)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        x = x + ad.dropout(ctx @ w["wo"], rate, rng, train)

        h = ad.layer_norm(x, w["ln2_g"], w["ln2_b"], cfg.ln_eps)
        h = ad.gelu(h @ w["ff1"]) @ w["ff2"]
        x = x + ad.dropout(h, rate, rng, train)

    return ad.layer_norm(x, params["final_ln_g"], params["final_ln_b"], cfg.ln_eps)
