"""Generator/discriminator joint training.

The generator is a causal encoder with a softmax head over the shared item
table, trained by next-item likelihood.  For each training row a fraction
``alpha`` of the valid target positions is replaced by items drawn from the
generator; the discriminator (an encoder plus a scalar sigmoid head) reads
the rewritten target row and labels every position real or fake.  The total
loss is ``nip + lam * disc``.  At inference the generator is dropped and the
discriminator encoder ranks items by dot product with the shared table.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PaddedBatch, SplitDataset, pad_and_batch, pad_left
from .encoder import EncoderConfig, EncoderParams, encode, init_params
from .metrics import MetricsReport, evaluate_split
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

VARIANTS = ("elecrec_es", "elecrec_fs", "generator_only", "sequential_bce")
HISTORY_COLUMNS = ["epoch", "split", "hr5", "hr10", "ndcg5", "ndcg10", "loss_nip", "loss_disc", "wall_ms"]


class SamplerError(ValueError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.5
    lam: float = 0.5
    variant: str = "elecrec_fs"
    sampler_mode: str = "multinomial"
    epochs_max: int = 200
    patience: int = 40
    batch_size: int = 256
    max_len: int = 50
    d: int = 64
    layers: int = 2
    heads: int = 2
    dropout: float = 0.2
    lr: float = 1e-3
    seed: int = 0
    clock: str = "wall"

    @property
    def sharing_mode(self) -> str:
        return "ES" if self.variant == "elecrec_es" else "FS"

    @property
    def uses_discriminator(self) -> bool:
        return self.variant in ("elecrec_es", "elecrec_fs")

    def validate(self) -> list[str]:
        """Return one message per invalid field (empty when valid)."""
        errs = []
        if not 0.0 <= self.alpha <= 1.0:
            errs.append(f"alpha={self.alpha} outside [0, 1]")
        if self.lam < 0.0:
            errs.append(f"lambda={self.lam} must be >= 0")
        if self.variant not in VARIANTS:
            errs.append(f"variant={self.variant!r} not one of {', '.join(VARIANTS)}")
        if self.sampler_mode not in ("multinomial", "argmax"):
            errs.append(f"sampler_mode={self.sampler_mode!r} not multinomial|argmax")
        if self.clock not in ("wall", "none"):
            errs.append(f"clock={self.clock!r} not wall|none")
        for name in ("epochs_max", "patience", "batch_size", "d", "layers", "heads"):
            if getattr(self, name) < 1:
                errs.append(f"{name}={getattr(self, name)} must be >= 1")
        if self.max_len < 2:
            errs.append(f"max_len={self.max_len} must be >= 2")
        if self.heads >= 1 and self.d % self.heads:
            errs.append(f"d={self.d} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            errs.append(f"dropout={self.dropout} outside [0, 1)")
        if self.lr < 0.0:
            errs.append(f"lr={self.lr} must be >= 0")
        return errs

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class Streams:
    """Independent random streams derived from one seed.

    Keeping dropout, sampling and negative draws on separate streams means a
    variant that skips the discriminator consumes the generator streams
    exactly as the full model does.
    """

    NAMES = ("init_gen", "init_disc", "init_head", "gen_dropout", "sampler", "disc_dropout", "negatives")

    def __init__(self, seed: int):
        children = np.random.SeedSequence(seed).spawn(len(self.NAMES))
        for name, child in zip(self.NAMES, children):
            setattr(self, name, np.random.default_rng(child))

    def int_seed(self, name: str) -> int:
        return int(getattr(self, name).integers(2**31))


@dataclass
class StepReport:
    loss_nip: float
    loss_disc: float
    loss_total: float


@dataclass
class SampledBatch:
    replaced_ids: np.ndarray  # [B, T] rewritten target row
    replacement_mask: np.ndarray  # [B, T] bool
    labels: np.ndarray  # [B, T] 1 = real, 0 = fake
    validity: np.ndarray  # [B, T] bool


class Model:
    """Parameters of one variant plus the policy used to rank items."""

    def __init__(self, config: TrainConfig, num_items: int, gen: EncoderParams,
                 disc: EncoderParams | None = None, head: dict[str, Tensor] | None = None):
        self.config = config
        self.num_items = num_items
        self.gen = gen
        self.disc = disc
        self.head = head or {}

    @property
    def max_len(self) -> int:
        return self.gen.config.max_len

    @property
    def item_embeddings(self) -> Tensor:
        return self.gen.item_embeddings

    def inference_encoder(self) -> EncoderParams:
        return self.disc if self.disc is not None else self.gen

    def parameters(self) -> dict[str, Tensor]:
        """Unique trainable tensors keyed by stable names."""
        out: dict[str, Tensor] = {"item_embeddings": self.item_embeddings}
        shared = self.disc is self.gen or self.disc is None
        for k, t in self.gen.tensors.items():
            if k != "item_embeddings":
                out[("enc." if shared else "gen.") + k] = t
        if self.disc is not None and not shared:
            for k, t in self.disc.tensors.items():
                if k != "item_embeddings":
                    out["disc." + k] = t
        for k, t in self.head.items():
            out["head." + k] = t
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(arrays) != set(params):
            missing = sorted(set(params) ^ set(arrays))
            raise KeyError(f"tensor set mismatch: {missing}")
        for k, t in params.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"{k}: shape {arrays[k].shape} != {t.shape}")
            t.data[...] = arrays[k]

    def score(self, ids: np.ndarray) -> np.ndarray:
        """Full-vocabulary scores [B, V+1] from the last position of each row."""
        with ad.no_grad():
            h = encode(ids, self.inference_encoder(), train=False)
            last = h.data[:, -1, :]
            scores = last @ self.item_embeddings.data.T
        scores[:, 0] = -np.inf
        return scores


def build_variant(mode: str, config: TrainConfig, num_items: int) -> Model:
    """Construct the model for one of the four ablation variants.

    elecrec_fs  generator and discriminator share the whole encoder
    elecrec_es  they share only the item-embedding table
    generator_only  the generator alone, ranked by its own encoder
    sequential_bce  one encoder trained with one sampled negative per position
    """
    if mode not in VARIANTS:
        raise ValueError(f"unknown variant {mode!r}; choose from {', '.join(VARIANTS)}")
    config = replace(config, variant=mode)
    if mode == "generator_only":
        config = replace(config, lam=0.0)
    errs = config.validate()
    if errs:
        raise ValueError("; ".join(errs))
    streams = Streams(config.seed)
    enc_cfg = EncoderConfig(num_items, config.max_len, config.d, config.layers, config.heads, config.dropout)
    gen = init_params(enc_cfg, streams.int_seed("init_gen"))
    disc_seed = streams.int_seed("init_disc")
    head_rng = streams.init_head
    if mode == "elecrec_fs":
        disc = gen
    elif mode == "elecrec_es":
        disc = init_params(enc_cfg, disc_seed, item_embeddings=gen.item_embeddings)
    else:
        return Model(config, num_items, gen)
    head = {
        "w": ad.parameter(head_rng.standard_normal(config.d) * 0.02, "head.w"),
        "b": ad.parameter(np.zeros(1), "head.b"),
    }
    return Model(config, num_items, gen, disc, head)


# ---------------------------------------------------------------- heads & losses


def _pad_column_mask(rows: int, dtype) -> np.ndarray:
    m = np.zeros(rows, dtype=dtype)
    m[0] = ad.MASK_VALUE
    return m


def generator_logits(hidden: Tensor, item_embeddings: Tensor) -> Tensor:
    """Dot product of each hidden state with every item row; padding column masked."""
    if hidden.shape[-1] != item_embeddings.shape[-1]:
        raise ad.ShapeError(f"hidden size {hidden.shape[-1]} != embedding size {item_embeddings.shape[-1]}")
    logits = hidden @ item_embeddings.T
    return logits + _pad_column_mask(item_embeddings.shape[0], logits.data.dtype)


def nip_loss(logits: Tensor, targets: np.ndarray, validity: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the true next item over valid positions."""
    V = logits.shape[-1]
    return ad.softmax_cross_entropy(logits.reshape(-1, V), np.asarray(targets).reshape(-1),
                                    np.asarray(validity).reshape(-1))


def discriminator_scores(hidden_hat: Tensor, head: dict[str, Tensor]) -> Tensor:
    """Per-position real/fake logit <w, h> + b (sigmoid applied inside the loss)."""
    w = head["w"]
    d = hidden_hat.shape[-1]
    if w.shape != (d,):
        raise ad.ShapeError(f"discriminator vector {w.shape} does not match hidden size {d}")
    lead = hidden_hat.shape[:-1]
    return (hidden_hat @ w.reshape(d, 1)).reshape(lead) + head["b"].reshape(())


def discriminator_loss(scores: Tensor, sampled: SampledBatch) -> Tensor:
    return ad.sigmoid_bce(scores, sampled.labels, sampled.validity)


# ---------------------------------------------------------------- sampler


def replacement_count(alpha: float, valid_count: int) -> int:
    """ceil(alpha * valid_count), capped at valid_count.

    The 1e-9 slack stops products such as 0.1 * 30 = 3.0000000000000004 from
    rounding up.
    """
    return min(valid_count, max(0, math.ceil(alpha * valid_count - 1e-9)))


def sample_positions(validity_row: np.ndarray, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Distinct positions drawn uniformly from the valid entries of one row."""
    if not 0.0 <= alpha <= 1.0:
        raise SamplerError(f"alpha={alpha} outside [0, 1]")
    valid_pos = np.flatnonzero(validity_row)
    k = replacement_count(alpha, len(valid_pos))
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    return np.sort(rng.choice(valid_pos, size=k, replace=False))


def draw_from_logits(logits: np.ndarray, mode: str, rng: np.random.Generator) -> np.ndarray:
    """One item per row: multinomial over softmax(logits) or argmax (lowest id on ties)."""
    if mode == "argmax":
        return logits.argmax(axis=1)
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    cdf = np.cumsum(p, axis=1)
    u = rng.random(len(z)) * cdf[:, -1]
    picks = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(picks, logits.shape[1] - 1)


def sample_replacements(
    batch: PaddedBatch,
    positions: list[np.ndarray],
    gen_logits: np.ndarray,
    mode: str,
    rng: np.random.Generator,
) -> SampledBatch:
    """Rewrite the target row at the sampled positions with generator draws.

    ``gen_logits[b, t]`` is the generator's distribution for the target at
    (b, t), i.e. conditioned on the inputs up to t.  Labels are 1 where the
    row still holds the original target, including draws that hit it.
    """
    B, T = batch.target_ids.shape
    mask = np.zeros((B, T), dtype=bool)
    for b, pos in enumerate(positions):
        if len(pos) and not batch.validity[b, pos].all():
            raise SamplerError(f"row {b}: sampled position outside the valid region")
        mask[b, pos] = True
    replaced = batch.target_ids.copy()
    if mask.any():
        replaced[mask] = draw_from_logits(np.asarray(gen_logits)[mask], mode, rng)
    labels = ((replaced == batch.target_ids) & batch.validity).astype(np.float32)
    return SampledBatch(replaced, mask, labels, batch.validity.copy())


def sample_batch(batch: PaddedBatch, gen_logits: np.ndarray, alpha: float, mode: str,
                 rng: np.random.Generator) -> SampledBatch:
    positions = [sample_positions(row, alpha, rng) for row in batch.validity]
    return sample_replacements(batch, positions, gen_logits, mode, rng)


# ---------------------------------------------------------------- steps


def _dense_logits(batch: PaddedBatch, flat_idx: np.ndarray, logits_valid: np.ndarray) -> np.ndarray:
    B, T = batch.input_ids.shape
    full = np.zeros((B * T, logits_valid.shape[1]), dtype=logits_valid.dtype)
    full[flat_idx] = logits_valid
    return full.reshape(B, T, -1)


def forward_losses(model: Model, batch: PaddedBatch, streams: Streams, train: bool = True,
                   sampled: SampledBatch | None = None):
    """Build the training graph for one batch.

    Returns (nip, disc, total, sampled) where ``disc`` and ``sampled`` are None
    for variants without a discriminator.  A given ``sampled`` batch is used
    as is instead of drawing replacements.
    """
    cfg = model.config
    B, T = batch.input_ids.shape
    flat_valid = np.flatnonzero(batch.validity.reshape(-1))
    d = cfg.d

    h = encode(batch.input_ids, model.gen, train=train, rng=streams.gen_dropout)
    h_valid = ad.embedding_lookup(h.reshape(B * T, d), flat_valid)
    targets = batch.target_ids.reshape(-1)[flat_valid]

    if cfg.variant == "sequential_bce":
        return _sequential_bce(model, h_valid, targets, streams) + (None,)

    logits = generator_logits(h_valid, model.item_embeddings)
    nip = ad.softmax_cross_entropy(logits, targets, np.ones(len(targets), dtype=bool))
    if not cfg.uses_discriminator:
        return nip, None, nip, None

    if sampled is None:
        sampled = sample_batch(batch, _dense_logits(batch, flat_valid, logits.data), cfg.alpha,
                               cfg.sampler_mode, streams.sampler)
    h_hat = encode(sampled.replaced_ids, model.disc, train=train, rng=streams.disc_dropout,
                   valid=batch.validity)
    h_hat_valid = ad.embedding_lookup(h_hat.reshape(B * T, d), flat_valid)
    scores = discriminator_scores(h_hat_valid, model.head)
    disc = ad.sigmoid_bce(scores, sampled.labels.reshape(-1)[flat_valid], np.ones(len(flat_valid), dtype=bool))
    total = nip + disc * float(cfg.lam)
    return nip, disc, total, sampled


def _sequential_bce(model: Model, h_valid: Tensor, targets: np.ndarray, streams: Streams):
    negatives = sequential_bce_negatives(targets, model.num_items, streams.negatives)
    emb = model.item_embeddings
    pos = (h_valid * ad.embedding_lookup(emb, targets)).sum(axis=-1)
    neg = (h_valid * ad.embedding_lookup(emb, negatives)).sum(axis=-1)
    ones = np.ones(len(targets), dtype=bool)
    loss = ad.sigmoid_bce(pos, np.ones(len(targets)), ones) + ad.sigmoid_bce(neg, np.zeros(len(targets)), ones)
    return loss, None, loss


def sequential_bce_negatives(targets: np.ndarray, num_items: int, rng: np.random.Generator) -> np.ndarray:
    """One uniformly drawn non-target item per target."""
    r = rng.integers(1, num_items, size=len(targets))
    return np.where(r >= targets, r + 1, r)


def joint_step(model: Model, batch: PaddedBatch, state: AdamState, streams: Streams) -> StepReport:
    nip, disc, total, _ = forward_losses(model, batch, streams)
    ad.backward(total)
    adam_step(model.parameters(), state)
    return StepReport(float(nip.data), float(disc.data) if disc is not None else 0.0, float(total.data))


# ---------------------------------------------------------------- loop


@dataclass
class HistoryRow:
    epoch: int
    split: str
    report: MetricsReport
    loss_nip: float | None
    loss_disc: float | None
    wall_ms: float | None

    def as_list(self) -> list[str]:
        r = self.report

        def fmt(x):
            return "" if x is None else f"{x:.6f}"

        return [str(self.epoch), self.split, fmt(r.hr[5]), fmt(r.hr[10]), fmt(r.ndcg[5]), fmt(r.ndcg[10]),
                fmt(self.loss_nip), fmt(self.loss_disc), "" if self.wall_ms is None else f"{self.wall_ms:.0f}"]


def history_csv(rows: list[HistoryRow], header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(HISTORY_COLUMNS)
    for row in rows:
        w.writerow(row.as_list())
    return buf.getvalue()


@dataclass
class TrainResult:
    model: Model
    history: list[HistoryRow]
    best_epoch: int
    best_valid: MetricsReport
    stopped_early: bool
    steps: int = 0
    extra: dict = field(default_factory=dict)


def train_loop(split: SplitDataset, config: TrainConfig, model: Model | None = None,
               history_path: str | None = None, on_epoch=None) -> TrainResult:
    """Train until validation NDCG@10 stalls for ``patience`` epochs or ``epochs_max`` is hit.

    The returned model holds the parameters of the best validation epoch.
    """
    if model is None:
        model = build_variant(config.variant, config, split.num_items)
    config = model.config
    streams = Streams(config.seed)
    state = AdamState(lr=config.lr)
    history: list[HistoryRow] = []
    best = -1.0
    best_epoch = 0
    best_arrays = model.state_arrays()
    best_report = None
    stale = 0
    train_ms = 0.0
    steps = 0
    stopped = False
    if history_path:
        with open(history_path, "w") as fh:
            fh.write(history_csv([], header=True))

    for epoch in range(1, config.epochs_max + 1):
        t0 = time.perf_counter()
        nip_sum = disc_sum = 0.0
        n_batches = 0
        for batch in pad_and_batch(split, config.max_len, config.batch_size, config.seed, epoch):
            if not batch.validity.any():
                continue
            rep = joint_step(model, batch, state, streams)
            nip_sum += rep.loss_nip
            disc_sum += rep.loss_disc
            n_batches += 1
            steps += 1
        train_ms += (time.perf_counter() - t0) * 1000.0
        report = evaluate_split(model, split, "valid")
        n = max(n_batches, 1)
        row = HistoryRow(epoch, "valid", report, nip_sum / n,
                         disc_sum / n if config.uses_discriminator else 0.0,
                         train_ms if config.clock == "wall" else None)
        history.append(row)
        if history_path:
            with open(history_path, "a") as fh:
                fh.write(history_csv([row], header=False))
        if on_epoch is not None:
            on_epoch(row)
        log.info("epoch %d hr@5=%.4f ndcg@10=%.4f nip=%.4f disc=%.4f", epoch, report.hr[5],
                 report.ndcg[10], row.loss_nip, row.loss_disc)
        if report.ndcg[10] > best:
            best, best_epoch, best_report = report.ndcg[10], epoch, report
            best_arrays = model.state_arrays()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                stopped = True
                break

    model.load_arrays(best_arrays)
    return TrainResult(model, history, best_epoch, best_report, stopped, steps)


def context_matrix(contexts: list[list[int]], max_len: int) -> np.ndarray:
    return np.stack([pad_left(c, max_len) for c in contexts]) if contexts else np.zeros((0, max_len), np.int64)
