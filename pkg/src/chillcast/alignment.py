"""Phase 1: contrastive alignment of window templates and time-series windows.

A word-level tokenizer with numeral bucketing feeds a small position-aware
text encoder; a shared per-variate feed-forward net encodes the normalized
window. Both produce d-vectors in one latent space and are trained jointly
with an in-batch contrastive loss over cosine similarities (text rows as
anchors, temperature fixed at 0.05). The text encoder is then frozen and
reused for all later phases.
"""

from __future__ import annotations

import re
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .data import TimeWindow
from .errors import CheckpointError, ConfigError
from .revin import DEFAULT_EPSILON, fit_stats, normalize
from .seeding import derive_seed
from .template import CatsTemplate, KnowledgeBase, build_template

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

# Numerals are quantized onto a +/-10 grid with step 0.1 and replaced by
# bucket tokens, so statistics text generalizes across windows instead of
# exploding the vocabulary. The grid is fine enough that window extrema stay
# discriminative after bucketing.
NUM_CLIP = 10.0
NUM_STEP = 0.1

_PIECE_RE = re.compile(r"[+-]?\d+(?:\.\d+)?|[a-z]+|[^\s0-9a-z]")
_NUMERAL_RE = re.compile(r"[+-]?\d+(?:\.\d+)?$")


def _bucket_value(value: float) -> float:
    clipped = min(max(value, -NUM_CLIP), NUM_CLIP)
    return round(clipped / NUM_STEP) * NUM_STEP


def _bucket_token(value: float) -> str:
    return f"<num:{_bucket_value(value):.1f}>"


def _all_bucket_tokens() -> list[str]:
    n = int(NUM_CLIP / NUM_STEP)
    return [f"<num:{i * NUM_STEP:.1f}>" for i in range(-n, n + 1)]


class Tokenizer:
    """Word/punctuation tokenizer with a vocabulary fixed at fit time."""

    def __init__(self, vocab: dict[str, int]):
        self.vocab = dict(vocab)
        self.ids = {i: tok for tok, i in self.vocab.items()}
        self.pad_id = self.vocab[PAD_TOKEN]
        self.unk_id = self.vocab[UNK_TOKEN]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @staticmethod
    def _pieces(text: str) -> list[str]:
        return _PIECE_RE.findall(text.lower())

    @classmethod
    def fit(cls, corpus) -> "Tokenizer":
        """Build the vocabulary once from an iterable of template texts."""
        words = set()
        for text in corpus:
            for piece in cls._pieces(text):
                if not _NUMERAL_RE.match(piece):
                    words.add(piece)
        tokens = [PAD_TOKEN, UNK_TOKEN] + _all_bucket_tokens() + sorted(words)
        return cls({tok: i for i, tok in enumerate(tokens)})

    def encode(self, text: str) -> list[int]:
        if not text.strip():
            raise ValueError("cannot tokenize empty text")
        ids = []
        for piece in self._pieces(text):
            if _NUMERAL_RE.match(piece):
                ids.append(self.vocab[_bucket_token(float(piece))])
            else:
                ids.append(self.vocab.get(piece, self.unk_id))
        return ids

    def tokenize(self, text: str) -> "TextTokenSequence":
        return TextTokenSequence(tuple(self.encode(text)), self.vocab_size)

    def decode(self, token_ids) -> str:
        """Canonical detokenized form; bucket tokens render as their grid value."""
        out = []
        for i in token_ids:
            tok = self.ids[int(i)]
            if tok == PAD_TOKEN:
                continue
            if tok.startswith("<num:") and tok.endswith(">"):
                out.append(tok[5:-1])
            else:
                out.append(tok)
        return " ".join(out)


@dataclass(frozen=True)
class TextTokenSequence:
    """An ordered sequence of token ids, all below the vocabulary size."""

    token_ids: tuple[int, ...]
    vocab_size: int

    def __post_init__(self) -> None:
        if len(self.token_ids) < 1:
            raise ValueError("token sequence must contain at least one token")
        if any(not (0 <= i < self.vocab_size) for i in self.token_ids):
            raise ValueError("token id out of vocabulary range")

    def __len__(self) -> int:
        return len(self.token_ids)


def encode_template(
    tokenizer: Tokenizer, template: CatsTemplate, budget: int
) -> TextTokenSequence:
    """Tokenize a template, enforcing the token budget section by section.

    Over-budget templates lose tokens from the tail of Background first, then
    Trend, then Statistics; the Instruction section is never truncated. Section
    order in the output is unchanged.
    """
    sections = {
        "background": tokenizer.encode(f"Background: {template.background}"),
        "instruction": tokenizer.encode(f"Instruction: {template.instruction}"),
        "trend": tokenizer.encode(f"Trend: {template.trend}"),
        "statistics": tokenizer.encode(f"Statistics: {template.statistics}"),
    }
    total = sum(len(v) for v in sections.values())
    for name in ("background", "trend", "statistics"):
        if total <= budget:
            break
        cut = min(total - budget, len(sections[name]))
        if cut:
            sections[name] = sections[name][: len(sections[name]) - cut]
            total -= cut
    if total > budget:
        raise ConfigError(
            f"token budget {budget} is smaller than the instruction section"
        )
    ids = (
        sections["background"]
        + sections["instruction"]
        + sections["trend"]
        + sections["statistics"]
    )
    return TextTokenSequence(tuple(ids), tokenizer.vocab_size)


class SeriesEncoder(nn.Module):
    """Shared per-variate feed-forward map over the L history, pooled to d."""

    def __init__(self, input_len: int, d: int, hidden: int | None = None,
                 pooling: str = "mean"):
        super().__init__()
        if pooling not in ("mean", "last"):
            raise ConfigError(f"unknown pooling mode {pooling!r}")
        hidden = hidden or 2 * d
        self.input_len = input_len
        self.pooling = pooling
        self.net = nn.Sequential(
            nn.Linear(input_len, hidden),
            nn.ReLU(),
            nn.Linear(hidden, d),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, L, M) or (L, M) normalized inputs to (B, d) or (d,)."""
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[-2] != self.input_len:
            raise ValueError(
                f"expected {self.input_len} input steps, got {x.shape[-2]}"
            )
        if not torch.isfinite(x).all():
            raise ValueError("non-finite values in series encoder input")
        tokens = self.net(x.transpose(-1, -2))  # (B, M, d)
        pooled = tokens.mean(dim=-2) if self.pooling == "mean" else tokens[..., -1, :]
        return pooled.squeeze(0) if squeeze else pooled


class TextEncoder(nn.Module):
    """Token + position embeddings through a small self-attention stack."""

    def __init__(self, vocab_size: int, d: int, max_len: int = 256,
                 nhead: int = 2, num_layers: int = 2, pooling: str = "mean",
                 pad_id: int = 0):
        super().__init__()
        if pooling not in ("mean", "last"):
            raise ConfigError(f"unknown pooling mode {pooling!r}")
        if d % nhead != 0:
            nhead = 1
        self.max_len = max_len
        self.pooling = pooling
        self.pad_id = pad_id
        self.token_embed = nn.Embedding(vocab_size, d, padding_idx=pad_id)
        self.pos_embed = nn.Embedding(max_len, d)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d, nhead, dim_feedforward=2 * d, dropout=0.0, batch_first=True
            )
            for _ in range(num_layers)
        )

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor | None = None
                ) -> torch.Tensor:
        """(B, n) int ids (optionally with a True-at-pad mask) to (B, d)."""
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        if ids.shape[1] > self.max_len:  # never crash on over-long input
            ids = ids[:, : self.max_len]
            pad_mask = pad_mask[:, : self.max_len] if pad_mask is not None else None
        positions = torch.arange(ids.shape[1], device=ids.device)
        h = self.token_embed(ids) + self.pos_embed(positions)
        for layer in self.layers:
            h = layer(h, src_key_padding_mask=pad_mask)
        if pad_mask is None:
            return h.mean(dim=1) if self.pooling == "mean" else h[:, -1]
        keep = (~pad_mask).unsqueeze(-1).to(h.dtype)
        if self.pooling == "mean":
            return (h * keep).sum(dim=1) / keep.sum(dim=1).clamp_min(1.0)
        last = (~pad_mask).sum(dim=1).clamp_min(1) - 1
        return h[torch.arange(h.shape[0]), last]


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        warnings.warn(
            "zero-norm embedding vector: cosine similarity treated as 0",
            RuntimeWarning,
            stacklevel=3,
        )
    return x / norms.clamp_min(torch.finfo(x.dtype).tiny)


def kari_loss(
    text_vecs: torch.Tensor,
    series_vecs: torch.Tensor,
    tau: float = 0.05,
    symmetric: bool = False,
) -> torch.Tensor:
    """In-batch contrastive loss over cosine similarities.

    Row i of each matrix must come from the same window, so positives sit on
    the diagonal. Text rows are the anchors; ``symmetric=True`` averages in
    the series-anchored direction as well.
    """
    t = torch.as_tensor(text_vecs)
    s = torch.as_tensor(series_vecs)
    if t.shape != s.shape or t.dim() != 2:
        raise ValueError("text and series embeddings must both be (B, d)")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    logits = (_unit_rows(t) @ _unit_rows(s).T) / tau
    idx = torch.arange(logits.shape[0], device=logits.device)
    loss = -torch.log_softmax(logits, dim=1)[idx, idx].mean()
    if symmetric:
        loss_series = -torch.log_softmax(logits, dim=0)[idx, idx].mean()
        loss = (loss + loss_series) / 2
    return loss


def retrieval_accuracy(text_vecs: torch.Tensor, series_vecs: torch.Tensor) -> float:
    """Fraction of text rows whose nearest series row (by cosine) is their own."""
    sims = _unit_rows(text_vecs) @ _unit_rows(series_vecs).T
    return float((sims.argmax(dim=1) == torch.arange(sims.shape[0])).float().mean())


@dataclass
class Phase1Config:
    epochs: int = 10
    lr: float = 2e-3  # contrastive alignment wants a hotter rate than phase 2
    d: int = 32
    batch_size: int = 64
    tau: float = 0.05
    pooling: str = "mean"  # mean | last
    loss_direction: str = "text"  # text | symmetric
    token_budget: int = 256
    nhead: int = 2
    num_layers: int = 2
    series_hidden: int | None = None
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self) -> None:
        if self.loss_direction not in ("text", "symmetric"):
            raise ConfigError(f"unknown loss direction {self.loss_direction!r}")
        if self.pooling not in ("mean", "last"):
            raise ConfigError(f"unknown pooling mode {self.pooling!r}")


CHECKPOINT_FORMAT = "chillcast-align-v1"


@dataclass
class AlignmentCheckpoint:
    """Frozen product of phase 1: both encoders, the vocabulary, and metadata."""

    d: int
    input_len: int
    vocab: dict[str, int]
    config: Phase1Config
    series_state: dict
    text_state: dict
    metadata: dict = field(default_factory=dict)

    def build_tokenizer(self) -> Tokenizer:
        return Tokenizer(self.vocab)

    def build_text_encoder(self) -> TextEncoder:
        enc = TextEncoder(
            vocab_size=len(self.vocab),
            d=self.d,
            max_len=self.config.token_budget,
            nhead=self.config.nhead,
            num_layers=self.config.num_layers,
            pooling=self.config.pooling,
        )
        enc.load_state_dict(self.text_state)
        enc.requires_grad_(False)
        enc.eval()
        return enc

    def build_series_encoder(self) -> SeriesEncoder:
        enc = SeriesEncoder(
            input_len=self.input_len,
            d=self.d,
            hidden=self.config.series_hidden,
            pooling=self.config.pooling,
        )
        enc.load_state_dict(self.series_state)
        enc.eval()
        return enc

    def save(self, path) -> None:
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "d": self.d,
                "input_len": self.input_len,
                "vocab": self.vocab,
                "config": asdict(self.config),
                "series_state": self.series_state,
                "text_state": self.text_state,
                "metadata": self.metadata,
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "AlignmentCheckpoint":
        try:
            payload = torch.load(path, weights_only=True)
        except Exception as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(
                f"unexpected checkpoint format {payload.get('format')!r}"
            )
        return cls(
            d=payload["d"],
            input_len=payload["input_len"],
            vocab=payload["vocab"],
            config=Phase1Config(**payload["config"]),
            series_state=payload["series_state"],
            text_state=payload["text_state"],
            metadata=payload["metadata"],
        )


def prepare_pairs(
    windows: list[TimeWindow],
    kb: KnowledgeBase,
    epsilon: float = DEFAULT_EPSILON,
) -> tuple[np.ndarray, list[CatsTemplate]]:
    """Normalize every window and build its paired template."""
    normalized = np.empty(
        (len(windows), windows[0].L, windows[0].M), dtype=np.float64
    )
    templates = []
    for i, w in enumerate(windows):
        stats = fit_stats(w.inputs, epsilon=epsilon)
        normed = normalize(w.inputs, stats)
        normalized[i] = normed
        templates.append(build_template(kb, w, normed[:, w.target_col]))
    return normalized, templates


def pad_batch(
    seqs: list[TextTokenSequence], pad_id: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack variable-length sequences into (B, n_max) ids plus a pad mask."""
    n_max = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), n_max), pad_id, dtype=torch.long)
    mask = torch.ones((len(seqs), n_max), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s.token_ids, dtype=torch.long)
        mask[i, : len(s)] = False
    return ids, mask


def train_phase1(
    windows: list[TimeWindow],
    kb: KnowledgeBase,
    config: Phase1Config,
    seed: int = 0,
) -> AlignmentCheckpoint:
    """Train both encoders with the contrastive objective; freeze the text side.

    Batches of ``config.batch_size`` are reshuffled every epoch; trailing
    batches smaller than 2 are dropped because the loss needs in-batch
    negatives.
    """
    if config.batch_size < 2:
        raise ConfigError("contrastive training needs batch_size >= 2")
    if len(windows) < config.batch_size:
        raise ConfigError(
            f"need at least batch_size={config.batch_size} windows, "
            f"got {len(windows)}"
        )

    normalized, templates = prepare_pairs(windows, kb, epsilon=config.epsilon)
    tokenizer = Tokenizer.fit(t.rendered for t in templates)
    seqs = [encode_template(tokenizer, t, config.token_budget) for t in templates]

    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "phase1-init"))
        series_enc = SeriesEncoder(
            input_len=windows[0].L,
            d=config.d,
            hidden=config.series_hidden,
            pooling=config.pooling,
        )
        text_enc = TextEncoder(
            vocab_size=tokenizer.vocab_size,
            d=config.d,
            max_len=config.token_budget,
            nhead=config.nhead,
            num_layers=config.num_layers,
            pooling=config.pooling,
        )

    x_all = torch.from_numpy(normalized.astype(np.float32))
    params = list(series_enc.parameters()) + list(text_enc.parameters())
    optimizer = torch.optim.Adam(params, lr=config.lr)
    shuffler = np.random.default_rng(derive_seed(seed, "phase1-shuffle"))
    symmetric = config.loss_direction == "symmetric"

    epoch_losses = []
    start = time.perf_counter()
    for _ in range(config.epochs):
        order = shuffler.permutation(len(windows))
        batch_losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo : lo + config.batch_size]
            if len(batch) < 2:
                continue
            ids, mask = pad_batch([seqs[i] for i in batch], tokenizer.pad_id)
            v_text = text_enc(ids, mask)
            v_series = series_enc(x_all[batch])
            loss = kari_loss(v_text, v_series, tau=config.tau, symmetric=symmetric)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            batch_losses.append(float(loss.detach()))
        epoch_losses.append(float(np.mean(batch_losses)))

    text_enc.requires_grad_(False)
    text_enc.eval()
    series_enc.eval()
    return AlignmentCheckpoint(
        d=config.d,
        input_len=windows[0].L,
        vocab=tokenizer.vocab,
        config=config,
        series_state=series_enc.state_dict(),
        text_state=text_enc.state_dict(),
        metadata={
            "seed": seed,
            "epochs": config.epochs,
            "initial_loss": epoch_losses[0] if epoch_losses else None,
            "final_loss": epoch_losses[-1] if epoch_losses else None,
            "epoch_losses": epoch_losses,
            "train_seconds": time.perf_counter() - start,
            "text_encoder_frozen": True,
        },
    )
