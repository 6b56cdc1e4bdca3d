"""Phase 2: prefix-injected, attention-enhanced forecasting on a frozen backbone.

Each variate's normalized L-step history becomes one d-dimensional token
through a shared linear map. Cross-variable attention (single-head softmax
over the variate tokens) models device coupling; the frozen phase-1 text
encoder turns the window's template into a prefix that is concatenated ahead
of the variate tokens; the combined sequence runs through a frozen
transformer stack via a trainable dimension adapter, and a linear head maps
the flattened output to K normalized forecast steps. Training minimizes MSE
on normalized targets with Adam; only the newly introduced modules train.
"""

from __future__ import annotations

import copy
import hashlib
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .alignment import (
    AlignmentCheckpoint,
    TextEncoder,
    Tokenizer,
    encode_template,
    pad_batch,
)
from .data import TimeWindow
from .errors import CheckpointError, ConfigError
from .revin import DEFAULT_EPSILON, NormStats, denormalize, fit_stats, normalize
from .seeding import derive_seed
from .template import KnowledgeBase, build_template

MODEL_FORMAT = "chillcast-model-v1"


@dataclass
class BackboneSpec:
    """Frozen transformer stack configuration.

    ``frozen-random`` initializes deterministically from a derived seed and
    stands in for pretrained weights at desk scale; ``pretrained-weights-file``
    loads a state dict for the same architecture. ``layer_count`` defaults to
    2; use 8 to mirror a full-size setup. Backbone parameters never receive
    gradient updates.
    """

    kind: str = "frozen-random"
    layer_count: int = 2
    hidden_dim: int = 64
    nhead: int = 4
    ffn_dim: int | None = None
    weights_path: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("frozen-random", "pretrained-weights-file"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "pretrained-weights-file" and not self.weights_path:
            raise ConfigError("pretrained-weights-file backbone needs weights_path")
        if self.layer_count < 1 or self.hidden_dim < 1:
            raise ConfigError("backbone needs layer_count >= 1 and hidden_dim >= 1")


class EgiaAttention(nn.Module):
    """Softmax attention over variate tokens; single head by default."""

    def __init__(self, d: int, heads: int = 1):
        super().__init__()
        if heads < 1 or d % heads != 0:
            raise ConfigError("attention heads must divide d")
        self.d = d
        self.heads = heads
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_h = nn.Linear(d, d, bias=False)
        # Identity start: self-similarity dominates the logits, so attention
        # opens near-diagonal and training departs from a token-preserving
        # map instead of from a uniform mix that scrambles variate identity.
        with torch.no_grad():
            eye = torch.eye(d)
            self.w_q.weight.copy_(eye)
            self.w_k.weight.copy_(eye)
            self.w_h.weight.copy_(eye)

    def attention_weights(self, s: torch.Tensor) -> torch.Tensor:
        """Row-stochastic attention matrix for the single-head case."""
        if self.heads != 1:
            raise ValueError("attention_weights is defined for heads=1")
        q, k = self.w_q(s), self.w_k(s)
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d), dim=-1)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        q, k, h = self.w_q(s), self.w_k(s), self.w_h(s)
        if self.heads == 1:
            attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d), dim=-1)
            return attn @ h
        # Multi-head variant for experimentation; default config never splits.
        def split(x: torch.Tensor) -> torch.Tensor:
            return x.unflatten(-1, (self.heads, self.d // self.heads)).transpose(-2, -3)

        qh, kh, hh = split(q), split(k), split(h)
        attn = torch.softmax(
            qh @ kh.transpose(-1, -2) / math.sqrt(self.d // self.heads), dim=-1
        )
        out = attn @ hh
        return out.transpose(-2, -3).flatten(-2)


class FrozenBackbone(nn.Module):
    """Transformer stack whose parameters are permanently frozen."""

    def __init__(self, spec: BackboneSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        ffn = spec.ffn_dim or 4 * spec.hidden_dim
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.layers = nn.ModuleList(
                nn.TransformerEncoderLayer(
                    spec.hidden_dim,
                    spec.nhead,
                    dim_feedforward=ffn,
                    dropout=0.0,
                    batch_first=True,
                )
                for _ in range(spec.layer_count)
            )
        if spec.kind == "pretrained-weights-file":
            try:
                state = torch.load(spec.weights_path, weights_only=True)
                self.layers.load_state_dict(state)
            except Exception as exc:
                raise CheckpointError(
                    f"backbone weights at {spec.weights_path} are incompatible "
                    f"with layer_count={spec.layer_count}, "
                    f"hidden_dim={spec.hidden_dim}: {exc}"
                ) from exc
        self.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True) -> "FrozenBackbone":
        return super().train(False)  # locked in inference mode

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


@dataclass
class Phase2Config:
    epochs: int = 30
    lr: float = 7e-4
    batch_size: int = 64
    d: int = 32
    prefix_len: int = 1
    head_mode: str = "flatten"  # flatten | last
    use_adpt: bool = True
    use_egia: bool = True
    use_kari: bool = True
    egia_heads: int = 1
    patience: int = 3  # early-stopping patience in epochs; 0 disables
    epsilon: float = DEFAULT_EPSILON
    token_budget: int = 256
    text_nhead: int = 2
    text_layers: int = 2
    pooling: str = "mean"
    backbone: BackboneSpec = field(default_factory=BackboneSpec)

    def __post_init__(self) -> None:
        if self.prefix_len < 1:
            raise ConfigError("prefix_len must be >= 1")
        if self.head_mode not in ("flatten", "last"):
            raise ConfigError(f"unknown head mode {self.head_mode!r}")
        if isinstance(self.backbone, dict):
            self.backbone = BackboneSpec(**self.backbone)


@dataclass
class ModelArch:
    """Everything needed to rebuild a model's module graph from a checkpoint."""

    input_len: int
    n_variates: int
    horizon: int
    target_col: int
    d: int
    prefix_len: int
    use_adpt: bool
    use_egia: bool
    egia_heads: int
    head_mode: str
    epsilon: float
    token_budget: int
    text_nhead: int
    text_layers: int
    pooling: str
    backbone: BackboneSpec

    def __post_init__(self) -> None:
        if isinstance(self.backbone, dict):
            self.backbone = BackboneSpec(**self.backbone)


@dataclass(frozen=True, eq=False)
class ForecastRecord:
    """One window's forecast in both normalized and original units."""

    window_id: int
    target_col: int
    pred_norm: np.ndarray  # (K,)
    pred_raw: np.ndarray  # (K,)
    truth_raw: np.ndarray  # (K,)
    stats: NormStats

    @property
    def truth_norm(self) -> np.ndarray:
        return (self.truth_raw - self.stats.means[self.target_col]) / (
            self.stats.stds[self.target_col] + self.stats.epsilon
        )


def assemble_input(prefix: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Row-wise concatenation, prefix first."""
    if prefix.shape[-1] != tokens.shape[-1]:
        raise ValueError(
            f"prefix width {prefix.shape[-1]} != token width {tokens.shape[-1]}"
        )
    if prefix.shape[-2] < 1:
        raise ValueError("prefix must contribute at least one row")
    return torch.cat([prefix, tokens], dim=-2)


class ForecastModel(nn.Module):
    """The full phase-2 network plus the frozen text side and window plumbing."""

    def __init__(
        self,
        arch: ModelArch,
        tokenizer: Tokenizer | None = None,
        text_encoder: TextEncoder | None = None,
        init_seed: int = 0,
    ):
        super().__init__()
        self.arch = arch
        self.tokenizer = tokenizer
        if arch.use_adpt and (tokenizer is None or text_encoder is None):
            raise ConfigError("prefix injection needs a tokenizer and text encoder")

        with torch.random.fork_rng():
            torch.manual_seed(derive_seed(init_seed, "phase2-init"))
            self.variate_embed = nn.Linear(arch.input_len, arch.d)
            self.egia = (
                EgiaAttention(arch.d, heads=arch.egia_heads) if arch.use_egia else None
            )
            self.prefix_expand = (
                nn.Linear(arch.d, arch.prefix_len * arch.d)
                if arch.use_adpt and arch.prefix_len > 1
                else None
            )
            hidden = arch.backbone.hidden_dim
            self.adapter_in = nn.Linear(arch.d, hidden)
            self.adapter_out = nn.Linear(hidden, arch.d)
            n_tokens = (arch.prefix_len if arch.use_adpt else 0) + arch.n_variates
            if arch.head_mode == "flatten":
                self.head = nn.Linear(n_tokens * arch.d, arch.horizon)
            else:
                self.head = nn.Linear(arch.d, arch.horizon)
        self.backbone = FrozenBackbone(arch.backbone, seed=derive_seed(init_seed, "backbone"))
        self.text_encoder = text_encoder
        if self.text_encoder is not None:
            self.text_encoder.requires_grad_(False)
            self.text_encoder.eval()
        self.training_history: dict = {}

    def train(self, mode: bool = True) -> "ForecastModel":
        super().train(mode)
        self.backbone.train(False)
        if self.text_encoder is not None:
            self.text_encoder.eval()
        return self

    # --- parameter bookkeeping -------------------------------------------

    def trainable_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {
            "variate_embed": list(self.variate_embed.parameters()),
            "adapter": list(self.adapter_in.parameters())
            + list(self.adapter_out.parameters()),
            "head": list(self.head.parameters()),
        }
        if self.egia is not None:
            groups["egia"] = list(self.egia.parameters())
        if self.prefix_expand is not None:
            groups["prefix_expand"] = list(self.prefix_expand.parameters())
        return groups

    def frozen_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {"backbone": list(self.backbone.parameters())}
        if self.text_encoder is not None:
            groups["text_encoder"] = list(self.text_encoder.parameters())
        return groups

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for ps in self.trainable_groups().values() for p in ps]

    # --- forward pieces ---------------------------------------------------

    def embed_variates(self, x: torch.Tensor) -> torch.Tensor:
        """Shared map from each variate's L history to a d-token; (..., M, d)."""
        if x.shape[-2] != self.arch.input_len:
            raise ValueError(
                f"expected {self.arch.input_len} input steps, got {x.shape[-2]}"
            )
        return self.variate_embed(x.transpose(-1, -2))

    def expand_prefix(self, v_text: torch.Tensor) -> torch.Tensor:
        """(B, d) template encodings to (B, prefix_len, d) prefix rows."""
        if self.arch.prefix_len == 1:
            return v_text.unsqueeze(-2)
        return self.prefix_expand(v_text).unflatten(
            -1, (self.arch.prefix_len, self.arch.d)
        )

    def backbone_forward(self, v_in: torch.Tensor) -> torch.Tensor:
        """Adapter up-projection, frozen stack, adapter down-projection."""
        return self.adapter_out(self.backbone(self.adapter_in(v_in)))

    def forward(
        self, x: torch.Tensor, prefix_vec: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Normalized (B, L, M) inputs to (B, K) normalized forecasts."""
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
            if prefix_vec is not None:
                prefix_vec = prefix_vec.unsqueeze(0)
        tokens = self.embed_variates(x)
        v_e = self.egia(tokens) if self.egia is not None else tokens
        if self.arch.use_adpt:
            if prefix_vec is None:
                raise ValueError("model was built with a prefix; none supplied")
            v_in = assemble_input(self.expand_prefix(prefix_vec), v_e)
        else:
            v_in = v_e
        hidden = self.backbone_forward(v_in)
        if self.arch.head_mode == "flatten":
            out = self.head(hidden.flatten(-2))
        else:
            out = self.head(hidden[..., -1, :])
        return out.squeeze(0) if squeeze else out

    # --- window-level API ---------------------------------------------------

    def encode_prefix_vectors(self, templates, batch_size: int = 256) -> torch.Tensor:
        """Frozen text encodings for a list of templates; (N, d), no gradients."""
        seqs = [
            encode_template(self.tokenizer, t, self.arch.token_budget)
            for t in templates
        ]
        chunks = []
        with torch.no_grad():
            for lo in range(0, len(seqs), batch_size):
                ids, mask = pad_batch(seqs[lo : lo + batch_size], self.tokenizer.pad_id)
                chunks.append(self.text_encoder(ids, mask))
        return torch.cat(chunks, dim=0)

    def predict_batch(
        self, windows: list[TimeWindow], kb: KnowledgeBase, batch_size: int = 256
    ) -> list[ForecastRecord]:
        """Full pipeline for a batch of raw windows, in inference mode."""
        self.eval()
        records: list[ForecastRecord] = []
        for lo in range(0, len(windows), batch_size):
            chunk = windows[lo : lo + batch_size]
            stats_list = [fit_stats(w.inputs, epsilon=self.arch.epsilon) for w in chunk]
            x = np.stack(
                [normalize(w.inputs, s) for w, s in zip(chunk, stats_list)]
            ).astype(np.float32)
            x_t = torch.from_numpy(x)
            prefix = None
            if self.arch.use_adpt:
                templates = [
                    build_template(kb, w, xn[:, w.target_col])
                    for w, xn in zip(chunk, x)
                ]
                prefix = self.encode_prefix_vectors(templates, batch_size=batch_size)
            with torch.no_grad():
                preds = self(x_t, prefix).double().numpy()
            for w, s, p in zip(chunk, stats_list, preds):
                records.append(
                    ForecastRecord(
                        window_id=w.origin_index,
                        target_col=w.target_col,
                        pred_norm=p,
                        pred_raw=denormalize(p, s, w.target_col),
                        truth_raw=np.asarray(w.target, dtype=np.float64),
                        stats=s,
                    )
                )
        return records

    def predict(self, window: TimeWindow, kb: KnowledgeBase) -> ForecastRecord:
        return self.predict_batch([window], kb)[0]

    # --- persistence ----------------------------------------------------------

    def save(self, path, align_ref: dict | None = None) -> None:
        torch.save(
            {
                "format": MODEL_FORMAT,
                "arch": _arch_to_dict(self.arch),
                "state": self.state_dict(),
                "vocab": self.tokenizer.vocab if self.tokenizer else None,
                "align_ref": align_ref or {},
                "config": getattr(self, "config_snapshot", {}),
                "history": _plain_history(self.training_history),
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "ForecastModel":
        try:
            payload = torch.load(path, weights_only=True)
        except Exception as exc:
            raise CheckpointError(f"cannot read model checkpoint {path}: {exc}") from exc
        if payload.get("format") != MODEL_FORMAT:
            raise CheckpointError(
                f"unexpected model checkpoint format {payload.get('format')!r}"
            )
        arch = ModelArch(**payload["arch"])
        tokenizer = Tokenizer(payload["vocab"]) if payload["vocab"] else None
        text_encoder = None
        if arch.use_adpt:
            text_encoder = TextEncoder(
                vocab_size=len(payload["vocab"]),
                d=arch.d,
                max_len=arch.token_budget,
                nhead=arch.text_nhead,
                num_layers=arch.text_layers,
                pooling=arch.pooling,
            )
        model = cls(arch, tokenizer=tokenizer, text_encoder=text_encoder)
        model.load_state_dict(payload["state"])
        model.training_history = payload.get("history", {})
        model.config_snapshot = payload.get("config", {})
        if model.text_encoder is not None:
            model.text_encoder.requires_grad_(False)
        model.eval()
        return model


def _arch_to_dict(arch: ModelArch) -> dict:
    d = asdict(arch)
    d["backbone"] = asdict(arch.backbone)
    return d


def _plain_history(history: dict) -> dict:
    return {
        k: (list(map(float, v)) if isinstance(v, (list, tuple)) else v)
        for k, v in history.items()
    }


def parameter_checksums(module: nn.Module) -> dict[str, str]:
    """SHA-256 of each parameter tensor's bytes; detects any drift."""
    out = {}
    for name, p in module.named_parameters():
        out[name] = hashlib.sha256(
            p.detach().cpu().numpy().tobytes()
        ).hexdigest()
    return out


def _build_text_side(
    checkpoint: AlignmentCheckpoint | None,
    config: Phase2Config,
    templates_corpus,
    seed: int,
) -> tuple[Tokenizer, TextEncoder]:
    """Frozen text encoder: from phase 1, or random-init when it is skipped."""
    if checkpoint is not None:
        if checkpoint.d != config.d:
            raise ConfigError(
                f"phase-2 d={config.d} must match the alignment checkpoint d="
                f"{checkpoint.d}"
            )
        return checkpoint.build_tokenizer(), checkpoint.build_text_encoder()
    tokenizer = Tokenizer.fit(templates_corpus)
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "text-random-init"))
        enc = TextEncoder(
            vocab_size=tokenizer.vocab_size,
            d=config.d,
            max_len=config.token_budget,
            nhead=config.text_nhead,
            num_layers=config.text_layers,
            pooling=config.pooling,
        )
    enc.requires_grad_(False)
    enc.eval()
    return tokenizer, enc


def _prep_tensors(
    windows: list[TimeWindow], kb: KnowledgeBase, epsilon: float
) -> tuple[torch.Tensor, torch.Tensor, list]:
    """Normalized inputs, normalized targets, and templates for a window list."""
    templates = []
    n, L, M = len(windows), windows[0].L, windows[0].M
    K = windows[0].K
    x = np.empty((n, L, M), dtype=np.float32)
    y = np.empty((n, K), dtype=np.float32)
    for i, w in enumerate(windows):
        stats = fit_stats(w.inputs, epsilon=epsilon)
        normed = normalize(w.inputs, stats)
        x[i] = normed
        y[i] = (w.target - stats.means[w.target_col]) / (
            stats.stds[w.target_col] + stats.epsilon
        )
        templates.append(build_template(kb, w, normed[:, w.target_col]))
    return torch.from_numpy(x), torch.from_numpy(y), templates


def train_phase2(
    train_windows: list[TimeWindow],
    kb: KnowledgeBase,
    checkpoint: AlignmentCheckpoint | None,
    config: Phase2Config,
    val_windows: list[TimeWindow] | None = None,
    seed: int = 0,
) -> ForecastModel:
    """Train the forecaster on normalized MSE; freeze backbone and text encoder.

    Trainable set: variate embedding, attention projections, prefix expansion,
    dimension adapters, and the head. Early stopping watches validation MSE
    with the configured patience and restores the best epoch's weights.
    """
    if not train_windows:
        raise ConfigError("no training windows")
    if config.use_kari and config.use_adpt and checkpoint is None:
        raise ConfigError("phase 2 with alignment enabled needs a phase-1 checkpoint")
    if config.patience > 0 and not val_windows:
        raise ConfigError(
            "early stopping needs a validation split; pass val_windows or set "
            "patience=0"
        )

    w0 = train_windows[0]
    x_train, y_train, train_templates = _prep_tensors(train_windows, kb, config.epsilon)

    tokenizer = text_encoder = None
    if config.use_adpt:
        tokenizer, text_encoder = _build_text_side(
            checkpoint if config.use_kari else None,
            config,
            (t.rendered for t in train_templates),
            seed,
        )

    arch = ModelArch(
        input_len=w0.L,
        n_variates=w0.M,
        horizon=w0.K,
        target_col=w0.target_col,
        d=config.d,
        prefix_len=config.prefix_len,
        use_adpt=config.use_adpt,
        use_egia=config.use_egia,
        egia_heads=config.egia_heads,
        head_mode=config.head_mode,
        epsilon=config.epsilon,
        token_budget=config.token_budget,
        text_nhead=(
            checkpoint.config.nhead
            if (checkpoint is not None and config.use_kari and config.use_adpt)
            else config.text_nhead
        ),
        text_layers=(
            checkpoint.config.num_layers
            if (checkpoint is not None and config.use_kari and config.use_adpt)
            else config.text_layers
        ),
        pooling=(
            checkpoint.config.pooling
            if (checkpoint is not None and config.use_kari and config.use_adpt)
            else config.pooling
        ),
        backbone=config.backbone,
    )
    model = ForecastModel(
        arch, tokenizer=tokenizer, text_encoder=text_encoder, init_seed=seed
    )

    prefix_train = prefix_val = None
    if config.use_adpt:
        prefix_train = model.encode_prefix_vectors(train_templates)
    x_val = y_val = None
    if val_windows:
        x_val, y_val, val_templates = _prep_tensors(val_windows, kb, config.epsilon)
        if config.use_adpt:
            prefix_val = model.encode_prefix_vectors(val_templates)

    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=config.lr)
    shuffler = np.random.default_rng(derive_seed(seed, "phase2-shuffle"))
    mse = nn.functional.mse_loss

    def eval_mse(x, y, prefix) -> float:
        model.eval()
        total, count = 0.0, 0
        with torch.no_grad():
            for lo in range(0, x.shape[0], 512):
                xb, yb = x[lo : lo + 512], y[lo : lo + 512]
                pb = prefix[lo : lo + 512] if prefix is not None else None
                pred = model(xb, pb)
                total += float(((pred - yb) ** 2).sum())
                count += yb.numel()
        return total / count

    history: dict = {
        "initial_train_mse": eval_mse(x_train, y_train, prefix_train),
        "train_loss": [],
        "val_mse": [],
    }

    best_val = math.inf
    best_state = None
    bad_epochs = 0
    iters = 0
    iter_seconds = 0.0

    for epoch in range(config.epochs):
        model.train()
        order = shuffler.permutation(x_train.shape[0])
        batch_losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo : lo + config.batch_size]
            t0 = time.perf_counter()
            xb, yb = x_train[batch], y_train[batch]
            pb = prefix_train[batch] if prefix_train is not None else None
            loss = mse(model(xb, pb), yb)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            iter_seconds += time.perf_counter() - t0
            iters += 1
            batch_losses.append(float(loss.detach()))
        history["train_loss"].append(float(np.mean(batch_losses)))

        if x_val is not None:
            val = eval_mse(x_val, y_val, prefix_val)
            history["val_mse"].append(val)
            if config.patience > 0:
                if val < best_val - 1e-12:
                    best_val = val
                    best_state = copy.deepcopy(model.state_dict())
                    bad_epochs = 0
                else:
                    bad_epochs += 1
                    if bad_epochs >= config.patience:
                        break

    if best_state is not None:
        model.load_state_dict(best_state)
    history["epochs_run"] = len(history["train_loss"])
    history["s_per_iter"] = iter_seconds / max(iters, 1)
    model.training_history = history
    model.config_snapshot = {**asdict(config), "backbone": asdict(config.backbone)}
    model.eval()
    return model
