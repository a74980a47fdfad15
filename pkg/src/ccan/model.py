"""The cascaded cross-attention aggregator and its pooling baselines.

Stage j holds M / C^(j-1) learnable latent tokens. Each stage runs Z
repeats of [one cross-attention onto the stage context, then S
self-attention layers]; stage 1 attends to the projected input tokens,
later stages to the previous stage's output. A pooled skip connection
(mean over C consecutive tokens) carries the previous stage's output
into the current one. A per-stage class token is then appended and the
widened set runs one final cross-attention over the projected input
tokens plus one final self-attention block; the class row feeds a head
MLP shared by all stages. Stage predictions are averaged for the final
output; training sums the per-stage losses.

Bags are processed one at a time; anything batch-like happens upstream
via gradient accumulation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .attention import (
    SCALE_MODES,
    BlockParams,
    cross_attention_block,
    init_block_params,
    self_attention_block,
)
from .autograd import Tensor
from .errors import ConfigError, DataError, FormatError, ShapeError
from .posenc import attach_encodings, encoding_width, frequency_ladder

CHECKPOINT_MAGIC = b"CCAN"
CHECKPOINT_VERSION = 1


@dataclass
class CCANConfig:
    """All architecture hyperparameters."""

    n_stages: int = 6  # J
    n_latents: int = 512  # M, first-stage latent count
    compression: int = 2  # C
    d_latent: int = 512  # D_l
    d_feature: int = 2048  # D_f
    block_repeats: int = 1  # Z
    self_layers: int = 2  # S, self-attention layers after each cross-attention
    p_dropout: float = 0.9  # input-token dropout fraction
    num_classes: int = 2
    n_frequencies: int = 6  # I
    f_max: float = 10.0
    scale_mode: str = "per-paper"
    heads: int = 1
    append_raw_coords: bool = False
    seed: int = 0

    def validate(self):
        if self.n_stages < 1:
            raise ConfigError(f"n_stages must be >= 1, got {self.n_stages}")
        if self.compression < 1:
            raise ConfigError(f"compression must be >= 1, got {self.compression}")
        denom = self.compression ** (self.n_stages - 1)
        if self.n_latents % denom != 0 or self.n_latents // denom < 1:
            raise ConfigError(
                f"n_latents={self.n_latents} is not divisible by "
                f"compression^(n_stages-1)={denom} down to >= 1 latent"
            )
        if self.block_repeats < 1 or self.self_layers < 0:
            raise ConfigError(
                f"need block_repeats >= 1 and self_layers >= 0, got {self.block_repeats}, {self.self_layers}"
            )
        if not 0 <= self.p_dropout < 1:
            raise ConfigError(f"p_dropout must be in [0, 1), got {self.p_dropout}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.scale_mode not in SCALE_MODES:
            raise ConfigError(f"scale_mode must be one of {SCALE_MODES}, got {self.scale_mode!r}")
        if self.heads < 1:
            raise ConfigError(f"heads must be >= 1, got {self.heads}")
        if self.heads > 1 and self.scale_mode == "per-paper":
            raise ConfigError("heads > 1 requires scale_mode='per-dim'")
        if self.d_latent % self.heads != 0:
            raise ConfigError(f"d_latent={self.d_latent} not divisible by heads={self.heads}")
        if self.n_frequencies < 1 or self.f_max < 1:
            raise ConfigError(f"need n_frequencies >= 1 and f_max >= 1, got {self.n_frequencies}, {self.f_max}")
        return self

    def latent_counts(self):
        return [self.n_latents // self.compression ** j for j in range(self.n_stages)]

    @property
    def out_units(self):
        # binary tasks use one sigmoid output; multiclass is one-vs-rest
        return 1 if self.num_classes == 2 else self.num_classes

    @property
    def d_encoded(self):
        return self.d_feature + encoding_width(self.n_frequencies, self.append_raw_coords)


@dataclass
class StageOutput:
    """Everything one stage produces for one bag."""

    latents_out: object  # Tensor, M_j x D_l (class row removed)
    class_embedding: object  # Tensor, 1 x D_l
    probs: np.ndarray  # out_units, detached
    probs_tensor: object  # Tensor, 1 x out_units, still in the graph
    records: list  # AttentionRecord, in execution order


@dataclass
class ModelOutput:
    stages: list  # of StageOutput, length J
    averaged_probs: np.ndarray  # out_units
    kept_indices: np.ndarray  # indices of surviving input tokens


@dataclass
class _Stage:
    latents: Tensor
    class_token: Tensor
    cross_blocks: list
    self_blocks: list  # flat list of Z*S blocks, grouped per repeat
    final_cross: BlockParams
    final_self: BlockParams


class CCANModel:
    """Holds config plus every learnable tensor; see module docstring."""

    def __init__(self, config, seed=None, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.ladder = frequency_ladder(config.n_frequencies, config.f_max)
        rng = np.random.default_rng(config.seed if seed is None else seed)

        def w(shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape).astype(self.dtype), requires_grad=True)

        def b(n):
            return Tensor(np.zeros(n, dtype=self.dtype), requires_grad=True)

        d = config.d_latent
        self.input_proj_w = w((config.d_encoded, d))
        self.input_proj_b = b(d)
        self.stages = []
        for count in config.latent_counts():
            self.stages.append(
                _Stage(
                    latents=w((count, d)),
                    class_token=w((1, d)),
                    cross_blocks=[init_block_params(d, rng, self.dtype) for _ in range(config.block_repeats)],
                    self_blocks=[
                        init_block_params(d, rng, self.dtype)
                        for _ in range(config.block_repeats * config.self_layers)
                    ],
                    final_cross=init_block_params(d, rng, self.dtype),
                    final_self=init_block_params(d, rng, self.dtype),
                )
            )
        self.head_w1 = w((d, d))
        self.head_b1 = b(d)
        self.head_w2 = w((d, config.out_units))
        self.head_b2 = b(config.out_units)

    def parameters(self):
        """(name, tensor) pairs in a fixed, checkpoint-stable order."""
        out = [("input_proj.w", self.input_proj_w), ("input_proj.b", self.input_proj_b)]
        for j, stage in enumerate(self.stages, start=1):
            out.append((f"stage{j}.latents", stage.latents))
            out.append((f"stage{j}.class_token", stage.class_token))
            for z, blk in enumerate(stage.cross_blocks):
                out.extend((f"stage{j}.cross{z}.{n}", t) for n, t in blk.named_tensors())
            for i, blk in enumerate(stage.self_blocks):
                out.extend((f"stage{j}.self{i}.{n}", t) for n, t in blk.named_tensors())
            out.extend((f"stage{j}.final_cross.{n}", t) for n, t in stage.final_cross.named_tensors())
            out.extend((f"stage{j}.final_self.{n}", t) for n, t in stage.final_self.named_tensors())
        out.extend(
            [
                ("head.w1", self.head_w1),
                ("head.b1", self.head_b1),
                ("head.w2", self.head_w2),
                ("head.b2", self.head_b2),
            ]
        )
        return out

    # -- forward ----------------------------------------------------------

    def _head(self, class_embedding):
        h = ag.gelu(ag.matmul(class_embedding, self.head_w1) + self.head_b1)
        logits = ag.matmul(h, self.head_w2) + self.head_b2
        return ag.sigmoid(logits)

    def stage_forward(self, j, prev_latents, input_ctx, train_mode=False):
        """Run stage j (1-based). ``prev_latents`` is None for stage 1."""
        cfg = self.config
        if not 1 <= j <= cfg.n_stages:
            raise ConfigError(f"stage index {j} outside 1..{cfg.n_stages}")
        stage = self.stages[j - 1]
        stage_ctx = input_ctx if j == 1 else prev_latents
        records = []
        x = stage.latents
        layer = 0
        for z in range(cfg.block_repeats):
            x, rec = cross_attention_block(
                x, stage_ctx, stage.cross_blocks[z], cfg.scale_mode, cfg.heads,
                stage_index=j, layer_index=layer,
            )
            records.append(rec)
            layer += 1
            for s in range(cfg.self_layers):
                x, rec = self_attention_block(
                    x, stage.self_blocks[z * cfg.self_layers + s], cfg.scale_mode, cfg.heads,
                    stage_index=j, layer_index=layer,
                )
                records.append(rec)
                layer += 1
        if j > 1:
            x = x + pooled_skip(prev_latents, cfg.compression)
        x = ag.concat_rows([x, stage.class_token])
        x, rec = cross_attention_block(
            x, input_ctx, stage.final_cross, cfg.scale_mode, cfg.heads,
            stage_index=j, layer_index=layer,
        )
        records.append(rec)
        layer += 1
        x, rec = self_attention_block(
            x, stage.final_self, cfg.scale_mode, cfg.heads, stage_index=j, layer_index=layer,
        )
        records.append(rec)
        m = x.shape[0] - 1
        class_embedding = ag.slice_rows(x, m, m + 1)
        latents_out = ag.slice_rows(x, 0, m)
        probs_tensor = self._head(class_embedding)
        return StageOutput(
            latents_out=latents_out,
            class_embedding=class_embedding,
            probs=probs_tensor.data.reshape(-1).copy(),
            probs_tensor=probs_tensor,
            records=records,
        )

    def forward(self, bag, rng=None, train_mode=False):
        """Full pass over one bag; deterministic whenever train_mode is off."""
        cfg = self.config
        if bag.n_tokens < 1:
            raise DataError("cannot run a forward pass on an empty bag")
        if bag.d_feature != cfg.d_feature:
            raise ShapeError(f"bag feature dim {bag.d_feature} != configured {cfg.d_feature}")
        encoded = attach_encodings(
            bag.tokens.astype(self.dtype), bag.coords(), self.ladder, cfg.append_raw_coords
        )
        kept, kept_indices = token_dropout(encoded, cfg.p_dropout, rng, train_mode)
        ctx = ag.matmul(Tensor(kept.astype(self.dtype)), self.input_proj_w) + self.input_proj_b
        stages = []
        prev = None
        for j in range(1, cfg.n_stages + 1):
            so = self.stage_forward(j, prev, ctx, train_mode)
            stages.append(so)
            prev = so.latents_out
        averaged = np.mean([so.probs for so in stages], axis=0)
        return ModelOutput(stages=stages, averaged_probs=averaged, kept_indices=kept_indices)


def init_model(config, seed=None, dtype=np.float32):
    return CCANModel(config, seed=seed, dtype=dtype)


def token_dropout(tokens, p_dropout, rng, train_mode):
    """Keep a uniform subset of max(1, round(N*(1-p))) token rows.

    Evaluation mode is the identity. Surviving tokens are not rescaled.
    """
    n = tokens.shape[0]
    if not train_mode or p_dropout == 0:
        return tokens, np.arange(n)
    if rng is None:
        raise ConfigError("token_dropout in train mode needs an rng")
    keep = max(1, round(n * (1.0 - p_dropout)))
    kept_indices = np.sort(rng.choice(n, size=keep, replace=False))
    return tokens[kept_indices], kept_indices


def pooled_skip(prev_tokens, compression):
    """Average each run of ``compression`` consecutive tokens."""
    return ag.avg_pool_rows(prev_tokens, compression)


def stage_forward(model, j, prev_latents, input_ctx, train_mode=False):
    return model.stage_forward(j, prev_latents, input_ctx, train_mode)


def forward(model, bag, rng=None, train_mode=False):
    return model.forward(bag, rng=rng, train_mode=train_mode)


# ---------------------------------------------------------------------------
# baseline aggregators


BASELINE_KINDS = ("mean-pool", "max-pool", "full-self-attention")


@dataclass
class BaselineConfig:
    kind: str = "mean-pool"
    d_feature: int = 2048
    d_latent: int = 512  # used by full-self-attention only
    num_classes: int = 2
    scale_mode: str = "per-paper"
    heads: int = 1
    seed: int = 0

    def validate(self):
        if self.kind not in BASELINE_KINDS:
            raise ConfigError(f"baseline kind must be one of {BASELINE_KINDS}, got {self.kind!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        return self

    @property
    def out_units(self):
        return 1 if self.num_classes == 2 else self.num_classes


class BaselineModel:
    """Mean/max pooling over raw tokens, or one self-attention block.

    Pooling baselines pool the D_f tokens directly and apply a linear
    head; the full-self-attention reference projects tokens to D_l,
    runs one self-attention block over all N of them (the O(N^2) path),
    mean-pools, and applies a linear head.
    """

    def __init__(self, config, seed=None, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed if seed is None else seed)

        def w(shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape).astype(self.dtype), requires_grad=True)

        def b(n):
            return Tensor(np.zeros(n, dtype=self.dtype), requires_grad=True)

        if config.kind == "full-self-attention":
            self.input_proj_w = w((config.d_feature, config.d_latent))
            self.input_proj_b = b(config.d_latent)
            self.block = init_block_params(config.d_latent, rng, self.dtype)
            head_in = config.d_latent
        else:
            self.input_proj_w = None
            self.input_proj_b = None
            self.block = None
            head_in = config.d_feature
        self.head_w = w((head_in, config.out_units))
        self.head_b = b(config.out_units)

    def parameters(self):
        out = []
        if self.block is not None:
            out.extend([("input_proj.w", self.input_proj_w), ("input_proj.b", self.input_proj_b)])
            out.extend((f"block.{n}", t) for n, t in self.block.named_tensors())
        out.extend([("head.w", self.head_w), ("head.b", self.head_b)])
        return out

    def forward(self, bag, rng=None, train_mode=False):
        cfg = self.config
        if bag.n_tokens < 1:
            raise DataError("cannot run a forward pass on an empty bag")
        tokens = Tensor(bag.tokens.astype(self.dtype))
        records = []
        if cfg.kind == "mean-pool":
            pooled = ag.mean_rows(tokens)
        elif cfg.kind == "max-pool":
            pooled = ag.max_rows(tokens)
        else:
            x = ag.matmul(tokens, self.input_proj_w) + self.input_proj_b
            x, rec = self_attention_block(x, self.block, cfg.scale_mode, cfg.heads, stage_index=1)
            records.append(rec)
            pooled = ag.mean_rows(x)
        probs_tensor = ag.sigmoid(ag.matmul(pooled, self.head_w) + self.head_b)
        so = StageOutput(
            latents_out=pooled,
            class_embedding=pooled,
            probs=probs_tensor.data.reshape(-1).copy(),
            probs_tensor=probs_tensor,
            records=records,
        )
        return ModelOutput(
            stages=[so], averaged_probs=so.probs.copy(), kept_indices=np.arange(bag.n_tokens)
        )


def baseline_forward(kind, bag, params):
    """Run a baseline aggregator; ``params`` is a BaselineModel."""
    if params.config.kind != kind:
        raise ConfigError(f"model was built for {params.config.kind!r}, not {kind!r}")
    return params.forward(bag).averaged_probs


# ---------------------------------------------------------------------------
# checkpoints


def _config_payload(model):
    if isinstance(model, CCANModel):
        return {"model_kind": "ccan", "config": asdict(model.config)}
    return {"model_kind": model.config.kind, "config": asdict(model.config)}


def save_checkpoint(model, path):
    """Versioned binary container: header, config JSON, named float32 blobs."""
    payload = json.dumps(_config_payload(model), sort_keys=True).encode("utf-8")
    params = model.parameters()
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<H", CHECKPOINT_VERSION)
    buf += struct.pack("<I", len(payload))
    buf += payload
    buf += struct.pack("<I", len(params))
    for name, tensor in params:
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw))
        buf += raw
        buf += struct.pack("<B", tensor.data.ndim)
        for extent in tensor.data.shape:
            buf += struct.pack("<I", extent)
        buf += np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_checkpoint(path, dtype=np.float32):
    with open(path, "rb") as fh:
        blob = fh.read()
    offset = 0

    def take(n, what):
        nonlocal offset
        if offset + n > len(blob):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=offset)
        out = blob[offset : offset + n]
        offset += n
        return out

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (payload_len,) = struct.unpack("<I", take(4, "config length"))
    payload = json.loads(take(payload_len, "config").decode("utf-8"))
    kind = payload["model_kind"]
    if kind == "ccan":
        model = CCANModel(CCANConfig(**payload["config"]), dtype=dtype)
    else:
        model = BaselineModel(BaselineConfig(**payload["config"]), dtype=dtype)
    (n_params,) = struct.unpack("<I", take(4, "parameter count"))
    params = dict(model.parameters())
    if n_params != len(params):
        raise FormatError(f"expected {len(params)} parameters, found {n_params}", offset=offset)
    for _ in range(n_params):
        (name_len,) = struct.unpack("<H", take(2, "parameter name length"))
        name = take(name_len, "parameter name").decode("utf-8")
        if name not in params:
            raise FormatError(f"unknown parameter {name!r}", offset=offset)
        (ndim,) = struct.unpack("<B", take(1, "parameter rank"))
        shape = tuple(struct.unpack("<I", take(4, "parameter extent"))[0] for _ in range(ndim))
        target = params[name]
        if shape != target.data.shape:
            raise FormatError(f"parameter {name!r} has shape {shape}, expected {target.data.shape}", offset=offset)
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(take(4 * count, f"values of {name!r}"), dtype="<f4").reshape(shape)
        target.data[...] = values.astype(model.dtype)
    if offset != len(blob):
        raise FormatError("trailing bytes after parameters", offset=offset)
    return model
