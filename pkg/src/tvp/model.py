"""The grounding model: 2D vision encoding, text encoding, crossmodal fusion.

Per-sample flow (no batch axis; batching is a fixed-order reduction over
samples in the trainer):

1. sampled frames (n_sam, 3, S, S), optionally visual-prompted, go through a
   strided conv stack -> (n_sam, D_v, S/stride, S/stride);
2. 2x2 spatial max pooling then a temporal mean over the frame axis
   -> (D_v, G, G);
3. token ids -> embedding rows, text prompts prepended, positional
   embeddings added;
4. the visual grid is projected 1x1 to the hidden width, flattened row-major
   and tagged with factored row+column position embeddings;
5. sequence [AGG; text; visual] + type embeddings runs through a pre-norm
   transformer encoder, and a 2-layer MLP on the AGG row ends in a sigmoid
   that yields the (start, end) pair (ordered by min/max).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from tvp.autodiff import (
    Tensor,
    concat,
    conv2d,
    dropout,
    embedding,
    make_op,
    maxpool2x2,
    no_grad,
    softmax,
)
from tvp.frames import FrameBatch, PipelineConfig, RawVideo, preprocess
from tvp.intervals import LossBreakdown, LossConfig, TimeInterval, _breakdown_raw, _grad_raw
from tvp.prompts import TextPromptSet, VisualPromptSet, apply_visual_arrays, ring_mask

__all__ = ["ModelConfig", "PromptState", "GroundingModel", "ForwardResult", "init_params", "param_count"]

_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    The full-scale reference shape (5 conv blocks at total stride 32, 12
    transformer layers, hidden 768) is expressible here; the defaults are the
    desk-scale configuration used throughout the tests.
    """

    hidden_dim: int = 64
    conv_channels: tuple[int, ...] = (16, 32, 64)
    conv_strides: tuple[int, ...] = (2, 2, 2)
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 64
    max_text_len: int = 16
    grid_side: int = 4
    n_text_prompts: int = 10
    dropout: float = 0.0
    # Pre-norm trains more stably from random init at this scale; post-norm
    # mirrors the BERT-style reference encoder.
    pre_norm: bool = True

    def __post_init__(self) -> None:
        if len(self.conv_channels) != len(self.conv_strides):
            raise ValueError("conv_channels and conv_strides must have equal length")
        if self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if min(self.conv_channels, default=1) < 1 or min(self.conv_strides, default=1) < 1:
            raise ValueError("conv widths and strides must be >= 1")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.conv_strides))

    @property
    def vision_dim(self) -> int:
        return self.conv_channels[-1]

    def check_canvas(self, canvas: int) -> None:
        stride = self.total_stride
        if canvas % stride:
            raise ValueError(f"canvas {canvas} not divisible by total stride {stride}")
        fmap = canvas // stride
        if fmap % 2:
            raise ValueError(f"feature map side {fmap} must be even for 2x2 pooling")
        if fmap // 2 != self.grid_side:
            raise ValueError(
                f"grid_side {self.grid_side} inconsistent with canvas {canvas} "
                f"(expected {fmap // 2})"
            )


@dataclass
class PromptState:
    """Prompt tensors inside the training graph plus their geometry."""

    visual: Tensor | None  # (n_sam, 3, S, S)
    text: Tensor | None  # (n_tp, hidden)
    width: int = 0
    mode: str = "replace"

    @staticmethod
    def from_sets(
        visual: VisualPromptSet | None,
        text: TextPromptSet | None,
        trainable: bool = False,
        dtype=np.float32,
    ) -> "PromptState":
        vt = None if visual is None else Tensor(visual.patterns.astype(dtype), requires_grad=trainable)
        tt = None if text is None else Tensor(text.vectors.astype(dtype), requires_grad=trainable)
        return PromptState(
            visual=vt,
            text=tt,
            width=0 if visual is None else visual.width,
            mode="replace" if visual is None else visual.mode,
        )

    def to_sets(self) -> tuple[VisualPromptSet | None, TextPromptSet | None]:
        vs = None if self.visual is None else VisualPromptSet(
            patterns=self.visual.data.copy(), width=self.width, mode=self.mode
        )
        ts = None if self.text is None else TextPromptSet(vectors=self.text.data.copy())
        return vs, ts


@dataclass
class ForwardResult:
    interval: TimeInterval
    raw_pair: tuple[float, float]
    breakdown: LossBreakdown | None = None
    loss: Tensor | None = None
    activations: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------

def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 3
    for i, (cout, _s) in enumerate(zip(cfg.conv_channels, cfg.conv_strides)):
        shapes[f"vision.block{i}.conv.w"] = (cout, cin, 3, 3)
        shapes[f"vision.block{i}.conv.b"] = (cout,)
        shapes[f"vision.block{i}.norm.gamma"] = (cout,)
        shapes[f"vision.block{i}.norm.beta"] = (cout,)
        cin = cout
    shapes["vision.proj.w"] = (cfg.vision_dim, d)
    shapes["vision.proj.b"] = (d,)
    shapes["embed.token"] = (cfg.vocab_size, d)
    shapes["embed.pos_text"] = (cfg.n_text_prompts + cfg.max_text_len, d)
    shapes["embed.pos_row"] = (cfg.grid_side, d)
    shapes["embed.pos_col"] = (cfg.grid_side, d)
    shapes["embed.type"] = (2, d)
    shapes["embed.agg"] = (1, d)
    for i in range(cfg.n_layers):
        p = f"transformer.layer{i}"
        shapes[f"{p}.ln1.gamma"] = (d,)
        shapes[f"{p}.ln1.beta"] = (d,)
        for name in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.w{name}"] = (d, d)
            # No key bias: softmax rows are invariant to a constant key
            # offset, so it would be a dead parameter.
            if name != "k":
                shapes[f"{p}.attn.b{name}"] = (d,)
        shapes[f"{p}.ln2.gamma"] = (d,)
        shapes[f"{p}.ln2.beta"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, 4 * d)
        shapes[f"{p}.ffn.b1"] = (4 * d,)
        shapes[f"{p}.ffn.w2"] = (4 * d, d)
        shapes[f"{p}.ffn.b2"] = (d,)
    shapes["transformer.ln_f.gamma"] = (d,)
    shapes["transformer.ln_f.beta"] = (d,)
    shapes["head.w1"] = (d, d)
    shapes["head.b1"] = (d,)
    shapes["head.w2"] = (d, 2)
    shapes["head.b2"] = (2,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Total trainable scalar count; a pure function of the config."""
    return sum(int(np.prod(s)) for s in _param_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Seeded parameter init.

    Convs are He-scaled and linear weights fan-in-scaled (a fixed 0.02 std
    starves the input-dependent signal paths at desk-scale widths and the
    model collapses onto the constant-prior predictor); embedding tables use
    0.02, norm gains start at one and every bias at zero.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in _param_shapes(cfg).items():
        if name.endswith(".conv.w"):
            fan_in = shape[1] * shape[2] * shape[3]
            data = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        elif name.endswith((".gamma",)):
            data = np.ones(shape)
        elif name.endswith((".beta", ".b", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo")):
            data = np.zeros(shape)
        elif name.startswith("embed."):
            data = rng.standard_normal(shape) * 0.02
        else:
            data = rng.standard_normal(shape) / math.sqrt(shape[0])
        params[name] = Tensor.param(np.asarray(data, dtype=dtype))
    return params


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def _frame_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Normalize each frame over (C, H, W) with a per-channel affine.

    Fused op: conv feature maps are the largest tensors in the model, so this
    avoids the temporaries a primitive-op composition would allocate.
    """
    axes = (1, 2, 3)
    data = x.data
    mu = data.mean(axis=axes, keepdims=True)
    xc = data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + _NORM_EPS)
    y = xc * inv
    gb = gamma.data[None, :, None, None]
    out = y * gb + beta.data[None, :, None, None]

    def backward(g):
        gy = g * gb
        gx = inv * (gy - gy.mean(axis=axes, keepdims=True) - y * (gy * y).mean(axis=axes, keepdims=True))
        ggamma = (g * y).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        return ((x, gx), (gamma, ggamma), (beta, gbeta))

    return make_op(out, (x, gamma, beta), backward)


def _layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    return xc * (var + _NORM_EPS) ** -0.5 * gamma + beta


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


def _tdiou_node(pred_sorted: Tensor, gt: TimeInterval, cfg: LossConfig) -> tuple[Tensor, LossBreakdown]:
    """Loss graph node whose backward is the analytic interval-loss gradient."""
    ps, pe = float(pred_sorted.data[0]), float(pred_sorted.data[1])
    bd = _breakdown_raw(ps, pe, gt.start, gt.end, cfg)

    def backward(g):
        gs_, ge_ = _grad_raw(ps, pe, gt.start, gt.end, cfg)
        return ((pred_sorted, np.asarray([gs_, ge_], dtype=pred_sorted.dtype) * g),)

    return make_op(np.asarray(bd.total, dtype=pred_sorted.dtype), (pred_sorted,), backward), bd


class GroundingModel:
    """Config plus parameter tensors; all methods are pure graph builders."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.last_attn: list[np.ndarray] = []

    @staticmethod
    def create(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> "GroundingModel":
        return GroundingModel(cfg, init_params(cfg, seed=seed, dtype=dtype))

    @property
    def dtype(self):
        return self.params["head.w2"].dtype

    # -- phase 2: feature extraction ---------------------------------------

    def encode_vision(self, frames: Tensor) -> Tensor:
        """(n_sam, 3, S, S) -> (n_sam, D_v, S/stride, S/stride)."""
        x = frames
        for i, stride in enumerate(self.cfg.conv_strides):
            p = self.params
            x = conv2d(x, p[f"vision.block{i}.conv.w"], p[f"vision.block{i}.conv.b"], stride=stride, pad=1)
            x = _frame_norm(x, p[f"vision.block{i}.norm.gamma"], p[f"vision.block{i}.norm.beta"])
            x = x.relu()
        return x

    @staticmethod
    def pool_fuse(qvid: Tensor) -> Tensor:
        """2x2 spatial max pool, then mean over the frame axis."""
        pooled = maxpool2x2(qvid)
        return pooled.mean(axis=0)

    def encode_text(self, tokens) -> Tensor:
        """Token ids -> embedding rows; raises on out-of-vocab ids."""
        return embedding(self.params["embed.token"], list(tokens))

    # -- phase 3: multimodal assembly ---------------------------------------

    def assemble(self, qvid_grid: Tensor, text_feats: Tensor) -> Tensor:
        """Build the fused sequence [AGG; prompted text; visual grid].

        Text rows receive positional embeddings; the row-major flattened
        grid receives factored row+column embeddings; type embedding 0 tags
        the AGG and text rows, type 1 the visual rows.
        """
        cfg = self.cfg
        p = self.params
        g = cfg.grid_side
        dv, gh, gw = qvid_grid.shape
        if (gh, gw) != (g, g):
            raise ValueError(f"expected {g}x{g} visual grid, got {gh}x{gw}")

        vis = qvid_grid.reshape((dv, g * g)).transpose((1, 0))  # (G^2, D_v)
        vis = _linear(vis, p["vision.proj.w"], p["vision.proj.b"])
        rows = np.repeat(np.arange(g), g)
        cols = np.tile(np.arange(g), g)
        vis = vis + embedding(p["embed.pos_row"], rows) + embedding(p["embed.pos_col"], cols)

        n_text = text_feats.shape[0]
        max_rows = p["embed.pos_text"].shape[0]
        if n_text > max_rows:
            raise ValueError(f"text sequence of {n_text} exceeds positional table ({max_rows})")
        text = text_feats + embedding(p["embed.pos_text"], np.arange(n_text))

        seq = concat([p["embed.agg"], text, vis], axis=0)
        types = np.concatenate([np.zeros(1 + n_text, dtype=np.int64), np.ones(g * g, dtype=np.int64)])
        return seq + embedding(p["embed.type"], types)

    # -- phase 4: crossmodal fusion and head ---------------------------------

    def _attention(self, x: Tensor, layer: str, rng, train: bool) -> Tensor:
        cfg = self.cfg
        p = self.params
        t, d = x.shape
        nh = cfg.n_heads
        hd = d // nh

        def split(h: Tensor) -> Tensor:
            return h.reshape((t, nh, hd)).transpose((1, 0, 2))  # (nh, T, hd)

        q = split(_linear(x, p[f"{layer}.attn.wq"], p[f"{layer}.attn.bq"]))
        k = split(x @ p[f"{layer}.attn.wk"])
        v = split(_linear(x, p[f"{layer}.attn.wv"], p[f"{layer}.attn.bv"]))
        scores = (q @ k.transpose((0, 2, 1))) * (1.0 / math.sqrt(hd))
        attn = softmax(scores, axis=-1)
        self.last_attn.append(attn.data)
        if train and cfg.dropout > 0.0:
            attn = dropout(attn, cfg.dropout, rng)
        ctx = (attn @ v).transpose((1, 0, 2)).reshape((t, d))
        return _linear(ctx, p[f"{layer}.attn.wo"], p[f"{layer}.attn.bo"])

    def crossmodal_forward(self, q_all: Tensor, rng=None, train: bool = False) -> Tensor:
        """Transformer encoder (pre-norm by default) with full bidirectional
        attention over the fused sequence."""
        cfg = self.cfg
        p = self.params
        self.last_attn = []
        x = q_all
        for i in range(cfg.n_layers):
            layer = f"transformer.layer{i}"

            def ffn(h: Tensor) -> Tensor:
                h = _linear(h, p[f"{layer}.ffn.w1"], p[f"{layer}.ffn.b1"]).gelu()
                h = _linear(h, p[f"{layer}.ffn.w2"], p[f"{layer}.ffn.b2"])
                if train and cfg.dropout > 0.0:
                    h = dropout(h, cfg.dropout, rng)
                return h

            if cfg.pre_norm:
                h = _layer_norm(x, p[f"{layer}.ln1.gamma"], p[f"{layer}.ln1.beta"])
                x = x + self._attention(h, layer, rng, train)
                h = _layer_norm(x, p[f"{layer}.ln2.gamma"], p[f"{layer}.ln2.beta"])
                x = x + ffn(h)
            else:
                x = _layer_norm(x + self._attention(x, layer, rng, train),
                                p[f"{layer}.ln1.gamma"], p[f"{layer}.ln1.beta"])
                x = _layer_norm(x + ffn(x), p[f"{layer}.ln2.gamma"], p[f"{layer}.ln2.beta"])
        return _layer_norm(x, p["transformer.ln_f.gamma"], p["transformer.ln_f.beta"])

    def predict(self, q_cm: Tensor) -> tuple[Tensor, TimeInterval, tuple[float, float]]:
        """MLP + sigmoid on the AGG row; returns the ordered endpoint pair."""
        p = self.params
        h = _linear(q_cm[0:1], p["head.w1"], p["head.b1"]).gelu()
        raw = _linear(h, p["head.w2"], p["head.b2"]).reshape((2,)).sigmoid()
        u, v = float(raw.data[0]), float(raw.data[1])
        if not (math.isfinite(u) and math.isfinite(v)):
            raise FloatingPointError(f"non-finite prediction pair ({u}, {v})")
        order = [0, 1] if u <= v else [1, 0]
        pred_sorted = raw[order]
        interval = TimeInterval(float(pred_sorted.data[0]), float(pred_sorted.data[1]))
        return pred_sorted, interval, (u, v)

    # -- full pipeline --------------------------------------------------------

    def _check_prompts(self, prompts: PromptState | None, frame_shape) -> None:
        if prompts is None:
            return
        if prompts.visual is not None:
            if prompts.visual.shape != frame_shape:
                raise ValueError(
                    f"visual prompt shape {prompts.visual.shape} does not match frames {frame_shape}"
                )
            if prompts.visual.dtype != self.dtype:
                raise ValueError(
                    f"visual prompt dtype {prompts.visual.dtype} does not match model dtype {self.dtype}"
                )
        if prompts.text is not None and prompts.text.shape[0] > 0:
            if prompts.text.shape[1] != self.cfg.hidden_dim:
                raise ValueError("text prompt width does not match hidden width")
            if prompts.text.dtype != self.dtype:
                raise ValueError(
                    f"text prompt dtype {prompts.text.dtype} does not match model dtype {self.dtype}"
                )

    def _fuse_and_predict(
        self,
        grid: Tensor,
        tokens,
        prompts: PromptState | None,
        gt: TimeInterval | None,
        loss_cfg: LossConfig | None,
        rng,
        train: bool,
    ) -> ForwardResult:
        if len(tokens) > self.cfg.max_text_len:
            raise ValueError(
                f"query of {len(tokens)} tokens exceeds max_text_len {self.cfg.max_text_len}"
            )
        text = self.encode_text(tokens)
        if prompts is not None and prompts.text is not None and prompts.text.shape[0] > 0:
            text = concat([prompts.text, text], axis=0)
        q_all = self.assemble(grid, text)
        q_cm = self.crossmodal_forward(q_all, rng=rng, train=train)
        pred_sorted, interval, raw_pair = self.predict(q_cm)

        result = ForwardResult(interval=interval, raw_pair=raw_pair)
        if gt is not None:
            cfg = loss_cfg if loss_cfg is not None else LossConfig()
            loss, bd = _tdiou_node(pred_sorted, gt, cfg)
            result.loss = loss
            result.breakdown = bd
        return result

    def forward_batchframes(
        self,
        batch: FrameBatch,
        tokens,
        prompts: PromptState | None = None,
        gt: TimeInterval | None = None,
        loss_cfg: LossConfig | None = None,
        rng=None,
        train: bool = False,
    ) -> ForwardResult:
        """Forward from an already-preprocessed FrameBatch."""
        frames = Tensor(batch.frames.astype(self.dtype, copy=False))
        self._check_prompts(prompts, frames.shape)
        if prompts is not None and prompts.visual is not None:
            mask = ring_mask(batch.canvas, prompts.width, dtype=self.dtype)
            frames = apply_visual_arrays(frames, prompts.visual, mask, prompts.mode)
        qvid = self.encode_vision(frames)
        grid = self.pool_fuse(qvid)
        return self._fuse_and_predict(grid, tokens, prompts, gt, loss_cfg, rng, train)

    def forward_batch(
        self,
        batches: list[FrameBatch],
        token_lists,
        prompts: PromptState | None = None,
        gts: list[TimeInterval] | None = None,
        loss_cfg: LossConfig | None = None,
        rng=None,
        train: bool = False,
    ) -> tuple[list[ForwardResult], Tensor | None]:
        """Forward a batch of samples through one shared vision graph.

        The conv trunk runs once on the stacked frames; fusion and the head
        run per sample in order. Returns the per-sample results and, when
        ground truths are given, the mean-loss node for a single backward
        pass (a fixed-order reduction over the batch).
        """
        n = len(batches)
        if n == 0:
            raise ValueError("empty batch")
        if gts is not None and len(gts) != n:
            raise ValueError("gts length does not match batch")
        shape = batches[0].frames.shape
        for b in batches:
            if b.frames.shape != shape:
                raise ValueError("all frame batches in a batch must share one shape")

        stacked = np.stack([b.frames for b in batches]).astype(self.dtype, copy=False)
        frames = Tensor(stacked)  # (B, n_sam, C, S, S)
        self._check_prompts(prompts, shape)
        if prompts is not None and prompts.visual is not None:
            mask = ring_mask(batches[0].canvas, prompts.width, dtype=self.dtype)
            frames = apply_visual_arrays(frames, prompts.visual, mask, prompts.mode)

        n_sam, c, s, _ = shape
        flat = frames.reshape((n * n_sam, c, s, s))
        qvid = self.encode_vision(flat)
        pooled = maxpool2x2(qvid)
        dv, gh, gw = pooled.shape[1:]
        grids = pooled.reshape((n, n_sam, dv, gh, gw)).mean(axis=1)  # (B, D_v, G, G)

        results = []
        loss_nodes = []
        for i in range(n):
            res = self._fuse_and_predict(
                grids[i],
                token_lists[i],
                prompts,
                None if gts is None else gts[i],
                loss_cfg,
                rng,
                train,
            )
            results.append(res)
            if res.loss is not None:
                loss_nodes.append(res.loss)

        mean_loss = None
        if loss_nodes:
            total = loss_nodes[0]
            for node in loss_nodes[1:]:
                total = total + node
            mean_loss = total * (1.0 / len(loss_nodes))
        return results, mean_loss

    def forward(
        self,
        video: RawVideo,
        tokens,
        pipe_cfg: PipelineConfig,
        prompts: PromptState | None = None,
        gt: TimeInterval | None = None,
        loss_cfg: LossConfig | None = None,
        rng=None,
        train: bool = False,
    ) -> ForwardResult:
        """preprocess -> prompt -> encode -> fuse -> predict (-> loss)."""
        self.cfg.check_canvas(pipe_cfg.canvas)
        batch = preprocess(video, pipe_cfg)
        return self.forward_batchframes(
            batch, tokens, prompts=prompts, gt=gt, loss_cfg=loss_cfg, rng=rng, train=train
        )

    def predict_interval(self, batch: FrameBatch, tokens, prompts: PromptState | None = None) -> TimeInterval:
        """Evaluation-mode prediction without graph construction."""
        with no_grad():
            return self.forward_batchframes(batch, tokens, prompts=prompts).interval
