"""The retrieval network: dual-stream hierarchical backbone (conv early, SSM
token mixers late), auxiliary geometric prior encoder, cross-attention
injection/interaction blocks, deep-supervision mask heads, and 1024-d
embedding heads with a BN neck.

Cross-attention and MLP output projections are zero-initialized, so every
injection/interaction block is an exact identity at init.
"""

from __future__ import annotations

import json
import math

import numpy as np

from . import tensor as T
from .config import RunConfig, StageConfig
from .tensor import Tensor, ShapeError, concat, conv2d, global_avg_pool, softmax

CHECKPOINT_VERSION = 1


# ---- module infrastructure --------------------------------------------------

class Module:
    """Lightweight container: parameters are requires_grad Tensors found by
    attribute walk; numpy-array attributes are persistent buffers."""

    training: bool = True

    def _walk(self, key: str, value, params: dict, buffers: dict):
        if isinstance(value, Tensor) and value.requires_grad:
            params[key] = value
        elif isinstance(value, np.ndarray):
            buffers[key] = value
        elif isinstance(value, Module):
            value._collect(f"{key}.", params, buffers)
        elif isinstance(value, (list, tuple)):
            for i, item in enumerate(value):
                self._walk(f"{key}.{i}", item, params, buffers)
        elif isinstance(value, dict):
            for k, item in value.items():
                self._walk(f"{key}.{k}", item, params, buffers)

    def _collect(self, prefix: str, params: dict, buffers: dict):
        for name, value in vars(self).items():
            self._walk(f"{prefix}{name}", value, params, buffers)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        self._collect(prefix, params, {})
        return params

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        buffers: dict[str, np.ndarray] = {}
        self._collect(prefix, {}, buffers)
        return buffers

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def set_training(self, flag: bool):
        self.training = flag
        for value in vars(self).values():
            self._set_training_on(value, flag)

    @staticmethod
    def _set_training_on(value, flag: bool):
        if isinstance(value, Module):
            value.set_training(flag)
        elif isinstance(value, (list, tuple)):
            for item in value:
                Module._set_training_on(item, flag)
        elif isinstance(value, dict):
            for item in value.values():
                Module._set_training_on(item, flag)


def _param(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True,
                 zero_init: bool = False):
        self.w = _zeros((d_in, d_out)) if zero_init else _param(rng, (d_in, d_out),
                                                                math.sqrt(1.0 / d_in))
        self.b = _zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.w
        if self.b is not None:
            out = out + self.b
        return out


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int = 1,
                 pad: int = 0, bias: bool = True, zero_init: bool = False):
        std = math.sqrt(2.0 / (c_in * k * k))
        self.w = _zeros((c_out, c_in, k, k)) if zero_init else _param(rng, (c_out, c_in, k, k), std)
        self.b = _zeros((c_out,)) if bias else None
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class BatchNorm(Module):
    """Batch normalization over (N,) or (N,H,W) per channel; running stats in
    eval mode so per-sample forwards are batch-independent."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = _zeros((channels,))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps, self.momentum = eps, momentum

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 4:
            axes, shape = (0, 2, 3), (1, -1, 1, 1)
        elif x.ndim == 2:
            axes, shape = (0,), (1, -1)
        else:
            raise ShapeError("batch_norm", x.shape)
        if self.training:
            mu = x.mean(axis=axes, keepdims=True)
            xc = x - mu
            var = (xc * xc).mean(axis=axes, keepdims=True)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
            self.running_var = (1 - m) * self.running_var + m * var.data.reshape(-1)
            xhat = xc / (var + self.eps).sqrt()
        else:
            mu = Tensor(self.running_mean.reshape(shape))
            var = Tensor(self.running_var.reshape(shape))
            xhat = (x - mu) / (var + self.eps).sqrt()
        return xhat * self.gamma.reshape(shape) + self.beta.reshape(shape)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = _zeros((dim,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, axis=-1, eps=self.eps) * self.gamma + self.beta


class Mlp(Module):
    def __init__(self, rng, dim: int, ratio: int = 2, zero_out: bool = False):
        self.fc1 = Linear(rng, dim, dim * ratio)
        self.fc2 = Linear(rng, dim * ratio, dim, zero_init=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())


class MultiHeadCrossAttention(Module):
    """Softmax cross-attention over token sequences (N, L, C); the output
    projection is zero-initialized so the residual starts as identity."""

    def __init__(self, rng, dim: int, heads: int):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim, zero_init=True)
        self.heads = heads
        self.head_dim = dim // heads

    def _split(self, x: Tensor) -> Tensor:
        n, l, c = x.shape
        return x.reshape(n, l, self.heads, self.head_dim).transpose(0, 2, 1, 3) \
                .reshape(n * self.heads, l, self.head_dim)

    def __call__(self, q_tokens: Tensor, kv_tokens: Tensor) -> Tensor:
        if q_tokens.shape[-1] != kv_tokens.shape[-1]:
            raise ShapeError("cross_attention", q_tokens.shape, kv_tokens.shape)
        n, lq, c = q_tokens.shape
        q = self._split(self.wq(q_tokens))
        k = self._split(self.wk(kv_tokens))
        v = self._split(self.wv(kv_tokens))
        attn = softmax((q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(self.head_dim)), axis=-1)
        out = (attn @ v).reshape(n, self.heads, lq, self.head_dim) \
                        .transpose(0, 2, 1, 3).reshape(n, lq, c)
        return self.wo(out)


class SsmMixer(Module):
    """Per-channel diagonal selective state-space token mixer.

    Zero-order-hold discretization: A_bar = exp(dt*A) with A = -softplus(a),
    B_bar = dt*B; B, C input-dependent via linear maps, dt via per-channel
    affine + softplus, D skip. Forward and reverse raster scans averaged.
    """

    def __init__(self, rng, dim: int, state_dim: int):
        self.a_raw = Tensor(rng.normal(0.55, 0.1, (dim, state_dim)), requires_grad=True)
        self.w_dt = Tensor(rng.normal(1.0, 0.1, dim), requires_grad=True)
        self.b_dt = _zeros((dim,))
        self.w_b = Linear(rng, dim, state_dim, bias=False)
        self.w_c = Linear(rng, dim, state_dim, bias=False)
        self.d_skip = Tensor(np.ones(dim), requires_grad=True)
        self.dim, self.state_dim = dim, state_dim

    def scan(self, tokens: Tensor, reverse: bool = False) -> Tensor:
        n, l, c = tokens.shape
        a = -(self.a_raw.softplus())                     # (C,S), entries < 0
        order = range(l - 1, -1, -1) if reverse else range(l)
        h = Tensor(np.zeros((n, c, self.state_dim)))
        ys = [None] * l
        for t in order:
            x_t = tokens[:, t, :]                       # (N,C)
            dt = (x_t * self.w_dt + self.b_dt).softplus()
            a_bar = (dt.reshape(n, c, 1) * a.reshape(1, c, self.state_dim)).exp()
            b_t = self.w_b(x_t)                         # (N,S)
            bx = dt.reshape(n, c, 1) * b_t.reshape(n, 1, self.state_dim) * x_t.reshape(n, c, 1)
            h = a_bar * h + bx
            c_t = self.w_c(x_t)                         # (N,S)
            y = (h * c_t.reshape(n, 1, self.state_dim)).sum(axis=2) + self.d_skip * x_t
            ys[t] = y.reshape(n, 1, c)
        return concat(ys, axis=1)

    def __call__(self, tokens: Tensor) -> Tensor:
        return (self.scan(tokens, False) + self.scan(tokens, True)) * 0.5


class SsmBlock(Module):
    def __init__(self, rng, dim: int, state_dim: int, mlp_ratio: int):
        self.ln1 = LayerNorm(dim)
        self.mixer = SsmMixer(rng, dim, state_dim)
        self.ln2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, mlp_ratio, zero_out=True)

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        tokens = x.reshape(n, c, h * w).transpose(0, 2, 1)
        tokens = tokens + self.mixer(self.ln1(tokens))
        tokens = tokens + self.mlp(self.ln2(tokens))
        return tokens.transpose(0, 2, 1).reshape(n, c, h, w)


class ConvBlock(Module):
    def __init__(self, rng, channels: int):
        self.conv1 = Conv2d(rng, channels, channels, 3, pad=1, bias=False)
        self.bn1 = BatchNorm(channels)
        self.conv2 = Conv2d(rng, channels, channels, 3, pad=1, bias=False)
        self.bn2 = BatchNorm(channels)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.bn1(self.conv1(x)).gelu()
        h = self.bn2(self.conv2(h))
        return (x + h).gelu()


class Downsample(Module):
    def __init__(self, rng, c_in: int, c_out: int, stride: int, k: int | None = None):
        k = k or (stride if stride > 2 else 3)
        pad = 0 if k == stride else k // 2
        self.conv = Conv2d(rng, c_in, c_out, k, stride=stride, pad=pad, bias=False)
        self.bn = BatchNorm(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x)).gelu()


class Backbone(Module):
    """One modality stream: patch embed then four stages."""

    def __init__(self, rng, cfg: StageConfig, in_channels: int = 3):
        self.downsamples = []
        self.stages = []
        c_prev = in_channels
        for i, (c, s, kind, count) in enumerate(zip(cfg.channels, cfg.strides,
                                                    cfg.block_kinds, cfg.block_counts)):
            self.downsamples.append(Downsample(rng, c_prev, c, s))
            blocks = []
            for _ in range(count):
                if kind == "conv":
                    blocks.append(ConvBlock(rng, c))
                else:
                    blocks.append(SsmBlock(rng, c, cfg.ssm_state_dim, cfg.mlp_ratio))
            self.stages.append(blocks)
            c_prev = c

    def run_stage(self, x: Tensor, i: int) -> Tensor:
        x = self.downsamples[i](x)
        for block in self.stages[i]:
            x = block(x)
        return x


class GeoEncoder(Module):
    """Small strided conv encoder over (SAR image, keypoint mask) channels;
    emits a geometric prior map at each cross-modal injection stage."""

    def __init__(self, rng, cfg: StageConfig, in_channels: int = 2):
        if tuple(cfg.gfi_stages) != (1, 2):
            raise ValueError("geo encoder taps assume injection at stages 1 and 2")
        c0, c1, c2 = cfg.channels[0], cfg.channels[1], cfg.channels[2]
        s0, s1, s2 = cfg.strides[0], cfg.strides[1], cfg.strides[2]
        self.l0 = Downsample(rng, in_channels, c0, s0)
        self.l1 = Downsample(rng, c0, c1, s1)
        self.l2 = Downsample(rng, c1, c2, s2)

    def __call__(self, x: Tensor) -> dict[int, Tensor]:
        h0 = self.l0(x)
        h1 = self.l1(h0)
        h2 = self.l2(h1)
        return {1: h1, 2: h2}


def _tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w).transpose(0, 2, 1)


def _maps(tokens: Tensor, h: int, w: int) -> Tensor:
    n, l, c = tokens.shape
    return tokens.transpose(0, 2, 1).reshape(n, c, h, w)


class GfiBlock(Module):
    """Per-stage geometric injection + bidirectional cross-modal interaction.

    Injection: radar stream attends to the geometric prior (residual).
    Interaction: one shared cross block applied symmetrically to both
    (query, key/value) orderings, each followed by an MLP residual.
    """

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int):
        self.inject_attn = MultiHeadCrossAttention(rng, dim, heads)
        self.cross_attn = MultiHeadCrossAttention(rng, dim, heads)
        self.cross_ln = LayerNorm(dim)
        self.cross_mlp = Mlp(rng, dim, mlp_ratio, zero_out=True)

    def inject(self, x_sar: Tensor, x_geo: Tensor) -> Tensor:
        if x_sar.shape[2:] != x_geo.shape[2:]:
            raise ShapeError("gfi_inject", x_sar.shape, x_geo.shape)
        n, c, h, w = x_sar.shape
        out = _tokens(x_sar) + self.inject_attn(_tokens(x_sar), _tokens(x_geo))
        return _maps(out, h, w)

    def cross(self, x_q: Tensor, x_kv: Tensor) -> Tensor:
        if x_q.shape[1] != x_kv.shape[1]:
            raise ShapeError("gfi_cross", x_q.shape, x_kv.shape)
        n, c, h, w = x_q.shape
        q = _tokens(x_q)
        q = q + self.cross_attn(q, _tokens(x_kv))
        q = q + self.cross_mlp(self.cross_ln(q))
        return _maps(q, h, w)


class DsHead(Module):
    """1x1 conv projecting a stage feature map to single-channel mask logits."""

    def __init__(self, rng, channels: int):
        self.proj = Conv2d(rng, channels, 1, 1)

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(x)


class GeoMamba(Module):
    SUPERVISED_STAGES = (0, 3)

    def __init__(self, cfg: RunConfig, num_classes: int, rng: np.random.Generator):
        sc = cfg.stages
        self.cfg = cfg
        self.num_classes = num_classes
        self.opt_stream = Backbone(rng, sc, in_channels=3)
        self.sar_stream = Backbone(rng, sc, in_channels=3)
        self.geo_encoder = GeoEncoder(rng, sc)
        self.gfi_blocks = [GfiBlock(rng, sc.channels[i], sc.attn_heads, sc.mlp_ratio)
                           for i in sc.gfi_stages] if cfg.gfi_enabled else []
        self.ds_heads = {  # modality x supervised stage
            "opt_shallow": DsHead(rng, sc.channels[0]),
            "opt_deep": DsHead(rng, sc.channels[3]),
            "sar_shallow": DsHead(rng, sc.channels[0]),
            "sar_deep": DsHead(rng, sc.channels[3]),
        }
        self.embed_proj = Linear(rng, sc.channels[3], sc.embed_dim)
        self.neck = BatchNorm(sc.embed_dim)
        self.classifier = Linear(rng, sc.embed_dim, num_classes, bias=False)

    def _gfi_for_stage(self, stage: int) -> GfiBlock | None:
        if not self.cfg.gfi_enabled:
            return None
        for i, s in enumerate(self.cfg.stages.gfi_stages):
            if s == stage:
                return self.gfi_blocks[i]
        return None

    def ds_project(self, x: Tensor, modality: str, depth: str) -> Tensor:
        if depth not in ("shallow", "deep"):
            raise ValueError(f"depth must be shallow|deep, got {depth!r}")
        return self.ds_heads[f"{modality}_{depth}"](x)

    def embed(self, x_deep: Tensor) -> Tensor:
        """Deep feature map -> pre-neck embedding (N, embed_dim)."""
        return self.embed_proj(global_avg_pool(x_deep))

    def _check_input(self, x: Tensor):
        size = self.cfg.image_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
            raise ShapeError("backbone_forward", x.shape, (None, 3, size, size))

    def forward_train(self, x_opt: Tensor, x_sar: Tensor, sar_aux: Tensor,
                      cross_self: bool = False) -> dict:
        """Joint dual-stream pass over a label-aligned optical/SAR batch.

        Returns pre-neck embeddings, class logits, and the four mask-logit
        maps. Sample i of the optical half is paired with sample i of the SAR
        half for cross-modal interaction (the sampler aligns labels).

        With `cross_self`, the interaction blocks attend to each stream's own
        tokens instead of the partner's — the same condition inference sees,
        where no paired partner exists. Randomly mixing both pairings during
        training stops the streams from leaning on partner features that
        vanish at retrieval time.
        """
        self._check_input(x_opt)
        self._check_input(x_sar)
        if x_opt.shape[0] != x_sar.shape[0]:
            raise ShapeError("forward_train", x_opt.shape, x_sar.shape)
        geo = self.geo_encoder(sar_aux) if self.cfg.gfi_enabled else None
        masks = {}
        opt, sar = x_opt, x_sar
        for stage in range(4):
            opt = self.opt_stream.run_stage(opt, stage)
            sar = self.sar_stream.run_stage(sar, stage)
            if stage == 0:
                masks["opt_shallow"] = self.ds_project(opt, "opt", "shallow")
                masks["sar_shallow"] = self.ds_project(sar, "sar", "shallow")
            block = self._gfi_for_stage(stage)
            if block is not None:
                sar_enh = block.inject(sar, geo[stage])
                if cross_self:
                    opt, sar = block.cross(opt, opt), block.cross(sar_enh, sar_enh)
                else:
                    opt, sar = block.cross(opt, sar_enh), block.cross(sar_enh, opt)
        masks["opt_deep"] = self.ds_project(opt, "opt", "deep")
        masks["sar_deep"] = self.ds_project(sar, "sar", "deep")
        f_opt = self.embed(opt)
        f_sar = self.embed(sar)
        features = concat([f_opt, f_sar], axis=0)
        neck = self.neck(features)
        logits = self.classifier(neck)
        return {"features": features, "neck": neck, "logits": logits, "masks": masks}

    def forward_embed(self, x: Tensor, modality: str, aux: Tensor | None = None) -> Tensor:
        """Single-modality inference embedding (post-neck).

        No cross-modal partner exists at retrieval time, so the interaction
        block runs with the stream as its own key/value; SAR prior injection
        still applies when enabled.
        """
        self._check_input(x)
        if modality not in ("opt", "sar"):
            raise ValueError(f"modality must be opt|sar, got {modality!r}")
        stream = self.opt_stream if modality == "opt" else self.sar_stream
        geo = None
        if self.cfg.gfi_enabled and modality == "sar":
            if aux is None:
                raise ValueError("SAR embedding requires the aux (image, mask) input")
            geo = self.geo_encoder(aux)
        h = x
        for stage in range(4):
            h = stream.run_stage(h, stage)
            block = self._gfi_for_stage(stage)
            if block is not None:
                if modality == "sar":
                    h = block.inject(h, geo[stage])
                h = block.cross(h, h)
        return self.neck(self.embed(h))


# ---- checkpoint container ---------------------------------------------------

def save_checkpoint(path, model: GeoMamba, extra: dict | None = None):
    arrays = {f"param.{k}": v.data for k, v in model.named_parameters().items()}
    arrays.update({f"buffer.{k}": v for k, v in model.named_buffers().items()})
    meta = {"version": CHECKPOINT_VERSION, "num_classes": model.num_classes,
            "config": model.cfg.to_dict(), **(extra or {})}
    np.savez(path, __meta__=json.dumps(_jsonable(meta)), **arrays)


def load_checkpoint(path) -> tuple[GeoMamba, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        cfg = RunConfig.from_dict(meta["config"])
        model = GeoMamba(cfg, meta["num_classes"], np.random.default_rng(0))
        params = model.named_parameters()
        buffers = model.named_buffers()
        for key in data.files:
            if key.startswith("param."):
                params[key[6:]].data[...] = data[key]
            elif key.startswith("buffer."):
                buffers[key[7:]][...] = data[key]
    return model, meta


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj
