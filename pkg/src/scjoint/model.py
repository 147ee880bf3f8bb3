"""A small ViT encoder-decoder for binary segmentation with per-task DLMs.

The network is shared across tasks except for the distribution learning
modules (DLMs): one ``(mu, sigma)`` pair per task per DLM site.  A DLM site
sits on the output of a transformer block (after the MLP residual add), and
maps ``X -> (X - mu) / sqrt(sigma**2 + eps)`` channel-wise.  Which task's
pair is used is chosen per forward call, so one trained network has one
inference "mode" per registered task.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

__all__ = [
    "PLACEMENTS",
    "NORM_MODES",
    "ModelConfig",
    "RegistryError",
    "DlmParams",
    "JointModel",
    "patchify",
    "unpatchify",
    "dlm_forward",
    "parameter_partition",
]

PLACEMENTS = ("decoder_all", "decoder_last_k", "encoder_all", "encoder_and_decoder", "none")
NORM_MODES = ("dlm", "layer_norm")
DLM_EPS = 1e-6
LOGIT_BOUND = 30.0


class RegistryError(KeyError):
    """A task id is not registered with the model."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    in_channels: int = 1
    embed_dim: int = 128
    encoder_depth: int = 4
    decoder_depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    dlm_placement: str = "decoder_all"
    dlm_last_k: int = 1
    norm_mode: str = "dlm"
    tasks: list = field(default_factory=lambda: ["salient", "camouflaged"])

    def __post_init__(self):
        self.tasks = list(self.tasks)
        self.validate()

    def validate(self) -> None:
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ValueError(
                f"patch_size {self.patch_size} must divide image_size {self.image_size}"
            )
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.dlm_placement not in PLACEMENTS:
            raise ValueError(f"dlm_placement must be one of {PLACEMENTS}, got {self.dlm_placement!r}")
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")
        if self.dlm_placement == "decoder_last_k" and not 1 <= self.dlm_last_k <= self.decoder_depth:
            raise ValueError(
                f"dlm_last_k={self.dlm_last_k} must lie in [1, decoder_depth={self.decoder_depth}]"
            )
        if not self.tasks:
            raise ValueError("at least one task id is required")
        if len(set(self.tasks)) != len(self.tasks):
            raise ValueError(f"task ids must be unique: {self.tasks}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid**2

    def dlm_sites(self) -> list[tuple[str, int]]:
        """DLM site list as ``(stage, block_index)`` in forward order."""
        enc = [("encoder", i) for i in range(self.encoder_depth)]
        dec = [("decoder", i) for i in range(self.decoder_depth)]
        p = self.dlm_placement
        if p == "decoder_all":
            return dec
        if p == "decoder_last_k":
            return dec[self.decoder_depth - self.dlm_last_k :]
        if p == "encoder_all":
            return enc
        if p == "encoder_and_decoder":
            return enc + dec
        return []

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


# ------------------------------------------------------------- layout helpers


def _split_image_batch(x: np.ndarray, cfg: ModelConfig) -> tuple[np.ndarray, bool]:
    """Normalize image input to ``[B, H, W, C]``; report whether it was batched."""
    s, c = cfg.image_size, cfg.in_channels
    if x.ndim == 2:
        x, batched = x[None, :, :, None], False
    elif x.ndim == 3 and x.shape[:2] == (s, s) and x.shape[2] == c and x.shape[1:] != (s, s):
        x, batched = x[None], False
    elif x.ndim == 3:
        x, batched = x[..., None], True
    elif x.ndim == 4:
        batched = True
    else:
        raise DimensionError(f"expected an image or image batch, got shape {x.shape}")
    if x.shape[1:] != (s, s, c):
        raise DimensionError(
            f"expected images of shape {(s, s, c)} (image_size={s}), got {x.shape[1:]}"
        )
    return x, batched


def patchify(images, patch_size: int):
    """Split ``[..., H, W, C]`` into row-major ``[..., tokens, P*P*C]`` patches.

    A 2-d ``[H, W]`` input is treated as single-channel.  Works on numpy
    arrays and on :class:`Tensor` (differentiably).
    """
    is_t = isinstance(images, Tensor)
    x = images if is_t else np.asarray(images, dtype=np.float64)
    shape = x.shape
    if len(shape) == 2:
        x = x.reshape(shape + (1,))
        shape = x.shape
    *lead, h, w, c = shape
    p = patch_size
    if h != w or h % p:
        raise DimensionError(f"patchify needs a square image divisible by {p}, got {h}x{w}")
    g = h // p
    nl = len(lead)
    x = x.reshape(tuple(lead) + (g, p, g, p, c))
    perm = tuple(range(nl)) + tuple(nl + i for i in (0, 2, 1, 3, 4))
    x = x.transpose(perm)
    return x.reshape(tuple(lead) + (g * g, p * p * c))


def unpatchify(tokens, patch_size: int, channels: int = 1, squeeze: bool = True):
    """Inverse of :func:`patchify`.  ``squeeze`` drops a single channel axis."""
    is_t = isinstance(tokens, Tensor)
    x = tokens if is_t else np.asarray(tokens, dtype=np.float64)
    *lead, n, dim = x.shape
    p, c = patch_size, channels
    g = int(round(n**0.5))
    if g * g != n or dim != p * p * c:
        raise DimensionError(f"cannot unpatchify tokens of shape {x.shape} with P={p}, C={c}")
    nl = len(lead)
    x = x.reshape(tuple(lead) + (g, g, p, p, c))
    perm = tuple(range(nl)) + tuple(nl + i for i in (0, 2, 1, 3, 4))
    x = x.transpose(perm)
    if squeeze and c == 1:
        return x.reshape(tuple(lead) + (g * p, g * p))
    return x.reshape(tuple(lead) + (g * p, g * p, c))


# ------------------------------------------------------------------- layers


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator):
        self.weight = Tensor(_trunc_normal(rng, (din, dout)), requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = x.reshape(-1, x.shape[-1])
        out = flat @ self.weight + self.bias
        return out.reshape(lead + (self.weight.shape[1],))


class LayerNorm(Module):
    def __init__(self, d: int):
        self.weight = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias)


class Attention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.proj = Linear(d, d, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        out = T.softmax_attention(self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x)))
        return self.proj(out.transpose(0, 2, 1, 3).reshape(b, n, d))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, d: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        hidden = int(round(d * mlp_ratio))
        self.norm1 = LayerNorm(d)
        self.attn = Attention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(T.gelu(self.fc1(self.norm2(x))))


class DlmParams(Module):
    """Learnable per-task mean and scale vectors for one DLM site."""

    def __init__(self, d: int, eps: float = DLM_EPS):
        self.mu = Tensor(np.zeros(d), requires_grad=True)
        self.sigma = Tensor(np.ones(d), requires_grad=True)
        self.eps = eps


def dlm_forward(x: Tensor, p: DlmParams) -> Tensor:
    """``(x - mu) / sqrt(sigma**2 + eps)``, broadcast over all leading axes."""
    x = T.as_tensor(x)
    d = p.mu.shape[0]
    if x.shape[-1] != d:
        raise DimensionError(f"DLM expects last dim {d}, got input of shape {x.shape}")
    return (x - p.mu) / T.sqrt(p.sigma * p.sigma + p.eps)


# -------------------------------------------------------------------- model


class JointModel(Module):
    """Shared encoder-decoder plus a task-keyed DLM registry."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        c = config
        d = c.embed_dim
        pdim = c.patch_size**2 * c.in_channels
        self.patch_embed = Linear(pdim, d, rng)
        self.pos_embed = Tensor(rng.normal(0.0, 0.02, size=(c.num_tokens, d)), requires_grad=True)
        self.encoder = [Block(d, c.heads, c.mlp_ratio, rng) for _ in range(c.encoder_depth)]
        self.encoder_norm = LayerNorm(d)
        self.decoder = [Block(d, c.heads, c.mlp_ratio, rng) for _ in range(c.decoder_depth)]
        self.decoder_norm = LayerNorm(d)
        self.head = Linear(d, c.patch_size**2, rng)
        self.sites = c.dlm_sites()
        self.site_norms = (
            [LayerNorm(d) for _ in self.sites] if c.norm_mode == "layer_norm" else []
        )
        n_sites = len(self.sites) if c.norm_mode == "dlm" else 0
        self.dlm_registry: dict[str, list[DlmParams]] = {
            t: [DlmParams(d) for _ in range(n_sites)] for t in c.tasks
        }

    @property
    def tasks(self) -> list[str]:
        return list(self.config.tasks)

    # parameters -------------------------------------------------------------

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.shared_named_parameters()
        for task in self.config.tasks:
            for i, p in enumerate(self.dlm_registry[task]):
                yield f"dlm.{task}.{i}.mu", p.mu
                yield f"dlm.{task}.{i}.sigma", p.sigma

    def shared_named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.patch_embed.named_parameters("patch_embed.")
        yield "pos_embed", self.pos_embed
        for i, blk in enumerate(self.encoder):
            yield from blk.named_parameters(f"encoder.{i}.")
        yield from self.encoder_norm.named_parameters("encoder_norm.")
        for i, blk in enumerate(self.decoder):
            yield from blk.named_parameters(f"decoder.{i}.")
        yield from self.decoder_norm.named_parameters("decoder_norm.")
        yield from self.head.named_parameters("head.")
        for i, ln in enumerate(self.site_norms):
            yield from ln.named_parameters(f"site_norm.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    # forward ----------------------------------------------------------------

    def _site_map(self, task: str):
        if task not in self.dlm_registry:
            raise RegistryError(
                f"unknown task id {task!r}; registered tasks: {self.config.tasks}"
            )
        if self.config.norm_mode == "layer_norm":
            fns = self.site_norms
        else:
            fns = [(lambda x, p=p: dlm_forward(x, p)) for p in self.dlm_registry[task]]
        return dict(zip(self.sites, fns))

    def forward_logits(self, images, task: str) -> Tensor:
        """Per-pixel logits ``[B, H, W]`` for a ``[B, H, W(, C)]`` batch."""
        sites = self._site_map(task)
        x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        x, _ = _split_image_batch(x, self.config)
        tokens = T.as_tensor(patchify(x, self.config.patch_size))
        h = self.patch_embed(tokens) + self.pos_embed
        for i, blk in enumerate(self.encoder):
            h = blk(h)
            if ("encoder", i) in sites:
                h = sites[("encoder", i)](h)
        h = self.encoder_norm(h)
        for i, blk in enumerate(self.decoder):
            h = blk(h)
            if ("decoder", i) in sites:
                h = sites[("decoder", i)](h)
        out = self.head(self.decoder_norm(h))
        return unpatchify(out, self.config.patch_size, 1)

    def forward(self, images, task: str) -> Tensor:
        """Foreground probabilities strictly inside (0, 1).

        Accepts ``[H, W]``, ``[H, W, C]``, ``[B, H, W]`` or ``[B, H, W, C]`` and
        returns ``[H, W]`` or ``[B, H, W]`` accordingly.
        """
        x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        _, batched = _split_image_batch(x, self.config)
        logits = self.forward_logits(x, task)
        # the loss clamps p at 1e-7 (|logit| ~ 16), so this bound never changes a gradient
        p = T.sigmoid(T.clamp(logits, -LOGIT_BOUND, LOGIT_BOUND))
        return p if batched else p.reshape(p.shape[1:])

    __call__ = forward

    def predict(self, images, task: str) -> np.ndarray:
        with T.no_grad():
            return self.forward(images, task).data


def parameter_partition(model: JointModel) -> tuple[list[Tensor], dict[str, list[Tensor]]]:
    """Split trainables into shared ``theta`` and per-task DLM lists."""
    theta = [p for _, p in model.shared_named_parameters()]
    per_task = {
        t: [v for p in model.dlm_registry[t] for v in (p.mu, p.sigma)] for t in model.config.tasks
    }
    return theta, per_task
