"""Patch-token ViT encoder with a cross-attention class-query decoder.

The decoder holds one query token per class. The query embeddings are a
frozen, seeded random table that plays the part of a frozen text encoder;
everything else (patch embedding, encoder blocks, decoder blocks, the shared
classification head) is trainable. The cross-attention weights of each query
over the patch grid are the per-class attention maps consumed by the losses.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .tensor import Tensor, layernorm, no_grad, softmax
from .tensor.io import load_array, save_array
from .utils import bilinear_matrix

NORMALIZATION = "softmax-over-patches"
ATTENTION_LAYER_MODES = ("last", "mean")


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    in_channels: int = 1
    embed_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 1
    heads: int = 4
    num_classes: int = 4
    mlp_ratio: float = 4.0
    attention_layer: str = "last"
    init_std: Optional[float] = None  # None: fan-in scaling 1/sqrt(fan_in)
    ln_eps: float = 1e-5
    seed: int = 0
    query_seed: int = 1234

    def validate(self) -> "ModelConfig":
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ValueError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by "
                             f"patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.encoder_layers < 0 or self.decoder_layers < 1:
            raise ValueError("need encoder_layers >= 0 and decoder_layers >= 1")
        if self.attention_layer not in ATTENTION_LAYER_MODES:
            raise ValueError(f"attention_layer must be one of {ATTENTION_LAYER_MODES}")
        if self.in_channels < 1 or self.mlp_ratio <= 0:
            raise ValueError("in_channels and mlp_ratio must be positive")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


@dataclass(frozen=True)
class ClassQueryTable:
    """Frozen per-class query embeddings (C x embed_dim)."""

    embeddings: np.ndarray
    frozen: bool = field(default=True, init=False)

    def __post_init__(self):
        emb = np.array(self.embeddings, dtype=np.float64)
        emb.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)

    @classmethod
    def random(cls, num_classes: int, dim: int, seed: int) -> "ClassQueryTable":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((num_classes, dim)))

    def tobytes(self) -> bytes:
        return self.embeddings.tobytes()

    def permuted(self, order) -> "ClassQueryTable":
        return ClassQueryTable(self.embeddings[np.asarray(order)])


@dataclass
class ModelOutput:
    logits: Tensor          # (B, C)
    attention: Tensor       # (B, C, G, G)
    normalization: str = NORMALIZATION


def images_to_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, Cin, H, W) -> (B, G*G, Cin*p*p), row-major over the patch grid."""
    b, c, h, w = images.shape
    g_h, g_w = h // patch_size, w // patch_size
    x = images.reshape(b, c, g_h, patch_size, g_w, patch_size)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, g_h * g_w, c * patch_size * patch_size)


class HEGLNet:
    """The network; parameters live in ``self.params`` as grad-tracking tensors."""

    def __init__(self, config: ModelConfig, queries: Optional[ClassQueryTable] = None):
        self.config = config.validate()
        self.queries = queries if queries is not None else ClassQueryTable.random(
            config.num_classes, config.embed_dim, config.query_seed)
        if self.queries.embeddings.shape != (config.num_classes, config.embed_dim):
            raise ValueError("query table shape does not match config")
        self.params: Dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(config.seed))

    # -- construction ------------------------------------------------------
    def _add(self, name: str, values: np.ndarray) -> None:
        self.params[name] = Tensor(values, requires_grad=True, name=name)

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        d, hdim = cfg.embed_dim, cfg.mlp_dim
        patch_in = cfg.in_channels * cfg.patch_size ** 2

        def w(*shape):
            std = cfg.init_std if cfg.init_std is not None else shape[0] ** -0.5
            return rng.standard_normal(shape) * std

        self._add("patch.w", w(patch_in, d))
        self._add("patch.b", np.zeros(d))
        self._add("pos", rng.standard_normal((cfg.num_patches, d)) * 0.02)
        for i in range(cfg.encoder_layers):
            p = f"enc{i}."
            self._add(p + "ln1.g", np.ones(d))
            self._add(p + "ln1.b", np.zeros(d))
            self._add(p + "attn.wqkv", w(d, 3 * d))
            self._add(p + "attn.wo", w(d, d))
            self._add(p + "attn.bo", np.zeros(d))
            self._add_mlp(p, w, d, hdim)
        self._add("enc.ln.g", np.ones(d))
        self._add("enc.ln.b", np.zeros(d))
        for i in range(cfg.decoder_layers):
            p = f"dec{i}."
            self._add(p + "ln1.g", np.ones(d))
            self._add(p + "ln1.b", np.zeros(d))
            self._add(p + "attn.wq", w(d, d))
            self._add(p + "attn.wk", w(d, d))
            self._add(p + "attn.wv", w(d, d))
            self._add(p + "attn.wo", w(d, d))
            self._add(p + "attn.bo", np.zeros(d))
            self._add_mlp(p, w, d, hdim)
        self._add("head.ln.g", np.ones(d))
        self._add("head.ln.b", np.zeros(d))
        self._add("head.w", w(d, 1))
        self._add("head.b", np.zeros(1))

    def _add_mlp(self, p, w, d, hdim):
        self._add(p + "ln2.g", np.ones(d))
        self._add(p + "ln2.b", np.zeros(d))
        self._add(p + "mlp.w1", w(d, hdim))
        self._add(p + "mlp.b1", np.zeros(hdim))
        self._add(p + "mlp.w2", w(hdim, d))
        self._add(p + "mlp.b2", np.zeros(d))

    @property
    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    # -- forward -------------------------------------------------------------
    def _ln(self, x, prefix):
        return layernorm(x, self.params[prefix + ".g"], self.params[prefix + ".b"],
                         eps=self.config.ln_eps)

    def _mlp(self, x, p):
        h = self._ln(x, p + "ln2") @ self.params[p + "mlp.w1"] + self.params[p + "mlp.b1"]
        return h.gelu() @ self.params[p + "mlp.w2"] + self.params[p + "mlp.b2"]

    def _split_heads(self, x, n):
        # (B, n, D) -> (B, h, n, dh)
        cfg = self.config
        return x.reshape(x.shape[0], n, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)

    def _merge_heads(self, x):
        b, h, n, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)

    def _encoder_block(self, x, p):
        cfg = self.config
        b, n, d = x.shape
        qkv = self._ln(x, p + "ln1") @ self.params[p + "attn.wqkv"]
        qkv = qkv.reshape(b, n, 3, cfg.heads, cfg.head_dim).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        weights = softmax((q @ k.transpose(0, 1, 3, 2)) * (cfg.head_dim ** -0.5))
        ctx = self._merge_heads(weights @ v)
        x = x + (ctx @ self.params[p + "attn.wo"] + self.params[p + "attn.bo"])
        return x + self._mlp(x, p)

    def _decoder_block(self, t, memory, p):
        """Returns the updated query stream and head-averaged weights (B, C, N)."""
        cfg = self.config
        c, n = t.shape[1], memory.shape[1]
        q = self._split_heads(self._ln(t, p + "ln1") @ self.params[p + "attn.wq"], c)
        k = self._split_heads(memory @ self.params[p + "attn.wk"], n)
        v = self._split_heads(memory @ self.params[p + "attn.wv"], n)
        weights = softmax((q @ k.transpose(0, 1, 3, 2)) * (cfg.head_dim ** -0.5))
        ctx = self._merge_heads(weights @ v)
        t = t + (ctx @ self.params[p + "attn.wo"] + self.params[p + "attn.bo"])
        t = t + self._mlp(t, p)
        return t, weights.mean(axis=1)

    def encode(self, images) -> Tensor:
        cfg = self.config
        x = Tensor(images_to_patches(self._check_images(images), cfg.patch_size))
        x = x @ self.params["patch.w"] + self.params["patch.b"] + self.params["pos"]
        for i in range(cfg.encoder_layers):
            x = self._encoder_block(x, f"enc{i}.")
        return self._ln(x, "enc.ln")

    def forward(self, images) -> ModelOutput:
        cfg = self.config
        memory = self.encode(images)
        b = memory.shape[0]
        t = Tensor(np.broadcast_to(self.queries.embeddings, (b, cfg.num_classes, cfg.embed_dim)))
        maps = []
        for i in range(cfg.decoder_layers):
            t, attn = self._decoder_block(t, memory, f"dec{i}.")
            maps.append(attn)
        if cfg.attention_layer == "last" or len(maps) == 1:
            attention = maps[-1]
        else:
            attention = maps[0]
            for extra in maps[1:]:
                attention = attention + extra
            attention = attention * (1.0 / len(maps))
        logits = self._ln(t, "head.ln") @ self.params["head.w"] + self.params["head.b"]
        return ModelOutput(
            logits=logits.reshape(b, cfg.num_classes),
            attention=attention.reshape(b, cfg.num_classes, cfg.grid, cfg.grid),
        )

    __call__ = forward

    def _check_images(self, images) -> np.ndarray:
        cfg = self.config
        x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
        if x.ndim == 3 and cfg.in_channels == 1:
            x = x[:, None]
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"forward: expected images of shape (B, {expected[0]}, "
                             f"{expected[1]}, {expected[2]}), got {x.shape}")
        return x

    # -- inference helpers -------------------------------------------------
    def predict_logits(self, images, batch_size: int = 256):
        """Logits and attention maps as numpy arrays, without recording a graph."""
        images = np.asarray(images, dtype=np.float64)
        logits, attention = [], []
        with no_grad():
            for start in range(0, len(images), batch_size):
                out = self.forward(images[start:start + batch_size])
                logits.append(out.logits.data)
                attention.append(out.attention.data)
        return np.concatenate(logits), np.concatenate(attention)

    def predict_proba(self, images, batch_size: int = 256) -> np.ndarray:
        logits, _ = self.predict_logits(images, batch_size)
        return 0.5 * (1.0 + np.tanh(0.5 * logits))

    # -- state ---------------------------------------------------------------
    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state mismatch for parameters: {sorted(missing)}")
        for name, t in self.params.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != t.shape:
                raise ValueError(f"{name}: shape {values.shape} != {t.shape}")
            t.data = values.copy()
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def build_model(config: ModelConfig, queries: Optional[ClassQueryTable] = None) -> HEGLNet:
    return HEGLNet(config, queries)


def upsample_attention(maps, target: int) -> np.ndarray:
    """Bilinearly resize (..., G, G) maps to (..., target, target) for export.

    For integer scale factors the result carries exactly ``(target / G)**2``
    times the input mass.
    """
    maps = np.asarray(maps, dtype=np.float64)
    g = maps.shape[-1]
    if maps.ndim < 2 or maps.shape[-2] != g:
        raise ValueError(f"upsample_attention: expected square maps, got {maps.shape}")
    if target < g:
        raise ValueError(f"upsample_attention: target {target} is smaller than grid {g}")
    m = bilinear_matrix(g, target)
    return m @ maps @ m.T


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(model: HEGLNet, path, training_state: Optional[dict] = None) -> Path:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in model.params.items():
        save_array(path / "params" / name, t.data)
        entries.append({"name": name, "shape": list(t.shape), "file": f"params/{name}.f64"})
    save_array(path / "query_table", model.queries.embeddings, {"frozen": True})
    manifest = {
        "format": "hegl-checkpoint/1",
        "config": asdict(model.config),
        "parameters": entries,
        "query_table": {"file": "query_table.f64",
                        "shape": list(model.queries.embeddings.shape)},
        "training_state": training_state or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path):
    """Returns ``(model, training_state)``."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    config = ModelConfig(**manifest["config"])
    queries = ClassQueryTable(load_array(path / "query_table"))
    model = HEGLNet(config, queries)
    state = {e["name"]: load_array(path / e["file"]) for e in manifest["parameters"]}
    model.load_state_dict(state)
    return model, manifest.get("training_state", {})
