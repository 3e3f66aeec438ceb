"""Shared-weight CNN feature extractor, token projection, and transformer head.

One parameter store serves every view and every view combination; weight
sharing is structural, not copied. The pipeline per view is

    image (C x H x W) -> conv stack -> feature map (Cf x h x w)
                      -> flatten spatial, project, add positional rows
                      -> tokens (S x d), S = h * w

and a fused token sequence of any length L is classified by prepending a
learnable class token, running the transformer blocks, and reading the
class-token row through an affine head. Because the readout is the class
token and every view gets the same positional rows, the logits are
invariant to permuting the non-class tokens (and hence to view order).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensorkit as tk
from .seeding import substream
from .tensorkit import Tensor

CHECKPOINT_MAGIC = b"MVWM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    """Toy-scale hybrid architecture; sizes chosen for fast CPU training."""

    in_channels: int = 1
    image_size: int = 16
    conv_channels: tuple[int, ...] = (8, 16)
    kernel_size: int = 3
    stride: int = 2
    dim: int = 32
    depth: int = 2
    heads: int = 2
    ffn: int = 64
    num_classes: int = 8

    def feature_hw(self) -> int:
        hw = self.image_size
        for _ in self.conv_channels:
            if self.kernel_size > hw:
                raise ValueError(
                    f"conv stack does not fit: {self.kernel_size}x{self.kernel_size} "
                    f"kernel on a {hw}x{hw} map"
                )
            hw = (hw - self.kernel_size) // self.stride + 1
        return hw

    @property
    def tokens_per_view(self) -> int:
        return self.feature_hw() ** 2


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class Encoder:
    """The single parameter store plus forward operations.

    ``counters`` tracks CNN and transformer forward calls so tests can
    assert the once-per-view / once-per-subset execution discipline.
    """

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        self.counters = {"cnn": 0, "transformer": 0}
        self.params: dict[str, Tensor] = {}
        self._init_params(substream(seed, "init"))

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        return t

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        ks = cfg.kernel_size
        prev = cfg.in_channels
        for i, ch in enumerate(cfg.conv_channels):
            fan_in = prev * ks * ks
            fan_out = ch * ks * ks
            self._param(f"conv{i}.kernel", _glorot(rng, fan_in, fan_out, (ch, prev, ks, ks)))
            self._param(f"conv{i}.bias", np.zeros(ch))
            prev = ch

        d = cfg.dim
        s = cfg.tokens_per_view
        self._param("projection", _glorot(rng, prev, d, (prev, d)))
        self._param("positional", rng.normal(0.0, 0.02, size=(s, d)))
        self._param("class_token", rng.normal(0.0, 0.02, size=(1, d)))

        for b in range(cfg.depth):
            p = f"block{b}."
            self._param(p + "ln1.gain", np.ones(d))
            self._param(p + "ln1.bias", np.zeros(d))
            for name in ("wq", "wk", "wv", "wo"):
                self._param(p + "attn." + name, _glorot(rng, d, d, (d, d)))
            self._param(p + "attn.bo", np.zeros(d))
            self._param(p + "ln2.gain", np.ones(d))
            self._param(p + "ln2.bias", np.zeros(d))
            self._param(p + "ffn.w1", _glorot(rng, d, cfg.ffn, (d, cfg.ffn)))
            self._param(p + "ffn.b1", np.zeros(cfg.ffn))
            self._param(p + "ffn.w2", _glorot(rng, cfg.ffn, d, (cfg.ffn, d)))
            self._param(p + "ffn.b2", np.zeros(d))

        self._param("ln_final.gain", np.ones(d))
        self._param("ln_final.bias", np.zeros(d))
        self._param("head.weight", _glorot(rng, d, cfg.num_classes, (d, cfg.num_classes)))
        self._param("head.bias", np.zeros(cfg.num_classes))

    # -- forward operations -------------------------------------------------

    def extract_features(self, image) -> Tensor:
        """Run the shared conv stack on one view image (C x H x W)."""
        x = image if isinstance(image, Tensor) else Tensor(image)
        cfg = self.config
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.shape != expected:
            raise ValueError(f"view image shape {x.shape} does not match configured {expected}")
        self.counters["cnn"] += 1
        for i in range(len(cfg.conv_channels)):
            x = tk.conv2d(x, self.params[f"conv{i}.kernel"], cfg.stride)
            x = tk.bias_add_channels(x, self.params[f"conv{i}.bias"])
            x = tk.relu(x)
        return x

    def tokenize(self, fmap: Tensor) -> Tensor:
        """Project a feature map to S x d tokens and add the positional rows."""
        cf = self.params["projection"].shape[0]
        if fmap.ndim != 3 or fmap.shape[0] != cf:
            raise ValueError(
                f"feature map shape {fmap.shape} does not match projection input {cf}"
            )
        c, h, w = fmap.shape
        flat = tk.transpose(tk.reshape(fmap, (c, h * w)))          # S x Cf
        return tk.matmul(flat, self.params["projection"]) + self.params["positional"]

    def transform_predict(self, fused_tokens: Tensor) -> Tensor:
        """Classify a fused token sequence (L x d); returns K logits."""
        cfg = self.config
        if fused_tokens.ndim != 2 or fused_tokens.shape[1] != cfg.dim:
            raise ValueError(
                f"token sequence shape {fused_tokens.shape} does not match dim {cfg.dim}"
            )
        self.counters["transformer"] += 1
        x = tk.concat([self.params["class_token"], fused_tokens], axis=0)
        for b in range(cfg.depth):
            p = f"block{b}."
            normed = tk.layer_norm(x, self.params[p + "ln1.gain"], self.params[p + "ln1.bias"])
            x = x + tk.self_attention(
                normed,
                self.params[p + "attn.wq"],
                self.params[p + "attn.wk"],
                self.params[p + "attn.wv"],
                self.params[p + "attn.wo"],
                self.params[p + "attn.bo"],
                cfg.heads,
            )
            normed = tk.layer_norm(x, self.params[p + "ln2.gain"], self.params[p + "ln2.bias"])
            hidden = tk.relu(tk.linear(normed, self.params[p + "ffn.w1"], self.params[p + "ffn.b1"]))
            x = x + tk.linear(hidden, self.params[p + "ffn.w2"], self.params[p + "ffn.b2"])
        x = tk.layer_norm(x, self.params["ln_final.gain"], self.params["ln_final.bias"])
        cls = tk.slice_rows(x, 0, 1)
        logits = tk.linear(cls, self.params["head.weight"], self.params["head.bias"])
        return tk.reshape(logits, (cfg.num_classes,))

    def encode_view(self, image) -> Tensor:
        """Convenience: image -> tokens."""
        return self.tokenize(self.extract_features(image))

    # -- bookkeeping ---------------------------------------------------------

    def reset_counters(self) -> None:
        self.counters = {"cnn": 0, "transformer": 0}

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- checkpoint IO --------------------------------------------------------

    _META_FIELDS = (
        "in_channels", "image_size", "kernel_size", "stride",
        "dim", "depth", "heads", "ffn", "num_classes",
    )

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "Encoder":
        return load_checkpoint(path)


def _write_block(buf, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<I", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_block(buf) -> tuple[str, np.ndarray] | None:
    raw = buf.read(4)
    if not raw:
        return None
    (name_len,) = struct.unpack("<I", raw)
    name = buf.read(name_len).decode("utf-8")
    (ndim,) = struct.unpack("<I", buf.read(4))
    shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim)) if ndim else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(buf.read(8 * count), dtype="<f8").reshape(shape)
    return name, data.astype(np.float64)


def save_checkpoint(encoder: Encoder, path) -> None:
    """Write the MVWM flat binary: magic, version, named parameter blocks.

    The architecture hyperparameters travel as a ``meta`` block so a
    checkpoint is self-describing.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = encoder.config
    meta = [float(getattr(cfg, f)) for f in Encoder._META_FIELDS]
    meta.extend(float(c) for c in cfg.conv_channels)
    _write_block(buf, "meta", np.asarray(meta))
    for name in sorted(encoder.params):
        _write_block(buf, name, encoder.params[name].data)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Encoder:
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    blocks: dict[str, np.ndarray] = {}
    while True:
        block = _read_block(buf)
        if block is None:
            break
        blocks[block[0]] = block[1]
    if "meta" not in blocks:
        raise ValueError(f"{path}: checkpoint missing meta block")
    meta = blocks.pop("meta")
    n_fixed = len(Encoder._META_FIELDS)
    kwargs = {f: int(meta[i]) for i, f in enumerate(Encoder._META_FIELDS)}
    kwargs["conv_channels"] = tuple(int(c) for c in meta[n_fixed:])
    cfg = EncoderConfig(**kwargs)
    enc = Encoder(cfg, seed=0)
    missing = set(enc.params) - set(blocks)
    extra = set(blocks) - set(enc.params)
    if missing or extra:
        raise ValueError(f"{path}: parameter blocks do not match architecture "
                         f"(missing {sorted(missing)}, extra {sorted(extra)})")
    for name, arr in blocks.items():
        if enc.params[name].shape != arr.shape:
            raise ValueError(f"{path}: block {name} has shape {arr.shape}, "
                             f"expected {enc.params[name].shape}")
        enc.params[name] = Tensor(arr, requires_grad=True)
    return enc
