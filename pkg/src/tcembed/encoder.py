"""Toy transformer student encoder.

Forward order: token embedding -> (optional) compression module -> pre-norm
attention blocks -> final RMS norm -> mean pooling -> linear projection ->
L2 normalisation.  Compression runs per sequence on its unpadded length, and
the pooled sequences are then right-padded so that one batched attention
pass with a key mask covers the whole batch.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .compression import (
    CompressionPolicy,
    SwiGLUParams,
    pooling_matrix,
    resolve_ratio,
    swiglu_transform,
    target_length,
)
from .tensor import (
    Tensor,
    concat,
    getitem,
    l2_normalize,
    matmul,
    no_grad,
    softmax_rows,
    take_rows,
)

CHECKPOINT_FORMAT = "tcembed-checkpoint"
CHECKPOINT_VERSION = 1

_MASK_VALUE = -1e30
_RMS_EPS = 1e-6


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 256
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    mlp_hidden: int = 64
    output_dim: int = 64
    max_seq_len: int = 2048
    compressor_hidden: int | None = None  # defaults to 2 * d_model
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("rotary position encoding needs an even head dimension")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "mlp_hidden", "output_dim", "max_seq_len"):
            if getattr(self, name) < 1 and not (name == "n_layers" and getattr(self, name) == 0):
                raise ValueError(f"{name} must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def swiglu_hidden(self) -> int:
        return self.compressor_hidden or 2 * self.d_model


@dataclass
class TokenSequence:
    ids: list[int]

    @property
    def length(self) -> int:
        return len(self.ids)

    def validate(self, config: EncoderConfig) -> None:
        if not 1 <= self.length <= config.max_seq_len:
            raise ValueError(f"sequence length {self.length} outside [1, {config.max_seq_len}]")
        if any(i < 0 or i >= config.vocab_size for i in self.ids):
            raise ValueError(f"token id outside [0, {config.vocab_size})")


def toy_tokenize(text: str, vocab_size: int = 256,
                 mode: Literal["whitespace", "byte"] = "whitespace",
                 max_len: int | None = None) -> TokenSequence:
    """Deterministic stand-in tokenizer.

    ``whitespace`` maps each whitespace-separated word to ``crc32(word) % vocab_size``;
    ``byte`` maps each UTF-8 byte to ``byte % vocab_size``.
    """
    if not text or not text.strip():
        raise ValueError("cannot tokenize empty text")
    if mode == "whitespace":
        ids = [zlib.crc32(w.encode("utf-8")) % vocab_size for w in text.split()]
    elif mode == "byte":
        ids = [b % vocab_size for b in text.encode("utf-8")]
    else:
        raise ValueError(f"unknown tokenizer mode {mode!r}")
    if max_len is not None:
        ids = ids[:max_len]
    return TokenSequence(ids)


def mean_pool(h: Tensor, valid_len: int) -> Tensor:
    """Mean of the first ``valid_len`` rows of ``h`` (``[L, d]``); later rows are padding."""
    if not 1 <= valid_len <= h.shape[0]:
        raise ValueError(f"valid_len must satisfy 1 <= {valid_len} <= {h.shape[0]}")
    w = np.zeros((1, h.shape[0]), dtype=h.dtype)
    w[0, :valid_len] = 1.0 / valid_len
    return matmul(Tensor(w), h).reshape(h.shape[1])


def _batched_mean_pool(h: Tensor, lengths: Sequence[int]) -> Tensor:
    B, L, d = h.shape
    w = np.zeros((B, 1, L), dtype=h.dtype)
    for b, n in enumerate(lengths):
        w[b, 0, :n] = 1.0 / n
    return matmul(Tensor(w), h).reshape(B, d)


def _rms_norm(x: Tensor, gain: Tensor) -> Tensor:
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x * (ms + _RMS_EPS) ** -0.5 * gain


def _rotate_half_matrix(dim: int, dtype) -> np.ndarray:
    half = dim // 2
    r = np.zeros((dim, dim), dtype=dtype)
    for j in range(half):
        r[j + half, j] = -1.0
        r[j, j + half] = 1.0
    return r


def _rope_tables(length: int, dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.arange(length, dtype=np.float64)[:, None] * inv_freq[None, :]
    angles = np.concatenate([angles, angles], axis=1)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


@dataclass
class EncoderModel:
    """Parameter container plus the forward pass."""

    config: EncoderConfig
    params: dict[str, Tensor]
    stage: int = 0  # last completed training stage
    dtype: type = np.float64
    _rot: np.ndarray = field(default=None, repr=False)

    @classmethod
    def init(cls, config: EncoderConfig, seed: int = 0, with_compressor: bool = False,
             dtype=np.float64) -> "EncoderModel":
        rng = np.random.default_rng(seed)
        d = config.d_model

        def uniform(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

        params: dict[str, Tensor] = {
            "embed": Tensor(rng.normal(0.0, 1.0, size=(config.vocab_size, d)).astype(dtype), requires_grad=True),
        }
        for i in range(config.n_layers):
            p = f"layers.{i}."
            params[p + "attn_norm"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
            for name in ("wq", "wk", "wv", "wo"):
                params[p + name] = uniform(d, (d, d))
            params[p + "mlp_norm"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
            params[p + "mlp_gate"] = uniform(d, (d, config.mlp_hidden))
            params[p + "mlp_up"] = uniform(d, (d, config.mlp_hidden))
            params[p + "mlp_down"] = uniform(config.mlp_hidden, (config.mlp_hidden, d))
        params["final_norm"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        params["proj"] = uniform(d, (d, config.output_dim))
        model = cls(config, params, dtype=dtype)
        if with_compressor:
            model.add_compressor(seed=seed + 1)
        return model

    # -- parameters ------------------------------------------------------------
    @property
    def has_compressor(self) -> bool:
        return "compressor.gate" in self.params

    def add_compressor(self, seed: int) -> None:
        """Insert a freshly initialised SwiGLU compression transform.

        Weights are random; the output projection is then rescaled so that the
        transformed embedding table has the same RMS as the table itself, which
        keeps the residual stream of the already-trained blocks at its usual scale.
        """
        sw = SwiGLUParams.init(self.config.d_model, self.config.swiglu_hidden,
                               np.random.default_rng(seed), dtype=self.dtype)
        table = self.params["embed"].data
        with no_grad():
            out = swiglu_transform(Tensor(table), sw).data
        out_rms = float(np.sqrt(np.mean(out ** 2)))
        if out_rms > 0:
            sw.down.data *= float(np.sqrt(np.mean(table ** 2))) / out_rms
        for name, t in sw.parameters().items():
            self.params[f"compressor.{name}"] = t

    @property
    def compressor(self) -> SwiGLUParams | None:
        if not self.has_compressor:
            return None
        p = self.params
        return SwiGLUParams(p["compressor.gate"], p["compressor.up"], p["compressor.down"])

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(k, self.params[k]) for k in sorted(self.params)]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def astype(self, dtype) -> "EncoderModel":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return EncoderModel(self.config, params, stage=self.stage, dtype=dtype)

    # -- forward ---------------------------------------------------------------
    def compressed_lengths(self, lengths: Sequence[int], policy: CompressionPolicy | None,
                           ratio: float | None) -> list[int]:
        if policy is None or not self.has_compressor:
            return list(lengths)
        out = []
        for n in lengths:
            tgt = target_length(n, policy, ratio)
            out.append(n if tgt is None else tgt)
        return out

    def _attention(self, x: Tensor, layer: int, mask: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> Tensor:
        cfg = self.config
        p = self.params
        pre = f"layers.{layer}."
        B, L, d = x.shape
        H, dh = cfg.n_heads, cfg.head_dim

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

        q = heads(matmul(x, p[pre + "wq"]))
        k = heads(matmul(x, p[pre + "wk"]))
        v = heads(matmul(x, p[pre + "wv"]))
        rot = Tensor(self._rotation())
        cos_t, sin_t = Tensor(cos), Tensor(sin)
        q = (q * cos_t + matmul(q, rot) * sin_t) * (1.0 / np.sqrt(dh))
        k = k * cos_t + matmul(k, rot) * sin_t
        attn = softmax_rows(matmul(q, k.transpose(0, 1, 3, 2)), axis=-1, mask=mask)
        out = matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, L, d)
        return matmul(out, p[pre + "wo"])

    def _rotation(self) -> np.ndarray:
        if self._rot is None or self._rot.dtype != self.dtype:
            self._rot = _rotate_half_matrix(self.config.head_dim, self.dtype)
        return self._rot

    def _blocks(self, x: Tensor, lengths: Sequence[int]) -> Tensor:
        cfg = self.config
        p = self.params
        B, L, _ = x.shape
        mask = np.zeros((B, 1, 1, L), dtype=self.dtype)
        for b, n in enumerate(lengths):
            mask[b, 0, 0, n:] = _MASK_VALUE
        cos, sin = _rope_tables(L, cfg.head_dim, cfg.rope_base, self.dtype)
        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            x = x + self._attention(_rms_norm(x, p[pre + "attn_norm"]), i, mask, cos, sin)
            h = _rms_norm(x, p[pre + "mlp_norm"])
            ffn = SwiGLUParams(p[pre + "mlp_gate"], p[pre + "mlp_up"], p[pre + "mlp_down"])
            x = x + swiglu_transform(h, ffn)
        return _rms_norm(x, p["final_norm"])

    def forward_ids(self, batch: Sequence[Sequence[int]], policy: CompressionPolicy | None = None,
                    ratio: float | None = None) -> Tensor:
        """Encode one sub-batch of id lists with an already-resolved ratio."""
        lengths = [len(ids) for ids in batch]
        if min(lengths) < 1:
            raise ValueError("empty token sequence")
        if max(lengths) > self.config.max_seq_len:
            raise ValueError(f"sequence longer than max_seq_len={self.config.max_seq_len}")
        B, L_in = len(batch), max(lengths)
        ids = np.zeros((B, L_in), dtype=np.int64)
        for b, seq in enumerate(batch):
            ids[b, : len(seq)] = seq
        x = take_rows(self.params["embed"], ids)

        out_lengths = lengths
        if self.has_compressor:
            x = swiglu_transform(x, self.compressor)
            if policy is not None:
                out_lengths = self.compressed_lengths(lengths, policy, ratio)
                if out_lengths != lengths:
                    L_out = max(out_lengths)
                    pool = np.zeros((B, L_out, L_in), dtype=self.dtype)
                    for b, (n_in, n_out) in enumerate(zip(lengths, out_lengths)):
                        pool[b, :n_out, :n_in] = pooling_matrix(n_in, n_out, dtype=self.dtype)
                    x = matmul(Tensor(pool), x)

        h = self._blocks(x, out_lengths)
        pooled = _batched_mean_pool(h, out_lengths)
        return l2_normalize(matmul(pooled, self.params["proj"]))

    def encode(self, batch: Sequence[TokenSequence | Sequence[int]], policy: CompressionPolicy | None = None,
               rng: np.random.Generator | None = None, ratio: float | None = None,
               max_attention_elems: int | None = None, max_padding: float = 0.3) -> Tensor:
        """Embed a batch; returns ``[N, output_dim]`` unit rows.

        One ratio is resolved for the whole batch (drawn from ``rng`` in dynamic
        mode).  Sequences are grouped by length into sub-batches so that padding
        adds at most ``max_padding`` extra attention cost per group and, when
        ``max_attention_elems`` is set, no group's score tensor exceeds that many
        entries.  Sequences never interact, so grouping does not change the
        result; rows come back in input order.
        """
        ids = [list(s.ids) if isinstance(s, TokenSequence) else list(s) for s in batch]
        if not ids:
            raise ValueError("empty batch")
        if ratio is None and policy is not None and self.has_compressor:
            ratio = resolve_ratio(policy, rng)
        out_lengths = self.compressed_lengths([len(s) for s in ids], policy, ratio)
        order = sorted(range(len(ids)), key=lambda i: len(ids[i]))
        groups: list[list[int]] = []
        cost = 0
        for i in order:
            n = out_lengths[i]
            if groups:
                grp = groups[-1]
                padded = (len(grp) + 1) * n * n
                fits_budget = max_attention_elems is None or padded * self.config.n_heads <= max_attention_elems
                if fits_budget and padded <= (1.0 + max_padding) * (cost + n * n):
                    grp.append(i)
                    cost += n * n
                    continue
            groups.append([i])
            cost = n * n
        if len(groups) == 1:
            return self.forward_ids(ids, policy, ratio)
        parts = [self.forward_ids([ids[i] for i in grp], policy, ratio) for grp in groups]
        flat = [i for grp in groups for i in grp]
        return getitem(concat(parts, axis=0), np.argsort(flat))

    def embed_numpy(self, batch, policy: CompressionPolicy | None = None, ratio: float | None = None,
                    rng: np.random.Generator | None = None, batch_size: int = 64) -> np.ndarray:
        """Inference helper: encode without recording a graph, in batches."""
        rows = []
        with no_grad():
            for i in range(0, len(batch), batch_size):
                rows.append(self.encode(batch[i:i + batch_size], policy, rng=rng, ratio=ratio,
                                        max_attention_elems=1 << 24).data)
        return np.concatenate(rows, axis=0)

    # -- checkpoints -------------------------------------------------------------
    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "EncoderModel":
        return load_checkpoint(path)


def attention_flops(seq_len: int, config: EncoderConfig) -> int:
    """Multiply-adds in the score and value products of all attention layers."""
    return 2 * config.n_layers * seq_len * seq_len * config.d_model


def save_checkpoint(model: EncoderModel, path) -> None:
    """Write a JSON-lines checkpoint.

    Line 1 is a header ``{"format", "version", "stage", "config"}``; each
    following line is ``{"name", "shape", "values"}`` with values flattened
    in C order.  Parameters are written sorted by name; floats use Python's
    shortest round-trip repr, so reloads are bit-exact.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "stage": model.stage,
        "config": asdict(model.config),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for name, t in model.named_parameters():
        lines.append(json.dumps({
            "name": name,
            "shape": list(t.shape),
            "values": [float(v) for v in t.data.astype(np.float64).ravel()],
        }))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> EncoderModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with path.open(encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        params = {}
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            rec = json.loads(line)
            values = np.asarray(rec["values"], dtype=np.float64)
            if values.size != int(np.prod(rec["shape"])):
                raise ValueError(f"{path}:{lineno}: {rec['name']} has {values.size} values for shape {rec['shape']}")
            params[rec["name"]] = Tensor(values.reshape(rec["shape"]), requires_grad=True)
    return EncoderModel(EncoderConfig(**header["config"]), params, stage=int(header["stage"]))
