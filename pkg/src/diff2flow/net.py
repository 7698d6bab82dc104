"""Small fully-connected predictor with analytic gradients and LoRA adapters.

Everything is plain numpy. ``forward`` returns the output and a cache;
``backward`` consumes that cache and returns exact parameter gradients.
"""

from __future__ import annotations

import copy
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from diff2flow.convert import Parameterization

CHECKPOINT_MAGIC = b"D2F1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TimeEmbedding:
    dim: int = 64
    max_period: float = 10000.0

    def __post_init__(self) -> None:
        if self.dim <= 0 or self.dim % 2:
            raise ValueError("embedding dim must be a positive even integer")

    def frequencies(self) -> np.ndarray:
        half = self.dim // 2
        return np.exp(-math.log(self.max_period) * np.arange(half, dtype=np.float64) / half)

    def __call__(self, t) -> np.ndarray:
        return embed_time(t, self)


def embed_time(t, e: TimeEmbedding = TimeEmbedding()) -> np.ndarray:
    """Sinusoidal features ``[sin(w t), cos(w t)]`` for scalar or 1-D ``t``.

    Defined for any real ``t``; fractional diffusion times are fine.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    args = t_arr[..., None] * e.frequencies()
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def silu(z: np.ndarray) -> np.ndarray:
    return z * sigmoid(z)


def silu_grad(z: np.ndarray, sig: np.ndarray | None = None) -> np.ndarray:
    sig = sigmoid(z) if sig is None else sig
    return sig * (1.0 + z * (1.0 - sig))


@dataclass
class Dense:
    """``h = W x + b`` with ``W`` of shape ``(d_out, k_in)``; optional ``B @ A`` update."""

    W: np.ndarray
    b: np.ndarray
    A: np.ndarray | None = None
    B: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape

    @property
    def rank(self) -> int | None:
        return None if self.A is None else self.A.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        out = x @ self.W.T + self.b
        if self.A is not None:
            out = out + (x @ self.A.T) @ self.B.T
        return out


@dataclass
class ForwardCache:
    version: int
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    gates: list = field(default_factory=list)


class ToyModel:
    """MLP over ``concat(x, embed(t))`` predicting one of the parameterizations.

    Hidden layers use SiLU; the head is linear. Attaching LoRA freezes the
    base weights so only adapter matrices receive gradients.
    """

    def __init__(
        self,
        data_dim: int = 2,
        hidden: tuple[int, ...] = (128, 128, 128, 128),
        param: Parameterization | str = Parameterization.V,
        embedding: TimeEmbedding = TimeEmbedding(),
        rng: np.random.Generator | None = None,
    ):
        self.data_dim = data_dim
        self.hidden = tuple(hidden)
        self.param = Parameterization(param)
        # time multiplier applied to FM time when a velocity head is queried
        self.time_scale = 1.0
        self.embedding = embedding
        self.layers: list[Dense] = []
        self.n_forward = 0
        self._version = 0
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = [data_dim + embedding.dim, *self.hidden, data_dim]
        for k, d in zip(widths[:-1], widths[1:]):
            W = rng.standard_normal((d, k)) * math.sqrt(1.0 / k)
            self.layers.append(Dense(W, np.zeros(d)))

    # -- parameters ---------------------------------------------------------

    @property
    def lora_attached(self) -> bool:
        return any(layer.A is not None for layer in self.layers)

    def parameters(self) -> dict[str, np.ndarray]:
        """All arrays in checkpoint order, keyed by name."""
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"layers.{i}.W"] = layer.W
            out[f"layers.{i}.b"] = layer.b
            if layer.A is not None:
                out[f"layers.{i}.A"] = layer.A
                out[f"layers.{i}.B"] = layer.B
        return out

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        params = self.parameters()
        if not self.lora_attached:
            return params
        return {k: v for k, v in params.items() if k.endswith((".A", ".B"))}

    def n_parameters(self, trainable_only: bool = False) -> int:
        params = self.trainable_parameters() if trainable_only else self.parameters()
        return sum(v.size for v in params.values())

    def mark_updated(self) -> None:
        """Invalidate outstanding forward caches after an in-place update."""
        self._version += 1

    def clone(self) -> "ToyModel":
        twin = copy.deepcopy(self)
        twin.n_forward = 0
        return twin

    # -- compute ------------------------------------------------------------

    def _inputs(self, x: np.ndarray, t) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.data_dim:
            raise ValueError(f"expected data dim {self.data_dim}, got {x.shape[-1]}")
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        return np.concatenate([x, embed_time(t_arr, self.embedding)], axis=1)

    def forward(self, x, t, keep_cache: bool = False):
        """Network output for a batch ``x`` at times ``t`` (scalar or per row).

        With ``keep_cache=True`` returns ``(output, cache)`` for ``backward``.
        """
        self.n_forward += 1
        h = self._inputs(x, t)
        cache = ForwardCache(self._version) if keep_cache else None
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            z = layer.apply(h)
            if cache is not None:
                cache.inputs.append(h)
                cache.pre.append(z)
            if i == last:
                h = z
            else:
                gate = sigmoid(z)
                if cache is not None:
                    cache.gates.append(gate)
                h = z * gate
        if np.ndim(x) == 1:
            h = h[0]
        return (h, cache) if keep_cache else h

    __call__ = forward

    def backward(self, grad_out: np.ndarray, cache: ForwardCache) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given ``dloss/doutput``.

        Only trainable parameters appear in the result; under LoRA the
        frozen base weights are absent.
        """
        if cache is None or cache.version != self._version:
            raise RuntimeError("stale or missing forward cache")
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        frozen = self.lora_attached
        grads: dict[str, np.ndarray] = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i != len(self.layers) - 1:
                g = g * silu_grad(cache.pre[i], cache.gates[i])
            h = cache.inputs[i]
            if layer.A is not None:
                ha = h @ layer.A.T
                grads[f"layers.{i}.B"] = g.T @ ha
                grads[f"layers.{i}.A"] = (g @ layer.B).T @ h
            if not frozen:
                grads[f"layers.{i}.W"] = g.T @ h
                grads[f"layers.{i}.b"] = g.sum(axis=0)
            if i > 0:
                g_in = g @ layer.W
                if layer.A is not None:
                    g_in = g_in + (g @ layer.B) @ layer.A
                g = g_in
        return grads

    # -- LoRA ---------------------------------------------------------------

    def attach_lora(
        self,
        rank: int | None = None,
        fraction: float | None = None,
        which=None,
        rng: np.random.Generator | None = None,
    ) -> "ToyModel":
        """Add ``B @ A`` adapters and freeze the base weights (in place).

        Pass either a fixed ``rank`` or a ``fraction`` giving
        ``ceil(fraction * min(d, k))`` per layer. ``which`` selects layer
        indices (default: all).
        """
        if (rank is None) == (fraction is None):
            raise ValueError("give exactly one of rank or fraction")
        if self.lora_attached:
            raise RuntimeError("LoRA already attached")
        rng = rng if rng is not None else np.random.default_rng(0)
        indices = range(len(self.layers)) if which is None else list(which)
        for i in indices:
            layer = self.layers[i]
            d, k = layer.shape
            r = rank if rank is not None else max(1, math.ceil(fraction * min(d, k)))
            if not 1 <= r <= min(d, k):
                raise ValueError(f"rank {r} invalid for layer {i} of shape {d}x{k}")
            layer.A = rng.standard_normal((r, k)) / r
            layer.B = np.zeros((d, r))
        self.mark_updated()
        return self

    def merge_lora(self) -> "ToyModel":
        """Fold ``B @ A`` into ``W`` and drop the adapters (in place)."""
        if not self.lora_attached:
            raise RuntimeError("no LoRA adapters to merge")
        for layer in self.layers:
            if layer.A is not None:
                layer.W = layer.W + layer.B @ layer.A
                layer.A = None
                layer.B = None
        self.mark_updated()
        return self

    # -- persistence --------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "param": self.param.value,
            "time_scale": self.time_scale,
            "data_dim": self.data_dim,
            "hidden": list(self.hidden),
            "embedding": {"dim": self.embedding.dim, "max_period": self.embedding.max_period},
            "activation": "silu",
            "layers": [{"shape": list(layer.shape), "lora_rank": layer.rank} for layer in self.layers],
            "arrays": [{"name": k, "shape": list(v.shape)} for k, v in self.parameters().items()],
        }

    def to_bytes(self) -> bytes:
        manifest = json.dumps(self.manifest(), sort_keys=True).encode("utf-8")
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(bytes([CHECKPOINT_VERSION]))
        buf.write(struct.pack("<I", len(manifest)))
        buf.write(manifest)
        for arr in self.parameters().values():
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ToyModel":
        if data[:4] != CHECKPOINT_MAGIC:
            raise ValueError("not a D2F1 checkpoint")
        if data[4] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data[4]}")
        (n,) = struct.unpack_from("<I", data, 5)
        manifest = json.loads(data[9 : 9 + n].decode("utf-8"))
        emb = manifest["embedding"]
        model = cls(
            data_dim=manifest["data_dim"],
            hidden=tuple(manifest["hidden"]),
            param=manifest["param"],
            embedding=TimeEmbedding(emb["dim"], emb["max_period"]),
        )
        model.time_scale = float(manifest.get("time_scale", 1.0))
        offset = 9 + n
        arrays = {}
        for spec in manifest["arrays"]:
            count = int(np.prod(spec["shape"]))
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(spec["shape"])
            arrays[spec["name"]] = arr.astype(np.float64)
            offset += 8 * count
        if offset != len(data):
            raise ValueError("trailing bytes in checkpoint")
        for i, layer in enumerate(model.layers):
            layer.W = arrays[f"layers.{i}.W"]
            layer.b = arrays[f"layers.{i}.b"]
            if f"layers.{i}.A" in arrays:
                layer.A = arrays[f"layers.{i}.A"]
                layer.B = arrays[f"layers.{i}.B"]
        return model

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ToyModel":
        return cls.from_bytes(Path(path).read_bytes())
