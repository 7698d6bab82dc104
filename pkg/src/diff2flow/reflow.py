"""1-rectification on fixed (noise, generated sample) couplings."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from diff2flow.net import ToyModel
from diff2flow.sample import euler_integrate
from diff2flow.schedule import NoiseSchedule
from diff2flow.train import MetricTrace, TrainConfig, run_training

PAIR_MAGIC = b"D2FP"
DEFAULT_GEN_STEPS = 64
DEFAULT_LORA_RANK = 16


@dataclass
class PairSet:
    """Couplings ``x0[i] -> x1[i]``; ``x1`` came from ``gen_steps`` Euler steps."""

    x0: np.ndarray
    x1: np.ndarray
    gen_steps: int
    seed: int

    def __len__(self) -> int:
        return self.x0.shape[0]

    @property
    def dim(self) -> int:
        return self.x0.shape[1]

    def to_bytes(self) -> bytes:
        body = np.empty((len(self), 2 * self.dim), dtype="<f8")
        body[:, : self.dim] = self.x0
        body[:, self.dim :] = self.x1
        return PAIR_MAGIC + struct.pack("<QI", len(self), self.dim) + body.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, gen_steps: int = 0, seed: int = 0) -> "PairSet":
        if data[:4] != PAIR_MAGIC:
            raise ValueError("not a D2FP pair file")
        count, dim = struct.unpack_from("<QI", data, 4)
        body = np.frombuffer(data, dtype="<f8", offset=16).astype(np.float64)
        if body.size != count * 2 * dim:
            raise ValueError("pair file length does not match header")
        body = body.reshape(count, 2 * dim)
        return cls(body[:, :dim].copy(), body[:, dim:].copy(), gen_steps, seed)

    def save(self, path) -> None:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        Path(str(path) + ".json").write_text(json.dumps({"gen_steps": self.gen_steps, "seed": self.seed}))

    @classmethod
    def load(cls, path) -> "PairSet":
        path = Path(path)
        meta_path = Path(str(path) + ".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls.from_bytes(path.read_bytes(), meta.get("gen_steps", 0), meta.get("seed", 0))


def generate_pairs(m: ToyModel, s: NoiseSchedule, n_pairs: int, N: int = DEFAULT_GEN_STEPS, seed: int = 0,
                   chunk: int = 8192) -> PairSet:
    """Draw noise and integrate it with the Euler sampler to build couplings.

    Chunking does not change the result: every row is integrated independently.
    """
    x0 = np.random.default_rng(np.random.SeedSequence([seed, 31])).standard_normal((n_pairs, m.data_dim))
    x1 = np.empty_like(x0)
    for lo in range(0, n_pairs, chunk):
        x1[lo : lo + chunk] = euler_integrate(m, s, x0[lo : lo + chunk], N)[0]
    return PairSet(x0, x1, N, seed)


def rectify(m: ToyModel, pairs: PairSet, cfg: TrainConfig, iterations: int = 1) -> tuple[ToyModel, MetricTrace]:
    """Retrain ``m`` with the Diff2Flow objective on the stored couplings.

    Only the first rectification uses ``pairs``; further iterations
    regenerate couplings from the current model with the same settings.
    """
    if len(pairs) == 0:
        raise ValueError("rectification needs a non-empty pair set")
    if cfg.regime != "diff2flow":
        cfg = cfg.replace(regime="diff2flow")
    trace = MetricTrace()
    for it in range(iterations):
        if it > 0:
            pairs = generate_pairs(m, cfg.schedule(), len(pairs), pairs.gen_steps, pairs.seed + it)
        m, trace = run_training(cfg, None, init=m, pairs=(pairs.x0, pairs.x1))
        if m.lora_attached:
            m.merge_lora()
    return m, trace
