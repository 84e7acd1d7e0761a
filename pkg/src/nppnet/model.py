"""Two-branch Snake MLP with hand-written reverse-mode gradients and Adam.

Branch A is a deep Snake MLP fed with the original coordinate features and the
features warped by the best periodicity; its raw input is concatenated back in
after ``skip_after`` layers.  Branch B takes branch A's output together with
the features warped by the remaining candidate periodicities, re-injects
branch A's output after its second layer and produces the RGB value.  When a
model has no branch-B input, branch B is bypassed and a linear head on top of
branch A produces the output instead.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

MAGIC = b"NPPNETCK"
CHECKPOINT_VERSION = 1


def snake(x, a: float = 1.0):
    """Snake activation ``x + sin^2(a x) / a``."""
    s = np.sin(a * x)
    return x + s * s / a


def snake_grad(x, a: float = 1.0):
    return 1.0 + np.sin(2.0 * a * x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class ModelLayout:
    dim_a: int
    dim_b: int = 0
    width_a: int = 512
    depth_a: int = 9
    skip_after: int = 5
    widths_b: tuple = (512, 512, 256)
    skip_b_after: int = 2
    snake_a: float = 1.0
    out_dim: int = 3

    @classmethod
    def scaled(cls, dim_a: int, dim_b: int, width: int, **kw) -> "ModelLayout":
        """Layout whose branch-B widths follow the default 1:1:1/2 proportions of ``width``."""
        return cls(dim_a=dim_a, dim_b=dim_b, width_a=width,
                   widths_b=(width, width, max(width // 2, 1)), **kw)

    @property
    def uses_branch_b(self) -> bool:
        return self.dim_b > 0

    def shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        fan_in = self.dim_a
        for i in range(self.depth_a):
            if i == self.skip_after:
                fan_in += self.dim_a
            shapes[f"a{i}.w"] = (fan_in, self.width_a)
            shapes[f"a{i}.b"] = (self.width_a,)
            fan_in = self.width_a
        if self.uses_branch_b:
            fan_in = self.width_a + self.dim_b
            for i, width in enumerate(tuple(self.widths_b) + (self.out_dim,)):
                if i == self.skip_b_after:
                    fan_in += self.width_a
                shapes[f"b{i}.w"] = (fan_in, width)
                shapes[f"b{i}.b"] = (width,)
                fan_in = width
        else:
            shapes["head.w"] = (self.width_a, self.out_dim)
            shapes["head.b"] = (self.out_dim,)
        return shapes


class Tape:
    """Activations cached by one forward pass; consumed by a single backward pass."""

    def __init__(self):
        self.records: list = []
        self.output = None
        self.consumed = False


@dataclass
class NppModel:
    layout: ModelLayout
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, layout: ModelLayout, rng: np.random.Generator, dtype=np.float32) -> "NppModel":
        params = {}
        for name, shape in layout.shapes().items():
            if name.endswith(".w"):
                bound = np.sqrt(6.0 / (shape[0] + shape[1]))
                params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
            else:
                params[name] = np.zeros(shape, dtype=dtype)
        return cls(layout, params)

    @classmethod
    def zeros(cls, layout: ModelLayout, dtype=np.float32) -> "NppModel":
        return cls(layout, {k: np.zeros(s, dtype=dtype) for k, s in layout.shapes().items()})

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "NppModel":
        return NppModel(self.layout, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "NppModel":
        return NppModel(self.layout, {k: v.copy() for k, v in self.params.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- forward / backward -------------------------------------------------

    def forward(self, xa: np.ndarray, xb: np.ndarray | None = None, tape: Tape | None = None) -> np.ndarray:
        """RGB predictions in [0, 1] for a batch of encoded inputs."""
        lay = self.layout
        p = self.params
        dt = self.dtype
        xa = np.asarray(xa, dtype=dt)
        if xa.ndim != 2 or xa.shape[1] != lay.dim_a:
            raise ValueError(f"branch-A input must be (n, {lay.dim_a}), got {xa.shape}")
        if lay.uses_branch_b:
            if xb is None or xb.shape != (xa.shape[0], lay.dim_b):
                raise ValueError(f"branch-B input must be (n, {lay.dim_b})")
            xb = np.asarray(xb, dtype=dt)
        elif xb is not None and xb.size and xb.shape[1] != 0:
            raise ValueError("model has no branch B but received branch-B features")
        recs = tape.records if tape is not None else None
        a = lay.snake_a
        h = xa
        for i in range(lay.depth_a):
            inp = np.concatenate([h, xa], axis=1) if i == lay.skip_after else h
            z = inp @ p[f"a{i}.w"] + p[f"a{i}.b"]
            h = snake(z, a)
            if recs is not None:
                recs.append((inp, z))
        ha = h
        if lay.uses_branch_b:
            g = np.concatenate([ha, xb], axis=1)
            n_b = len(lay.widths_b) + 1
            for i in range(n_b):
                inp = np.concatenate([g, ha], axis=1) if i == lay.skip_b_after else g
                z = inp @ p[f"b{i}.w"] + p[f"b{i}.b"]
                g = snake(z, a) if i < n_b - 1 else z
                if recs is not None:
                    recs.append((inp, z))
            logits = g
        else:
            logits = ha @ p["head.w"] + p["head.b"]
            if recs is not None:
                recs.append((ha, logits))
        out = sigmoid(logits)
        if tape is not None:
            tape.output = out
        return out

    def backward(self, tape: Tape, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients of a scalar loss given dLoss/dOutput for the taped batch."""
        if tape.consumed or tape.output is None:
            raise RuntimeError("tape is stale: run a fresh forward pass with a new Tape")
        tape.consumed = True
        lay = self.layout
        p = self.params
        a = lay.snake_a
        grads = {}
        y = tape.output
        g = np.asarray(grad_out, dtype=y.dtype) * y * (1.0 - y)
        recs = tape.records
        k = len(recs) - 1
        if lay.uses_branch_b:
            n_b = len(lay.widths_b) + 1
            g_ha = np.zeros((y.shape[0], lay.width_a), dtype=y.dtype)
            for i in reversed(range(n_b)):
                inp, z = recs[k]
                k -= 1
                if i < n_b - 1:
                    g = g * snake_grad(z, a)
                grads[f"b{i}.w"] = inp.T @ g
                grads[f"b{i}.b"] = g.sum(axis=0)
                g_in = g @ p[f"b{i}.w"].T
                if i == lay.skip_b_after:
                    g_ha += g_in[:, -lay.width_a:]
                    g_in = g_in[:, :-lay.width_a]
                g = g_in
            g_ha += g[:, : lay.width_a]
            g = g_ha
        else:
            inp, _ = recs[k]
            k -= 1
            grads["head.w"] = inp.T @ g
            grads["head.b"] = g.sum(axis=0)
            g = g @ p["head.w"].T
        for i in reversed(range(lay.depth_a)):
            inp, z = recs[k]
            k -= 1
            g = g * snake_grad(z, a)
            grads[f"a{i}.w"] = inp.T @ g
            grads[f"a{i}.b"] = g.sum(axis=0)
            if i == 0:
                break
            g_in = g @ p[f"a{i}.w"].T
            if i == lay.skip_after:
                g_in = g_in[:, : lay.width_a]
            g = g_in
        # parameters that never received a gradient (none in practice) stay at zero
        for k, v in p.items():
            if k not in grads:
                grads[k] = np.zeros_like(v)
        return grads

    # -- checkpoints --------------------------------------------------------

    def to_bytes(self) -> bytes:
        names = list(self.params)
        header = {
            "version": CHECKPOINT_VERSION,
            "layout": {**asdict(self.layout), "widths_b": list(self.layout.widths_b)},
            "dtype": np.dtype(self.dtype).name,
            "params": [[n, list(self.params[n].shape)] for n in names],
        }
        blob = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
        for n in names:
            buf.write(self.params[n].astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "NppModel":
        if data[: len(MAGIC)] != MAGIC:
            raise ValueError("not an NPP model checkpoint")
        off = len(MAGIC)
        (size,) = struct.unpack_from("<I", data, off)
        off += 4
        header = json.loads(data[off : off + size])
        off += size
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        lay = header["layout"]
        lay["widths_b"] = tuple(lay["widths_b"])
        layout = ModelLayout(**lay)
        params = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
            off += 8 * count
            params[name] = arr.astype(header["dtype"])
        if off != len(data):
            raise ValueError("trailing bytes in checkpoint")
        return cls(layout, params)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "NppModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


class Adam:
    """Adam with a step-decay learning-rate schedule (halved every ``decay_every`` epochs)."""

    def __init__(self, lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 decay_every: int = 500, decay: float = 0.5):
        self.lr0 = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay_every = decay_every
        self.decay = decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def lr_at(self, epoch: int) -> float:
        if not self.decay_every:
            return self.lr0
        return self.lr0 * self.decay ** (epoch // self.decay_every)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        """Update ``params`` in place; returns the learning rate that was used."""
        lr = self.lr_at(self.t)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = v / bc2
            np.sqrt(denom, out=denom)
            denom += self.eps
            np.divide(m, denom, out=denom)
            denom *= lr / bc1
            params[k] -= denom
        return lr
