"""Two-headed MLP encoder with hand-written backpropagation.

Layout (``y = x @ W + b``, ReLU between layers, embeddings are linear)::

    obs -> trunk[0..S) -> trunk[S..T) -> main head -> x_g -> classifier -> logits
                       \\-> wcvl_trunk[S..T) -> wcvl head (2 layers) -> x_cv

``S`` is ``shared_depth``: the first S trunk layers are literally the same
parameters for both paths, the remaining trunk layers are duplicated.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ArchMismatch, CorruptRecord, FormatVersionMismatch, InvalidArch, ShapeMismatch
from .numerics import SeededRng

CKPT_MAGIC = b"XVCK"
CKPT_VERSION = 1

MAIN_GROUPS = ("trunk", "main", "cls")
WCVL_GROUPS = ("wcvl_trunk", "wcvl")


@dataclass(frozen=True)
class ArchConfig:
    obs_dim: int = 64
    trunk_layers: tuple = (64, 128, 128, 128, 128)
    shared_depth: int = 4
    main_head_layers: tuple = (64, 32)
    wcvl_head_layers: tuple = (64, 32)
    num_classes: int = 25
    activation: str = "relu"

    def __post_init__(self):
        for name in ("trunk_layers", "main_head_layers", "wcvl_head_layers"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))

    @property
    def emb_dim(self) -> int:
        return self.main_head_layers[-1]

    def validate(self) -> None:
        if self.activation != "relu":
            raise InvalidArch(f"unsupported activation {self.activation!r}")
        if self.obs_dim < 1 or self.num_classes < 2:
            raise InvalidArch("obs_dim must be >= 1 and num_classes >= 2")
        if not self.trunk_layers or not self.main_head_layers:
            raise InvalidArch("trunk and main head need at least one layer")
        if not 0 <= self.shared_depth <= len(self.trunk_layers):
            raise InvalidArch(f"shared_depth must be in [0, {len(self.trunk_layers)}]")
        if len(self.wcvl_head_layers) != 2:
            raise InvalidArch("the cross-view head has exactly two affine layers")
        if self.wcvl_head_layers[-1] != self.emb_dim:
            raise InvalidArch("both heads must end in the same embedding dimension")
        if min(self.trunk_layers + self.main_head_layers + self.wcvl_head_layers) < 1:
            raise InvalidArch("layer widths must be positive")

    def layer_specs(self) -> list[tuple[str, int, int]]:
        """(name, fan_in, fan_out) for every affine layer in declaration order."""
        specs = []
        prev = self.obs_dim
        for i, w in enumerate(self.trunk_layers):
            specs.append((f"trunk.{i}", prev, w))
            prev = w
        trunk_out = prev
        for i, w in enumerate(self.main_head_layers):
            specs.append((f"main.{i}", prev, w))
            prev = w
        specs.append(("cls", prev, self.num_classes))
        prev = self.trunk_layers[self.shared_depth - 1] if self.shared_depth else self.obs_dim
        for i in range(self.shared_depth, len(self.trunk_layers)):
            specs.append((f"wcvl_trunk.{i}", prev, self.trunk_layers[i]))
            prev = self.trunk_layers[i]
        assert prev == trunk_out
        for i, w in enumerate(self.wcvl_head_layers):
            specs.append((f"wcvl.{i}", prev, w))
            prev = w
        return specs

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def param_group(name: str) -> str:
    return name.split(".", 1)[0]


def init_params(arch: ArchConfig, rng: SeededRng) -> dict[str, np.ndarray]:
    """He-uniform weights, U(-sqrt(6/fan_in), sqrt(6/fan_in)); zero biases."""
    arch.validate()
    params = {}
    for name, fan_in, fan_out in arch.layer_specs():
        bound = np.sqrt(6.0 / fan_in)
        params[f"{name}.W"] = rng.uniform(fan_in * fan_out, -bound, bound).reshape(fan_in, fan_out)
        params[f"{name}.b"] = np.zeros(fan_out)
    return params


@dataclass
class Cache:
    """Intermediates of one forward pass, consumed by :func:`backward`."""

    inputs: dict = field(default_factory=dict)  # layer name -> input activation
    pre: dict = field(default_factory=dict)  # layer name -> pre-activation
    x_g: np.ndarray | None = None
    logits: np.ndarray | None = None
    x_cv: np.ndarray | None = None
    # per-depth trunk outputs of each path; trunk_main[k] is the output of layer k
    trunk_main: list = field(default_factory=list)
    trunk_wcvl: list = field(default_factory=list)


def _check_obs(arch: ArchConfig, obs) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[1] != arch.obs_dim:
        raise ShapeMismatch(f"expected (n, {arch.obs_dim}) observations, got {obs.shape}")
    return obs


def _affine(params, cache, name, x, relu):
    cache.inputs[name] = x
    z = x @ params[f"{name}.W"] + params[f"{name}.b"]
    if relu:
        cache.pre[name] = z
        return np.maximum(z, 0.0)
    return z


def forward(params, arch: ArchConfig, obs, main=True, logits=True, wcvl=True) -> Cache:
    obs = _check_obs(arch, obs)
    c = Cache()
    T = len(arch.trunk_layers)
    h = obs
    shared = obs
    for i in range(T):
        if i == arch.shared_depth and wcvl:
            shared = h
        if i >= arch.shared_depth and not main:
            break
        h = _affine(params, c, f"trunk.{i}", h, True)
        c.trunk_main.append(h)
    if arch.shared_depth == T:
        shared = h
    if main:
        for i in range(len(arch.main_head_layers)):
            last = i == len(arch.main_head_layers) - 1
            h = _affine(params, c, f"main.{i}", h, not last)
        c.x_g = h
        if logits:
            c.logits = _affine(params, c, "cls", h, False)
    if wcvl:
        c.trunk_wcvl = list(c.trunk_main[: arch.shared_depth])
        h = shared
        for i in range(arch.shared_depth, T):
            h = _affine(params, c, f"wcvl_trunk.{i}", h, True)
            c.trunk_wcvl.append(h)
        h = _affine(params, c, "wcvl.0", h, True)
        c.x_cv = _affine(params, c, "wcvl.1", h, False)
    return c


def forward_main(params, arch: ArchConfig, obs, with_logits: bool = False):
    c = forward(params, arch, obs, main=True, logits=with_logits, wcvl=False)
    return c.x_g, c.logits


def forward_wcvl(params, arch: ArchConfig, obs) -> np.ndarray:
    return forward(params, arch, obs, main=False, logits=False, wcvl=True).x_cv


def _back_affine(params, cache, grads, name, dout, relu):
    if relu:
        dout = dout * (cache.pre[name] > 0)
    x = cache.inputs[name]
    grads[f"{name}.W"] = grads.get(f"{name}.W", 0.0) + x.T @ dout
    grads[f"{name}.b"] = grads.get(f"{name}.b", 0.0) + dout.sum(axis=0)
    return dout @ params[f"{name}.W"].T


def backward(params, arch: ArchConfig, cache: Cache, d_xg=None, d_logits=None, d_xcv=None,
             frozen=()) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a loss given its gradients w.r.t. the outputs.

    Parameters whose group is listed in ``frozen`` receive zero gradient and
    backpropagation stops at them; the rest of the tree is always returned
    with every parameter present.
    """
    grads: dict = {}
    T = len(arch.trunk_layers)
    S = arch.shared_depth
    d_trunk = None  # gradient arriving at the trunk output (layer T-1)
    d_shared = None  # gradient at the shared boundary coming from the wcvl path

    if d_logits is not None or d_xg is not None:
        if cache.x_g is None:
            raise ShapeMismatch("main path was not evaluated in this forward pass")
        d = np.zeros_like(cache.x_g) if d_xg is None else np.asarray(d_xg, dtype=np.float64)
        if d.shape != cache.x_g.shape:
            raise ShapeMismatch(f"d_xg shape {d.shape} != {cache.x_g.shape}")
        if d_logits is not None:
            if cache.logits is None or d_logits.shape != cache.logits.shape:
                raise ShapeMismatch("logit gradient does not match forward pass")
            d = d + _back_affine(params, cache, grads, "cls", d_logits, False)
        n_head = len(arch.main_head_layers)
        for i in reversed(range(n_head)):
            d = _back_affine(params, cache, grads, f"main.{i}", d, i != n_head - 1)
        d_trunk = d

    if d_xcv is not None and "wcvl" not in frozen:
        if cache.x_cv is None or d_xcv.shape != cache.x_cv.shape:
            raise ShapeMismatch("cross-view gradient does not match forward pass")
        d = _back_affine(params, cache, grads, "wcvl.1", d_xcv, False)
        d = _back_affine(params, cache, grads, "wcvl.0", d, True)
        for i in reversed(range(S, T)):
            d = _back_affine(params, cache, grads, f"wcvl_trunk.{i}", d, True)
        d_shared = d

    if (d_trunk is not None or d_shared is not None) and "trunk" not in frozen:
        d = d_trunk
        for i in reversed(range(T)):
            if i == S - 1 and d_shared is not None:
                d = d_shared if d is None else d + d_shared
            if d is None:
                continue
            d = _back_affine(params, cache, grads, f"trunk.{i}", d, True)

    out = {}
    for name, value in params.items():
        if param_group(name) in frozen or name not in grads:
            out[name] = np.zeros_like(value)
        else:
            out[name] = np.asarray(grads[name], dtype=np.float64).reshape(value.shape)
    return out



def with_shared_depth(params: dict, arch: ArchConfig, shared_depth: int, rng: SeededRng):
    """Re-plumb the cross-view path to branch after ``shared_depth`` trunk layers.

    Main-path parameters are kept as they are; every cross-view parameter is
    freshly initialized for the new layout. Returns ``(arch', params')``.
    """
    new_arch = replace(arch, shared_depth=shared_depth)
    fresh = init_params(new_arch, rng)
    out = {}
    for key, value in fresh.items():
        out[key] = params[key] if param_group(key) in MAIN_GROUPS else value
    return new_arch, out

# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    arch: ArchConfig
    params: dict
    stage: str = "init"  # init | main | wcvl
    epoch: int = 0
    seed: int = 0
    loss_history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)  # mode, beta, mse_variant ...

    def to_bytes(self) -> bytes:
        return checkpoint_bytes(self)


def _pack_str(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<I", len(b)) + b


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    parts.append(_pack_str(json.dumps(ck.arch.to_dict(), sort_keys=True)))
    parts.append(_pack_str(ck.stage))
    parts.append(struct.pack("<QQ", ck.epoch, ck.seed & ((1 << 64) - 1)))
    parts.append(_pack_str(json.dumps(ck.extra, sort_keys=True)))
    hist = np.asarray(ck.loss_history, dtype="<f8")
    parts.append(struct.pack("<Q", len(hist)) + hist.tobytes())
    for name, _, _ in ck.arch.layer_specs():
        for key in (f"{name}.W", f"{name}.b"):
            t = np.ascontiguousarray(ck.params[key], dtype="<f8")
            parts.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
            parts.append(t.tobytes())
    return b"".join(parts)


def save_checkpoint(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptRecord(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode()


def load_checkpoint(path, expected: ArchConfig | None = None) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != CKPT_MAGIC:
        raise CorruptRecord(f"{path}: not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise FormatVersionMismatch(f"{path}: version {version}, expected {CKPT_VERSION}")
    arch = ArchConfig(**json.loads(r.string()))
    stage = r.string()
    epoch, seed = r.unpack("<QQ")
    extra = json.loads(r.string())
    (n_hist,) = r.unpack("<Q")
    hist = np.frombuffer(r.take(8 * n_hist), dtype="<f8").tolist()
    params = {}
    for name, fan_in, fan_out in arch.layer_specs():
        for key, shape in ((f"{name}.W", (fan_in, fan_out)), (f"{name}.b", (fan_out,))):
            (ndim,) = r.unpack("<I")
            got = r.unpack(f"<{ndim}I")
            if tuple(got) != shape:
                raise CorruptRecord(f"{path}: tensor {key} has shape {got}, expected {shape}")
            params[key] = np.frombuffer(r.take(8 * int(np.prod(shape))), dtype="<f8").reshape(shape).copy()
    if r.pos != len(r.blob):
        raise CorruptRecord(f"{path}: trailing bytes after parameters")
    if expected is not None:
        check_arch(arch, expected)
    return Checkpoint(arch, params, stage, epoch, seed, hist, extra)


def check_arch(found: ArchConfig, expected: ArchConfig) -> None:
    if found != expected:
        diffs = [
            k for k in expected.to_dict() if getattr(found, k) != getattr(expected, k)
        ]
        raise ArchMismatch(f"architecture mismatch in field(s): {', '.join(diffs)}")
