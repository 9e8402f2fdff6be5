"""Differentiable model stack with hand-written reverse-mode gradients.

The network maps an input batch (columns are samples) through a dense
residual backbone, a two-layer projection head whose output is projected
onto the unit sphere, and a linear classifier that reads the normalized
projection. All arrays are float64 and gradients are computed by an
explicit backward pass over the activation tape recorded in ``forward``.

Parameters are organized as named blocks, one array per block, each
tagged with a role (``backbone_early``, ``backbone_last``, ``projection``,
``classifier``) so that callers can restrict optimization or gradient
computation to a subset of the network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

ROLE_BACKBONE_EARLY = "backbone_early"
ROLE_BACKBONE_LAST = "backbone_last"
ROLE_PROJECTION = "projection"
ROLE_CLASSIFIER = "classifier"
ROLES = (ROLE_BACKBONE_EARLY, ROLE_BACKBONE_LAST, ROLE_PROJECTION, ROLE_CLASSIFIER)

BACKBONE_ROLES = (ROLE_BACKBONE_EARLY, ROLE_BACKBONE_LAST)

NORM_EPS = 1e-5
UNIT_NORM_FLOOR = 1e-12

CHECKPOINT_MAGIC = b"PROTOCKP"
CHECKPOINT_VERSION = 1


class StaleTapeError(RuntimeError):
    """Raised when a tape is replayed against mutated parameters."""


class ArchitectureMismatchError(ValueError):
    """Raised when a snapshot or checkpoint does not fit the model."""


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 32
    width: int = 32
    num_blocks: int = 2
    num_groups: int = 4
    proj_hidden: int = 32
    proj_dim: int = 16
    num_classes: int = 4

    def __post_init__(self):
        if self.num_blocks < 2:
            raise ValueError("need at least two residual blocks for last-block scoping")
        if self.width % self.num_groups != 0:
            raise ValueError(
                f"width {self.width} not divisible by {self.num_groups} groups"
            )
        for name in ("input_dim", "width", "proj_hidden", "proj_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class ParamBlock:
    block_id: str
    role: str
    values: np.ndarray


@dataclass
class ProjectionBatch:
    """Unit-norm projections, one column per sample."""

    values: np.ndarray
    source: str = "s"


@dataclass
class PrototypeBank:
    """Trainable unit-norm prototype vectors, one column per prototype."""

    values: np.ndarray

    @classmethod
    def random(cls, dim: int, count: int, seed: int) -> "PrototypeBank":
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9E3779B9)))
        raw = rng.normal(size=(dim, count))
        return cls(values=raw / np.linalg.norm(raw, axis=0, keepdims=True))

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def count(self) -> int:
        return self.values.shape[1]

    def renormalize(self) -> None:
        norms = np.maximum(np.linalg.norm(self.values, axis=0, keepdims=True), UNIT_NORM_FLOOR)
        self.values /= norms

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(values=self.values.copy())


def unit_normalize(vectors: np.ndarray) -> np.ndarray:
    """Project each column onto the unit sphere (direction preserved)."""
    norms = np.maximum(np.linalg.norm(vectors, axis=0, keepdims=True), UNIT_NORM_FLOOR)
    return vectors / norms


class ModelParams:
    """Ordered parameter blocks plus a version counter for tape validation.

    Mutating block values without going through :meth:`apply_update` or
    :meth:`restore` invalidates recorded tapes silently; all code in this
    package funnels parameter writes through those methods.
    """

    def __init__(self, config: ModelConfig, blocks: dict[str, ParamBlock], rng_seed: int):
        self.config = config
        self.blocks = blocks
        self.rng_seed = rng_seed
        self.version = 0

    def __getitem__(self, block_id: str) -> np.ndarray:
        return self.blocks[block_id].values

    def block_ids(self, roles=None) -> list[str]:
        if roles is None:
            return list(self.blocks)
        wanted = {roles} if isinstance(roles, str) else set(roles)
        return [b.block_id for b in self.blocks.values() if b.role in wanted]

    def role_of(self, block_id: str) -> str:
        return self.blocks[block_id].role

    def apply_update(self, block_id: str, delta: np.ndarray) -> None:
        block = self.blocks[block_id]
        if delta.shape != block.values.shape:
            raise ValueError(f"update for {block_id} has shape {delta.shape}, expected {block.values.shape}")
        block.values += delta
        self.version += 1

    def set_block(self, block_id: str, values: np.ndarray) -> None:
        block = self.blocks[block_id]
        if values.shape != block.values.shape:
            raise ValueError(f"values for {block_id} have shape {values.shape}, expected {block.values.shape}")
        np.copyto(block.values, values)
        self.version += 1

    def snapshot(self) -> "ParamSnapshot":
        return ParamSnapshot(
            config=self.config,
            arrays={bid: blk.values.copy() for bid, blk in self.blocks.items()},
        )

    def restore(self, snap: "ParamSnapshot") -> None:
        if snap.config != self.config or set(snap.arrays) != set(self.blocks):
            raise ArchitectureMismatchError("snapshot does not match model architecture")
        for bid, values in snap.arrays.items():
            np.copyto(self.blocks[bid].values, values)
        self.version += 1

    def clone(self) -> "ModelParams":
        blocks = {
            bid: ParamBlock(bid, blk.role, blk.values.copy())
            for bid, blk in self.blocks.items()
        }
        return ModelParams(self.config, blocks, self.rng_seed)


@dataclass
class ParamSnapshot:
    config: ModelConfig
    arrays: dict[str, np.ndarray]


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Fan-in-scaled uniform weights, zero biases, identity norm affines."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED)))
    w, d = config.width, config.proj_dim
    blocks: dict[str, ParamBlock] = {}

    def add(block_id, role, values):
        blocks[block_id] = ParamBlock(block_id, role, np.asarray(values, dtype=np.float64))

    add("stem.W", ROLE_BACKBONE_EARLY, _uniform_init(rng, (w, config.input_dim), config.input_dim))
    add("stem.b", ROLE_BACKBONE_EARLY, np.zeros(w))
    for i in range(1, config.num_blocks + 1):
        role = ROLE_BACKBONE_LAST if i == config.num_blocks else ROLE_BACKBONE_EARLY
        prefix = f"res{i}"
        add(f"{prefix}.W1", role, _uniform_init(rng, (w, w), w))
        add(f"{prefix}.b1", role, np.zeros(w))
        add(f"{prefix}.gn1.gamma", role, np.ones(w))
        add(f"{prefix}.gn1.beta", role, np.zeros(w))
        add(f"{prefix}.W2", role, _uniform_init(rng, (w, w), w))
        add(f"{prefix}.b2", role, np.zeros(w))
        add(f"{prefix}.gn2.gamma", role, np.ones(w))
        add(f"{prefix}.gn2.beta", role, np.zeros(w))
    add("proj.W1", ROLE_PROJECTION, _uniform_init(rng, (config.proj_hidden, w), w))
    add("proj.b1", ROLE_PROJECTION, np.zeros(config.proj_hidden))
    add("proj.W2", ROLE_PROJECTION, _uniform_init(rng, (d, config.proj_hidden), config.proj_hidden))
    add("proj.b2", ROLE_PROJECTION, np.zeros(d))
    add("head.W", ROLE_CLASSIFIER, _uniform_init(rng, (config.num_classes, d), d))
    add("head.b", ROLE_CLASSIFIER, np.zeros(config.num_classes))
    return ModelParams(config, blocks, rng_seed=seed)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _gn_forward(x: np.ndarray, num_groups: int, gamma: np.ndarray, beta: np.ndarray,
                eps: float = NORM_EPS):
    channels, batch = x.shape
    if channels % num_groups != 0:
        raise ValueError(f"{channels} channels not divisible into {num_groups} groups")
    grouped = x.reshape(num_groups, channels // num_groups, batch)
    mean = grouped.mean(axis=1, keepdims=True)
    var = grouped.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((grouped - mean) * inv_std).reshape(channels, batch)
    out = gamma[:, None] * xhat + beta[:, None]
    return out, (xhat, inv_std, num_groups)


def _gn_backward(cache, gamma: np.ndarray, dout: np.ndarray):
    xhat, inv_std, num_groups = cache
    channels, batch = dout.shape
    m = channels // num_groups
    dgamma = np.sum(dout * xhat, axis=1)
    dbeta = np.sum(dout, axis=1)
    dxhat = (dout * gamma[:, None]).reshape(num_groups, m, batch)
    xhat_g = xhat.reshape(num_groups, m, batch)
    sum_dxhat = dxhat.sum(axis=1, keepdims=True)
    sum_dxhat_xhat = (dxhat * xhat_g).sum(axis=1, keepdims=True)
    dx = (inv_std / m) * (m * dxhat - sum_dxhat - xhat_g * sum_dxhat_xhat)
    return dx.reshape(channels, batch), dgamma, dbeta


def group_normalize(activations: np.ndarray, num_groups: int,
                    gamma: np.ndarray | None = None,
                    beta: np.ndarray | None = None) -> np.ndarray:
    """Normalize each channel group of each column to zero mean, unit variance."""
    channels = activations.shape[0]
    if gamma is None:
        gamma = np.ones(channels)
    if beta is None:
        beta = np.zeros(channels)
    out, _ = _gn_forward(np.asarray(activations, dtype=np.float64), num_groups, gamma, beta)
    return out


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    model_version: int
    inputs: np.ndarray
    stages: dict = field(default_factory=dict)


def forward(model: ModelParams, inputs: np.ndarray, source: str = "s"):
    """Run the full stack; returns (projections, class logits, tape).

    ``inputs`` has one column per sample. The tape stores every activation
    needed by :func:`backward` and is tied to the current parameter version.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != model.config.input_dim:
        raise ValueError(f"inputs must be ({model.config.input_dim}, B), got {x.shape}")
    cfg = model.config
    tape = Tape(model_version=model.version, inputs=x)

    h = model["stem.W"] @ x + model["stem.b"][:, None]
    tape.stages["stem_out"] = h
    for i in range(1, cfg.num_blocks + 1):
        p = f"res{i}"
        u = model[f"{p}.W1"] @ h + model[f"{p}.b1"][:, None]
        g1, gn1_cache = _gn_forward(u, cfg.num_groups, model[f"{p}.gn1.gamma"], model[f"{p}.gn1.beta"])
        r1 = np.maximum(g1, 0.0)
        v = model[f"{p}.W2"] @ r1 + model[f"{p}.b2"][:, None]
        g2, gn2_cache = _gn_forward(v, cfg.num_groups, model[f"{p}.gn2.gamma"], model[f"{p}.gn2.beta"])
        pre = h + g2
        out = np.maximum(pre, 0.0)
        tape.stages[p] = {
            "h_in": h, "gn1_cache": gn1_cache, "mask1": g1 > 0.0,
            "r1": r1, "gn2_cache": gn2_cache, "mask_out": pre > 0.0,
        }
        h = out
    tape.stages["backbone_out"] = h

    p1_pre = model["proj.W1"] @ h + model["proj.b1"][:, None]
    p1 = np.maximum(p1_pre, 0.0)
    p2 = model["proj.W2"] @ p1 + model["proj.b2"][:, None]
    norms = np.maximum(np.linalg.norm(p2, axis=0, keepdims=True), UNIT_NORM_FLOOR)
    z = p2 / norms
    tape.stages["proj"] = {"mask1": p1_pre > 0.0, "p1": p1, "norms": norms, "z": z}

    logits = model["head.W"] @ z + model["head.b"][:, None]
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(logits))):
        bad = "projection" if not np.all(np.isfinite(z)) else "classifier"
        raise FloatingPointError(f"non-finite activations in {bad} stage")
    return ProjectionBatch(values=z, source=source), logits, tape


def backward(model: ModelParams, tape: Tape,
             d_projections: np.ndarray | None = None,
             d_logits: np.ndarray | None = None,
             blocks=None) -> dict[str, np.ndarray]:
    """Reverse pass over a recorded tape.

    Upstream gradients may be supplied for the normalized projections, the
    class logits, or both. Returns gradients only for the requested block
    ids (all blocks when ``blocks`` is None); unused blocks are absent.
    """
    if tape.model_version != model.version:
        raise StaleTapeError("parameters changed since this tape was recorded")
    if d_projections is None and d_logits is None:
        raise ValueError("need at least one upstream gradient")
    cfg = model.config
    grads: dict[str, np.ndarray] = {}
    proj = tape.stages["proj"]
    z = proj["z"]

    dz = np.zeros_like(z) if d_projections is None else np.array(d_projections, dtype=np.float64)
    if d_logits is not None:
        dl = np.asarray(d_logits, dtype=np.float64)
        grads["head.W"] = dl @ z.T
        grads["head.b"] = dl.sum(axis=1)
        dz = dz + model["head.W"].T @ dl

    # unit-norm backward: project onto the sphere's tangent space, scale by 1/norm
    dp2 = (dz - z * np.sum(z * dz, axis=0, keepdims=True)) / proj["norms"]
    grads["proj.W2"] = dp2 @ proj["p1"].T
    grads["proj.b2"] = dp2.sum(axis=1)
    dp1 = (model["proj.W2"].T @ dp2) * proj["mask1"]
    h_out = tape.stages["backbone_out"]
    grads["proj.W1"] = dp1 @ h_out.T
    grads["proj.b1"] = dp1.sum(axis=1)
    dh = model["proj.W1"].T @ dp1

    for i in range(cfg.num_blocks, 0, -1):
        p = f"res{i}"
        st = tape.stages[p]
        dpre = dh * st["mask_out"]
        dg2, dgamma2, dbeta2 = _gn_backward(st["gn2_cache"], model[f"{p}.gn2.gamma"], dpre)
        grads[f"{p}.gn2.gamma"] = dgamma2
        grads[f"{p}.gn2.beta"] = dbeta2
        grads[f"{p}.W2"] = dg2 @ st["r1"].T
        grads[f"{p}.b2"] = dg2.sum(axis=1)
        dr1 = (model[f"{p}.W2"].T @ dg2) * st["mask1"]
        dg1, dgamma1, dbeta1 = _gn_backward(st["gn1_cache"], model[f"{p}.gn1.gamma"], dr1)
        grads[f"{p}.gn1.gamma"] = dgamma1
        grads[f"{p}.gn1.beta"] = dbeta1
        grads[f"{p}.W1"] = dg1 @ st["h_in"].T
        grads[f"{p}.b1"] = dg1.sum(axis=1)
        dh = dpre + model[f"{p}.W1"].T @ dg1

    grads["stem.W"] = dh @ tape.inputs.T
    grads["stem.b"] = dh.sum(axis=1)

    if blocks is not None:
        wanted = set(blocks)
        unknown = wanted - set(model.blocks)
        if unknown:
            raise ValueError(f"unknown blocks requested: {sorted(unknown)}")
        grads = {bid: g for bid, g in grads.items() if bid in wanted}
    return grads


def classifier_forward(model: ModelParams, inputs: np.ndarray) -> np.ndarray:
    """Apply only the linear classification head to projection-space inputs."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[0] != model.config.proj_dim:
        raise ValueError(f"classifier expects {model.config.proj_dim}-dim inputs, got {x.shape[0]}")
    return model["head.W"] @ x + model["head.b"][:, None]


def classifier_backward(model: ModelParams, inputs: np.ndarray, d_logits: np.ndarray):
    """Gradients of the head alone: returns (d_inputs, dW, db)."""
    x = np.asarray(inputs, dtype=np.float64)
    dl = np.asarray(d_logits, dtype=np.float64)
    return model["head.W"].T @ dl, dl @ x.T, dl.sum(axis=1)


def predict(model: ModelParams, inputs: np.ndarray) -> np.ndarray:
    """Class index per column of ``inputs``."""
    _, logits, _ = forward(model, inputs)
    return np.argmax(logits, axis=0)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: ModelParams, prototypes: PrototypeBank,
                    config_hash: str = "", extra: dict | None = None) -> None:
    """Exact binary round-trip of model blocks + prototype bank."""
    header = {
        "config": asdict(model.config),
        "rng_seed": model.rng_seed,
        "config_hash": config_hash,
        "blocks": [
            {"id": blk.block_id, "role": blk.role, "shape": list(blk.values.shape)}
            for blk in model.blocks.values()
        ],
        "prototypes_shape": list(prototypes.values.shape),
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(CHECKPOINT_VERSION.to_bytes(4, "little"))
        fh.write(len(header_bytes).to_bytes(4, "little"))
        fh.write(header_bytes)
        for blk in model.blocks.values():
            fh.write(np.ascontiguousarray(blk.values, dtype=np.float64).tobytes())
        fh.write(np.ascontiguousarray(prototypes.values, dtype=np.float64).tobytes())


def load_checkpoint(path):
    """Returns (model, prototypes, header dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    version = int.from_bytes(raw[off : off + 4], "little")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 4
    header_len = int.from_bytes(raw[off : off + 4], "little")
    off += 4
    header = json.loads(raw[off : off + header_len].decode("utf-8"))
    off += header_len
    config = ModelConfig(**header["config"])
    blocks: dict[str, ParamBlock] = {}
    for spec in header["blocks"]:
        shape = tuple(spec["shape"])
        nbytes = int(np.prod(shape)) * 8
        if off + nbytes > len(raw):
            raise ValueError(f"{path}: truncated at byte {off} while reading block {spec['id']}")
        values = np.frombuffer(raw[off : off + nbytes], dtype=np.float64).reshape(shape).copy()
        blocks[spec["id"]] = ParamBlock(spec["id"], spec["role"], values)
        off += nbytes
    proto_shape = tuple(header["prototypes_shape"])
    nbytes = int(np.prod(proto_shape)) * 8
    if off + nbytes > len(raw):
        raise ValueError(f"{path}: truncated at byte {off} while reading prototypes")
    protos = np.frombuffer(raw[off : off + nbytes], dtype=np.float64).reshape(proto_shape).copy()
    model = ModelParams(config, blocks, rng_seed=header["rng_seed"])
    return model, PrototypeBank(values=protos), header
