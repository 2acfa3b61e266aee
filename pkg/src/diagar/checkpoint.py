"""Checkpoint file format and model (de)serialization.

Layout (little-endian), documented byte-exactly:

    offset      size        field
    0           4           magic b"DGCK"
    4           4           format version, uint32 (currently 1)
    8           8           header length ``n``, uint64
    16          n           header, UTF-8 JSON (sorted keys, no spaces)
    16+n        ...         tensor payload: raw float32 little-endian
                            values, concatenated in header manifest order
    ...         4           crc32 of all preceding bytes, uint32

The JSON header carries: kind ("raster"/"dual"), the model and branch
configs, training step, RNG state, an optimizer-state summary, and the
tensor manifest (name, shape, element offset) sorted by name.  Optimizer
moments ride in the same payload under "opt.m.<param>" / "opt.v.<param>"
names.  Everything is deterministic, so save -> load -> save reproduces
the file byte for byte.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .adapter import BranchConfig, DualHeadModel
from .model import Backbone, ModelConfig

MAGIC = b"DGCK"
VERSION = 1


@dataclass
class Checkpoint:
    """In-memory checkpoint: everything needed to restart a run."""

    kind: str  # "raster" | "dual"
    model_config: ModelConfig
    branch_config: BranchConfig | None
    params: dict[str, np.ndarray]
    step: int = 0
    rng_state: dict | None = None
    opt_state: dict | None = None  # name -> {"m": array, "v": array, "t": int}
    opt_hyper: dict | None = None

    def fingerprints(self) -> dict[str, str]:
        return {n: _crc_hex(a) for n, a in self.params.items()}


def _crc_hex(arr: np.ndarray) -> str:
    return format(zlib.crc32(np.ascontiguousarray(arr).tobytes()), "08x")


def param_fingerprint(named) -> dict[str, str]:
    """crc32 per named parameter (Tensors or arrays); cheap equality
    evidence for freeze contracts."""
    out = {}
    for name, p in named:
        arr = p.data if hasattr(p, "data") else np.asarray(p)
        out[name] = _crc_hex(arr)
    return out


def checkpoint_from_model(
    model, step: int = 0, rng_state: dict | None = None, optimizer=None
) -> Checkpoint:
    """Snapshot a Backbone or DualHeadModel (copies all arrays)."""
    if isinstance(model, DualHeadModel):
        kind = "dual"
        branch = model.branch
        named = model.named_parameters()
        config = model.config
    elif isinstance(model, Backbone):
        kind = "raster"
        branch = None
        named = model.named_parameters()
        config = model.config
    else:
        raise TypeError(f"cannot checkpoint a {type(model).__name__}")
    params = {}
    for name, p in named:
        if p.data.dtype != np.float32:
            raise ValueError(
                f"checkpoints store float32 only; {name} is {p.data.dtype}"
            )
        params[name] = p.data.copy()
    opt_state = None
    opt_hyper = None
    if optimizer is not None:
        opt_state = {
            n: {"m": s["m"].copy(), "v": s["v"].copy(), "t": s["t"]}
            for n, s in optimizer.state.items()
        }
        opt_hyper = {
            "betas": list(optimizer.betas),
            "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay,
        }
    return Checkpoint(
        kind=kind,
        model_config=config,
        branch_config=branch,
        params=params,
        step=step,
        rng_state=rng_state,
        opt_state=opt_state,
        opt_hyper=opt_hyper,
    )


def expected_param_names(
    config: ModelConfig, branch: BranchConfig | None
) -> set[str]:
    """The parameter name set is a pure function of the configs."""
    rng = np.random.default_rng(0)
    base = Backbone.initialize(config, rng)
    if branch is None:
        return {n for n, _ in base.named_parameters()}
    dual = DualHeadModel.build_from_pretrained(base, branch.branch_point, rng)
    return {n for n, _ in dual.named_parameters()}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = sorted(ckpt.params)
    payload_names = list(names)
    if ckpt.opt_state is not None:
        for n in sorted(ckpt.opt_state):
            payload_names.append(f"opt.m.{n}")
            payload_names.append(f"opt.v.{n}")

    def tensor_for(name: str) -> np.ndarray:
        if name.startswith("opt.m."):
            return ckpt.opt_state[name[6:]]["m"]
        if name.startswith("opt.v."):
            return ckpt.opt_state[name[6:]]["v"]
        return ckpt.params[name]

    manifest = []
    offset = 0
    for name in payload_names:
        arr = tensor_for(name)
        manifest.append(
            {"name": name, "shape": list(arr.shape), "offset": offset}
        )
        offset += arr.size
    header = {
        "format_version": VERSION,
        "kind": ckpt.kind,
        "model_config": asdict(ckpt.model_config),
        "branch_config": (
            asdict(ckpt.branch_config) if ckpt.branch_config else None
        ),
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "opt_t": (
            {n: s["t"] for n, s in sorted(ckpt.opt_state.items())}
            if ckpt.opt_state is not None
            else None
        ),
        "opt_hyper": ckpt.opt_hyper,
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<Q", len(header_bytes))
    blob += header_bytes
    for name in payload_names:
        arr = tensor_for(name)
        if arr.dtype != np.float32:
            raise ValueError(f"tensor {name} is {arr.dtype}, expected float32")
        blob += arr.astype("<f4").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + header_len + 4:
        raise ValueError("corrupt checkpoint: truncated header")
    (crc,) = struct.unpack("<I", blob[-4:])
    if crc != zlib.crc32(blob[:-4]):
        raise ValueError("corrupt checkpoint: checksum mismatch")
    header = json.loads(blob[16 : 16 + header_len].decode())
    payload = blob[16 + header_len : -4]
    tensors = {}
    total = 0
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        total += size
    if len(payload) != 4 * total:
        raise ValueError(
            f"corrupt checkpoint: payload {len(payload)} bytes, "
            f"manifest wants {4 * total}"
        )
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = 4 * entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    model_config = ModelConfig(**header["model_config"])
    branch = (
        BranchConfig(**header["branch_config"])
        if header["branch_config"]
        else None
    )
    params = {n: a for n, a in tensors.items() if not n.startswith("opt.")}
    opt_state = None
    if header.get("opt_t") is not None:
        opt_state = {
            n: {
                "m": tensors[f"opt.m.{n}"],
                "v": tensors[f"opt.v.{n}"],
                "t": t,
            }
            for n, t in header["opt_t"].items()
        }
    expected = expected_param_names(model_config, branch)
    if set(params) != expected:
        missing = sorted(expected - set(params))[:4]
        extra = sorted(set(params) - expected)[:4]
        raise ValueError(
            f"checkpoint name-set mismatch: missing {missing}, extra {extra}"
        )
    return Checkpoint(
        kind=header["kind"],
        model_config=model_config,
        branch_config=branch,
        params=params,
        step=header["step"],
        rng_state=header["rng_state"],
        opt_state=opt_state,
        opt_hyper=header.get("opt_hyper"),
    )


def load_into_model(model, ckpt: Checkpoint) -> None:
    """Overwrite a model's parameters in place; name sets must match."""
    named = dict(model.named_parameters())
    if set(named) != set(ckpt.params):
        missing = sorted(set(named) - set(ckpt.params))[:4]
        extra = sorted(set(ckpt.params) - set(named))[:4]
        raise ValueError(
            f"checkpoint name-set mismatch: model wants {missing}, "
            f"checkpoint has extra {extra}"
        )
    for name, tensor in named.items():
        arr = ckpt.params[name]
        if arr.shape != tensor.data.shape:
            raise ValueError(
                f"shape mismatch for {name}: {arr.shape} vs {tensor.data.shape}"
            )
        tensor.data = arr.astype(np.float32, copy=True)


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild the saved model (Backbone or DualHeadModel)."""
    rng = np.random.default_rng(0)  # values are overwritten below
    base = Backbone.initialize(ckpt.model_config, rng)
    if ckpt.kind == "raster":
        if ckpt.branch_config is not None:
            raise ValueError("raster checkpoint carries a branch config")
        load_into_model(base, ckpt)
        return base
    if ckpt.kind == "dual":
        if ckpt.branch_config is None:
            raise ValueError("dual checkpoint missing its branch config")
        dual = DualHeadModel.build_from_pretrained(
            base, ckpt.branch_config.branch_point, rng
        )
        load_into_model(dual, ckpt)
        return dual
    raise ValueError(f"unknown checkpoint kind {ckpt.kind!r}")
