"""Single-file checkpoint container.

Layout (little-endian)::

    b"DSSL" | u32 version | u64 manifest length | manifest (UTF-8)
    | raw tensor payload | u64 checksum

The checksum is an 8-byte BLAKE2b digest of every preceding byte. The manifest
is a ``key = value`` text block::

    format_version = 1
    tensor.<name> = <dtype> <shape, comma-separated> <offset> <nbytes>
    state.<key> = <value>
    config.<section>.<key> = <value>

Tensor names are prefixed ``param/`` for model weights and ``optim/`` for
optimizer moments; offsets are relative to the start of the payload.
"""
from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, config_from_pairs, parse_config_text

MAGIC = b"DSSL"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_TAIL = struct.Struct("<Q")


class CheckpointError(RuntimeError):
    """Unreadable, corrupt or mismatched checkpoint."""


def checksum(data):
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def _tensor_bytes(t):
    arr = t.detach().cpu().contiguous().numpy()
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def _optimizer_tensors(model, optimizer):
    if optimizer is None:
        return {}, {}
    names = {id(p): n for n, p in model.named_parameters()}
    tensors, steps = {}, {}
    for p, st in optimizer.state.items():
        name = names[id(p)]
        for key in ("exp_avg", "exp_avg_sq"):
            if key in st:
                tensors[f"optim/{name}/{key}"] = st[key]
        if "step" in st:
            steps[name] = float(st["step"])
    return tensors, steps


def save_checkpoint(model, path, state=None, optimizer=None):
    """Write ``model`` (plus optional training state) atomically; return the manifest text."""
    state = dict(state or {})
    tensors = {f"param/{n}": t for n, t in model.state_dict().items()}
    opt_tensors, steps = _optimizer_tensors(model, optimizer)
    tensors.update(opt_tensors)

    lines = [f"format_version = {VERSION}"]
    chunks, offset = [], 0
    for name, t in tensors.items():
        raw = _tensor_bytes(t)
        shape = ",".join(str(s) for s in t.shape)
        lines.append(f"tensor.{name} = {str(t.dtype).replace('torch.', '')} {shape or '-'} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    for name, step in steps.items():
        lines.append(f"state.optim_step.{name} = {step!r}")
    for key, value in state.items():
        lines.append(f"state.{key} = {value}")
    for line in model.cfg.dumps().splitlines():
        lines.append(f"config.{line}")
    manifest = ("\n".join(lines) + "\n").encode("utf-8")

    body = _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(chunks)
    blob = body + _TAIL.pack(checksum(body))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return manifest.decode("utf-8")


def read_checkpoint(path):
    """Validate the container and return ``(manifest pairs, tensors dict)``."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size + _TAIL.size:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(blob)} bytes)")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    body, (stored,) = blob[: -_TAIL.size], _TAIL.unpack(blob[-_TAIL.size :])
    if checksum(body) != stored:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated or corrupt)")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {VERSION})")
    manifest = body[_HEADER.size : _HEADER.size + mlen].decode("utf-8")
    payload = body[_HEADER.size + mlen :]
    pairs = parse_config_text(manifest)
    tensors = {}
    for key, value in pairs:
        if not key.startswith("tensor."):
            continue
        name = key[len("tensor.") :]
        dtype, shape, off, nbytes = value.split()
        off, nbytes = int(off), int(nbytes)
        if off + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {name} extends past payload")
        dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
        np_dtype = np.dtype(dtype).newbyteorder("<")
        arr = np.frombuffer(payload, dtype=np_dtype, count=nbytes // np_dtype.itemsize, offset=off)
        tensors[name] = torch.from_numpy(arr.astype(np_dtype.newbyteorder("="), copy=True).reshape(dims))
    return pairs, tensors


def load_checkpoint(path, cfg: RunConfig = None):
    """Rebuild the model from a checkpoint.

    The model is built from the embedded config snapshot unless ``cfg`` is
    given, in which case every parameter must match its shape. Returns
    ``(model, state)`` where ``state`` holds the ``state.*`` entries plus
    ``optimizer`` moments keyed by parameter name.
    """
    from .model import DSSL

    pairs, tensors = read_checkpoint(path)
    if cfg is None:
        try:
            cfg = config_from_pairs([(k[len("config.") :], v) for k, v in pairs if k.startswith("config.")])
        except ConfigError as exc:
            raise CheckpointError(f"{path}: bad config snapshot: {exc}") from None
    model = DSSL(cfg)
    expected = model.state_dict()
    params = {n[len("param/") :]: t for n, t in tensors.items() if n.startswith("param/")}
    for name, ref in expected.items():
        if name not in params:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        if tuple(params[name].shape) != tuple(ref.shape):
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {tuple(params[name].shape)}, "
                f"model expects {tuple(ref.shape)}"
            )
    extra = sorted(set(params) - set(expected))
    if extra:
        raise CheckpointError(f"{path}: unexpected parameter {extra[0]!r}")
    dtype = next(iter(params.values())).dtype
    model.to(dtype)
    model.load_state_dict(params)

    state = {"optimizer": {}}
    for key, value in pairs:
        if key.startswith("state.optim_step."):
            state["optimizer"].setdefault(key[len("state.optim_step.") :], {})["step"] = float(value)
        elif key.startswith("state."):
            state[key[len("state.") :]] = value
    for name, t in tensors.items():
        if name.startswith("optim/"):
            pname, _, moment = name[len("optim/") :].rpartition("/")
            state["optimizer"].setdefault(pname, {})[moment] = t
    return model, state


def restore_optimizer(model, optimizer, state):
    """Load saved Adam moments into a freshly constructed optimizer."""
    params = dict(model.named_parameters())
    for name, moments in state.get("optimizer", {}).items():
        p = params[name]
        st = optimizer.state[p]
        st["step"] = torch.tensor(moments.get("step", 0.0))
        for key in ("exp_avg", "exp_avg_sq"):
            if key in moments:
                st[key] = moments[key].clone()
