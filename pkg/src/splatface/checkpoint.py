"""Checkpoint container: every parameter group, seed splats, stage metadata.

Binary layout (little-endian):

    magic  "ESGC"
    u32    version = 1
    u32    stage id (0 neutral, 1 emotion, 2 stylization)
    u32    iteration
    u32    meta length, then UTF-8 JSON metadata (model config, RNG state,
           loss history, emotion/style tables, ...)
    u32    section count
    per section:  name + "\n", space-separated shape + "\n", f32 payload

Sections round-trip bit-exactly (parameters are stored f32).
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .model import STAGES, FaceModel, ModelConfig
from .splats import GaussianSplatSet, sh_coeff_count

MAGIC = b"ESGC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: str
    iteration: int
    meta: dict
    sections: dict = field(default_factory=dict)   # name -> np.float32 array

    @property
    def stage_id(self):
        return STAGES.index(self.stage)


def _write_section(f, name: str, arr: np.ndarray):
    if "\n" in name:
        raise CheckpointError(f"section name {name!r} contains a newline")
    f.write(name.encode() + b"\n")
    f.write(" ".join(str(d) for d in arr.shape).encode() + b"\n")
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_line(f) -> str:
    out = bytearray()
    while True:
        c = f.read(1)
        if not c:
            raise CheckpointError("unexpected end of checkpoint file")
        if c == b"\n":
            return out.decode()
        out += c


def save_checkpoint(path, ckpt: Checkpoint):
    """Atomic write (temp file + rename)."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(np.uint32(VERSION).tobytes())
            f.write(np.uint32(ckpt.stage_id).tobytes())
            f.write(np.uint32(ckpt.iteration).tobytes())
            meta = json.dumps(ckpt.meta, sort_keys=True).encode()
            f.write(np.uint32(len(meta)).tobytes())
            f.write(meta)
            f.write(np.uint32(len(ckpt.sections)).tobytes())
            for name in sorted(ckpt.sections):
                _write_section(f, name, ckpt.sections[name])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        version = int(np.frombuffer(f.read(4), "<u4")[0])
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        stage_id = int(np.frombuffer(f.read(4), "<u4")[0])
        if not 0 <= stage_id < len(STAGES):
            raise CheckpointError(f"{path}: bad stage id {stage_id}")
        iteration = int(np.frombuffer(f.read(4), "<u4")[0])
        meta_len = int(np.frombuffer(f.read(4), "<u4")[0])
        meta = json.loads(f.read(meta_len).decode())
        count = int(np.frombuffer(f.read(4), "<u4")[0])
        sections = {}
        for _ in range(count):
            name = _read_line(f)
            shape = tuple(int(v) for v in _read_line(f).split() if v)
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * n), "<f4").reshape(shape)
            sections[name] = data.copy()
    return Checkpoint(stage=STAGES[stage_id], iteration=iteration, meta=meta,
                      sections=sections)


def model_sections(model: FaceModel) -> dict:
    """Named f32 sections for all parameters plus seed splats and bbox."""
    sections = {p.name: p.data.astype("<f4") for p in model.parameters()}
    seed = model.generator.seed
    sections["seed.mu"] = seed.mu.astype("<f4")
    sections["seed.s"] = seed.s.astype("<f4")
    sections["seed.q"] = seed.q.astype("<f4")
    sections["seed.sh"] = seed.sh.astype("<f4")
    sections["seed.alpha_raw"] = seed.alpha_raw.astype("<f4")
    sections["triplane.bbox"] = np.stack([
        model.generator.stack.bbox_lo, model.generator.stack.bbox_hi
    ]).astype("<f4")
    return sections


def checkpoint_from_model(model: FaceModel, stage: str, iteration: int,
                          meta: dict) -> Checkpoint:
    meta = dict(meta)
    meta["model_config"] = model.cfg.to_dict()
    # bbox kept in JSON at full float64 precision (sections are f32)
    meta["bbox"] = [[float(v) for v in model.generator.stack.bbox_lo],
                    [float(v) for v in model.generator.stack.bbox_hi]]
    return Checkpoint(stage=stage, iteration=iteration, meta=meta,
                      sections=model_sections(model))


def restore_model(ckpt: Checkpoint) -> FaceModel:
    cfg = ModelConfig.from_dict(ckpt.meta["model_config"])
    k = cfg.sh_degree
    sec = ckpt.sections
    n = sec["seed.mu"].shape[0]
    seed = GaussianSplatSet(
        mu=sec["seed.mu"].astype(np.float32),
        s=sec["seed.s"].astype(np.float32),
        q=sec["seed.q"].astype(np.float32),
        sh=sec["seed.sh"].reshape(n, 3 * sh_coeff_count(k)).astype(np.float32),
        alpha_raw=sec["seed.alpha_raw"].astype(np.float32), k=k)
    if "bbox" in ckpt.meta:
        bbox = np.asarray(ckpt.meta["bbox"], dtype=np.float64)
    else:
        bbox = sec["triplane.bbox"].astype(np.float64)
    model = FaceModel(seed.mu, cfg, seed_splats=seed, bbox=(bbox[0], bbox[1]))
    for p in model.parameters():
        if p.name not in sec:
            raise CheckpointError(f"checkpoint is missing section {p.name!r}")
        if tuple(sec[p.name].shape) != tuple(p.data.shape):
            raise CheckpointError(
                f"section {p.name!r} shape {sec[p.name].shape} != {p.data.shape}")
        p.data = sec[p.name].astype(p.data.dtype).copy()
    return model


def group_checksums(model: FaceModel) -> dict:
    """Byte-level hash per parameter group (freeze-contract assertions)."""
    import hashlib
    out = {}
    for name, params in model.groups().items():
        h = hashlib.sha256()
        for p in params:
            h.update(p.data.tobytes())
        out[name] = h.hexdigest()
    return out
