"""Emotion-audio-guided spatial attention stack.

Per block: residual cross-attention of the per-splat features against the
audio token set, then against the emotion token set, then a residual
feed-forward layer.  Splats never attend to each other, so the stack is
equivariant to splat reordering.  Both token sets carry a learned null token
as a content-free slot a splat can attend to when it needs no conditioning.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import AUDIO_FRAME_FLOATS, EMOTION_DIM, FrameFeatureRecord
from .nn import AttentionLayer, MlpSpec, init_mlp, mlp_apply
from .tensor import Tensor, concat


@dataclass
class TokenSet:
    tokens: Tensor            # (M, d)
    labels: list              # M strings; exactly one "null"

    def __post_init__(self):
        if self.tokens.shape[0] != len(self.labels):
            raise ValueError("token/label count mismatch")
        if self.labels.count("null") != 1:
            raise ValueError("token set must contain exactly one null token")


@dataclass
class EsamParams:
    d_model: int
    blocks: list = field(default_factory=list)   # per block: dict(aga, ega, ff params)
    embedders: dict = field(default_factory=dict)
    ff_spec: MlpSpec | None = None
    input_proj: list | None = None
    feature_width: int = 0

    @staticmethod
    def create(feature_width, d_model=32, n_blocks=2, ff_hidden=64, radius=2,
               rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        p = EsamParams(d_model=d_model, feature_width=feature_width)
        emb = {}
        for name, width in (("audio", AUDIO_FRAME_FLOATS), ("blink", 1),
                            ("viewpoint", 12), ("emotion", EMOTION_DIM)):
            spec = MlpSpec((width, d_model), activation="none")
            emb[name] = (spec, init_mlp(spec, rng, dtype=dtype, name=f"esam.emb.{name}"))
        emb["null"] = Tensor(rng.normal(0, 0.02, size=d_model).astype(dtype),
                             requires_grad=True, name="esam.null")
        p.embedders = emb
        p.ff_spec = MlpSpec((d_model, ff_hidden, d_model))
        for b in range(n_blocks):
            p.blocks.append(dict(
                aga=AttentionLayer.create(d_model, d_model, rng, dtype, name=f"esam.b{b}.aga"),
                ega=AttentionLayer.create(d_model, d_model, rng, dtype, name=f"esam.b{b}.ega"),
                ff=init_mlp(p.ff_spec, rng, dtype=dtype, name=f"esam.b{b}.ff"),
            ))
        if feature_width != d_model:
            spec = MlpSpec((feature_width, d_model), activation="none")
            p.input_proj = [spec, init_mlp(spec, rng, dtype=dtype, name="esam.inproj")]
        return p

    def parameters(self):
        out = []
        for name in ("audio", "blink", "viewpoint", "emotion"):
            out += self.embedders[name][1]
        out.append(self.embedders["null"])
        for blk in self.blocks:
            out += blk["aga"].params + blk["ega"].params + blk["ff"]
        if self.input_proj is not None:
            out += self.input_proj[1]
        return out


def _embed(params: EsamParams, name, x: Tensor) -> Tensor:
    spec, p = params.embedders[name]
    return mlp_apply(spec, p, x)


def tokenize_audio(window: np.ndarray, y: float, v: np.ndarray,
                   params: EsamParams) -> TokenSet:
    """(2l+1) audio tokens + blink + viewpoint + null: M = 2l+4."""
    dtype = params.embedders["null"].dtype
    frames = Tensor(np.asarray(window, dtype=dtype).reshape(window.shape[0], -1))
    audio_tokens = _embed(params, "audio", frames)
    blink = _embed(params, "blink", Tensor(np.array([y], dtype=dtype)))
    view = _embed(params, "viewpoint", Tensor(np.asarray(v, dtype=dtype)))
    tokens = concat([audio_tokens,
                     blink.reshape(1, -1),
                     view.reshape(1, -1),
                     params.embedders["null"].reshape(1, -1)], axis=0)
    labels = [f"audio-frame({i})" for i in range(window.shape[0])] + [
        "blink", "viewpoint", "null"]
    return TokenSet(tokens, labels)


def tokenize_emotion(e: np.ndarray, params: EsamParams) -> TokenSet:
    dtype = params.embedders["null"].dtype
    tok = _embed(params, "emotion", Tensor(np.asarray(e, dtype=dtype)))
    tokens = concat([tok.reshape(1, -1), params.embedders["null"].reshape(1, -1)], axis=0)
    return TokenSet(tokens, ["emotion", "null"])


@dataclass
class AttentionRecord:
    """Per-block attention weights, (N, M) numpy arrays."""
    aga: list = field(default_factory=list)
    ega: list = field(default_factory=list)
    aga_labels: list = field(default_factory=list)
    ega_labels: list = field(default_factory=list)


def esam_block(z_prev: Tensor, audio: TokenSet, emotion: TokenSet, block,
               ff_spec: MlpSpec, record: AttentionRecord | None = None,
               aga_sink: list | None = None,
               ega_sink: list | None = None) -> Tensor:
    a_out, a_w = block["aga"](z_prev, audio.tokens)
    z1 = a_out + z_prev
    e_out, e_w = block["ega"](z1, emotion.tokens)
    z2 = e_out + z1
    z3 = mlp_apply(ff_spec, block["ff"], z2) + z2
    if record is not None:
        record.aga.append(a_w.data.copy())
        record.ega.append(e_w.data.copy())
        record.aga_labels = audio.labels
        record.ega_labels = emotion.labels
    if aga_sink is not None:
        aga_sink.append(a_w)
    if ega_sink is not None:
        ega_sink.append(e_w)
    return z3


def run_esam(f_p: Tensor, frame: FrameFeatureRecord, window: np.ndarray,
             params: EsamParams, record_attention=False,
             aga_sink: list | None = None, ega_sink: list | None = None):
    """f_p (N, L*C) + frame features -> (z_B (N, d), AttentionRecord | None).

    `aga_sink`/`ega_sink`, when given a list, collect each block's
    differentiable weight matrix (N, M) so training can regularize them.
    """
    audio = tokenize_audio(window, frame.y, frame.v, params)
    emotion = tokenize_emotion(frame.e, params)
    if params.input_proj is not None:
        spec, p = params.input_proj
        z = mlp_apply(spec, p, f_p)
    else:
        z = f_p
    record = AttentionRecord() if record_attention else None
    for block in params.blocks:
        z = esam_block(z, audio, emotion, block, params.ff_spec, record,
                       aga_sink, ega_sink)
    return z, record


def attention_token_weights(record: AttentionRecord, layer: str, token: str) -> np.ndarray:
    """Per-splat attention weight on a token (or token group), averaged over blocks.

    `token` may be an exact label, or "audio" to sum over all audio-frame tokens.
    """
    if layer == "aga":
        mats, labels = record.aga, record.aga_labels
    elif layer == "ega":
        mats, labels = record.ega, record.ega_labels
    else:
        raise ValueError(f"unknown layer {layer!r} (expected 'aga' or 'ega')")
    if token == "audio":
        cols = [i for i, lb in enumerate(labels) if lb.startswith("audio-frame")]
    else:
        cols = [i for i, lb in enumerate(labels) if lb == token]
    if not cols:
        raise ValueError(f"token {token!r} not in {layer} token set {labels}")
    return np.mean([m[:, cols].sum(axis=1) for m in mats], axis=0)


def export_attention_heatmap(record: AttentionRecord, layer: str, token: str,
                             splats, cam, rasterize_fn):
    """Render per-splat attention weight as an overlay channel, peak-normalized."""
    w = attention_token_weights(record, layer, token)
    peak = w.max()
    norm = w / peak if peak > 0 else w
    out = rasterize_fn(splats, cam, overlay_values=norm.astype(np.float64))
    return out, w
