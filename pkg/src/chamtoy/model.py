"""Decoder-only transformer over a mixed text/image token vocabulary.

Two residual arrangements are supported.  PRE_NORM is the conventional
one: each sublayer reads a normalized copy of the stream and its raw
output is added back, so nothing bounds how large an increment can get.
POST_NORM_REORDER normalizes the sublayer output itself before the add:

    h   = x + attn_norm(attention(x))
    out = h + ffn_norm(ffn(h))

which pins every residual increment to unit root-mean-square and is the
arrangement that keeps long mixed-modal runs from diverging.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .layers import attention, dropout, rms_norm, rope_tables, swiglu
from .numerics import Tensor, embedding


class NormStrategy(enum.Enum):
    PRE_NORM = "pre_norm"
    POST_NORM_REORDER = "post_norm_reorder"


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_kv_heads: int = 4
    ffn_hidden: int = 128
    max_seq: int = 256
    dropout: float = 0.0
    z_coeff: float = 1e-5
    qk_norm: bool = True
    norm_strategy: NormStrategy = NormStrategy.POST_NORM_REORDER
    norm_eps: float = 1e-5
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must divide evenly into heads")
        if self.n_heads % self.n_kv_heads != 0:
            raise ValueError("n_heads must be a multiple of n_kv_heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dimension must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


# Desk-scale geometry throughout; the named recipes vary only the
# stability knobs.  The reference training runs used 2^23 tokens per batch
# for the first recipe and 3 * 2^22 for the second (documentation only,
# batching here is set by the trainer).
_PRESETS = {
    "toy": dict(
        dropout=0.0, z_coeff=1e-5, qk_norm=True,
        norm_strategy=NormStrategy.POST_NORM_REORDER, n_kv_heads=4,
    ),
    "7b-recipe": dict(
        dropout=0.1, z_coeff=1e-5, qk_norm=True,
        norm_strategy=NormStrategy.POST_NORM_REORDER, n_kv_heads=4,
    ),
    "34b-recipe": dict(
        dropout=0.0, z_coeff=1e-5, qk_norm=True,
        norm_strategy=NormStrategy.POST_NORM_REORDER, n_kv_heads=2,
    ),
    "llama2-recipe": dict(
        dropout=0.0, z_coeff=0.0, qk_norm=False,
        norm_strategy=NormStrategy.PRE_NORM, n_kv_heads=4,
    ),
}


def preset(name: str, vocab_size: int, **overrides) -> ModelConfig:
    if name not in _PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    kwargs = dict(_PRESETS[name])
    kwargs.update(overrides)
    return ModelConfig(vocab_size=vocab_size, **kwargs)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameter dict; matrices ~ N(0, 0.02), norm gains at 1."""
    rng = np.random.default_rng(seed)
    std = 0.02
    p: dict[str, Tensor] = {}

    def mat(name, rows, cols):
        p[name] = Tensor(rng.normal(0.0, std, size=(rows, cols)), requires_grad=True)

    def gain(name, n):
        p[name] = Tensor(np.ones(n), requires_grad=True)

    d, hd = cfg.d_model, cfg.head_dim
    mat("tok_emb", cfg.vocab_size, d)
    for i in range(cfg.n_layers):
        mat(f"layers.{i}.attn.wq", d, d)
        mat(f"layers.{i}.attn.wk", d, cfg.n_kv_heads * hd)
        mat(f"layers.{i}.attn.wv", d, cfg.n_kv_heads * hd)
        mat(f"layers.{i}.attn.wo", d, d)
        if cfg.qk_norm:
            gain(f"layers.{i}.attn.q_gain", hd)
            gain(f"layers.{i}.attn.k_gain", hd)
        gain(f"layers.{i}.attn_norm.gain", d)
        mat(f"layers.{i}.ffn.w_gate", d, cfg.ffn_hidden)
        mat(f"layers.{i}.ffn.w_up", d, cfg.ffn_hidden)
        mat(f"layers.{i}.ffn.w_down", cfg.ffn_hidden, d)
        gain(f"layers.{i}.ffn_norm.gain", d)
    gain("final_norm.gain", d)
    mat("lm_head", d, cfg.vocab_size)
    return p


def count_params(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


_ROPE_CACHE: dict[tuple[int, int, float], tuple[np.ndarray, np.ndarray]] = {}


def _rope(cfg: ModelConfig):
    key = (cfg.head_dim, cfg.max_seq, cfg.rope_base)
    if key not in _ROPE_CACHE:
        _ROPE_CACHE[key] = rope_tables(cfg.head_dim, cfg.max_seq, cfg.rope_base)
    return _ROPE_CACHE[key]


def block_forward(
    x: Tensor,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    layer: int,
    rng: np.random.Generator | None = None,
    training: bool = False,
    past_kv=None,
):
    """One transformer block.  Returns (out, info).

    info carries the two residual increments (post-dropout, exactly what
    was added to the stream) and the updated kv pair for this layer.
    """
    pre = f"layers.{layer}"
    cos, sin = _rope(cfg)
    q_gain = params.get(f"{pre}.attn.q_gain")
    k_gain = params.get(f"{pre}.attn.k_gain")

    def attn(inp):
        return attention(
            inp,
            params[f"{pre}.attn.wq"], params[f"{pre}.attn.wk"],
            params[f"{pre}.attn.wv"], params[f"{pre}.attn.wo"],
            cfg.n_heads, cfg.n_kv_heads, cos, sin,
            q_gain=q_gain, k_gain=k_gain, norm_eps=cfg.norm_eps,
            past_kv=past_kv,
        )

    def ffn(inp):
        return swiglu(
            inp,
            params[f"{pre}.ffn.w_gate"], params[f"{pre}.ffn.w_up"],
            params[f"{pre}.ffn.w_down"],
        )

    attn_gain = params[f"{pre}.attn_norm.gain"]
    ffn_gain = params[f"{pre}.ffn_norm.gain"]

    if cfg.norm_strategy is NormStrategy.PRE_NORM:
        a_out, kv = attn(rms_norm(x, attn_gain, cfg.norm_eps))
        a_inc = dropout(a_out, cfg.dropout, rng, training)
        h = x + a_inc
        f_inc = dropout(ffn(rms_norm(h, ffn_gain, cfg.norm_eps)), cfg.dropout, rng, training)
        out = h + f_inc
    else:
        a_out, kv = attn(x)
        a_inc = dropout(rms_norm(a_out, attn_gain, cfg.norm_eps), cfg.dropout, rng, training)
        h = x + a_inc
        f_inc = dropout(rms_norm(ffn(h), ffn_gain, cfg.norm_eps), cfg.dropout, rng, training)
        out = h + f_inc

    return out, {"attn_increment": a_inc, "ffn_increment": f_inc, "kv": kv}


def model_forward(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    ids,
    rng: np.random.Generator | None = None,
    training: bool = False,
    past_kv: list | None = None,
):
    """Full forward pass.  ids is an int array [batch, seq].

    Returns (logits, aux) where aux["hidden"] is the residual stream after
    the last block and before the final norm (the quantity the divergence
    monitor tracks) and aux["kv"] is the per-layer cache for incremental
    decoding.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ValueError("token ids must be a 1-d or 2-d int array")
    cached = 0 if past_kv is None else past_kv[0][0].shape[2]
    if cached + ids.shape[1] > cfg.max_seq:
        raise ValueError(
            f"sequence of {cached + ids.shape[1]} exceeds max_seq {cfg.max_seq}"
        )

    x = embedding(params["tok_emb"], ids)
    new_kv = []
    for i in range(cfg.n_layers):
        layer_past = None if past_kv is None else past_kv[i]
        x, info = block_forward(x, params, cfg, i, rng, training, past_kv=layer_past)
        new_kv.append(info["kv"])
    hidden = x
    logits = rms_norm(hidden, params["final_norm.gain"], cfg.norm_eps) @ params["lm_head"]
    return logits, {"hidden": hidden, "kv": new_kv}


# ----------------------------------------------------------------------
# checkpointing
# ----------------------------------------------------------------------

FORMAT_VERSION = 1


def _config_to_lines(cfg: ModelConfig) -> list[str]:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, NormStrategy):
            v = v.value
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"model.{f.name} {v}")
    return lines


def _config_from_map(kv: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        raw = kv[f"model.{f.name}"]
        if f.name == "norm_strategy":
            kwargs[f.name] = NormStrategy(raw)
        elif f.type == "bool" or isinstance(f.default, bool):
            kwargs[f.name] = raw == "true"
        elif f.type == "int" or isinstance(f.default, int):
            kwargs[f.name] = int(raw)
        else:
            kwargs[f.name] = float(raw)
    kwargs["vocab_size"] = int(kv["model.vocab_size"])
    return ModelConfig(**kwargs)


def save_checkpoint(
    path,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    opt_state: dict | None = None,
    step: int | None = None,
) -> None:
    """Write a checkpoint directory: manifest.txt, weights.bin, config.txt.

    weights.bin is a flat little-endian float64 blob; the manifest maps
    each array name to its shape and byte span.  Optimizer moments are
    stored under opt.m.<name> / opt.v.<name> so a resumed run continues
    bit-for-bit.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    arrays: list[tuple[str, np.ndarray]] = [(k, v.data) for k, v in params.items()]
    if opt_state is not None:
        for k in sorted(opt_state["m"]):
            arrays.append((f"opt.m.{k}", opt_state["m"][k]))
        for k in sorted(opt_state["v"]):
            arrays.append((f"opt.v.{k}", opt_state["v"][k]))

    manifest = []
    offset = 0
    with open(path / "weights.bin", "wb") as fh:
        for name, arr in arrays:
            buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            shape = ",".join(map(str, arr.shape))
            manifest.append(f"{name} {shape} float64 {offset} {len(buf)}")
            fh.write(buf)
            offset += len(buf)

    (path / "manifest.txt").write_text("\n".join(manifest) + "\n")

    lines = [f"format_version {FORMAT_VERSION}"]
    lines.extend(_config_to_lines(cfg))
    if step is not None:
        lines.append(f"opt.step {step}")
    if opt_state is not None:
        lines.append(f"opt.t {opt_state['t']}")
    (path / "config.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Read a checkpoint directory back.

    Returns (params, cfg, opt_state, step); opt_state/step are None when
    the checkpoint was saved without them.
    """
    path = Path(path)
    kv: dict[str, str] = {}
    for line in (path / "config.txt").read_text().splitlines():
        if line.strip():
            key, _, val = line.partition(" ")
            kv[key] = val
    version = int(kv.get("format_version", "-1"))
    if version != FORMAT_VERSION:
        raise ValueError(f"checkpoint format {version} not supported (expected {FORMAT_VERSION})")
    cfg = _config_from_map(kv)

    blob = (path / "weights.bin").read_bytes()
    params: dict[str, Tensor] = {}
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    for line in (path / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        name, shape_s, dtype, offset_s, length_s = line.split(" ")
        if dtype != "float64":
            raise ValueError(f"unsupported dtype {dtype} in manifest")
        offset, length = int(offset_s), int(length_s)
        if offset + length > len(blob):
            raise ValueError(f"manifest entry {name} overruns weights.bin")
        shape = tuple(int(s) for s in shape_s.split(",") if s)
        arr = np.frombuffer(blob[offset:offset + length], dtype="<f8").reshape(shape).copy()
        if name.startswith("opt.m."):
            opt_m[name[len("opt.m."):]] = arr
        elif name.startswith("opt.v."):
            opt_v[name[len("opt.v."):]] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True)

    opt_state = None
    if opt_m:
        opt_state = {"m": opt_m, "v": opt_v, "t": int(kv.get("opt.t", "0"))}
    step = int(kv["opt.step"]) if "opt.step" in kv else None
    return params, cfg, opt_state, step


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


def config_with(cfg: ModelConfig, **kw) -> ModelConfig:
    return replace(cfg, **kw)
