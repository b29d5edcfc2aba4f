"""Encoder-decoder generative recommender with geo-aware attention.

Parameters live in a flat ``dict[str, np.ndarray]``; forward passes wrap
them as :class:`~georec.numerics.Tensor` leaves so the same code serves
training (inside a tape) and inference (outside one).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import geo
from . import numerics as nx
from .numerics import Tensor

PROMPTS = ("neighbor", "pointwise", "mlp")


@dataclass(frozen=True)
class ModelConfig:
    n_videos: int
    n_cells: int  # location-id vocabulary, row 0 reserved for unknown cells
    attr_dim: int
    n_codes: int = 64
    n_levels: int = 3
    d_video: int = 32
    d_lid: int = 16
    d_lc: int = 16
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_blocks: int = 2
    d_prompt: int = 32
    gate_hidden: int = 32
    max_watch: int = 32
    max_click: int = 8
    max_pay: int = 4
    use_location_scores: bool = True
    use_location_gate: bool = True
    prompt: str = "neighbor"
    norm_eps: float = 1e-6
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.prompt not in PROMPTS:
            raise ValueError(f"prompt must be one of {PROMPTS}")

    @property
    def max_len(self) -> int:
        return self.max_watch + self.max_click + self.max_pay

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    dt = np.dtype(cfg.dtype)
    p: dict[str, np.ndarray] = {}
    out_scale = 1.0 / np.sqrt(2 * max(cfg.n_blocks, 1))

    def dense(name, fan_in, fan_out, scale=1.0, bias=True):
        p[name + ".w"] = rng.normal(scale=scale / np.sqrt(fan_in), size=(fan_in, fan_out))
        if bias:
            p[name + ".b"] = np.zeros(fan_out)

    d, dm = cfg.d_lc, cfg.d_model
    p["emb.video"] = rng.normal(size=(cfg.n_videos, cfg.d_video))
    p["emb.lid"] = rng.normal(size=(cfg.n_cells, cfg.d_lid))
    dense("lc", cfg.attr_dim, d)
    dense("fuse1", cfg.d_video + cfg.d_lid + d, dm)
    dense("fuse2", dm, dm)
    p["emb.behavior"] = rng.normal(scale=0.1, size=(3, dm))
    p["emb.position"] = rng.normal(scale=0.1, size=(cfg.max_len, dm))

    def block_attn(pre):
        for w in ("wq", "wk", "wv"):
            p[f"{pre}.{w}"] = rng.normal(scale=1 / np.sqrt(dm), size=(dm, dm))
        p[f"{pre}.wo"] = rng.normal(scale=out_scale / np.sqrt(dm), size=(dm, dm))

    def block_ffn(pre):
        dense(pre + ".ffn1", dm, cfg.d_ff)
        dense(pre + ".ffn2", cfg.d_ff, dm, scale=out_scale)

    for k in range(cfg.n_blocks):
        pre = f"enc{k}"
        p[pre + ".norm1"] = np.ones(dm)
        block_attn(pre + ".attn")
        if cfg.use_location_gate:
            p[pre + ".gate.wu"] = rng.normal(scale=1 / np.sqrt(2 * d), size=(d, cfg.gate_hidden))
            p[pre + ".gate.wi"] = rng.normal(scale=1 / np.sqrt(2 * d), size=(d, cfg.gate_hidden))
            p[pre + ".gate.b1"] = np.zeros(cfg.gate_hidden)
            dense(pre + ".gate2", cfg.gate_hidden, 1, scale=0.1)
        p[pre + ".norm2"] = np.ones(dm)
        block_ffn(pre)

    if cfg.prompt == "neighbor":
        for w in ("wq", "wk", "wv"):
            p[f"prompt.{w}"] = rng.normal(scale=1 / np.sqrt(d), size=(d, cfg.d_prompt))
        p["prompt.wo"] = rng.normal(scale=1 / np.sqrt(cfg.d_prompt), size=(cfg.d_prompt, dm))
        p["prompt.null"] = rng.normal(scale=0.1, size=d)
    elif cfg.prompt == "pointwise":
        dense("prompt.point", d, dm)
    else:
        p["prompt.null"] = rng.normal(scale=0.1, size=d)
        dense("prompt.mlp1", 8 * d, dm)
        dense("prompt.mlp2", dm, dm)

    for j in range(cfg.n_levels):
        p[f"dec.sid{j}"] = rng.normal(size=(cfg.n_codes, dm))
    p["dec.position"] = rng.normal(scale=0.1, size=(cfg.n_levels + 1, dm))
    for k in range(cfg.n_blocks):
        pre = f"dec{k}"
        p[pre + ".norm1"] = np.ones(dm)
        block_attn(pre + ".self")
        p[pre + ".norm2"] = np.ones(dm)
        block_attn(pre + ".cross")
        p[pre + ".norm3"] = np.ones(dm)
        block_ffn(pre)
    p["head.norm"] = np.ones(dm)
    for j in range(cfg.n_levels):
        dense(f"head{j}", dm, cfg.n_codes, scale=0.1)
    return {k: v.astype(dt) for k, v in p.items()}


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def as_tensors(params: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


# -- inputs -------------------------------------------------------------------------

@dataclass
class Batch:
    video: np.ndarray  # (B, L) catalog rows
    lid: np.ndarray  # (B, L)
    attr: np.ndarray  # (B, L, A)
    behavior: np.ndarray  # (B, L)
    position: np.ndarray  # (B, L)
    mask: np.ndarray  # (B, L) True on real positions
    user_attr: np.ndarray  # (B, A)
    nb_attr: np.ndarray  # (B, 8, A)
    nb_null: np.ndarray  # (B, 8) degenerate neighbors
    targets: np.ndarray | None = None  # (B, T)

    def __len__(self) -> int:
        return self.video.shape[0]

    def take(self, rows) -> "Batch":
        rows = np.asarray(rows)
        return Batch(**{f.name: (None if getattr(self, f.name) is None else getattr(self, f.name)[rows])
                        for f in dataclasses.fields(self)})

    def trim(self) -> "Batch":
        """Drop trailing all-padding columns."""
        L = int(self.mask.any(axis=0).nonzero()[0].max()) + 1
        if L == self.mask.shape[1]:
            return self
        out = dataclasses.replace(self)
        for name in ("video", "lid", "attr", "behavior", "position", "mask"):
            setattr(out, name, getattr(self, name)[:, :L])
        return out


class Featurizer:
    """Turns behavior sequences into padded arrays.

    A history item is located at its video's store cell (the catalog cell),
    not at the cell the user occupied when interacting with it.
    """

    def __init__(self, catalog, cfg: ModelConfig):
        self.catalog = catalog
        self.cfg = cfg
        self.video_attr = np.array([catalog.cell_attributes(c) for c in catalog.cells])
        self.video_lid = np.array([catalog.cell_id.get(c, 0) for c in catalog.cells], dtype=np.int64)

    def _one(self, seq):
        cfg, cat = self.cfg, self.catalog
        rows, beh = [], []
        for b, items, cap in ((0, seq.watch, cfg.max_watch), (1, seq.click, cfg.max_click),
                              (2, seq.pay, cfg.max_pay)):
            items = items[-cap:] if cap else []
            for item in items:
                vid = item[0]
                if vid not in cat.row_of:
                    raise KeyError(f"unknown video id {vid!r}")
                rows.append(cat.row_of[vid])
                beh.append(b)
        if not rows:
            raise ValueError("empty behavior sequence")
        nb = geo.neighbors8(seq.user_cell)
        return (np.array(rows), np.array(beh), cat.cell_attributes(seq.user_cell),
                np.array([cat.cell_attributes(c) for c in nb.cells]), np.array(nb.degenerate))

    def batch(self, seqs: Sequence, targets=None) -> Batch:
        parts = [self._one(s) for s in seqs]
        B, L = len(parts), max(len(p[0]) for p in parts)
        video = np.zeros((B, L), dtype=np.int64)
        behavior = np.zeros((B, L), dtype=np.int64)
        mask = np.zeros((B, L), dtype=bool)
        for i, (rows, beh, *_rest) in enumerate(parts):
            video[i, :len(rows)] = rows
            behavior[i, :len(rows)] = beh
            mask[i, :len(rows)] = True
        attr = self.video_attr[video] * mask[..., None]
        lid = np.where(mask, self.video_lid[video], 0)
        position = np.broadcast_to(np.arange(L), (B, L)).copy()
        dt = np.dtype(self.cfg.dtype)
        return Batch(video, lid, attr.astype(dt), behavior, position, mask,
                     np.array([p[2] for p in parts], dtype=dt), np.array([p[3] for p in parts], dtype=dt),
                     np.array([p[4] for p in parts]),
                     None if targets is None else np.asarray(targets, dtype=np.int64).reshape(B, -1))


# -- building blocks -------------------------------------------------------------------

def _dense(P, name, x):
    return nx.matmul(x, P[name + ".w"]) + P[name + ".b"]


def _split_heads(x: Tensor, h: int) -> Tensor:
    B, n, d = x.shape
    return nx.transpose(nx.reshape(x, (B, n, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, n, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (B, n, h * dh))


def attention(P, pre: str, xq: Tensor, xkv: Tensor, n_heads: int, mask=None, bias=None,
              return_weights: bool = False):
    """Multi-head scaled dot-product attention; ``bias`` is added to every head's logits."""
    q = _split_heads(nx.matmul(xq, P[pre + ".wq"]), n_heads)
    k = _split_heads(nx.matmul(xkv, P[pre + ".wk"]), n_heads)
    v = _split_heads(nx.matmul(xkv, P[pre + ".wv"]), n_heads)
    s = nx.matmul(q, nx.swap_last(k)) * (1.0 / np.sqrt(q.shape[-1]))
    if bias is not None:
        s = s + bias
    a = nx.row_softmax(s, mask)
    out = nx.matmul(_merge_heads(nx.matmul(a, v)), P[pre + ".wo"])
    return (out, a) if return_weights else out


def ffn(P, pre: str, x: Tensor) -> Tensor:
    return _dense(P, pre + ".ffn2", nx.silu(_dense(P, pre + ".ffn1", x)))


def location_context(P, attr) -> Tensor:
    return _dense(P, "lc", nx.Tensor(attr) if not isinstance(attr, Tensor) else attr)


def embed_batch(P, batch: Batch, cfg: ModelConfig):
    """Fused item embeddings Z, their location contexts E_lc, and the user's e_lc."""
    m = batch.mask[..., None]
    e_v = nx.gather_rows(P["emb.video"], batch.video)
    e_lid = nx.gather_rows(P["emb.lid"], batch.lid)
    e_lc = nx.mul(location_context(P, batch.attr), m)
    z = _dense(P, "fuse2", nx.silu(_dense(P, "fuse1", nx.concat([e_v, e_lid, e_lc], axis=-1))))
    z = z + nx.gather_rows(P["emb.behavior"], batch.behavior) + nx.gather_rows(P["emb.position"], batch.position)
    z = nx.mul(z, m)
    e_lc_u = location_context(P, batch.user_attr)
    return z, e_lc, e_lc_u


def location_gate(P, pre: str, E_lc: Tensor, e_lc_u: Tensor) -> Tensor:
    """2·sigmoid(MLP(e_lc_u ‖ E_lc[i])), one scalar per position, shape (B, n, 1)."""
    B, n, _ = E_lc.shape
    u = nx.reshape(nx.matmul(e_lc_u, P[pre + ".gate.wu"]), (B, 1, -1))
    h = nx.silu(nx.matmul(E_lc, P[pre + ".gate.wi"]) + u + P[pre + ".gate.b1"])
    return nx.sigmoid(_dense(P, pre + ".gate2", h)) * 2.0


def ga_attention(P, pre: str, Z: Tensor, E_lc: Tensor, e_lc_u: Tensor, cfg: ModelConfig,
                 key_mask=None, return_parts: bool = False):
    B, n, _ = Z.shape
    mask = None if key_mask is None else key_mask[:, None, None, :]
    bias = None
    if cfg.use_location_scores:
        bias = nx.reshape(nx.matmul(E_lc, nx.swap_last(E_lc)), (B, 1, n, n))
    out, a = attention(P, pre + ".attn", Z, Z, cfg.n_heads, mask, bias, return_weights=True)
    g = None
    if cfg.use_location_gate:
        g = location_gate(P, pre, E_lc, e_lc_u)
        out = out * g
    return (out, a, g) if return_parts else out


@dataclass
class EncoderOutput:
    states: Tensor  # (B, n, d_model)
    loc_ctx: Tensor  # (B, n, d_lc)
    mask: np.ndarray  # (B, n)

    def repeat(self, k: int) -> "EncoderOutput":
        return EncoderOutput(Tensor(np.repeat(self.states.data, k, axis=0)),
                             Tensor(np.repeat(self.loc_ctx.data, k, axis=0)),
                             np.repeat(self.mask, k, axis=0))


def encoder_forward(P, Z: Tensor, E_lc: Tensor, e_lc_u: Tensor, cfg: ModelConfig,
                    mask=None) -> EncoderOutput:
    if mask is None:
        mask = np.ones(Z.shape[:2], dtype=bool)
    for k in range(cfg.n_blocks):
        pre = f"enc{k}"
        Z = Z + ga_attention(P, pre, nx.rms_norm(Z, P[pre + ".norm1"], cfg.norm_eps), E_lc, e_lc_u, cfg, mask)
        Z = Z + ffn(P, pre, nx.rms_norm(Z, P[pre + ".norm2"], cfg.norm_eps))
    return EncoderOutput(Z, E_lc, mask)


def neighbor_prompt(P, e_lc_u: Tensor, E_s: Tensor, cfg: ModelConfig, null=None,
                    return_weights: bool = False):
    """Single-query cross-attention from the user's cell over its 8 neighbors."""
    B = e_lc_u.shape[0]
    if null is not None and np.any(null):
        E_s = nx.where_rows(np.asarray(null)[..., None], P["prompt.null"], E_s)
    q = nx.reshape(nx.matmul(e_lc_u, P["prompt.wq"]), (B, 1, -1))
    k = nx.matmul(E_s, P["prompt.wk"])
    v = nx.matmul(E_s, P["prompt.wv"])
    a = nx.row_softmax(nx.matmul(q, nx.swap_last(k)) * (1.0 / np.sqrt(q.shape[-1])))
    out = nx.reshape(nx.matmul(nx.matmul(a, v), P["prompt.wo"]), (B, -1))
    return (out, a) if return_weights else out


def prompt_embedding(P, batch: Batch, e_lc_u: Tensor, cfg: ModelConfig) -> Tensor:
    """The decoder's first input row e_s, shape (B, d_model)."""
    if cfg.prompt == "pointwise":
        return _dense(P, "prompt.point", e_lc_u)
    E_s = location_context(P, batch.nb_attr)
    if cfg.prompt == "neighbor":
        return neighbor_prompt(P, e_lc_u, E_s, cfg, batch.nb_null)
    if np.any(batch.nb_null):
        E_s = nx.where_rows(batch.nb_null[..., None], P["prompt.null"], E_s)
    flat = nx.reshape(E_s, (E_s.shape[0], -1))
    return _dense(P, "prompt.mlp2", nx.silu(_dense(P, "prompt.mlp1", flat)))


def decoder_forward(P, prompt: Tensor, codes: np.ndarray, enc: EncoderOutput, cfg: ModelConfig) -> Tensor:
    """Causal decoder over [e_s, e_q1, ..., e_qm]; ``codes`` is (B, m) with 0 ≤ m ≤ T."""
    B = prompt.shape[0]
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim != 2 or codes.shape[0] != B or codes.shape[1] > cfg.n_levels:
        raise ValueError(f"codes must have shape (B, m) with m <= {cfg.n_levels}, got {codes.shape}")
    rows = [nx.reshape(prompt, (B, 1, -1))]
    for j in range(codes.shape[1]):
        rows.append(nx.gather_rows(P[f"dec.sid{j}"], codes[:, j:j + 1]))
    m = len(rows)
    H = nx.concat(rows, axis=1) + P["dec.position"][:m]
    causal = np.tril(np.ones((m, m), dtype=bool))[None, None]
    cross_mask = enc.mask[:, None, None, :]
    for k in range(cfg.n_blocks):
        pre = f"dec{k}"
        h = nx.rms_norm(H, P[pre + ".norm1"], cfg.norm_eps)
        H = H + attention(P, pre + ".self", h, h, cfg.n_heads, causal)
        H = H + attention(P, pre + ".cross", nx.rms_norm(H, P[pre + ".norm2"], cfg.norm_eps),
                          enc.states, cfg.n_heads, cross_mask)
        H = H + ffn(P, pre, nx.rms_norm(H, P[pre + ".norm3"], cfg.norm_eps))
    return H


def head_logits(P, h: Tensor, level: int, cfg: ModelConfig) -> Tensor:
    return _dense(P, f"head{level}", nx.rms_norm(h, P["head.norm"], cfg.norm_eps))


def digit_log_probs(P, H: Tensor, cfg: ModelConfig) -> list[Tensor]:
    """Per-level log-probabilities from decoder rows 0..T-1; the last row is unused."""
    return [nx.log_softmax(head_logits(P, H[:, j], j, cfg)) for j in range(cfg.n_levels)]


# -- full passes ---------------------------------------------------------------------------

@dataclass
class Context:
    """Encoder output and prompt for a batch; reused across decoding calls."""
    enc: EncoderOutput
    prompt: Tensor

    def repeat(self, k: int) -> "Context":
        return Context(self.enc.repeat(k), Tensor(np.repeat(self.prompt.data, k, axis=0)))


def encode_context(P, batch: Batch, cfg: ModelConfig) -> Context:
    z, e_lc, e_lc_u = embed_batch(P, batch, cfg)
    enc = encoder_forward(P, z, e_lc, e_lc_u, cfg, batch.mask)
    return Context(enc, prompt_embedding(P, batch, e_lc_u, cfg))


def sid_logprob(P, ctx: Context, sids: np.ndarray, cfg: ModelConfig) -> Tensor:
    """ln p(sid | context) per row via one teacher-forced pass, shape (B,)."""
    sids = np.asarray(sids, dtype=np.int64)
    H = decoder_forward(P, ctx.prompt, sids, ctx.enc, cfg)
    lps = digit_log_probs(P, H, cfg)
    total = nx.pick(lps[0], sids[:, 0])
    for j in range(1, cfg.n_levels):
        total = total + nx.pick(lps[j], sids[:, j])
    return total


def ntp_losses(P, batch: Batch, cfg: ModelConfig, ctx: Context | None = None) -> Tensor:
    """Per-sample next-token-prediction loss Σ_j -ln ŷ^j[q_j], shape (B,)."""
    ctx = ctx or encode_context(P, batch, cfg)
    return sid_logprob(P, ctx, batch.targets, cfg) * -1.0


def ntp_loss(P, batch: Batch, cfg: ModelConfig) -> Tensor:
    return nx.mean(ntp_losses(P, batch, cfg))


def sequence_logprob(params, featurizer: Featurizer, seq, sid, cfg: ModelConfig) -> float:
    P = as_tensors(params)
    batch = featurizer.batch([seq])
    ctx = encode_context(P, batch, cfg)
    return float(sid_logprob(P, ctx, np.asarray(sid)[None], cfg).data[0])


def next_digit_log_probs(P, ctx: Context, prefix: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Log-distribution of the next digit after ``prefix`` (B, m), shape (B, N_c)."""
    H = decoder_forward(P, ctx.prompt, prefix, ctx.enc, cfg)
    m = prefix.shape[1]
    return nx.log_softmax(head_logits(P, H[:, m], m, cfg)).data
