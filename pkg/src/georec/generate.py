"""Beam search over semantic-ID digits and SID → video mapping."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import model as M


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class GenerationResult:
    sids: tuple[tuple[int, ...], ...]
    logprobs: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.sids)

    def to_dict(self) -> dict:
        return {"sids": [list(s) for s in self.sids], "logprobs": list(self.logprobs)}


def default_beam_width(n: int) -> int:
    return max(2 * n, 16)


def _select(prefix: np.ndarray, score: np.ndarray, keep: int) -> np.ndarray:
    """Indices of the ``keep`` best rows: score descending, then lexicographic prefix."""
    keys = [prefix[:, j] for j in range(prefix.shape[1] - 1, -1, -1)] + [-score]
    return np.lexsort(keys)[:keep]


def beam_search_batch(params, batch: M.Batch, cfg: M.ModelConfig, n: int,
                      beam_width: int | None = None) -> list[GenerationResult]:
    beam_width = default_beam_width(n) if beam_width is None else beam_width
    if n < 1 or beam_width < n:
        raise GenerationError(f"need beam_width >= N >= 1, got N={n}, beam_width={beam_width}")
    if n > cfg.n_codes ** cfg.n_levels:
        raise GenerationError(f"N={n} exceeds the number of semantic IDs")
    P = M.as_tensors(params)
    ctx = M.encode_context(P, batch, cfg)
    B, T = len(batch), cfg.n_levels
    prefixes = [np.zeros((1, 0), dtype=np.int64) for _ in range(B)]
    scores = [np.zeros(1) for _ in range(B)]
    for level in range(T):
        widths = [len(p) for p in prefixes]
        rep = np.repeat(np.arange(B), widths)
        flat_ctx = M.Context(
            M.EncoderOutput(M.Tensor(ctx.enc.states.data[rep]), M.Tensor(ctx.enc.loc_ctx.data[rep]),
                            ctx.enc.mask[rep]),
            M.Tensor(ctx.prompt.data[rep]))
        lp = M.next_digit_log_probs(P, flat_ctx, np.concatenate(prefixes), cfg)
        keep = beam_width if level < T - 1 else n
        start = 0
        for b in range(B):
            w = widths[b]
            total = (scores[b][:, None] + lp[start:start + w]).reshape(-1)
            start += w
            cand = np.concatenate([np.repeat(prefixes[b], cfg.n_codes, axis=0),
                                   np.tile(np.arange(cfg.n_codes), w)[:, None]], axis=1)
            top = _select(cand, total, keep)
            prefixes[b], scores[b] = cand[top], total[top]
    return [GenerationResult(tuple(tuple(int(c) for c in row) for row in p), tuple(float(s) for s in sc))
            for p, sc in zip(prefixes, scores)]


def beam_search(params, featurizer: M.Featurizer, seq, cfg: M.ModelConfig, n: int,
                beam_width: int | None = None) -> GenerationResult:
    return beam_search_batch(params, featurizer.batch([seq]), cfg, n, beam_width)[0]


def generate_for(params, featurizer: M.Featurizer, seqs: Sequence, cfg: M.ModelConfig, n: int,
                 beam_width: int | None = None, batch_size: int = 64) -> list[GenerationResult]:
    out: list[GenerationResult] = []
    for s in range(0, len(seqs), batch_size):
        out.extend(beam_search_batch(params, featurizer.batch(seqs[s:s + batch_size]), cfg, n, beam_width))
    return out


def sids_to_videos(result: GenerationResult, index, k: int, exclude: Iterable = ()) -> list:
    if k < 1:
        raise GenerationError("K must be at least 1")
    skip = set(exclude)
    out = []
    for sid in result.sids:
        for vid in index.lookup(sid):
            if vid in skip:
                continue
            skip.add(vid)
            out.append(vid)
            if len(out) == k:
                return out
    return out
