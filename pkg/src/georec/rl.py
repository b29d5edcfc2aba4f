"""Rewards, preference pairs, DPO and the combined post-training objective."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from . import geo
from . import model as M
from . import numerics as nx
from .generate import GenerationResult, generate_for
from .train import loss_and_grads


class RewardError(ValueError):
    pass


@dataclass(frozen=True)
class RewardConfig:
    D: float = 10.0  # km
    dist_floor: float = 0.1  # km
    w_geo: float = 0.5
    w_gmv: float = 0.5

    def __post_init__(self):
        if not self.D > 0 or not self.dist_floor > 0:
            raise RewardError("D and dist_floor must be positive")
        if self.w_geo < 0 or self.w_gmv < 0 or self.w_geo + self.w_gmv <= 0:
            raise RewardError("reward weights must be nonnegative with a positive sum")


def geo_reward_km(d: float, cfg: RewardConfig) -> float:
    if d > cfg.D:
        return 0.0
    return 1.0 / max(d, cfg.dist_floor)


def geo_reward(video_cell: str, user_cell: str, cfg: RewardConfig) -> float:
    return geo_reward_km(geo.cell_distance_km(video_cell, user_cell), cfg)


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


@dataclass(frozen=True)
class GmvProxy:
    """Logistic score over content affinity, distance decay and category match.

    The user profile is the pay history; it falls back to clicks, then
    watches, when the user has not paid yet.
    """
    catalog: object = field(repr=False)
    w_affinity: float = 3.0
    w_distance: float = 2.0
    w_category: float = 1.0
    bias: float = -3.0
    sigma_km: float = 2.0

    def _profile(self, seq):
        items = seq.pay or seq.click or seq.watch
        rows = [self.catalog.row_of[it[0]] for it in items]
        if not rows:
            return None, -1
        mean = self.catalog.content[rows].mean(axis=0)
        cats = np.bincount(self.catalog.category[rows], minlength=self.catalog.n_categories)
        return mean, int(np.argmax(cats))

    def __call__(self, video_id: Hashable, seq, user_cell: str | None = None) -> float:
        cat = self.catalog
        row = cat.row_of[video_id]
        mean, top = self._profile(seq)
        aff = 0.0
        if mean is not None:
            v = cat.content[row]
            denom = np.linalg.norm(v) * np.linalg.norm(mean)
            aff = float(v @ mean / denom) if denom > 0 else 0.0
        d = geo.cell_distance_km(cat.cells[row], user_cell or seq.user_cell)
        z = (self.bias + self.w_affinity * aff + self.w_distance * math.exp(-d / self.sigma_km)
             + self.w_category * float(cat.category[row] == top))
        return _sigmoid(z)


@dataclass(frozen=True)
class ConstantProxy:
    value: float = 0.5

    def __call__(self, video_id, seq, user_cell=None) -> float:
        return self.value


def gmv_reward(video_id, seq, proxy) -> float:
    return float(proxy(video_id, seq, seq.user_cell))


def minmax(xs: Sequence[float]) -> np.ndarray:
    x = np.asarray(xs, dtype=np.float64)
    if x.size == 0:
        raise RewardError("empty candidate set")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def combined_rewards(geo_scores: Sequence[float], gmv_scores: Sequence[float], cfg: RewardConfig) -> np.ndarray:
    return cfg.w_geo * minmax(geo_scores) + cfg.w_gmv * minmax(gmv_scores)


def combined_reward(geo_score: float, gmv_score: float, set_geo: Sequence[float], set_gmv: Sequence[float],
                    cfg: RewardConfig) -> float:
    """Reward of one candidate, normalized against its candidate set."""
    g = minmax(list(set_geo) + [geo_score])[-1]
    m = minmax(list(set_gmv) + [gmv_score])[-1]
    return float(cfg.w_geo * g + cfg.w_gmv * m)


@dataclass
class PreferencePair:
    seq: object
    positive: tuple
    negative: tuple
    r_pos: float
    r_neg: float
    user: Hashable = None
    considered: tuple = ()

    def to_dict(self) -> dict:
        return {"user": self.user, "sid_pos": list(self.positive), "sid_neg": list(self.negative),
                "r_pos": self.r_pos, "r_neg": self.r_neg, "sids_considered": [list(s) for s in self.considered]}


def make_preference_pair(candidates: GenerationResult, rewards: Sequence[float], seq,
                         user: Hashable = None) -> PreferencePair | None:
    r = np.asarray(rewards, dtype=np.float64)
    if len(candidates) != len(r):
        raise RewardError(f"{len(candidates)} candidates but {len(r)} rewards")
    if len(r) < 2:
        raise RewardError("need at least two candidates")
    if r.max() == r.min():
        return None
    pos = int(np.argmax(r))  # first maximum: best beam rank wins ties
    neg = len(r) - 1 - int(np.argmin(r[::-1]))  # last minimum: worst beam rank
    return PreferencePair(seq, candidates.sids[pos], candidates.sids[neg], float(r[pos]), float(r[neg]),
                          user, tuple(candidates.sids))


def score_candidates(result: GenerationResult, seq, index, catalog, cfg: RewardConfig, proxy) -> np.ndarray:
    """Combined reward per candidate SID; a SID with no video earns zero raw reward."""
    geo_s, gmv_s = [], []
    for sid in result.sids:
        vids = index.lookup(sid)
        if not vids:
            geo_s.append(0.0)
            gmv_s.append(0.0)
            continue
        v = vids[0]
        geo_s.append(geo_reward(catalog.cells[catalog.row_of[v]], seq.user_cell, cfg))
        gmv_s.append(gmv_reward(v, seq, proxy))
    return combined_rewards(geo_s, gmv_s, cfg)


# -- losses -------------------------------------------------------------------------

def dpo_losses(P, ctx: M.Context, pos: np.ndarray, neg: np.ndarray, ref_pos: np.ndarray,
               ref_neg: np.ndarray, beta: float, cfg: M.ModelConfig) -> nx.Tensor:
    """-ln σ(β[(ln π(Q_p) - ln π_ref(Q_p)) - (ln π(Q_n) - ln π_ref(Q_n))]) per row."""
    if not beta > 0:
        raise RewardError("beta must be positive")
    lp = M.sid_logprob(P, ctx, pos, cfg)
    ln = M.sid_logprob(P, ctx, neg, cfg)
    margin = ((lp - ref_pos) - (ln - ref_neg)) * beta
    return nx.log_sigmoid(margin) * -1.0


def reference_logprobs(ref_params, batch: M.Batch, pos, neg, cfg: M.ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    R = M.as_tensors(ref_params)
    ctx = M.encode_context(R, batch, cfg)
    return (M.sid_logprob(R, ctx, pos, cfg).data.copy(), M.sid_logprob(R, ctx, neg, cfg).data.copy())


def dpo_loss(policy_params, ref_params, featurizer: M.Featurizer, pair: PreferencePair, beta: float,
             cfg: M.ModelConfig) -> float:
    batch = featurizer.batch([pair.seq])
    pos, neg = np.array([pair.positive]), np.array([pair.negative])
    ref_pos, ref_neg = reference_logprobs(ref_params, batch, pos, neg, cfg)
    P = M.as_tensors(policy_params)
    ctx = M.encode_context(P, batch, cfg)
    return float(dpo_losses(P, ctx, pos, neg, ref_pos, ref_neg, beta, cfg).data[0])


def combined_loss(P, batch: M.Batch, pos, neg, ref_pos, ref_neg, lam: float, beta: float,
                  cfg: M.ModelConfig):
    """Mean of L_ntp + λ·L_dpo over the batch; returns (loss, (ntp, dpo))."""
    if lam < 0:
        raise RewardError("lambda must be nonnegative")
    ctx = M.encode_context(P, batch, cfg)
    ntp = nx.mean(M.ntp_losses(P, batch, cfg, ctx))
    dpo = nx.mean(dpo_losses(P, ctx, pos, neg, ref_pos, ref_neg, beta, cfg))
    return ntp + dpo * lam, (ntp.item(), dpo.item())


def post_train_step(params, ref_params, opt, batch: M.Batch, pos, neg, lam: float, beta: float,
                    cfg: M.ModelConfig) -> tuple[float, float, float]:
    """One optimizer step on L_ntp + λ·L_dpo; ``batch.targets`` are the exposed SIDs."""
    pos, neg = np.asarray(pos, dtype=np.int64), np.asarray(neg, dtype=np.int64)
    ref_pos, ref_neg = reference_logprobs(ref_params, batch, pos, neg, cfg)
    loss, grads, (ntp, dpo) = loss_and_grads(
        params, lambda P: combined_loss(P, batch, pos, neg, ref_pos, ref_neg, lam, beta, cfg))
    opt.update(params, grads)
    return ntp, dpo, loss


# -- post-training rounds -------------------------------------------------------------

@dataclass
class RoundStats:
    round: int
    n_events: int
    n_pairs: int
    mean_candidate_km: float
    mean_reward: float
    ntp: float
    dpo: float
    skipped: bool = False


def build_pairs(ref_params, cfg: M.ModelConfig, featurizer: M.Featurizer, events, index, catalog,
                reward_cfg: RewardConfig, proxy, n_candidates: int = 8, beam_width: int | None = None):
    """Beam candidates from the reference model, scored into preference pairs.

    Returns ``(pairs, event_rows, mean candidate km, mean raw geo reward)``.
    """
    results = generate_for(ref_params, featurizer, [e.history for e in events], cfg, n_candidates, beam_width)
    pairs, rows, km, raw_geo = [], [], [], []
    for i, (e, res) in enumerate(zip(events, results)):
        for sid in res.sids:
            vids = index.lookup(sid)
            if vids:
                d = geo.cell_distance_km(catalog.cells[catalog.row_of[vids[0]]], e.user_cell)
                km.append(d)
                raw_geo.append(geo_reward_km(d, reward_cfg))
        pair = make_preference_pair(res, score_candidates(res, e.history, index, catalog, reward_cfg, proxy),
                                    e.history, e.user_id)
        if pair is not None:
            pairs.append(pair)
            rows.append(i)
    mean = lambda xs: float(np.mean(xs)) if xs else float("nan")  # noqa: E731
    return pairs, rows, mean(km), mean(raw_geo)


def post_train(params, cfg: M.ModelConfig, featurizer: M.Featurizer, events, sid_of, index, catalog,
               reward_cfg: RewardConfig, proxy, opt, rounds: int = 1, n_candidates: int = 8,
               beam_width: int | None = None, lam: float = 0.05, beta: float = 0.1, batch_size: int = 32,
               seed: int = 0, on_pairs=None) -> list[RoundStats]:
    """Rounds of: freeze reference, sample candidates, build pairs, one pass of L_ntp + λ·L_dpo."""
    stats = []
    for r in range(rounds):
        ref = {k: v.copy() for k, v in params.items()}
        pairs, rows, km, reward = build_pairs(ref, cfg, featurizer, events, index, catalog, reward_cfg,
                                              proxy, n_candidates, beam_width)
        if on_pairs is not None:
            on_pairs(r, pairs)
        if not pairs:
            warnings.warn(f"round {r}: no informative preference pairs, skipped")
            stats.append(RoundStats(r, len(events), 0, km, reward, float("nan"), float("nan"), True))
            continue
        order = np.random.default_rng([seed, 3, r]).permutation(len(pairs))
        ntps, dpos = [], []
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            seqs = [pairs[i].seq for i in idx]
            targets = [sid_of[events[rows[i]].target] for i in idx]
            batch = featurizer.batch(seqs, targets)
            ntp, dpo, _ = post_train_step(params, ref, opt, batch, [pairs[i].positive for i in idx],
                                          [pairs[i].negative for i in idx], lam, beta, cfg)
            ntps.append(ntp)
            dpos.append(dpo)
        stats.append(RoundStats(r, len(events), len(pairs), km, reward, float(np.mean(ntps)),
                                float(np.mean(dpos))))
    return stats
