"""Ranking metrics and evaluation reports."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Hashable, NamedTuple, Sequence

import numpy as np

from . import generate as G
from . import geo

DEFAULT_KS = (5, 10, 20)
PROTOCOL = "next-item, full-corpus ranking, single held-out target per event"


class EvalError(ValueError):
    pass


def _rank(ranked: Sequence, target) -> int | None:
    for i, v in enumerate(ranked):
        if v == target:
            return i + 1
    return None


def recall_at_k(ranked: Sequence, target: Hashable, k: int) -> int:
    if k < 1:
        raise EvalError("K must be at least 1")
    r = _rank(ranked, target)
    return int(r is not None and r <= k)


def ndcg_at_k(ranked: Sequence, target: Hashable, k: int) -> float:
    if k < 1:
        raise EvalError("K must be at least 1")
    r = _rank(ranked, target)
    if r is None or r > k:
        return 0.0
    return 1.0 / math.log2(r + 1)


def score_rankings(rankings: Sequence[Sequence], targets: Sequence, ks=DEFAULT_KS) -> tuple[dict, dict]:
    """Mean Recall@K and NDCG@K over events."""
    if not rankings:
        raise EvalError("no events to evaluate")
    recall = {k: float(np.mean([recall_at_k(r, t, k) for r, t in zip(rankings, targets)])) for k in ks}
    ndcg = {k: float(np.mean([ndcg_at_k(r, t, k) for r, t in zip(rankings, targets)])) for k in ks}
    return recall, ndcg


class DistanceProfile(NamedTuple):
    mean_km: float
    median_km: float
    within_d: float


def distance_profile_km(distances: Sequence[float], D: float = 10.0) -> DistanceProfile:
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise EvalError("empty recommendation list")
    return DistanceProfile(float(d.mean()), float(np.median(d)), float((d <= D).mean()))


def distance_profile(cells: Sequence[str], user_cell: str, D: float = 10.0) -> DistanceProfile:
    return distance_profile_km([geo.cell_distance_km(c, user_cell) for c in cells], D)


@dataclass
class EvalReport:
    recall: dict
    ndcg: dict
    mean_km: float
    median_km: float
    within_d: float
    mean_gmv: float
    n_events: int
    config_hash: str = ""
    seed: int = 0
    protocol: str = PROTOCOL
    rows: list = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("rows")
        d["recall"] = {str(k): v for k, v in self.recall.items()}
        d["ndcg"] = {str(k): v for k, v in self.ndcg.items()}
        for k, v in d.items():
            if isinstance(v, float) and math.isnan(v):
                d[k] = None
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        ks = sorted(self.recall)
        lines = [f"# {self.protocol}", f"# events={self.n_events} seed={self.seed} config={self.config_hash}",
                 "metric     " + "".join(f"{'@' + str(k):>10}" for k in ks),
                 "Recall     " + "".join(f"{self.recall[k]:>10.4f}" for k in ks),
                 "NDCG       " + "".join(f"{self.ndcg[k]:>10.4f}" for k in ks),
                 f"distance km: mean {self.mean_km:.4f} median {self.median_km:.4f} "
                 f"within D {self.within_d:.4f}",
                 f"GMV proxy: mean {self.mean_gmv:.4f}"]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["user", "target", "rank", "mean_km"])
        for row in self.rows:
            w.writerow(row)
        return buf.getvalue()


def run_eval(params, cfg, featurizer, events, index, catalog, ks=DEFAULT_KS, n: int | None = None,
             beam_width: int | None = None, proxy=None, D: float = 10.0, profile_k: int = 10,
             config_hash: str = "", seed: int = 0, batch_size: int = 64) -> EvalReport:
    """Beam-generate for every event, map to videos, and score against the held-out target."""
    if not events:
        raise EvalError("empty test set")
    ks = tuple(sorted(ks))
    n = n or ks[-1]
    results = G.generate_for(params, featurizer, [e.history for e in events], cfg, n, beam_width, batch_size)
    rankings, dists, gmvs, rows = [], [], [], []
    for e, res in zip(events, results):
        ranked = G.sids_to_videos(res, index, ks[-1])
        rankings.append(ranked)
        top = ranked[:profile_k]
        d = [geo.cell_distance_km(catalog.cells[catalog.row_of[v]], e.user_cell) for v in top]
        dists.extend(d)
        if proxy is not None:
            gmvs.extend(proxy(v, e.history, e.user_cell) for v in top)
        r = _rank(ranked, e.target)
        rows.append([e.user_id, e.target, r if r is not None else "", f"{np.mean(d):.6f}" if d else ""])
    recall, ndcg = score_rankings(rankings, [e.target for e in events], ks)
    prof = distance_profile_km(dists, D) if dists else DistanceProfile(float("nan"), float("nan"), 0.0)
    return EvalReport(recall, ndcg, prof.mean_km, prof.median_km, prof.within_d,
                      float(np.mean(gmvs)) if gmvs else float("nan"), len(events), config_hash, seed,
                      rows=rows)
