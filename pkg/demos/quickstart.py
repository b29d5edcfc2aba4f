"""End to end in one process: a small world, semantic IDs, a short pre-training run,
then beam-search recommendations for one user with their distances.

    python3 demos/quickstart.py [steps]
"""
import sys

import numpy as np

from georec import data, geo
from georec import evaluation as E
from georec import generate as G
from georec import model as M
from georec import tokenizer as tk
from georec import train as TR
from georec.optim import AdamW

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300

ds = data.synthetic_dataset(data.WorldConfig(n_users=32, seed=0))
cat = ds.catalog
feats = np.array([tk.build_feature(c, l) for c, l in zip(cat.content, cat.loc_ctx)])
stack = tk.train_codebooks(feats, 3, 64, seed=0)
codes, _ = tk.encode_all(feats, stack)
print("reconstruction error per level:", np.round(tk.reconstruction_error(stack, feats), 4))

split = data.split_sequences(ds.records)
index = tk.build_video_index(zip(cat.video_ids, codes), data.popularity(split.train))
sid_of = {v: tuple(int(c) for c in s) for v, s in zip(cat.video_ids, codes)}
print(f"{len(cat)} videos in {len(index)} semantic IDs (collision rate {index.collision_rate():.3f})")

cfg = M.ModelConfig(n_videos=len(cat), n_cells=len(cat.cell_vocab) + 1, attr_dim=cat.attr_dim)
params = M.init_params(cfg, 0)
fz = M.Featurizer(cat, cfg)
train_data = TR.prepare(fz, data.make_events(split, "train"), sid_of)
log = TR.pretrain(params, cfg, train_data, AdamW(lr=1e-3), steps, 32, seed=0)
print(f"NTP loss {log.losses[0]:.3f} -> {np.mean(log.losses[-20:]):.3f} after {steps} steps")

events = data.make_events(split, "test")
report = E.run_eval(params, cfg, fz, events, index, cat, ks=(5, 10, 20))
print(report.to_text())

e = events[0]
ranked = G.sids_to_videos(G.beam_search(params, fz, e.history, cfg, 10), index, 5)
print(f"user {e.user_id} at cell {e.user_cell}, next watched video {e.target}")
for rank, vid in enumerate(ranked, 1):
    km = geo.cell_distance_km(cat.cells[cat.row_of[vid]], e.user_cell)
    print(f"  {rank}. video {vid:>4}  category {cat.category[cat.row_of[vid]]}  {km:5.2f} km"
          + ("  <- target" if vid == e.target else ""))
