from types import SimpleNamespace

import numpy as np
import pytest

from georec import data
from georec import model as M


def tiny_config(catalog, **kw) -> M.ModelConfig:
    base = dict(n_videos=len(catalog), n_cells=len(catalog.cell_vocab) + 1, attr_dim=catalog.attr_dim,
                n_codes=8, d_video=4, d_lid=4, d_lc=4, d_model=8, n_heads=2, d_ff=16, n_blocks=1,
                d_prompt=4, gate_hidden=4, max_watch=4, max_click=2, max_pay=2)
    base.update(kw)
    return M.ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny():
    wc = data.WorldConfig(n_users=6, n_videos=40, n_cells=6, n_categories=4, content_dim=6,
                          context_dim=4, events_per_user=8, seed=3)
    ds = data.synthetic_dataset(wc)
    cat = ds.catalog
    vids = cat.video_ids
    seq = data.BehaviorSequence(
        watch=[(vids[0], cat.cells[0], 1.0), (vids[5], cat.cells[5], 2.0), (vids[9], cat.cells[9], 3.0)],
        click=[(vids[5], cat.cells[5], 7.0)],
        user_cell=cat.cells[12])
    seq2 = data.BehaviorSequence(watch=[(vids[3], cat.cells[3], 1.0)], pay=[(vids[7], cat.cells[7], 9.0)],
                                 user_cell=cat.cells[30])
    sid_rng = np.random.default_rng(0)
    sids = {v: tuple(int(c) for c in sid_rng.integers(0, 8, 3)) for v in vids}
    return SimpleNamespace(ds=ds, catalog=cat, seq=seq, seq2=seq2, sids=sids, config=lambda **kw: tiny_config(cat, **kw))
