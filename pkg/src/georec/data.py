"""Synthetic local-life worlds, check-in ingestion, and chronological splits."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Hashable, Iterable, NamedTuple

import numpy as np

from . import geo

BEHAVIORS = ("watch", "click", "pay")
_BEHAVIOR_RANK = {b: i for i, b in enumerate(BEHAVIORS)}
KM_PER_DEGREE = geo.EARTH_RADIUS_KM * math.pi / 180.0


class DataError(ValueError):
    pass


class IngestError(DataError):
    pass


class InteractionRecord(NamedTuple):
    user_id: Hashable
    video_id: Hashable
    cell: str
    behavior: str
    timestamp: float


def record_key(r: InteractionRecord):
    return (r.timestamp, _BEHAVIOR_RANK[r.behavior])


@dataclass
class WorldConfig:
    n_users: int = 64
    n_videos: int = 800
    n_cells: int = 24  # store districts
    n_categories: int = 8
    content_dim: int = 16
    context_dim: int = 8
    lat_min: float = 39.85
    lat_max: float = 40.05
    lon_min: float = 116.25
    lon_max: float = 116.50
    n_interest_clusters: int = 4
    precision: int = geo.DEFAULT_PRECISION
    seed: int = 0
    # spatial layout
    store_spread_km: float = 0.6
    home_category_bias: float = 0.8
    context_length_km: float = 3.0
    # behavior simulation
    events_per_user: int = 20
    affinity_scale: float = 4.0
    distance_decay: float = 0.8
    markov_bonus: float = 1.5
    repeat_penalty: float = 2.0
    anchor_switch_prob: float = 0.3
    anchor_taste_mix: float = 0.0  # weight of each anchor's own taste against the user's global taste
    explore_prob: float = 0.0  # chance an event happens near a random district instead of an anchor
    location_jitter_km: float = 0.4
    click_slope: float = 3.0
    click_bias: float = -1.0
    pay_slope: float = 3.0
    pay_bias: float = -2.0

    def __post_init__(self):
        for name in ("n_users", "n_videos", "n_cells", "n_categories", "content_dim",
                     "context_dim", "n_interest_clusters", "events_per_user"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")
        if not 0.0 <= self.anchor_taste_mix <= 1.0:
            raise DataError("anchor_taste_mix must lie in [0, 1]")
        if not 0.0 <= self.explore_prob <= 1.0:
            raise DataError("explore_prob must lie in [0, 1]")
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise DataError("empty geographic extent")
        geo.check_coordinate(self.lat_min, self.lon_min)
        geo.check_coordinate(self.lat_max, self.lon_max)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class Catalog:
    """Videos with their store locations, content vectors and location contexts.

    ``cell_attributes`` gives the fixed attribute vector of any geohash cell:
    category histogram of stores in the cell, coordinates normalized to the
    extent, and a smooth spatial embedding of the cell center.
    """

    def __init__(self, video_ids, category, coords, content, *, n_categories, extent,
                 precision=geo.DEFAULT_PRECISION, context_dim=8, context_seed=0,
                 context_length_km=3.0):
        self.video_ids = list(video_ids)
        self.category = np.asarray(category, dtype=np.int64)
        self.coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        self.content = np.asarray(content, dtype=np.float64)
        self.n_categories = int(n_categories)
        self.extent = tuple(float(v) for v in extent)
        self.precision = int(precision)
        self.context_dim = int(context_dim)
        self.context_seed = int(context_seed)
        self.context_length_km = float(context_length_km)
        self.cells = [geo.encode(lat, lon, self.precision) for lat, lon in self.coords]
        self.row_of = {v: i for i, v in enumerate(self.video_ids)}
        if len(self.row_of) != len(self.video_ids):
            raise DataError("duplicate video ids in catalog")

        rng = np.random.default_rng([self.context_seed, 7919])
        self._freq = rng.normal(size=(self.context_dim, 2)) / self.context_length_km
        self._phase = rng.uniform(0, 2 * np.pi, size=self.context_dim)
        self._hist: dict[str, np.ndarray] = {}
        for c, cell in zip(self.category, self.cells):
            h = self._hist.setdefault(cell, np.zeros(self.n_categories))
            h[c] += 1
        self.cell_vocab = sorted(self._hist)
        self.cell_id = {c: i + 1 for i, c in enumerate(self.cell_vocab)}  # 0 = unknown cell
        self.loc_ctx = np.array([self.location_context(c) for c in self.cells]).reshape(-1, self.context_dim)
        self._attr_cache: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.video_ids)

    @property
    def attr_dim(self) -> int:
        return self.n_categories + 2 + self.context_dim

    def _plane_km(self, lat, lon) -> np.ndarray:
        lat0 = self.extent[0]
        return np.array([(lat - lat0) * KM_PER_DEGREE,
                         (lon - self.extent[2]) * KM_PER_DEGREE * math.cos(math.radians(lat0))])

    def spatial_embedding(self, lat: float, lon: float) -> np.ndarray:
        z = self._freq @ self._plane_km(lat, lon) + self._phase
        return np.sqrt(2.0 / self.context_dim) * np.cos(z)

    def location_context(self, cell: str) -> np.ndarray:
        c = geo.decode_center(cell)
        return self.spatial_embedding(c.lat, c.lon)

    def cell_attributes(self, cell: str) -> np.ndarray:
        a = self._attr_cache.get(cell)
        if a is None:
            hist = self._hist.get(cell)
            hist = np.zeros(self.n_categories) if hist is None else hist / hist.sum()
            c = geo.decode_center(cell)
            lat_lo, lat_hi, lon_lo, lon_hi = self.extent
            norm = np.array([2 * (c.lat - lat_lo) / max(lat_hi - lat_lo, 1e-9) - 1,
                             2 * (c.lon - lon_lo) / max(lon_hi - lon_lo, 1e-9) - 1])
            a = np.concatenate([hist, norm, self.location_context(cell)])
            self._attr_cache[cell] = a
        return a

    def video_distance_km(self, video_id, cell: str) -> float:
        return geo.cell_distance_km(self.cells[self.row_of[video_id]], cell)

    def to_meta(self) -> dict:
        return {"n_categories": self.n_categories, "extent": list(self.extent),
                "precision": self.precision, "context_dim": self.context_dim,
                "context_seed": self.context_seed, "context_length_km": self.context_length_km}


@dataclass
class Dataset:
    catalog: Catalog
    records: dict  # user -> chronological list[InteractionRecord]
    meta: dict = field(default_factory=dict)

    def all_records(self) -> list[InteractionRecord]:
        return [r for u in self.records for r in self.records[u]]


@dataclass
class World:
    catalog: Catalog
    district_centers: np.ndarray  # (n_cells, 2)
    district_category: np.ndarray
    category_means: np.ndarray
    cluster_prefs: np.ndarray
    category_next: np.ndarray


def generate_world(cfg: WorldConfig) -> World:
    rng = np.random.default_rng([cfg.seed, 1])
    lat_span, lon_span = cfg.lat_max - cfg.lat_min, cfg.lon_max - cfg.lon_min
    centers = np.column_stack([cfg.lat_min + rng.uniform(0.1, 0.9, cfg.n_cells) * lat_span,
                               cfg.lon_min + rng.uniform(0.1, 0.9, cfg.n_cells) * lon_span])
    district_cat = np.arange(cfg.n_cells) % cfg.n_categories
    rng.shuffle(district_cat)
    means = rng.normal(scale=1.0 / np.sqrt(cfg.content_dim), size=(cfg.n_categories, cfg.content_dim))

    category = rng.integers(cfg.n_categories, size=cfg.n_videos)
    coords = np.empty((cfg.n_videos, 2))
    km_lat = 1.0 / KM_PER_DEGREE
    km_lon = 1.0 / (KM_PER_DEGREE * math.cos(math.radians(cfg.lat_min)))
    for i, c in enumerate(category):
        home = np.flatnonzero(district_cat == c)
        if len(home) and rng.random() < cfg.home_category_bias:
            d = home[rng.integers(len(home))]
        else:
            d = rng.integers(cfg.n_cells)
        off = rng.normal(scale=cfg.store_spread_km, size=2)
        coords[i] = (np.clip(centers[d, 0] + off[0] * km_lat, cfg.lat_min, cfg.lat_max),
                     np.clip(centers[d, 1] + off[1] * km_lon, cfg.lon_min, cfg.lon_max))
    content = means[category] + rng.normal(scale=0.35 / np.sqrt(cfg.content_dim),
                                           size=(cfg.n_videos, cfg.content_dim))
    catalog = Catalog(range(cfg.n_videos), category, coords, content,
                      n_categories=cfg.n_categories,
                      extent=(cfg.lat_min, cfg.lat_max, cfg.lon_min, cfg.lon_max),
                      precision=cfg.precision, context_dim=cfg.context_dim,
                      context_seed=cfg.seed, context_length_km=cfg.context_length_km)
    cluster_prefs = rng.dirichlet(np.full(cfg.n_categories, 0.5), size=cfg.n_interest_clusters)
    category_next = rng.permutation(cfg.n_categories)
    return World(catalog, centers, district_cat, means, cluster_prefs, category_next)


def _offset(lat, lon, dkm, cfg):
    lat2 = lat + dkm[0] / KM_PER_DEGREE
    lon2 = lon + dkm[1] / (KM_PER_DEGREE * math.cos(math.radians(lat)))
    return (float(np.clip(lat2, cfg.lat_min, cfg.lat_max)),
            float(np.clip(lon2, cfg.lon_min, cfg.lon_max)))


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def simulate_interactions(world: World, cfg: WorldConfig, seed: int | None = None) -> dict:
    """Per-user chronological watch/click/pay logs.

    Watches are drawn from softmax(affinity - distance decay + sequential
    bonus); clicks follow watches and pays follow clicks, so the behavior
    chain holds by construction.
    """
    seed = cfg.seed if seed is None else seed
    cat = world.catalog
    unit = cat.content / np.linalg.norm(cat.content, axis=1, keepdims=True)
    lats, lons = cat.coords[:, 0], cat.coords[:, 1]
    logs = {}
    for u in range(cfg.n_users):
        rng = np.random.default_rng([seed, 2, u])
        cluster = rng.integers(cfg.n_interest_clusters)
        pref = rng.dirichlet(8.0 * world.cluster_prefs[cluster] + 0.05)
        taste = pref @ world.category_means
        taste = taste / np.linalg.norm(taste)
        anchors = []
        for _ in range(2):
            d = world.district_centers[rng.integers(len(world.district_centers))]
            anchors.append(_offset(d[0], d[1], rng.normal(scale=1.0, size=2), cfg))
        # a separate stream keeps the anchor-free world identical when the mix is 0
        local_rng = np.random.default_rng([seed, 4, u])
        affinities = []
        for _ in anchors:
            local = local_rng.dirichlet(8.0 * world.cluster_prefs[cluster] + 0.05) @ world.category_means
            mixed = (1 - cfg.anchor_taste_mix) * taste + cfg.anchor_taste_mix * local / np.linalg.norm(local)
            affinities.append(unit @ (mixed / np.linalg.norm(mixed)))
        global_affinity = unit @ taste
        explore_rng = np.random.default_rng([seed, 5, u])
        anchor = 0
        last_cat = None
        recent = np.zeros(len(cat))
        t = 1_600_000_000.0 + float(rng.uniform(0, 86400))
        recs = []
        for _ in range(cfg.events_per_user):
            if rng.random() < cfg.anchor_switch_prob:
                anchor = 1 - anchor
            lat, lon = _offset(*anchors[anchor], rng.normal(scale=cfg.location_jitter_km, size=2), cfg)
            affinity = affinities[anchor]
            if cfg.explore_prob and explore_rng.random() < cfg.explore_prob:
                d = world.district_centers[explore_rng.integers(len(world.district_centers))]
                lat, lon = _offset(d[0], d[1], explore_rng.normal(scale=1.0, size=2), cfg)
                affinity = global_affinity
            cell = geo.encode(lat, lon, cat.precision)
            score = cfg.affinity_scale * affinity - cfg.distance_decay * geo.distances_km(lat, lon, lats, lons)
            score = score - cfg.repeat_penalty * recent
            if last_cat is not None:
                score = score + cfg.markov_bonus * (cat.category == world.category_next[last_cat])
            p = np.exp(score - score.max())
            v = int(rng.choice(len(cat), p=p / p.sum()))
            recs.append(InteractionRecord(u, cat.video_ids[v], cell, "watch", t))
            if rng.random() < _sigmoid(cfg.click_slope * affinity[v] + cfg.click_bias):
                recs.append(InteractionRecord(u, cat.video_ids[v], cell, "click", t + 5.0))
                if rng.random() < _sigmoid(cfg.pay_slope * affinity[v] + cfg.pay_bias):
                    recs.append(InteractionRecord(u, cat.video_ids[v], cell, "pay", t + 30.0))
            recent *= 0.5
            recent[v] += 1.0
            last_cat = int(cat.category[v])
            t += 60.0 + float(rng.exponential(6 * 3600.0))
        logs[u] = recs
    return logs


def synthetic_dataset(cfg: WorldConfig) -> Dataset:
    world = generate_world(cfg)
    logs = simulate_interactions(world, cfg)
    return Dataset(world.catalog, logs, {"source": "synthetic", "seed": cfg.seed,
                                         "world_config": cfg.to_dict()})


def check_behavior_chain(records: Iterable[InteractionRecord]) -> bool:
    """Every pay has an earlier click and every click an earlier watch of the same video."""
    seen = {b: set() for b in BEHAVIORS}
    for r in sorted(records, key=record_key):
        key = (r.user_id, r.video_id)
        if r.behavior == "click" and key not in seen["watch"]:
            return False
        if r.behavior == "pay" and key not in seen["click"]:
            return False
        seen[r.behavior].add(key)
    return True


# -- check-in ingestion --------------------------------------------------------

class IngestResult(NamedTuple):
    records: list
    catalog: Catalog
    n_lines: int
    n_malformed: int
    reasons: dict


def _parse_time(s: str) -> float:
    try:
        return float(s)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(s.replace("Z", "+00:00"))
    except ValueError:
        raise ValueError(f"bad timestamp {s!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def ingest_checkins(path, precision: int = geo.DEFAULT_PRECISION, max_malformed: float = 0.10,
                    context_dim: int = 8) -> IngestResult:
    """Tab-separated ``user, poi, lat, lon, timestamp[, category]`` lines.

    Every check-in becomes a watch record at the POI's cell. POIs become
    videos whose content vector is a one-hot of their category.
    """
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise IngestError(f"cannot read {path}: {e}") from e
    rows, reasons = [], {}
    n_lines = 0
    for line in lines:
        if not line.strip() or line.startswith("#"):
            continue
        n_lines += 1
        parts = line.rstrip("\n").split("\t")
        try:
            if len(parts) not in (5, 6):
                raise ValueError("field count")
            user, poi = parts[0].strip(), parts[1].strip()
            if not user or not poi:
                raise ValueError("empty id")
            lat, lon = float(parts[2]), float(parts[3])
            geo.check_coordinate(lat, lon)
            ts = _parse_time(parts[4].strip())
            category = parts[5].strip() if len(parts) == 6 else ""
        except (ValueError, geo.GeoError) as e:
            key = str(e).split(" (")[0].split(" '")[0]
            reasons[key] = reasons.get(key, 0) + 1
            continue
        rows.append((user, poi, lat, lon, ts, category))
    n_bad = n_lines - len(rows)
    if n_lines == 0:
        raise IngestError(f"{path}: no check-in lines")
    if n_bad / n_lines > max_malformed:
        raise IngestError(f"{path}: {n_bad} of {n_lines} lines malformed ({reasons})")

    poi_first: dict[str, tuple] = {}
    for user, poi, lat, lon, ts, category in rows:
        poi_first.setdefault(poi, (lat, lon, category))
    categories = sorted({v[2] for v in poi_first.values()})
    cat_of = {c: i for i, c in enumerate(categories)}
    pois = sorted(poi_first)
    coords = np.array([poi_first[p][:2] for p in pois])
    cats = np.array([cat_of[poi_first[p][2]] for p in pois])
    content = np.eye(len(categories))[cats]
    pad = 0.01
    extent = (max(coords[:, 0].min() - pad, -90.0), min(coords[:, 0].max() + pad, 90.0),
              max(coords[:, 1].min() - pad, -180.0), min(coords[:, 1].max() + pad, 180.0))
    catalog = Catalog(pois, cats, coords, content, n_categories=len(categories), extent=extent,
                      precision=precision, context_dim=context_dim)
    records = [InteractionRecord(user, poi, catalog.cells[catalog.row_of[poi]], "watch", ts)
               for user, poi, lat, lon, ts, category in rows]
    records.sort(key=lambda r: (str(r.user_id), r.timestamp, str(r.video_id)))
    return IngestResult(records, catalog, n_lines, n_bad, reasons)


def dataset_from_checkins(path, precision: int = geo.DEFAULT_PRECISION, **kw) -> Dataset:
    res = ingest_checkins(path, precision, **kw)
    by_user: dict = {}
    for r in res.records:
        by_user.setdefault(r.user_id, []).append(r)
    return Dataset(res.catalog, by_user, {"source": str(path), "n_lines": res.n_lines,
                                          "n_malformed": res.n_malformed})


# -- splitting ----------------------------------------------------------------

@dataclass
class Split:
    train: dict
    valid: dict
    test: dict
    dropped_users: list

    def part(self, name: str) -> dict:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


def _interactions(records: list[InteractionRecord]) -> list[list[InteractionRecord]]:
    """Group each watch with the clicks and pays that follow it."""
    groups: list[list[InteractionRecord]] = []
    open_group: dict = {}
    for r in sorted(records, key=record_key):
        if r.behavior == "watch" or r.video_id not in open_group:
            g = [r]
            groups.append(g)
            open_group[r.video_id] = g
        else:
            open_group[r.video_id].append(r)
    return groups


def split_sequences(records: dict, ratios=(0.8, 0.1, 0.1), min_interactions: int = 5) -> Split:
    if not records:
        raise DataError("no records to split")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    train, valid, test, dropped = {}, {}, {}, []
    for user, recs in records.items():
        groups = _interactions(recs)
        n = len(groups)
        if n < min_interactions:
            dropped.append(user)
            continue
        n_train = math.floor(ratios[0] * n + 1e-9)
        n_valid = math.floor(ratios[1] * n + 1e-9)
        flat = lambda gs: [r for g in gs for r in g]  # noqa: E731
        train[user] = flat(groups[:n_train])
        valid[user] = flat(groups[n_train:n_train + n_valid])
        test[user] = flat(groups[n_train + n_valid:])
    return Split(train, valid, test, dropped)


# -- model inputs ---------------------------------------------------------------

@dataclass
class BehaviorSequence:
    watch: list = field(default_factory=list)  # (video_id, cell, timestamp)
    click: list = field(default_factory=list)
    pay: list = field(default_factory=list)
    user_cell: str = ""

    def __len__(self) -> int:
        return len(self.watch) + len(self.click) + len(self.pay)


@dataclass
class Event:
    user_id: Hashable
    history: BehaviorSequence
    target: Hashable
    timestamp: float

    @property
    def user_cell(self) -> str:
        return self.history.user_cell


def history_before(timeline: list[InteractionRecord], stop: int, user_cell: str,
                   max_lengths=(32, 8, 4)) -> BehaviorSequence:
    lists = {b: [] for b in BEHAVIORS}
    for r in timeline[:stop]:
        lists[r.behavior].append((r.video_id, r.cell, r.timestamp))
    w, c, p = max_lengths
    return BehaviorSequence(lists["watch"][-w:] if w else [], lists["click"][-c:] if c else [],
                            lists["pay"][-p:] if p else [], user_cell)


def make_events(split: Split, part: str, max_lengths=(32, 8, 4)) -> list[Event]:
    """Next-item events: each watch in ``part`` with every earlier record as history."""
    events = []
    target_part = split.part(part)
    for user in target_part:
        timeline = split.train.get(user, []) + split.valid.get(user, []) + split.test.get(user, [])
        timeline = sorted(timeline, key=record_key)
        targets = set(id(r) for r in target_part[user] if r.behavior == "watch")
        for i, r in enumerate(timeline):
            if id(r) not in targets or i == 0:
                continue
            hist = history_before(timeline, i, r.cell, max_lengths)
            if len(hist) == 0:
                continue
            events.append(Event(user, hist, r.video_id, r.timestamp))
    return events


def popularity(records: dict) -> dict:
    counts: dict = {}
    for recs in records.values():
        for r in recs:
            if r.behavior == "watch":
                counts[r.video_id] = counts.get(r.video_id, 0) + 1
    return counts


# -- persistence ------------------------------------------------------------------

def save_dataset(ds: Dataset, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cat = ds.catalog
    with open(out / "videos.jsonl", "w") as f:
        for i, vid in enumerate(cat.video_ids):
            f.write(json.dumps({"video_id": vid, "category": int(cat.category[i]),
                                "lat": float(cat.coords[i, 0]), "lon": float(cat.coords[i, 1]),
                                "cell": cat.cells[i], "content": [float(x) for x in cat.content[i]],
                                "loc_ctx": [float(x) for x in cat.loc_ctx[i]]}) + "\n")
    n_inter = 0
    with open(out / "interactions.jsonl", "w") as f:
        for user, recs in ds.records.items():
            for r in recs:
                f.write(json.dumps({"user": r.user_id, "video": r.video_id, "cell": r.cell,
                                    "behavior": r.behavior, "ts": r.timestamp}) + "\n")
                n_inter += 1
    manifest = {"n_users": len(ds.records), "n_videos": len(cat), "n_interactions": n_inter,
                "catalog": cat.to_meta(), "meta": ds.meta,
                "config_hash": config_hash(ds.meta)}
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(in_dir) -> Dataset:
    d = Path(in_dir)
    try:
        manifest = json.loads((d / "dataset.json").read_text())
        video_rows = [json.loads(line) for line in open(d / "videos.jsonl")]
        inter_rows = [json.loads(line) for line in open(d / "interactions.jsonl")]
    except FileNotFoundError as e:
        raise DataError(f"dataset incomplete in {d}: {e.filename}") from e
    m = manifest["catalog"]
    catalog = Catalog([r["video_id"] for r in video_rows], [r["category"] for r in video_rows],
                      [(r["lat"], r["lon"]) for r in video_rows],
                      np.array([r["content"] for r in video_rows]),
                      n_categories=m["n_categories"], extent=m["extent"], precision=m["precision"],
                      context_dim=m["context_dim"], context_seed=m["context_seed"],
                      context_length_km=m["context_length_km"])
    records: dict = {}
    for r in inter_rows:
        records.setdefault(r["user"], []).append(
            InteractionRecord(r["user"], r["video"], r["cell"], r["behavior"], r["ts"]))
    return Dataset(catalog, records, manifest.get("meta", {}))
