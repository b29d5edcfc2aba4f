"""Experiment commands: gendata, tokenize, pretrain, posttrain, eval and ablate.

Every command reads its inputs from and writes its artifacts to one output
directory, guarded by a lockfile, and records a manifest with the config hash
and artifact checksums. Artifacts carry no timestamps, so re-runs with the same
config and seed are byte-identical.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import warnings
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from . import data
from . import evaluation as E
from . import model as M
from . import rl
from . import tokenizer as tk
from . import train as TR
from .config import ConfigError, RunConfig
from .optim import AdamW

COMMANDS = ("gendata", "tokenize", "pretrain", "posttrain", "eval", "ablate")


class LockError(RuntimeError):
    pass


class DivergedError(data.DataError):
    pass


@contextmanager
def locked(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{out} is in use by another command (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig, artifacts, **extra) -> dict:
    files = sorted(Path(a) for a in artifacts)
    manifest = {"command": command, "config_hash": cfg.hash(), "seed": cfg.seed, "config": cfg.to_dict(),
                "artifacts": {str(p.relative_to(out)): sha256(p) for p in files}, **extra}
    (out / f"manifest.{command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {path} ({hint})")
    return path


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


# -- gendata --------------------------------------------------------------------

def gendata(cfg: RunConfig, out: Path, echo: Callable = print) -> dict:
    src = cfg.data_source
    if src == "synthetic":
        ds = data.synthetic_dataset(cfg.world())
    else:
        path = _require(Path(src), "data_source")
        ds = data.load_dataset(path) if path.is_dir() else data.dataset_from_checkins(path)
    info = data.save_dataset(ds, out / "data")
    echo(f"dataset: {info['n_users']} users, {info['n_videos']} videos, {info['n_interactions']} interactions")
    return write_manifest(out, "gendata", cfg, (out / "data").iterdir(), dataset_hash=info["config_hash"])


# -- shared inputs --------------------------------------------------------------

@dataclass
class Inputs:
    dataset: data.Dataset
    split: data.Split
    index: tk.VideoIndex
    sid_of: dict

    @property
    def catalog(self) -> data.Catalog:
        return self.dataset.catalog

    def events(self, part: str, cfg: RunConfig) -> list:
        return data.make_events(self.split, part, (cfg.max_watch, cfg.max_click, cfg.max_pay))


def _load_dataset(out: Path) -> data.Dataset:
    _require(out / "data" / "dataset.json", "run gendata first")
    return data.load_dataset(out / "data")


def load_index(path: Path, popularity=None) -> tuple[tk.VideoIndex, dict]:
    rows = [json.loads(line) for line in _require(path, "run tokenize first").read_text().splitlines()]
    sid_of = {r["video_id"]: tuple(r["sid"]) for r in rows}
    return tk.build_video_index(sid_of.items(), popularity), sid_of


def load_inputs(out: Path) -> Inputs:
    ds = _load_dataset(out)
    split = data.split_sequences(ds.records)
    index, sid_of = load_index(out / "index.jsonl", data.popularity(split.train))
    missing = set(ds.catalog.video_ids) - set(sid_of)
    if missing:
        raise data.DataError(f"index lacks {len(missing)} catalog videos; re-run tokenize")
    return Inputs(ds, split, index, sid_of)


# -- tokenize -------------------------------------------------------------------

def tokenize(cfg: RunConfig, out: Path, echo: Callable = print) -> dict:
    ds = _load_dataset(out)
    cat = ds.catalog
    feats = np.array([tk.build_feature(c, l) for c, l in zip(cat.content, cat.loc_ctx)])
    stack = tk.train_codebooks(feats, cfg.n_levels, cfg.n_codes, cfg.seed, n_init=cfg.kmeans_restarts)
    codes, _ = tk.encode_all(feats, stack)
    errors = tk.reconstruction_error(stack, feats)
    stack.save(out / "codebooks.grsid")
    with open(out / "index.jsonl", "w") as f:
        for vid, sid in zip(cat.video_ids, codes):
            f.write(json.dumps({"video_id": vid, "sid": [int(c) for c in sid]}) + "\n")
    index = tk.build_video_index(zip(cat.video_ids, codes))
    for level, err in enumerate(errors, 1):
        echo(f"level {level}: reconstruction error {err:.6f}")
    echo(f"collision rate {index.collision_rate():.4f}")
    return write_manifest(out, "tokenize", cfg, [out / "codebooks.grsid", out / "index.jsonl"],
                          reconstruction_error=errors, collision_rate=index.collision_rate())


# -- pretrain -------------------------------------------------------------------

def _optimizer(cfg: RunConfig, lr: float) -> AdamW:
    return AdamW(lr=lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)


def _read_curve(path: Path, upto: int) -> TR.TrainLog:
    log = TR.TrainLog()
    with open(_require(path, "cannot resume without the training curve")) as f:
        for row in csv.DictReader(f):
            if int(row["step"]) < upto:
                log.add(int(row["step"]), float(row["loss"]), float(row["grad_norm"]))
    return log


def run_pretrain(cfg: RunConfig, inputs: Inputs, dest: Path, echo: Callable = print) -> dict:
    dest.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.model(inputs.catalog)
    fz = M.Featurizer(inputs.catalog, mcfg)
    train_data = TR.prepare(fz, inputs.events("train", cfg), inputs.sid_of)
    valid_events = inputs.events("valid", cfg)
    if not len(train_data) or not valid_events:
        raise data.DataError("no training or validation events")
    valid_data = TR.prepare(fz, valid_events, inputs.sid_of)
    last_path, best_path = dest / "pretrain_last.ckpt", dest / "pretrain.ckpt"

    if cfg.resume:
        ck = ckpt.load(_require(last_path, "nothing to resume"))
        if ck.cfg != mcfg:
            raise ConfigError("model settings differ from the checkpoint being resumed")
        params, opt, start = ck.params, ck.opt, ck.step
        valid_log = [tuple(r) for r in ck.meta["valid"]]
        best = ck.meta["best_valid"]
        log = _read_curve(dest / "curve.csv", start)
    else:
        params, opt, start = M.init_params(mcfg, cfg.seed), _optimizer(cfg, cfg.lr), 0
        valid_log, best, log = [], math.inf, TR.TrainLog()

    def checkpoint_at(step, params):
        nonlocal best
        done = step + 1
        if done % cfg.eval_every and done != cfg.steps:
            return
        v = TR.mean_ntp(params, mcfg, valid_data)
        valid_log.append((done, v))
        echo(f"step {done}: train ntp {log.losses[-1]:.4f} valid ntp {v:.4f}")
        meta = {"best_valid": min(best, v), "valid": valid_log, "config_hash": cfg.hash()}
        if v < best:
            best = v
            ckpt.save(best_path, ckpt.Checkpoint(params, mcfg, None, done, meta))
        ckpt.save(last_path, ckpt.Checkpoint(params, mcfg, opt, done, meta))
        (dest / "curve.csv").write_text(log.to_csv())

    try:
        TR.pretrain(params, mcfg, train_data, opt, cfg.steps, cfg.batch_size, cfg.seed, cfg.order,
                    start_step=start, callback=checkpoint_at, log=log)
    except FloatingPointError as e:
        step = log.steps[-1] + 1 if log.steps else start
        recent = ", ".join(f"{x:.4g}" for x in log.losses[-5:])
        raise DivergedError(f"training diverged at step {step}: {e}; recent losses [{recent}]") from e
    (dest / "curve.csv").write_text(log.to_csv())
    _write_csv(dest / "valid.csv", ["step", "valid_ntp"], [(s, f"{v:.17g}") for s, v in valid_log])
    return {"initial_loss": log.losses[0] if log.losses else None, "uniform_loss": mcfg.n_levels * math.log(mcfg.n_codes),
            "final_loss": log.losses[-1] if log.losses else None, "best_valid": best,
            "n_params": M.param_count(params)}


def pretrain(cfg: RunConfig, out: Path, echo: Callable = print) -> dict:
    info = run_pretrain(cfg, load_inputs(out), out, echo)
    files = [out / n for n in ("pretrain.ckpt", "pretrain_last.ckpt", "curve.csv", "valid.csv")]
    return write_manifest(out, "pretrain", cfg, files, **info)


# -- posttrain ------------------------------------------------------------------

def run_posttrain(cfg: RunConfig, inputs: Inputs, source: Path, dest: Path, echo: Callable = print) -> dict:
    ck = ckpt.load(_require(source, "run pretrain first"))
    mcfg = cfg.model(inputs.catalog)
    if ck.cfg != mcfg:
        raise ConfigError("model settings differ from the pre-trained checkpoint")
    params = ck.params
    fz = M.Featurizer(inputs.catalog, mcfg)
    reward_cfg = rl.RewardConfig(D=cfg.D, dist_floor=cfg.dist_floor, w_geo=cfg.w_geo, w_gmv=cfg.w_gmv)
    buffer = []

    def keep(r, pairs):
        buffer.extend(json.dumps({"round": r, **p.to_dict()}, sort_keys=True) for p in pairs)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        stats = rl.post_train(params, mcfg, fz, inputs.events("train", cfg), inputs.sid_of, inputs.index,
                              inputs.catalog, reward_cfg, rl.GmvProxy(inputs.catalog), _optimizer(cfg, cfg.post_lr),
                              cfg.rounds, cfg.n_candidates, cfg.beam_width or None, cfg.lam, cfg.beta,
                              cfg.batch_size, cfg.seed, keep)
    for w in caught:
        echo(f"warning: {w.message}")
    for s in stats:
        echo(f"round {s.round}: {s.n_pairs}/{s.n_events} pairs, mean candidate km {s.mean_candidate_km:.4f}, "
             f"mean geo reward {s.mean_reward:.4f}, ntp {s.ntp:.4f}, dpo {s.dpo:.4f}")
    dest.mkdir(parents=True, exist_ok=True)
    ckpt.save(dest / "posttrain.ckpt", ckpt.Checkpoint(params, mcfg, None, ck.step, {"config_hash": cfg.hash(),
                                                                                    "rounds": cfg.rounds}))
    (dest / "pairs.jsonl").write_text("".join(line + "\n" for line in buffer))
    fields = ["round", "n_events", "n_pairs", "mean_candidate_km", "mean_reward", "ntp", "dpo", "skipped"]
    _write_csv(dest / "rounds.csv", fields, [[getattr(s, f) for f in fields] for s in stats])
    return {"rounds": [{f: getattr(s, f) for f in fields} for s in stats]}


def posttrain(cfg: RunConfig, out: Path, echo: Callable = print) -> dict:
    info = run_posttrain(cfg, load_inputs(out), out / "pretrain.ckpt", out, echo)
    files = [out / n for n in ("posttrain.ckpt", "pairs.jsonl", "rounds.csv")]
    return write_manifest(out, "posttrain", cfg, files, **_jsonable(info))


def _jsonable(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


# -- eval -----------------------------------------------------------------------

def run_evaluation(cfg: RunConfig, inputs: Inputs, checkpoint: Path, dest: Path, name: str) -> E.EvalReport:
    ck = ckpt.load(_require(checkpoint, "train a model first"))
    events = inputs.events("test", cfg)
    rep = E.run_eval(ck.params, ck.cfg, M.Featurizer(inputs.catalog, ck.cfg), events, inputs.index,
                     inputs.catalog, cfg.ks, None, cfg.beam_width or None, rl.GmvProxy(inputs.catalog), cfg.D,
                     cfg.profile_k, cfg.hash(), cfg.seed)
    dest.mkdir(parents=True, exist_ok=True)
    (dest / f"{name}.txt").write_text(rep.to_text())
    (dest / f"{name}.json").write_text(rep.to_json())
    (dest / f"{name}.csv").write_text(rep.to_csv())
    return rep


def evaluate(cfg: RunConfig, out: Path, echo: Callable = print) -> dict:
    inputs = load_inputs(out)
    name = f"eval_{cfg.eval_checkpoint}"
    rep = run_evaluation(cfg, inputs, out / f"{cfg.eval_checkpoint}.ckpt", out, name)
    echo(rep.to_text().rstrip())
    return write_manifest(out, "eval", cfg, [out / f"{name}.{ext}" for ext in ("txt", "json", "csv")])


# -- ablate ---------------------------------------------------------------------

def ablate(cfg: RunConfig, out: Path, echo: Callable = print) -> dict:
    """Train and evaluate each variant with the same seed schedule; variants are config switches."""
    inputs = load_inputs(out)
    summary, files = {}, []
    for variant in cfg.variants:
        vcfg = cfg.for_variant(variant)
        dest = out / "ablate" / variant
        echo(f"== {variant}")
        run_pretrain(vcfg, inputs, dest, echo)
        files += [dest / n for n in ("pretrain.ckpt", "pretrain_last.ckpt", "curve.csv", "valid.csv")]
        final = dest / "pretrain.ckpt"
        if vcfg.rounds:
            run_posttrain(vcfg, inputs, final, dest, echo)
            files += [dest / n for n in ("posttrain.ckpt", "pairs.jsonl", "rounds.csv")]
            final = dest / "posttrain.ckpt"
        rep = run_evaluation(vcfg, inputs, final, dest, "eval")
        files += [dest / f"eval.{ext}" for ext in ("txt", "json", "csv")]
        summary[variant] = json.loads(rep.to_json())
    ks = sorted(cfg.ks)
    header = "variant".ljust(20) + "".join(f"{'R@' + str(k):>9}" for k in ks) + \
        "".join(f"{'N@' + str(k):>9}" for k in ks) + f"{'km':>9}{'gmv':>9}"
    lines = [f"# {E.PROTOCOL}; config {cfg.hash()} seed {cfg.seed}", header]
    for variant, rep in summary.items():
        gmv = rep["mean_gmv"] if rep["mean_gmv"] is not None else float("nan")
        lines.append(variant.ljust(20) + "".join(f"{rep['recall'][str(k)]:>9.4f}" for k in ks)
                     + "".join(f"{rep['ndcg'][str(k)]:>9.4f}" for k in ks)
                     + f"{rep['mean_km']:>9.4f}{gmv:>9.4f}")
    text = "\n".join(lines) + "\n"
    (out / "ablate" / "summary.txt").write_text(text)
    (out / "ablate" / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    echo(text.rstrip())
    files += [out / "ablate" / "summary.txt", out / "ablate" / "summary.json"]
    return write_manifest(out, "ablate", cfg, files)


RUNNERS = {"gendata": gendata, "tokenize": tokenize, "pretrain": pretrain, "posttrain": posttrain,
           "eval": evaluate, "ablate": ablate}


def run(command: str, cfg: RunConfig, out, echo: Callable = print) -> dict:
    out = Path(out)
    with locked(out):
        return RUNNERS[command](cfg, out, echo)
