"""Dataset generation, training, estimation, evaluation and heatmap runs.

Every output file is a deterministic function of (config, seed): there are no
timestamps, JSON is written with sorted keys, and random streams are keyed by
``SeedSequence(seed, spawn_key=...)`` so results do not depend on batching.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import dynamics as dyn
from .config import ConfigError, RunConfig
from .enki import (EnkiConfig, empirical_bayes_prior, emulator_objective, kse_fixed_prior, l96_fixed_prior,
                   moment_objective, run_enki, write_ensemble_csv, KSE_EMPB_VARIANCES, L96_EMPB_VARIANCES)
from .forward import EmulatorForward, MomentForward, encode_observation, moment_variance_at
from .metrics import MOMENT_CLIP, evaluate, heatmap_grid
from .nn import EmbedEmulateModel, load_module_arrays, optimizer_state_arrays
from .storage import read_checkpoint, read_json, read_trajectory, write_checkpoint, write_json, write_trajectory
from .training import train

log = logging.getLogger(__name__)

SPLITS = {"train": 10, "test": 11}
NOISE_STREAM = 20
ENKI_STREAM = 21
CROP_STREAM = 22
VARIANCE_STREAM = 23
MODES = ("baseline", "emulator", "head")


def _stamp(cfg: RunConfig, **extra) -> dict:
    return {"config_hash": cfg.hash, "label": cfg.label, "system": cfg.system.system, **extra}


def _instance_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


# ----------------------------------------------------------------------------- datasets


@dataclass
class Dataset:
    root: Path
    split: str
    records: list[dict]

    @property
    def accepted(self) -> list[dict]:
        return [r for r in self.records if r["accepted"]]

    def load(self, records=None) -> tuple[np.ndarray, np.ndarray]:
        """Stack ``(params (n, k), trajectories (n, T, D))`` for accepted records."""
        recs = self.accepted if records is None else records
        params = np.array([r["params"] for r in recs], dtype=float)
        trajs = np.stack([read_trajectory(self.root / r["file"]).states for r in recs])
        return params, trajs


def split_dir(out: Path, split: str) -> Path:
    return Path(out) / "data" / split


def gen_data(cfg: RunConfig, out, split: str, seed: int | None = None) -> Dataset:
    """Sample parameters uniformly over the split's range, simulate, filter, and persist."""
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    seed = cfg.seed if seed is None else seed
    d, sys = cfg.data, cfg.system
    if split == "train":
        lo, hi, n, T = np.array(d.train_low), np.array(d.train_high), d.n_train, d.train_len
    else:
        lo, hi, n, T = np.array(d.test_low), np.array(d.test_high), d.n_test, d.test_len
    root = split_dir(out, split)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for c0 in range(0, n, d.chunk):
        idx = range(c0, min(n, c0 + d.chunk))
        rngs = [_instance_rng(seed, SPLITS[split], i) for i in idx]
        params = np.stack([lo + (hi - lo) * r.random(lo.size) for r in rngs])
        z0 = np.stack([sys.initial_condition(r) for r in rngs])
        states, _ = sys.simulate(params, z0, T - 1 + d.burn_in)
        for j, i in enumerate(idx):
            Z = states[j, d.burn_in:]
            v = dyn.validate_trajectory(Z)
            rec = {"index": i, "params": [float(x) for x in params[j]], "accepted": bool(v.accepted),
                   "reason": v.reason, "file": None}
            if v.accepted:
                rec["file"] = f"traj_{i:05d}.bin"
                traj = dyn.Trajectory(Z, sys.dt, {"system": sys.system, "params": rec["params"],
                                                  "seed": int(seed), "index": i, "split": split})
                write_trajectory(root / rec["file"], traj)
            records.append(rec)
    n_ok = sum(r["accepted"] for r in records)
    if n_ok < n:
        log.warning("%s split: %d of %d requested samples accepted", split, n_ok, n)
    write_json(root / "manifest.json", _stamp(cfg, split=split, seed=int(seed), requested=n, accepted=n_ok,
                                               param_names=list(sys.param_names), T=T, dt=sys.dt,
                                               records=records))
    return Dataset(root, split, records)


def load_dataset(out, split: str) -> Dataset:
    root = split_dir(out, split)
    path = root / "manifest.json"
    if not path.exists():
        raise ConfigError(f"no {split} dataset at {root}; run gen-data first")
    return Dataset(root, split, read_json(path)["records"])


# ----------------------------------------------------------------------------- training


def cmd_train(cfg: RunConfig, out, seed: int | None = None, progress=None) -> dict:
    seed = cfg.seed if seed is None else seed
    ds = load_dataset(out, "train")
    if len(ds.accepted) < min(cfg.train.batch_size, cfg.data.n_train):
        raise ConfigError(f"only {len(ds.accepted)} accepted training samples for batch size {cfg.train.batch_size}")
    params, trajs = ds.load()
    res = train(cfg, params, trajs, seed, progress)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    named = list(res.model.named_parameters())
    opt_tensors, opt_steps = optimizer_state_arrays(res.optimizer, named)
    header = _stamp(cfg, seed=int(seed), epoch=res.best_epoch, best_val_mape=res.best_val,
                    initial_val_mape=res.initial_val, specs=res.model.specs(),
                    optimizer_steps=opt_steps, val_index=[int(i) for i in res.val_index],
                    config=cfg.to_dict())
    manifest = write_checkpoint(out / "model.ckpt", {**res.best_state, **opt_tensors}, header)
    keys = list(res.history[0]) if res.history else []
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for rec in res.history:
            w.writerow([repr(rec[k]) if isinstance(rec[k], float) else rec[k] for k in keys])
    return {"manifest": manifest, "result": res}


def load_model(path) -> tuple[EmbedEmulateModel, dict]:
    tensors, header = read_checkpoint(path)
    model = EmbedEmulateModel.from_specs(header["specs"])
    load_module_arrays(model, tensors)
    model.eval()
    return model, header


# ----------------------------------------------------------------------------- estimation


def _observation(cfg: RunConfig, Z: np.ndarray, index: int, seed: int) -> np.ndarray:
    traj = dyn.Trajectory(Z, cfg.system.dt)
    return dyn.add_observation_noise(traj, cfg.data.noise_r, _instance_rng(seed, NOISE_STREAM, index)).states


def fixed_prior(cfg: RunConfig):
    return l96_fixed_prior() if cfg.system.system == "l96" else kse_fixed_prior()


def empb_variances(cfg: RunConfig):
    return L96_EMPB_VARIANCES if cfg.system.system == "l96" else KSE_EMPB_VARIANCES


def moment_forward(cfg: RunConfig, Z: np.ndarray, truth, index: int, seed: int) -> MomentForward:
    """Moment forward model with the block-variance covariance at the truth or prior mean."""
    e = cfg.estimate
    if e.variance_source == "truth":
        at = np.asarray(truth, dtype=float)
    else:
        prior = fixed_prior(cfg)
        at = prior.to_physical(np.asarray(prior.means))
    R = moment_variance_at(cfg.system, at, Z.shape[0], np.random.SeedSequence(seed, spawn_key=(VARIANCE_STREAM, index)),
                           e.var_blocks)
    R = np.maximum(R, 1e-12)
    return MomentForward(cfg.system, Z, R, seed=int(np.random.SeedSequence(seed, spawn_key=(ENKI_STREAM, index, 1))
                                                   .generate_state(1)[0]))


def estimate_instance(cfg: RunConfig, mode: str, Z: np.ndarray, index: int, seed: int, model=None,
                      truth=None, record_history: bool = True, prior: str | None = None) -> dict:
    """Estimate parameters from one observation; returns a JSON-ready record."""
    e = cfg.estimate
    rec: dict = {"index": int(index), "mode": mode}
    enki_cfg = EnkiConfig(e.M, e.N, e.alpha)
    enki_seed = np.random.SeedSequence(seed, spawn_key=(ENKI_STREAM, index))
    if mode in ("emulator", "head"):
        if model is None:
            raise ConfigError(f"mode {mode!r} needs a trained checkpoint")
        emb, head = encode_observation(model, Z, e.n_crops, _instance_rng(seed, CROP_STREAM, index))
        rec["head_estimate"] = [float(x) for x in head]
        if mode == "head":
            rec["estimate"] = rec["head_estimate"]
            return rec
        choice = prior or e.prior
        if choice == "empb":
            pr, flagged = empirical_bayes_prior(head, fixed_prior(cfg), empb_variances(cfg))
            rec["clamped"] = flagged
        else:
            pr = fixed_prior(cfg)
        res = run_enki(emb, EmulatorForward(model), pr, enki_cfg, enki_seed, record_history)
    elif mode == "baseline":
        if truth is None and e.variance_source == "truth":
            raise ConfigError("baseline with variance_source='truth' needs the true parameters")
        fm = moment_forward(cfg, Z, truth, index, seed)
        pr = fixed_prior(cfg) if prior in (None, "fixed") else prior
        res = run_enki(fm.y, fm, pr, enki_cfg, enki_seed, record_history)
    else:
        raise ConfigError(f"unknown estimation mode {mode!r}")
    rec["prior"] = pr.to_dict()
    rec["estimate"] = [float(x) for x in res.mean]
    rec["ensemble"] = res.ensemble.physical.tolist()
    rec["spreads"] = [float(x) for x in res.spreads]
    rec["objective"] = [float(x) for x in res.objective]
    rec["n_failed"] = res.n_failed
    rec["_history"] = res.history
    return rec


def cmd_estimate(cfg: RunConfig, out, mode: str, checkpoint=None, seed: int | None = None,
                 indices=None, write_ensembles: bool = True) -> dict:
    seed = cfg.seed if seed is None else seed
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    model = None
    if mode != "baseline":
        if checkpoint is None or not Path(checkpoint).exists():
            raise ConfigError(f"mode {mode!r} needs an existing --checkpoint")
        model, _ = load_model(checkpoint)
    ds = load_dataset(out, "test")
    recs = ds.accepted if indices is None else [r for r in ds.accepted if r["index"] in set(indices)]
    out = Path(out)
    ens_dir = out / "ensembles"
    if write_ensembles and mode != "head":
        ens_dir.mkdir(parents=True, exist_ok=True)
    names = list(cfg.system.param_names)
    results = []
    for r in recs:
        Z = _observation(cfg, read_trajectory(ds.root / r["file"]).states, r["index"], seed)
        rec = estimate_instance(cfg, mode, Z, r["index"], seed, model, truth=r["params"])
        hist = rec.pop("_history", None)
        if write_ensembles and hist:
            write_ensemble_csv(ens_dir / f"{mode}_{r['index']:05d}.csv", hist, names)
        rec["truth"] = r["params"]
        results.append(rec)
    doc = _stamp(cfg, mode=mode, seed=int(seed), param_names=names, records=results)
    write_json(out / f"estimates_{mode}.json", doc)
    return doc


# ----------------------------------------------------------------------------- evaluation


def cmd_evaluate(cfg: RunConfig, out, mode: str) -> dict:
    out = Path(out)
    path = out / f"estimates_{mode}.json"
    if not path.exists():
        raise ConfigError(f"no estimates at {path}; run estimate first")
    doc = read_json(path)
    recs = doc["records"]
    if not recs:
        raise ConfigError("estimate file holds no records")
    est = np.array([r["estimate"] for r in recs])
    tru = np.array([r["truth"] for r in recs])
    ens = [np.array(r["ensemble"]) for r in recs] if all("ensemble" in r for r in recs) else None
    report = evaluate(mode, doc["param_names"], est, tru, ens, cfg.train.eps)
    report.extra = _stamp(cfg)
    report.write(out / f"report_{mode}")
    return {"report": report}


# ----------------------------------------------------------------------------- heatmaps


def cmd_heatmap(cfg: RunConfig, out, objective: str, pair: tuple[int, int], index: int = 0,
                checkpoint=None, seed: int | None = None, ranges=None, resolution: int | None = None) -> dict:
    seed = cfg.seed if seed is None else seed
    k = len(cfg.system.param_names)
    i, j = pair
    if not (0 <= i < k and 0 <= j < k) or i == j:
        raise ConfigError(f"pair must be two distinct components in [0, {k})")
    ds = load_dataset(out, "test")
    rec = next((r for r in ds.accepted if r["index"] == index), None)
    if rec is None:
        raise ConfigError(f"test instance {index} is not an accepted record")
    Z = _observation(cfg, read_trajectory(ds.root / rec["file"]).states, index, seed)
    truth = np.array(rec["params"])
    if ranges is None:
        ranges = [(cfg.data.test_low[c], cfg.data.test_high[c]) for c in pair]
    res = resolution or cfg.estimate.heatmap_resolution

    if objective == "moment":
        fm = moment_forward(cfg, Z, truth, index, seed)
        y = fm.y

        def fn(grid):
            out_, ok = fm(grid)
            return np.array([moment_objective(g, y, fm.R, lambda _, o=o, v=v: o if v else None)
                             for g, o, v in zip(grid, out_, ok)])

        clip = cfg.estimate.heatmap_clip or MOMENT_CLIP
    elif objective == "emulator":
        if checkpoint is None or not Path(checkpoint).exists():
            raise ConfigError("the emulator objective needs an existing --checkpoint")
        model, _ = load_model(checkpoint)
        emb, _ = encode_observation(model, Z, cfg.estimate.n_crops, _instance_rng(seed, CROP_STREAM, index))
        emu = EmulatorForward(model)

        def fn(grid):
            return emulator_objective(emu(grid)[0], emb[None])

        clip = None
    else:
        raise ConfigError("objective must be 'moment' or 'emulator'")
    hm = heatmap_grid(fn, truth, (i, j), ranges, res, clip)
    names = cfg.system.param_names
    out = Path(out)
    stem = out / f"heatmap_{objective}_{names[i]}_{names[j]}_{index:05d}"
    hm.write_csv(f"{stem}.csv")
    write_json(f"{stem}.json", _stamp(cfg, objective=objective, pair=[names[i], names[j]], index=index,
                                      truth=truth.tolist(), argmin=list(hm.argmin), truth_cell=list(hm.truth_cell),
                                      argmin_params=[float(hm.axis1[hm.argmin[0]]), float(hm.axis2[hm.argmin[1]])],
                                      resolution=res, clip=clip))
    return {"heatmap": hm}


def configure_threads(threads: int, deterministic: bool) -> None:
    if deterministic:
        threads = 1
        torch.use_deterministic_algorithms(True)
    torch.set_num_threads(max(1, threads))
