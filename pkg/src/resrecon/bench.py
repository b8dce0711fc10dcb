"""Experiment orchestration: TOML configuration, the resolution-shift matrix, CSV rows and plots.

Configuration key tree (TOML)::

    out_dir = "runs/demo"          # CSV, per-cell logs and trained priors; relative paths
                                   # here and below resolve against the config file
    seed = 0

    [dataset]
    kind = "phantom"               # or "files"
    seeds = [100, 101]             # phantom seeds
    dims = [64, 64, 64]
    voxel_size = 1.0
    files = []                     # .cvol paths when kind = "files"
    coils = 8
    noise_sigma = 0.0

    [mask]
    kind = "poisson"               # poisson | gaussian | full
    accelerations = [4, 8]

    [[priors]]                     # one table per prior
    tag = "matched"
    checkpoint = "path/to/ckpt"    # or a [priors.train] table with PriorSpec fields
    v_train = 1.0                  # optional; defaults to the checkpoint metadata

    [shift]
    v_recon = [1.0, 2.0]           # every prior is evaluated at every V_recon
    # pairs = [["matched", 1.0]]   # alternatively explicit (prior tag, V_recon) cells

    [[methods]]
    name = "variational"           # variational | l1_wavelet | dds | zero_filled
    label = "var"                  # optional CSV label
    [methods.options]              # ReconConfig / SamplerConfig fields, or mu/iters for l1_wavelet
    lam = 2.0
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import sys
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import SamplerConfig, reconstruct_dds3d, reconstruct_l1wavelet
from .diffusion.training import Checkpoint
from .io import read_cvol
from .metrics import psnr, ssim_sagittal_avg
from .operators import forward, scale_measurements, zero_filled
from .priors import PriorSpec, load_or_train
from .sampling import MASK_KINDS, make_mask
from .variational import ReconConfig, reconstruct_variational
from .volume import ComplexVolume, generate_phantom, resample_to_voxel_size, synth_coil_maps

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

CSV_COLUMNS = ["volume_id", "method", "v_train_mm", "v_recon_mm", "accel", "psnr_db", "ssim",
               "wall_s", "seed", "error"]
METHODS = ("variational", "l1_wavelet", "dds", "zero_filled")
PRIOR_METHODS = ("variational", "dds")


class ConfigError(ValueError):
    pass


@dataclass
class PriorEntry:
    tag: str
    checkpoint: str | None = None
    train: dict | None = None
    v_train: float | None = None


@dataclass
class MethodEntry:
    name: str
    label: str | None = None
    options: dict = field(default_factory=dict)

    @property
    def display(self) -> str:
        return self.label or self.name


@dataclass
class ExperimentConfig:
    out_dir: str
    dataset: dict
    mask: dict
    methods: list
    priors: list = field(default_factory=list)
    shift: dict = field(default_factory=dict)
    seed: int = 0
    base_dir: str = "."

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "ExperimentConfig":
        try:
            priors = [PriorEntry(**p) for p in d.get("priors", [])]
            methods = [MethodEntry(**m) for m in d.get("methods", [])]
            cfg = cls(out_dir=d["out_dir"], dataset=dict(d["dataset"]), mask=dict(d["mask"]),
                      methods=methods, priors=priors, shift=dict(d.get("shift", {})),
                      seed=int(d.get("seed", 0)), base_dir=str(base_dir))
        except (KeyError, TypeError) as e:
            raise ConfigError(f"invalid experiment config: {e}") from e
        cfg.out_dir = str(cfg.resolve(cfg.out_dir))
        cfg.validate()
        return cfg

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            d = tomllib.loads(path.read_text())
        except (OSError, tomllib.TOMLDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(d, base_dir=path.parent)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def validate(self):
        kind = self.dataset.get("kind", "phantom")
        if kind not in ("phantom", "files"):
            raise ConfigError(f"dataset.kind must be 'phantom' or 'files', got {kind!r}")
        if kind == "files":
            for f in self.dataset.get("files", []):
                if not self.resolve(f).exists():
                    raise ConfigError(f"dataset file not found: {f}")
        if self.mask.get("kind", "poisson") not in MASK_KINDS:
            raise ConfigError(f"unknown mask kind {self.mask.get('kind')!r}")
        if any(float(R) < 1 for R in self.mask.get("accelerations", [])):
            raise ConfigError("accelerations must be >= 1")
        tags = [p.tag for p in self.priors]
        if len(set(tags)) != len(tags):
            raise ConfigError(f"duplicate prior tags: {tags}")
        for p in self.priors:
            if p.checkpoint is None and p.train is None:
                raise ConfigError(f"prior {p.tag!r} needs 'checkpoint' or a 'train' table")
            if p.checkpoint is not None and not (self.resolve(p.checkpoint) / "meta.json").exists():
                raise ConfigError(f"checkpoint not found for prior {p.tag!r}: {p.checkpoint}")
        for m in self.methods:
            if m.name not in METHODS:
                raise ConfigError(f"unknown method {m.name!r}; expected one of {METHODS}")
            if m.name in PRIOR_METHODS and not self.priors:
                raise ConfigError(f"method {m.name!r} needs at least one prior")
            try:
                _method_config(m)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad options for method {m.display!r}: {e}") from e
        for pair in self.shift.get("pairs", []):
            if pair[0] not in tags:
                raise ConfigError(f"shift pair refers to unknown prior {pair[0]!r}")


def _method_config(m: MethodEntry):
    opts = dict(m.options)
    if m.name == "variational":
        return ReconConfig(**opts)
    if m.name == "dds":
        return SamplerConfig(**opts)
    if m.name == "l1_wavelet":
        allowed = {"mu", "mu_grid", "iters"}
        extra = set(opts) - allowed
        if extra:
            raise TypeError(f"unexpected l1_wavelet options {sorted(extra)}")
        return opts
    return opts


@dataclass(frozen=True)
class Cell:
    volume_id: str
    method: MethodEntry
    prior: PriorEntry | None
    v_recon: float
    accel: float

    @property
    def method_label(self) -> str:
        return self.method.display + (f"@{self.prior.tag}" if self.prior else "")

    @property
    def key(self) -> tuple:
        return (self.volume_id, self.method_label, f"{self.v_recon:g}", f"{self.accel:g}")


def cell_seed(global_seed: int, key) -> int:
    """Per-cell seed derived from the global seed and the cell key (order independent)."""
    h = hashlib.sha256(f"{global_seed}|{'|'.join(map(str, key))}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def _volumes(cfg: ExperimentConfig) -> list:
    ds = cfg.dataset
    v = float(ds.get("voxel_size", 1.0))
    if ds.get("kind", "phantom") == "files":
        return [(Path(f).stem, read_cvol(cfg.resolve(f))) for f in ds.get("files", [])]
    dims = tuple(ds.get("dims", (64, 64, 64)))
    return [(f"phantom{s}", generate_phantom(int(s), dims, voxel_size=(v, v, v)))
            for s in ds.get("seeds", [])]


def plan_cells(cfg: ExperimentConfig, volume_ids) -> list[Cell]:
    accels = [float(R) for R in cfg.mask.get("accelerations", [])]
    if "pairs" in cfg.shift:
        by_tag = {p.tag: p for p in cfg.priors}
        pairs = [(by_tag[t], float(v)) for t, v in cfg.shift["pairs"]]
    else:
        v_list = [float(v) for v in cfg.shift.get("v_recon", [])]
        pairs = [(p, v) for p in cfg.priors for v in v_list]
    v_recons = sorted({v for _, v in pairs}) if pairs else [float(v) for v in cfg.shift.get("v_recon", [])]
    cells = []
    for vid in volume_ids:
        for R in accels:
            for m in cfg.methods:
                if m.name in PRIOR_METHODS:
                    cells += [Cell(vid, m, p, v, R) for p, v in pairs]
                else:
                    cells += [Cell(vid, m, None, v, R) for v in v_recons]
    keys = [c.key for c in cells]
    if len(set(keys)) != len(keys):
        dup = sorted({k for k in keys if keys.count(k) > 1})
        raise ConfigError(f"cell keys collide: {dup[:3]}")
    return cells


def _prior_ckpt(cfg, entry: PriorEntry, cache: dict) -> Checkpoint:
    if entry.tag not in cache:
        if entry.checkpoint is not None:
            cache[entry.tag] = Checkpoint.load(cfg.resolve(entry.checkpoint))
        else:
            cache[entry.tag] = load_or_train(PriorSpec(**entry.train), Path(cfg.out_dir) / "cache")
    return cache[entry.tag]


def _v_train(entry: PriorEntry, ckpt: Checkpoint) -> float:
    if entry.v_train is not None:
        return float(entry.v_train)
    if entry.train is not None:
        return PriorSpec(**entry.train).v_train
    sizes = ckpt.config.train_voxel_sizes
    return float(np.exp(np.mean(np.log(sizes[0])))) if sizes else float("nan")


def simulate_cell(truth: ComplexVolume, cell: Cell, cfg: ExperimentConfig, seed: int):
    """Ground truth at ``V_recon``, coil maps and scaled measurements for one cell."""
    gt = resample_to_voxel_size(truth, (cell.v_recon,) * 3)
    maps = synth_coil_maps(gt.dims, int(cfg.dataset.get("coils", 8)), seed=seed % 2 ** 31,
                           voxel_size=gt.voxel_size)
    mask = make_mask(cfg.mask.get("kind", "poisson"), gt.dims[1:], cell.accel, seed=seed % 2 ** 31)
    ksp = forward(gt, maps, mask, float(cfg.dataset.get("noise_sigma", 0.0)), seed=seed)
    ksp, _ = scale_measurements(ksp, maps)
    return gt, maps, ksp


def reconstruct_cell(cell: Cell, gt, maps, ksp, ckpt, v_train, seed: int, run_log: dict):
    m = cell.method
    conf = _method_config(m)
    if m.name == "zero_filled":
        return zero_filled(ksp, maps)
    if m.name == "l1_wavelet":
        grid = conf.get("mu_grid")
        iters = int(conf.get("iters", 100))
        if not grid:
            return reconstruct_l1wavelet(ksp, maps, None, float(conf.get("mu", 0.01)), iters, run_log=run_log)
        # oracle tuning: best PSNR over the grid
        best = None
        for mu in grid:
            out = reconstruct_l1wavelet(ksp, maps, None, float(mu), iters)
            score = psnr(out, gt)
            score = math.inf if score is None else score
            if best is None or score > best[0]:
                best = (score, mu, out)
        run_log.update({"method": "l1_wavelet", "mu": best[1], "mu_grid": list(grid)})
        return best[2]
    if m.name == "variational":
        conf.seed = seed % 2 ** 31
        if conf.v_train is None and math.isfinite(v_train):
            conf.v_train = v_train
        return reconstruct_variational(ksp, maps, ckpt, conf, run_log=run_log)
    conf.seed = seed % 2 ** 31
    return reconstruct_dds3d(ksp, maps, None, ckpt, conf, run_log=run_log)


def _fmt(x, digits=6):
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return ""
    return f"{x:.{digits}f}"


def _read_done(path: Path) -> set:
    if not path.exists():
        return set()
    with path.open(newline="") as f:
        rows = list(csv.DictReader(f))
    return {(r["volume_id"], r["method"], f"{float(r['v_recon_mm']):g}", f"{float(r['accel']):g}")
            for r in rows}


def run_experiment(cfg: ExperimentConfig, csv_name: str = "results.csv") -> Path:
    """Run every pending cell and append its metrics row; finished cells are skipped.

    Failures are recorded in the ``error`` column and do not stop the run.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(exist_ok=True)
    path = out / csv_name
    volumes = _volumes(cfg)
    cells = plan_cells(cfg, [vid for vid, _ in volumes])
    done = _read_done(path)
    if not path.exists():
        with path.open("w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(CSV_COLUMNS)
    truths = dict(volumes)
    ckpts: dict = {}
    for cell in cells:
        if cell.key in done:
            continue
        seed = cell_seed(cfg.seed, cell.key)
        run_log: dict = {"cell": list(cell.key)}
        t0 = time.time()
        v_train = float("nan")
        p = s = None
        error = ""
        try:
            ckpt = None
            if cell.prior is not None:
                ckpt = _prior_ckpt(cfg, cell.prior, ckpts)
                v_train = _v_train(cell.prior, ckpt)
            gt, maps, ksp = simulate_cell(truths[cell.volume_id], cell, cfg, seed)
            recon = reconstruct_cell(cell, gt, maps, ksp, ckpt, v_train, seed, run_log)
            p = psnr(recon, gt)
            s = ssim_sagittal_avg(recon, gt)
            if p is None:
                error = "identical"
        except Exception as e:  # noqa: BLE001 - recorded per cell, the run goes on
            error = f"{type(e).__name__}: {e}".replace("\n", " ")
            run_log["traceback"] = traceback.format_exc()
            log.error("cell %s failed: %s", cell.key, error)
        wall = time.time() - t0
        row = [cell.volume_id, cell.method_label, _fmt(v_train, 4), f"{cell.v_recon:.4f}",
               f"{cell.accel:g}", _fmt(p, 4), _fmt(s, 6), f"{wall:.2f}", seed, error]
        with path.open("a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(row)
        name = "_".join(str(k) for k in cell.key).replace("/", "-")
        (out / "logs" / f"{name}.json").write_text(json.dumps(run_log, default=_json_default))
        log.info("%s psnr=%s ssim=%s (%.1fs)", cell.key, _fmt(p, 2), _fmt(s, 4), wall)
    return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (tuple, set)):
        return list(o)
    return str(o)


def read_rows(csv_path) -> list[dict]:
    with Path(csv_path).open(newline="") as f:
        rows = list(csv.DictReader(f))
    missing = set(CSV_COLUMNS) - set(rows[0] if rows else CSV_COLUMNS)
    if missing:
        raise ValueError(f"CSV lacks columns {sorted(missing)}")
    return rows


def plot_curves(csv_path, x: str, out_path) -> Path:
    """PSNR against acceleration (``x='R'``) or V_recon/V_train (``x='shift'``),
    one line per (method, V_train) group."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if x not in ("R", "shift"):
        raise ValueError(f"x must be 'R' or 'shift', got {x!r}")
    with Path(csv_path).open(newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or set(CSV_COLUMNS) - set(reader.fieldnames):
            raise ValueError(f"{csv_path} is missing required columns")
        rows = list(reader)
    groups: dict = {}
    for r in rows:
        if r["error"] or not r["psnr_db"]:
            continue
        vt = float(r["v_train_mm"]) if r["v_train_mm"] else math.nan
        if x == "R":
            xv = float(r["accel"])
        else:
            xv = float(r["v_recon_mm"]) / vt if math.isfinite(vt) else float(r["v_recon_mm"])
        groups.setdefault((r["method"], r["v_train_mm"]), {}).setdefault(xv, []).append(float(r["psnr_db"]))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for (method, vt), pts in sorted(groups.items()):
        xs = sorted(pts)
        label = method if not vt else f"{method} (V_train={float(vt):g} mm)"
        ax.plot(xs, [np.mean(pts[v]) for v in xs], marker="o", label=label)
    ax.set_xlabel("acceleration R" if x == "R" else "V_recon / V_train")
    ax.set_ylabel("PSNR (dB)")
    if groups:
        ax.legend(fontsize=7)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path
