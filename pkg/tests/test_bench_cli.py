import csv
import json

import numpy as np
import pytest
from PIL import Image

from resrecon import io
from resrecon.bench import CSV_COLUMNS, ConfigError, ExperimentConfig, plot_curves, run_experiment
from resrecon.cli import main


@pytest.fixture(scope="module")
def ckpt_dir(tmp_path_factory, tiny_ckpt):
    d = tmp_path_factory.mktemp("ck") / "prior"
    tiny_ckpt.config.train_voxel_sizes = [(1.0, 1.0)]
    tiny_ckpt.save(d)
    return d


def _cfg(tmp_path, ckpt_dir, **over):
    d = {
        "out_dir": str(tmp_path / "run"),
        "seed": 1,
        "dataset": {"kind": "phantom", "seeds": [1, 2], "dims": [8, 8, 8], "coils": 2, "noise_sigma": 0.01},
        "mask": {"kind": "poisson", "accelerations": [2, 3]},
        "priors": [{"tag": "m", "checkpoint": str(ckpt_dir)}],
        "shift": {"v_recon": [1.0]},
        "methods": [{"name": "variational", "options": {"lam": 0.5, "iters": 3, "S": 2, "slab_size": 2}}],
    }
    d.update(over)
    return d


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_header_only_for_empty_shift(tmp_path, ckpt_dir):
    cfg = ExperimentConfig.from_dict(_cfg(tmp_path, ckpt_dir, shift={"v_recon": []}))
    path = run_experiment(cfg)
    assert path.read_text() == ",".join(CSV_COLUMNS) + "\n"


def test_counting_and_resume(tmp_path, ckpt_dir):
    cfg = ExperimentConfig.from_dict(_cfg(tmp_path, ckpt_dir))
    path = run_experiment(cfg)
    rows = _rows(path)
    assert len(rows) == 4
    assert {r["method"] for r in rows} == {"variational@m"}
    assert all(r["error"] == "" and float(r["psnr_db"]) > 0 and -1 <= float(r["ssim"]) <= 1 for r in rows)
    before = path.read_bytes()
    run_experiment(cfg)
    assert path.read_bytes() == before
    assert len(list((tmp_path / "run" / "logs").glob("*.json"))) == 4


def test_rerun_from_scratch_is_deterministic(tmp_path, ckpt_dir):
    a = _rows(run_experiment(ExperimentConfig.from_dict(_cfg(tmp_path / "a", ckpt_dir))))
    b = _rows(run_experiment(ExperimentConfig.from_dict(_cfg(tmp_path / "b", ckpt_dir))))
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_s"} for r in rows]  # noqa: E731
    assert strip(a) == strip(b)


def test_plot_legend_and_png(tmp_path, ckpt_dir):
    d = _cfg(tmp_path, ckpt_dir, methods=[
        {"name": "zero_filled"}, {"name": "l1_wavelet", "options": {"mu": 0.01, "iters": 5}},
        {"name": "variational", "options": {"lam": 0.5, "iters": 2, "S": 2, "slab_size": 2}}])
    path = run_experiment(ExperimentConfig.from_dict(d))
    out = tmp_path / "curves.png"
    plot_curves(path, "R", out)
    with Image.open(out) as im:
        assert im.format == "PNG" and im.size[0] > 0
    assert len({(r["method"], r["v_train_mm"]) for r in _rows(path)}) == 3
    empty = tmp_path / "empty.csv"
    empty.write_text(",".join(CSV_COLUMNS) + "\n")
    plot_curves(empty, "shift", tmp_path / "empty.png")
    assert (tmp_path / "empty.png").stat().st_size > 0


def test_plot_legend_entries(tmp_path, monkeypatch):
    import matplotlib.pyplot as plt
    rows = [["v", m, vt, "1.0000", R, "30.0", "0.9", "1.0", "0", ""]
            for m, vt in [("a", "1.0000"), ("b", "1.0000"), ("a", "2.0000")] for R in (2, 4)]
    p = tmp_path / "r.csv"
    with p.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        w.writerows(rows)
    seen = {}
    monkeypatch.setattr(plt, "close", lambda fig=None: seen.setdefault("fig", fig))
    plot_curves(p, "R", tmp_path / "r.png")
    fig = seen.get("fig") or plt.gcf()
    assert len(fig.axes[0].get_legend().get_texts()) == 3


def test_config_errors(tmp_path, ckpt_dir):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(_cfg(tmp_path, ckpt_dir, mask={"accelerations": [0.5]}))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(_cfg(tmp_path, ckpt_dir, priors=[{"tag": "x", "checkpoint": "/nope"}]))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(_cfg(tmp_path, ckpt_dir, methods=[{"name": "magic"}]))


def _toml(d):
    def val(v):
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, list):
            return "[" + ", ".join(val(x) for x in v) + "]"
        return json.dumps(v)
    lines = [f"{k} = {val(v)}" for k, v in d.items() if not isinstance(v, (dict, list)) or
             (isinstance(v, list) and not (v and isinstance(v[0], dict)))]
    for k, v in d.items():
        if isinstance(v, dict):
            lines.append(f"[{k}]")
            lines += [f"{kk} = {val(vv)}" for kk, vv in v.items()]
        elif isinstance(v, list) and v and isinstance(v[0], dict):
            for item in v:
                lines.append(f"[[{k}]]")
                sub = {kk: vv for kk, vv in item.items() if not isinstance(vv, dict)}
                lines += [f"{kk} = {val(vv)}" for kk, vv in sub.items()]
                for kk, vv in item.items():
                    if isinstance(vv, dict):
                        lines.append(f"[{k}.{kk}]")
                        lines += [f"{a} = {val(b)}" for a, b in vv.items()]
    return "\n".join(lines) + "\n"


def test_cli_bench_exit_codes(tmp_path, ckpt_dir):
    good = tmp_path / "good.toml"
    good.write_text(_toml(_cfg(tmp_path, ckpt_dir, mask={"kind": "poisson", "accelerations": [2]})))
    assert main(["bench", "--config", str(good)]) == 0
    bad = tmp_path / "bad.toml"
    bad.write_text("this is = = not toml")
    assert main(["bench", "--config", str(bad)]) == 2
    failing = tmp_path / "fail.toml"
    d = _cfg(tmp_path, ckpt_dir, out_dir=str(tmp_path / "fail"))
    d["methods"][0]["options"]["slab_size"] = 20  # larger than the 8-voxel volume
    failing.write_text(_toml(d))
    assert main(["bench", "--config", str(failing)]) == 3
    rows = _rows(tmp_path / "fail" / "results.csv")
    assert rows and all("slab size" in r["error"] for r in rows)


def test_cli_pipeline(tmp_path, ckpt_dir, capsys):
    p = lambda name: str(tmp_path / name)  # noqa: E731
    assert main(["phantom", "--dims", "8", "8", "8", "--seed", "3", "--out", p("gt.cvol")]) == 0
    assert main(["coilmaps", "--dims", "8", "8", "8", "--coils", "2", "--out", p("c.maps")]) == 0
    assert main(["mask", "--shape", "8", "8", "--R", "2", "--acs", "2", "2", "--out", p("m.cmsk")]) == 0
    info = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert info["kind"] == "poisson"
    assert main(["simulate", "--volume", p("gt.cvol"), "--maps", p("c.maps"), "--mask", p("m.cmsk"),
                 "--noise", "0.01", "--out", p("k.cksp")]) == 0
    for method in ("zero_filled", "l1_wavelet", "variational"):
        (tmp_path / method).mkdir()
        out = str(tmp_path / method / "out.cvol")
        args = ["recon", "--ksp", p("k.cksp"), "--maps", p("c.maps"), "--method", method, "--out", out]
        if method == "variational":
            cfg = tmp_path / "recon.toml"
            cfg.write_text("[variational]\nlam = 0.5\niters = 3\nS = 2\nslab_size = 2\n")
            args += ["--ckpt", str(ckpt_dir), "--config", str(cfg)]
        assert main(args) == 0
        run = json.loads((tmp_path / method / "run.json").read_text())
        assert run["method"] == method
        assert io.read_cvol(out).dims == (8, 8, 8)
    capsys.readouterr()
    assert main(["eval", "--recon", str(tmp_path / "l1_wavelet" / "out.cvol"), "--ref", p("gt.cvol")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert np.isfinite(res["psnr_db"]) and -1 <= res["ssim"] <= 1
    assert main(["recon", "--ksp", p("k.cksp"), "--maps", p("c.maps"), "--method", "dds", "--out", p("x.cvol")]) == 2
    assert main(["eval", "--recon", p("missing.cvol"), "--ref", p("gt.cvol")]) == 2


def test_cli_train_small(tmp_path):
    cfg = tmp_path / "train.toml"
    cfg.write_text('[prior]\nseeds = [0]\ndims = [8, 8, 8]\nsteps = 2\nbatch_size = 2\nema_start = 0\n'
                   '[prior.model]\nbase_channels = 8\nchannel_mults = [1, 2]\nattention_levels = [1]\ngroups = 4\n')
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "ck")]) == 0
    assert (tmp_path / "ck" / "meta.json").exists()
