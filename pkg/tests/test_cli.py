import json

import numpy as np
import pytest
import scipy.io

from anatprior.cli import main
from anatprior.pipeline import RunConfig, bundled_config

SMALL = {"synth": {"height": 12, "width": 12, "T": 60, "seed": 1},
         "iters": 60, "warmup": 10, "thin": 5}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_bundled_config_defaults():
    cfg = bundled_config()
    assert (cfg.iters, cfg.warmup, cfg.thin) == (10_000, 1_000, 5)
    assert cfg.schedule.n_draws == 1800
    assert (cfg.alpha, cfg.beta, cfg.ppm_threshold, cfg.effect_fraction) == (12.0, 5.0, 0.8, 0.002)


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        RunConfig(iters=100, warmup=10, thin=7)
    with pytest.raises(ValueError):
        RunConfig.from_dict({"nonsense": 1})
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"data": "missing_dir"}))
    with pytest.raises(FileNotFoundError):
        RunConfig.load(p)


def test_prior_ugl_3x3(tmp_path, capsys):
    mask = tmp_path / "mask.pgm"
    mask.write_bytes(b"P5\n3 3\n255\n" + b"\xff" * 9)
    assert main(["prior", "--prior", "ugl", "--mask", str(mask), "--out-dir", str(tmp_path / "p")]) == 0
    L = scipy.io.mmread(tmp_path / "p" / "prior.mtx").toarray()
    centre = L[4].reshape(3, 3)
    np.testing.assert_array_equal(centre, [[0, -1, 0], [-1, 4, -1], [0, -1, 0]])
    assert "scheme: ugl" in (tmp_path / "p" / "prior.mtx").read_text()


def test_stagewise_commands(tmp_path, capsys):
    d = tmp_path / "data"
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"height": 8, "width": 8, "T": 40}))
    assert main(["synth", "--config", str(spec), "--out-dir", str(d)]) == 0
    assert main(["tensor", "--image", str(d / "anat.f32"), "--downsample", "2",
                 "--out-dir", str(tmp_path / "t")]) == 0
    assert (tmp_path / "t" / "tensor_overlay.png").exists()
    assert main(["prior", "--prior", "4dir", "--tensor", str(tmp_path / "t" / "tensor.f32"),
                 "--out-dir", str(tmp_path / "p")]) == 0
    assert main(["fit", "--data", str(d), "--prior-matrix", str(tmp_path / "p" / "prior.mtx"),
                 "--iters", "30", "--warmup", "10", "--thin", "2", "--out-dir", str(tmp_path / "f")]) == 0
    meta = json.loads((tmp_path / "f" / "chain" / "chain.json").read_text())
    assert meta["n_draws"] == 10 and meta["meta"]["scheme"] == "4dir"
    capsys.readouterr()
    assert main(["ppm", "--chain", str(tmp_path / "f" / "chain"), "--data", str(d),
                 "--contrast", "0,1", "--out-dir", str(tmp_path / "m")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["gamma"] == pytest.approx(0.2, rel=0.02)
    for name in ("posterior_mean.f32", "ppm.f32", "ppm_active.pgm", "ppm.png"):
        assert (tmp_path / "m" / name).exists()


def test_pipeline_outputs_and_reproducibility(tmp_path, small_config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["pipeline", "--config", str(small_config), "--out-dir", str(a)]) == 0
    assert main(["pipeline", "--config", str(small_config), "--out-dir", str(b)]) == 0
    for name in ("posterior_mean.f32", "ppm.f32", "ppm_active.pgm", "manifest.json"):
        assert (a / name).exists()
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["chain"]["n_draws"] == 10
    assert "detection" in manifest["ppm"]


def test_priors_share_inputs(tmp_path, small_config):
    manifests = {}
    for scheme in ("ugl", "4dir", "anydir"):
        out = tmp_path / scheme
        assert main(["pipeline", "--config", str(small_config), "--prior", scheme, "--iters", "20",
                     "--warmup", "10", "--thin", "5", "--out-dir", str(out)]) == 0
        manifests[scheme] = json.loads((out / "manifest.json").read_text())
    ref = manifests["ugl"]
    for m in manifests.values():
        assert m["inputs"] == ref["inputs"]
        for name in ("anat_func.f32", "tensor.f32"):
            assert m["outputs"][name] == ref["outputs"][name]
    assert len({m["outputs"]["prior.mtx"] for m in manifests.values()}) == 3


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["fit", "--data", str(tmp_path / "nowhere"), "--prior-matrix", str(tmp_path / "x.mtx"),
                 "--out-dir", str(tmp_path)]) != 0
    assert "error" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"iters": 100, "warmup": 10, "thin": 7}))
    assert main(["pipeline", "--config", str(bad), "--out-dir", str(tmp_path / "o")]) != 0
    assert "divisible" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main(["pipeline", "--bogus-flag"])
    assert info.value.code != 0
    with pytest.raises(SystemExit):
        main(["pipeline", "--prior", "gaussian", "--out-dir", str(tmp_path)])
