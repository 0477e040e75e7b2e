import json

import numpy as np
import pytest

from chromabv.cli import build_hash, main, read_config, run
from chromabv.densities import JumpConfig, JumpSpec, jump_k
from chromabv.energy import energy_reg
from chromabv.fields import decompose, synthetic_image
from chromabv.fileio import load_image, read_field, save_image, write_field
from chromabv.gnorm import GNormConfig, gnorm
from chromabv.solver import SolverParams, denoise, energy_trace_export


def _json(capsys):
    return json.loads(capsys.readouterr().out)


def test_qtf_eta_zero_prints_zero(capsys):
    assert run(["qtf", "--r", "1", "--s", "0,0,1", "--xi", "0,0", "--eta-zero"]) == 0
    assert capsys.readouterr().out.strip() == "0"


def test_gnorm_constant_field_is_domain_error(tmp_path, capsys):
    write_field(tmp_path / "c.cbf", np.full((4, 4), 0.3))
    assert run(["gnorm", "--input", str(tmp_path / "c.cbf")]) == 65
    assert "NonZeroMean" in capsys.readouterr().err


def test_exit_codes(tmp_path, capsys):
    assert run(["nope"]) == 64
    assert run([]) == 64
    assert run(["gnorm", "--input", str(tmp_path / "missing.cbf")]) == 74
    (tmp_path / "junk.png").write_bytes(b"junk")
    assert run(["decompose", "--input", str(tmp_path / "junk.png"), "--brightness", "b", "--chroma", "c"]) == 74
    assert run(["qtf", "--r", "1", "--s", "1,1,0", "--xi", "0,0", "--eta-zero"]) == 65
    capsys.readouterr()


def test_version_prints_build_hash(capsys):
    assert run(["--version"]) == 0
    out = capsys.readouterr().out
    assert build_hash() in out and len(build_hash()) >= 8


def test_main_exits_with_code(monkeypatch):
    monkeypatch.setattr("sys.argv", ["chromabv", "nope"])
    with pytest.raises(SystemExit) as err:
        main()
    assert err.value.code == 64


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nouter_iters = 2  # trailing\ninner_iters=5\n\nlambdas = 20, 20, 1\n")
    assert read_config(cfg) == {"outer_iters": "2", "inner_iters": "5", "lambdas": "20, 20, 1"}
    (tmp_path / "bad.cfg").write_text("unknown_key = 3\n")
    img = tmp_path / "in.png"
    save_image(synthetic_image(8), img)
    assert run(["denoise", "--input", str(img), "--output", str(tmp_path / "o.png"),
                "--config", str(tmp_path / "bad.cfg")]) == 64
    (tmp_path / "broken.cfg").write_text("no equals sign\n")
    assert run(["denoise", "--input", str(img), "--output", str(tmp_path / "o.png"),
                "--config", str(tmp_path / "broken.cfg")]) == 64
    capsys.readouterr()


def test_gamma_probe_writes_one_row_per_epsilon(tmp_path, capsys):
    cfg = tmp_path / "fast.cfg"
    cfg.write_text("outer_iters = 2\ninner_iters = 5\ngnorm_max_iter = 50\n")
    code = run(["gamma-probe", "--eps", "1,0.1,0.01", "--config", str(cfg), "--csv", str(tmp_path / "g.csv")])
    assert code in (0, 2)
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert len(lines) == 4 and [float(x.split(",")[0]) for x in lines[1:]] == [1.0, 0.1, 0.01]
    capsys.readouterr()


def test_denoise_matches_library_bit_for_bit(tmp_path, capsys):
    img_path = tmp_path / "in.png"
    save_image(synthetic_image(8, "quadrants"), img_path, bits=16)
    img = load_image(img_path)
    args = ["denoise", "--input", str(img_path), "--output", str(tmp_path / "o.png"), "--trace",
            str(tmp_path / "cli.csv"), "--lambdas", "20,20,1", "--eps", "1,0.1", "--outer-iters", "2",
            "--inner-iters", "5", "--seed", "4", "--json"]
    assert run(args) in (0, 2)
    out = _json(capsys)
    p = SolverParams(lambdas=(20, 20, 1), epsilon_schedule=(1, 0.1), outer_iters=2, inner_iters=5, seed=4)
    res = denoise(img, p)
    energy_trace_export(res, tmp_path / "lib.csv")
    assert (tmp_path / "cli.csv").read_bytes() == (tmp_path / "lib.csv").read_bytes()
    assert out["final_energy"] == res.trace[-1].total


def test_gnorm_matches_library(tmp_path, capsys):
    v = np.random.default_rng(0).standard_normal((6, 5))
    v -= v.mean()
    write_field(tmp_path / "v.cbf", v)
    assert run(["gnorm", "--input", str(tmp_path / "v.cbf"), "--json", "--certificate",
                str(tmp_path / "flux.cbf"), "--trace", str(tmp_path / "t.csv")]) == 0
    out = _json(capsys)
    lib = gnorm(v, GNormConfig())
    assert out["value"] == lib.value and out["lower_bound"] == lib.lower_bound
    assert np.array_equal(read_field(tmp_path / "flux.cbf").reshape(lib.flux.shape), lib.flux)
    assert (tmp_path / "t.csv").read_text().count("\n") == 1 + len(lib.trace)


def test_decompose_recompose_roundtrip(tmp_path, capsys):
    src = synthetic_image(6, "split")
    save_image(src, tmp_path / "s.png", bits=16)
    img = load_image(tmp_path / "s.png")
    assert run(["decompose", "--input", str(tmp_path / "s.png"), "--brightness", str(tmp_path / "b.cbf"),
                "--chroma", str(tmp_path / "c.cbf")]) == 0
    b, c = decompose(img)
    assert np.array_equal(read_field(tmp_path / "b.cbf"), b.values)
    assert np.array_equal(read_field(tmp_path / "c.cbf"), c.values)
    assert run(["recompose", "--brightness", str(tmp_path / "b.cbf"), "--chroma", str(tmp_path / "c.cbf"),
                "--output", str(tmp_path / "r.png"), "--bits", "16"]) == 0
    assert np.abs(load_image(tmp_path / "r.png").data - img.data).max() <= 1e-12
    capsys.readouterr()


def test_energy_matches_library(tmp_path, capsys):
    img = synthetic_image(8, "disk")
    save_image(img, tmp_path / "d.png", bits=16)
    loaded = load_image(tmp_path / "d.png")
    assert run(["energy", "--input", str(tmp_path / "d.png"), "--json"]) == 0
    out = _json(capsys)
    b, c = decompose(loaded)
    assert out["total"] == energy_reg(b, c).total


def test_jumpk_matches_library(tmp_path, capsys):
    q = tmp_path / "q.json"
    q.write_text(json.dumps({"a": [0.5, 1, 0, 0], "b": [1.5, 1, 0, 0], "nu": [0, 1]}))
    assert run(["jumpk", "--query", str(q), "--grid-n", "16", "--json"]) == 0
    out = _json(capsys)
    lib = jump_k(JumpSpec((0.5, (1, 0, 0)), (1.5, (1, 0, 0)), (0, 1)), JumpConfig(grid_n=16))
    assert out["value"] == lib.value
    assert run(["jumpk", "--a", "1,1,0,0", "--b", "1,0,1,0", "--grid-n", "16"]) == 0
    assert float(capsys.readouterr().out.strip()) < 2 * np.pi / 2


def test_noise_is_seeded(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(["noise", "--synthetic", "split", "--size", "8", "--output", str(tmp_path / f"{name}.png"),
                    "--seed", "7", "--bits", "16"]) == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    capsys.readouterr()
