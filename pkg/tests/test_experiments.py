import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from locrom import experiments as ex
from locrom import mesh


def test_block_dirichlet_examples():
    ident = np.eye(2)
    zero = np.zeros((2, 2))
    x = np.array([0.3, -0.7])
    assert np.allclose(ex.block_dirichlet(ident, zero, x), x)
    assert np.allclose(ex.block_dirichlet(zero, zero, x), 0.0)
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 2)), rng.standard_normal((2, 2))
    assert np.allclose(ex.block_dirichlet(a, b, np.zeros(2)), 0.0)
    with pytest.raises(ValueError):
        ex.block_dirichlet(np.eye(3), zero, x)


def test_beam_analytical_examples():
    E, nu, c = 30000.0, 0.2, 2.0
    _, _, s_mid = ex.beam_analytical(1.0, c / 2, E, nu, c)
    assert s_mid == pytest.approx(0.0)
    _, _, s_top = ex.beam_analytical(1.0, c, E, nu, c)
    assert s_top == pytest.approx(120.0)
    u0, _, _ = ex.beam_analytical(0.0, np.linspace(0, c, 5), E, nu, c)
    assert np.abs(u0).max() == 0.0


def test_config_from_nested_mapping():
    cfg = ex.ExperimentConfig.from_mapping({
        "experiment": "beam",
        "coarse": {"nx": 8, "ny": 2},
        "rce": {"preset": "type2", "n_verts_per_edge": 5},
        "material": {"e_matrix": 10000.0, "ratio": 3.0},
        "rangefinder": {"tol": 1e-4},
        "n_mpe": [4, 8],
        "seed": 7,
    })
    assert cfg.nx == 8 and cfg.n_verts_per_edge == 5
    assert cfg.e_aggregate == pytest.approx(30000.0)
    assert cfg.tol == 1e-4
    with pytest.raises(ValueError):
        ex.ExperimentConfig.from_mapping({"experiments": "block"})
    with pytest.raises(ValueError):
        ex.ExperimentConfig.from_mapping({"experiment": "cantilever"})


def test_config_round_trip():
    cfg = ex.ExperimentConfig(experiment="lpanel", lpanel_k=4, seed=3)
    again = ex.ExperimentConfig.from_mapping(cfg.to_mapping())
    assert again == cfg
    assert again.offline_hash() == cfg.offline_hash()


def test_presets_parse():
    import importlib.resources as resources

    for name in ("block.cfg", "beam.cfg", "lpanel.cfg"):
        text = (resources.files("locrom") / "presets" / name).read_text()
        cfg = ex.ExperimentConfig.from_mapping(yaml.safe_load(text))
        assert cfg.experiment in ("block", "beam", "lpanel")


def _tiny_block(out, **kw):
    defaults = dict(experiment="block", rce_preset="type1", n_verts_per_edge=5,
                    n_mpe=(2, 6), tol=1e-2, edge_pod_tol=1e-9, seed=11,
                    training_set="random", out=str(out))
    defaults.update(kw)
    return ex.ExperimentConfig(**defaults)


def test_compare_writes_artifacts_and_csv(tmp_path):
    cfg = _tiny_block(tmp_path / "run")
    result = ex.run_compare(cfg)
    out = Path(cfg.out)
    assert (out / "manifest_offline.json").exists()
    assert (out / "fom.npz").exists()
    assert (out / "errors.csv").exists()
    header = (out / "errors.csv").read_text().splitlines()[0]
    assert header == "basis,training_set,n_mpe,N_dofs,abs_err,rel_err"
    assert result["online"]["rows"][0]["rel_err"] > result["online"]["rows"][-1]["rel_err"]


def test_deterministic_csv_bytes(tmp_path):
    cfg1 = _tiny_block(tmp_path / "a")
    cfg2 = _tiny_block(tmp_path / "b")
    ex.run_compare(cfg1)
    ex.run_compare(cfg2)
    csv1 = (Path(cfg1.out) / "errors.csv").read_bytes()
    csv2 = (Path(cfg2.out) / "errors.csv").read_bytes()
    assert csv1 == csv2


def test_online_requires_artifacts(tmp_path):
    cfg = _tiny_block(tmp_path / "missing")
    with pytest.raises(FileNotFoundError):
        ex.run_online(cfg)


def test_online_rejects_stale_artifacts(tmp_path):
    cfg = _tiny_block(tmp_path / "stale")
    ex.run_compare(cfg)
    other = _tiny_block(tmp_path / "stale", seed=99)
    with pytest.raises(ValueError, match="hash"):
        ex.run_online(other)


def test_offline_persists_loadable_mode_sets(tmp_path):
    cfg = _tiny_block(tmp_path / "art")
    ex.run_offline(cfg)
    mode_set, meta = ex.load_mode_set(Path(cfg.out) / "basis_cfg000.npz")
    assert meta["hash"] == cfg.offline_hash()
    assert meta["seed"] == cfg.seed
    for e in mesh.EDGE_IDS:
        assert mode_set.modes[e].shape[0] >= 1


def test_hierarchical_skips_offline(tmp_path):
    cfg = _tiny_block(tmp_path / "hier", basis="hierarchical", n_mpe=(2,))
    manifest = ex.run_offline(cfg)
    assert manifest["configurations"] == []
    result = ex.run_compare(cfg)
    assert result["online"]["rows"][0]["training_set"] == "none"


def test_fom_manifest_contents(tmp_path):
    cfg = _tiny_block(tmp_path / "fom")
    ex.run_fom(cfg)
    meta = json.loads((Path(cfg.out) / "manifest_fom.json").read_text())
    assert meta["stage"] == "fom"
    assert meta["n_dofs"] > 0
    assert meta["global_norm"] > 0


def test_lpanel_load_is_upward(tmp_path):
    """Hat traction pulls the loaded edge upward (positive y displacement)."""
    cfg = ex.ExperimentConfig(experiment="lpanel", lpanel_k=3, rce_preset="type1",
                              n_verts_per_edge=5, n_mpe=(2,), tol=1e-2,
                              seed=1, training_set="random",
                              out=str(tmp_path / "lp"))
    ex.run_fom(cfg)
    problem = ex.make_problem(cfg)
    u, _, _ = ex.load_fom(cfg)
    gp = mesh.compose_patch(problem.coarse, range(problem.coarse.n_cells),
                            problem.rce, problem.global_bc)
    tip = np.flatnonzero((np.abs(gp.mesh.node_coords[:, 0] - 6.0) < 1e-9)
                         & (np.abs(gp.mesh.node_coords[:, 1] - 3.0) < 1e-9))[0]
    assert u[2 * tip + 1] > 0


def test_projection_study_outputs(tmp_path):
    cfg = ex.ExperimentConfig(experiment="projection_study", lpanel_k=3,
                              rce_preset="type1", n_verts_per_edge=5,
                              n_mpe=(1, 2, 4), tol=1e-3, edge_pod_tol=1e-10,
                              seed=5, n_test=10, out=str(tmp_path / "proj"))
    manifest = ex.run_projection_study(cfg)
    rows = manifest["rows"]
    kinds = {(r["basis"], r["training_set"], r["testing_set"]) for r in rows}
    for basis in ("empirical", "spectral"):
        for training in ("soi", "random"):
            for testing in ("random", "fom"):
                assert (basis, training, testing) in kinds
    emp = [r for r in rows if r["basis"] == "empirical"
           and r["training_set"] == "random" and r["testing_set"] == "random"]
    errs = [r["max_rel_proj_err"] for r in sorted(emp, key=lambda r: r["n_local"])]
    assert all(errs[i] >= errs[i + 1] - 1e-12 for i in range(len(errs) - 1))
    assert (Path(cfg.out) / "projection.csv").exists()


def test_offline_worker_pool_matches_serial(tmp_path, monkeypatch):
    serial = _tiny_block(tmp_path / "serial")
    ex.run_offline(serial)
    monkeypatch.setenv("LOCROM_WORKERS", "2")
    pooled = _tiny_block(tmp_path / "pooled")
    ex.run_offline(pooled)
    a, _ = ex.load_mode_set(Path(serial.out) / "basis_cfg000.npz")
    b, _ = ex.load_mode_set(Path(pooled.out) / "basis_cfg000.npz")
    for e in mesh.EDGE_IDS:
        assert np.array_equal(a.modes[e], b.modes[e])


def test_online_exports_rom_artifacts(tmp_path):
    from locrom import rom
    cfg = _tiny_block(tmp_path / "romx")
    ex.run_compare(cfg)
    problem = ex.make_problem(cfg)
    path = Path(cfg.out) / f"rom_n{cfg.n_mpe[-1]:03d}.npz"
    assert path.exists()
    A_N, f_N, dm = rom.load_rom(path, problem.coarse)
    assert A_N.shape[0] == dm.n_dofs == f_N.shape[0]
