import numpy as np
import pytest

from msimrt import pipeline as pl
from msimrt.artifacts import read_dose, read_scenarios, write_dose, write_scenarios
from msimrt.phantom import CaseSpec, KernelParams
from msimrt.scenario import sample_miga


def test_dose_round_trip_is_exact(tmp_path, rng):
    m = rng.normal(size=(7, 4))
    write_dose(tmp_path / "m.dose", m)
    back = read_dose(tmp_path / "m.dose")
    assert back.shape == (7, 4) and np.array_equal(back, m)
    raw = (tmp_path / "m.dose").read_bytes()
    assert raw[:4] == b"DOSE" and len(raw) == 12 + 8 * 28


def test_dose_rejects_bad_files(tmp_path):
    (tmp_path / "bad.dose").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError):
        read_dose(tmp_path / "bad.dose")
    write_dose(tmp_path / "cut.dose", np.ones((3, 3)))
    data = (tmp_path / "cut.dose").read_bytes()
    (tmp_path / "cut.dose").write_bytes(data[:-8])
    with pytest.raises(ValueError):
        read_dose(tmp_path / "cut.dose")


def test_run_config_yaml_round_trip(tmp_path):
    cfg = pl.RunConfig(case=CaseSpec(name="x", kernel=KernelParams(sigma_mm=2.5)), F=3, P=4, risk="E+worst",
                       margin_mm=1.0, sddp={"max_iters": 7})
    cfg.save(tmp_path / "c.yaml")
    back = pl.RunConfig.load(tmp_path / "c.yaml")
    assert back.to_dict() == cfg.to_dict()
    assert back.model_id == cfg.model_id


def test_unknown_config_keys_rejected(tmp_path):
    with pytest.raises(ValueError):
        pl.RunConfig.from_dict({"F": 2, "fractions": 3})


def test_scenario_sidecar_round_trip(tmp_path, rng):
    scen = sample_miga(3.0, 5, seed=9)
    mats = [rng.random((2, 3)) for _ in range(5)]
    write_scenarios(scen, tmp_path / "s", mats)
    back = read_scenarios(tmp_path / "s")
    assert np.allclose(back.displacements, scen.displacements)
    assert np.allclose(back.probabilities, scen.probabilities)
    assert np.array_equal(read_dose(tmp_path / "s_p4.dose"), mats[4])
