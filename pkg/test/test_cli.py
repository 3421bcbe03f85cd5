# Test the rfit command line

# Copyright 2024 Nicko van Someren
# SPDX: MIT
# See LICENSE.md for the full license text.

import copy
import csv
import json

import numpy as np
import pytest

from rfit import __version__
from rfit.cli import EXIT_FAILED, EXIT_INPUT, EXIT_OK, MANIFEST, main
from rfit.optimize import SceneObjective
from rfit.radar import SurrogateConfig
from rfit.scenefile import load_observation, load_scene
from rfit.utils import file_digest

from conftest import F0, mesh_json, rectangle

WAVELENGTH = 299792458.0 / F0


def _rows(path):
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture
def occlusion_document(scene_document):
    """The bistatic occlusion scene as a scene file"""
    document = copy.deepcopy(scene_document)
    document["mesh"] = mesh_json(rectangle([1.0, -0.5, 0.002], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]))
    document["array"] = {"tx": [0, 0, 0], "rx": [[2.0, 0, 0]]}
    return document


def test_simulate(scene_document, write_scene, tmp_path):
    """Simulation writes the CIR, the profiles and a manifest of digests"""
    scene = write_scene(scene_document)
    out = tmp_path / "out"
    assert main(["--out-dir", str(out), "simulate", str(scene)]) == EXIT_OK
    rows = _rows(out / "cir.csv")
    assert len(rows) == 1 and rows[0]["order"] == "1"
    assert len(_rows(out / "profile.csv")) == 128
    manifest = json.loads((out / MANIFEST).read_text(encoding="utf-8"))
    assert manifest["command"] == "simulate"
    assert manifest["version"] == __version__
    assert manifest["scene_sha256"] == file_digest(scene)
    assert manifest["outputs"]["cir.csv"] == file_digest(out / "cir.csv")


def test_simulate_spectrum(scene_document, write_scene, tmp_path):
    """A requested spectrum is written as a table and as a binary grid"""
    scene_document["array"]["rx"] = [[0, 0, 0], [0.002, 0, 0], [0, 0.002, 0], [0.002, 0.002, 0]]
    out = tmp_path / "out"
    argv = ["--out-dir", str(out), "simulate", str(write_scene(scene_document)),
            "--spectrum", "beamform", "--grid-azimuth", "11", "--grid-elevation", "5"]
    assert main(argv) == EXIT_OK
    assert load_observation(out / "spectrum.grid").shape == (11, 5)
    np.testing.assert_array_equal(load_observation(out / "spectrum.csv"), load_observation(out / "spectrum.grid"))


def test_gradcheck_with_occlusion(occlusion_document, write_scene, tmp_path):
    """The boundary term lets the gradient check pass across an occlusion event"""
    scene = str(write_scene(occlusion_document))
    out = tmp_path / "out"
    argv = ["--out-dir", str(out), "gradcheck", scene, "--params", "translation.z", "rotation.y"]
    assert main(argv) == EXIT_OK
    rows = _rows(out / "gradcheck.csv")
    assert [r["param_name"] for r in rows] == ["translation.z", "rotation.y"]
    argv = ["--out-dir", str(out), "gradcheck", scene, "--params", "translation.z", "--interior-only"]
    assert main(argv) == EXIT_FAILED


def test_gradcheck_smooth_plate(scene_document, write_scene, tmp_path):
    """Every parameter of the facing plate passes"""
    argv = ["--out-dir", str(tmp_path), "gradcheck", str(write_scene(scene_document))]
    assert main(argv) == EXIT_OK
    assert len(_rows(tmp_path / "gradcheck.csv")) == 7


def test_sweep(scene_document, write_scene, tmp_path):
    """Sweeps tabulate both losses around the current value"""
    argv = ["--out-dir", str(tmp_path), "sweep", str(write_scene(scene_document)), "--param", "translation.z",
            "--range", str(-WAVELENGTH), str(WAVELENGTH), "--relative", "--steps", "21"]
    assert main(argv) == EXIT_OK
    rows = _rows(tmp_path / "sweep.csv")
    assert len(rows) == 21
    assert set(rows[0]) == {"translation.z", "loss_exact", "loss_surrogate"}
    assert float(rows[10]["loss_surrogate"]) == pytest.approx(0.0, abs=1e-20)
    assert float(rows[0]["translation.z"]) == pytest.approx(-WAVELENGTH)


def _observed_truth(scene_document, write_scene, tmp_path, offset):
    """Simulate the surrogate profile of the plate moved by ``offset`` along z"""
    truth = copy.deepcopy(scene_document)
    truth["params"]["translation"] = [0, 0, offset]
    out = tmp_path / "truth"
    argv = ["--out-dir", str(out), "simulate", str(write_scene(truth, "truth.json")), "--profile", "surrogate"]
    assert main(argv) == EXIT_OK
    return out / "profile.csv"


def test_fit_converges(scene_document, write_scene, tmp_path):
    """The surrogate fit recovers the displaced plate and writes the fitted scene"""
    offset = 10 * WAVELENGTH
    observation = _observed_truth(scene_document, write_scene, tmp_path, offset)
    scene = write_scene(scene_document)
    loaded = load_scene(scene)
    objective = SceneObjective(loaded.scene, load_observation(observation), loaded.radar, loaded.loss,
                               SurrogateConfig.for_radar(loaded.radar))
    h = 1e-6
    theta = loaded.scene.params.pack()
    theta[2] = offset
    up, down = theta.copy(), theta.copy()
    up[2] += h
    down[2] -= h
    curvature = (objective.gradient_at(up)[2] - objective.gradient_at(down)[2]) / (2 * h)

    out = tmp_path / "fit"
    argv = ["--out-dir", str(out), "fit", str(scene), str(observation), "--lr", repr(float(1.0 / curvature)),
            "--max-iter", "200", "--tol", "1e-10", "--free", "translation.z"]
    assert main(argv) == EXIT_OK
    fitted = load_scene(out / "fitted_scene.json")
    assert abs(fitted.scene.params.translation[2] - offset) < WAVELENGTH / 2
    assert _rows(out / "trace.csv")[-1]["iter"] != "0"


def test_fit_without_convergence_fails(scene_document, write_scene, tmp_path):
    """A fit that stops at its iteration limit exits with failure and a one-row trace"""
    observation = _observed_truth(scene_document, write_scene, tmp_path, 10 * WAVELENGTH)
    out = tmp_path / "fit"
    argv = ["--out-dir", str(out), "fit", str(write_scene(scene_document)), str(observation),
            "--lr", "1e-3", "--max-iter", "0"]
    assert main(argv) == EXIT_FAILED
    assert len(_rows(out / "trace.csv")) == 1


def test_replay_reproduces_outputs(scene_document, write_scene, tmp_path):
    """Replaying a manifest writes byte-identical outputs"""
    out = tmp_path / "out"
    argv = ["--seed", "3", "--out-dir", str(out), "simulate", str(write_scene(scene_document)),
            "--profile", "surrogate"]
    assert main(argv) == EXIT_OK
    first = {name: file_digest(out / name) for name in ("cir.csv", "profile.csv")}
    (out / "profile.csv").unlink()
    assert main(["replay", str(out / MANIFEST)]) == EXIT_OK
    assert {name: file_digest(out / name) for name in first} == first


def test_bad_scene_is_an_input_error(scene_document, write_scene, tmp_path, capsys):
    """Invalid scene files exit with status 2 and a message on stderr"""
    del scene_document["radar"]
    assert main(["--out-dir", str(tmp_path), "simulate", str(write_scene(scene_document))]) == EXIT_INPUT
    assert "rfit: error:" in capsys.readouterr().err
    assert not (tmp_path / MANIFEST).exists()


def test_truncated_observation_is_an_input_error(scene_document, write_scene, tmp_path, capsys):
    """A grid cut off inside its header exits with status 2"""
    observation = tmp_path / "observed.grid"
    observation.write_bytes(b"RFGRID01\x01\x00")
    argv = ["--out-dir", str(tmp_path / "fit"), "fit", str(write_scene(scene_document)), str(observation),
            "--lr", "1e-3"]
    assert main(argv) == EXIT_INPUT
    assert "Truncated grid header" in capsys.readouterr().err


def test_bad_replay_manifest(tmp_path, capsys):
    """Replay refuses files that are not run manifests"""
    path = tmp_path / "manifest.json"
    path.write_text("[]", encoding="utf-8")
    assert main(["replay", str(path)]) == EXIT_INPUT
    assert "not a run manifest" in capsys.readouterr().err


def test_usage_errors(capsys):
    """Argument errors and the version flag behave like argparse"""
    assert main(["simulate"]) == EXIT_INPUT
    assert main(["--version"]) == EXIT_OK
    assert __version__ in capsys.readouterr().out
