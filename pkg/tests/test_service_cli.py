import csv
import json
import warnings

import numpy as np
import pytest

from qdpcqa import __version__
from qdpcqa.cli import main
from qdpcqa.pcproj import PointCloud, load_image, save_ply
from qdpcqa.service import create_app
from qdpcqa.synthetic import SyntheticDomainSpec, make_synthetic_domains

with warnings.catch_warnings():
    warnings.simplefilter("ignore", DeprecationWarning)
    from fastapi.testclient import TestClient

TINY_TRAIN = """\
total_iters: 12
warmup_iters: 3
batch_size: 8
widths: [2, 2, 4, 4]
predictor_hidden: 4
discriminator_hidden: 4
eval_every: 6
synthetic: {n_source: 60, n_target: 40}
"""


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


@pytest.fixture
def cloud(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "c.ply"
    save_ply(path, PointCloud(rng.uniform(-1, 1, (300, 3)), rng.integers(0, 256, (300, 3))), binary=True)
    return path


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


def test_health(client):
    r = client.get("/health")
    assert r.status_code == 200 and r.json() == {"status": "ok", "version": __version__}


def test_metrics_endpoint(client):
    r = client.post("/metrics", json={"pred": [1, 2, 3, 4], "target": [2, 4, 6, 9]})
    assert r.status_code == 200
    assert r.json()["srocc"] == 1.0
    assert client.post("/metrics", json={"pred": [1, 1, 1], "target": [1, 2, 3]}).status_code == 400
    assert client.post("/metrics", json={"pred": [1, 2], "target": [1, 2, 3]}).status_code == 422


def test_project_endpoint(client, cloud, tmp_path):
    r = client.post("/project", json={"input": str(cloud), "out": str(tmp_path / "mv.ppm"), "face_res": 16})
    assert r.status_code == 200
    body = r.json()
    assert (body["height"], body["width"], body["n_points"]) == (32, 48, 300)
    assert body["face_boxes"]["-Z"] == [16, 32, 16, 16]
    assert load_image(tmp_path / "mv.ppm").shape == (32, 48, 3)
    r = client.post("/project", json={"input": str(tmp_path / "none.ply"), "out": str(tmp_path / "x.ppm")})
    assert r.status_code == 404
    r = client.post("/project", json={"input": str(cloud), "out": str(tmp_path / "x.ppm"), "face_res": 4})
    assert r.status_code == 422


def test_cli_project_crops(capsys, cloud, tmp_path):
    out = tmp_path / "crop.png"
    code, body, _ = run_cli(capsys, "project", "--input", str(cloud), "--out", str(out), "--face-res", "32",
                            "--seed", "3", "--mode", "train", "--side", "24")
    assert code == 0 and (body["height"], body["width"]) == (24, 24)
    first = load_image(out)
    run_cli(capsys, "project", "--input", str(cloud), "--out", str(out), "--face-res", "32",
            "--seed", "3", "--mode", "train", "--side", "24")
    assert np.array_equal(first, load_image(out))


def test_cli_project_errors_exit_nonzero(capsys, tmp_path):
    bad = tmp_path / "bad.ply"
    bad.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float\nend_header\n0\n")
    code, _, err = run_cli(capsys, "project", "--input", str(bad), "--out", str(tmp_path / "o.ppm"))
    assert code == 1 and "line 4" in err
    code, _, err = run_cli(capsys, "project", "--input", str(tmp_path / "nope.ply"), "--out", str(tmp_path / "o.ppm"))
    assert code == 1
    code, _, _ = run_cli(capsys, "project", "--input", str(bad), "--out", str(tmp_path / "o.ppm"),
                         "--face-res", "1024", "--mode", "test", "--side", "4096")
    assert code == 1
    with pytest.raises(SystemExit) as exc:
        main(["project", "--out", "x.ppm"])
    assert exc.value.code != 0


def test_cli_train_then_eval(capsys, tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(TINY_TRAIN)
    code, body, _ = run_cli(capsys, "train", "--config", str(cfg), "--out-dir", str(tmp_path / "run"))
    assert code == 0 and body["iterations"] == 12
    rows = list(csv.DictReader(open(body["metric_log"])))
    assert [r["iter"] for r in rows] == ["6", "12"]
    assert open(body["embedding_plot"]).read().lstrip().startswith("<?xml")
    assert open(body["mix_log"]).readline().strip() == "iteration,anchor,partner,lam,stage,y_mix"

    _, target = make_synthetic_domains(SyntheticDomainSpec.shifted(n_source=10, n_target=25), np.random.default_rng(9))
    target.save(tmp_path / "t.npz")
    code, ev, _ = run_cli(capsys, "eval", "--checkpoint", body["checkpoint"], "--target", str(tmp_path / "t.npz"),
                          "--out", str(tmp_path / "pred.csv"))
    assert code == 0 and ev["n"] == 25
    assert set(ev["metrics"]) == {"plcc", "srocc", "krocc", "rmse"}
    preds = list(csv.DictReader(open(tmp_path / "pred.csv")))
    assert len(preds) == 25 and all(1.0 <= float(p["prediction"]) <= 5.0 for p in preds)


def test_cli_train_rejects_unknown_keys(capsys, tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(TINY_TRAIN + "learning_rate: 0.1\n")
    code, _, err = run_cli(capsys, "train", "--config", str(cfg), "--out-dir", str(tmp_path / "run"))
    assert code == 1 and "learning_rate" in err


def test_cli_eval_missing_checkpoint(capsys, tmp_path):
    code, _, err = run_cli(capsys, "eval", "--checkpoint", str(tmp_path / "x.pt"), "--target", str(tmp_path))
    assert code == 1 and "404" in err


def test_cli_ablate_writes_csv(capsys, tmp_path):
    code, body, _ = run_cli(capsys, "ablate", "--suite", "da", "--seeds", "1", "--iters", "6",
                            "--out-dir", str(tmp_path))
    assert code == 0
    assert set(body["medians"]) == {"single_domain_aug", "dual_domain_aug"}
    header = open(body["summary"]).readline().strip()
    assert header == "variant,n_seeds,plcc,srocc,krocc,rmse"


def test_cli_unreachable_server(capsys, cloud, tmp_path):
    code, _, err = run_cli(capsys, "--server", "http://127.0.0.1:9", "project", "--input", str(cloud),
                           "--out", str(tmp_path / "o.ppm"))
    assert code == 1 and err.startswith("error:")
