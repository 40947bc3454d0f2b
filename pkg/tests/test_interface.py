import io
import json
import time
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from conftest import block_image
from moveact.cli import main
from moveact.config import Config
from moveact.service import JobManager, create_app

FAST_OVERRIDES = {
    "backbone": {"num_steps": 10},
    "objective": {"iterations": 0, "update_step_index": 1},
}


def save_image(path: Path, seed: int = 7) -> Path:
    arr = (block_image(seed) * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path)
    return path


def png_bytes(seed: int = 7) -> bytes:
    buf = io.BytesIO()
    arr = (block_image(seed) * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def fast_config_file(tmp_path: Path) -> Path:
    path = tmp_path / "fast.json"
    path.write_text(json.dumps(FAST_OVERRIDES))
    return path


def dataset_file(tmp_path: Path, image: Path, n: int = 1, broken: bool = False) -> Path:
    rows = []
    for i in range(n):
        rows.append({
            "schema_version": 1, "id": f"p{i}", "image_path": str(image),
            "inversion_prompt": "A photo of cat", "editing_prompt": "A running cat",
            "object_word": "cat", "action_word": "running", "bbox": [0.25, 0.0, 0.75, 0.5],
        })
    if broken:
        rows.append({
            "schema_version": 1, "id": "missing", "image_path": str(tmp_path / "gone.png"),
            "inversion_prompt": "A photo of cat", "editing_prompt": "A running cat",
            "object_word": "cat", "action_word": "running", "bbox": [0.25, 0.0, 0.75, 0.5],
        })
    path = tmp_path / "dataset.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    return path


# --------------------------------------------------------------------- CLI

def test_cli_edit_happy_path(tmp_path, capsys):
    image = save_image(tmp_path / "in.png")
    start = time.monotonic()
    code = main([
        "edit", "--image", str(image),
        "--inv-prompt", "A photo of cat", "--edit-prompt", "A running cat",
        "--object", "cat", "--bbox", "0.25,0.0,0.75,0.5",
        "--backbone", "toy", "--out", str(tmp_path / "runs"),
        "--set", "objective.iterations=5",
    ])
    elapsed = time.monotonic() - start
    assert code == 0
    assert elapsed < 60
    run_dir = Path(capsys.readouterr().out.strip())
    assert (run_dir / "edited.png").exists()


def test_cli_edit_bbox_parse_and_validation(tmp_path):
    image = save_image(tmp_path / "in.png")
    base = ["edit", "--image", str(image), "--inv-prompt", "A photo of cat",
            "--edit-prompt", "A running cat", "--object", "cat",
            "--backbone", "toy", "--out", str(tmp_path / "runs")]
    assert main(base + ["--bbox", "0.9,0.1,0.2,0.5"]) == 2      # x0 > x1
    assert main(base + ["--bbox", "0.1,0.1,0.5"]) == 2          # wrong arity
    assert main(["edit", "--image", str(tmp_path / "none.png"), "--inv-prompt", "A photo of cat",
                 "--edit-prompt", "A running cat", "--object", "cat", "--bbox", "0.1,0.1,0.5,0.5",
                 "--backbone", "toy"]) == 2                      # unreadable image
    assert main(base + ["--bbox", "0.1,0.1,0.5,0.5", "--set", "objective.iterations=5",
                        "--object", "dog"]) == 2                 # object word not in prompt


def test_cli_missing_required_flag_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["edit", "--image", "x.png", "--inv-prompt", "A photo of cat",
              "--edit-prompt", "A running cat", "--bbox", "0,0,1,1"])
    assert exc.value.code == 2


def test_cli_eval_runs_and_reports(tmp_path, capsys):
    image = save_image(tmp_path / "in.png")
    dataset = dataset_file(tmp_path, image)
    code = main(["eval", "--dataset", str(dataset), "--out", str(tmp_path / "out"),
                 "--backbone", "toy", "--config", str(fast_config_file(tmp_path)),
                 "--scorer", "mock"])
    assert code == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["n"] == 1


def test_cli_eval_schema_error_exits_2(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"schema_version": 1, "id": "x"}\n')
    assert main(["eval", "--dataset", str(bad), "--out", str(tmp_path / "out"),
                 "--backbone", "toy"]) == 2


def test_cli_eval_strict_fails_on_item_errors(tmp_path):
    image = save_image(tmp_path / "in.png")
    dataset = dataset_file(tmp_path, image, broken=True)
    cfg = fast_config_file(tmp_path)
    assert main(["eval", "--dataset", str(dataset), "--out", str(tmp_path / "o1"),
                 "--backbone", "toy", "--config", str(cfg), "--strict"]) == 1
    assert main(["eval", "--dataset", str(dataset), "--out", str(tmp_path / "o2"),
                 "--backbone", "toy", "--config", str(cfg)]) == 0


def test_cli_ablate_update_step_values(tmp_path):
    image = save_image(tmp_path / "in.png")
    dataset = dataset_file(tmp_path, image)
    code = main(["ablate", "--dataset", str(dataset), "--out", str(tmp_path / "out"),
                 "--kind", "update_step", "--values", "25,35,45",
                 "--backbone", "toy", "--config", str(fast_config_file(tmp_path))])
    assert code == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert [g["value"] for g in report["groups"]] == [25, 35, 45]
    assert [g["is_paper_default"] for g in report["groups"]] == [False, True, False]


def test_cli_ablate_layer_set_values(tmp_path):
    image = save_image(tmp_path / "in.png")
    dataset = dataset_file(tmp_path, image)
    code = main(["ablate", "--dataset", str(dataset), "--out", str(tmp_path / "out"),
                 "--kind", "layer_set", "--values", "decoder,encoder,all",
                 "--backbone", "toy", "--config", str(fast_config_file(tmp_path))])
    assert code == 0


def test_cli_ablate_unknown_kind_exits_2(tmp_path):
    image = save_image(tmp_path / "in.png")
    dataset = dataset_file(tmp_path, image)
    assert main(["ablate", "--dataset", str(dataset), "--out", str(tmp_path / "out"),
                 "--kind", "kernel", "--values", "3,5", "--backbone", "toy"]) == 2


# -------------------------------------------------------------------- HTTP

def service_config(tmp_path: Path) -> Config:
    cfg = Config()
    cfg.service.artifact_root = str(tmp_path / "artifacts")
    return cfg


def request_fields(**extra):
    fields = {
        "inversion_prompt": "A photo of cat",
        "editing_prompt": "A running cat",
        "object_word": "cat",
        "bbox": [0.25, 0.0, 0.75, 0.5],
        "overrides": FAST_OVERRIDES,
    }
    fields.update(extra)
    return fields


def post_job(client, fields):
    return client.post(
        "/jobs",
        files={"image": ("in.png", png_bytes(), "image/png")},
        data={"request": json.dumps(fields)},
    )


def wait_for(client, job_id, timeout=60.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        state = client.get(f"/jobs/{job_id}").json()["state"]
        if state in ("done", "failed"):
            return state
        time.sleep(0.05)
    raise TimeoutError("job did not finish")


def test_http_happy_path(tmp_path):
    cfg = service_config(tmp_path)
    app = create_app(cfg)
    client = TestClient(app)
    assert client.get("/healthz").status_code == 200
    presets = client.get("/presets").json()
    assert presets["objective"]["iterations"] == 50

    resp = post_job(client, request_fields())
    assert resp.status_code == 202
    job_id = resp.json()["id"]
    assert wait_for(client, job_id) == "done"

    job = client.get(f"/jobs/{job_id}").json()
    assert "edited.png" in job["artifacts"]
    art = client.get(f"/jobs/{job_id}/artifacts/edited.png")
    assert art.status_code == 200
    assert art.content[:4] == b"\x89PNG"
    assert client.get(f"/jobs/{job_id}/artifacts/nope.png").status_code == 404


def test_http_validation_errors(tmp_path):
    client = TestClient(create_app(service_config(tmp_path)))
    resp = post_job(client, request_fields(bbox=[0.9, 0.1, 0.2, 0.5]))
    assert resp.status_code == 400
    assert resp.json()["detail"]["field"] == "bbox"

    resp = post_job(client, request_fields(object_word="dog"))
    assert resp.status_code == 400
    assert resp.json()["detail"]["field"] == "object_word"

    resp = client.post("/jobs", files={"image": ("in.png", png_bytes(), "image/png")},
                       data={"request": "{not json"})
    assert resp.status_code == 400

    assert client.get("/jobs/doesnotexist").status_code == 404


def test_http_artifact_before_done_is_409(tmp_path):
    cfg = service_config(tmp_path)
    manager = JobManager(cfg, workers=0)  # nothing consumes the queue
    client = TestClient(create_app(cfg, manager=manager))
    resp = post_job(client, request_fields())
    job_id = resp.json()["id"]
    assert client.get(f"/jobs/{job_id}").json()["state"] == "queued"
    assert client.get(f"/jobs/{job_id}/artifacts/edited.png").status_code == 409


def test_job_recovery_marks_running_as_failed(tmp_path):
    cfg = service_config(tmp_path)
    jobs_dir = Path(cfg.service.artifact_root) / "jobs" / "deadbeef0001"
    jobs_dir.mkdir(parents=True)
    (jobs_dir / "job.json").write_text(json.dumps({
        "id": "deadbeef0001", "state": "running", "created_at": 0.0,
        "finished_at": None, "error": None, "artifact_refs": {}, "request": {},
    }))
    manager = JobManager(cfg, workers=0)
    job = manager.get("deadbeef0001")
    assert job.state == "failed"
    assert "restart" in job.error


def test_job_state_machine_reads_are_idempotent(tmp_path):
    cfg = service_config(tmp_path)
    client = TestClient(create_app(cfg))
    job_id = post_job(client, request_fields()).json()["id"]
    wait_for(client, job_id)
    a = client.get(f"/jobs/{job_id}").json()
    b = client.get(f"/jobs/{job_id}").json()
    assert a == b and a["state"] == "done"
    assert a["error"] is None
