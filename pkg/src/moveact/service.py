"""HTTP job service: submit edit jobs, poll state, fetch run artifacts.

Jobs run FIFO on a bounded worker pool (default one backbone session). All
request validation happens before queueing; state transitions are persisted
per job so a restart can mark interrupted jobs failed instead of leaving
zombies.
"""

import io
import json
import queue
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np
from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from fastapi.responses import FileResponse, JSONResponse

from .backbone import Backbone, create_backbone
from .config import Config
from .pipeline import EditRequest, PipelineError, run_edit
from .regions import BoundingBox, RegionError

ARTIFACT_NAMES = (
    "input.png", "edited.png", "heatmap.png", "loss_log.csv", "config.json",
    "trace.kv", "result.json",
    "masks/target.png", "masks/source.png", "masks/edge.png", "masks/background.png",
)


class ValidationFailure(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(message)
        self.field_name = field_name


@dataclass
class Job:
    id: str
    state: str = "queued"  # queued -> running -> done | failed
    created_at: float = field(default_factory=time.time)
    finished_at: Optional[float] = None
    error: Optional[str] = None
    artifact_refs: Dict[str, str] = field(default_factory=dict)
    request_meta: Dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "state": self.state,
            "created_at": self.created_at,
            "finished_at": self.finished_at,
            "error": self.error,
            "artifacts": sorted(self.artifact_refs),
            "request": self.request_meta,
        }


def parse_request_fields(fields: dict, image: np.ndarray) -> EditRequest:
    """Validate the JSON request fields against the EditRequest contract,
    reporting the offending field on failure."""
    for name in ("inversion_prompt", "editing_prompt", "object_word", "bbox"):
        if name not in fields:
            raise ValidationFailure(name, f"missing required field {name!r}")
    bbox = fields["bbox"]
    try:
        if isinstance(bbox, str):
            box = BoundingBox.from_string(bbox)
        else:
            box = BoundingBox(*(float(v) for v in bbox))
    except (RegionError, TypeError, ValueError) as exc:
        raise ValidationFailure("bbox", str(exc)) from exc
    try:
        return EditRequest(
            image=image,
            inversion_prompt=str(fields["inversion_prompt"]),
            editing_prompt=str(fields["editing_prompt"]),
            object_word=str(fields["object_word"]),
            target_box=box,
            overrides=fields.get("overrides"),
            seed=int(fields.get("seed", 0)),
        )
    except PipelineError as exc:
        raise ValidationFailure("object_word" if "object word" in str(exc) else "request", str(exc)) from exc


class JobManager:
    """FIFO queue + worker pool; each worker owns one backbone session."""

    def __init__(
        self,
        config: Config,
        backbone_factory: Optional[Callable[[], Backbone]] = None,
        workers: Optional[int] = None,
    ):
        self.config = config
        self.artifact_root = Path(config.service.artifact_root)
        self.jobs_root = self.artifact_root / "jobs"
        self.jobs_root.mkdir(parents=True, exist_ok=True)
        self.backbone_factory = backbone_factory or (lambda: create_backbone(config.backbone))
        self.jobs: Dict[str, Job] = {}
        self._lock = threading.Lock()
        self._queue: "queue.Queue[tuple[Job, EditRequest]]" = queue.Queue()
        self._recover_interrupted()
        self._workers = []
        for _ in range(workers if workers is not None else config.service.workers):
            th = threading.Thread(target=self._worker_loop, daemon=True)
            th.start()
            self._workers.append(th)

    def _recover_interrupted(self) -> None:
        for job_file in self.jobs_root.glob("*/job.json"):
            data = json.loads(job_file.read_text())
            job = Job(
                id=data["id"], state=data["state"], created_at=data.get("created_at", 0.0),
                finished_at=data.get("finished_at"), error=data.get("error"),
                artifact_refs={k: v for k, v in data.get("artifact_refs", {}).items()},
                request_meta=data.get("request", {}),
            )
            if job.state in ("queued", "running"):
                job.state = "failed"
                job.error = "service restarted while the job was in flight"
                job.finished_at = time.time()
                self._persist(job)
            self.jobs[job.id] = job

    def _persist(self, job: Job) -> None:
        job_dir = self.jobs_root / job.id
        job_dir.mkdir(parents=True, exist_ok=True)
        payload = dict(job.to_dict())
        payload["artifact_refs"] = job.artifact_refs
        (job_dir / "job.json").write_text(json.dumps(payload, indent=2))

    def submit(self, request: EditRequest) -> Job:
        job = Job(id=uuid.uuid4().hex[:12], request_meta={
            "inversion_prompt": request.inversion_prompt,
            "editing_prompt": request.editing_prompt,
            "object_word": request.object_word,
            "bbox": [request.target_box.x0, request.target_box.y0,
                     request.target_box.x1, request.target_box.y1],
            "seed": request.seed,
        })
        with self._lock:
            self.jobs[job.id] = job
        self._persist(job)
        self._queue.put((job, request))
        return job

    def get(self, job_id: str) -> Optional[Job]:
        with self._lock:
            return self.jobs.get(job_id)

    def _worker_loop(self) -> None:
        backbone: Optional[Backbone] = None
        while True:
            job, request = self._queue.get()
            with self._lock:
                job.state = "running"
            self._persist(job)
            try:
                if backbone is None:
                    backbone = self.backbone_factory()
                result, run_dir = run_edit(request, backbone, self.config, self.artifact_root)
                refs = {}
                for name in ARTIFACT_NAMES:
                    p = run_dir / name
                    if p.exists():
                        refs[name] = str(p)
                with self._lock:
                    job.artifact_refs = refs
                    job.state = "done"
                    job.finished_at = time.time()
            except Exception as exc:
                with self._lock:
                    job.state = "failed"
                    job.error = f"{type(exc).__name__}: {exc}"
                    job.finished_at = time.time()
            self._persist(job)
            self._queue.task_done()


def create_app(config: Optional[Config] = None, manager: Optional[JobManager] = None) -> FastAPI:
    from PIL import Image

    cfg = config or Config()
    mgr = manager or JobManager(cfg)
    app = FastAPI(title="moveact")
    app.state.manager = mgr

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/presets")
    def presets():
        return cfg.to_dict()

    @app.post("/jobs", status_code=202)
    async def submit_job(image: UploadFile = File(...), request: str = Form(...)):
        try:
            fields = json.loads(request)
        except json.JSONDecodeError as exc:
            raise HTTPException(400, detail={"field": "request", "message": f"invalid JSON: {exc}"})
        raw = await image.read()
        try:
            pil = Image.open(io.BytesIO(raw)).convert("RGB")
        except Exception as exc:
            raise HTTPException(400, detail={"field": "image", "message": f"unreadable image: {exc}"})
        # the pipeline validates against the backbone; resize to its native input
        native = _native_image_size(cfg)
        pil = pil.resize((native, native), Image.BILINEAR)
        arr = np.asarray(pil, dtype=np.float64) / 255.0
        try:
            edit_request = parse_request_fields(fields, arr)
        except ValidationFailure as exc:
            raise HTTPException(400, detail={"field": exc.field_name, "message": str(exc)})
        job = mgr.submit(edit_request)
        return JSONResponse({"id": job.id, "state": job.state}, status_code=202)

    @app.get("/jobs/{job_id}")
    def job_state(job_id: str):
        job = mgr.get(job_id)
        if job is None:
            raise HTTPException(404, detail="unknown job")
        return job.to_dict()

    @app.get("/jobs/{job_id}/artifacts/{name:path}")
    def job_artifact(job_id: str, name: str):
        job = mgr.get(job_id)
        if job is None:
            raise HTTPException(404, detail="unknown job")
        if job.state in ("queued", "running"):
            raise HTTPException(409, detail=f"job is {job.state}; artifacts appear when done")
        if name not in job.artifact_refs:
            raise HTTPException(404, detail="unknown artifact")
        return FileResponse(job.artifact_refs[name])

    return app


def _native_image_size(cfg: Config) -> int:
    if cfg.backbone.kind == "toy":
        from .backbone.toy import IMAGE_SIZE

        return IMAGE_SIZE
    return 512


def serve(config: Config) -> None:  # pragma: no cover - thin uvicorn wrapper
    import uvicorn

    app = create_app(config)
    uvicorn.run(app, host=config.service.host, port=config.service.port)
