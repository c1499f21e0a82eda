"""FastAPI application wrapping the registration pipeline.

Every endpoint is synchronous: the job runs inside the request and the
response carries the output paths plus a summary. Input problems (missing or
malformed files, bad configuration) map to HTTP 400 with kind="data" so thin
clients can distinguish usage mistakes from server faults.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, pipeline
from ..errors import DataError, InvalidConfig, ScanRegError
from ..synthetic import SceneConfig
from . import models


def create_app() -> FastAPI:
    app = FastAPI(title="scanreg", version=__version__,
                  description="Incremental multiview point cloud registration")

    @app.exception_handler(ScanRegError)
    async def _scanreg_error(request: Request, exc: ScanRegError):
        kind = "data" if isinstance(exc, (DataError, InvalidConfig)) else "processing"
        return JSONResponse(status_code=400,
                            content={"detail": str(exc), "kind": kind})

    @app.exception_handler(OSError)
    async def _os_error(request: Request, exc: OSError):
        return JSONResponse(status_code=400,
                            content={"detail": str(exc), "kind": "data"})

    @app.get("/health", response_model=models.HealthResponse)
    def health():
        return models.HealthResponse(status="ok", version=__version__)

    @app.post("/graph", response_model=models.BuildGraphResponse)
    def graph(req: models.BuildGraphRequest):
        cfg = pipeline.load_config(req.config, req.overrides)
        return pipeline.build_graph_job(req.manifest, req.output, cfg)

    @app.post("/register", response_model=models.RegisterResponse)
    def register(req: models.RegisterRequest):
        cfg = pipeline.load_config(req.config, req.overrides)
        return pipeline.register_job(req.graph, req.output_dir, cfg,
                                     baseline=req.baseline)

    @app.post("/refine", response_model=models.RefineResponse)
    def refine(req: models.RefineRequest):
        cfg = pipeline.load_config(req.config, req.overrides)
        return pipeline.refine_job(req.manifest, req.model_dir,
                                   req.output_dir, cfg)

    @app.post("/evaluate", response_model=models.EvaluateResponse)
    def evaluate(req: models.EvaluateRequest):
        kwargs = {}
        if req.rotation_thresholds_deg is not None:
            kwargs["rotation_thresholds_deg"] = req.rotation_thresholds_deg
        if req.translation_thresholds is not None:
            kwargs["translation_thresholds"] = req.translation_thresholds
        return pipeline.evaluate_job(req.poses, req.ground_truth, req.manifest,
                                     req.output, req.fmt, req.recall_threshold,
                                     **kwargs)

    @app.post("/synth", response_model=models.SynthResponse)
    def synth(req: models.SynthRequest):
        scene = SceneConfig(scene=req.scene, n_scans=req.n_scans,
                            overlap=req.overlap, noise_sigma=req.noise_sigma,
                            outlier_rate=req.outlier_rate, seed=req.seed,
                            points_per_scan=req.points_per_scan,
                            keypoints_per_scan=req.keypoints_per_scan,
                            n_groups=req.n_groups)
        return pipeline.synth_job(req.output_dir, scene,
                                  emit_keypoints=req.emit_keypoints,
                                  emit_matches=req.emit_matches,
                                  emit_dense=req.emit_dense,
                                  ply_format=req.ply_format)

    @app.post("/export", response_model=models.ExportResponse)
    def export(req: models.ExportRequest):
        return pipeline.export_job(req.manifest, req.poses, req.output)

    return app
