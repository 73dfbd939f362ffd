"""HTTP service wrapping the core package.

Dataset generation is synchronous; pretraining, fine-tuning, and evaluation
run as background jobs that clients poll, streaming metric lines by offset.
"""
from fastapi import FastAPI, HTTPException

from .. import __version__, commands
from ..errors import FewshotError
from .jobs import JobManager
from .schemas import (
    EvaluateRequest,
    FinetuneRequest,
    GenDataRequest,
    GenDataResponse,
    HealthResponse,
    JobInfo,
    MetricsPage,
    PretrainRequest,
)

_RUNNERS = {
    "pretrain": commands.run_pretrain,
    "finetune": commands.run_finetune,
    "evaluate": commands.run_evaluate,
}


def _payload(request):
    data = request.model_dump(exclude_none=True)
    if "encoder" in data and not data["encoder"]:
        del data["encoder"]
    return data


def create_app():
    app = FastAPI(title="fewshot", version=__version__)
    jobs = JobManager()
    app.state.jobs = jobs

    @app.exception_handler(FewshotError)
    async def _fewshot_error(request, exc):
        from fastapi.responses import JSONResponse

        return JSONResponse(
            status_code=400,
            content={"detail": {
                "error": str(exc),
                "error_type": type(exc).__name__,
                "exit_code": exc.exit_code,
            }},
        )

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__)

    @app.post("/datasets", response_model=GenDataResponse)
    def gen_data(request: GenDataRequest):
        return GenDataResponse(**commands.run_gen_data(_payload(request)))

    def _submit(kind, payload):
        return JobInfo(**jobs.submit(kind, _RUNNERS[kind], payload).info())

    @app.post("/jobs/pretrain", response_model=JobInfo)
    def submit_pretrain(request: PretrainRequest):
        return _submit("pretrain", _payload(request))

    @app.post("/jobs/finetune", response_model=JobInfo)
    def submit_finetune(request: FinetuneRequest):
        return _submit("finetune", _payload(request))

    @app.post("/jobs/evaluate", response_model=JobInfo)
    def submit_evaluate(request: EvaluateRequest):
        return _submit("evaluate", _payload(request))

    @app.get("/jobs", response_model=list[JobInfo])
    def list_jobs():
        return [JobInfo(**j.info()) for j in jobs.all()]

    def _get_job(job_id):
        job = jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"no such job {job_id}")
        return job

    @app.get("/jobs/{job_id}", response_model=JobInfo)
    def job_status(job_id: str):
        return JobInfo(**_get_job(job_id).info())

    @app.get("/jobs/{job_id}/metrics", response_model=MetricsPage)
    def job_metrics(job_id: str, offset: int = 0):
        job = _get_job(job_id)
        lines, next_offset = job.metrics_since(max(offset, 0))
        return MetricsPage(job_id=job_id, status=job.status,
                           offset=max(offset, 0), next_offset=next_offset,
                           lines=lines)

    return app


app = create_app()
