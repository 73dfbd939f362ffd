"""Thread-backed job registry for long-running commands.

Each job owns its model/dataset context, so concurrent jobs never share
mutable state. Metric lines are appended under a lock and read back by
offset, which lets clients stream progress while a job runs.
"""
from __future__ import annotations

import itertools
import threading

from ..errors import FewshotError


class Job:
    def __init__(self, job_id, kind):
        self.job_id = job_id
        self.kind = kind
        self.status = "queued"
        self.error = None
        self.error_type = None
        self.exit_code = None
        self.result = None
        self._metrics = []
        self._lock = threading.Lock()

    def emit(self, entry):
        with self._lock:
            self._metrics.append(entry)

    def metrics_since(self, offset):
        with self._lock:
            lines = list(self._metrics[offset:])
            return lines, offset + len(lines)

    @property
    def n_metrics(self):
        with self._lock:
            return len(self._metrics)

    def info(self):
        return {
            "job_id": self.job_id,
            "kind": self.kind,
            "status": self.status,
            "error": self.error,
            "error_type": self.error_type,
            "exit_code": self.exit_code,
            "result": self.result,
            "n_metrics": self.n_metrics,
        }


class JobManager:
    def __init__(self):
        self._jobs = {}
        self._lock = threading.Lock()
        self._counter = itertools.count(1)

    def submit(self, kind, target, payload):
        with self._lock:
            job = Job(f"{kind}-{next(self._counter):04d}", kind)
            self._jobs[job.job_id] = job

        def runner():
            job.status = "running"
            try:
                job.result = target(payload, emit=job.emit)
            except FewshotError as exc:
                job.status = "failed"
                job.error = str(exc)
                job.error_type = type(exc).__name__
                job.exit_code = exc.exit_code
            except Exception as exc:  # defensive: surface, do not kill the server
                job.status = "failed"
                job.error = f"{type(exc).__name__}: {exc}"
                job.error_type = type(exc).__name__
                job.exit_code = 3
            else:
                job.status = "succeeded"
                job.exit_code = 0

        thread = threading.Thread(target=runner, name=job.job_id, daemon=True)
        thread.start()
        return job

    def get(self, job_id):
        with self._lock:
            return self._jobs.get(job_id)

    def all(self):
        with self._lock:
            return list(self._jobs.values())
