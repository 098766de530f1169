"""Self-hosted review back end: imports filter survivors as tasks, hands each
to exactly two distinct workers, accepts annotations, and persists everything
through an append-only JSONL journal plus periodic snapshots.

The journal is the source of truth: replaying it from empty reproduces the
exact store state, so a crash-restart loses nothing. Task assignment and
submission are serialized under one lock; the distinct-workers invariant
holds under any interleaving of concurrent calls.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import Dataset
from .review_core import AnnotationRecord, ReviewError, validate_record

DEFAULT_LEASE_TIMEOUT = 30 * 60.0


class ServiceError(Exception):
    def __init__(self, message: str, status: int = 400):
        super().__init__(message)
        self.status = status


@dataclass
class Task:
    candidate_id: str
    premise: str
    hypothesis: str
    # Active leases: worker -> absolute expiry. Completed workers move to
    # `completed` but still count against the two slots.
    leases: dict[str, float] = field(default_factory=dict)
    completed: dict[str, dict] = field(default_factory=dict)
    idempotency_keys: dict[str, str | None] = field(default_factory=dict)

    @property
    def slots_taken(self) -> int:
        return len(self.leases) + len(self.completed)

    @property
    def state(self) -> str:
        if len(self.completed) == 2:
            return "done"
        if self.slots_taken:
            return "in_progress"
        return "open"

    def to_public(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "premise": self.premise,
            "hypothesis": self.hypothesis,
            "state": self.state,
            "slots_taken": self.slots_taken,
        }


class ReviewStore:
    """Journal-backed task store. All public methods are thread-safe."""

    def __init__(
        self,
        data_dir,
        lease_timeout: float = DEFAULT_LEASE_TIMEOUT,
        snapshot_every: int = 500,
        time_fn=time.time,
    ):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.journal_path = self.data_dir / "journal.jsonl"
        self.snapshot_path = self.data_dir / "snapshot.json"
        self.lease_timeout = lease_timeout
        self.snapshot_every = snapshot_every
        self.time_fn = time_fn
        self.tasks: dict[str, Task] = {}
        self.seq = 0
        self._lock = threading.RLock()
        self._recover()
        self._journal_fh = open(self.journal_path, "a", encoding="utf-8")

    # ------------------------------------------------------------------
    # Persistence

    def _recover(self) -> None:
        snapshot_seq = 0
        if self.snapshot_path.exists():
            with open(self.snapshot_path, encoding="utf-8") as fh:
                snap = json.load(fh)
            snapshot_seq = snap["seq"]
            self.seq = snapshot_seq
            for rec in snap["tasks"]:
                task = Task(
                    candidate_id=rec["candidate_id"],
                    premise=rec["premise"],
                    hypothesis=rec["hypothesis"],
                    leases=dict(rec["leases"]),
                    completed=dict(rec["completed"]),
                    idempotency_keys=dict(rec["idempotency_keys"]),
                )
                self.tasks[task.candidate_id] = task
        if self.journal_path.exists():
            with open(self.journal_path, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    entry = json.loads(line)
                    if entry["seq"] <= snapshot_seq:
                        continue
                    self._apply(entry)
                    self.seq = entry["seq"]

    def _apply(self, entry: dict) -> None:
        event, payload = entry["event"], entry["payload"]
        if event == "import":
            task = Task(
                candidate_id=payload["candidate_id"],
                premise=payload["premise"],
                hypothesis=payload["hypothesis"],
            )
            self.tasks[task.candidate_id] = task
        elif event == "assign":
            task = self.tasks[payload["candidate_id"]]
            task.leases[payload["worker_id"]] = payload["deadline"]
        elif event == "release":
            task = self.tasks[payload["candidate_id"]]
            task.leases.pop(payload["worker_id"], None)
        elif event == "annotate":
            record = payload["record"]
            task = self.tasks[record["candidate_id"]]
            worker = record["worker_id"]
            task.leases.pop(worker, None)
            task.completed[worker] = record
            task.idempotency_keys[worker] = payload.get("idempotency_key")
        else:
            raise ServiceError(f"unknown journal event {event!r}", status=500)

    def _journal(self, event: str, payload: dict) -> None:
        self.seq += 1
        entry = {"seq": self.seq, "event": event, "payload": payload}
        self._journal_fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
        self._journal_fh.flush()
        self._apply(entry)
        if self.snapshot_every and self.seq % self.snapshot_every == 0:
            self._write_snapshot()

    def _write_snapshot(self) -> None:
        snap = {
            "seq": self.seq,
            "tasks": [
                {
                    "candidate_id": t.candidate_id,
                    "premise": t.premise,
                    "hypothesis": t.hypothesis,
                    "leases": t.leases,
                    "completed": t.completed,
                    "idempotency_keys": t.idempotency_keys,
                }
                for t in self.tasks.values()
            ],
        }
        tmp = self.snapshot_path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(snap, fh, ensure_ascii=False)
        os.replace(tmp, self.snapshot_path)

    def close(self) -> None:
        with self._lock:
            self._journal_fh.close()

    # ------------------------------------------------------------------
    # Operations

    def _sweep_expired(self) -> None:
        now = self.time_fn()
        for task in self.tasks.values():
            for worker, deadline in list(task.leases.items()):
                if deadline <= now:
                    self._journal(
                        "release", {"candidate_id": task.candidate_id, "worker_id": worker}
                    )

    def import_tasks(self, ds: Dataset) -> int:
        """One open task per candidate; re-importing identical content is a
        no-op, differing content under an existing id is an error."""
        with self._lock:
            new = 0
            for ex in ds.examples:
                if not ex.premise.strip() or not ex.hypothesis.strip():
                    raise ServiceError(f"task {ex.id!r} has empty premise or hypothesis", status=422)
                existing = self.tasks.get(ex.id)
                if existing is not None:
                    if (existing.premise, existing.hypothesis) != (ex.premise, ex.hypothesis):
                        raise ServiceError(
                            f"task {ex.id!r} already imported with different content",
                            status=409,
                        )
                    continue
                self._journal(
                    "import",
                    {"candidate_id": ex.id, "premise": ex.premise, "hypothesis": ex.hypothesis},
                )
                new += 1
            return new

    def next_task(self, worker_id: str) -> Task | None:
        """Assign the eligible task with the fewest remaining slots (pairs
        complete before new tasks start), ties by candidate id."""
        if not worker_id:
            raise ServiceError("worker_id must be non-empty", status=400)
        with self._lock:
            self._sweep_expired()
            eligible = [
                t
                for t in self.tasks.values()
                if t.state != "done"
                and t.slots_taken < 2
                and worker_id not in t.leases
                and worker_id not in t.completed
            ]
            if not eligible:
                return None
            eligible.sort(key=lambda t: (2 - t.slots_taken, t.candidate_id))
            task = eligible[0]
            deadline = self.time_fn() + self.lease_timeout
            self._journal(
                "assign",
                {"candidate_id": task.candidate_id, "worker_id": worker_id, "deadline": deadline},
            )
            return task

    def submit_annotation(
        self, record: AnnotationRecord, idempotency_key: str | None = None
    ) -> dict:
        with self._lock:
            self._sweep_expired()
            task = self.tasks.get(record.candidate_id)
            if task is None:
                raise ServiceError(f"unknown task {record.candidate_id!r}", status=404)
            worker = record.worker_id
            if worker in task.completed:
                if idempotency_key is not None and task.idempotency_keys.get(worker) == idempotency_key:
                    return {"status": "ok", "duplicate": True, "task_state": task.state}
                raise ServiceError(
                    f"worker {worker!r} already annotated {record.candidate_id!r}", status=409
                )
            if worker not in task.leases:
                raise ServiceError(
                    f"worker {worker!r} holds no active assignment on {record.candidate_id!r}",
                    status=403,
                )
            try:
                validate_record(record, task.premise, task.hypothesis)
            except ReviewError as exc:
                raise ServiceError(f"invalid annotation: {exc}", status=422) from exc
            self._journal(
                "annotate",
                {"record": record.to_record(), "idempotency_key": idempotency_key},
            )
            return {"status": "ok", "duplicate": False, "task_state": task.state}

    def export_annotations(self) -> list[AnnotationRecord]:
        """All records of done tasks, ordered (candidate_id, worker_id)."""
        with self._lock:
            self._sweep_expired()
            records = []
            for candidate_id in sorted(self.tasks):
                task = self.tasks[candidate_id]
                if task.state != "done":
                    continue
                for worker in sorted(task.completed):
                    records.append(AnnotationRecord.from_record(task.completed[worker]))
            return records

    def stats(self) -> dict:
        with self._lock:
            self._sweep_expired()
            counts = {"open": 0, "in_progress": 0, "done": 0}
            annotations = 0
            for task in self.tasks.values():
                counts[task.state] += 1
                annotations += len(task.completed)
            return {
                "tasks": len(self.tasks),
                **counts,
                "annotations": annotations,
                "journal_seq": self.seq,
                "invariant_violations": self.check_invariants(),
            }

    def check_invariants(self) -> list[str]:
        """Violations of the service invariants, empty when healthy."""
        problems = []
        with self._lock:
            for task in self.tasks.values():
                if task.slots_taken > 2:
                    problems.append(f"{task.candidate_id}: {task.slots_taken} slots taken")
                both = set(task.leases) & set(task.completed)
                if both:
                    problems.append(f"{task.candidate_id}: workers {both} lease and completed")
                if len(task.completed) > 2:
                    problems.append(f"{task.candidate_id}: >2 annotations")
                if task.state == "done" and len(set(task.completed)) != 2:
                    problems.append(f"{task.candidate_id}: done without 2 distinct workers")
        return problems


def create_app(store: ReviewStore, worker_tokens: dict[str, str] | None = None, guidelines: str = ""):
    """FastAPI app over the store. When worker_tokens is non-empty, task and
    annotation endpoints require the matching X-Worker-Token header."""
    from fastapi import FastAPI, Header, Request
    from fastapi.responses import JSONResponse, PlainTextResponse

    app = FastAPI(title="cartoforge review service")
    tokens = worker_tokens or {}

    def check_auth(worker_id: str, token: str | None) -> None:
        if not tokens:
            return
        if tokens.get(worker_id) != token:
            raise ServiceError(f"bad token for worker {worker_id!r}", status=401)

    @app.exception_handler(ServiceError)
    async def service_error_handler(request: Request, exc: ServiceError):
        return JSONResponse(status_code=exc.status, content={"error": str(exc)})

    @app.get("/api/health")
    def health():
        return {"status": "ok"}

    @app.get("/api/guidelines")
    def get_guidelines():
        return {"text": guidelines}

    @app.post("/api/tasks/import")
    def import_tasks(body: dict):
        from .corpus import Example

        examples = [Example.from_record(rec) for rec in body.get("examples", [])]
        ds = Dataset(name=body.get("name", "import"), examples=examples)
        imported = store.import_tasks(ds)
        return {"imported": imported, "total": len(ds)}

    @app.get("/api/tasks/next")
    def next_task(worker: str, x_worker_token: str | None = Header(default=None)):
        check_auth(worker, x_worker_token)
        task = store.next_task(worker)
        if task is None:
            return {"task": None}
        return {"task": task.to_public()}

    @app.post("/api/annotations")
    def submit(body: dict, x_worker_token: str | None = Header(default=None)):
        record = AnnotationRecord.from_record(body)
        check_auth(record.worker_id, x_worker_token)
        return store.submit_annotation(record, body.get("idempotency_key"))

    @app.get("/api/export")
    def export():
        lines = [json.dumps(rec.to_record(), ensure_ascii=False) for rec in store.export_annotations()]
        return PlainTextResponse("\n".join(lines) + ("\n" if lines else ""))

    @app.get("/api/stats")
    def stats():
        return store.stats()

    return app


def serve(data_dir, port: int = 8400, lease_timeout: float = DEFAULT_LEASE_TIMEOUT,
          worker_tokens: dict[str, str] | None = None, guidelines: str = "") -> None:
    import uvicorn

    store = ReviewStore(data_dir, lease_timeout=lease_timeout)
    app = create_app(store, worker_tokens, guidelines)
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")
