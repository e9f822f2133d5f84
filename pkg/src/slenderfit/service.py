"""Assisted-labeling HTTP service.

Sessions live as directories under a data root (image file + JSON
documents), so the store is inspectable and survives restarts: any GET
served before a restart returns the same bytes after it. Refinement jobs
run on a small in-process thread pool; each session holds at most one
live job (409 beyond that) and the global queue is bounded (429 beyond).

Endpoints: POST /sessions, POST /sessions/{id}/splines,
POST /sessions/{id}/refine, GET /jobs/{id},
GET /sessions/{id}/overlay?kind=reconstruction|overlay|per_body[&body=i],
GET /sessions/{id}/export[?accepted=i,j]. All responses are JSON except
the image endpoints; every error body carries {code, message}.
"""

from __future__ import annotations

import dataclasses
import json
import os
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from starlette.exceptions import HTTPException as StarletteHTTPException

from .config import RunConfig, default_config, version_string
from .errors import InvalidInputError
from .geometry import KnotChain, fit_natural_cubic, sample_uniform
from .imgio import decode_image, encode_image, load_image, overlay_png_bytes, \
    save_image
from .objective import RegWeights
from .optimizer import RefineSettings, refine
from .renderer import Scene, render_scene

PROGRESS_FLUSH_EVERY = 25    # persist job progress every N optimizer steps
OVERLAY_KINDS = ("reconstruction", "overlay", "per_body")


class ApiError(Exception):
    """HTTP error with a machine-readable code."""

    def __init__(self, status: int, code: str, message: str):
        self.status = status
        self.code = code
        self.message = message
        super().__init__(message)


def _json_error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse({"code": code, "message": message},
                        status_code=status)


class Store:
    """Directory-backed session and job state with per-session locking."""

    def __init__(self, root: str):
        self.root = root
        self.sessions_dir = os.path.join(root, "sessions")
        self.jobs_dir = os.path.join(root, "jobs")
        os.makedirs(self.sessions_dir, exist_ok=True)
        os.makedirs(self.jobs_dir, exist_ok=True)
        self._locks: dict = {}
        self._locks_guard = threading.Lock()

    def lock(self, sid: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(sid, threading.Lock())

    # -- sessions ------------------------------------------------------

    def session_dir(self, sid: str) -> str:
        return os.path.join(self.sessions_dir, sid)

    def has_session(self, sid: str) -> bool:
        return os.path.isfile(os.path.join(self.session_dir(sid),
                                           "session.json"))

    def read_session(self, sid: str) -> dict:
        if not self.has_session(sid):
            raise ApiError(404, "unknown_session", f"no session {sid}")
        with open(os.path.join(self.session_dir(sid), "session.json"),
                  encoding="utf-8") as fh:
            return json.load(fh)

    def write_session(self, doc: dict) -> None:
        path = os.path.join(self.session_dir(doc["id"]), "session.json")
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
        os.replace(tmp, path)

    def create_session(self, image: np.ndarray) -> dict:
        sid = uuid.uuid4().hex[:12]
        os.makedirs(self.session_dir(sid), exist_ok=True)
        save_image(os.path.join(self.session_dir(sid), "image.png"), image)
        doc = {"id": sid, "image": "image.png",
               "resolution": [int(image.shape[0]), int(image.shape[1])],
               "splines_initial": None, "splines_refined": None,
               "accepted": [], "jobs": []}
        self.write_session(doc)
        return doc

    def load_session_image(self, sid: str) -> np.ndarray:
        return load_image(os.path.join(self.session_dir(sid), "image.png"))

    # -- jobs ----------------------------------------------------------

    def job_path(self, jid: str) -> str:
        return os.path.join(self.jobs_dir, jid + ".json")

    def read_job(self, jid: str) -> dict:
        path = self.job_path(jid)
        if not os.path.isfile(path):
            raise ApiError(404, "unknown_job", f"no job {jid}")
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    def write_job(self, doc: dict) -> None:
        tmp = self.job_path(doc["id"]) + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
        os.replace(tmp, self.job_path(doc["id"]))

    def fail_stale_jobs(self) -> None:
        """Jobs left queued/running by a dead process can never finish."""
        for name in os.listdir(self.jobs_dir):
            if not name.endswith(".json"):
                continue
            path = os.path.join(self.jobs_dir, name)
            try:
                with open(path, encoding="utf-8") as fh:
                    doc = json.load(fh)
            except (OSError, json.JSONDecodeError):
                continue
            if doc.get("state") in ("queued", "running"):
                doc["state"] = "failed"
                doc["error"] = "interrupted by service restart"
                self.write_job(doc)


def _parse_chain_list(obj) -> list:
    if isinstance(obj, dict) and "chains" in obj:
        obj = obj["chains"]
    if not isinstance(obj, list) or not obj:
        raise InvalidInputError(
            'expected a nonempty list of chains or {"chains": [...]}')
    return [KnotChain.from_dict(c) for c in obj]


def _settings_with_overrides(base: RefineSettings, overrides) -> RefineSettings:
    if not overrides:
        return base
    if not isinstance(overrides, dict):
        raise InvalidInputError("overrides must be an object")
    kwargs = dict(overrides)
    if isinstance(kwargs.get("weights"), dict):
        kwargs["weights"] = RegWeights(**kwargs["weights"])
    try:
        return dataclasses.replace(base, **kwargs)
    except TypeError as exc:
        raise InvalidInputError(f"bad settings override: {exc}") from exc


def _render_per_body(scene: Scene) -> list:
    """One full render per chain, each with the fitted background."""
    images = []
    for i in range(scene.n_chains):
        solo = Scene([scene.chain_x[i]], [scene.chain_y[i]],
                     [scene.chain_w_raw[i]], scene.width_raw, scene.blob,
                     scene.background, scene.composite, scene.kernel,
                     scene.resolution, scene.samples)
        images.append(np.clip(render_scene(solo), 0.0, 1.0))
    return images


def create_app(cfg: RunConfig = None) -> FastAPI:
    cfg = cfg if cfg is not None else default_config()
    scfg = cfg.service
    store = Store(scfg.data_root)
    store.fail_stale_jobs()

    app = FastAPI(title="slenderfit labeling service",
                  version=version_string())
    app.state.store = store
    app.state.config = cfg

    executor = ThreadPoolExecutor(max_workers=max(1, cfg.cli.workers))
    registry_lock = threading.Lock()
    pending: set = set()            # job ids queued or running
    session_running: dict = {}      # session id -> job id
    progress_mem: dict = {}         # job id -> (phase, step) live snapshot

    app.add_middleware(
        CORSMiddleware,
        allow_origins=[scfg.cors_origin] if scfg.cors_origin != "*" else ["*"],
        allow_methods=["*"], allow_headers=["*"])

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return _json_error(exc.status, exc.code, exc.message)

    @app.exception_handler(InvalidInputError)
    async def _invalid(request: Request, exc: InvalidInputError):
        return _json_error(422, "invalid_input", str(exc))

    @app.exception_handler(StarletteHTTPException)
    async def _http_error(request: Request, exc: StarletteHTTPException):
        return _json_error(exc.status_code, "http_error", str(exc.detail))

    @app.exception_handler(RequestValidationError)
    async def _validation(request: Request, exc: RequestValidationError):
        return _json_error(422, "invalid_request", str(exc.errors()))

    async def _json_body(request: Request):
        body = await request.body()
        if not body:
            return None
        try:
            return json.loads(body)
        except json.JSONDecodeError as exc:
            raise ApiError(422, "bad_json", f"request body: {exc}") from exc

    # -- session lifecycle ---------------------------------------------

    @app.post("/sessions", status_code=201)
    async def create_session(request: Request):
        data = await request.body()
        if not data:
            raise ApiError(400, "bad_image", "empty request body")
        try:
            image = decode_image(data, max_side=10 ** 9)
        except InvalidInputError as exc:
            raise ApiError(400, "bad_image", str(exc)) from exc
        if max(image.shape) > scfg.max_side:
            raise ApiError(413, "too_large",
                           f"image exceeds {scfg.max_side} px per side")
        doc = store.create_session(image)
        return {"session_id": doc["id"],
                "resolution": doc["resolution"]}

    @app.post("/sessions/{sid}/splines")
    async def submit_splines(sid: str, request: Request):
        if not store.has_session(sid):
            raise ApiError(404, "unknown_session", f"no session {sid}")
        payload = await _json_body(request)
        chains = _parse_chain_list(payload)
        with store.lock(sid):
            doc = store.read_session(sid)
            doc["splines_initial"] = [c.to_dict() for c in chains]
            doc["splines_refined"] = None
            doc["accepted"] = [False] * len(chains)
            store.write_session(doc)
        return {"chains": doc["splines_initial"]}

    # -- refinement jobs -------------------------------------------------

    def _run_job(jid: str, sid: str, settings: RefineSettings):
        job = store.read_job(jid)
        job["state"] = "running"
        store.write_job(job)
        try:
            with store.lock(sid):
                doc = store.read_session(sid)
            y = store.load_session_image(sid)
            chains = [KnotChain.from_dict(c) for c in doc["splines_initial"]]
            counter = {"n": 0}

            def on_step(phase, step, loss, vec):
                counter["n"] += 1
                progress_mem[jid] = {"phase": int(phase), "step": int(step)}
                if counter["n"] % PROGRESS_FLUSH_EVERY == 0:
                    job["progress"] = progress_mem[jid]
                    store.write_job(job)

            report = refine(y, chains, settings, callback=on_step)
            result = report.to_dict()
            result["scene_params"] = report.scene.params_dict()
            result["success"] = bool(
                report.final_recon_loss
                < scfg.success_ratio * report.background_recon_loss)
            sdir = store.session_dir(sid)
            with open(os.path.join(sdir, "reconstruction.png"), "wb") as fh:
                fh.write(encode_image(
                    np.clip(render_scene(report.scene), 0.0, 1.0)))
            for i, body in enumerate(_render_per_body(report.scene)):
                with open(os.path.join(sdir, f"body_{i:02d}.png"), "wb") as fh:
                    fh.write(encode_image(body))
            with store.lock(sid):
                doc = store.read_session(sid)
                doc["splines_refined"] = result["chains"]
                doc["accepted"] = [False] * len(result["chains"])
                store.write_session(doc)
            job["state"] = "done"
            job["progress"] = progress_mem.get(jid, job["progress"])
            job["result"] = result
            store.write_job(job)
        except Exception as exc:  # job isolation: surface in job state
            job["state"] = "failed"
            job["error"] = f"{type(exc).__name__}: {exc}"
            store.write_job(job)
        finally:
            with registry_lock:
                pending.discard(jid)
                if session_running.get(sid) == jid:
                    del session_running[sid]
            progress_mem.pop(jid, None)

    @app.post("/sessions/{sid}/refine", status_code=202)
    async def start_refine(sid: str, request: Request):
        payload = await _json_body(request)
        overrides = (payload or {}).get("settings")
        settings = _settings_with_overrides(cfg.optimizer, overrides)
        with store.lock(sid):
            doc = store.read_session(sid)
            if not doc["splines_initial"]:
                raise ApiError(409, "no_splines",
                               "submit splines before refining")
        with registry_lock:
            if sid in session_running:
                raise ApiError(409, "job_running",
                               f"job {session_running[sid]} is active")
            if len(pending) >= scfg.max_queue:
                raise ApiError(429, "queue_full",
                               f"{len(pending)} jobs already queued")
            jid = uuid.uuid4().hex[:12]
            pending.add(jid)
            session_running[sid] = jid
        job = {"id": jid, "session_id": sid, "state": "queued",
               "progress": {"phase": 0, "step": 0}, "error": None,
               "result": None}
        store.write_job(job)
        with store.lock(sid):
            doc = store.read_session(sid)
            doc["jobs"].append(jid)
            store.write_session(doc)
        executor.submit(_run_job, jid, sid, settings)
        return {"job_id": jid}

    @app.get("/jobs/{jid}")
    async def poll_job(jid: str):
        job = store.read_job(jid)
        live = progress_mem.get(jid)
        if live and job["state"] == "running":
            job["progress"] = live
        return job

    # -- overlays and export ---------------------------------------------

    @app.get("/sessions/{sid}/overlay")
    async def get_overlay(sid: str, kind: str = "overlay", body: int = 0):
        if kind not in OVERLAY_KINDS:
            raise ApiError(422, "bad_kind",
                           f"kind must be one of {OVERLAY_KINDS}")
        with store.lock(sid):
            doc = store.read_session(sid)
        sdir = store.session_dir(sid)
        if kind == "reconstruction":
            path = os.path.join(sdir, "reconstruction.png")
            if not os.path.isfile(path):
                raise ApiError(409, "no_result",
                               "no completed refinement for this session")
            with open(path, "rb") as fh:
                return Response(fh.read(), media_type="image/png")
        if kind == "per_body":
            path = os.path.join(sdir, f"body_{body:02d}.png")
            if body < 0 or not doc["splines_refined"]:
                raise ApiError(409, "no_result",
                               "no completed refinement for this session")
            if not os.path.isfile(path):
                raise ApiError(422, "bad_body",
                               f"body index {body} out of range")
            with open(path, "rb") as fh:
                return Response(fh.read(), media_type="image/png")
        chains_doc = doc["splines_refined"] or doc["splines_initial"]
        if not chains_doc:
            raise ApiError(409, "no_splines", "session has no splines")
        image = store.load_session_image(sid)
        polys = [sample_uniform(fit_natural_cubic(KnotChain.from_dict(c)),
                                100)[:, :2] for c in chains_doc]
        return Response(overlay_png_bytes(image, polys),
                        media_type="image/png")

    @app.get("/sessions/{sid}/export")
    async def export_labels(sid: str, accepted: str = None):
        with store.lock(sid):
            doc = store.read_session(sid)
            if not doc["splines_refined"]:
                raise ApiError(409, "no_result",
                               "no completed refinement to export")
            n = len(doc["splines_refined"])
            if accepted is not None:
                try:
                    marks = {int(tok) for tok in accepted.split(",") if tok}
                except ValueError as exc:
                    raise ApiError(422, "bad_accepted",
                                   "accepted must be comma-separated "
                                   "indices") from exc
                if any(i < 0 or i >= n for i in marks):
                    raise ApiError(422, "bad_accepted",
                                   f"body index out of range 0..{n - 1}")
                doc["accepted"] = [i in marks for i in range(n)]
                store.write_session(doc)
        result = None
        for jid in reversed(doc["jobs"]):
            job = store.read_job(jid)
            if job["state"] == "done":
                result = job["result"]
                break
        bodies = []
        for i, chain_doc in enumerate(doc["splines_refined"]):
            chain = KnotChain.from_dict(chain_doc)
            poly = sample_uniform(fit_natural_cubic(chain), 100)
            widths = result["width_samples"][i] if result else []
            bodies.append({
                "index": i,
                "accepted": bool(doc["accepted"][i]),
                "knots": chain.to_dict(),
                "polyline": [[float(x), float(y)] for x, y in poly[:, :2]],
                "widths": [float(v) for v in widths],
            })
        metadata = {"session_id": sid, "version": version_string(),
                    "resolution": doc["resolution"]}
        if result:
            metadata.update({
                "final_recon_loss": result["final_recon_loss"],
                "background_recon_loss": result["background_recon_loss"],
                "success": result["success"],
                "global_width": result["global_width"],
            })
        return {"session_id": sid, "bodies": bodies, "metadata": metadata}

    return app
