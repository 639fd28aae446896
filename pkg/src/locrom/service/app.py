"""FastAPI service wrapping the experiment drivers.

Endpoints mirror the CLI subcommands; requests carry the full experiment
config and responses return manifests plus CSV payloads, so a thin client
can persist results without filesystem access to the server.
"""

from pathlib import Path

from fastapi import FastAPI, HTTPException

from .. import __version__
from .. import experiments as ex
from . import schemas


def _read(path):
    return Path(path).read_text() if Path(path).exists() else ""


def _offline_response(config, manifest) -> schemas.OfflineResponse:
    return schemas.OfflineResponse(
        hash=manifest.get("hash", config.offline_hash()),
        out=config.out,
        n_configurations=manifest.get("n_configurations", 0),
        configurations=[
            schemas.ConfigurationInfo(
                index=c["index"], key=c["key"], target_cell=c["target_cell"],
                n_snapshots=c["n_snapshots"], n_soi=c["n_soi"],
                n_random=c["n_random"], estimator=c["estimator"],
                modes_per_edge=c["modes_per_edge"], seconds=c["seconds"])
            for c in manifest.get("configurations", [])
        ],
    )


def _fom_response(config, meta) -> schemas.FomResponse:
    return schemas.FomResponse(
        hash=meta["hash"], out=config.out, n_dofs=meta["n_dofs"],
        global_norm=meta["global_norm"],
        assemble_seconds=meta["assemble_seconds"],
        solve_seconds=meta["solve_seconds"])


def _online_response(config, manifest) -> schemas.OnlineResponse:
    return schemas.OnlineResponse(
        hash=manifest["hash"], out=config.out,
        rows=[schemas.ErrorRow(**row) for row in manifest["rows"]],
        csv=_read(Path(config.out) / "errors.csv"))


def create_app() -> FastAPI:
    app = FastAPI(title="locrom", version=__version__,
                  description="Localized model order reduction service")

    def run(fn, request):
        try:
            config = request.to_config()
            return config, fn(config)
        except HTTPException:
            raise
        except (ValueError, FileNotFoundError, RuntimeError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from None

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/offline", response_model=schemas.OfflineResponse)
    def offline(request: schemas.ExperimentRequest):
        config, manifest = run(ex.run_offline, request)
        return _offline_response(config, manifest)

    @app.post("/fom", response_model=schemas.FomResponse)
    def fom(request: schemas.ExperimentRequest):
        config, meta = run(ex.run_fom, request)
        return _fom_response(config, meta)

    @app.post("/online", response_model=schemas.OnlineResponse)
    def online(request: schemas.ExperimentRequest):
        config, (manifest, _reports) = run(ex.run_online, request)
        return _online_response(config, manifest)

    @app.post("/compare", response_model=schemas.CompareResponse)
    def compare(request: schemas.ExperimentRequest):
        config, result = run(ex.run_compare, request)
        offline_part = None
        if result["offline"].get("configurations") is not None and \
                result["offline"].get("n_configurations"):
            offline_part = _offline_response(config, result["offline"])
        return schemas.CompareResponse(
            hash=config.offline_hash(), out=config.out,
            offline=offline_part,
            fom=_fom_response(config, result["fom"]),
            online=_online_response(config, result["online"]))

    @app.post("/projection-study", response_model=schemas.ProjectionResponse)
    def projection_study(request: schemas.ExperimentRequest):
        config, manifest = run(ex.run_projection_study, request)
        return schemas.ProjectionResponse(
            hash=manifest["hash"], out=config.out,
            rows=[schemas.ProjectionRow(**row) for row in manifest["rows"]],
            csv=_read(Path(config.out) / "projection.csv"))

    @app.post("/report", response_model=schemas.ReportResponse)
    def report(request: schemas.ReportRequest):
        out = Path(request.out)
        if not out.exists():
            raise HTTPException(status_code=404,
                                detail=f"no results under {request.out}")
        names = ("errors.csv", "projection.csv", "manifest_offline.json",
                 "manifest_fom.json", "manifest_online.json",
                 "manifest_projection.json")
        files = {n: _read(out / n) for n in names if (out / n).exists()}
        return schemas.ReportResponse(out=request.out, files=files)

    return app


app = create_app()
