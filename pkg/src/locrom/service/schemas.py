"""Pydantic request/response models of the locrom service."""

from pydantic import BaseModel, Field

from ..experiments import ExperimentConfig


class CoarseSpec(BaseModel):
    nx: int = 5
    ny: int = 5
    k: int = 3                      # L-panel half width in cells
    cell_size: float = 1.0


class RceSpec(BaseModel):
    preset: str = "type1"
    aggregates: list | None = None  # [[cx, cy, r], ...] overrides the preset
    n_verts_per_edge: int = 7


class MaterialSpec(BaseModel):
    e_matrix: float = 30000.0
    e_aggregate: float | None = None
    ratio: float | None = None      # e_aggregate = ratio * e_matrix
    nu: float = 0.2
    plane: str = "plane_strain"


class RangeFinderSpec(BaseModel):
    tol: float = 1e-3
    n_t: int = 20
    eps_algofail: float = 1e-15


class PodSpec(BaseModel):
    edge_tol: float = 1e-6
    soi_tol: float = 1e-6


class BlockSpec(BaseModel):
    a: list = Field(default=[[0.01, 0.005], [0.005, -0.01]])
    b: list = Field(default=[[0.002, -0.001], [0.001, 0.002]])


class LPanelSpec(BaseModel):
    t_y: float = 200.0


class ExperimentRequest(BaseModel):
    experiment: str = "block"
    coarse: CoarseSpec = CoarseSpec()
    rce: RceSpec = RceSpec()
    material: MaterialSpec = MaterialSpec()
    basis: str = "empirical"
    training_set: str = "random"
    n_mpe: list[int] = [2, 6, 10, 14, 18]
    rangefinder: RangeFinderSpec = RangeFinderSpec()
    pod: PodSpec = PodSpec()
    seed: int = 20220701
    out: str = "locrom_out"
    block: BlockSpec = BlockSpec()
    lpanel: LPanelSpec = LPanelSpec()
    n_test: int = 50

    def to_config(self) -> ExperimentConfig:
        material = {"e_matrix": self.material.e_matrix, "nu": self.material.nu,
                    "plane": self.material.plane}
        if self.material.ratio is not None:
            material["ratio"] = self.material.ratio
        elif self.material.e_aggregate is not None:
            material["e_aggregate"] = self.material.e_aggregate
        rce = {"preset": self.rce.preset,
               "n_verts_per_edge": self.rce.n_verts_per_edge}
        if self.rce.aggregates:
            rce["aggregates"] = self.rce.aggregates
        return ExperimentConfig.from_mapping({
            "experiment": self.experiment,
            "coarse": {"nx": self.coarse.nx, "ny": self.coarse.ny,
                       "k": self.coarse.k, "cell_size": self.coarse.cell_size},
            "rce": rce,
            "material": material,
            "basis": self.basis,
            "training_set": self.training_set,
            "n_mpe": self.n_mpe,
            "rangefinder": self.rangefinder.model_dump(),
            "pod": self.pod.model_dump(),
            "seed": self.seed,
            "out": self.out,
            "block": self.block.model_dump(),
            "lpanel": self.lpanel.model_dump(),
            "n_test": self.n_test,
        })


class ConfigurationInfo(BaseModel):
    index: int
    key: str
    target_cell: int
    n_snapshots: int
    n_soi: int
    n_random: int
    estimator: float
    modes_per_edge: dict
    seconds: float


class OfflineResponse(BaseModel):
    hash: str
    out: str
    n_configurations: int
    configurations: list[ConfigurationInfo]


class FomResponse(BaseModel):
    hash: str
    out: str
    n_dofs: int
    global_norm: float
    assemble_seconds: float
    solve_seconds: float


class ErrorRow(BaseModel):
    basis: str
    training_set: str
    n_mpe: int
    N_dofs: int
    abs_err: float
    rel_err: float


class OnlineResponse(BaseModel):
    hash: str
    out: str
    rows: list[ErrorRow]
    csv: str


class CompareResponse(BaseModel):
    hash: str
    out: str
    offline: OfflineResponse | None
    fom: FomResponse
    online: OnlineResponse


class ProjectionRow(BaseModel):
    basis: str
    training_set: str
    n_mpe: int
    n_local: int
    N_dofs: int
    testing_set: str
    max_rel_proj_err: float


class ProjectionResponse(BaseModel):
    hash: str
    out: str
    rows: list[ProjectionRow]
    csv: str


class ReportRequest(BaseModel):
    out: str


class ReportResponse(BaseModel):
    out: str
    files: dict     # file name -> text content of CSVs and manifests


class HealthResponse(BaseModel):
    status: str
    version: str
