"""Synthetic city scenarios, link predicates, RSRP and per-node datasets.

The propagation model is a stochastic log-distance model standing in for a
ray tracer: free-space loss at 1 m, path-loss exponent 2 (LoS) or 3 (NLoS),
a fixed NLoS penalty, wall penetration loss for indoor UEs and i.i.d.
log-normal shadowing per (UE, cell) link.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .tasks import TASK_ORDER

SPEED_OF_LIGHT = 299_792_458.0
SCHEMA_VERSION = 1
SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class ScenarioConfig:
    extent_m: float = 2000.0
    n_cities: int = 4
    n_bs: int = 3
    sector_boresights_deg: tuple[float, ...] = (0.0, 120.0, 240.0)
    primary_freq_hz: float = 900e6
    secondary_freq_hz: float = 4.5e9
    eirp_dbm: float = 43.0
    sector_gain_db: float = 14.0
    sector_floor_db: float = -6.0
    bs_height_m: float = 25.0
    ue_height_m: float = 1.5
    bs_radius_m: float = 500.0
    n_buildings: int = 40
    building_size_m: tuple[float, float] = (20.0, 80.0)
    building_height_m: tuple[float, float] = (10.0, 60.0)
    los_exponent: float = 2.0
    nlos_exponent: float = 3.0
    wall_loss_db: float = 15.0
    nlos_penalty_db: float = 10.0
    shadowing_db: float = 4.0
    n_snapshots: int = 350
    ues_per_snapshot: int = 100
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    min_node_samples: int = 10

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


PRESETS = {
    "full": ScenarioConfig(ues_per_snapshot=1000),
    "desk": ScenarioConfig(ues_per_snapshot=10),
    "workstation": ScenarioConfig(ues_per_snapshot=100),
}


@dataclass(frozen=True)
class Building:
    x0: float
    y0: float
    x1: float
    y1: float
    height: float

    @property
    def centroid(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))


@dataclass(frozen=True)
class Cell:
    bs: int
    boresight_deg: float | None  # None = omnidirectional
    freq_hz: float


@dataclass
class CityScenario:
    extent_m: float
    buildings: list[Building]
    bs_positions: np.ndarray  # (n_bs, 2)
    bs_height_m: float
    primary_cells: list[Cell]
    secondary_cells: list[Cell]
    config: ScenarioConfig = field(default_factory=ScenarioConfig)

    @property
    def n_bs(self) -> int:
        return len(self.bs_positions)

    def box_arrays(self) -> np.ndarray:
        """Buildings as a ``(n, 5)`` array of x0, y0, x1, y1, height."""
        if not self.buildings:
            return np.zeros((0, 5))
        return np.array([[b.x0, b.y0, b.x1, b.y1, b.height] for b in self.buildings])


def _make_cells(config: ScenarioConfig, n_bs: int, freq: float) -> list[Cell]:
    return [Cell(b, az, freq) for b in range(n_bs) for az in config.sector_boresights_deg]


def _inside(px, py, boxes) -> np.ndarray:
    """Strict-interior test of points (broadcast) against boxes ``(nb, 5)``."""
    px = np.asarray(px)[..., None]
    py = np.asarray(py)[..., None]
    return (boxes[:, 0] < px) & (px < boxes[:, 2]) & (boxes[:, 1] < py) & (py < boxes[:, 3])


def generate_city(seed: int, config: ScenarioConfig = ScenarioConfig()) -> CityScenario:
    rng = np.random.default_rng(seed)
    ext = config.extent_m
    lo, hi = config.building_size_m
    if config.n_buildings * lo * lo > 0.7 * ext * ext:
        raise ValueError("infeasible scenario: buildings would cover more than 70% of the area")

    phase = rng.uniform(0.0, 2 * np.pi)
    angles = phase + 2 * np.pi * np.arange(config.n_bs) / config.n_bs
    centre = ext / 2
    bs = np.stack(
        [centre + config.bs_radius_m * np.cos(angles), centre + config.bs_radius_m * np.sin(angles)],
        axis=1,
    )
    if np.any(bs < 0) or np.any(bs > ext):
        raise ValueError("base station ring does not fit inside the extent")

    buildings: list[Building] = []
    attempts = 0
    margin = 1.0  # keep antennas clear of walls
    while len(buildings) < config.n_buildings:
        attempts += 1
        if attempts > 100 * max(config.n_buildings, 1):
            raise ValueError("could not place buildings clear of base stations")
        w, d = rng.uniform(lo, hi, size=2)
        x0 = rng.uniform(0.0, ext - w)
        y0 = rng.uniform(0.0, ext - d)
        h = rng.uniform(*config.building_height_m)
        box = np.array([[x0 - margin, y0 - margin, x0 + w + margin, y0 + d + margin, h]])
        if _inside(bs[:, 0], bs[:, 1], box).any():
            continue
        buildings.append(Building(float(x0), float(y0), float(x0 + w), float(y0 + d), float(h)))

    covered = sum((b.x1 - b.x0) * (b.y1 - b.y0) for b in buildings)
    if covered > 0.7 * ext * ext:
        raise ValueError("infeasible scenario: buildings cover more than 70% of the area")
    return CityScenario(
        extent_m=ext,
        buildings=buildings,
        bs_positions=bs,
        bs_height_m=config.bs_height_m,
        primary_cells=_make_cells(config, config.n_bs, config.primary_freq_hz),
        secondary_cells=_make_cells(config, config.n_bs, config.secondary_freq_hz),
        config=config,
    )


# -- predicates --------------------------------------------------------------


def indoor_mask(ue_xy: np.ndarray, city: CityScenario) -> np.ndarray:
    ue_xy = np.atleast_2d(ue_xy)
    boxes = city.box_arrays()
    if len(boxes) == 0:
        return np.zeros(len(ue_xy), dtype=bool)
    return _inside(ue_xy[:, 0], ue_xy[:, 1], boxes).any(axis=-1)


def is_indoor(ue_position, city: CityScenario) -> int:
    return int(indoor_mask(np.asarray(ue_position, dtype=float), city)[0])


def los_matrix(ue_xy: np.ndarray, city: CityScenario, ue_height: float | None = None) -> np.ndarray:
    """LoS flags ``(n_ue, n_bs)`` for the antenna-to-UE 3D segments.

    A segment is blocked when its open interior meets the open interior of a
    building box ``(x0,x1) x (y0,y1) x (0,h)``.  Slab clipping gives the
    parameter interval inside each footprint; height falls monotonically from
    antenna to UE, so the lowest point of that interval is at its exit.
    """
    ue_xy = np.atleast_2d(np.asarray(ue_xy, dtype=float))
    zu = city.config.ue_height_m if ue_height is None else ue_height
    boxes = city.box_arrays()
    n_ue, n_bs = len(ue_xy), city.n_bs
    if len(boxes) == 0:
        return np.ones((n_ue, n_bs), dtype=bool)
    zb = city.bs_height_m
    start = city.bs_positions[None, :, None, :]  # (1, bs, 1, 2)
    delta = ue_xy[:, None, None, :] - start  # (ue, bs, 1, 2)
    lo = boxes[None, None, :, [0, 1]]
    hi = boxes[None, None, :, [2, 3]]
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - start) / delta
        tb = (hi - start) / delta
    t_in = np.minimum(ta, tb)
    t_out = np.maximum(ta, tb)
    parallel = delta == 0
    between = (lo < start) & (start < hi)
    t_in = np.where(parallel, np.where(between, -np.inf, np.inf), t_in)
    t_out = np.where(parallel, np.where(between, np.inf, -np.inf), t_out)
    enter = np.maximum(0.0, t_in.max(axis=-1))
    exit_ = np.minimum(1.0, t_out.min(axis=-1))
    z_exit = zb + exit_ * (zu - zb)
    blocked = (enter < exit_) & (z_exit < boxes[None, None, :, 4])
    return ~blocked.any(axis=-1)


def is_los(ue_position, cell: Cell, city: CityScenario) -> int:
    return int(los_matrix(np.asarray(ue_position, dtype=float), city)[0, cell.bs])


# -- propagation ---------------------------------------------------------------


def fspl_1m_db(freq_hz: float) -> float:
    return 20.0 * np.log10(4.0 * np.pi * freq_hz / SPEED_OF_LIGHT)


def sector_gain_db(angle_deg, config: ScenarioConfig = ScenarioConfig()) -> np.ndarray:
    """Antenna pattern relative to boresight (0 dB on boresight).

    Signed ``cos^2`` lobe of ``sector_gain_db`` peak clipped at the floor and
    re-referenced to the peak, since EIRP is quoted on boresight.
    """
    c = np.cos(np.radians(angle_deg))
    lobe = np.maximum(config.sector_gain_db * c * np.abs(c), config.sector_floor_db)
    return lobe - config.sector_gain_db


def _path_loss(d, freq, los, config):
    d = np.maximum(d, 1.0)
    n = np.where(los, config.los_exponent, config.nlos_exponent)
    return fspl_1m_db(freq) + 10.0 * n * np.log10(d)


def rsrp_matrix(
    ue_xy: np.ndarray,
    cells: list[Cell],
    city: CityScenario,
    shadowing: np.ndarray | None = None,
    los: np.ndarray | None = None,
    indoor: np.ndarray | None = None,
) -> np.ndarray:
    """RSRP (dBm) for every UE and cell; ``shadowing`` is ``(n_ue, n_cells)`` dB."""
    cfg = city.config
    ue_xy = np.atleast_2d(np.asarray(ue_xy, dtype=float))
    if los is None:
        los = los_matrix(ue_xy, city)
    if indoor is None:
        indoor = indoor_mask(ue_xy, city)
    bs_idx = np.array([c.bs for c in cells])
    rel = ue_xy[:, None, :] - city.bs_positions[bs_idx][None]
    dist = np.hypot(rel[..., 0], rel[..., 1])
    az = np.degrees(np.arctan2(rel[..., 1], rel[..., 0]))
    gain = np.zeros_like(dist)
    for j, c in enumerate(cells):
        if c.boresight_deg is not None:
            gain[:, j] = sector_gain_db(az[:, j] - c.boresight_deg, cfg)
    freqs = np.array([c.freq_hz for c in cells])
    link_los = los[:, bs_idx]
    pl = np.stack(
        [_path_loss(dist[:, j], freqs[j], link_los[:, j], cfg) for j in range(len(cells))], axis=1
    )
    out = cfg.eirp_dbm + gain - pl
    out -= cfg.wall_loss_db * np.asarray(indoor, dtype=float)[:, None]
    out -= cfg.nlos_penalty_db * (~link_los)
    if shadowing is not None:
        out -= shadowing
    return out


def compute_rsrp(ue_position, cell: Cell, city: CityScenario, shadowing_db: float = 0.0) -> float:
    sh = np.array([[shadowing_db]])
    return float(rsrp_matrix(np.asarray(ue_position, dtype=float), [cell], city, sh)[0, 0])


# -- samples -------------------------------------------------------------------


@dataclass
class Sample:
    x: np.ndarray  # primary RSRP, dBm
    y_sc: np.ndarray  # secondary RSRP, dBm
    y_ps: np.ndarray  # distance to each BS, m
    y_in: int
    y_los: np.ndarray


@dataclass
class LabelBlock:
    """Column-stacked samples (one row per UE)."""

    x: np.ndarray
    sc: np.ndarray
    ps: np.ndarray
    indoor: np.ndarray
    los: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    def take(self, idx) -> "LabelBlock":
        return LabelBlock(self.x[idx], self.sc[idx], self.ps[idx], self.indoor[idx], self.los[idx])

    @staticmethod
    def concat(blocks: list["LabelBlock"]) -> "LabelBlock":
        return LabelBlock(*(np.concatenate([getattr(b, f) for b in blocks]) for f in
                            ("x", "sc", "ps", "indoor", "los")))

    def labels(self, task: str) -> np.ndarray:
        return {"SC": self.sc, "PS": self.ps, "IN": self.indoor, "LOS": self.los}[task]


def label_samples(ue_xy: np.ndarray, city: CityScenario, rng: np.random.Generator | None) -> LabelBlock:
    ue_xy = np.atleast_2d(np.asarray(ue_xy, dtype=float))
    n = len(ue_xy)
    los = los_matrix(ue_xy, city)
    indoor = indoor_mask(ue_xy, city)
    sigma = city.config.shadowing_db
    n_p, n_s = len(city.primary_cells), len(city.secondary_cells)
    if rng is None or sigma == 0:
        sh_p, sh_s = np.zeros((n, n_p)), np.zeros((n, n_s))
    else:
        sh_p = rng.normal(0.0, sigma, size=(n, n_p))
        sh_s = rng.normal(0.0, sigma, size=(n, n_s))
    x = rsrp_matrix(ue_xy, city.primary_cells, city, sh_p, los, indoor)
    sc = rsrp_matrix(ue_xy, city.secondary_cells, city, sh_s, los, indoor)
    rel = ue_xy[:, None, :] - city.bs_positions[None]
    ps = np.hypot(rel[..., 0], rel[..., 1])
    los_sec = los[:, [c.bs for c in city.secondary_cells]].astype(np.float64)
    return LabelBlock(x, sc, ps, indoor.astype(np.float64), los_sec)


def label_sample(ue_position, city: CityScenario, seed: int | None = None) -> Sample:
    rng = None if seed is None else np.random.default_rng(seed)
    b = label_samples(np.asarray(ue_position, dtype=float), city, rng)
    return Sample(b.x[0], b.sc[0], b.ps[0], int(b.indoor[0]), b.los[0])


# -- node datasets -------------------------------------------------------------


@dataclass
class NodeDataset:
    city: int
    bs: int
    splits: dict[str, LabelBlock]
    mean: np.ndarray
    std: np.ndarray
    seed: int = 0
    config: dict = field(default_factory=dict)

    @property
    def node_id(self) -> str:
        return f"c{self.city}b{self.bs}"

    def features(self, split: str) -> np.ndarray:
        return (self.splits[split].x - self.mean) / self.std

    def __repr__(self) -> str:
        sizes = "/".join(str(len(self.splits[s])) for s in SPLIT_NAMES)
        return f"NodeDataset({self.node_id}, {sizes})"


def standardization(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def split_sizes(n: int, ratios=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    n_train = int(np.floor(n * ratios[0] + 1e-9))
    n_val = int(np.floor(n * ratios[1] + 1e-9))
    return n_train, n_val, n - n_train - n_val


def apportion(total: int, parts: int) -> list[int]:
    """Cumulative-floor apportionment, e.g. 350 over 4 -> 87/88/87/88."""
    edges = [(i * total) // parts for i in range(parts + 1)]
    return [edges[i + 1] - edges[i] for i in range(parts)]


def make_node(city: int, bs: int, block: LabelBlock, rng, config: ScenarioConfig, seed: int) -> NodeDataset:
    n = len(block)
    if n < config.min_node_samples:
        raise ValueError(f"node c{city}b{bs} has only {n} samples (< {config.min_node_samples})")
    order = rng.permutation(n)
    a, b, _ = split_sizes(n, config.split)
    splits = {
        "train": block.take(order[:a]),
        "val": block.take(order[a:a + b]),
        "test": block.take(order[a + b:]),
    }
    mean, std = standardization(splits["train"].x)
    return NodeDataset(city, bs, splits, mean, std, seed, config.to_dict())


def build_datasets(config: ScenarioConfig = ScenarioConfig(), seed: int = 0) -> list[NodeDataset]:
    nodes = []
    for c, n_snap in enumerate(apportion(config.n_snapshots, config.n_cities)):
        city = generate_city(int(np.random.SeedSequence([seed, c]).generate_state(1)[0]), config)
        rng = np.random.default_rng([seed, c, 1])
        n = n_snap * config.ues_per_snapshot
        ue = rng.uniform(0.0, config.extent_m, size=(n, 2))
        block = label_samples(ue, city, rng)
        best = block.x.reshape(n, city.n_bs, -1).max(axis=2)
        owner = best.argmax(axis=1)
        for b in range(city.n_bs):
            nodes.append(make_node(c, b, block.take(np.flatnonzero(owner == b)), rng, config, seed))
    return nodes


# -- serialization -------------------------------------------------------------

_FIELDS = ("x", "sc", "ps", "indoor", "los")


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def write_zip(path: Path, entries: dict[str, bytes]) -> None:
    """Zip with fixed timestamps so equal content gives equal bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, entries[name])


def save_node(node: NodeDataset, path) -> Path:
    path = Path(path)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "kind": "ranmtl.node_dataset",
        "city": node.city,
        "bs": node.bs,
        "seed": node.seed,
        "config": node.config,
        "tasks": list(TASK_ORDER),
        "sizes": {s: len(node.splits[s]) for s in SPLIT_NAMES},
    }
    entries = {"meta.json": json.dumps(meta, sort_keys=True, indent=1).encode()}
    entries["stats/mean.npy"] = _npy_bytes(node.mean)
    entries["stats/std.npy"] = _npy_bytes(node.std)
    for s in SPLIT_NAMES:
        for f in _FIELDS:
            entries[f"{s}/{f}.npy"] = _npy_bytes(getattr(node.splits[s], f))
    write_zip(path, entries)
    return path


def load_node(path) -> NodeDataset:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported schema version {meta.get('schema_version')}")

        def arr(name):
            return np.lib.format.read_array(io.BytesIO(zf.read(name)))

        splits = {s: LabelBlock(*(arr(f"{s}/{f}.npy") for f in _FIELDS)) for s in SPLIT_NAMES}
        return NodeDataset(meta["city"], meta["bs"], splits, arr("stats/mean.npy"),
                           arr("stats/std.npy"), meta["seed"], meta["config"])


def save_datasets(nodes: list[NodeDataset], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [save_node(n, out / f"{n.node_id}.npz") for n in nodes]


def load_datasets(directory) -> list[NodeDataset]:
    paths = sorted(Path(directory).glob("c*b*.npz"))
    if not paths:
        raise FileNotFoundError(f"no node datasets in {directory}")
    return [load_node(p) for p in paths]


def with_overrides(config: ScenarioConfig, **kw) -> ScenarioConfig:
    return replace(config, **kw)
