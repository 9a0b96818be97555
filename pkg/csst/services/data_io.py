"""
Dataset ingestion, persistence, deterministic splits and the synthetic city generator.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import softplus

from csst.core.errors import ConfigError, DataError
from csst.schemas.config import SynthConfig
from csst.schemas.dataset import PORTRAIT_TOLERANCE, Dataset, FeatureTable, Poi, split_portrait
from csst.services.graph import AttributedGraph, build_graph, edge_weight
from csst.utils.logger import get_logger

logger = get_logger(__name__)

POI_BASE_COLUMNS = ["id", "lon", "lat", "area_m2", "traffic_level"]
REPORT_COLUMNS = ["poi_id", "interval_index", "reported_count"]
LABEL_COLUMNS = ["poi_id", "interval_index", "true_flow"]
PORTRAIT_RENORMALIZE_TOLERANCE = 1e-3
FLOAT_FORMAT = "%.17g"


# ---------------------------------------------------------------------------
# synthetic city

def _softplus(x):
    return softplus(np.asarray(x, dtype=np.float64))


def attribute_score(cfg: SynthConfig, log_area: np.ndarray, young: np.ndarray,
                    traffic_scaled: np.ndarray) -> np.ndarray:
    """Pre-activation flow driven by a POI's own area, young-adult share and traffic."""
    return (
        cfg.intercept
        + cfg.area_weight * (np.asarray(log_area) - cfg.log_area_mean) / cfg.log_area_std
        + cfg.portrait_weight * np.asarray(young)
        + cfg.traffic_weight * np.asarray(traffic_scaled)
    )


def neighbor_spill(graph: AttributedGraph, ids: Sequence[str], strength: np.ndarray, sigma_m: float) -> np.ndarray:
    """Distance-weighted sum of each POI's neighbor strengths (its own is excluded)."""
    position = {pid: i for i, pid in enumerate(ids)}
    spill = np.zeros(len(ids))
    for i, pid in enumerate(ids):
        for nbr, dist in graph.neighbor_list(pid):
            spill[i] += edge_weight(dist, sigma_m) * strength[position[nbr]]
    return spill


def synthetic_flow(cfg: SynthConfig, log_area: np.ndarray, young: np.ndarray, traffic_scaled: np.ndarray,
                   spill: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Mean true flow per POI; non-decreasing in `log_area` since area_weight >= 0."""
    score = attribute_score(cfg, log_area, young, traffic_scaled)
    return cfg.flow_scale * _softplus(score + cfg.neighbor_weight * np.asarray(spill) + np.asarray(noise))


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Synthetic POIs whose GPS reports heavily undercount the true flow.

    True flow rises with area, young-adult share and traffic level, plus a
    distance-weighted spill-over from neighbors; reports are a per-POI ratio
    (median below 0.1, long right tail) of the per-interval flow.
    """
    if cfg.n_location_features > 3:
        raise ConfigError("at most 3 location features (east, north, radius) are generated")
    rng = np.random.default_rng(cfg.seed)
    n, T = cfg.n_pois, cfg.n_intervals

    half = cfg.extent_km / 2.0
    east = rng.uniform(-half, half, size=n)
    north = rng.uniform(-half, half, size=n)
    lat = cfg.center_lat + north / 110.574
    lon = cfg.center_lon + east / (111.320 * math.cos(math.radians(cfg.center_lat)))

    log_area = rng.normal(cfg.log_area_mean, cfg.log_area_std, size=n)
    area = np.exp(log_area)
    traffic = rng.integers(0, cfg.n_traffic_levels, size=n).astype(np.float64)
    radius = np.sqrt(east ** 2 + north ** 2) / half
    location = np.stack([east / half, north / half, radius], axis=1)[:, : cfg.n_location_features]

    ages = rng.dirichlet(np.full(cfg.age_bands, 2.0), size=n)
    genders = rng.dirichlet(np.array([5.0, 5.0]), size=n)
    young = ages[:, cfg.young_adult_band]

    traffic_scaled = traffic / max(cfg.n_traffic_levels - 1, 1)
    ids = [f"poi_{i:05d}" for i in range(n)]
    v_a = np.column_stack([area, traffic, location])
    v_c = np.column_stack([ages, genders])

    placeholders = [
        Poi(id=ids[i], lon=float(lon[i]), lat=float(lat[i]), v_a=v_a[i], v_c=v_c[i], reports=np.zeros(T))
        for i in range(n)
    ]
    graph = build_graph(placeholders, cfg.k, cfg.cutoff_m)
    strength = _softplus(attribute_score(cfg, log_area, young, traffic_scaled))
    spill = neighbor_spill(graph, ids, strength, cfg.sigma_m)
    noise = rng.normal(0.0, cfg.noise_scale, size=n)
    flow = synthetic_flow(cfg, log_area, young, traffic_scaled, spill, noise)

    phase = rng.uniform(0.0, 2.0 * math.pi, size=n)
    t = np.arange(T)
    seasonal = 1.0 + cfg.seasonal_amplitude * np.sin(2.0 * math.pi * t[None, :] / T + phase[:, None])
    flows = flow[:, None] * seasonal

    ratio = rng.beta(cfg.report_beta_a, cfg.report_beta_b, size=n)
    tail = rng.random(n) < cfg.report_tail_share
    ratio = np.where(tail, ratio * cfg.report_tail_scale, ratio)
    ratio = np.minimum(ratio, 1.0 / (1.0 + cfg.seasonal_amplitude))
    reports = ratio[:, None] * flows

    labels = flows.mean(axis=1)
    if cfg.n_labeled is None:
        keep = set(range(n))
    else:
        keep = set(int(i) for i in rng.choice(n, size=cfg.n_labeled, replace=False))

    pois = tuple(
        Poi(
            id=ids[i],
            lon=float(lon[i]),
            lat=float(lat[i]),
            v_a=v_a[i].copy(),
            v_c=v_c[i].copy(),
            reports=reports[i].copy(),
            label=float(labels[i]) if i in keep else None,
        )
        for i in range(n)
    )
    dataset = Dataset(
        pois=pois,
        window=tuple(range(T)),
        portrait_groups=(cfg.age_bands, 2),
        provenance={"generator": "synthetic", "config": cfg.model_dump(mode="json"), "seed": cfg.seed},
        truth={ids[i]: float(labels[i]) for i in range(n)},
    )
    logger.info(
        "Generated synthetic dataset",
        n_pois=n,
        n_labeled=len(keep),
        median_report_ratio=float(np.median(ratio)),
        mean_flow=float(labels.mean()),
    )
    return dataset


def report_ratio_median(dataset: Dataset) -> float:
    """Median over POIs of total reports / total true flow (needs ground truth)."""
    truth = dataset.truth or {p.id: p.label for p in dataset.pois if p.labeled}
    ratios = [
        p.total_reports / (truth[p.id] * dataset.n_intervals)
        for p in dataset.pois
        if truth.get(p.id)
    ]
    if not ratios:
        raise DataError("no ground truth available for the report ratio")
    return float(np.median(ratios))


# ---------------------------------------------------------------------------
# features

@dataclass(frozen=True)
class FeatureScaler:
    """log-area / log1p-report transform followed by z-scoring (statistics over all POIs)."""

    va_mean: Tuple[float, ...]
    va_std: Tuple[float, ...]
    report_mean: float
    report_std: float

    @staticmethod
    def _raw_va(pois: Sequence[Poi]) -> np.ndarray:
        va = np.stack([p.v_a for p in pois]).astype(np.float64)
        va[:, 0] = np.log(va[:, 0])
        return va

    @staticmethod
    def _raw_reports(pois: Sequence[Poi]) -> np.ndarray:
        return np.log1p(np.stack([p.reports for p in pois]).astype(np.float64))

    @classmethod
    def fit(cls, dataset: Dataset) -> "FeatureScaler":
        va = cls._raw_va(dataset.pois)
        reports = cls._raw_reports(dataset.pois)
        std = va.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        r_std = float(reports.std()) or 1.0
        return cls(
            va_mean=tuple(float(v) for v in va.mean(axis=0)),
            va_std=tuple(float(v) for v in std),
            report_mean=float(reports.mean()),
            report_std=r_std,
        )

    def transform(self, dataset: Dataset) -> FeatureTable:
        va = (self._raw_va(dataset.pois) - np.array(self.va_mean)) / np.array(self.va_std)
        reports = (self._raw_reports(dataset.pois) - self.report_mean) / self.report_std
        v_c = np.stack([p.v_c for p in dataset.pois]).astype(np.float64)
        return FeatureTable(ids=tuple(dataset.ids), v_a=va, v_c=v_c, reports=reports)

    def to_dict(self) -> Dict[str, object]:
        return {
            "va_mean": list(self.va_mean),
            "va_std": list(self.va_std),
            "report_mean": self.report_mean,
            "report_std": self.report_std,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, object]) -> "FeatureScaler":
        return cls(
            va_mean=tuple(payload["va_mean"]),
            va_std=tuple(payload["va_std"]),
            report_mean=float(payload["report_mean"]),
            report_std=float(payload["report_std"]),
        )


# ---------------------------------------------------------------------------
# CSV persistence

def _suffix_columns(columns: Sequence[str], prefix: str) -> List[str]:
    found = [c for c in columns if c.startswith(prefix)]
    try:
        return sorted(found, key=lambda c: int(c[len(prefix):]))
    except ValueError as exc:
        raise DataError(f"malformed column name among {found}") from exc


def save_dataset(dataset: Dataset, directory: Path) -> Dict[str, Path]:
    """Write pois.csv, reports.csv and labels.csv (one label row per labeled POI)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n_loc = dataset.dims[0] - 2

    poi_rows = []
    for p in dataset.pois:
        row = {"id": p.id, "lon": p.lon, "lat": p.lat, "area_m2": p.v_a[0], "traffic_level": p.v_a[1]}
        row.update({f"loc_feat_{j + 1}": p.v_a[2 + j] for j in range(n_loc)})
        groups = split_portrait(p.v_c, dataset.portrait_groups)
        row.update({f"age_share_{j + 1}": v for j, v in enumerate(groups[0])})
        for extra in groups[1:]:
            row.update({f"gender_share_{j + 1}": v for j, v in enumerate(extra)})
        poi_rows.append(row)
    reports = [
        {"poi_id": p.id, "interval_index": t, "reported_count": float(p.reports[j])}
        for p in dataset.pois
        for j, t in enumerate(dataset.window)
    ]
    labels = [
        {"poi_id": p.id, "interval_index": dataset.window[0], "true_flow": p.label}
        for p in dataset.pois
        if p.labeled
    ]
    paths = {
        "pois": directory / "pois.csv",
        "reports": directory / "reports.csv",
        "labels": directory / "labels.csv",
    }
    pd.DataFrame(poi_rows).to_csv(paths["pois"], index=False, float_format=FLOAT_FORMAT, encoding="utf-8")
    pd.DataFrame(reports, columns=REPORT_COLUMNS).to_csv(
        paths["reports"], index=False, float_format=FLOAT_FORMAT, encoding="utf-8")
    pd.DataFrame(labels, columns=LABEL_COLUMNS).to_csv(
        paths["labels"], index=False, float_format=FLOAT_FORMAT, encoding="utf-8")
    logger.info("Saved dataset", directory=str(directory), n_pois=len(dataset), n_labeled=len(labels))
    return paths


def _read_csv(path: Path, required: Sequence[str], what: str) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{what} file not found: {path}", detail={"path": str(path)})
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DataError(f"{what} file {path} missing columns: {missing}", detail={"columns": missing})
    return frame


def _numeric(frame: pd.DataFrame, columns: Sequence[str], path: Path) -> pd.DataFrame:
    """Parse columns as floats; reject the first malformed row with its 1-based file line."""
    out = frame.copy()
    for column in columns:
        parsed = pd.to_numeric(frame[column].str.strip(), errors="coerce")
        bad = parsed.isna() | ~np.isfinite(parsed.fillna(0.0))
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError(
                f"{path}: line {row + 2}: malformed {column} value {frame[column].iloc[row]!r}",
                detail={"line": row + 2, "column": column},
            )
        out[column] = parsed.astype(np.float64)
    return out


def load_dataset(pois_path: Path, reports_path: Path, labels_path: Optional[Path] = None,
                 portrait_groups: Sequence[int] = (4, 2)) -> Dataset:
    """Validated Dataset from the three CSV files (labels optional)."""
    pois_path, reports_path = Path(pois_path), Path(reports_path)
    frame = _read_csv(pois_path, POI_BASE_COLUMNS, "pois")
    loc_cols = _suffix_columns(frame.columns, "loc_feat_")
    age_cols = _suffix_columns(frame.columns, "age_share_")
    gender_cols = _suffix_columns(frame.columns, "gender_share_")
    if not age_cols or not gender_cols:
        raise DataError(f"{pois_path}: age_share_* and gender_share_* columns are mandatory")
    if (len(age_cols), len(gender_cols)) != tuple(portrait_groups):
        portrait_groups = (len(age_cols), len(gender_cols))
    numeric_cols = ["lon", "lat", "area_m2", "traffic_level", *loc_cols, *age_cols, *gender_cols]
    frame = _numeric(frame, numeric_cols, pois_path)

    ids = frame["id"].str.strip().tolist()
    seen: Dict[str, int] = {}
    for line, pid in enumerate(ids, start=2):
        if not pid:
            raise DataError(f"{pois_path}: line {line}: empty id", detail={"line": line})
        if pid in seen:
            raise DataError(f"{pois_path}: line {line}: duplicate id {pid} (first at line {seen[pid]})",
                            detail={"line": line, "poi_id": pid})
        seen[pid] = line

    reports_frame = _numeric(_read_csv(reports_path, REPORT_COLUMNS, "reports"),
                             ["interval_index", "reported_count"], reports_path)
    reports_frame["poi_id"] = reports_frame["poi_id"].str.strip()
    unknown = sorted(set(reports_frame["poi_id"]) - set(ids))
    if unknown:
        raise DataError(f"{reports_path}: reports reference unknown poi_id {unknown[0]}",
                        detail={"poi_id": unknown[0]})
    if (reports_frame["reported_count"] < 0).any():
        row = int(np.flatnonzero((reports_frame["reported_count"] < 0).to_numpy())[0])
        raise DataError(f"{reports_path}: line {row + 2}: negative reported_count", detail={"line": row + 2})
    reports_frame["interval_index"] = reports_frame["interval_index"].astype(np.int64)
    window = tuple(sorted(reports_frame["interval_index"].unique().tolist()))
    table = reports_frame.pivot_table(index="poi_id", columns="interval_index", values="reported_count",
                                      aggfunc="sum").reindex(index=ids, columns=list(window))
    if table.isna().to_numpy().any():
        missing_id = table.index[table.isna().any(axis=1)][0]
        raise DataError(f"{reports_path}: missing report intervals for poi_id {missing_id}",
                        detail={"poi_id": missing_id})

    labels: Dict[str, float] = {}
    if labels_path and Path(labels_path).exists():
        labels_path = Path(labels_path)
        label_frame = _numeric(_read_csv(labels_path, LABEL_COLUMNS, "labels"),
                               ["interval_index", "true_flow"], labels_path)
        label_frame["poi_id"] = label_frame["poi_id"].str.strip()
        unknown = sorted(set(label_frame["poi_id"]) - set(ids))
        if unknown:
            raise DataError(f"{labels_path}: labels reference unknown poi_id {unknown[0]}",
                            detail={"poi_id": unknown[0]})
        if (label_frame["true_flow"] < 0).any():
            raise DataError(f"{labels_path}: negative true_flow")
        labels = label_frame.groupby("poi_id", sort=False)["true_flow"].mean().to_dict()
    elif labels_path:
        raise DataError(f"labels file not found: {labels_path}", detail={"path": str(labels_path)})

    pois = []
    renormalized = 0
    for i, pid in enumerate(ids):
        row = frame.iloc[i]
        v_c_groups = [row[age_cols].to_numpy(dtype=np.float64), row[gender_cols].to_numpy(dtype=np.float64)]
        fixed = []
        for group in v_c_groups:
            total = group.sum()
            if abs(total - 1.0) > PORTRAIT_RENORMALIZE_TOLERANCE or total <= 0:
                raise DataError(f"{pois_path}: line {i + 2}: portrait group sums to {total:.6f}",
                                detail={"line": i + 2, "poi_id": pid})
            if abs(total - 1.0) > PORTRAIT_TOLERANCE:
                renormalized += 1
                group = group / total
            fixed.append(group)
        poi = Poi(
            id=pid,
            lon=float(row["lon"]),
            lat=float(row["lat"]),
            v_a=np.concatenate([[row["area_m2"], row["traffic_level"]], row[loc_cols].to_numpy(dtype=np.float64)]),
            v_c=np.concatenate(fixed),
            reports=table.loc[pid].to_numpy(dtype=np.float64),
            label=float(labels[pid]) if pid in labels else None,
        )
        try:
            poi.validate(portrait_groups)
        except DataError as exc:
            raise DataError(f"{pois_path}: line {i + 2}: {exc.message}", detail={"line": i + 2}) from exc
        pois.append(poi)

    if renormalized:
        logger.warning("Renormalized portrait groups", count=renormalized, path=str(pois_path))
    dataset = Dataset(
        pois=tuple(pois),
        window=window,
        portrait_groups=tuple(portrait_groups),
        provenance={"pois": str(pois_path), "reports": str(reports_path),
                    "labels": str(labels_path) if labels_path else None},
    )
    logger.info("Loaded dataset", n_pois=len(pois), n_labeled=len(labels), n_unlabeled=len(pois) - len(labels),
                n_intervals=len(window))
    return dataset


# ---------------------------------------------------------------------------
# splits

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(dataset: Dataset, train_fraction: float, valid_fraction: float, fold_index: int = 0,
          n_folds: int = 1, seed: int = 0) -> Tuple[List[str], List[str], List[str]]:
    """(train, valid, test) ids over the labeled POIs.

    One seeded permutation is rotated by fold; validation takes the first
    slice, training the next `train_fraction` share, test the remainder. The
    same seed and fold therefore give nested training sets across fractions.
    """
    if not 0.0 < train_fraction < 1.0 or not 0.0 < valid_fraction < 1.0:
        raise ConfigError("split fractions must lie in (0, 1)")
    if train_fraction + valid_fraction >= 1.0:
        raise ConfigError("train + valid fractions leave no test remainder")
    if not 0 <= fold_index < n_folds:
        raise ConfigError(f"fold_index {fold_index} outside [0, {n_folds})")

    labeled = sorted(dataset.labeled_ids)
    n = len(labeled)
    order = [labeled[i] for i in np.random.default_rng(seed).permutation(n)]
    offset = (fold_index * n) // n_folds
    order = order[offset:] + order[:offset]

    n_valid = _round_half_up(valid_fraction * n)
    n_train = _round_half_up(train_fraction * n)
    valid = order[:n_valid]
    train = order[n_valid:n_valid + n_train]
    test = order[n_valid + n_train:]
    if not train or not valid or not test:
        raise DataError(
            f"split of {n} labeled POIs into train={len(train)} valid={len(valid)} test={len(test)} has an empty part",
            detail={"n_labeled": n, "train_fraction": train_fraction},
        )
    return train, valid, test
