"""AU catalogue, adjacency/attention priors and the prior-weight schedule.

Two priors steer the graph attention over AU nodes: a binary adjacency
``A`` of coordinated AU pairs, and a row-stochastic attention prior ``D``
estimated from label co-occurrence and confined to the support of ``A``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import tomli

from .errors import ConfigError, ContractError

DEFAULT_PRIOR_PATH = Path(str(resources.files("fedpsyau") / "data" / "default_priors.toml"))
PRIOR_MODES = ("both", "psych", "data", "none")
ROW_TOL = 1e-9


@dataclass(frozen=True)
class AuGroup:
    aus: tuple[int, ...]
    rois: tuple[int, ...]
    region: str  # "upper" | "lower"


@dataclass(frozen=True)
class AuCatalog:
    """Ordered AU ids, their ROI groups and upper/lower face split.

    AU node order throughout the network is group order, then AU order
    within the group; for the default catalogue this is also ascending
    AU id.
    """

    groups: tuple[AuGroup, ...]
    n_rois: int = 65

    def __post_init__(self):
        if not self.groups:
            raise ConfigError("catalogue needs at least one group", "catalog.groups")
        seen = set()
        for gi, g in enumerate(self.groups):
            if g.region not in ("upper", "lower"):
                raise ConfigError(f"region must be upper or lower, got {g.region!r}", f"catalog.groups[{gi}].region")
            if not g.aus or not g.rois:
                raise ConfigError("group needs AUs and ROIs", f"catalog.groups[{gi}]")
            if any(r < 0 or r >= self.n_rois for r in g.rois):
                raise ConfigError(f"ROI index outside [0, {self.n_rois})", f"catalog.groups[{gi}].rois")
            if len(set(g.rois)) != len(g.rois):
                raise ConfigError("duplicate ROI in group", f"catalog.groups[{gi}].rois")
            dup = seen.intersection(g.aus)
            if dup:
                raise ConfigError(f"AU {sorted(dup)} listed in two groups", f"catalog.groups[{gi}].aus")
            seen.update(g.aus)

    @property
    def au_ids(self) -> tuple[int, ...]:
        return tuple(a for g in self.groups for a in g.aus)

    @property
    def n_aus(self) -> int:
        return len(self.au_ids)

    def index(self, au: int) -> int:
        try:
            return self.au_ids.index(au)
        except ValueError:
            raise ConfigError(f"AU {au} is not in the catalogue {self.au_ids}") from None

    def group_of_au(self, au: int) -> int:
        """1-based group index."""
        for gi, g in enumerate(self.groups, start=1):
            if au in g.aus:
                return gi
        raise ConfigError(f"AU {au} is not in the catalogue")

    def region_of_au(self, au: int) -> str:
        return self.groups[self.group_of_au(au) - 1].region

    def au_count_of_group(self, g: int) -> int:
        return len(self.groups[g - 1].aus)

    def roi_group(self, g: int) -> tuple[int, ...]:
        return self.groups[g - 1].rois

    @property
    def regions(self) -> np.ndarray:
        """Region label per AU node, in node order."""
        return np.array([g.region for g in self.groups for _ in g.aus])

    def region_indices(self, region: str) -> np.ndarray:
        return np.flatnonzero(self.regions == region)


@dataclass(frozen=True)
class BetaSchedule:
    """Weight of the data-driven prior as a function of round/epoch index."""

    kind: str = "linear"
    start: float = 0.5
    end: float = 0.0
    horizon: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "cosine"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}", "beta.kind")
        for name in ("start", "end"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"must lie in [0, 1], got {v}", f"beta.{name}")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1", "beta.horizon")

    def __call__(self, t: float) -> float:
        if self.kind == "constant":
            return self.start
        frac = min(max(t / self.horizon, 0.0), 1.0)
        if self.kind == "linear":
            return self.start + (self.end - self.start) * frac
        return self.end + 0.5 * (self.start - self.end) * (1.0 + math.cos(math.pi * frac))

    def with_horizon(self, horizon: int) -> "BetaSchedule":
        return replace(self, horizon=max(int(horizon), 1))


def beta(t: float, schedule: BetaSchedule) -> float:
    return schedule(t)


@dataclass(frozen=True)
class PriorPack:
    """Adjacency ``A``, attention prior ``D`` and the beta schedule.

    ``isolated`` marks nodes without neighbours; their ``D`` row is zero.
    ``notes`` records fallbacks and normalisations applied on the way.
    """

    A: np.ndarray
    D: np.ndarray
    schedule: BetaSchedule = field(default_factory=BetaSchedule)
    use_data_prior: bool = True
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("A", "D"):
            m = np.array(getattr(self, name), dtype=np.float64)
            m.setflags(write=False)
            object.__setattr__(self, name, m)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def isolated(self) -> np.ndarray:
        return ~self.A.astype(bool).any(axis=1)

    def beta(self, t: float) -> float:
        return self.schedule(t) if self.use_data_prior else 0.0

    def restrict(self, idx) -> "PriorPack":
        """Sub-pack over the given nodes, ``D`` renormalised on the sub-block."""
        idx = np.asarray(idx)
        A = self.A[np.ix_(idx, idx)].copy()
        D, notes = _renormalise(self.D[np.ix_(idx, idx)] * A, A)
        return replace(self, A=A, D=D, notes=self.notes + notes)


def _frozen(a) -> np.ndarray:
    return np.array(a, dtype=np.float64)


def _renormalise(D: np.ndarray, A: np.ndarray) -> tuple[np.ndarray, tuple[str, ...]]:
    """Confine ``D`` to ``A``'s support and make every non-isolated row sum to one."""
    support = A > 0
    D = np.where(support, D, 0.0)
    np.fill_diagonal(D, 0.0)
    notes = []
    out = np.zeros_like(D)
    for i in range(D.shape[0]):
        deg = support[i].sum()
        if deg == 0:
            continue
        s = D[i].sum()
        if s > 0:
            out[i] = D[i] / s
        else:
            out[i] = support[i] / deg
            notes.append(f"row {i}: no co-occurrence mass, uniform over neighbours")
    return out, tuple(notes)


def read_prior_config(path=None) -> dict:
    path = Path(path) if path is not None else DEFAULT_PRIOR_PATH
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"prior config {path} not found") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"prior config {path}: {exc}") from None


def catalog_from_config(cfg: dict) -> AuCatalog:
    cat = cfg.get("catalog")
    if not isinstance(cat, dict) or "groups" not in cat:
        raise ConfigError("missing [catalog] with groups", "catalog")
    groups = []
    for gi, g in enumerate(cat["groups"]):
        try:
            groups.append(AuGroup(tuple(int(a) for a in g["aus"]), tuple(int(r) for r in g["rois"]), g["region"]))
        except KeyError as exc:
            raise ConfigError(f"missing key {exc}", f"catalog.groups[{gi}]") from None
    catalog = AuCatalog(tuple(groups), n_rois=int(cat.get("n_rois", 65)))
    if "au_ids" in cat and tuple(cat["au_ids"]) != catalog.au_ids:
        raise ConfigError("au_ids disagree with the group listing", "catalog.au_ids")
    return catalog


def default_catalog() -> AuCatalog:
    return catalog_from_config(read_prior_config())


def schedule_from_config(cfg: dict, horizon: int = 1) -> BetaSchedule:
    b = cfg.get("beta", {})
    return BetaSchedule(
        kind=b.get("kind", "linear"),
        start=float(b.get("start", 0.5)),
        end=float(b.get("end", 0.0)),
        horizon=int(b.get("horizon", horizon)),
    )


def load_adjacency(cfg: dict, catalog: AuCatalog | None = None) -> PriorPack:
    """Binary symmetric adjacency over the catalogue from a prior config.

    The config gives either ``adjacency.pairs`` (unordered AU id pairs) or
    ``adjacency.matrix`` (rows in catalogue order). An asymmetric matrix is
    symmetrised by union and the fact is recorded in ``notes``. ``D`` is
    initialised uniform over each node's neighbours.
    """
    catalog = catalog or catalog_from_config(cfg)
    n = catalog.n_aus
    adj = cfg.get("adjacency", {})
    A = np.zeros((n, n))
    notes = []
    if "matrix" in adj:
        M = np.asarray(adj["matrix"], dtype=np.float64)
        if M.shape != (n, n):
            raise ConfigError(f"matrix must be {n}x{n}, got {M.shape}", "adjacency.matrix")
        A = (M != 0).astype(np.float64)
        if not np.array_equal(A, A.T):
            warnings.warn("asymmetric adjacency normalised to its symmetric closure", stacklevel=2)
            notes.append("asymmetric adjacency symmetrised")
            A = np.maximum(A, A.T)
    for k, pair in enumerate(adj.get("pairs", [])):
        if len(pair) != 2:
            raise ConfigError("pairs must have two AU ids", f"adjacency.pairs[{k}]")
        i, j = catalog.index(int(pair[0])), catalog.index(int(pair[1]))
        A[i, j] = A[j, i] = 1.0
    np.fill_diagonal(A, 0.0)
    D, dn = _renormalise(A.copy(), A)
    return PriorPack(A=A, D=D, schedule=schedule_from_config(cfg), notes=tuple(notes) + dn)


def compute_cooccurrence(au_labels, A: np.ndarray) -> np.ndarray:
    """Row-stochastic attention prior from label co-occurrence.

    ``D_ij = count(i and j) / count(i)`` on ``A``'s support, diagonal zero,
    rows renormalised; rows without co-occurrence mass (including AUs that
    never fire) fall back to uniform over their neighbours.
    """
    Y = np.asarray(au_labels, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] < 1:
        raise ContractError("need at least one label vector")
    if Y.shape[1] != A.shape[0]:
        raise ContractError(f"labels have {Y.shape[1]} AUs, adjacency has {A.shape[0]}")
    joint = Y.T @ Y
    counts = np.diag(joint).copy()
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = np.where(counts[:, None] > 0, joint / counts[:, None], 0.0)
    D, _ = _renormalise(cond, A)
    return D


def mask_intra_region(pack: PriorPack, catalog: AuCatalog) -> PriorPack:
    """Drop every same-region edge, keeping only cross-region structure."""
    regions = catalog.regions
    cross = regions[:, None] != regions[None, :]
    A = pack.A * cross
    D, notes = _renormalise(pack.D * cross, A)
    iso = np.flatnonzero(~A.astype(bool).any(axis=1))
    if iso.size:
        notes = notes + (f"isolated after masking: nodes {iso.tolist()}",)
    return replace(pack, A=A, D=D, notes=pack.notes + notes)


def fully_connected(n: int) -> np.ndarray:
    A = np.ones((n, n))
    np.fill_diagonal(A, 0.0)
    return A


def build_priors(
    catalog: AuCatalog,
    cfg: dict,
    au_labels=None,
    mode: str = "both",
    horizon: int = 1,
) -> PriorPack:
    """Assemble the pack used by the network under one of the prior ablations.

    ``both``: psychological ``A`` and data-driven ``D``; ``psych``: ``A``
    only (``D`` term dropped); ``data``: ``A`` replaced by all-ones with
    ``D`` from data; ``none``: all-ones ``A`` and no ``D`` term. Parameter
    counts are identical across modes.
    """
    if mode not in PRIOR_MODES:
        raise ConfigError(f"prior mode must be one of {PRIOR_MODES}, got {mode!r}", "model.prior_mode")
    pack = load_adjacency(cfg, catalog)
    A = pack.A if mode in ("both", "psych") else fully_connected(catalog.n_aus)
    use_data = mode in ("both", "data")
    if au_labels is not None and len(au_labels):
        D = compute_cooccurrence(au_labels, A)
    else:
        D, _ = _renormalise(A.copy(), A)
    return PriorPack(
        A=_frozen(A),
        D=D,
        schedule=schedule_from_config(cfg, horizon).with_horizon(horizon),
        use_data_prior=use_data,
        notes=pack.notes,
    )
