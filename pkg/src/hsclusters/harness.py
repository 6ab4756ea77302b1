"""Monte-Carlo experiments over equilibrium ensembles.

Each trajectory ``j`` of an experiment uses ``cfg.for_trajectory(j)``, is
simulated once up to the largest grid time, and the log is sliced at every
grid time.  Trajectories may run in a process pool; results are merged in
trajectory order so the output does not depend on scheduling.

Standard errors come from a 200-sample bootstrap over trajectories, drawn
from a generator seeded by the ensemble seed (so they are reproducible too).
"""

from __future__ import annotations

import csv
import io
import json
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import __version__
from .clusters import all_root_sizes, largest_block_at, largest_block_history
from .dynamics import CollisionLog, evolve
from .ensemble import EnsembleConfig, sample_equilibrium
from .theory import enumerate_trees
from .torus import TWO_PI

N_BOOT = 200
CENSUS_KMAX = 4
BOOT_TAG = 0xB007


def kinetic_mean_free_time(n_particles: int, eps: float, beta: float) -> float:
    """Dilute-gas estimate: 1 / (n_partners * pi eps^2 * mean relative speed)."""
    partners = max(n_particles - 1, 1) / TWO_PI**3
    v_rel = 4.0 / math.sqrt(math.pi * beta)
    return 1.0 / (partners * math.pi * eps**2 * v_rel)


def map_trajectories(fn: Callable, jobs: Sequence, workers: int = 1) -> list:
    """``[fn(*job) for job in jobs]``, optionally on a process pool, in job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _boot_rng(cfg: EnsembleConfig, tag: int = 0) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, BOOT_TAG, tag])


def bootstrap_se(stat: Callable[[np.ndarray], np.ndarray], n_units: int,
                 rng: np.random.Generator, n_boot: int = N_BOOT) -> np.ndarray:
    """Bootstrap standard error of ``stat(indices)`` resampling units with replacement."""
    if n_units < 2:
        return np.zeros_like(np.asarray(stat(np.arange(n_units)), dtype=float))
    draws = np.array([stat(rng.integers(0, n_units, n_units)) for _ in range(n_boot)])
    return draws.std(axis=0, ddof=1)


def _run(cfg: EnsembleConfig, index: int, t_end: float) -> CollisionLog:
    s = sample_equilibrium(cfg.for_trajectory(index))
    if t_end <= 0:
        return CollisionLog(cfg.n_particles, cfg.eps, 0.0, [], [], [], [], [])
    _, log = evolve(s, t_end)
    return log


# mean free time -------------------------------------------------------------


@dataclass(frozen=True)
class MeanFreeTime:
    tau: float
    stderr: float
    collisions: int
    particle_time: float
    n_samples: int
    kinetic: float

    @property
    def rate(self) -> float:
        return 1.0 / self.tau


def _mfp_trajectory(cfg: EnsembleConfig, index: int, t_run: float) -> tuple[int, float]:
    return len(_run(cfg, index, t_run)), cfg.n_particles * t_run


def estimate_mean_free_time(cfg: EnsembleConfig, n_samples: int, t_run: float | None = None,
                            workers: int = 1) -> MeanFreeTime:
    """tau = total particle time / (2 * total collisions), over n_samples trajectories."""
    if n_samples < 10:
        raise ValueError("need at least 10 samples")
    kin = kinetic_mean_free_time(cfg.n_particles, cfg.eps, cfg.beta)
    t_run = 4.0 * kin if t_run is None else float(t_run)
    res = map_trajectories(_mfp_trajectory, [(cfg, j, t_run) for j in range(n_samples)], workers)
    coll = np.array([r[0] for r in res], dtype=float)
    ptime = np.array([r[1] for r in res])
    if coll.sum() == 0:
        raise ValueError("no collisions observed; run longer (t_run) or use more samples")

    def tau_of(idx):
        c = coll[idx].sum()
        return ptime[idx].sum() / (2 * c) if c else np.inf

    se = float(bootstrap_se(tau_of, n_samples, _boot_rng(cfg, 1)))
    return MeanFreeTime(float(tau_of(np.arange(n_samples))), se, int(coll.sum()),
                        float(ptime.sum()), n_samples, kin)


# cluster sizes --------------------------------------------------------------


@dataclass
class ClusterHistogram:
    t: float
    counts: dict[int, int]
    n_samples: int
    mean: float
    stderr: float
    prob_stderr: dict[int, float] = field(default_factory=dict)
    t_hat: float = math.nan

    def probability(self, k: int) -> float:
        return self.counts.get(k, 0) / self.n_samples

    def pmf(self, kmax: int | None = None) -> np.ndarray:
        kmax = max(self.counts, default=0) if kmax is None else kmax
        return np.array([self.probability(k) for k in range(kmax + 1)])

    def rows(self) -> list[dict]:
        return [{"k": k, "count": self.counts[k], "probability": self.probability(k),
                 "stderr": self.prob_stderr.get(k, 0.0)} for k in sorted(self.counts)]


@dataclass
class TrajectorySizes:
    index: int
    sizes: np.ndarray  # (G, roots)
    trees: np.ndarray  # (G, roots, kmax)
    collisions: int
    duration: float


def _cluster_trajectory(cfg, index, grid, root_average, kmax) -> TrajectorySizes:
    t_end = float(max(grid))
    log = _run(cfg, index, t_end)
    sizes, _, trees = all_root_sizes(log, grid, kmax=kmax)
    if not root_average:
        sizes, trees = sizes[:, :1], trees[:, :1]
    return TrajectorySizes(index, sizes, trees, len(log), t_end)


def trajectories_needed(cfg: EnsembleConfig, n_samples: int, root_average: bool) -> int:
    """Cluster samples per trajectory are N when averaging over roots, else 1."""
    per = cfg.n_particles if root_average else 1
    return max(1, math.ceil(n_samples / per))


@dataclass
class ClusterExperiment:
    histograms: list[ClusterHistogram]
    rate: float  # per-particle collision rate measured on the same runs
    rate_stderr: float
    root_average: bool
    n_trajectories: int
    bracket: tuple[float, float]
    per_trajectory_mean: np.ndarray  # (n_traj, G)
    censuses: list["TreeCensus"] = field(default_factory=list)

    def series_rows(self) -> list[dict]:
        return [{"t": h.t, "S": h.mean, "stderr": h.stderr, "t_hat": h.t_hat} for h in self.histograms]


def _collect(cfg, grid, n_samples, root_average, workers, kmax) -> list[TrajectorySizes]:
    grid = np.asarray(grid, float)
    if np.any(grid < 0) or np.any(np.diff(grid) < 0):
        raise ValueError("time grid must be non-negative and sorted")
    n_traj = trajectories_needed(cfg, n_samples, root_average)
    jobs = [(cfg, j, grid, root_average, kmax) for j in range(n_traj)]
    return map_trajectories(_cluster_trajectory, jobs, workers)


def _rate(cfg, runs) -> tuple[float, float]:
    coll = np.array([r.collisions for r in runs], float)
    ptime = np.array([cfg.n_particles * r.duration for r in runs])
    if ptime.sum() == 0:
        return math.nan, math.nan

    def rate_of(idx):
        return 2 * coll[idx].sum() / ptime[idx].sum()

    return float(rate_of(np.arange(len(runs)))), float(bootstrap_se(rate_of, len(runs), _boot_rng(cfg, 2)))


def fit_bracket(t_hat: np.ndarray, S: np.ndarray, t_max: float = 2.0) -> tuple[float, float]:
    """Smallest and largest c with S = e^{c t} - 1 over grid points 0 < t <= t_max."""
    sel = (t_hat > 0) & (t_hat <= t_max) & (S > 0)
    if not np.any(sel):
        return math.nan, math.nan
    c = np.log1p(S[sel]) / t_hat[sel]
    return float(c.min()), float(c.max())


def cluster_size_experiment(cfg: EnsembleConfig, time_grid: Sequence[float], n_samples: int,
                            root_average: bool = False, workers: int = 1) -> ClusterExperiment:
    """Histograms of |BC(root)| at each grid time (simulation units).

    Without root averaging particle 0 is the root and ``n_samples`` counts
    trajectories; with it every particle is a root and ``n_samples`` counts
    (trajectory, root) samples, i.e. ceil(n_samples / N) trajectories.
    """
    grid = np.asarray(time_grid, float)
    runs = _collect(cfg, grid, n_samples, root_average, workers, CENSUS_KMAX)
    sizes = np.stack([r.sizes for r in runs])  # (T, G, R)
    n_traj, g, roots = sizes.shape
    lam, lam_se = _rate(cfg, runs)
    rng = _boot_rng(cfg, 3)
    per_traj_mean = sizes.mean(axis=2)
    kmax = int(sizes.max()) if sizes.size else 0
    freq = np.stack([np.stack([np.bincount(sizes[j, a], minlength=kmax + 1) for a in range(g)])
                     for j in range(n_traj)]).astype(float)  # (T, G, K)
    mean_se = bootstrap_se(lambda idx: per_traj_mean[idx].mean(axis=0), n_traj, rng)
    prob_se = bootstrap_se(lambda idx: freq[idx].sum(axis=0) / (len(idx) * roots), n_traj, rng)
    hists = []
    for a, t in enumerate(grid):
        total = freq[:, a].sum(axis=0)
        counts = {k: int(c) for k, c in enumerate(total) if c}
        hists.append(ClusterHistogram(
            float(t), counts, n_traj * roots, float(per_traj_mean[:, a].mean()), float(mean_se[a]),
            {k: float(prob_se[a, k]) for k in counts}, float(t * lam) if math.isfinite(lam) else math.nan))
    t_hat = np.array([h.t_hat for h in hists])
    S = np.array([h.mean for h in hists])
    censuses = [_census(runs, a, float(t), CENSUS_KMAX) for a, t in enumerate(grid)]
    return ClusterExperiment(hists, lam, lam_se, root_average, n_traj, fit_bracket(t_hat, S),
                             per_traj_mean, censuses)


@dataclass
class TreeCensus:
    t: float
    n_samples: int
    counts: dict[int, dict[tuple[int, ...], int]]
    size_counts: dict[int, int]
    chi2: dict[int, tuple[float, float]]  # k -> (statistic, p-value) against equal weights

    def frequency(self, gamma: tuple[int, ...]) -> float:
        k = len(gamma)
        tot = self.size_counts.get(k, 0)
        return self.counts.get(k, {}).get(tuple(gamma), 0) / tot if tot else math.nan

    def rows(self) -> list[dict]:
        out = []
        for k in sorted(self.counts):
            for gamma in enumerate_trees(k):
                c = self.counts[k].get(gamma, 0)
                out.append({"k": k, "tree": "-".join(map(str, gamma)) or "()", "count": c,
                            "frequency": c / self.size_counts[k] if self.size_counts.get(k) else 0.0,
                            "probability": c / self.n_samples})
        return out


def _census(runs: list[TrajectorySizes], a: int, t: float, kmax: int) -> TreeCensus:
    counts: dict[int, dict[tuple[int, ...], int]] = {k: {} for k in range(kmax + 1)}
    size_counts = {k: 0 for k in range(kmax + 1)}
    total = 0
    for r in runs:
        for root in range(r.sizes.shape[1]):
            total += 1
            n = int(r.sizes[a, root])
            if n > kmax:
                continue
            gamma = tuple(int(x) for x in r.trees[a, root, :n])
            counts[n][gamma] = counts[n].get(gamma, 0) + 1
            size_counts[n] += 1
    chi2 = {}
    for k in range(2, kmax + 1):
        obs = np.array([counts[k].get(g, 0) for g in enumerate_trees(k)], float)
        if obs.sum() > 0:
            res = stats.chisquare(obs)
            chi2[k] = (float(res.statistic), float(res.pvalue))
    return TreeCensus(t, total, counts, size_counts, chi2)


def tree_structure_census(cfg: EnsembleConfig, t: float, n_samples: int, root_average: bool = False,
                          workers: int = 1, kmax: int = CENSUS_KMAX) -> TreeCensus:
    """Frequencies of every tree shape among clusters of size k <= kmax."""
    runs = _collect(cfg, [t], n_samples, root_average, workers, kmax)
    return _census(runs, 0, float(t), kmax)


# percolation -----------------------------------------------------------------


@dataclass
class PercolationResult:
    grid: np.ndarray
    fractions: np.ndarray  # (T, G) largest block / N
    max_backward: np.ndarray  # (T, G) largest backward cluster over roots (incl. root)
    crossing_times: np.ndarray  # (T,) first time the largest block exceeds the threshold
    threshold: float
    stderr: np.ndarray

    def rows(self) -> list[dict]:
        m = self.fractions.mean(axis=0)
        return [{"t": float(t), "fraction": float(f), "stderr": float(s)}
                for t, f, s in zip(self.grid, m, self.stderr)]


def _percolation_trajectory(cfg, index, grid, threshold, with_backward):
    log = _run(cfg, index, float(max(grid)))
    h = largest_block_history(log)
    frac = largest_block_at(log, grid, h) / cfg.n_particles
    hit = np.nonzero(h > threshold * cfg.n_particles)[0]
    tc = float(log.times[hit[0]]) if len(hit) else math.inf
    if with_backward:
        sizes, _, _ = all_root_sizes(log, grid, kmax=1)
        mb = sizes.max(axis=1) + 1
    else:
        mb = np.full(len(grid), -1)
    return frac, mb, tc


def percolation_experiment(cfg: EnsembleConfig, time_grid: Sequence[float], n_samples: int,
                           threshold: float = 0.5, with_backward: bool = True,
                           workers: int = 1) -> PercolationResult:
    grid = np.asarray(time_grid, float)
    jobs = [(cfg, j, grid, threshold, with_backward) for j in range(n_samples)]
    res = map_trajectories(_percolation_trajectory, jobs, workers)
    fr = np.stack([r[0] for r in res])
    se = bootstrap_se(lambda idx: fr[idx].mean(axis=0), n_samples, _boot_rng(cfg, 4))
    return PercolationResult(grid, fr, np.stack([r[1] for r in res]),
                             np.array([r[2] for r in res]), threshold, se)


# tables and manifests ----------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x)) if math.isfinite(x) else str(float(x))
    return "" if x is None else str(x)


def table_text(rows: list[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def write_table(path, rows: list[dict], columns: Sequence[str]) -> Path:
    path = Path(path)
    path.write_text(table_text(rows, columns))
    return path


def _parse(v: str):
    if v == "":
        return None
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


def read_table(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(f)]


HIST_COLUMNS = ("k", "count", "probability", "stderr")
SERIES_COLUMNS = ("t", "S", "stderr", "t_hat")
PERCOLATION_COLUMNS = ("t", "fraction", "stderr")


def read_histogram(path, t: float = math.nan) -> ClusterHistogram:
    rows = read_table(path)
    counts = {int(r["k"]): int(r["count"]) for r in rows}
    n = sum(counts.values())
    mean = sum(k * c for k, c in counts.items()) / n if n else math.nan
    return ClusterHistogram(t, counts, n, mean, math.nan, {int(r["k"]): float(r["stderr"]) for r in rows})


@dataclass
class RunManifest:
    command: str
    args: dict
    config: dict
    time_grid: list
    seeds: list
    tau: float | None = None
    rate: float | None = None
    extra: dict = field(default_factory=dict)
    version: str = __version__
    python: str = field(default_factory=platform.python_version)
    numpy: str = np.__version__
    started: float = field(default_factory=time.time)
    wall_seconds: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_json_default) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls.from_json(Path(path).read_text())


def _json_default(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x))


def trajectory_seeds(cfg: EnsembleConfig, n: int) -> list[int]:
    return [cfg.for_trajectory(j).seed for j in range(n)]
