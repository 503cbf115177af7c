"""Group-sparse pursuit with projection-gap thresholding.

The solver fits Y ~ U A V^T under a two-level budget on the description
cost of A (see `lattice.sparsity_cost`).  Each iteration greedily adds
the lattice group whose restricted least-squares fit buys the most loss
reduction per unit of added cost, runs marginal regression over all
selected sites, and thresholds the marginal coefficients at a value
chosen from the projection gap curve:

    Del(j) = || (H_{j+1} - H_j) y ||^2,

where H_j projects onto the span of the design columns of the j largest
coefficients.  The cut j* is the first j where Del(j) drops below
sigma_hat * delta_k with delta_k = q * sqrt(2 * ln(nnz)), i.e. where the
next column stops explaining more energy than noise would.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .imaging import AtomMap, DesignVectors, Image
from .lattice import GroupCatalog, sparsity_cost, stopping_constant

logger = logging.getLogger(__name__)

RIDGE_RETRY = 1e-10
# Del values at or below this fraction of ||Y||_F^2 count as exactly zero,
# so the noiseless limit (sigma_hat = 0) still terminates the scan.
ZERO_DEL_REL = 1e-12

TERMINATION_BUDGET = "cost_budget"
TERMINATION_MIN_GAIN = "min_gain"
TERMINATION_MAX_ITERS = "max_iters"


@dataclass(frozen=True)
class SolverConfig:
    """Knobs for the pursuit loop.

    ``c`` is the description-cost budget; None derives the single-lattice
    budget from the catalog at run time.  ``max_iters`` of None derives
    the number of whole average-size groups the budget pays for (at least
    one); it is clamped to the group count either way.  ``ridge`` is added
    to the Gram diagonal of every restricted solve; at 0 a singular
    system is retried once with 1e-10.  ``min_gain`` stops the loop when
    no remaining group improves the loss-per-cost ratio beyond it.
    """

    c: float | None = None
    q_mult: float = 1.0
    max_iters: int | None = None
    ridge: float = 0.0
    normalize_marginal: bool = True
    min_gain: float = 0.0

    def __post_init__(self):
        if self.c is not None and not (math.isfinite(self.c) and self.c > 0):
            raise ValueError(f"c must be positive, got {self.c}")
        if not (math.isfinite(self.q_mult) and self.q_mult >= 1):
            raise ValueError(f"q_mult must be >= 1, got {self.q_mult}")
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not (math.isfinite(self.ridge) and self.ridge >= 0):
            raise ValueError(f"ridge must be >= 0, got {self.ridge}")
        if not (math.isfinite(self.min_gain) and self.min_gain >= 0):
            raise ValueError(f"min_gain must be >= 0, got {self.min_gain}")


@dataclass
class SolverState:
    """Mutable loop state: selected support and the three live estimates."""

    support: np.ndarray  # (k, 2) int64, 1-based sites, lex-sorted
    selected_groups: list
    atoms_ls: AtomMap  # restricted least squares on `support`
    atoms_marginal: AtomMap
    atoms_kept: AtomMap  # thresholded marginal estimate
    iteration: int
    loss_ls: float


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    group: int
    offset: tuple[int, int]
    gain: float
    loss_before: float
    loss_after: float
    cost_before: float
    cost_after: float
    nnz_marginal: int
    sigma_hat: float
    delta_k: float
    j_star: int
    rho: float
    nnz_kept: int
    threshold_fallback: bool
    del_curve: tuple = field(repr=False, default=())


@dataclass(frozen=True)
class SolverTrace:
    records: tuple
    termination: str

    @property
    def iterations(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class DetectionResult:
    atoms: AtomMap
    basis: object
    tau: float
    sigma_hat: float
    trace: SolverTrace


def _empty_support() -> np.ndarray:
    return np.zeros((0, 2), dtype=np.int64)


def _sorted_support(sites: np.ndarray) -> np.ndarray:
    if sites.shape[0] == 0:
        return _empty_support()
    order = np.lexsort((sites[:, 1], sites[:, 0]))
    return sites[order]


class _Workspace:
    """Per-image caches shared by the restricted solves of one run."""

    def __init__(self, image: Image, design: DesignVectors):
        self.Y = image.pixels
        self.U = design.U
        self.V = design.V
        self.gram_u = design.U.T @ design.U
        self.gram_v = design.V.T @ design.V
        self.corr = design.U.T @ self.Y @ design.V  # (m,n) -> u_m^T Y v_n
        self.y_norm2 = float(np.sum(self.Y * self.Y))
        self.design = design

    def restricted_ls(self, support: np.ndarray, ridge: float) -> tuple[AtomMap, float]:
        """Least squares on a fixed support; returns the map and its loss."""
        rows, cols = self.Y.shape
        if support.shape[0] == 0:
            return AtomMap.empty(rows, cols), self.y_norm2
        ms = support[:, 0] - 1
        ns = support[:, 1] - 1
        gram = self.gram_u[np.ix_(ms, ms)] * self.gram_v[np.ix_(ns, ns)]
        rhs = self.corr[ms, ns]
        coef = _solve_spd(gram, rhs, ridge)
        fitted = (self.U[:, ms] * coef) @ self.V[:, ns].T
        resid = self.Y - fitted
        amap = AtomMap(
            rows,
            cols,
            {
                (int(m) + 1, int(n) + 1): float(a)
                for m, n, a in zip(ms, ns, coef)
                if a != 0.0
            },
        )
        return amap, float(np.sum(resid * resid))


def _solve_spd(gram: np.ndarray, rhs: np.ndarray, ridge: float) -> np.ndarray:
    def attempt(jitter: float) -> np.ndarray:
        g = gram
        if jitter > 0:
            g = gram + jitter * np.eye(gram.shape[0])
        cho = linalg.cho_factor(g, lower=True, check_finite=False)
        return linalg.cho_solve(cho, rhs, check_finite=False)

    try:
        return attempt(ridge)
    except linalg.LinAlgError:
        if ridge == 0.0:
            logger.debug("singular Gram at ridge=0; retrying with %.0e", RIDGE_RETRY)
            try:
                return attempt(RIDGE_RETRY)
            except linalg.LinAlgError as exc:
                raise ValueError("restricted least squares is singular even with jitter") from exc
        raise ValueError(f"restricted least squares is singular at ridge={ridge}")


def restricted_least_squares(
    image: Image, design: DesignVectors, support, ridge: float = 0.0
) -> AtomMap:
    """Least-squares amplitudes with the support constrained to `support`.

    The normal equations use the Kronecker structure of the design: the
    Gram entry for sites (m,n), (m',n') is (u_m^T u_m')(v_n^T v_n'), so
    only per-axis Gram matrices are ever formed.
    """
    ws = _Workspace(image, design)
    sites = _sorted_support(np.asarray(list(support), dtype=np.int64).reshape(-1, 2))
    _validate_sites(sites, design)
    amap, _ = ws.restricted_ls(sites, ridge)
    return amap


def _validate_sites(sites: np.ndarray, design: DesignVectors) -> None:
    if sites.shape[0] == 0:
        return
    if sites[:, 0].min() < 1 or sites[:, 0].max() > design.rows:
        raise ValueError("support row index outside grid")
    if sites[:, 1].min() < 1 or sites[:, 1].max() > design.cols:
        raise ValueError("support column index outside grid")
    uniq = np.unique(sites, axis=0)
    if uniq.shape[0] != sites.shape[0]:
        raise ValueError("support contains duplicate sites")


def marginal_coeffs(
    image: Image, design: DesignVectors, support, normalize: bool = True
) -> AtomMap:
    """Per-site marginal regression coefficients u_m^T Y v_n on `support`.

    With ``normalize`` each coefficient is divided by ||u_m||^2 ||v_n||^2,
    putting it on the amplitude scale of the rendered model; the raw inner
    product is kept otherwise.  Sites whose coefficient is exactly zero
    are dropped from the returned map.
    """
    sites = _sorted_support(np.asarray(list(support), dtype=np.int64).reshape(-1, 2))
    _validate_sites(sites, design)
    rows, cols = design.rows, design.cols
    if sites.shape[0] == 0:
        return AtomMap.empty(rows, cols)
    corr = design.U.T @ image.pixels @ design.V
    ms = sites[:, 0] - 1
    ns = sites[:, 1] - 1
    coef = corr[ms, ns]
    if normalize:
        coef = coef / (design.u_norms2[ms] * design.v_norms2[ns])
    entries = {
        (int(m) + 1, int(n) + 1): float(a) for m, n, a in zip(ms, ns, coef) if a != 0.0
    }
    return AtomMap(rows, cols, entries)


def estimate_sigma(image: Image, design: DesignVectors, atoms: AtomMap) -> float:
    """Residual noise scale sqrt(||Y - U A V^T||_F^2 / (M*N - 1))."""
    rows, cols = image.rows, image.cols
    if rows * cols < 2:
        raise ValueError("image too small for a noise estimate")
    fitted = design.U @ atoms.to_dense() @ design.V.T
    resid = image.pixels - fitted
    return math.sqrt(float(np.sum(resid * resid)) / (rows * cols - 1))


def _ordered_sites(atoms: AtomMap) -> list[tuple[tuple[int, int], float]]:
    # Descending coefficient; lexicographic site order breaks ties so the
    # curve does not depend on dict insertion order.
    return sorted(atoms.entries.items(), key=lambda item: (-item[1], item[0]))


def _design_columns(design: DesignVectors, sites: list) -> np.ndarray:
    cols = np.empty((design.rows * design.cols, len(sites)))
    for j, (m, n) in enumerate(sites):
        cols[:, j] = np.outer(design.U[:, m - 1], design.V[:, n - 1]).ravel(order="F")
    return cols


def del_curve(image: Image, design: DesignVectors, atoms: AtomMap) -> list[tuple[int, float]]:
    """Projection gaps Del(j) = ||(H_{j+1} - H_j) y||^2 for j = 1..nnz-1.

    Columns enter in descending coefficient order (site-lexicographic on
    ties).  H_j is the projector onto the first j design columns; the gap
    equals the squared projection of y on the next orthonormalized
    column, obtained from one incremental QR factorization.
    """
    if atoms.nnz < 2:
        raise ValueError(f"del_curve needs >= 2 nonzero coefficients, got {atoms.nnz}")
    ordered = _ordered_sites(atoms)
    sites = [site for site, _ in ordered]
    X = _design_columns(design, sites)
    y = image.pixels.ravel(order="F")
    Q, _ = np.linalg.qr(X, mode="reduced")
    proj = Q.T @ y
    return [(j, float(proj[j] * proj[j])) for j in range(1, len(sites))]


def select_threshold(
    atoms: AtomMap,
    image: Image,
    design: DesignVectors,
    q_mult: float,
    sigma: float,
) -> tuple[int, float]:
    """Pick the cut (j*, rho) from the projection gap curve.

    j* is the smallest j with Del(j) below sigma * q_mult * sqrt(2 ln nnz)
    (gaps at or below a 1e-12 * ||Y||_F^2 floor count as zero, covering the
    sigma = 0 limit); when no gap qualifies, j* falls back to nnz.  rho is
    the j*-th largest coefficient, so keeping coefficients >= rho keeps
    j* sites apart from exact ties.
    """
    if atoms.nnz < 2:
        raise ValueError("select_threshold needs >= 2 nonzero coefficients")
    if not (math.isfinite(sigma) and sigma >= 0):
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    gaps = del_curve(image, design, atoms)
    y_norm2 = float(np.sum(image.pixels * image.pixels))
    return _cut_from_gaps(atoms, gaps, q_mult, sigma, y_norm2)


def _cut_from_gaps(
    atoms: AtomMap,
    gaps: list,
    q_mult: float,
    sigma: float,
    y_norm2: float,
) -> tuple[int, float]:
    nnz = atoms.nnz
    delta_k = q_mult * math.sqrt(2.0 * math.log(nnz))
    zero_floor = ZERO_DEL_REL * y_norm2
    j_star = nnz
    for j, gap in gaps:
        if gap < sigma * delta_k or gap <= zero_floor:
            j_star = j
            break
    values = sorted((a for a in atoms.entries.values()), reverse=True)
    rho = values[j_star - 1]
    return j_star, rho


def _threshold_map(atoms: AtomMap, rho: float) -> AtomMap:
    kept = {site: a for site, a in atoms.entries.items() if a >= rho}
    return AtomMap(atoms.rows, atoms.cols, kept)


def gain_ratio(
    group_id: int,
    state: SolverState,
    image: Image,
    design: DesignVectors,
    catalog: GroupCatalog,
    ridge: float = 0.0,
) -> float:
    """Loss reduction per unit of added description cost for one group.

    The numerator compares restricted least squares on the current
    support against the support joined with the candidate group.  The
    denominator prices the group term plus one site term per newly added
    site, counting every supported site as occupied.
    """
    ws = _Workspace(image, design)
    loss_before = ws.restricted_ls(state.support, ridge)[1]
    return _gain_ratio_cached(group_id, state, ws, catalog, ridge, loss_before)[0]


def _gain_ratio_cached(
    group_id: int,
    state: SolverState,
    ws: _Workspace,
    catalog: GroupCatalog,
    ridge: float,
    loss_before: float,
) -> tuple[float, AtomMap, float, np.ndarray]:
    group = catalog.groups[group_id]
    joined = _sorted_support(np.unique(np.vstack([state.support, group.members]), axis=0))
    n_new = joined.shape[0] - state.support.shape[0]
    atoms_after, loss_after = ws.restricted_ls(joined, ridge)
    group_bits = math.log2(2 * catalog.n_groups)
    site_bits = math.log2(2 * catalog.max_group_size)
    cost_delta = group_bits + site_bits * n_new
    return (loss_before - loss_after) / cost_delta, atoms_after, loss_after, joined


def select_group(
    state: SolverState,
    image: Image,
    design: DesignVectors,
    catalog: GroupCatalog,
    ridge: float = 0.0,
) -> tuple[int, float]:
    """Best unselected group and its gain ratio (smallest id on ties)."""
    ws = _Workspace(image, design)
    loss_before = ws.restricted_ls(state.support, ridge)[1]
    best: tuple[int, float] | None = None
    for g in range(catalog.n_groups):
        if g in state.selected_groups:
            continue
        ratio = _gain_ratio_cached(g, state, ws, catalog, ridge, loss_before)[0]
        if best is None or ratio > best[1]:
            best = (g, ratio)
    if best is None:
        raise ValueError("all groups already selected")
    return best


def _derived_max_iters(c: float, catalog: GroupCatalog) -> int:
    # Whole average-size groups the cost budget pays for; the budget rule in
    # `stopping_constant` prices exactly one, so the default single-lattice
    # run caps at one pursuit round unless the caller raises c.
    return max(1, int(c // stopping_constant(catalog)))


def gomp_thresholding(
    image: Image,
    design: DesignVectors,
    catalog: GroupCatalog,
    config: SolverConfig = SolverConfig(),
) -> DetectionResult:
    """Run the full pursuit loop and return the thresholded detection.

    Loop: while the kept estimate's description cost is under budget and
    iterations remain, pick the group with the best gain ratio (stop early
    if that ratio is <= min_gain), join it into the support, refresh the
    restricted least-squares and marginal estimates, and threshold the
    marginal coefficients at the projection-gap cut.
    """
    if (image.rows, image.cols) != (design.rows, design.cols):
        raise ValueError("image dims do not match design")
    if (catalog.rows, catalog.cols) != (image.rows, image.cols):
        raise ValueError("catalog dims do not match image")

    c = config.c if config.c is not None else stopping_constant(catalog)
    max_iters = config.max_iters if config.max_iters is not None else _derived_max_iters(c, catalog)
    max_iters = min(max_iters, catalog.n_groups)

    ws = _Workspace(image, design)
    rows, cols = image.rows, image.cols
    state = SolverState(
        support=_empty_support(),
        selected_groups=[],
        atoms_ls=AtomMap.empty(rows, cols),
        atoms_marginal=AtomMap.empty(rows, cols),
        atoms_kept=AtomMap.empty(rows, cols),
        iteration=0,
        loss_ls=ws.y_norm2,
    )
    records = []
    sigma = 0.0
    termination = TERMINATION_BUDGET

    while sparsity_cost(state.atoms_kept, catalog) < c:
        if state.iteration >= max_iters:
            termination = TERMINATION_MAX_ITERS
            break

        best = None
        for g in range(catalog.n_groups):
            if g in state.selected_groups:
                continue
            ratio, atoms_after, loss_after, joined = _gain_ratio_cached(
                g, state, ws, catalog, config.ridge, state.loss_ls
            )
            if best is None or ratio > best[0]:
                best = (ratio, g, atoms_after, loss_after, joined)
        if best is None:
            termination = TERMINATION_MAX_ITERS
            break
        ratio, g, atoms_after, loss_after, joined = best
        if ratio <= config.min_gain:
            termination = TERMINATION_MIN_GAIN
            break

        cost_before = sparsity_cost(state.atoms_kept, catalog)
        loss_before = state.loss_ls
        state.iteration += 1
        state.selected_groups.append(g)
        state.support = joined
        state.atoms_ls = atoms_after
        state.loss_ls = loss_after
        state.atoms_marginal = marginal_coeffs(
            image, design, state.support, normalize=config.normalize_marginal
        )
        sigma = estimate_sigma(image, design, state.atoms_marginal)

        nnz = state.atoms_marginal.nnz
        if nnz >= 2:
            gaps = del_curve(image, design, state.atoms_marginal)
            j_star, rho = _cut_from_gaps(
                state.atoms_marginal, gaps, config.q_mult, sigma, ws.y_norm2
            )
            fallback = j_star == nnz
            state.atoms_kept = _threshold_map(state.atoms_marginal, rho)
            curve = tuple(gap for _, gap in gaps)
        else:
            j_star, rho, fallback = nnz, 0.0, False
            state.atoms_kept = state.atoms_marginal
            curve = ()
        if fallback:
            logger.warning(
                "iteration %d: no projection gap under threshold; keeping all %d sites",
                state.iteration,
                nnz,
            )

        records.append(
            IterationRecord(
                iteration=state.iteration,
                group=g,
                offset=catalog.groups[g].offset,
                gain=ratio,
                loss_before=loss_before,
                loss_after=loss_after,
                cost_before=cost_before,
                cost_after=sparsity_cost(state.atoms_kept, catalog),
                nnz_marginal=nnz,
                sigma_hat=sigma,
                delta_k=config.q_mult * math.sqrt(2.0 * math.log(nnz)) if nnz >= 1 else 0.0,
                j_star=j_star,
                rho=rho,
                nnz_kept=state.atoms_kept.nnz,
                threshold_fallback=fallback,
                del_curve=curve,
            )
        )
        logger.debug(
            "iteration %d: group %d gain %.4g loss %.6g -> %.6g kept %d/%d",
            state.iteration,
            g,
            ratio,
            loss_before,
            loss_after,
            state.atoms_kept.nnz,
            nnz,
        )

    trace = SolverTrace(records=tuple(records), termination=termination)
    return DetectionResult(
        atoms=state.atoms_kept,
        basis=catalog.basis,
        tau=design.tau,
        sigma_hat=sigma,
        trace=trace,
    )
