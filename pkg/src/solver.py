"""
Sparse Levenberg-Marquardt with Schur elimination of landmark blocks.

Parameter ordering is poses and motion (per keyframe), then planes, then
landmarks. Landmarks are eliminated by the Schur complement; the reduced
system is factorised with SuperLU in symmetric mode and rejected as
indefinite when a pivot is not positive.

Phases timed by the solver (milliseconds in SolveReport):
    pre       problem preparation: batch builders (compression), binding, layout
    residual  cost evaluation
    jacobians linearisation and Jacobian assembly
    linear    normal equations, Schur complement and factorisation
    post      post-processing of the solution (plane-point triangulation)
"""

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from src.errors import InvalidProblem, LinearSolveFailure
from src.logging_config import get_logger

log = get_logger(__name__)

PHASES = ('residual', 'jacobians', 'linear', 'pre', 'post')


@dataclass
class SolverOptions:
    max_iterations: int = 100
    max_time_s: float = 2.0
    damping_init: float = 1e-4
    damping_increase: float = 2.0
    damping_decrease: float = 1.0 / 3.0
    damping_retries: int = 10
    tolerance_cost: float = 1e-8
    tolerance_gradient: float = 1e-10
    tolerance_parameter: float = 1e-10
    jacobi_scaling: bool = True

    @classmethod
    def from_settings(cls, settings, local=False):
        return cls(
            max_iterations=settings['LBA_MAX_ITERATIONS' if local else 'MAX_ITERATIONS'],
            max_time_s=settings['LBA_MAX_TIME_S' if local else 'MAX_TIME_S'],
            damping_init=settings['DAMPING_INIT'],
            damping_increase=settings['DAMPING_INCREASE'],
            damping_decrease=settings['DAMPING_DECREASE'],
            damping_retries=settings['DAMPING_RETRIES'],
            tolerance_cost=settings['TOLERANCE_COST'],
            tolerance_gradient=settings['TOLERANCE_GRADIENT'],
            tolerance_parameter=settings['TOLERANCE_PARAMETER'],
            jacobi_scaling=settings['JACOBI_SCALING'],
        )


@dataclass
class SolveReport:
    iterations: int = 0
    residual_ms: float = 0.0
    jacobians_ms: float = 0.0
    linear_ms: float = 0.0
    pre_ms: float = 0.0
    post_ms: float = 0.0
    total_ms: float = 0.0
    initial_cost: float = float('nan')
    final_cost: float = float('nan')
    termination: str = ''
    accepted_steps: int = 0
    cost_history: list = field(default_factory=list)
    state_dimension: int = 0
    factor_counts: dict = field(default_factory=dict)
    invalid_observations: int = 0

    @property
    def sum_ms(self):
        return self.residual_ms + self.jacobians_ms + self.linear_ms + self.pre_ms + self.post_ms

    def phases(self):
        return {f'{name}_ms': getattr(self, f'{name}_ms') for name in PHASES}


class PhaseClock:
    """Accumulates wall-clock milliseconds per named phase."""

    def __init__(self):
        self.elapsed = {name: 0.0 for name in PHASES}

    @contextmanager
    def phase(self, name):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.elapsed[name] += (time.perf_counter() - start) * 1000.0


@dataclass
class ParameterLayout:
    """Column offsets of every free state block; -1 marks a fixed block."""

    pose_col: np.ndarray
    motion_col: np.ndarray
    plane_col: np.ndarray
    landmark_col: np.ndarray
    n_reduced: int
    n_total: int

    @classmethod
    def build(cls, states, fixed_poses=(), fixed_motion=(), fixed_planes=(), fixed_landmarks=(),
              estimate_motion=True):
        fixed_poses = {int(k) for k in fixed_poses}
        fixed_motion = {int(k) for k in fixed_motion}
        fixed_planes = {int(k) for k in fixed_planes}
        fixed_landmarks = {int(k) for k in fixed_landmarks}

        cols = 0
        pose_col = np.full(states.num_keyframes, -1, dtype=np.int64)
        motion_col = np.full(states.num_keyframes, -1, dtype=np.int64)
        for i, k in enumerate(states.keyframe_ids):
            if int(k) not in fixed_poses:
                pose_col[i] = cols
                cols += 6
            if estimate_motion and int(k) not in fixed_motion:
                motion_col[i] = cols
                cols += 9
        plane_col = np.full(states.num_planes, -1, dtype=np.int64)
        for i, k in enumerate(states.plane_ids):
            if int(k) not in fixed_planes:
                plane_col[i] = cols
                cols += 3
        n_reduced = cols
        landmark_col = np.full(states.num_landmarks, -1, dtype=np.int64)
        for i, k in enumerate(states.landmark_ids):
            if int(k) not in fixed_landmarks:
                landmark_col[i] = cols
                cols += 3
        return cls(pose_col, motion_col, plane_col, landmark_col, n_reduced, cols)

    def columns(self, kind):
        return {
            'pose': self.pose_col,
            'motion': self.motion_col,
            'plane': self.plane_col,
            'landmark': self.landmark_col,
        }[kind]

    @property
    def n_landmark(self):
        return self.n_total - self.n_reduced

    def retract(self, states, delta):
        """Return a copy of ``states`` moved by the full step ``delta``."""
        out = states.copy()
        for kind, dim, apply in (
            ('pose', 6, out.retract_poses),
            ('motion', 9, out.retract_motion),
            ('plane', 3, out.retract_planes),
            ('landmark', 3, out.retract_landmarks),
        ):
            cols = self.columns(kind)
            rows = np.flatnonzero(cols >= 0)
            if len(rows):
                apply(rows, delta[cols[rows][:, None] + np.arange(dim)])
        return out


@dataclass
class _SlotPattern:
    mask: np.ndarray
    rows: np.ndarray
    cols: np.ndarray


class Problem:
    """
    State, factor batches and block structure of one least-squares problem.

    Batches can be given directly or through ``builders``: zero-argument
    callables that return a batch (or None) and run inside the solver's
    pre-processing phase.
    """

    def __init__(self, states, batches=(), builders=(), options=None, fixed_poses=(), fixed_motion=(),
                 fixed_planes=(), fixed_landmarks=(), estimate_motion=True, post_process=None,
                 name='problem', variant=None):
        self.states = states
        self.batches = list(batches)
        self.builders = list(builders)
        self.options = options or SolverOptions()
        self.fixed_poses = set(int(k) for k in fixed_poses)
        self.fixed_motion = set(int(k) for k in fixed_motion)
        self.fixed_planes = set(int(k) for k in fixed_planes)
        self.fixed_landmarks = set(int(k) for k in fixed_landmarks)
        self.estimate_motion = estimate_motion
        self.post_process = post_process
        self.name = name
        self.variant = variant
        self.layout = None
        self._patterns = None
        self._prepared = False

    def add_batch(self, batch):
        self.batches.append(batch)
        self._prepared = False

    def add_builder(self, builder):
        self.builders.append(builder)
        self._prepared = False

    @property
    def state_dimension(self):
        """Number of free scalar parameters."""
        if self.layout is not None:
            return self.layout.n_total
        return ParameterLayout.build(
            self.states, self.fixed_poses, self.fixed_motion, self.fixed_planes,
            self.fixed_landmarks, self.estimate_motion,
        ).n_total

    def factor_counts(self):
        return {batch.name: len(batch) for batch in self.batches}

    def prepare(self):
        """Run builders, bind batches to the state and lay out the Jacobian."""
        if self._prepared:
            return self
        for builder in self.builders:
            built = builder()
            if built is not None:
                self.batches.append(built)
        self.builders = []
        self.batches = [batch for batch in self.batches if len(batch)]
        if not self.batches:
            raise InvalidProblem(f"{self.name}: no factors")

        for batch in self.batches:
            batch.bind(self.states)

        self.layout = ParameterLayout.build(
            self.states, self.fixed_poses, self.fixed_motion, self.fixed_planes,
            self.fixed_landmarks, self.estimate_motion,
        )
        if self.layout.n_total == 0:
            raise InvalidProblem(f"{self.name}: every state block is fixed")

        self._patterns = []
        row = 0
        for batch in self.batches:
            B, m = len(batch), batch.residual_dim
            row_base = row + np.arange(B)[:, None, None] * m + np.arange(m)[None, :, None]
            patterns = []
            for slot, index in zip(batch.slots(), batch.indices()):
                dim = {'pose': 6, 'motion': 9, 'landmark': 3, 'plane': 3}[slot.kind]
                start = self.layout.columns(slot.kind)[index]
                cols = np.broadcast_to(start[:, None, None] + np.arange(dim)[None, None, :], (B, m, dim))
                rows = np.broadcast_to(row_base, (B, m, dim))
                free = np.broadcast_to((start >= 0)[:, None, None], (B, m, dim)).reshape(-1)
                patterns.append(_SlotPattern(free, rows.reshape(-1)[free], cols.reshape(-1)[free]))
            self._patterns.append(patterns)
            row += B * m
        self.num_residuals = row

        all_cols = np.concatenate([p.cols for patterns in self._patterns for p in patterns])
        all_rows = np.concatenate([p.rows for patterns in self._patterns for p in patterns])
        reduced = all_cols < self.layout.n_reduced
        self._select_reduced = reduced
        self._rows_c, self._cols_c = all_rows[reduced], all_cols[reduced]
        self._rows_l, self._cols_l = all_rows[~reduced], all_cols[~reduced] - self.layout.n_reduced
        self._prepared = True

        log.debug("problem_prepared", problem=self.name, variant=self.variant,
                  residuals=self.num_residuals, parameters=self.layout.n_total,
                  factors=self.factor_counts())
        return self

    def _robust(self, batch, r):
        """Per-factor weights and costs under the batch's Huber kernel."""
        s2 = np.einsum('bi,bi->b', r, r)
        if batch.huber_delta is None:
            return None, s2
        delta = batch.huber_delta
        s = np.sqrt(s2)
        outlier = s > delta
        rho = np.where(outlier, 2.0 * delta * s - delta ** 2, s2)
        weight = np.where(outlier, delta / np.where(outlier, s, 1.0), 1.0)
        return weight, rho

    def cost(self, states):
        """``0.5 * sum(rho(|r|^2))`` over every factor."""
        frames = states.frames()
        total = 0.0
        for batch in self.batches:
            r, _ = batch.evaluate(states, frames, jacobians=False)
            _, rho = self._robust(batch, r)
            total += float(rho.sum())
        return 0.5 * total

    def invalid_observations(self):
        return sum(batch.invalid_count for batch in self.batches)

    def linearize(self, states):
        """Robust-weighted residual vector and the reduced/landmark Jacobian blocks."""
        frames = states.frames()
        residuals, data = [], []
        for batch, patterns in zip(self.batches, self._patterns):
            r, jacobians = batch.evaluate(states, frames, jacobians=True)
            weight, _ = self._robust(batch, r)
            if weight is not None:
                root = np.sqrt(weight)
                r = r * root[:, None]
                jacobians = [J * root[:, None, None] for J in jacobians]
            residuals.append(r.reshape(-1))
            for J, pattern in zip(jacobians, patterns):
                data.append(J.reshape(-1)[pattern.mask])
        r = np.concatenate(residuals)
        values = np.concatenate(data)
        M = self.num_residuals
        Jc = sp.csr_matrix((values[self._select_reduced], (self._rows_c, self._cols_c)),
                           shape=(M, self.layout.n_reduced))
        Jl = sp.csr_matrix((values[~self._select_reduced], (self._rows_l, self._cols_l)),
                           shape=(M, self.layout.n_landmark))
        return r, Jc, Jl

    def finalize(self, states):
        if self.post_process is None:
            return states
        return self.post_process(states)


class _Indefinite(Exception):
    pass


def _factorize_spd(S):
    try:
        lu = splu(S.tocsc(), permc_spec='MMD_AT_PLUS_A', diag_pivot_thresh=0.0,
                  options={'SymmetricMode': True})
    except RuntimeError as exc:
        raise _Indefinite(str(exc))
    pivots = lu.U.diagonal()
    if not np.all(np.isfinite(pivots)) or np.any(pivots <= 0.0):
        raise _Indefinite("non-positive pivot")
    return lu


def _landmark_blocks(Hll, n_blocks):
    blocks = np.zeros((n_blocks, 3, 3))
    coo = Hll.tocoo()
    keep = coo.row // 3 == coo.col // 3
    blocks[coo.row[keep] // 3, coo.row[keep] % 3, coo.col[keep] % 3] = coo.data[keep]
    return blocks


class NormalEquations:
    """
    ``(J^T J + mu I) dx = -J^T r`` split into reduced (c) and landmark (l) blocks.

    The products are formed once per linearisation; ``solve`` can then be
    called for several damping values.
    """

    def __init__(self, Jc, Jl, r):
        self.gc = Jc.T @ r
        self.gl = Jl.T @ r
        self.A = (Jc.T @ Jc).tocsc()
        self.n_c = Jc.shape[1]
        self.n_blocks = Jl.shape[1] // 3
        if self.n_blocks:
            self.B = (Jc.T @ Jl).tocsr()
            self.blocks = _landmark_blocks((Jl.T @ Jl).tocsr(), self.n_blocks)
        else:
            self.B = None
            self.blocks = None

    def max_diagonal(self):
        diag = [self.A.diagonal()] if self.n_c else []
        if self.n_blocks:
            diag.append(np.einsum('bii->bi', self.blocks).reshape(-1))
        values = np.concatenate(diag) if diag else np.zeros(0)
        return float(values.max()) if values.size else 0.0

    def solve(self, mu):
        """Schur-reduced damped step ``(dx_c, dx_l)``; raises _Indefinite."""
        if self.n_blocks:
            damped = self.blocks + mu * np.eye(3)
            try:
                Cinv_blocks = np.linalg.inv(damped)
            except np.linalg.LinAlgError as exc:
                raise _Indefinite(str(exc))
            L = self.n_blocks
            Cinv = sp.bsr_matrix((Cinv_blocks, np.arange(L), np.arange(L + 1)), shape=(3 * L, 3 * L))
            BC = self.B @ Cinv
            S = self.A + mu * sp.identity(self.n_c, format='csc') - BC @ self.B.T
            rhs = -self.gc + BC @ self.gl
        else:
            S = self.A + mu * sp.identity(self.n_c, format='csc')
            rhs = -self.gc

        if self.n_c:
            S = (S + S.T) * 0.5
            dx_c = _factorize_spd(S).solve(rhs)
        else:
            dx_c = np.zeros(0)

        if self.n_blocks:
            dx_l = Cinv @ (-self.gl - self.B.T @ dx_c)
        else:
            dx_l = np.zeros(0)
        return dx_c, dx_l


def solve_dense(Jc, Jl, r, mu):
    """Damped Gauss-Newton step from the full dense normal equations."""
    J = sp.hstack([Jc, Jl]).toarray()
    H = J.T @ J + mu * np.eye(J.shape[1])
    dx = np.linalg.solve(H, -J.T @ r)
    return dx[:Jc.shape[1]], dx[Jc.shape[1]:]


def solve_lm(problem):
    """
    Minimise the problem's cost with Levenberg-Marquardt.

    Returns:
        (StateVector, SolveReport)

    Raises:
        InvalidProblem: nothing to optimise
        LinearSolveFailure: the damped reduced system stayed indefinite
    """
    options = problem.options
    clock = PhaseClock()
    report = SolveReport()
    start = time.perf_counter()

    with clock.phase('pre'):
        problem.prepare()
        layout = problem.layout
        states = problem.states.copy()
    report.state_dimension = layout.n_total
    report.factor_counts = problem.factor_counts()

    with clock.phase('residual'):
        cost = problem.cost(states)
    report.initial_cost = cost
    report.cost_history.append(cost)

    mu = None
    normal = None
    scale = None
    termination = None
    iterations = 0

    while termination is None:
        if iterations >= options.max_iterations:
            termination = 'max_iterations'
            break
        if options.max_time_s is not None and time.perf_counter() - start >= options.max_time_s:
            termination = 'max_time'
            break

        if normal is None:
            with clock.phase('jacobians'):
                r, Jc, Jl = problem.linearize(states)
                if options.jacobi_scaling:
                    col_c = np.sqrt(np.asarray(Jc.multiply(Jc).sum(axis=0)).ravel())
                    col_l = np.sqrt(np.asarray(Jl.multiply(Jl).sum(axis=0)).ravel())
                    scale = 1.0 / (1.0 + np.concatenate([col_c, col_l]))
                    Jc = Jc @ sp.diags(scale[:layout.n_reduced])
                    Jl = Jl @ sp.diags(scale[layout.n_reduced:])
                else:
                    scale = np.ones(layout.n_total)
            with clock.phase('linear'):
                normal = NormalEquations(Jc, Jl, r)
                # gradient of the unscaled problem
                gradient = float(np.abs(np.concatenate([normal.gc, normal.gl]) / scale).max())
            if gradient < options.tolerance_gradient:
                termination = 'gradient_tolerance'
                break
            if mu is None:
                mu = options.damping_init * max(normal.max_diagonal(), 1e-12)

        with clock.phase('linear'):
            step = None
            for _ in range(options.damping_retries + 1):
                try:
                    dx_c, dx_l = normal.solve(mu)
                    step = np.concatenate([dx_c, dx_l]) * scale
                    break
                except _Indefinite:
                    mu *= options.damping_increase
            if step is None:
                raise LinearSolveFailure(
                    f"{problem.name}: reduced system indefinite after {options.damping_retries} damping increases"
                )
            x_norm = float(np.sqrt(np.sum(states.translations ** 2) + np.sum(states.landmarks ** 2)
                                   + np.sum(states.planes ** 2)))
            step_norm = float(np.linalg.norm(step))
        iterations += 1

        if step_norm <= options.tolerance_parameter * (x_norm + options.tolerance_parameter):
            termination = 'parameter_tolerance'
            break

        with clock.phase('residual'):
            candidate = layout.retract(states, step)
            new_cost = problem.cost(candidate)

        accepted = new_cost < cost
        log.debug("lm_iteration", problem=problem.name, iteration=iterations, cost=cost,
                  candidate_cost=new_cost, mu=mu, accepted=accepted)
        if accepted:
            decrease = (cost - new_cost) / max(cost, np.finfo(float).tiny)
            states, cost = candidate, new_cost
            report.accepted_steps += 1
            report.cost_history.append(cost)
            mu *= options.damping_decrease
            normal = None
            if decrease < options.tolerance_cost:
                termination = 'cost_tolerance'
        else:
            mu *= options.damping_increase
            if mu > 1e32:
                termination = 'no_progress'

    report.invalid_observations = problem.invalid_observations()
    with clock.phase('post'):
        states = problem.finalize(states)

    report.iterations = iterations
    report.final_cost = cost
    report.termination = termination
    for name in PHASES:
        setattr(report, f'{name}_ms', clock.elapsed[name])
    report.total_ms = (time.perf_counter() - start) * 1000.0

    log.info("lm_finished", problem=problem.name, variant=problem.variant, iterations=iterations,
             initial_cost=report.initial_cost, final_cost=cost, termination=termination,
             sum_ms=round(report.sum_ms, 3), total_ms=round(report.total_ms, 3))
    return states, report
