"""Factor-graph state estimation with sparse Levenberg-Marquardt.

Each node contributes 15 tangent columns ([rot, trans, vel, accel bias,
gyro bias]); the shared gravity direction appends 3 more when a
gravity-measuring factor is active. States outside the free set stay fixed: factors
touching at least one free state are still evaluated, their fixed-state
blocks just drop out of the normal equations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import IndexOutOfRange, NotAnchored, SingularSystem
from .factors import STATE_DIM, StateNode, retract_state

DAMPING_INIT = 1e-6
DAMPING_MIN = 1e-9
DAMPING_MAX = 1e6
MAX_ITERATIONS = 50
REL_COST_TOL = 1e-9
STEP_TOL = 1e-10


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    damping: float
    step_norm: float
    accepted: bool


@dataclass
class OptimizeResult:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    records: list


def _effective_information(factor):
    # masked map factors weight the reduced residual
    return getattr(factor, "masked_information", factor.information)


def _check_finite(factor, residual, blocks, g_block):
    ok = np.all(np.isfinite(residual))
    ok = ok and all(np.all(np.isfinite(j)) for j in blocks.values())
    if g_block is not None:
        ok = ok and np.all(np.isfinite(g_block))
    if not ok:
        raise SingularSystem(
            f"factor '{factor.kind}' produced non-finite values",
            state_index=factor.indices[0])


class FactorGraph:
    def __init__(self, gravity=(0.0, 0.0, -1.0)):
        self.states: list[StateNode] = []
        self.factors: list = []
        self.gravity = np.asarray(gravity, dtype=float).copy()

    def add_state(self, state: StateNode) -> int:
        self.states.append(state)
        return len(self.states) - 1

    def add_factor(self, factor):
        for idx in factor.indices:
            if not 0 <= idx < len(self.states):
                raise IndexOutOfRange(
                    f"factor '{factor.kind}' references state {idx}, "
                    f"graph has {len(self.states)}")
        self.factors.append(factor)

    def cost(self, factors=None) -> float:
        total = 0.0
        for f in self.factors if factors is None else factors:
            r = f.residual(self.states, self.gravity)
            total += 0.5 * float(r @ (_effective_information(f) @ r))
        return total

    def optimize(self, free=None, max_iterations=MAX_ITERATIONS) -> OptimizeResult:
        if not self.states:
            raise NotAnchored("graph has no states")
        if free is None:
            free_set = set(range(len(self.states)))
        else:
            free_set = {int(i) for i in free}
            for i in free_set:
                if not 0 <= i < len(self.states):
                    raise IndexOutOfRange(f"free index {i} out of range")
        if not free_set:
            c = self.cost()
            return OptimizeResult(c, c, 0, True, [])
        if len(free_set) == len(self.states) \
                and not any(f.kind == "prior" for f in self.factors):
            raise NotAnchored("no prior factor and no fixed state")

        active = [f for f in self.factors
                  if any(i in free_set for i in f.indices)]
        free_order = sorted(free_set)
        col_of = {s: STATE_DIM * k for k, s in enumerate(free_order)}
        # Gravity becomes a variable only when a factor that measures it is
        # active. IMU factors couple to gravity but cannot anchor it: with
        # biases free the pair is a gauge and both would drift together.
        use_gravity = False
        if any(f.kind == "gravity" for f in active):
            for f in active:
                _, _, g_block = f.linearize(self.states, self.gravity)
                if g_block is not None:
                    use_gravity = True
                    break
        n_cols = STATE_DIM * len(free_order) + (3 if use_gravity else 0)
        grav_col = STATE_DIM * len(free_order)

        states = list(self.states)
        gravity = self.gravity.copy()

        def assemble():
            rows, cols, vals = [], [], []
            b = np.zeros(n_cols)
            cost = 0.0
            for f in active:
                r, blocks, g_block = f.linearize(states, gravity)
                _check_finite(f, r, blocks, g_block)
                info = _effective_information(f)
                wr = info @ r
                cost += 0.5 * float(r @ wr)
                parts = [(col_of[i], jac) for i, jac in blocks.items()
                         if i in free_set]
                if use_gravity and g_block is not None:
                    parts.append((grav_col, g_block))
                for ca, ja in parts:
                    jtw = ja.T @ info
                    b[ca:ca + ja.shape[1]] += jtw @ r
                    for cb, jb in parts:
                        block = jtw @ jb
                        d0, d1 = block.shape
                        rows.append(np.repeat(np.arange(ca, ca + d0), d1))
                        cols.append(np.tile(np.arange(cb, cb + d1), d0))
                        vals.append(block.ravel())
            if rows:
                h = sparse.coo_matrix(
                    (np.concatenate(vals),
                     (np.concatenate(rows), np.concatenate(cols))),
                    shape=(n_cols, n_cols)).tocsr()
            else:
                h = sparse.csr_matrix((n_cols, n_cols))
            return h, b, cost

        def total_cost(st, g):
            c = 0.0
            for f in active:
                r = f.residual(st, g)
                c += 0.5 * float(r @ (_effective_information(f) @ r))
            return c

        def apply_step(delta):
            new_states = list(states)
            for s in free_order:
                c0 = col_of[s]
                new_states[s] = retract_state(states[s],
                                              delta[c0:c0 + STATE_DIM])
            new_gravity = gravity
            if use_gravity:
                new_gravity = gravity + delta[grav_col:grav_col + 3]
            return new_states, new_gravity

        h_mat, b_vec, cost = assemble()
        initial_cost = cost
        eye = sparse.identity(n_cols, format="csr")
        damping = DAMPING_INIT
        records = []
        converged = False
        iterations = 0

        for it in range(max_iterations):
            iterations = it + 1
            accepted = False
            solver_produced_step = False
            step_norm = 0.0
            rel_drop = 0.0
            while damping <= DAMPING_MAX:
                try:
                    lu = splu((h_mat + damping * eye).tocsc())
                    delta = lu.solve(-b_vec)
                except RuntimeError:
                    delta = None
                if delta is None or not np.all(np.isfinite(delta)):
                    damping *= 10.0
                    continue
                solver_produced_step = True
                trial_states, trial_gravity = apply_step(delta)
                trial_cost = total_cost(trial_states, trial_gravity)
                if np.isfinite(trial_cost) and trial_cost < cost:
                    states, gravity = trial_states, trial_gravity
                    step_norm = float(np.abs(delta).max())
                    rel_drop = (cost - trial_cost) / max(cost, 1e-300)
                    cost = trial_cost
                    damping = max(damping * 0.5, DAMPING_MIN)
                    accepted = True
                    break
                damping *= 10.0
            records.append(IterationRecord(it, cost, damping, step_norm,
                                           accepted))
            if not accepted:
                if not solver_produced_step:
                    diag = h_mat.diagonal()
                    worst = int(np.argmin(diag))
                    idx = free_order[worst // STATE_DIM] \
                        if worst < STATE_DIM * len(free_order) else None
                    raise SingularSystem("linear solve failed at all damping "
                                         "levels", state_index=idx)
                converged = True  # no improving step at any damping
                break
            if step_norm < STEP_TOL or rel_drop < REL_COST_TOL:
                converged = True
                break
            h_mat, b_vec, cost = assemble()

        self.states = states
        self.gravity = gravity
        return OptimizeResult(initial_cost, cost, iterations, converged,
                              records)

    def solve_incremental(self, state: StateNode, factors, window: int = 0,
                          max_iterations=MAX_ITERATIONS) -> OptimizeResult:
        """Append a state and its factors, then optimize a trailing window.

        window is the number of most recent states left free; 0 means a
        full batch solve.
        """
        self.add_state(state)
        for f in factors:
            self.add_factor(f)
        free = None
        if window and window > 0:
            free = range(max(0, len(self.states) - window), len(self.states))
        return self.optimize(free=free, max_iterations=max_iterations)


def solve_incremental(graph: FactorGraph, state: StateNode, factors,
                      window: int = 0, **kwargs) -> OptimizeResult:
    return graph.solve_incremental(state, factors, window, **kwargs)
