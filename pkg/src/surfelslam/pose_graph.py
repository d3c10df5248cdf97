"""Keyframe Sim(3) pose graph and its damped Gauss-Newton solver.

Edges store the expected relative transform ``(T_from^W)^-1 * T_to^W``; the
residual of an edge is the tangent-space error
``log(M^-1 * (T_from^W)^-1 * T_to^W)`` and the optimizer minimizes
``sum omega * ||r||^2`` over all non-fixed nodes with the retraction
``T <- T * exp(delta)``.  Jacobians come from central finite differences on
the 7-dim tangent perturbation, evaluated batched over all edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from surfelslam.geometry import (
    Sim3Transform,
    pk_compose,
    pk_exp,
    pk_inverse,
    pk_log,
    transform_from_text,
    transform_to_text,
)
from surfelslam.loop_closure import Sim3Constraint


class GraphStructureError(ValueError):
    """Disconnected or gauge-free graph: optimization is under-constrained."""


@dataclass
class PoseGraph:
    nodes: dict = field(default_factory=dict)  # node_id -> Sim3Transform
    edges: list = field(default_factory=list)  # [Sim3Constraint]
    fixed_nodes: set = field(default_factory=set)

    def add_node(self, node_id: int, pose: Sim3Transform, fixed: bool = False):
        self.nodes[node_id] = pose
        if fixed:
            self.fixed_nodes.add(node_id)

    def add_edge(self, edge: Sim3Constraint):
        if edge.from_node not in self.nodes or edge.to_node not in self.nodes:
            raise GraphStructureError(
                f"edge {edge.from_node}->{edge.to_node} references unknown nodes"
            )
        self.edges.append(edge)

    def connected_components(self):
        parent = {n: n for n in self.nodes}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for e in self.edges:
            a, b = find(e.from_node), find(e.to_node)
            if a != b:
                parent[a] = b
        groups = {}
        for n in self.nodes:
            groups.setdefault(find(n), []).append(n)
        return list(groups.values())


@dataclass
class SolveReport:
    initial_chi2: float
    final_chi2: float
    iterations: int
    converged: bool
    chi2_trace: list = field(default_factory=list)


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    lambda0: float = 1e-4
    lambda_factor: float = 10.0
    chi2_rel_tol: float = 1e-12
    gradient_tol: float = 1e-10
    fd_step: float = 1e-6
    max_lambda: float = 1e12
    huber_delta: float | None = None  # robust kernel, off by default
    dense_node_limit: int = 200


def residual(measurement: Sim3Transform, pose_from: Sim3Transform,
             pose_to: Sim3Transform) -> np.ndarray:
    """Tangent-space edge error log(M^-1 * T_from^-1 * T_to); zero iff satisfied."""
    return pk_log(
        pk_compose(
            pk_compose(pk_inverse(measurement.packed()), pk_inverse(pose_from.packed())),
            pose_to.packed(),
        ),
        strict=True,
    )


def edge_residual(edge: Sim3Constraint, graph: PoseGraph) -> np.ndarray:
    return residual(edge.measurement, graph.nodes[edge.from_node], graph.nodes[edge.to_node])


def sequential_edges(trajectory, omega: float = 1.0, inter_omega: float = 1.0):
    """Relative-pose edges between consecutive keyframes of a chained trajectory.

    Pairs inside one submap are tagged ``sequential``; the pair that crosses a
    submap boundary carries the scale handover and is tagged ``inter_submap``.
    Measurements are taken from the chained poses, so the unoptimized
    trajectory satisfies them exactly.
    """
    frames = trajectory.frame_ids
    if len(frames) < 2:
        raise ValueError("need at least 2 keyframes")
    edges = []
    for a, b in zip(frames[:-1], frames[1:]):
        meas = trajectory.poses[a].inverse().compose(trajectory.poses[b])
        crossing = trajectory.submap_of[a] != trajectory.submap_of[b]
        edges.append(
            Sim3Constraint(
                a, b, meas,
                inter_omega if crossing else omega,
                "inter_submap" if crossing else "sequential",
            )
        )
    return edges


def build_graph(trajectory, loop_edges=(), omega_sequential=1.0, omega_inter=1.0):
    graph = PoseGraph()
    for f in trajectory.frame_ids:
        graph.add_node(f, trajectory.poses[f], fixed=(f == trajectory.frame_ids[0]))
    for e in sequential_edges(trajectory, omega_sequential, omega_inter):
        graph.add_edge(e)
    for e in loop_edges:
        graph.add_edge(e)
    return graph


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


def _batched_residuals(meas_inv, from_packed, to_packed):
    return pk_log(pk_compose(pk_compose(meas_inv, pk_inverse(from_packed)), to_packed))


def _chi2_terms(r, omegas, huber_delta):
    sq = np.sum(r * r, axis=-1)
    if huber_delta is None:
        return omegas * sq, omegas
    norm = np.sqrt(np.maximum(sq, 1e-300))
    w = np.where(norm <= huber_delta, 1.0, huber_delta / norm)
    rho = np.where(
        norm <= huber_delta, sq, huber_delta * (2.0 * norm - huber_delta)
    )
    return omegas * rho, omegas * w


def optimize(graph: PoseGraph, config: SolverConfig = SolverConfig()) -> SolveReport:
    """Levenberg-damped Gauss-Newton on the Sim(3) manifold; fixed nodes pinned."""
    if not graph.fixed_nodes:
        raise GraphStructureError("at least one node must be fixed (gauge)")
    for comp in graph.connected_components():
        if not any(n in graph.fixed_nodes for n in comp):
            raise GraphStructureError(
                f"connected component without a fixed node: {sorted(comp)[:10]}"
            )

    node_ids = sorted(graph.nodes)
    free = [n for n in node_ids if n not in graph.fixed_nodes]
    free_index = {n: i for i, n in enumerate(free)}
    n_free = len(free)
    poses = {n: graph.nodes[n].packed() for n in node_ids}

    e_from = np.array([e.from_node for e in graph.edges])
    e_to = np.array([e.to_node for e in graph.edges])
    omegas = np.array([e.omega for e in graph.edges])
    meas_inv = np.stack([pk_inverse(e.measurement.packed()) for e in graph.edges])

    def stack_poses(pose_map):
        fp = np.stack([pose_map[n] for n in e_from])
        tp = np.stack([pose_map[n] for n in e_to])
        return fp, tp

    def chi2_of(pose_map):
        fp, tp = stack_poses(pose_map)
        r = _batched_residuals(meas_inv, fp, tp)
        terms, _ = _chi2_terms(r, omegas, config.huber_delta)
        return float(np.sum(terms)), r

    chi2, r = chi2_of(poses)
    report = SolveReport(chi2, chi2, 0, False, [chi2])
    if chi2 == 0.0 or n_free == 0:
        report.converged = True
        for n in node_ids:
            graph.nodes[n] = Sim3Transform.from_packed(poses[n])
        return report

    h = config.fd_step
    pert = np.stack([pk_exp(h * np.eye(7)[d]) for d in range(7)])
    pert_neg = np.stack([pk_exp(-h * np.eye(7)[d]) for d in range(7)])
    lam = config.lambda0
    converged = False
    iterations = 0

    for _ in range(config.max_iterations):
        fp, tp = stack_poses(poses)
        _, robust_w = _chi2_terms(r, omegas, config.huber_delta)

        # central-difference Jacobians, batched over edges: J_from, J_to are
        # (E, 7 residual dims, 7 tangent dims)
        fp_plus = pk_compose(fp[None, :, :], pert[:, None, :])
        fp_minus = pk_compose(fp[None, :, :], pert_neg[:, None, :])
        r_fp = _batched_residuals(meas_inv[None], fp_plus, tp[None])
        r_fm = _batched_residuals(meas_inv[None], fp_minus, tp[None])
        j_from = np.transpose((r_fp - r_fm) / (2 * h), (1, 2, 0))
        tp_plus = pk_compose(tp[None, :, :], pert[:, None, :])
        tp_minus = pk_compose(tp[None, :, :], pert_neg[:, None, :])
        r_tp = _batched_residuals(meas_inv[None], fp[None], tp_plus)
        r_tm = _batched_residuals(meas_inv[None], fp[None], tp_minus)
        j_to = np.transpose((r_tp - r_tm) / (2 * h), (1, 2, 0))

        dim = 7 * n_free
        hess = np.zeros((dim, dim))
        grad = np.zeros(dim)
        for k, edge in enumerate(graph.edges):
            w = robust_w[k]
            fi = free_index.get(edge.from_node)
            ti = free_index.get(edge.to_node)
            if fi is not None:
                sl = slice(7 * fi, 7 * fi + 7)
                hess[sl, sl] += w * j_from[k].T @ j_from[k]
                grad[sl] += w * j_from[k].T @ r[k]
            if ti is not None:
                sl = slice(7 * ti, 7 * ti + 7)
                hess[sl, sl] += w * j_to[k].T @ j_to[k]
                grad[sl] += w * j_to[k].T @ r[k]
            if fi is not None and ti is not None:
                slf = slice(7 * fi, 7 * fi + 7)
                slt = slice(7 * ti, 7 * ti + 7)
                block = w * j_from[k].T @ j_to[k]
                hess[slf, slt] += block
                hess[slt, slf] += block.T

        if float(np.max(np.abs(grad))) < config.gradient_tol:
            converged = True
            break

        accepted = False
        while lam <= config.max_lambda:
            try:
                delta = _solve_normal_equations(hess, lam, -grad, n_free, config)
            except np.linalg.LinAlgError as err:
                raise GraphStructureError(f"singular normal equations: {err}") from err
            candidate = dict(poses)
            for n, i in free_index.items():
                candidate[n] = pk_compose(poses[n], pk_exp(delta[7 * i : 7 * i + 7]))
            new_chi2, new_r = chi2_of(candidate)
            if new_chi2 < chi2:
                rel_drop = (chi2 - new_chi2) / max(chi2, 1e-300)
                poses, chi2, r = candidate, new_chi2, new_r
                report.chi2_trace.append(chi2)
                lam = max(lam / config.lambda_factor, 1e-15)
                accepted = True
                iterations += 1
                if rel_drop < config.chi2_rel_tol:
                    converged = True
                break
            lam *= config.lambda_factor
        if not accepted:
            converged = float(np.max(np.abs(grad))) < 1e-6
            break
        if converged:
            break

    report.final_chi2 = chi2
    report.iterations = iterations
    report.converged = converged or iterations == 0
    for n in node_ids:
        graph.nodes[n] = Sim3Transform.from_packed(poses[n])
    return report


def _solve_normal_equations(hess, lam, rhs, n_free, config):
    damped = hess + lam * np.eye(hess.shape[0])
    if n_free < config.dense_node_limit:
        return np.linalg.solve(damped, rhs)
    from scipy.sparse import csc_matrix
    from scipy.sparse.linalg import splu

    lu = splu(csc_matrix(damped))
    return lu.solve(rhs)


def apply_solution(graph: PoseGraph, old_poses: dict):
    """Per-keyframe pose updates: (old, new, delta) with delta = new * old^-1."""
    out = {}
    for n, new in graph.nodes.items():
        old = old_poses[n]
        out[n] = (old, new, new.compose(old.inverse()))
    return out


# ---------------------------------------------------------------------------
# text import/export (VERTEX_SIM3 / EDGE_SIM3 / FIX lines)
# ---------------------------------------------------------------------------


def save_graph(path, graph: PoseGraph):
    with open(path, "w") as f:
        for n in sorted(graph.nodes):
            f.write(f"VERTEX_SIM3 {n} {transform_to_text(graph.nodes[n])}\n")
        for n in sorted(graph.fixed_nodes):
            f.write(f"FIX {n}\n")
        for e in graph.edges:
            f.write(
                f"EDGE_SIM3 {e.from_node} {e.to_node} "
                f"{transform_to_text(e.measurement)} {e.omega!r} {e.kind}\n"
            )


def load_graph(path) -> PoseGraph:
    graph = PoseGraph()
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "VERTEX_SIM3":
                graph.add_node(int(parts[1]), transform_from_text(" ".join(parts[2:10])))
            elif tag == "FIX":
                graph.fixed_nodes.add(int(parts[1]))
            elif tag == "EDGE_SIM3":
                meas = transform_from_text(" ".join(parts[3:11]))
                omega = float(parts[11]) if len(parts) > 11 else 1.0
                kind = parts[12] if len(parts) > 12 else "loop"
                graph.add_edge(Sim3Constraint(int(parts[1]), int(parts[2]), meas, omega, kind))
            else:
                raise ValueError(f"unknown graph line tag {tag!r}")
    return graph
