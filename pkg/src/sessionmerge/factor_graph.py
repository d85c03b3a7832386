"""Pose graph on SE(3): prior, odometry and loop factors, Levenberg-Marquardt,
marginal covariances and per-edge error reports.

Residuals use the right-perturbation convention ``X <- X exp(d)``:

* prior      ``e = log(Z^-1 X)``
* between    ``e = log(Z^-1 Xi^-1 Xj)``

and the cost is ``sum e^T Omega e``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from . import se3
from .se3 import Pose

NodeId = Tuple[int, int]

PRIOR = "prior"
ODOMETRY = "odometry"
LOOP = "loop"
KINDS = (PRIOR, ODOMETRY, LOOP)

UPGO = "UPGO"
FPGO = "FPGO"

# Fixed noise per factor kind as (rotation, translation) variances.
FPGO_TABLE: Dict[str, Tuple[float, float]] = {
    PRIOR: (1e-2, 1e0),
    ODOMETRY: (1e-8, 1e-6),
    LOOP: (1e-1, 1e-1),
}

MIN_INFO_EIGENVALUE = 1e-12


class IllPosedError(RuntimeError):
    """Optimization problem without a unique solution (gauge freedom or a
    singular information matrix)."""


def table_covariance(kind: str, table: Mapping[str, Tuple[float, float]] = FPGO_TABLE) -> np.ndarray:
    lr, lt = table[kind]
    return np.diag([lr] * 3 + [lt] * 3).astype(float)


def _information(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (6, 6) or not np.all(np.isfinite(cov)):
        raise ValueError("factor covariance must be a finite 6x6 matrix")
    if not se3.is_psd(cov):
        raise ValueError("factor covariance is not symmetric PSD")
    cov = se3.symmetrize(cov)
    if np.linalg.eigvalsh(cov)[0] <= MIN_INFO_EIGENVALUE:
        raise ValueError("factor covariance is singular")
    return se3.symmetrize(np.linalg.inv(cov))


@dataclass
class Factor:
    """One constraint. ``nodes`` has one id for priors and two otherwise;
    ``source`` labels map-prior factors (M2F) and other provenance."""

    kind: str
    nodes: Tuple[NodeId, ...]
    measurement: Pose
    covariance: np.ndarray
    information: np.ndarray = field(init=False, repr=False)
    source: str = ""

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown factor kind {self.kind!r}")
        self.information = _information(self.covariance)
        self.covariance = se3.symmetrize(np.asarray(self.covariance, dtype=float))

    @classmethod
    def from_information(cls, kind, nodes, measurement, information, source="") -> "Factor":
        info = se3.symmetrize(np.asarray(information, dtype=float))
        return cls(kind, tuple(nodes), measurement, _information(info), source)

    def residual(self, poses: Mapping[NodeId, Pose]) -> np.ndarray:
        zinv = self.measurement.inverse()
        if len(self.nodes) == 1:
            return se3.log(zinv @ poses[self.nodes[0]])
        xi, xj = poses[self.nodes[0]], poses[self.nodes[1]]
        return se3.log(zinv @ xi.inverse() @ xj)

    def linearize(self, poses: Mapping[NodeId, Pose]):
        """Residual and Jacobians with respect to right perturbations."""
        e = self.residual(poses)
        jr_inv = se3.right_jacobian_inv(e)
        if len(self.nodes) == 1:
            return e, [jr_inv]
        xi, xj = poses[self.nodes[0]], poses[self.nodes[1]]
        ji = -jr_inv @ se3.adjoint(xj.inverse() @ xi)
        return e, [ji, jr_inv]

    def cost(self, poses: Mapping[NodeId, Pose]) -> float:
        e = self.residual(poses)
        return float(e @ self.information @ e)


@dataclass
class OptimizerConfig:
    max_iter: int = 100
    rel_tol: float = 1e-12
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    lambda_max: float = 1e12


@dataclass
class OptReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    condition: float
    accepted_costs: List[float] = field(default_factory=list)


@dataclass
class EdgeError:
    index: int
    kind: str
    nodes: Tuple[NodeId, ...]
    weighted: float
    unweighted: float


class PoseGraph:
    """Pose nodes keyed by ``(session, index)`` plus factors.

    In FPGO mode the supplied covariances are ignored and every factor takes
    the fixed diagonal noise of its kind from ``table``.
    """

    def __init__(self, mode: str = UPGO, table: Optional[Mapping[str, Tuple[float, float]]] = None):
        if mode not in (UPGO, FPGO):
            raise ValueError(f"unknown graph mode {mode!r}")
        self.mode = mode
        self.table = dict(FPGO_TABLE if table is None else table)
        self.nodes: Dict[NodeId, Pose] = {}
        self.factors: List[Factor] = []
        self._prior_nodes: set = set()

    # construction

    def add_node(self, node: NodeId, pose: Pose) -> None:
        node = (int(node[0]), int(node[1]))
        if node in self.nodes:
            raise ValueError(f"duplicate node {node}")
        self.nodes[node] = pose

    def _require(self, *nodes: NodeId) -> None:
        for n in nodes:
            if n not in self.nodes:
                raise KeyError(f"unknown node {n}")

    def _cov(self, kind: str, cov, table_kind: Optional[str] = None) -> np.ndarray:
        if self.mode == FPGO or cov is None:
            return table_covariance(table_kind or kind, self.table)
        return np.asarray(cov, dtype=float)

    def add_prior(self, node: NodeId, pose: Pose, cov=None, table_kind: str = PRIOR, source: str = "") -> Factor:
        """Unary pose factor. ``table_kind`` picks the fixed noise used in
        FPGO mode (or when ``cov`` is None); map priors use ``LOOP``."""
        self._require(node)
        if node in self._prior_nodes:
            raise ValueError(f"node {node} already has a prior")
        f = Factor(PRIOR, (node,), pose, self._cov(PRIOR, cov, table_kind), source=source)
        self.factors.append(f)
        self._prior_nodes.add(node)
        return f

    def add_odometry(self, i: NodeId, j: NodeId, measurement: Pose, cov=None) -> Factor:
        self._require(i, j)
        if i == j:
            raise ValueError("odometry factor needs two distinct nodes")
        f = Factor(ODOMETRY, (i, j), measurement, self._cov(ODOMETRY, cov))
        self.factors.append(f)
        return f

    def add_loop(self, i: NodeId, j: NodeId, registration, measurement: Optional[Pose] = None) -> bool:
        """Loop factor from a registration result whose pose maps node ``j``'s
        frame into node ``i``'s frame. Unusable registrations are rejected."""
        self._require(i, j)
        if i == j or not registration.converged or registration.degenerate:
            return False
        if self.mode == UPGO and registration.covariance is None:
            return False
        z = registration.pose if measurement is None else measurement
        self.factors.append(Factor(LOOP, (i, j), z, self._cov(LOOP, registration.covariance)))
        return True

    def add_factor(self, factor: Factor) -> None:
        self._require(*factor.nodes)
        if factor.kind == PRIOR:
            if factor.nodes[0] in self._prior_nodes:
                raise ValueError(f"node {factor.nodes[0]} already has a prior")
            self._prior_nodes.add(factor.nodes[0])
        self.factors.append(factor)

    # evaluation

    def index(self) -> Dict[NodeId, int]:
        return {n: k for k, n in enumerate(self.nodes)}

    def cost(self, poses: Optional[Mapping[NodeId, Pose]] = None) -> float:
        poses = self.nodes if poses is None else poses
        return float(sum(f.cost(poses) for f in self.factors))

    def _system(self, poses: Mapping[NodeId, Pose]):
        idx = self.index()
        n = 6 * len(idx)
        rows, cols, vals = [], [], []
        g = np.zeros(n)
        cost = 0.0
        base = np.arange(6)
        for f in self.factors:
            e, jacs = f.linearize(poses)
            w = f.information
            cost += float(e @ w @ e)
            blocks = [6 * idx[nd] for nd in f.nodes]
            wj = [w @ J for J in jacs]
            for a, (oa, Ja) in enumerate(zip(blocks, jacs)):
                g[oa : oa + 6] += Ja.T @ (w @ e)
                for b, (ob, WJb) in enumerate(zip(blocks, wj)):
                    rows.append(np.repeat(oa + base, 6))
                    cols.append(np.tile(ob + base, 6))
                    vals.append((Ja.T @ WJb).ravel())
        if rows:
            H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsc()
        else:
            H = sp.csc_matrix((n, n))
        return H, g, cost

    def information_matrix(self) -> np.ndarray:
        """Dense Gauss-Newton information matrix at the current estimate."""
        H, _, _ = self._system(self.nodes)
        return H.toarray()

    def check_gauge(self) -> None:
        """Raise :class:`IllPosedError` unless every connected component of
        the factor graph holds at least one prior."""
        idx = self.index()
        if not idx:
            return
        r, c = [], []
        for f in self.factors:
            if len(f.nodes) == 2:
                r.append(idx[f.nodes[0]])
                c.append(idx[f.nodes[1]])
        adj = sp.coo_matrix((np.ones(len(r)), (r, c)), shape=(len(idx), len(idx)))
        ncomp, labels = connected_components(adj, directed=False)
        anchored = np.zeros(ncomp, dtype=bool)
        for n in self._prior_nodes:
            anchored[labels[idx[n]]] = True
        if not anchored.all():
            names = list(idx)
            missing = [names[int(np.flatnonzero(labels == k)[0])] for k in np.flatnonzero(~anchored)]
            raise IllPosedError(
                f"gauge freedom: {int((~anchored).sum())} of {ncomp} graph component(s) have no prior "
                f"(e.g. the component containing node {missing[0]}); the information matrix has a "
                f"6-dimensional null space per unanchored component"
            )

    # optimization

    def optimize(self, cfg: Optional[OptimizerConfig] = None) -> OptReport:
        cfg = cfg or OptimizerConfig()
        self.check_gauge()
        poses = dict(self.nodes)
        idx = self.index()
        H, g, cost = self._system(poses)
        if not np.isfinite(cost):
            raise IllPosedError("non-finite initial cost")
        initial = cost
        lam = cfg.lambda_init
        converged = cost == 0.0
        accepted = [cost]
        it = 0
        while not converged and it < cfg.max_iter:
            it += 1
            diag = H.diagonal()
            damp = sp.diags(lam * np.maximum(diag, 1e-12))
            try:
                delta = spla.spsolve((H + damp).tocsc(), -g)
            except RuntimeError as exc:  # singular factorization
                raise IllPosedError(f"singular normal equations: {exc}") from exc
            if not np.all(np.isfinite(delta)):
                lam *= cfg.lambda_up
                if lam > cfg.lambda_max:
                    break
                continue
            trial = {n: poses[n] @ se3.exp(delta[6 * k : 6 * k + 6]) for n, k in idx.items()}
            new_cost = self.cost(trial)
            if not np.isfinite(new_cost):
                raise IllPosedError("non-finite cost during optimization")
            if new_cost <= cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                poses = trial
                H, g, cost = self._system(poses)
                accepted.append(cost)
                lam = max(lam / cfg.lambda_down, 1e-15)
                if rel < cfg.rel_tol or cost == 0.0:
                    converged = True
            else:
                lam *= cfg.lambda_up
                if lam > cfg.lambda_max:
                    # No descent possible at any damping: at a minimum.
                    converged = True
        self.nodes = poses
        return OptReport(initial, cost, it, converged, self._condition(H), accepted)

    @staticmethod
    def _condition(H) -> float:
        n = H.shape[0]
        if n == 0:
            return float("nan")
        if n <= 1200:
            ev = np.linalg.eigvalsh(H.toarray())
        else:
            try:
                hi = spla.eigsh(H, k=1, which="LA", return_eigenvectors=False)
                lo = spla.eigsh(H, k=1, sigma=0.0, which="LM", return_eigenvectors=False)
                ev = np.array([lo[0], hi[0]])
            except Exception:
                return float("nan")
        return float(ev[-1] / ev[0]) if ev[0] > 0 else float("inf")

    # reports

    def marginals(self) -> Dict[NodeId, np.ndarray]:
        """Per-node covariance from the inverse of the dense information
        matrix at the current estimate."""
        self.check_gauge()
        H = self.information_matrix()
        try:
            L = np.linalg.cholesky(H)
        except np.linalg.LinAlgError as exc:
            raise IllPosedError("singular information matrix (gauge freedom or unconstrained DOF)") from exc
        inv = np.linalg.inv(L)
        cov = inv.T @ inv
        out = {}
        for k, n in enumerate(self.nodes):
            out[n] = se3.symmetrize(cov[6 * k : 6 * k + 6, 6 * k : 6 * k + 6])
        return out

    def edge_error_report(self) -> List[EdgeError]:
        out = []
        for k, f in enumerate(self.factors):
            e = f.residual(self.nodes)
            out.append(EdgeError(k, f.kind, f.nodes, float(np.sqrt(max(e @ f.information @ e, 0.0))), float(np.linalg.norm(e))))
        return out


def format_edge_report(report: Sequence[EdgeError]) -> str:
    lines = ["# index kind nodes weighted unweighted"]
    for r in report:
        nodes = ",".join(f"{s}:{i}" for s, i in r.nodes)
        lines.append(f"{r.index} {r.kind} {nodes} {r.weighted:.17g} {r.unweighted:.17g}")
    return "\n".join(lines) + "\n"
