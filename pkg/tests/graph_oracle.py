"""Dense Gauss-Newton reference solver with finite-difference Jacobians."""

import numpy as np

from sessionmerge import se3
from sessionmerge.factor_graph import PoseGraph

FD_STEP = 1e-6


def numeric_jacobians(factor, poses, h=FD_STEP):
    """Central differences of the factor residual w.r.t. right perturbations
    of each attached node."""
    out = []
    for node in factor.nodes:
        J = np.zeros((6, 6))
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            plus = dict(poses)
            minus = dict(poses)
            plus[node] = poses[node] @ se3.exp(d)
            minus[node] = poses[node] @ se3.exp(-d)
            J[:, k] = (factor.residual(plus) - factor.residual(minus)) / (2 * h)
        out.append(J)
    return out


def total_cost(graph, poses):
    return sum(float(f.residual(poses) @ f.information @ f.residual(poses)) for f in graph.factors)


def dense_gauss_newton(graph: PoseGraph, iters=50, tol=1e-14):
    """Undamped Gauss-Newton with step halving; returns (poses, cost)."""
    names = list(graph.nodes)
    idx = {n: k for k, n in enumerate(names)}
    poses = dict(graph.nodes)
    cost = total_cost(graph, poses)
    n = 6 * len(names)
    for _ in range(iters):
        H = np.zeros((n, n))
        g = np.zeros(n)
        for f in graph.factors:
            e = f.residual(poses)
            jacs = numeric_jacobians(f, poses)
            J = np.zeros((6, n))
            for node, Jn in zip(f.nodes, jacs):
                J[:, 6 * idx[node] : 6 * idx[node] + 6] = Jn
            H += J.T @ f.information @ J
            g += J.T @ f.information @ e
        delta = np.linalg.solve(H, -g)
        step = 1.0
        while step > 1e-6:
            trial = {m: poses[m] @ se3.exp(step * delta[6 * idx[m] : 6 * idx[m] + 6]) for m in names}
            c = total_cost(graph, trial)
            if c <= cost:
                break
            step *= 0.5
        else:
            break
        done = cost - c <= tol * max(cost, 1e-300)
        poses, cost = trial, c
        if done:
            break
    return poses, cost


def dense_information(graph: PoseGraph):
    names = list(graph.nodes)
    idx = {n: k for k, n in enumerate(names)}
    n = 6 * len(names)
    H = np.zeros((n, n))
    for f in graph.factors:
        J = np.zeros((6, n))
        for node, Jn in zip(f.nodes, numeric_jacobians(f, graph.nodes)):
            J[:, 6 * idx[node] : 6 * idx[node] + 6] = Jn
        H += J.T @ f.information @ J
    return H
