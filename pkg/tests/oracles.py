"""Independent reference computations used by several test modules."""

import numpy as np

ACTIONS = ((0, 1), (0, -1), (1, 0), (-1, 0))


def gridworld(n: int = 5, goal=(4, 4)):
    """Deterministic n x n grid, four moves, reward 1 on entering the absorbing goal."""
    n_s = n * n
    P = np.zeros((n_s, len(ACTIONS)), dtype=np.int64)
    R = np.zeros((n_s, len(ACTIONS)))
    g = goal[0] * n + goal[1]
    for x in range(n):
        for y in range(n):
            s = x * n + y
            for a, (dx, dy) in enumerate(ACTIONS):
                if s == g:
                    P[s, a] = s
                    continue
                nx, ny = min(max(x + dx, 0), n - 1), min(max(y + dy, 0), n - 1)
                P[s, a] = nx * n + ny
                R[s, a] = 1.0 if P[s, a] == g else 0.0
    terminal = np.zeros(n_s, dtype=bool)
    terminal[g] = True
    return P, R, terminal


def value_iteration(P, R, terminal, gamma, tol=1e-10, max_iter=100_000):
    """Optimal Q by value iteration; terminal states have value 0."""
    V = np.zeros(P.shape[0])
    for _ in range(max_iter):
        Q = R + gamma * V[P]
        Q[terminal] = 0.0
        V_new = Q.max(1)
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    Q = R + gamma * V[P]
    Q[terminal] = 0.0
    return Q


def greedy(Q, tol=1e-10):
    """Greedy action per state, lowest index among actions within ``tol`` of the best."""
    best = Q.max(1, keepdims=True)
    return np.argmax(Q >= best - tol, axis=1)


def shaped_rewards(R, P, terminal, phi, mu):
    """Add ``mu * phi(s') - phi(s)``; the potential of a terminal state is taken as 0."""
    phi_next = np.where(terminal[P], 0.0, phi[P])
    out = R + mu * phi_next - phi[:, None]
    out[terminal] = 0.0
    return out
