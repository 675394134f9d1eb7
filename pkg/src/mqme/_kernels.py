"""Hot loops: scripted oracle, rollouts, tabular Q-learning and greedy evaluation.

All randomness is drawn by the caller and passed in as arrays so that the
numba-compiled and the pure-Python paths produce identical results.
"""
import numpy as np

from ._jit import njit
from .sim import apply_action, count_in_zone

UP, DOWN, LEFT, RIGHT, TOGGLE = 0, 1, 2, 3, 4


@njit
def _footprint_free(occ, r, c, width, W, H):
    if r < 0 or r >= H or c < 0 or c + width > W:
        return False
    for d in range(width):
        if occ[r, c + d]:
            return False
    return True


@njit
def oracle_action(s, W, H, G, width, has_grip):
    """Greedy scripted policy: get beneath the best column group, push up."""
    ar, ac, held = s[0], s[1], s[2]
    nb = (s.shape[0] - 3) // 2
    if has_grip and held >= 0:
        br = s[3 + 2 * held]
        if br < G or br == 0:
            return TOGGLE
        for k in range(nb):
            if k != held and s[3 + 2 * k] == br - 1 and s[4 + 2 * k] == s[4 + 2 * held]:
                return TOGGLE
        return UP

    occ = np.zeros((H, W), dtype=np.uint8)
    for k in range(nb):
        occ[s[3 + 2 * k], s[4 + 2 * k]] = 1

    # breadth-first search over agent positions, never pushing
    dist = np.full((H, W), -1, dtype=np.int64)
    first = np.full((H, W), -1, dtype=np.int64)
    qr = np.empty(H * W, dtype=np.int64)
    qc = np.empty(H * W, dtype=np.int64)
    head, tail = 0, 0
    dist[ar, ac] = 0
    qr[tail], qc[tail] = ar, ac
    tail += 1
    while head < tail:
        r, c = qr[head], qc[head]
        head += 1
        for move in range(4):
            nr, nc = r, c
            if move == UP:
                nr = r - 1
            elif move == DOWN:
                nr = r + 1
            elif move == LEFT:
                nc = c - 1
            else:
                nc = c + 1
            if not _footprint_free(occ, nr, nc, width, W, H):
                continue
            if dist[nr, nc] >= 0:
                continue
            dist[nr, nc] = dist[r, c] + 1
            first[nr, nc] = move if first[r, c] < 0 else first[r, c]
            qr[tail], qc[tail] = nr, nc
            tail += 1

    best_c, best_score, best_dist, best_row = -1, 0, 1 << 30, -1
    for c in range(W - width + 1):
        score = 0
        low = -1
        for k in range(nb):
            br, bc = s[3 + 2 * k], s[4 + 2 * k]
            if br >= G and c <= bc < c + width:
                score += 1
                if br > low:
                    low = br
        if score == 0 or low + 1 >= H:
            continue
        tr = low + 1
        d = dist[tr, c]
        if d < 0:
            continue
        if score > best_score or (score == best_score and d < best_dist):
            best_c, best_score, best_dist, best_row = c, score, d, tr
    if best_c < 0:
        if _footprint_free(occ, ar + 1, ac, width, W, H):
            return DOWN
        return UP
    if best_dist == 0:
        if has_grip:
            for k in range(nb):
                if s[3 + 2 * k] == ar - 1 and s[4 + 2 * k] == ac:
                    return TOGGLE
        return UP
    return first[best_row, best_c]


@njit
def rollout_kernel(s0, W, H, G, width, has_grip, n_actions, max_steps, eps, coins, randacts):
    """Roll an epsilon-degraded oracle; returns (states, actions, length).

    ``states`` has ``max_steps + 1`` rows; row ``t`` is the state after
    ``t`` steps. ``coins``/``randacts`` hold pre-drawn per-step randomness.
    """
    nb = (s0.shape[0] - 3) // 2
    states = np.empty((max_steps + 1, s0.shape[0]), dtype=np.int64)
    actions = np.empty(max_steps, dtype=np.int64)
    states[0] = s0
    s = s0.copy()
    t = 0
    while t < max_steps:
        if coins[t] < eps:
            a = randacts[t] % n_actions
        else:
            a = oracle_action(s, W, H, G, width, has_grip)
        s = apply_action(s, a, W, H, width)
        actions[t] = a
        t += 1
        states[t] = s
        if count_in_zone(s, G) == nb:
            break
    return states, actions, t


@njit
def _greedy(q, s, n_actions, u):
    """Argmax over actions with uniform tie-breaking driven by ``u`` in [0,1)."""
    best = q[s, 0]
    for a in range(1, n_actions):
        if q[s, a] > best:
            best = q[s, a]
    n_best = 0
    for a in range(n_actions):
        if q[s, a] == best:
            n_best += 1
    pick = int(u * n_best)
    if pick >= n_best:
        pick = n_best - 1
    for a in range(n_actions):
        if q[s, a] == best:
            if pick == 0:
                return a
            pick -= 1
    return 0


@njit
def evaluate_kernel(q, nxt, gt, success, starts, max_steps, ties):
    """Greedy rollouts on the tabulated MDP; per-episode ground-truth return.

    ``gt[s]`` is the reward on arriving in state ``s``; a success state is
    absorbing and keeps paying its reward until ``max_steps``.
    """
    n_ep = starts.shape[0]
    n_actions = q.shape[1]
    out = np.zeros(n_ep)
    for e in range(n_ep):
        s = starts[e]
        total = 0.0
        for t in range(max_steps):
            a = _greedy(q, s, n_actions, ties[e, t])
            s = nxt[s, a]
            total += gt[s]
            if success[s]:
                total += gt[s] * (max_steps - t - 1)
                break
        out[e] = total
    return out


@njit
def _backup(q, nxt, reward, success, s, a, gamma, alpha, absorb):
    s2 = nxt[s, a]
    r = reward[s2]
    if success[s2]:
        target = r * absorb
    else:
        best = q[s2, 0]
        for b in range(1, q.shape[1]):
            if q[s2, b] > best:
                best = q[s2, b]
        target = r + gamma * best
    q[s, a] += alpha * (target - q[s, a])


@njit
def q_learning_kernel(q, nxt, reward, gt, success, starts, max_steps, gamma, alpha,
                      eps_start, eps_end, anneal_steps, coins, randacts, ties,
                      eval_every, eval_starts, eval_ties, visits, replay_every, replay_sweeps):
    """Epsilon-greedy tabular Q-learning over a tabulated deterministic MDP.

    Every ``replay_every`` environment steps, each distinct transition seen
    so far is backed up again, newest first, ``replay_sweeps`` times.
    Mutates ``q`` and ``visits`` in place; returns the mean ground-truth
    evaluation return after every ``eval_every`` steps.
    """
    total_steps = coins.shape[0]
    n_actions = q.shape[1]
    n_evals = total_steps // eval_every if eval_every > 0 else 0
    curve = np.zeros(n_evals)
    absorb = 1.0 / (1.0 - gamma)
    buf_s = np.empty(total_steps, dtype=np.int64)
    buf_a = np.empty(total_steps, dtype=np.int64)
    n_buf = 0
    ep = 0
    s = starts[0]
    t_ep = 0
    k_eval = 0
    for step in range(total_steps):
        if anneal_steps > 0 and step < anneal_steps:
            eps = eps_start + (eps_end - eps_start) * step / anneal_steps
        else:
            eps = eps_end
        if coins[step] < eps:
            a = randacts[step] % n_actions
        else:
            a = _greedy(q, s, n_actions, ties[step])
        if visits[s, a] == 0:
            buf_s[n_buf] = s
            buf_a[n_buf] = a
            n_buf += 1
        visits[s, a] += 1
        _backup(q, nxt, reward, success, s, a, gamma, alpha, absorb)
        s2 = nxt[s, a]
        t_ep += 1
        if success[s2] or t_ep >= max_steps:
            ep += 1
            s = starts[ep % starts.shape[0]]
            t_ep = 0
        else:
            s = s2
        if replay_every > 0 and (step + 1) % replay_every == 0:
            for _ in range(replay_sweeps):
                for i in range(n_buf - 1, -1, -1):
                    _backup(q, nxt, reward, success, buf_s[i], buf_a[i], gamma, alpha, absorb)
        if eval_every > 0 and (step + 1) % eval_every == 0 and k_eval < n_evals:
            rets = evaluate_kernel(q, nxt, gt, success, eval_starts[k_eval], max_steps, eval_ties[k_eval])
            curve[k_eval] = _sequential_mean(rets)
            k_eval += 1
    return curve


@njit
def _sequential_mean(x):
    # left-to-right sum so compiled and interpreted paths round identically
    total = 0.0
    for v in x:
        total += v
    return total / x.shape[0]


@njit
def value_iteration_kernel(nxt, reward, success, gamma, tol, max_sweeps):
    """Bellman optimality sweeps; returns (values, residual per sweep)."""
    n_states, n_actions = nxt.shape
    v = np.zeros(n_states)
    residuals = np.zeros(max_sweeps)
    absorb = 1.0 / (1.0 - gamma)
    n_done = 0
    for sweep in range(max_sweeps):
        v_new = np.empty(n_states)
        for s in range(n_states):
            best = -1e300
            for a in range(n_actions):
                s2 = nxt[s, a]
                if success[s2]:
                    val = reward[s2] * absorb
                else:
                    val = reward[s2] + gamma * v[s2]
                if val > best:
                    best = val
            v_new[s] = best
        res = 0.0
        for s in range(n_states):
            d = abs(v_new[s] - v[s])
            if d > res:
                res = d
        v = v_new
        residuals[sweep] = res
        n_done = sweep + 1
        if res < tol:
            break
    return v, residuals[:n_done]


@njit
def state_key(s, W, H):
    """Canonical int64 key: agent cell, grip flag, sorted block cells."""
    nb = (s.shape[0] - 3) // 2
    cells = np.empty(nb, dtype=np.int64)
    for k in range(nb):
        cells[k] = s[3 + 2 * k] * W + s[4 + 2 * k]
    cells.sort()
    key = (s[0] * W + s[1]) * 2 + (1 if s[2] >= 0 else 0)
    base = W * H
    for k in range(nb):
        key = key * base + cells[k]
    return key


@njit
def tabulate_kernel(starts, W, H, G, width, n_actions, budget):
    """Breadth-first enumeration of states reachable from ``starts``.

    Returns (states, next-state table, n_states); n_states == -1 signals
    that ``budget`` was exceeded. Success states transition to themselves.
    """
    n_start, dim = starts.shape
    nb = (dim - 3) // 2
    cap = 1024
    states = np.empty((cap, dim), dtype=np.int64)
    nxt = np.empty((cap, n_actions), dtype=np.int64)
    index = {}
    n = 0
    for i in range(n_start):
        k = state_key(starts[i], W, H)
        if k not in index:
            index[k] = n
            states[n] = starts[i]
            n += 1
    head = 0
    while head < n:
        s = states[head].copy()
        if count_in_zone(s, G) == nb:
            for a in range(n_actions):
                nxt[head, a] = head
            head += 1
            continue
        for a in range(n_actions):
            s2 = apply_action(s, a, W, H, width)
            k = state_key(s2, W, H)
            if k in index:
                j = index[k]
            else:
                if n >= budget:
                    return states[:n], nxt[:n], -1
                if n >= cap:
                    cap *= 2
                    grown = np.empty((cap, dim), dtype=np.int64)
                    grown[:n] = states[:n]
                    states = grown
                    grown_n = np.empty((cap, n_actions), dtype=np.int64)
                    grown_n[:n] = nxt[:n]
                    nxt = grown_n
                j = n
                index[k] = j
                states[j] = s2
                n += 1
            nxt[head, a] = j
        head += 1
    return states[:n], nxt[:n], n
