"""Compiled slot loop.

Mirrors ``engine.step`` + ``policies.dispatch/end_of_slot`` decision for
decision on pre-drawn random chunks.  Any change to the policy rules must be
made in both places; ``tests/test_engine.py`` replays both and compares.
"""

import numpy as np
from numba import njit

RANDOM, WEIGHTED, JSQ, POD, PODMEM, JIQ, JBT, JBTG, JBTAVG = range(9)

# indices into the int64 accumulator vector
A_QSUM, A_RSUM, A_RCNT, A_PUSH, A_PULL, A_EVENTS, A_ARR, A_UNUSED, A_SLOTS = range(9)
N_ACC = 9

# indices into the scalar policy-state vector
S_NMEM, S_THETA, S_NSTORED = range(3)


@njit(cache=True)
def _pick(u, k):
    j = int(u * k)
    return j if j < k else k - 1


@njit(cache=True)
def _sample(u, off, n, d, perm):
    for i in range(n):
        perm[i] = i
    for i in range(d):
        j = i + _pick(u[off + i], n - i)
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp


@njit(cache=True)
def _weighted_member(u, mu, in_mem, n):
    total = 0.0
    last = -1
    for i in range(n):
        if in_mem[i]:
            total += mu[i]
            last = i
    target = u * total
    acc = 0.0
    for i in range(n):
        if in_mem[i]:
            acc += mu[i]
            if target < acc:
                return i
    return last


@njit(cache=True)
def _weighted_all(u, mu, n):
    total = 0.0
    for i in range(n):
        total += mu[i]
    target = u * total
    acc = 0.0
    for i in range(n):
        acc += mu[i]
        if target < acc:
            return i
    return n - 1


@njit(cache=True)
def _grow(fslot, fcnt, fhead, flen):
    n, cap = fslot.shape
    ns = np.empty((n, 2 * cap), dtype=np.int64)
    nc = np.empty((n, 2 * cap), dtype=np.int64)
    for s in range(n):
        for k in range(flen[s]):
            idx = (fhead[s] + k) % cap
            ns[s, k] = fslot[s, idx]
            nc[s, k] = fcnt[s, idx]
        fhead[s] = 0
    return ns, nc


@njit(cache=True)
def run_chunk(t0, arr, svc, unif, kind, d, m, T, mu,
              q, fslot, fcnt, fhead, flen, in_mem, reported, scal, st_srv, st_len,
              warmup, horizon, nbatch, acc, b_resp, b_cnt, b_q, mem_hist, dec):
    n = q.shape[0]
    perm = np.empty(n, dtype=np.int64)
    c_srv = np.empty(d + m + 1, dtype=np.int64)
    c_len = np.empty(d + m + 1, dtype=np.int64)
    mins = np.empty(max(n, d + m + 1), dtype=np.int64)
    measured = horizon - warmup
    decile = horizon // 10
    for i in range(arr.shape[0]):
        t = t0 + i
        u = unif[i]
        at = arr[i]
        counted = t >= warmup
        dest = -1
        # ---- dispatch
        if at > 0:
            push = 0
            if counted:
                mem_hist[scal[S_NMEM]] += 1
            if kind == RANDOM:
                dest = _pick(u[0], n)
            elif kind == WEIGHTED:
                dest = _weighted_all(u[0], mu, n)
            elif kind == JSQ:
                lo = q[0]
                for s in range(1, n):
                    if q[s] < lo:
                        lo = q[s]
                k = 0
                for s in range(n):
                    if q[s] == lo:
                        mins[k] = s
                        k += 1
                dest = mins[_pick(u[0], k)]
                push = 2 * n
            elif kind == POD or kind == PODMEM:
                _sample(u, 0, n, d, perm)
                nc = 0
                for j in range(d):
                    c_srv[nc] = perm[j]
                    c_len[nc] = q[perm[j]]
                    nc += 1
                if kind == PODMEM:
                    for j in range(scal[S_NSTORED]):
                        s = st_srv[j]
                        found = False
                        for c in range(d):
                            if c_srv[c] == s:
                                if st_len[j] < c_len[c]:
                                    c_len[c] = st_len[j]
                                found = True
                                break
                        if not found:
                            c_srv[nc] = s
                            c_len[nc] = st_len[j]
                            nc += 1
                lo = c_len[0]
                for c in range(1, nc):
                    if c_len[c] < lo:
                        lo = c_len[c]
                k = 0
                for c in range(nc):
                    if c_len[c] == lo:
                        mins[k] = c
                        k += 1
                ci = mins[_pick(u[d], k)]
                dest = c_srv[ci]
                push = 2 * d
                if kind == PODMEM:
                    c_len[ci] += at
                    # stable insertion sort by recorded length
                    for a1 in range(1, nc):
                        ks = c_srv[a1]
                        kl = c_len[a1]
                        b1 = a1 - 1
                        while b1 >= 0 and c_len[b1] > kl:
                            c_srv[b1 + 1] = c_srv[b1]
                            c_len[b1 + 1] = c_len[b1]
                            b1 -= 1
                        c_srv[b1 + 1] = ks
                        c_len[b1 + 1] = kl
                    keep = nc if nc < m else m
                    for j in range(keep):
                        st_srv[j] = c_srv[j]
                        st_len[j] = c_len[j]
                    scal[S_NSTORED] = keep
            else:
                nm = scal[S_NMEM]
                if nm > 0:
                    if kind == JBTG:
                        dest = _weighted_member(u[0], mu, in_mem, n)
                    else:
                        target = _pick(u[0], nm)
                        k = 0
                        for s in range(n):
                            if in_mem[s]:
                                if k == target:
                                    dest = s
                                    break
                                k += 1
                    in_mem[dest] = False
                    scal[S_NMEM] = nm - 1
                    if kind != JIQ:
                        reported[dest] = False
                elif kind == JBTG:
                    dest = _weighted_all(u[0], mu, n)
                else:
                    dest = _pick(u[0], n)
            if counted:
                acc[A_PUSH] += push
                acc[A_EVENTS] += 1
                acc[A_ARR] += at
        # ---- arrivals join the tail, service from the head
        b = (t - warmup) * nbatch // measured if counted else 0
        if dest >= 0:
            if flen[dest] == fslot.shape[1]:
                fslot, fcnt = _grow(fslot, fcnt, fhead, flen)
            cap = fslot.shape[1]
            tail = (fhead[dest] + flen[dest]) % cap
            fslot[dest, tail] = t
            fcnt[dest, tail] = at
            flen[dest] += 1
            q[dest] += at
        total = 0
        for s in range(n):
            offered = svc[i, s]
            served = offered if offered < q[s] else q[s]
            if counted:
                acc[A_UNUSED] += offered - served
            q[s] -= served
            total += q[s]
            rem = served
            cap = fslot.shape[1]
            while rem > 0:
                h = fhead[s]
                c = fcnt[s, h]
                take = c if c < rem else rem
                # only jobs that arrived after warmup enter the response statistics
                if counted and fslot[s, h] >= warmup:
                    r = t - fslot[s, h]
                    acc[A_RSUM] += take * r
                    acc[A_RCNT] += take
                    b_resp[b] += take * r
                    b_cnt[b] += take
                rem -= take
                if take == c:
                    fhead[s] = (h + 1) % cap
                    flen[s] -= 1
                else:
                    fcnt[s, h] = c - take
        # ---- end of slot: reports and threshold refresh
        pull = 0
        push = 0
        if kind == JIQ:
            for s in range(n):
                if q[s] == 0 and not in_mem[s]:
                    in_mem[s] = True
                    scal[S_NMEM] += 1
                    pull += 1
        elif kind == JBT or kind == JBTG or kind == JBTAVG:
            if (t + 1) % T == 0:
                if kind == JBTAVG:
                    theta = total // n
                    push = 2 * n
                else:
                    _sample(u, 1, n, d, perm)
                    theta = q[perm[0]]
                    for j in range(1, d):
                        if q[perm[j]] < theta:
                            theta = q[perm[j]]
                    push = 2 * d
                nm = 0
                for s in range(n):
                    if q[s] <= theta:
                        if not in_mem[s]:
                            pull += 1
                        in_mem[s] = True
                        reported[s] = True
                        nm += 1
                    else:
                        in_mem[s] = False
                        reported[s] = False
                scal[S_NMEM] = nm
                scal[S_THETA] = theta
            else:
                theta = scal[S_THETA]
                for s in range(n):
                    if q[s] <= theta and not reported[s]:
                        in_mem[s] = True
                        reported[s] = True
                        scal[S_NMEM] += 1
                        pull += 1
        if counted:
            acc[A_PULL] += pull
            acc[A_PUSH] += push
            acc[A_QSUM] += total
            acc[A_SLOTS] += 1
            b_q[b] += total
        if t < decile:
            dec[0] += total
        if t >= horizon - decile:
            dec[1] += total
    return fslot, fcnt


@njit(cache=True)
def pooled_chunk(t0, arr, svc, state, warmup, horizon, nbatch, acc, b_q, dec):
    """Single pooled queue fed by the same arrivals, serving the summed capacity."""
    measured = horizon - warmup
    decile = horizon // 10
    q = state[0]
    for i in range(arr.shape[0]):
        t = t0 + i
        s = 0
        for j in range(svc.shape[1]):
            s += svc[i, j]
        x = q + arr[i] - s
        u = 0
        if x < 0:
            u = -x
            x = 0
        q = x
        if t >= warmup:
            b = (t - warmup) * nbatch // measured
            acc[0] += q
            acc[1] += u
            acc[2] += u * u
            acc[3] += arr[i]
            acc[4] += 1
            b_q[b] += q
        if t < decile:
            dec[0] += q
        if t >= horizon - decile:
            dec[1] += q
    state[0] = q
