"""Compiled inner loops: open-addressed site sets and pair-walk stepping.

Sites are packed into one int64 key as ``(x + 2**31) << 32 | (y + 2**31)``.
Key 0 is the empty slot marker; it would need ``x = y = -2**31``.
"""
import numpy as np
from numba import njit

_OFFSET = np.int64(1 << 31)
_MULT = np.uint64(0x9E3779B97F4A7C15)

# state vector layout for advance_pair
T, X1, Y1, X2, Y2, R1, R2, J = range(8)
STATE_LEN = 8


def table_capacity(n_items):
    """Power-of-two capacity keeping load factor at or below one half."""
    cap = 16
    while cap < 2 * max(int(n_items), 1):
        cap *= 2
    return cap


@njit(cache=True, inline="always")
def pack(x, y):
    return ((np.int64(x) + _OFFSET) << 32) | (np.int64(y) + _OFFSET)


@njit(cache=True, inline="always")
def _slot(key, mask):
    h = np.uint64(key) * _MULT
    return np.int64(h >> np.uint64(29)) & mask


@njit(cache=True)
def set_insert(table, key):
    """Insert ``key``; return True when it was not present."""
    mask = table.shape[0] - 1
    i = _slot(key, mask)
    while True:
        k = table[i]
        if k == 0:
            table[i] = key
            return True
        if k == key:
            return False
        i = (i + 1) & mask


@njit(cache=True)
def set_contains(table, key):
    mask = table.shape[0] - 1
    i = _slot(key, mask)
    while True:
        k = table[i]
        if k == 0:
            return False
        if k == key:
            return True
        i = (i + 1) & mask


@njit(cache=True)
def build_set(keys, capacity):
    table = np.zeros(capacity, dtype=np.int64)
    for k in keys:
        set_insert(table, k)
    return table


@njit(cache=True)
def count_common(small_keys, big_table):
    c = 0
    for k in small_keys:
        if set_contains(big_table, k):
            c += 1
    return c


@njit(cache=True)
def advance_pair(state, table1, table2, dirs1, dirs2, dx, dy, offset, t_stop,
                 level, checkpoints, j_at_checkpoints):
    """Step both walks from ``state[T]`` up to ``t_stop``.

    ``dirs*[t - offset - 1]`` drives step ``t``. Stops early, right after the
    step at which J first exceeds ``level`` (pass a negative level to disable
    the early stop only when J is already above it; use a huge level to never
    stop). Records J at every checkpoint time passed. Returns True on early stop.
    """
    t = state[T]
    x1 = state[X1]
    y1 = state[Y1]
    x2 = state[X2]
    y2 = state[Y2]
    r1 = state[R1]
    r2 = state[R2]
    j = state[J]
    ncp = checkpoints.shape[0]
    ci = 0
    while ci < ncp and checkpoints[ci] <= t:
        ci += 1
    stopped = False
    while t < t_stop:
        t += 1
        d1 = dirs1[t - offset - 1]
        d2 = dirs2[t - offset - 1]
        x1 += dx[d1]
        y1 += dy[d1]
        x2 += dx[d2]
        y2 += dy[d2]
        k1 = pack(x1, y1)
        if set_insert(table1, k1):
            r1 += 1
            if set_contains(table2, k1):
                j += 1
        k2 = pack(x2, y2)
        if set_insert(table2, k2):
            r2 += 1
            if set_contains(table1, k2):
                j += 1
        while ci < ncp and checkpoints[ci] == t:
            j_at_checkpoints[ci] = j
            ci += 1
        if j > level:
            stopped = True
            break
    state[T] = t
    state[X1] = x1
    state[Y1] = y1
    state[X2] = x2
    state[Y2] = y2
    state[R1] = r1
    state[R2] = r2
    state[J] = j
    return stopped


@njit(cache=True)
def walk_range_size(table, dirs, dx, dy):
    """Range cardinality of a single walk (time-0 site excluded unless revisited)."""
    x = 0
    y = 0
    r = 0
    for t in range(dirs.shape[0]):
        d = dirs[t]
        x += dx[d]
        y += dy[d]
        if set_insert(table, pack(x, y)):
            r += 1
    return r


@njit(cache=True)
def walk_range_reaches(table, dirs, dx, dy, need):
    """Build walk 1's table and report whether its range can reach ``need``.

    Stops as soon as the sites still to come cannot lift the range to ``need``.
    """
    x = 0
    y = 0
    r = 0
    n = dirs.shape[0]
    for t in range(n):
        if r + (n - t) < need:
            return False
        d = dirs[t]
        x += dx[d]
        y += dy[d]
        if set_insert(table, pack(x, y)):
            r += 1
    return r >= need


@njit(cache=True)
def walk_intersections_with(table1, table2, dirs, dx, dy):
    """Walk 2 against a completed walk-1 table; returns (#R2, J)."""
    x = 0
    y = 0
    r = 0
    j = 0
    for t in range(dirs.shape[0]):
        d = dirs[t]
        x += dx[d]
        y += dy[d]
        k = pack(x, y)
        if set_insert(table2, k):
            r += 1
            if set_contains(table1, k):
                j += 1
    return r, j


@njit(cache=True)
def table_keys(table):
    return table[table != 0]


@njit(cache=True)
def cumulative_path(dirs, dx, dy):
    n = dirs.shape[0]
    out = np.empty((n, 2), dtype=np.int64)
    x = 0
    y = 0
    for t in range(n):
        d = dirs[t]
        x += dx[d]
        y += dy[d]
        out[t, 0] = x
        out[t, 1] = y
    return out


@njit(cache=True)
def first_hits(dirs, dx, dy, targets):
    """First time in 1..len(dirs) each target is visited, -1 if never."""
    m = targets.shape[0]
    hit = np.full(m, -1, dtype=np.int64)
    remaining = m
    x = 0
    y = 0
    for t in range(dirs.shape[0]):
        d = dirs[t]
        x += dx[d]
        y += dy[d]
        for i in range(m):
            if hit[i] < 0 and targets[i, 0] == x and targets[i, 1] == y:
                hit[i] = t + 1
                remaining -= 1
        if remaining == 0:
            break
    return hit
