"""Pure numpy tree passes, used when the compiled extension is unavailable.

All routines work on the heap layout used by :class:`hhklab.market_tree.EventTree`:
slice ``i`` occupies indices ``2**i - 1 .. 2**(i+1) - 2`` and node ``k`` has
children ``2k+1`` (no jump) and ``2k+2`` (jump).
"""

import numpy as np


def _span(i):
    return (1 << i) - 1, 1 << i


def forward_satisfaction(lump, rate, decay, gain, lump_w, y0, n):
    """Forward pass Y_child = Y*decay + rate*gain + lump_w*lump_child."""
    out = np.empty_like(lump)
    out[0] = y0 + lump_w[0] * lump[0]
    for i in range(n):
        s, m = _span(i)
        s2 = s + m
        base = out[s:s + m] * decay[i] + rate[s:s + m] * gain[i]
        out[s2:s2 + 2 * m] = np.repeat(base, 2) + lump_w[i + 1] * lump[s2:s2 + 2 * m]
    return out


def backward_accumulate(src, p, n, stop=0):
    """Backward pass out_k = src_k + (1-p)*out_{2k+1} + p*out_{2k+2}.

    Leaves keep ``src``; slices above ``stop`` are left untouched.
    """
    out = np.array(src, dtype=np.float64, copy=True)
    q = 1.0 - p
    for i in range(n - 1, stop - 1, -1):
        s, m = _span(i)
        ch = out[s + m:s + 3 * m]
        out[s:s + m] += q * ch[0::2] + p * ch[1::2]
    return out


def forward_product(factor, n):
    """Path products D_0 = 1, D_child = D_parent * factor_parent."""
    out = np.empty_like(factor)
    out[0] = 1.0
    for i in range(n):
        s, m = _span(i)
        out[s + m:s + 3 * m] = np.repeat(out[s:s + m] * factor[s:s + m], 2)
    return out


def forward_sum(a, b, n):
    """Path sums S_0 = b_0, S_child = S_parent + a_parent + b_child."""
    out = np.empty_like(a)
    out[0] = b[0]
    for i in range(n):
        s, m = _span(i)
        out[s + m:s + 3 * m] = np.repeat(out[s:s + m] + a[s:s + m], 2) + b[s + m:s + 3 * m]
    return out


def running_max(level, floor0, decay, n, start=0):
    """Decayed running maximum started at slice ``start``.

    S = max(floor0, L) on the start slice, then S_child = max(S_parent*decay, L_child).
    Entries above the start slice are zero.
    """
    out = np.zeros_like(level)
    s, m = _span(start)
    out[s:s + m] = np.maximum(floor0, level[s:s + m])
    for i in range(start, n):
        s, m = _span(i)
        out[s + m:s + 3 * m] = np.maximum(np.repeat(out[s:s + m] * decay[i], 2),
                                          level[s + m:s + 3 * m])
    return out
