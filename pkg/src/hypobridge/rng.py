"""Counter-based random streams.

Every normal variate is a pure function of ``(seed, stream, path, step)``, so an
ensemble can be split across any number of workers, or simulated in any batch
order, and still reproduce bit-identical noise.  Draws use Philox-4x32-10
evaluated on whole arrays of counters at once; the 4x64 variant is kept for
cross-checking against numpy's own Philox bit generator.
"""

import numpy as np

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)


def _mulhilo(a, b):
    """Full 64x64 -> 128 bit product of uint64 arrays, returned as (hi, lo)."""
    a_lo, a_hi = a & _LO, a >> _S32
    b_lo, b_hi = b & _LO, b >> _S32
    ll = a_lo * b_lo
    lh = a_lo * b_hi
    hl = a_hi * b_lo
    hh = a_hi * b_hi
    mid = (ll >> _S32) + (lh & _LO) + (hl & _LO)
    hi = hh + (lh >> _S32) + (hl >> _S32) + (mid >> _S32)
    return hi, a * b


def philox4x64(counter, key, rounds=10):
    """Philox-4x64 block function.

    ``counter`` has shape (..., 4) and ``key`` shape (..., 2), both uint64 and
    broadcastable.  Returns an array of shape (..., 4) of random words.
    """
    counter = np.asarray(counter, dtype=np.uint64)
    key = np.asarray(key, dtype=np.uint64)
    shape = np.broadcast_shapes(counter.shape[:-1], key.shape[:-1])
    c0, c1, c2, c3 = (np.broadcast_to(counter[..., i], shape).copy() for i in range(4))
    k0 = np.broadcast_to(key[..., 0], shape).copy()
    k1 = np.broadcast_to(key[..., 1], shape).copy()
    with np.errstate(over="ignore"):
        for r in range(rounds):
            if r:
                k0 += _W0
                k1 += _W1
            hi0, lo0 = _mulhilo(_M0, c0)
            hi1, lo1 = _mulhilo(_M1, c2)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return np.stack([c0, c1, c2, c3], axis=-1)


_M32_0 = np.uint64(0xD2511F53)
_M32_1 = np.uint64(0xCD9E8D57)
_W32_0 = np.uint64(0x9E3779B9)
_W32_1 = np.uint64(0xBB67AE85)


def philox4x32(counter, key, rounds=10):
    """Philox-4x32 block function on uint32 words held in uint64 arrays.

    Cheaper than the 4x64 variant because each 32x32 product fits a native
    uint64 multiply.  ``counter`` (..., 4), ``key`` (..., 2).
    """
    counter = np.asarray(counter, dtype=np.uint64) & _LO
    key = np.asarray(key, dtype=np.uint64) & _LO
    shape = np.broadcast_shapes(counter.shape[:-1], key.shape[:-1])
    c0, c1, c2, c3 = (np.broadcast_to(counter[..., i], shape) for i in range(4))
    k0 = np.broadcast_to(key[..., 0], shape)
    k1 = np.broadcast_to(key[..., 1], shape)
    for r in range(rounds):
        if r:
            k0 = (k0 + _W32_0) & _LO
            k1 = (k1 + _W32_1) & _LO
        p0 = _M32_0 * c0
        p1 = _M32_1 * c2
        c0, c1, c2, c3 = (p1 >> _S32) ^ c1 ^ k0, p1 & _LO, (p0 >> _S32) ^ c3 ^ k1, p0 & _LO
    return np.stack([c0, c1, c2, c3], axis=-1)


def _key(seed, stream):
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    folded = (seed ^ (seed >> 32)) & 0xFFFFFFFF
    return np.array([folded, int(stream) & 0xFFFFFFFF], dtype=np.uint64)


def _unit_pairs(words):
    # two 53-bit uniforms in (0, 1) per 4x32 block
    a = ((words[..., 0] >> np.uint64(5)) << np.uint64(26)) + (words[..., 1] >> np.uint64(6))
    b = ((words[..., 2] >> np.uint64(5)) << np.uint64(26)) + (words[..., 3] >> np.uint64(6))
    scale = 1.0 / 9007199254740992.0
    return (a.astype(np.float64) + 0.5) * scale, (b.astype(np.float64) + 0.5) * scale


def _blocks(seed, stream, c0, c1, nblocks):
    ctr = np.zeros(np.shape(c1) + (nblocks, 4), dtype=np.uint64)
    ctr[..., 0] = np.uint64(c0) if np.ndim(c0) == 0 else np.asarray(c0, np.uint64)[..., None]
    ctr[..., 1] = np.asarray(c1, np.uint64)[..., None]
    ctr[..., 2] = np.arange(nblocks, dtype=np.uint64)
    return philox4x32(ctr, _key(seed, stream))


def normals(seed, stream, paths, step, count):
    """Standard normal variates for each path at one time step.

    Parameters
    ----------
    seed, stream : int
        Master seed and stream tag (distinguishes e.g. diffusion noise from
        retry noise or permutation draws).
    paths : array of int
        Global path indices.
    step : int
        Step index.
    count : int
        Number of variates per path.

    Returns
    -------
    ndarray of shape (len(paths), count)
    """
    paths = np.atleast_1d(np.asarray(paths, dtype=np.uint64))
    nblocks = (count + 1) // 2
    u1, u2 = _unit_pairs(_blocks(seed, stream, step, paths, nblocks))
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(paths.shape + (2 * nblocks,))
    z[..., 0::2] = r * np.cos(2 * np.pi * u2)
    z[..., 1::2] = r * np.sin(2 * np.pi * u2)
    return z[..., :count]


def uniforms(seed, stream, index, count):
    """Uniform (0, 1) variates keyed by an arbitrary integer index array."""
    index = np.atleast_1d(np.asarray(index, dtype=np.uint64))
    nblocks = (count + 1) // 2
    u1, u2 = _unit_pairs(_blocks(seed, stream, 0xA5A5A5A5, index, nblocks))
    out = np.empty(index.shape + (2 * nblocks,))
    out[..., 0::2], out[..., 1::2] = u1, u2
    return out[..., :count]


def generator(seed, stream, index=0):
    """A numpy Generator on the Philox stream keyed by (seed, stream, index)."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, stream & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    counter = np.array([0, 0, index, 0xB7B7], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
