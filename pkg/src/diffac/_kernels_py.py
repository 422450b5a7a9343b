"""Pure-numpy MLP kernels.

Reference implementation of the batched forward/backward pass. The compiled
module ``_kernels_c`` exposes the same two functions with the same signatures;
``diffac.kernels`` picks one at import time.

Parameter layout: for each layer, a row-major weight block of shape
``(out, in)`` followed by a bias block of length ``out``. ``layout`` is an
``(L, 4)`` int64 array of ``(in, out, w_offset, b_offset)`` rows.
"""

import numpy as np

RELU = 0
TANH = 1


def mlp_forward(params, layout, act, x):
    """Run a batch ``x`` of shape (B, in) through the net.

    Returns the output (B, out) and the list of post-activation hidden
    states, input first, which ``mlp_backward`` consumes.
    """
    hs = [x]
    h = x
    n_layers = layout.shape[0]
    for li in range(n_layers):
        n_in, n_out, w_off, b_off = (int(v) for v in layout[li])
        w = params[w_off:w_off + n_in * n_out].reshape(n_out, n_in)
        b = params[b_off:b_off + n_out]
        z = h @ w.T
        z += b
        if li < n_layers - 1:
            if act == RELU:
                np.maximum(z, 0.0, out=z)
            else:
                np.tanh(z, out=z)
            hs.append(z)
        h = z
    return h, hs


def mlp_backward(params, layout, act, hs, dy):
    """Reverse pass for ``sum(output * dy)``.

    Returns ``(dparams, dx)``; ``dparams`` is summed over the batch.
    """
    dparams = np.zeros_like(params)
    g = dy
    n_layers = layout.shape[0]
    for li in range(n_layers - 1, -1, -1):
        n_in, n_out, w_off, b_off = (int(v) for v in layout[li])
        w = params[w_off:w_off + n_in * n_out].reshape(n_out, n_in)
        h_in = hs[li]
        dparams[w_off:w_off + n_in * n_out] = (g.T @ h_in).ravel()
        dparams[b_off:b_off + n_out] = g.sum(axis=0)
        g = g @ w
        if li > 0:
            if act == RELU:
                g = g * (h_in > 0.0)
            else:
                g = g * (1.0 - h_in * h_in)
    return dparams, g
