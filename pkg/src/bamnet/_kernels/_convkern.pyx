# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled gather/scatter kernels for 2-D convolution.

im2col unrolls sliding windows of a zero-padded input into a column matrix so
the convolution itself is a single matrix product; col2im is its transpose
(scatter-add), used by the backward pass.  Both mutate caller-allocated
output buffers so the same code path serves float32 and float64.
"""

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, real[:, :, ::1] cols,
           int kh, int kw, int stride, int dilation,
           int out_h, int out_w):
    """Fill cols[n, (c*kh+i)*kw+j, oy*out_w+ox] = xp[n, c, oy*s+i*d, ox*s+j*d]."""
    cdef Py_ssize_t n_batch = xp.shape[0]
    cdef Py_ssize_t channels = xp.shape[1]
    cdef Py_ssize_t n, c, i, j, oy, ox, row, iy, base
    with nogil:
        for n in range(n_batch):
            row = 0
            for c in range(channels):
                for i in range(kh):
                    for j in range(kw):
                        for oy in range(out_h):
                            iy = oy * stride + i * dilation
                            base = oy * out_w
                            for ox in range(out_w):
                                cols[n, row, base + ox] = xp[n, c, iy, ox * stride + j * dilation]
                        row += 1


def col2im(real[:, :, ::1] cols, real[:, :, :, ::1] xp,
           int kh, int kw, int stride, int dilation,
           int out_h, int out_w):
    """Scatter-add the column matrix back onto the padded-input buffer."""
    cdef Py_ssize_t n_batch = xp.shape[0]
    cdef Py_ssize_t channels = xp.shape[1]
    cdef Py_ssize_t n, c, i, j, oy, ox, row, iy, base
    with nogil:
        for n in range(n_batch):
            row = 0
            for c in range(channels):
                for i in range(kh):
                    for j in range(kw):
                        for oy in range(out_h):
                            iy = oy * stride + i * dilation
                            base = oy * out_w
                            for ox in range(out_w):
                                xp[n, c, iy, ox * stride + j * dilation] += cols[n, row, base + ox]
                        row += 1
