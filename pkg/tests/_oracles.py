"""Independent scalar reference implementations used by the tests.

Everything here is written as plain loops over numpy scalars, sharing no
code path with the package, so agreement is meaningful evidence.
"""
import numpy as np


def conv2d_oracle(x, w, b, stride, padding, dilation):
    """Scalar cross-correlation over a zero-padded input."""
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, c_out, oh, ow), dtype=np.float64)
    for ni in range(n):
        for co in range(c_out):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ci in range(c_in):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = oy * stride - padding + ky * dilation
                                ix = ox * stride - padding + kx * dilation
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += float(x[ni, ci, iy, ix]) * float(w[co, ci, ky, kx])
                    if b is not None:
                        acc += float(b[co])
                    out[ni, co, oy, ox] = acc
    return out


def batch_norm_oracle(x, gamma, beta, eps):
    """Training-mode normalization: biased variance over all axes but 1."""
    axes = (0,) + tuple(range(2, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
    shape = [1] * x.ndim
    shape[1] = -1
    return (x - mu) / np.sqrt(var + eps) * gamma.reshape(shape) + beta.reshape(shape)


def _linp(p):
    return p.weight.value.data, p.bias.value.data


def _convp(p):
    return (p.weight.value.data, None if p.bias is None else p.bias.value.data,
            p.stride, p.padding, p.dilation)


def channel_logits_oracle(x, p):
    n, c = x.shape[:2]
    w0, b0 = _linp(p.fc_reduce)
    w1, b1 = _linp(p.fc_expand)
    mid = w0.shape[0]
    logits = np.zeros((n, c), dtype=np.float64)
    for ni in range(n):
        pooled = [float(x[ni, ci].mean()) for ci in range(c)]
        hidden = []
        for j in range(mid):
            acc = float(b0[j])
            for ci in range(c):
                acc += float(w0[j, ci]) * pooled[ci]
            hidden.append(max(acc, 0.0))
        for ci in range(c):
            acc = float(b1[ci])
            for j in range(mid):
                acc += float(w1[ci, j]) * hidden[j]
            logits[ni, ci] = acc
    logits = batch_norm_oracle(logits, p.bn.gamma.value.data, p.bn.beta.value.data,
                               p.bn.eps)
    return logits.reshape(n, c, 1, 1)


def spatial_logits_oracle(x, p):
    h = np.maximum(conv2d_oracle(x, *_convp(p.conv_reduce)), 0.0)
    h = np.maximum(conv2d_oracle(h, *_convp(p.conv_ctx1)), 0.0)
    h = np.maximum(conv2d_oracle(h, *_convp(p.conv_ctx2)), 0.0)
    h = conv2d_oracle(h, *_convp(p.conv_collapse))
    return batch_norm_oracle(h, p.bn.gamma.value.data, p.bn.beta.value.data, p.bn.eps)


def sigmoid_oracle(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))


def bam_oracle(x, p, cfg):
    """Full attention block: returns (refined, gate) as float64 arrays."""
    mc = channel_logits_oracle(x, p.channel) if p.channel is not None else None
    ms = spatial_logits_oracle(x, p.spatial) if p.spatial is not None else None
    if mc is not None and ms is not None:
        if cfg.combine == "sum":
            merged = mc + ms
        elif cfg.combine == "prod":
            merged = mc * ms
        else:
            merged = np.maximum(mc, ms)
    else:
        merged = mc if mc is not None else ms
    gate = np.broadcast_to(sigmoid_oracle(merged), x.shape)
    return x + x * gate, gate


class ForcedRng:
    """Stands in for a Generator, replaying a scripted list of draws."""

    def __init__(self, draws):
        self.draws = list(draws)

    def integers(self, lo, hi, size=None):
        assert size is None, "scripted rng only supports scalar draws"
        v = self.draws.pop(0)
        assert lo <= v < hi, f"scripted draw {v} outside [{lo}, {hi})"
        return v
