import numpy as np

from linsplit import tensor as T

from linsplit.gradcheck import numerical_gradient, relative_error


def conv2d_loops(x, w, stride=1, padding=0):
    """Direct nested-loop cross-correlation used as an oracle."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for f in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[b, ch, i * stride + di, j * stride + dj] * w[f, ch, di, dj]
                    out[b, f, i, j] = acc
    return out


def check_grads(build_loss, tensors, tol=1e-4, eps=1e-5):
    """Compare backprop against central differences for every tensor in ``tensors``.

    ``build_loss`` must rebuild the graph from the tensors' current data.
    Returns the worst relative error.
    """
    for t in tensors:
        t.grad = None
    build_loss().backward()
    worst = 0.0
    for t in tensors:
        numeric = numerical_gradient(lambda: build_loss().item(), t.data, eps)
        err = relative_error(t.grad, numeric)
        worst = max(worst, err)
        assert err < tol, f"{t.name or t.shape}: relative error {err:.2e}"
    return worst



def force_masks(net, pattern=None, rng=None):
    """Set every mask module so its mask1 follows ``pattern`` (alternating by default)."""
    for mod in net.mask_modules:
        bits = np.arange(mod.channels) % 2 == 0 if pattern is None else np.asarray(pattern, bool)
        if rng is not None:
            bits = rng.random(mod.channels) < 0.5
            bits[0] = True
        mod.w2.data[...] = 0.0
        mod.b2.data = np.where(bits, 2.0, -2.0)
    return net


def perturb(net, rng, scale=0.1):
    """Add noise to every parameter so zero biases don't hide bugs."""
    for _, p in net.named_parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)
    return net


def network_gradcheck(net, x, y, tol=1e-4):
    """Finite-difference every non-mask parameter with masks held as constants."""
    net.zero_grad()
    T.softmax_cross_entropy(net(x, detach_masks=True), y).backward()
    loss = lambda: T.softmax_cross_entropy(net(x, detach_masks=True), y).item()
    mask_ids = {id(p) for p in net.mask_parameters()}
    worst = 0.0
    for name, p in net.named_parameters():
        if id(p) in mask_ids:
            continue
        err = relative_error(p.grad, numerical_gradient(loss, p.data))
        assert err < tol, f"{name}: {err:.2e}"
        worst = max(worst, err)
    return worst
