"""Central finite-difference oracle shared by the gradient tests."""
import numpy as np
import torch


def sample_coords(net, n, rng):
    named = list(net.named_parameters())
    sizes = np.array([p.numel() for _, p in named])
    picks = rng.choice(sizes.sum(), size=n, replace=False)
    bounds = np.cumsum(sizes)
    coords = []
    for flat in picks:
        i = int(np.searchsorted(bounds, flat, side="right"))
        offset = int(flat - (bounds[i - 1] if i else 0))
        coords.append((named[i][0], offset))
    return coords


@torch.no_grad()
def central_difference(net, loss_of_net, name, offset, h=1e-4):
    p = dict(net.named_parameters())[name]
    idx = np.unravel_index(offset, tuple(p.shape))
    old = p[idx].item()
    p[idx] = old + h
    up = float(loss_of_net(net))
    p[idx] = old - h
    down = float(loss_of_net(net))
    p[idx] = old
    return (up - down) / (2 * h)


def relative_errors(net, loss_of_net, grads, coords, h=1e-4):
    errs = []
    for name, offset in coords:
        g = grads[name]
        analytic = g[np.unravel_index(offset, tuple(g.shape))].item()
        numeric = central_difference(net, loss_of_net, name, offset, h)
        scale = max(abs(analytic), abs(numeric))
        errs.append(0.0 if scale < 1e-10 else abs(analytic - numeric) / scale)
    return np.array(errs)
