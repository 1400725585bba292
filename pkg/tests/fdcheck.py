"""Central finite-difference checks against autograd, in float64."""

import torch


def _rel_err(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_params(loss_fn, params, count=10, eps=1e-5, seed=0, floor=1e-6):
    """Compare d loss / d theta for ``count`` random scalar entries of ``params``.

    ``loss_fn`` must be deterministic (reseed any noise inside it). Returns the
    worst relative error. Gradients smaller than ``floor`` are compared against
    ``floor`` instead: below it the central difference is dominated by float64
    roundoff (about 1e-16 * |loss| / eps).
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    sizes = torch.tensor([p.numel() for p in params], dtype=torch.float64)
    worst = 0.0
    for _ in range(count):
        i = int(torch.multinomial(sizes, 1, generator=gen))
        j = int(torch.randint(params[i].numel(), (1,), generator=gen))
        flat = params[i].data.view(-1)
        orig = float(flat[j])
        with torch.no_grad():
            flat[j] = orig + eps
            up = float(loss_fn())
            flat[j] = orig - eps
            down = float(loss_fn())
            flat[j] = orig
        fd = (up - down) / (2 * eps)
        g = grads[i]
        analytic = 0.0 if g is None else float(g.reshape(-1)[j])
        worst = max(worst, _rel_err(analytic, fd, floor))
    return worst


def check_input(loss_fn, x, count=10, eps=1e-5, seed=0, floor=1e-6):
    x = x.detach().clone().requires_grad_(True)
    return check_params(lambda: loss_fn(x), [x], count, eps, seed, floor)
