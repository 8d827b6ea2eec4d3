import numpy as np

from transpar.model import ROLES, Network, forward_uda, store_gradients

F, C, D = ROLES


def uda_gradient_error(net: Network, xs, ys, xt, beta=1.0, alpha=0.1, eps=1e-5) -> float:
    """Worst relative error of the reversal-layer gradients against central differences.

    Gradient reversal means the backward pass is not the derivative of the
    forward scalar: extractor and classifier parameters see
    ``d(L_s + alpha L_ent - beta L_d)``, discriminator parameters see
    ``d(L_s + alpha L_ent + L_d)``. Each is checked against the matching
    forward-only objective.
    """
    out = forward_uda(net, xs, ys, xt, beta=beta, alpha=alpha)
    store_gradients(net, out)
    analytic = net.grad_flat.copy()

    def objective(sign_dom):
        l_s, l_ent, l_d = forward_uda(net, xs, ys, xt, beta=beta, alpha=alpha).losses
        return l_s + alpha * l_ent + sign_dom * l_d

    d_slice = net.role_slices[D]
    worst = 0.0
    for i in range(net.flat.size):
        sign = 1.0 if d_slice.start <= i < d_slice.stop else -beta
        orig = net.flat[i]
        net.flat[i] = orig + eps
        up = objective(sign)
        net.flat[i] = orig - eps
        down = objective(sign)
        net.flat[i] = orig
        numeric = (up - down) / (2 * eps)
        a = analytic[i]
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst


# ---------------------------------------------------------------- acceptance lines

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> bool:
    """Store one criterion outcome, echo it, and return ``passed``."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} -- {detail}"
    _ACCEPTANCE[number] = (passed, line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number][1])
