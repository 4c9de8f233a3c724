"""Central finite-difference checking for layers and losses.

The numerical gradient treats the checked function as a black box from a
raw float64 array to a scalar, so every analytic backward pass can be
compared against an independent oracle.
"""

from __future__ import annotations

import numpy as np

from . import layers, losses
from .tensor_core import Rng


def numerical_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued `f` at `x`, step `h`."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(floor, |a|+|b|), elementwise; 0 for two empty arrays."""
    if a.size == 0:
        return 0.0
    denom = np.maximum(floor, np.abs(a) + np.abs(b))
    return float(np.max(np.abs(a - b) / denom))


def _rand_weighting(rng: Rng, shape) -> np.ndarray:
    # Fixed random projection turns a tensor-valued layer into a scalar map
    # whose gradient exercises every output element.
    return rng.normal(shape)


def _conv_params(rng: Rng, cin: int, cout: int) -> layers.LayerParams:
    return layers.LayerParams(
        weights=rng.normal((cout, cin, 3, 3), std=0.5),
        bias=rng.normal((cout,), std=0.5),
    )


def _bn_params(rng: Rng, c: int) -> layers.LayerParams:
    return layers.LayerParams(
        bn_gamma=rng.normal((c,), mean=1.0, std=0.2),
        bn_beta=rng.normal((c,), std=0.2),
        bn_running_mean=np.zeros(c),
        bn_running_var=np.ones(c),
    )


def check_conv(seed: int = 7, shape=(1, 2, 5, 5), cout: int = 3) -> dict:
    rng = Rng(seed)
    x = rng.normal(shape)
    p = _conv_params(rng.child(1), shape[1], cout)
    y, cache = layers.conv2d(x, p)
    w_out = _rand_weighting(rng.child(2), y.shape)
    dx, dw, db = layers.conv2d_backward(cache, w_out)

    def f_x(xv):
        return float((layers.conv2d(xv, p)[0] * w_out).sum())

    def f_w(wv):
        return float((layers.conv2d(x, layers.LayerParams(weights=wv, bias=p.bias))[0] * w_out).sum())

    def f_b(bv):
        return float((layers.conv2d(x, layers.LayerParams(weights=p.weights, bias=bv))[0] * w_out).sum())

    return {
        "input": max_rel_error(dx, numerical_grad(f_x, x.copy())),
        "weights": max_rel_error(dw, numerical_grad(f_w, p.weights.copy())),
        "bias": max_rel_error(db, numerical_grad(f_b, p.bias.copy())),
    }


def check_batchnorm(seed: int = 11, shape=(4, 3, 5, 5)) -> dict:
    rng = Rng(seed)
    x = rng.normal(shape, std=1.5)
    p = _bn_params(rng.child(1), shape[1])
    w_out = _rand_weighting(rng.child(2), shape)

    def run(xv, gamma, beta):
        q = layers.LayerParams(
            bn_gamma=gamma, bn_beta=beta,
            bn_running_mean=np.zeros(shape[1]), bn_running_var=np.ones(shape[1]),
            bn_momentum=p.bn_momentum, bn_eps=p.bn_eps,
        )
        return layers.batchnorm(xv, q, "train")

    y, cache = run(x, p.bn_gamma, p.bn_beta)
    dx, dgamma, dbeta = layers.batchnorm_backward(cache, w_out)
    return {
        "input": max_rel_error(
            dx, numerical_grad(lambda xv: float((run(xv, p.bn_gamma, p.bn_beta)[0] * w_out).sum()), x.copy())
        ),
        "gamma": max_rel_error(
            dgamma, numerical_grad(lambda g: float((run(x, g, p.bn_beta)[0] * w_out).sum()), p.bn_gamma.copy())
        ),
        "beta": max_rel_error(
            dbeta, numerical_grad(lambda bt: float((run(x, p.bn_gamma, bt)[0] * w_out).sum()), p.bn_beta.copy())
        ),
    }


def check_relu(seed: int = 2, shape=(2, 3, 4, 4)) -> dict:
    rng = Rng(seed)
    x = rng.normal(shape)
    # keep inputs away from the kink so finite differences are valid
    x = np.where(np.abs(x) < 0.1, 0.5, x)
    w_out = _rand_weighting(rng.child(1), shape)
    _, cache = layers.relu(x)
    dx = layers.relu_backward(cache, w_out)
    num = numerical_grad(lambda xv: float((layers.relu(xv)[0] * w_out).sum()), x.copy())
    return {"input": max_rel_error(dx, num)}


def check_maxpool(seed: int = 3, shape=(2, 2, 6, 6)) -> dict:
    rng = Rng(seed)
    x = rng.normal(shape)
    # perturb away from ties so the argmax is stable under the FD step
    x += rng.child(1).uniform(shape, 0.0, 1e-3)
    w_out = _rand_weighting(rng.child(2), (shape[0], shape[1], shape[2] // 2, shape[3] // 2))
    _, cache = layers.maxpool2(x)
    dx = layers.maxpool2_backward(cache, w_out)
    num = numerical_grad(lambda xv: float((layers.maxpool2(xv)[0] * w_out).sum()), x.copy())
    return {"input": max_rel_error(dx, num)}


def check_bilinear(seed: int = 4, shape=(2, 2, 3, 3)) -> dict:
    rng = Rng(seed)
    x = rng.normal(shape)
    w_out = _rand_weighting(rng.child(1), (shape[0], shape[1], 2 * shape[2], 2 * shape[3]))
    _, cache = layers.bilinear_up2(x)
    dx = layers.bilinear_up2_backward(cache, w_out)
    num = numerical_grad(lambda xv: float((layers.bilinear_up2(xv)[0] * w_out).sum()), x.copy())
    return {"input": max_rel_error(dx, num)}


def check_softmax(seed: int = 5, shape=(2, 4, 3, 3)) -> dict:
    rng = Rng(seed)
    x = rng.normal(shape)
    w_out = _rand_weighting(rng.child(1), shape)
    _, cache = layers.softmax(x)
    dx = layers.softmax_backward(cache, w_out)
    num = numerical_grad(lambda xv: float((layers.softmax(xv)[0] * w_out).sum()), x.copy())
    return {"input": max_rel_error(dx, num)}


def run_layer_checks() -> list[tuple[str, float]]:
    """All layer gradient checks as (name, max relative error) rows."""
    rows = []
    for layer, res in [
        ("conv2d", check_conv()),
        ("batchnorm", check_batchnorm()),
        ("relu", check_relu()),
        ("maxpool2", check_maxpool()),
        ("bilinear_up2", check_bilinear()),
        ("softmax", check_softmax()),
    ]:
        for part, err in res.items():
            rows.append((f"{layer}/{part}", err))
    return rows


def run_loss_checks() -> list[tuple[str, float]]:
    """Gradient checks for every loss kind and Dice mode, including the
    zero-division-guarded degenerate case (a label absent from one image)."""
    rows = []
    seed = 0
    for kind in ("ce", "wce", "sd", "bsd"):
        modes = (None,) if kind in ("ce", "wce") else ("joint", "per_label_mean")
        for mode in modes:
            seed += 1
            cfg = losses.LossConfig(kind=kind) if mode is None else losses.LossConfig(
                kind=kind, dice_label_mode=mode
            )
            rep = losses.loss_gradcheck(cfg, seed=seed)
            name = kind if mode is None else f"{kind}[{mode}]"
            rows.append((f"{name}/prob", rep["max_rel_error"]))
    for kind in ("sd", "bsd"):
        cfg = losses.LossConfig(kind=kind, dice_label_mode="per_label_mean")
        rep = losses.loss_gradcheck(cfg, seed=17, absent_label=True)
        rows.append((f"{kind}[per_label_mean,absent]/prob", rep["max_rel_error"]))
    return rows


def check_model_end_to_end(seed: int = 23) -> float:
    """Finite-difference check of the whole network: every trainable
    parameter of a tiny model (depth 1, 2 base channels, 8x8 patches,
    batch of 2) against the chained loss -> softmax -> layers backward."""
    from . import model  # deferred: model imports layers, not gradcheck

    cfg = model.ModelConfig(num_labels=3, depth=1, base_channels=2, patch_size=8)
    m = model.build_model(cfg, Rng(seed))
    rng = Rng(seed + 1)
    x = rng.normal((2, 1, 8, 8))
    labels = rng.child(1).integers(0, cfg.num_labels, (2, 8, 8))
    r = np.zeros((2, cfg.num_labels, 8, 8))
    np.put_along_axis(r, labels[:, None], 1.0, axis=1)
    lcfg = losses.LossConfig(kind="bsd", dice_label_mode="per_label_mean")

    def run():
        # Pin running stats so repeated train-mode forwards see one state.
        saved = {n: (u.bn_running_mean.copy(), u.bn_running_var.copy())
                 for n, u in m.units.items()}
        p, caches = model.forward(m, x, mode="train")
        for n, u in m.units.items():
            u.bn_running_mean[:], u.bn_running_var[:] = saved[n]
        return p, caches

    p, caches = run()
    res = losses.compute_loss(p, r, lcfg)
    grads = model.backward(m, caches, res.grad_p)

    worst = 0.0
    table = m.param_table()
    for name, arr in table.items():
        def f(_v, _name=name):
            pv, _ = run()
            return losses.compute_loss(pv, r, lcfg).value

        num = numerical_grad(f, arr, h=1e-5)
        worst = max(worst, max_rel_error(grads[name], num, floor=1e-6))
    return worst
