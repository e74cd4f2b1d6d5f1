"""Built-in verification: gradient checks, loss oracles, simulator oracles.

Each check is a named callable returning a float error; it passes when the
error is below its threshold. Failures are reported with the check name so a
broken kernel is identified by the op it belongs to.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .nn import AttentiveProbe, EncoderConfig, MaeConfig, MaskedAutoencoder, PredictorConfig, ProbeConfig
from .rng import make_rng
from .simulate import SystemSpec, simulate_advdiff, simulate_grayscott, simulate_shearvort
from .ssl import JepaModel, VicregWeights, jepa_loss, mae_batch_loss, mae_loss, vicreg_loss

log = logging.getLogger(__name__)

GRAD_TOL = 1e-4
EXACT = np.finfo(float).tiny  # only an error of exactly zero passes


@dataclass
class Check:
    name: str
    kind: str
    fn: Callable[[], float]
    tol: float


@dataclass
class CheckResult:
    name: str
    kind: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.kind}:{self.name} error={self.error:.3e} tol={self.tol:.0e}"


def _rng(tag: str) -> np.random.Generator:
    return make_rng(0, "selftest", tag)


def _x(tag: str, *shape, positive: bool = False) -> np.ndarray:
    r = _rng(tag)
    return r.uniform(0.5, 2.0, shape) if positive else r.normal(size=shape)


def _weighted(y: T.Tensor, tag: str) -> T.Tensor:
    """Scalarize with fixed random weights so every output coordinate matters."""
    return T.tsum(y * _x(tag + "-w", *y.shape))


def _gc(f, x) -> float:
    return T.grad_check(f, x)


def _primitive_checks() -> dict[str, Callable[[], float]]:
    b = _x("b", 3, 4)
    w = _x("w", 4, 5)
    idx = np.array([[2, 0], [1, 1]])
    conv_cases = {
        "conv3d_dense": dict(x=(2, 2, 3, 4, 4), w=(3, 2, 3, 3, 3), stride=1, padding=1, groups=1),
        "conv3d_strided": dict(x=(1, 2, 4, 5, 5), w=(2, 2, 2, 3, 3), stride=(2, 2, 1), padding=(0, 1, 1), groups=1),
        "conv3d_patchify": dict(x=(2, 1, 4, 4, 4), w=(3, 1, 2, 2, 2), stride=2, padding=0, groups=1),
        "conv3d_depthwise": dict(x=(2, 3, 3, 4, 4), w=(3, 1, 3, 3, 3), stride=1, padding=1, groups=3),
        "conv3d_grouped": dict(x=(1, 4, 3, 4, 4), w=(4, 2, 1, 3, 3), stride=1, padding=(0, 1, 1), groups=2),
    }
    checks: dict[str, Callable[[], float]] = {
        "add": lambda: _gc(lambda a: _weighted(T.add(a, b[:1]), "add"), _x("a", 3, 4)),
        "sub": lambda: _gc(lambda a: _weighted(T.sub(b, a), "sub"), _x("a", 3, 4)),
        "mul": lambda: _gc(lambda a: _weighted(T.mul(a, a[:, :1]), "mul"), _x("a", 3, 4)),
        "div": lambda: _gc(lambda a: _weighted(T.div(b, a), "div"), _x("a", 3, 4, positive=True)),
        "power": lambda: _gc(lambda a: _weighted(T.power(a, 2.5), "pow"), _x("a", 3, 4, positive=True)),
        "sqrt": lambda: _gc(lambda a: _weighted(T.sqrt(a), "sqrt"), _x("a", 3, 4, positive=True)),
        "exp": lambda: _gc(lambda a: _weighted(T.exp(a), "exp"), _x("a", 3, 4)),
        "log": lambda: _gc(lambda a: _weighted(T.log(a), "log"), _x("a", 3, 4, positive=True)),
        "relu": lambda: _gc(lambda a: _weighted(T.relu(a), "relu"), _x("a", 3, 4)),
        "gelu": lambda: _gc(lambda a: T.mean(T.gelu(a)), _x("a", 3, 4)),
        "sum": lambda: _gc(lambda a: _weighted(T.tsum(a, axis=1, keepdims=True), "sum"), _x("a", 3, 4)),
        "mean": lambda: _gc(lambda a: _weighted(T.mean(a, axis=0), "mean"), _x("a", 3, 4)),
        "var": lambda: _gc(lambda a: _weighted(T.var(a, axis=0), "var"), _x("a", 3, 4)),
        "softmax": lambda: _gc(lambda a: _weighted(T.softmax(a, axis=-1), "softmax"), _x("a", 3, 4)),
        "mse_loss": lambda: _gc(lambda a: T.mse_loss(a, b), _x("a", 3, 4)),
        "reshape": lambda: _gc(lambda a: _weighted(T.reshape(a, (2, 6)), "reshape"), _x("a", 3, 4)),
        "transpose": lambda: _gc(lambda a: _weighted(T.transpose(a, (1, 0)), "transpose"), _x("a", 3, 4)),
        "broadcast_to": lambda: _gc(lambda a: _weighted(T.broadcast_to(a, (2, 3, 4)), "bcast"), _x("a", 3, 4)),
        "getitem": lambda: _gc(lambda a: _weighted(a[np.array([0, 2, 2]), 1:3], "getitem"), _x("a", 3, 4)),
        "concat": lambda: _gc(lambda a: _weighted(T.concat([a, T.Tensor(b)], axis=1), "concat"), _x("a", 3, 4)),
        "gather_rows": lambda: _gc(lambda a: _weighted(T.gather_rows(a, idx), "gather"), _x("a", 2, 3, 4)),
        "matmul": lambda: _gc(lambda a: _weighted(T.matmul(a, w), "matmul"), _x("a", 2, 3, 4)),
        "linear": lambda: _gc(lambda a: _weighted(T.linear(a, T.Tensor(w.T), T.Tensor(w[0])), "linear"),
                              _x("a", 3, 4)),
        "layer_norm": lambda: _gc(
            lambda a: _weighted(T.layer_norm(a, T.Tensor(_x("g", 3)), T.Tensor(_x("be", 3)), axis=1), "ln"),
            _x("a", 2, 3, 4)),
    }

    def conv_check(case):
        def run() -> float:
            wt = _x("cw", *case["w"])
            bias = _x("cb", case["w"][0])

            def f(a):
                return _weighted(T.conv3d(a, T.Tensor(wt), T.Tensor(bias), case["stride"], case["padding"],
                                          case["groups"]), "conv")

            def g(wp):
                return _weighted(T.conv3d(T.Tensor(_x("cx", *case["x"])), wp, T.Tensor(bias), case["stride"],
                                          case["padding"], case["groups"]), "conv")

            return max(_gc(f, _x("cx", *case["x"])), _gc(g, wt))

        return run

    for name, case in conv_cases.items():
        checks[name] = conv_check(case)
    return checks


def _perturb(module, tag: str, scale: float = 0.3) -> None:
    """Move parameters off their structured initialization (zero biases, unit norms) for a generic check point."""
    for p in module.parameters():
        p.data = p.data + make_rng(0, "perturb", tag, p.name).normal(0.0, scale, p.shape)


def _max_err(report: dict[str, float]) -> float:
    return max(report.values()) if report else 0.0


def tiny_jepa() -> JepaModel:
    enc = EncoderConfig(in_channels=2, context_frames=2, widths=(4, 8), depths=(1, 1), downsample=4, embed_dim=8,
                        kernel_size=3, mlp_ratio=2)
    model = JepaModel(enc, PredictorConfig(embed_dim=8, expansion=2, depth=1, kernel_size=3), seed=0)
    _perturb(model, "jepa")
    return model


def tiny_mae() -> MaskedAutoencoder:
    cfg = MaeConfig(in_channels=1, context_frames=2, patch_size=2, tubelet=2, enc_dim=8, enc_depth=1, enc_heads=2,
                    dec_dim=8, dec_depth=1, dec_heads=2, mlp_ratio=2, mask_ratio=0.5)
    model = MaskedAutoencoder(cfg, seed=0)
    _perturb(model, "mae")
    return model


def tiny_probe() -> AttentiveProbe:
    probe = AttentiveProbe(ProbeConfig(token_dim=6, probe_dim=4, num_queries=2, num_heads=2, num_outputs=2), seed=0)
    _perturb(probe, "probe")
    return probe


def arch_jepa() -> float:
    model = tiny_jepa()
    ctx, tgt = _x("ctx", 4, 2, 2, 8, 8), _x("tgt", 4, 2, 2, 8, 8)
    return _max_err(T.grad_check_params(lambda: jepa_loss(model, ctx, tgt, VicregWeights())[0], model.parameters()))


def arch_mae() -> float:
    model = tiny_mae()
    clips = _x("clip", 2, 1, 2, 4, 4)
    masks = np.array([[[True, False], [True, False]], [[False, True], [True, False]]])
    return _max_err(T.grad_check_params(lambda: mae_batch_loss(model, clips, masks), model.parameters()))


def arch_probe() -> float:
    probe = tiny_probe()
    tokens, y = _x("tok", 3, 5, 6), _x("y", 3, 2)
    return _max_err(T.grad_check_params(lambda: T.mse_loss(probe(T.Tensor(tokens)), y), probe.parameters()))


ARCH_CHECKS = {"jepa_encoder_predictor_vicreg": arch_jepa, "mae": arch_mae, "attentive_probe": arch_probe}


# ---------------------------------------------------------------------------
# loss oracles
# ---------------------------------------------------------------------------


def vicreg_bruteforce(za: np.ndarray, zb: np.ndarray, w: VicregWeights) -> float:
    n, d = za.shape
    s = 0.0
    for i in range(n):
        for j in range(d):
            s += (za[i, j] - zb[i, j]) ** 2
    s /= n

    def var_term(z):
        tot = 0.0
        for j in range(d):
            m = sum(z[i, j] for i in range(n)) / n
            v = sum((z[i, j] - m) ** 2 for i in range(n)) / n
            tot += max(0.0, w.gamma - (v + w.eps) ** 0.5)
        return tot / d

    def cov_term(z):
        means = [sum(z[i, j] for i in range(n)) / n for j in range(d)]
        tot = 0.0
        for a in range(d):
            for b in range(d):
                if a != b:
                    c = sum((z[i, a] - means[a]) * (z[i, b] - means[b]) for i in range(n)) / n
                    tot += c * c
        return tot / d

    return w.lam * s + w.mu * (var_term(za) + var_term(zb)) + w.nu * (cov_term(za) + cov_term(zb))


def mae_bruteforce(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    m = np.broadcast_to(mask, target.shape)
    tot, cnt = 0.0, 0
    for i in np.ndindex(target.shape):
        if m[i]:
            tot += (pred[i] - target[i]) ** 2
            cnt += 1
    return tot / cnt


def vicreg_worked_examples() -> float:
    w = VicregWeights()
    cases = [
        (np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]), 0.0),
        (np.zeros((2, 2)), 79.2),
        (np.array([[0.0, 0.0], [2.0, 0.0]]), 39.6),
    ]
    return max(abs(vicreg_loss(z, z.copy(), w)[1].loss - want) for z, want in cases)


def vicreg_oracle(instances: int = 100) -> float:
    err = 0.0
    for k in range(instances):
        r = make_rng(0, "vicreg-oracle", k)
        n, d = int(r.integers(2, 7)), int(r.integers(1, 6))
        w = VicregWeights(*r.uniform(0.0, 5.0, 3), eps=1e-4, gamma=float(r.uniform(0.5, 2.0)))
        za, zb = r.normal(0.0, r.uniform(0.1, 2.0), (n, d)), r.normal(0.0, 1.0, (n, d))
        err = max(err, abs(vicreg_loss(za, zb, w)[1].loss - vicreg_bruteforce(za, zb, w)))
    return err


def mae_oracle(instances: int = 100) -> float:
    err = 0.0
    for k in range(instances):
        r = make_rng(0, "mae-oracle", k)
        shape = tuple(int(v) for v in r.integers(1, 5, 3))
        pred, target = r.normal(size=shape), r.normal(size=shape)
        mask = r.random(shape[:2] + (1,)) < 0.6
        mask.flat[0] = True
        err = max(err, abs(mae_loss(pred, target, mask).item() - mae_bruteforce(pred, target, mask)))
    return err


# ---------------------------------------------------------------------------
# simulator oracles
# ---------------------------------------------------------------------------


def advdiff_mass_drift() -> float:
    """Worst mass change over 100 solver steps, velocity on and off."""
    spec = SystemSpec("advdiff", 32, 26, dt=0.5, save_every=4, param_names=("velocity", "diffusivity"),
                      param_ranges=((0.0, 1.0), (0.0, 0.2)))
    drift = 0.0
    for params in ({"velocity": 0.0, "diffusivity": 0.2}, {"velocity": 0.8, "diffusivity": 0.05}):
        mass = simulate_advdiff(params, spec, seed=3).frames.sum(axis=(1, 2, 3))
        drift = max(drift, float(np.abs(mass - mass[0]).max()))
    return drift


def grayscott_fixed_point() -> float:
    spec = SystemSpec("grayscott", 32, 6, dt=1.0, save_every=25, param_names=("feed", "kill"),
                      param_ranges=((0.01, 0.08), (0.04, 0.07)), channels=("u", "v"))
    init = np.stack([np.ones((32, 32)), np.zeros((32, 32))])
    worst = 0.0
    for f, k in ((0.01, 0.04), (0.04, 0.06), (0.08, 0.07)):
        frames = simulate_grayscott({"feed": f, "kill": k}, spec, seed=0, initial=init).frames
        worst = max(worst, float(np.abs(frames - frames[0]).max()))
    return worst


def taylor_green_decay(nu: float = 0.02, steps: int = 50, dt: float = 0.1) -> float:
    """Max relative deviation of the vorticity amplitude from exp(-2 nu t) over ``steps`` solver steps."""
    n = 32
    spec = SystemSpec("shearvort", n, steps + 1, dt=dt, save_every=1, param_names=("reynolds", "schmidt"),
                      param_ranges=((1.0, 1e3), (1.0, 1e3)), channels=("vorticity", "tracer"))
    x = np.arange(n) * 2 * np.pi / n
    w0 = np.cos(x)[None, :] * np.cos(x)[:, None]
    frames = simulate_shearvort({"reynolds": 1.0 / nu, "schmidt": 100.0}, spec, seed=0,
                                initial=np.stack([w0, np.zeros_like(w0)])).frames
    amp = np.abs(frames[:, 0]).max(axis=(1, 2))
    t = np.arange(steps + 1) * dt
    return float(np.max(np.abs(amp / amp[0] - np.exp(-2 * nu * t)) / np.exp(-2 * nu * t)))


def all_checks() -> list[Check]:
    checks = [Check(name, "gradcheck", fn, GRAD_TOL) for name, fn in _primitive_checks().items()]
    checks += [Check(name, "gradcheck", fn, GRAD_TOL) for name, fn in ARCH_CHECKS.items()]
    checks += [
        Check("vicreg_worked_examples", "loss", vicreg_worked_examples, 1e-12),
        Check("vicreg_bruteforce", "loss", vicreg_oracle, 1e-10),
        Check("mae_bruteforce", "loss", mae_oracle, 1e-10),
        Check("advdiff_mass", "simulator", advdiff_mass_drift, 1e-8),
        Check("grayscott_fixed_point", "simulator", grayscott_fixed_point, EXACT),
        Check("taylor_green", "simulator", taylor_green_decay, 1e-2),
    ]
    return checks


def run_selftest(only: list[str] | None = None) -> list[CheckResult]:
    results = []
    for check in all_checks():
        if only and check.name not in only and check.kind not in only:
            continue
        t0 = time.perf_counter()
        try:
            err = float(check.fn())
        except Exception as exc:  # a crashing check is a failing check
            log.error("%s:%s raised %s: %s", check.kind, check.name, type(exc).__name__, exc)
            err = float("inf")
        results.append(CheckResult(check.name, check.kind, err, check.tol, time.perf_counter() - t0))
    return results
