"""Finite-difference verification of the full model's loss gradients (double precision)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .conditioning import EventSpec, FeatureConfig, make_bundle, stack_bundles
from .model import ModelConfig, init_params
from .trainer import batch_loss

TOLERANCE = 1e-3
FD_STEP = 1e-5


def toy_model_config() -> ModelConfig:
    return ModelConfig(d=16, heads=2, L_joint=1, L_fused=1, D=4, n_clip=4, n_sync=4, d_v=8, d_s=8, d_t=8, freq_dim=16)


@dataclass
class GradcheckReport:
    errors: dict = field(default_factory=dict)  # parameter group -> max relative error
    checked: dict = field(default_factory=dict)  # parameter group -> coordinates checked
    tolerance: float = TOLERANCE

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def lines(self) -> list[str]:
        out = [f"{name:28s} n={self.checked[name]:5d} max_rel_err={err:.3e}" for name, err in sorted(self.errors.items())]
        out.append(f"worst {self.worst:.3e} tolerance {self.tolerance:.0e} -> {'PASS' if self.passed else 'FAIL'}")
        return out


def group_of(name: str) -> str:
    """Parameter group: 'joint0.audio.qkv_w' -> 'joint.qkv_w', 'audio_in.w' -> 'audio_in'."""
    head = name.split(".")[0]
    leaf = name.rsplit(".", 1)[-1]
    if head.startswith("joint"):
        return f"joint.{leaf}"
    if head.startswith("fused"):
        return f"fused.{leaf}"
    return head


def make_problem(cfg: ModelConfig, C: int = 8, batch: int = 2, seed: int = 0):
    """Random double-precision parameters (AdaLN gates perturbed off zero) and one fixed batch."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed=seed, dtype=np.float64)
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
    fc = FeatureConfig(num_classes=3, n_clip=cfg.n_clip, n_sync=cfg.n_sync, d_v=cfg.d_v, d_s=cfg.d_s, d_t=cfg.d_t, seed=seed)
    specs = [EventSpec(i % 3, (0.3 * (i + 1),), 1.0) for i in range(batch)]
    conds = stack_bundles([make_bundle(s, fc) for s in specs])
    # exercise both null pathways: first item drops visual, last drops text
    conds.visual_null[0] = True
    conds.text_null[-1] = True
    x1 = rng.standard_normal((batch, C, cfg.D))
    x0 = rng.standard_normal((batch, C, cfg.D))
    t = rng.uniform(0.2, 0.8, size=batch)
    return params, (x1, conds, x0, t)


def run_gradcheck(cfg: ModelConfig | None = None, C: int = 8, per_tensor: int = 16, seed: int = 0,
                  loss_mode: str = "v_loss", tolerance: float = TOLERANCE, grad_hook=None) -> GradcheckReport:
    """Compare reverse-mode gradients with central differences.

    ``per_tensor`` coordinates are drawn from each parameter tensor (0 means
    every coordinate). ``grad_hook(grads) -> grads`` lets tests corrupt the
    analytic side to check that the harness fails.
    """
    cfg = cfg or toy_model_config()
    params, (x1, conds, x0, t) = make_problem(cfg, C, seed=seed)

    def fn(p):
        return batch_loss(p, cfg, x1, conds, x0, t, loss_mode)

    _, grads = nx.value_and_grad(fn, params)
    if grad_hook is not None:
        grads = grad_hook(grads)
    rng = np.random.default_rng(seed + 1)
    report = GradcheckReport(tolerance=tolerance)
    for name in sorted(params):
        shape = params[name].shape
        coords = list(np.ndindex(shape))
        if per_tensor and len(coords) > per_tensor:
            pick = rng.choice(len(coords), size=per_tensor, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        numeric = nx.finite_difference(lambda p: float(nx._data(fn(p))), params, name, coords, FD_STEP)
        analytic = [grads[name][c] for c in coords]
        err = nx.relative_error(analytic, [numeric[c] for c in coords])
        g = group_of(name)
        report.errors[g] = max(report.errors.get(g, 0.0), err)
        report.checked[g] = report.checked.get(g, 0) + len(coords)
    return report
