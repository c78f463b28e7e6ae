"""How adaptive projection guidance reshapes the classifier-free guidance step.

Run with ``python3 demos/guidance_geometry.py``; it needs no trained model.

A toy conditional and unconditional velocity pair is fed through both
guidance rules. We split the guidance residual into the part parallel to
the conditional prediction and the part orthogonal to it, then watch what
each rule does to those two parts as the scale grows.
"""

import torch

from wavdit import sampler
from wavdit.sampler import GuidanceState, SamplerConfig

torch.manual_seed(0)
D, T = 8, 32
v_cond = torch.randn(D, T, dtype=torch.float64)
# the unconditional prediction shares most of the conditional direction
v_uncond = 0.6 * v_cond + 0.4 * torch.randn(D, T, dtype=torch.float64)
z_t = torch.randn(D, T, dtype=torch.float64)
t = 0.5

delta = v_cond - v_uncond
par, orth = sampler.project(delta, v_cond)
print(f"guidance residual: |parallel| = {par.norm():.3f}, |orthogonal| = {orth.norm():.3f}")
print()
print(f"{'alpha':>6} {'|v_cfg|':>9} {'|v_apg|':>9} {'cos(v_cfg, v_c)':>16} {'cos(v_apg, v_c)':>16}")


def cos(a, b):
    return float((a * b).sum() / (a.norm() * b.norm()))


for alpha in (0.0, 1.0, 2.0, 4.0, 8.0):
    v_cfg = sampler.cfg_velocity(v_cond, v_uncond, alpha)
    v_apg = sampler.apg_velocity(v_cond, v_uncond, z_t, t,
                                 SamplerConfig(alpha=alpha, eta=0.5, beta=0.0), GuidanceState())
    print(f"{alpha:6.1f} {v_cfg.norm():9.3f} {v_apg.norm():9.3f} {cos(v_cfg, v_cond):16.4f} {cos(v_apg, v_cond):16.4f}")

print()
print("With eta equal to alpha and no momentum the two rules coincide:")
same = SamplerConfig(alpha=3.0, eta=3.0, beta=0.0)
gap = sampler.apg_velocity(v_cond, v_uncond, z_t, t, same, GuidanceState()) - sampler.cfg_velocity(v_cond, v_uncond, 3.0)
print(f"  max |apg - cfg| = {gap.abs().max():.2e}")

print()
print("Negative momentum subtracts a fraction of the previous residual each step:")
state = GuidanceState()
cfg = SamplerConfig(alpha=4.0, eta=0.5, beta=-0.3)
for step in range(4):
    sampler.apg_velocity(v_cond, v_uncond, z_t, t, cfg, state)
    print(f"  step {step}: |accumulated residual| = {state.momentum.norm():.3f} (fresh residual {delta.norm():.3f})")
