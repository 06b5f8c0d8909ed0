"""
One continuous kernel, many resolutions
=======================================

A factored SSM kernel is a function of continuous position. Sampling it
at 8x8 or 32x32 only changes the step size. Modes above the coarse grid's
Nyquist rate alias, and bandlimiting removes them.
"""
from pathlib import Path

import numpy as np

from ndssm import assemble_factored, make_factored_spec, rescale_delta, ResolutionPlan
from ndssm.io import write_pgm

out = Path("demo_out")

# a 2-D kernel: 16 Fourier modes per axis, one rank-1 term, step 1/8
spec = make_factored_spec(2, 16, (8, 8), deltas=1 / 8, seed=0, bidirectional=False,
                          method="direct-sample")
fine = rescale_delta(spec, ResolutionPlan((8, 8), (32, 32)))
print("steps at 8x8:", spec.deltas, " at 32x32:", fine.deltas)

# every 4th sample of the fine kernel is the coarse kernel
K8 = assemble_factored(spec).data
K32 = assemble_factored(fine).data
print("max |K8 - K32[::4, ::4]| =", np.abs(K8 - K32[::4, ::4]).max())


def upsample(K, n):
    t_in, t_out = np.arange(K.shape[0]) / K.shape[0], np.arange(n) / n
    K = np.stack([np.interp(t_out, t_in, col) for col in K.T], axis=1)
    return np.stack([np.interp(t_out, t_in, row) for row in K])


# how well does the coarse kernel predict the fine one?
for alpha in (np.inf, 0.5):
    lo = upsample(assemble_factored(spec, alpha).data, 32)
    hi = assemble_factored(fine, alpha).data
    err = np.linalg.norm(lo - hi) / np.linalg.norm(hi)
    print(f"alpha={alpha}: relative error of upsampled 8x8 kernel {err:.3f}")
    write_pgm(out / f"kernel_32x32_alpha{alpha}.pgm", hi)

print("images written to", out.resolve())
