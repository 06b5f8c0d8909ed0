"""
Where does an FFT convolution spend its time?
=============================================
"""
from ndssm import profile_conv

# a small stand-in for the 64 x 224 x 224 preset used by `ndssm bench`
rep = profile_conv((8, 64, 64), (127, 127), repetitions=3)
for stage, frac in rep.stage_fractions.items():
    print(f"{stage:14s} {100 * frac:5.1f}%  ({rep.stage_times_ms[stage]:.2f} ms)")
print(f"FFT pipeline share: {100 * rep.fft_pipeline_share:.1f}%")
