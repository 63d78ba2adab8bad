"""Low-frequency energy fraction of each corruption's luminance delta on the shapes test set.

    python scripts/fourier_report.py --out runs/fourier
"""
import argparse

import numpy as np

from gearlab.analyze import delta_spectrum
from gearlab.corrupt import corrupt_dataset, default_suite
from gearlab.data import gen_shapes


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-test", type=int, default=600)
    ap.add_argument("--out", default="runs/fourier")
    a = ap.parse_args()
    _, test = gen_shapes(a.seed, 3, a.n_test)
    white = np.random.default_rng(a.seed).normal(0, 0.1, size=test.images.shape)
    ref = delta_spectrum(np.zeros_like(white), white)
    print(f"{'white_noise_reference':24s} {ref.low_freq_fraction:.3f}")
    for c in default_suite():
        prof = delta_spectrum(test.images, corrupt_dataset(test, c, a.seed).images)
        prof.save(f"{a.out}/{c.name}")
        print(f"{c.name:24s} {prof.low_freq_fraction:.3f}  energy {prof.spatial_energy:.3g}")


if __name__ == "__main__":
    main()
