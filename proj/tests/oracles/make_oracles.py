"""Regenerates tests/unit/oracle_data.hpp from independent references
(scikit-image SSIM, mpmath, exact rationals)."""

from fractions import Fraction
import pathlib

import mpmath
import numpy as np
from skimage.metrics import structural_similarity

mpmath.mp.dps = 40


def lcg(seed, n):
    x = seed & 0x7FFFFFFF
    out = []
    for _ in range(n):
        x = (1103515245 * x + 12345) % (1 << 31)
        out.append((x >> 16) & 255)
    return out


def ssim_pair(i):
    side = 64
    block = 1 + (i % 4) * 3
    cells = (side + block - 1) // block
    base = lcg(17 + i, cells * cells)
    noise = lcg(1000 + i, side * side)
    a = np.zeros((side, side))
    b = np.zeros((side, side))
    for y in range(side):
        for x in range(side):
            av = base[(y // block) * cells + (x // block)]
            nv = noise[y * side + x]
            a[y, x] = av
            b[y, x] = (av * (20 - i) + nv * i) // 20
    return a, b


def ssim_values():
    vals = []
    for i in range(20):
        a, b = ssim_pair(i)
        vals.append(structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                                          use_sample_covariance=False, data_range=255))
    return vals


SIGMOID_POINTS = ["-50", "-10", "-1", "-0.15", "0", "1e-8", "0.02", "0.15", "1", "10", "50"]


def sigmoid(t):
    return 1 / (1 + mpmath.exp(-mpmath.mpf(t)))


def variance_lists():
    lists = []
    for i in range(6):
        raw = lcg(300 + i, 10 + 7 * i)
        lists.append([v / 256.0 for v in raw])
    lists.append([0.0, 1.0])
    lists.append([1e9 + 0.25, 1e9 + 0.5, 1e9 + 0.75])
    return lists


def exact_variance(xs):
    fs = [Fraction(x) for x in xs]
    m = sum(fs) / len(fs)
    return sum((f - m) ** 2 for f in fs) / len(fs)


def main():
    lines = ["// Generated by tests/oracles/make_oracles.py; do not edit.", "#pragma once", "",
             "#include <array>", "#include <vector>", "", "namespace oracle {", ""]
    lines.append("inline constexpr std::array<double, 20> kSsim = {")
    lines += [f"    {float(v)!r}," for v in ssim_values()]
    lines.append("};\n")
    lines.append("struct SigmoidPoint {\n  double t;\n  double value;\n};\n")
    lines.append("inline constexpr SigmoidPoint kSigmoid[] = {")
    for t in SIGMOID_POINTS:
        lines.append(f"    {{{t}, {mpmath.nstr(sigmoid(t), 25)}}},")
    lines.append("};\n")
    lines.append("struct VarianceCase {\n  std::vector<double> xs;\n  double value;\n};\n")
    lines.append("inline const std::vector<VarianceCase> kVariance = {")
    for xs in variance_lists():
        body = ", ".join(repr(x) for x in xs)
        v = exact_variance(xs)
        lines.append(f"    {{{{{body}}}, {mpmath.nstr(mpmath.mpf(v.numerator) / v.denominator, 25)}}},")
    lines.append("};\n")
    lines.append("}  // namespace oracle")
    out = pathlib.Path(__file__).resolve().parent.parent / "unit" / "oracle_data.hpp"
    out.write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
