"""Reference statistics recomputed from fixed counts (matched pairs, intervals, detector, bound)."""
import mpmath

from lpsr.evaluation import Confusion, bootstrap_ci, clopper_pearson, confusion_metrics, mcnemar
from lpsr.steering import concentration_bound


def main():
    print("McNemar (continuity-corrected)")
    for label, b, c in (("comparison 1", 80, 4), ("comparison 2", 141, 20)):
        m = mcnemar(b, c)
        print(f"  {label:16s} b={b:3d} c={c:3d}  chi2={m.chi2:.2f}  p={m.p_str}")
    print("Clopper-Pearson 95%")
    for k, n in ((5, 60), (1, 60)):
        lo, hi = clopper_pearson(k, n)
        print(f"  {k}/{n}  [{lo:.3f}, {hi:.3f}]")
    m = confusion_metrics(Confusion(40, 11, 110, 39))
    print("detector (tp=40 fp=11 fn=110 tn=39): " + "  ".join(f"{k} {v:.3f}" for k, v in m.items()))
    lo, hi = bootstrap_ci([True] * 144 + [False] * 356, seed=0)
    print(f"bootstrap 95% at 144/500: [{lo:.3f}, {hi:.3f}]")
    for d in (64, 4096):
        b = concentration_bound(d, 0.6)
        print(f"concentration d={d}: exponent {b.exponent:.2f}, bound {mpf_str(b.bound)}")


def mpf_str(x):
    return mpmath.nstr(x, 4)


if __name__ == "__main__":
    main()
