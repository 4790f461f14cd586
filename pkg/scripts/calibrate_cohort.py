"""Compare a generated cohort's LOS histogram and demographics to reference targets.

    python3 scripts/calibrate_cohort.py --n 2077 --seed 10
"""
import argparse

from stayline.cohort import SynthConfig, cohort_summary, generate_cohort

# day -> share of patients at the three histogram peaks
TARGET_PEAKS = {1: 0.21, 3: 0.17, 5: 0.12}
TARGET_MALE = 0.60


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2077)
    ap.add_argument("--seed", type=int, default=10)
    args = ap.parse_args()

    table = generate_cohort(SynthConfig(n_patients=args.n, seed=args.seed, noise_sd=0.0, base_days="fig1"))
    s = cohort_summary(table)
    print("day  share   target")
    for day in sorted(s.los_histogram):
        target = TARGET_PEAKS.get(day)
        print(f"{day:3d}  {s.fraction(day):.3f}" + (f"   {target:.3f}" if target else ""))
    male = s.sex.get("male", 0) / s.n
    print(f"male {male:.3f} (target {TARGET_MALE:.3f}), outliers {s.outliers}")
    print("age bands", s.age_bands)
    print("race", s.race)


if __name__ == "__main__":
    main()
