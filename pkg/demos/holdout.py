"""Seen versus not-seen training for one category.

Both configurations train on the same number of images. The not-seen set
contains no image of the category; the seen set keeps every category image
except the 100 test images. The table mirrors the holdout CSV layout.

    python3 demos/holdout.py --category phone
"""

import argparse

from cortexlens.holdout import run_holdout_experiment
from cortexlens.synthgen import SynthConfig, generate_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--category", default="phone", choices=("cat", "dog", "phone", "tv", "face", "word"))
    ap.add_argument("--images", type=int, default=1200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds, _ = generate_dataset(SynthConfig(n_images=args.images, n_vertices=300, seed=args.seed))
    rep = run_holdout_experiment(ds, args.category, seed=args.seed)
    split = rep.split
    print(f"{args.category}: {split.total_category_images} images depict it; "
          f"{len(split.seen_train)} training images per configuration, {len(split.test_ids)} test")
    print(f"{'config':10}{'MAE LH':>9}{'MAE RH':>9}{'SD img':>9}{'SD fold':>9}{'corr':>8}")
    for name, row in rep.rows.items():
        print(f"{name:10}{row.mae['lh']:9.3f}{row.mae['rh']:9.3f}{row.sd_across_images['lh']:9.3f}"
              f"{row.sd_across_folds['lh']:9.3f}{row.corr:8.3f}")
    print(f"|corr gap| = {rep.corr_gap:.4f}")


if __name__ == "__main__":
    main()
