"""Highlighting versus covering faces and words on a semantic brain.

The semantic brain gives face-roi and word-roi positive weight on the visible
area of their category. Covering the object should lower the matching ROI,
while a bounding box leaves the object visible.

    python3 demos/selectivity.py --images 1200
"""

import argparse

from cortexlens.analysis import selectivity_probe
from cortexlens.ensemble import partition_folds, train_ensemble
from cortexlens.synthgen import SynthConfig, generate_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--images", type=int, default=1200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds, _ = generate_dataset(SynthConfig(n_images=args.images, n_vertices=300, mode="semantic", seed=args.seed))
    n_train = int(0.85 * len(ds))
    ensemble = train_ensemble(ds, partition_folds(ds.image_ids[:n_train], 5, args.seed))
    probe = ds.image_ids[n_train:]
    for category in ("face", "word"):
        rep = selectivity_probe(ensemble, ds, category, ["face-roi", "word-roi"], image_ids=probe)
        print(f"\n{category} objects in {rep.n_images} held-out images")
        print(f"{'roi':10}{'condition':13}{'LH mean':>9}{'LH delta':>10}{'p':>10}")
        for row in rep.rows:
            e = row.lh
            print(f"{row.roi:10}{row.condition:13}{e.mean_activation:9.3f}{e.delta:10.3f}{e.ttest.p:10.1e}")


if __name__ == "__main__":
    main()
