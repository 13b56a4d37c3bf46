"""Train one encoder and a fold ensemble on a matched synthetic brain.

The matched brain is linear in the encoder's own features, so the only gap
between prediction and measurement is the injected noise. The script prints
held-out accuracy against the noise ceiling and the three-way SD split of the
ensemble's predictions.

    python3 demos/oracle_recovery.py --images 800 --size 96
"""

import argparse

import numpy as np

from cortexlens.encoder import dataset_features, pearson_per_vertex, train_encoder
from cortexlens.ensemble import partition_folds, predict_ensemble, train_ensemble, uncertainty_decomposition
from cortexlens.synthgen import SynthConfig, generate_dataset, noise_ceiling


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--images", type=int, default=800)
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--vertices", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds, brain = generate_dataset(SynthConfig(n_images=args.images, image_size=(args.size, args.size),
                                             n_vertices=args.vertices, seed=args.seed))
    n_train = int(0.9 * len(ds))
    train, held = ds.image_ids[:n_train], ds.image_ids[n_train:]
    ceiling = noise_ceiling(brain, ds)["mean"]

    enc = train_encoder(ds, train, seed=args.seed)
    lh, rh = enc.predict_features(dataset_features(ds, enc.config, held))
    r = np.mean([pearson_per_vertex(lh, ds.responses("lh", held))[1],
                 pearson_per_vertex(rh, ds.responses("rh", held))[1]])
    print(f"single encoder: k={enc.pca.k} lambda={enc.lam:g}")
    print(f"held-out Pearson {r:.3f}, noise ceiling {ceiling:.3f}, ratio {r / ceiling:.3f}")

    ensemble = train_ensemble(ds, partition_folds(train, 5, args.seed), base_seed=args.seed)
    report = uncertainty_decomposition(predict_ensemble(ensemble, ds, held), ds.atlas)
    print("\nensemble of 5 disjoint-fold encoders, population SDs on the held-out images")
    print(f"{'hemi':5}{'roi':12}{'total':>9}{'images':>9}{'folds':>9}")
    for hemi, roi, total, images, folds in report.rows():
        print(f"{hemi:5}{roi:12}{total:9.3f}{images:9.3f}{folds:9.3f}")


if __name__ == "__main__":
    main()
