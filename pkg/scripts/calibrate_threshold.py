"""Calibrate the learnability threshold against a logistic-probe oracle.

A multinomial logistic regression (scikit-learn) is fitted on the raw ROI
patches and global flow of each seed's training split and scored on the
test split. The network threshold is a fixed fraction of the mean probe UF1,
rounded down to two decimals, and written to calibration/learnability.json.

Usage: python scripts/calibrate_threshold.py
"""
import json
import math
from pathlib import Path

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import f1_score

from fedpsyau import presets
from fedpsyau.studies import preset_split

FRACTION = 0.75
OUT = Path(__file__).resolve().parents[1] / "calibration" / "learnability.json"


def features(ds):
    return np.concatenate([ds.roi.reshape(len(ds), -1), ds.of.reshape(len(ds), -1)], axis=1)


def probe_scores(seeds) -> list[float]:
    scores = []
    for seed in seeds:
        train, test = preset_split(seed)
        clf = LogisticRegression(max_iter=5000).fit(features(train), train.emotion)
        scores.append(float(f1_score(test.emotion, clf.predict(features(test)), average="macro")))
    return scores


def main():
    seeds = list(presets.SEEDS)
    scores = probe_scores(seeds)
    mean = float(np.mean(scores))
    threshold = math.floor(FRACTION * mean * 100) / 100
    record = {
        "generator": {"noise": presets.GENERATOR.noise, "au_flip": presets.GENERATOR.au_flip,
                      "n_subjects": presets.GENERATOR.n_subjects, "of_size": presets.GENERATOR.of_size},
        "seeds": seeds,
        "probe_uf1": scores,
        "probe_uf1_mean": mean,
        "fraction": FRACTION,
        "threshold": threshold,
    }
    OUT.parent.mkdir(exist_ok=True)
    OUT.write_text(json.dumps(record, indent=2) + "\n")
    print(f"probe UF1 per seed {np.round(scores, 4).tolist()}, mean {mean:.4f}")
    print(f"threshold = floor({FRACTION} x {mean:.4f}) = {threshold:.2f} -> {OUT}")


if __name__ == "__main__":
    main()
