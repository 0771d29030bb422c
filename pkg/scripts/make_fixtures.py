"""Regenerate the committed fixtures under ``fixtures/``.

* ``set92`` and ``set118``: synthetic stimulus sets (PPM images with labels)
  plus a 15-subject ``brain.rdma`` holding EVC and IT RDMs.
* ``golden``: a small scoring case (model RDMs plus brain RDMs) and the
  expected score report, computed with ``scipy.stats`` as an oracle that
  shares no code with the package.

Run from the repository root: ``python scripts/make_fixtures.py``.
"""

import json
from pathlib import Path

import numpy as np
from scipy import stats

from rsaforge.fixtures import SET_SIZES, make_subject_rdms, write_stimulus_set
from rsaforge.tensor import load_archive, load_tensor, save_archive, save_tensor

ROOT = Path(__file__).resolve().parent.parent / "fixtures"
SEEDS = {"set92": 92, "set118": 118}


def corr_distance(acts):
    d = (1.0 - np.corrcoef(acts)).clip(0, 2)
    np.fill_diagonal(d, 0.0)
    return (d + d.T) / 2


def oracle_report(model_rdms, brain):
    iu = lambda m: m[np.triu_indices(m.shape[-1], 1)].astype(np.float64)
    rho = lambda a, b: float(stats.spearmanr(a, b)[0])
    regions, scores = {}, {}
    for region, subj in brain.items():
        tris = [iu(s) for s in subj]
        lower = [rho(t, np.mean([u for j, u in enumerate(tris) if j != i], axis=0))
                 for i, t in enumerate(tris)]
        upper = [rho(t, np.mean(tris, axis=0)) for t in tris]
        regions[region] = {"nc_lower": float(np.mean(np.square(lower))),
                           "nc_upper": float(np.mean(np.square(upper)))}
    for layer, rdm in model_rdms.items():
        scores[layer] = {}
        for region, subj in brain.items():
            r = [rho(iu(rdm), iu(s)) for s in subj]
            r2 = float(np.mean(np.square(r)))
            scores[layer][region] = {"per_subject_r": r, "r2_mean": r2,
                                     "normalized_pct": 100 * r2 / regions[region]["nc_lower"]}
    return {"regions": regions, "scores": scores}


def make_golden(directory: Path, n=10, n_subjects=4, seed=2019):
    rng = np.random.default_rng(seed)
    rdm_dir = directory / "rdms"
    rdm_dir.mkdir(parents=True, exist_ok=True)
    base = rng.standard_normal((n, 6))
    layers = {"stage1": base @ rng.standard_normal((6, 30)) + rng.standard_normal((n, 30)),
              "avgpool": base @ rng.standard_normal((6, 20)) + 2 * rng.standard_normal((n, 20)),
              "fc": rng.standard_normal((n, 8))}
    for name, acts in layers.items():
        save_tensor(rdm_dir / f"{name}.rdmt", corr_distance(acts).astype(np.float32), name)
    latent = corr_distance(base)
    # round to a coarse grid so the subject RDMs contain ties
    brain = {region: np.round(make_subject_rdms(latent, n_subjects, noise, seed + k), 1)
             for k, (region, noise) in enumerate([("EVC", 0.2), ("IT", 0.4)])}
    save_archive(directory / "brain.rdma", {k: v.astype(np.float32) for k, v in brain.items()})
    # the oracle reads back exactly what was written
    model_rdms = {p.stem: load_tensor(p)[1] for p in sorted(rdm_dir.glob("*.rdmt"))}
    report = oracle_report(model_rdms, load_archive(directory / "brain.rdma"))
    (directory / "expected_scores.json").write_text(json.dumps(report, indent=2) + "\n")


def main():
    for name, n in SET_SIZES.items():
        write_stimulus_set(ROOT / name, n, SEEDS[name])
    make_golden(ROOT / "golden")
    manifest = {
        "label": "resnet20",
        "checkpoint": "../runs/train/epoch_010.rdma",
        "output_dir": "../runs/eval",
        "ledger": "../runs/ledger.json",
        "sets": {name: {"images": f"{name}/images", "brain": f"{name}/brain.rdma"}
                 for name in SET_SIZES},
    }
    (ROOT / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


if __name__ == "__main__":
    main()
