"""Synthetic stimulus sets and subject RDMs standing in for the fMRI data.

Each stimulus set is a list of rendered images from the training classes. Two
latent RDMs are derived from the stimuli:

* ``EVC``: correlation distance between coarse (8x8) pixel patterns, a
  low-level similarity structure;
* ``IT``: correlation distance between class-identity codes with a small
  stimulus-specific component, a categorical similarity structure.

Every simulated subject sees the latent RDM plus independent symmetric
Gaussian noise, clipped to [0, 2] with a zero diagonal, which gives a noise
ceiling well below 1.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .rsa import compute_rdm
from .tensor import bilinear_resize, save_archive
from .train import encode_ppm, load_ppm, render_stimulus

SET_SIZES = {"set92": 92, "set118": 118}


def make_stimuli(n: int, classes: int = 4, size=(64, 64), seed: int = 0):
    """Return ``(images [n,3,H,W], labels [n])`` with labels cycling over classes.

    Images are quantized to 8 bits so they survive a PPM round trip unchanged.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    images = np.stack([render_stimulus(int(c), classes, size, rng) for c in labels])
    images = (np.rint(images * 255) / 255).astype(np.float32)
    return images, labels


def latent_rdms(images: np.ndarray, labels: np.ndarray, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    coarse = np.stack([bilinear_resize(im, 8, 8) for im in images]).reshape(len(images), -1)
    classes = int(labels.max()) + 1
    codes = np.concatenate([3.0 * np.eye(classes)[labels],
                            0.6 * rng.standard_normal((len(labels), 16))], axis=1)
    return {"EVC": compute_rdm(coarse), "IT": compute_rdm(codes)}


def make_subject_rdms(latent: np.ndarray, n_subjects: int = 15, noise: float = 0.3,
                      seed: int = 0) -> np.ndarray:
    """``[S, n, n]`` noisy copies of ``latent``."""
    rng = np.random.default_rng(seed)
    n = latent.shape[0]
    out = np.empty((n_subjects, n, n), np.float32)
    for s in range(n_subjects):
        e = rng.standard_normal((n, n))
        r = latent + noise * (e + e.T) / np.sqrt(2)
        np.clip(r, 0.0, 2.0, out=r)
        np.fill_diagonal(r, 0.0)
        out[s] = r
    return out


def write_stimulus_set(directory: str | Path, n: int, seed: int, classes: int = 4,
                       size=(64, 64), n_subjects: int = 15, noise: float = 0.3) -> Path:
    """Write ``images/*.ppm``, ``labels.txt`` and ``brain.rdma`` under ``directory``."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    images, labels = make_stimuli(n, classes, size, seed)
    for i, im in enumerate(images):
        blob = encode_ppm(im)
        assert np.array_equal(load_ppm(blob), im)
        (directory / "images" / f"stim_{i:03d}.ppm").write_bytes(blob)
    (directory / "labels.txt").write_text("".join(f"{c}\n" for c in labels))
    brain = {
        region: make_subject_rdms(latent, n_subjects, noise, seed + 1000 * (k + 1))
        for k, (region, latent) in enumerate(latent_rdms(images, labels, seed + 1).items())
    }
    save_archive(directory / "brain.rdma", brain)
    return directory
