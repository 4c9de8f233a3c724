"""Balanced patch sampling and data augmentation.

Mini-batches are balanced by construction: foreground labels are dealt to
batch slots round-robin over a global patch counter, so across any run of
batches every structure gets the same number of designated patches (within
one).  For each slot the sampler picks, uniformly, an axial slice that
actually contains the designated label, then crops a patch centered on the
label's in-slice centroid plus a uniform jitter, clamped to the slice.

Augmentation applies, in order: a horizontal flip (probability 0.5), an
integer-pixel translation (zero-padding the image, background-padding the
labels), and an elastic deformation by a Gaussian-smoothed random
displacement field shared between the image (bilinear resampling) and the
one-hot labels (nearest-neighbor resampling, which keeps them one-hot).

All randomness is drawn from per-patch child streams keyed by the global
patch index, so a batch depends only on (parent seed, its start index) and
never on worker scheduling or on how many batches came before it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import SamplingError, ValidationError
from .tensor_core import Rng
from .volume_io import LabeledVolume


@dataclass
class SamplerConfig:
    patch_size: int = 64
    batch_size: int = 8
    num_labels: int = 7
    center_jitter_px: int = 16
    augment: bool = True
    flip_prob: float = 0.5
    max_translation_px: int = 8
    elastic_sigma: float = 6.0
    elastic_alpha: float = 4.0

    def __post_init__(self):
        if self.patch_size < 4 or self.batch_size < 1:
            raise ValidationError("patch_size >= 4 and batch_size >= 1 required")
        if self.num_labels < 2:
            raise ValidationError(f"num_labels must be >= 2, got {self.num_labels}")
        if not 0 <= self.flip_prob <= 1:
            raise ValidationError(f"flip_prob must be in [0, 1], got {self.flip_prob}")


@dataclass
class PatchProvenance:
    case_index: int
    case_id: str
    slice_index: int
    crop_offset: tuple[int, int]
    target_label: int
    patch_index: int          # global index; also the augmentation stream key


@dataclass
class MiniBatch:
    images: np.ndarray        # [I, 1, P, P]
    onehot: np.ndarray        # [I, L, P, P]
    provenance: list[PatchProvenance] = field(default_factory=list)


class PatchDataset:
    """In-memory volumes plus a per-label index of the axial slices (and
    in-slice centroids) where each foreground label occurs."""

    def __init__(self, cases: list[tuple[str, LabeledVolume]], num_labels: int):
        if not cases:
            raise ValidationError("dataset is empty")
        self.cases = cases
        self.num_labels = num_labels
        self.foreground = tuple(range(1, num_labels))
        # label -> list of (case_index, z); centroids (cy, cx) stored alongside
        self.slices: dict[int, list[tuple[int, int]]] = {l: [] for l in self.foreground}
        self.centroids: dict[tuple[int, int, int], tuple[float, float]] = {}
        for ci, (_, vol) in enumerate(cases):
            if vol.labels.max(initial=0) >= num_labels:
                raise ValidationError(
                    f"case {ci} contains label {vol.labels.max()} >= {num_labels}"
                )
            for z in range(vol.labels.shape[0]):
                sl = vol.labels[z]
                for label in self.foreground:
                    ys, xs = np.nonzero(sl == label)
                    if ys.size:
                        self.slices[label].append((ci, z))
                        self.centroids[(ci, z, label)] = (float(ys.mean()), float(xs.mean()))
        for label in self.foreground:
            if not self.slices[label]:
                raise SamplingError(
                    f"label {label} does not occur in any slice of any case"
                )


def _crop_origin(center: float, patch: int, extent: int) -> int:
    return int(np.clip(round(center - patch / 2), 0, max(0, extent - patch)))


def _extract_patch(vol: LabeledVolume, z: int, y0: int, x0: int, patch: int,
                   num_labels: int):
    """Image and one-hot label patch; slices smaller than the patch are
    zero-padded (image) / background-padded (labels) at the high side."""
    height, width = vol.labels.shape[1:]
    img = np.zeros((patch, patch))
    lab = np.zeros((patch, patch), dtype=np.int64)
    ys = slice(y0, min(y0 + patch, height))
    xs = slice(x0, min(x0 + patch, width))
    img[:ys.stop - y0, :xs.stop - x0] = vol.intensities[z, ys, xs]
    lab[:ys.stop - y0, :xs.stop - x0] = vol.labels[z, ys, xs]
    onehot = np.zeros((num_labels, patch, patch))
    np.put_along_axis(onehot, lab[None], 1.0, axis=0)
    return img, onehot


def _flip(img, onehot):
    return img[:, ::-1].copy(), onehot[:, :, ::-1].copy()


def _translate(img, onehot, dy: int, dx: int):
    """Shift by (dy, dx); image fills with 0, labels with background."""
    patch = img.shape[0]
    out_img = np.zeros_like(img)
    out_hot = np.zeros_like(onehot)
    out_hot[0] = 1.0
    src_y = slice(max(0, -dy), min(patch, patch - dy))
    src_x = slice(max(0, -dx), min(patch, patch - dx))
    dst_y = slice(max(0, dy), max(0, dy) + (src_y.stop - src_y.start))
    dst_x = slice(max(0, dx), max(0, dx) + (src_x.stop - src_x.start))
    out_img[dst_y, dst_x] = img[src_y, src_x]
    out_hot[:, dst_y, dst_x] = onehot[:, src_y, src_x]
    return out_img, out_hot


def _elastic(img, onehot, rng: Rng, sigma: float, alpha: float):
    patch = img.shape[0]
    disp_y = ndimage.gaussian_filter(rng.uniform((patch, patch), -1.0, 1.0), sigma) * alpha
    disp_x = ndimage.gaussian_filter(rng.uniform((patch, patch), -1.0, 1.0), sigma) * alpha
    ys, xs = np.meshgrid(np.arange(patch, dtype=float),
                         np.arange(patch, dtype=float), indexing="ij")
    coords = np.stack([ys + disp_y, xs + disp_x])
    out_img = ndimage.map_coordinates(img, coords, order=1, mode="nearest")
    out_hot = np.stack([
        ndimage.map_coordinates(ch, coords, order=0, mode="nearest")
        for ch in onehot
    ])
    return out_img, out_hot


def augment(img: np.ndarray, onehot: np.ndarray, rng: Rng, cfg: SamplerConfig):
    """Flip / translate / elastically deform one aligned patch pair."""
    if cfg.flip_prob > 0 and rng.child(0).random() < cfg.flip_prob:
        img, onehot = _flip(img, onehot)
    if cfg.max_translation_px > 0:
        t = cfg.max_translation_px
        dy, dx = (int(v) for v in rng.child(1).integers(-t, t + 1, (2,)))
        img, onehot = _translate(img, onehot, dy, dx)
    if cfg.elastic_alpha > 0:
        img, onehot = _elastic(img, onehot, rng.child(2), cfg.elastic_sigma,
                               cfg.elastic_alpha)
    return img, onehot


def sample_balanced_batch(dataset: PatchDataset, cfg: SamplerConfig, rng: Rng,
                          start_index: int = 0) -> MiniBatch:
    """Draw one balanced mini-batch; `start_index` is the global index of
    the batch's first patch (step * batch_size in a training loop)."""
    fg = dataset.foreground
    images = np.empty((cfg.batch_size, 1, cfg.patch_size, cfg.patch_size))
    onehot = np.empty((cfg.batch_size, cfg.num_labels, cfg.patch_size, cfg.patch_size))
    provenance = []
    for slot in range(cfg.batch_size):
        g = start_index + slot
        label = fg[g % len(fg)]
        prng = rng.child(g)
        entries = dataset.slices[label]
        ci, z = entries[int(prng.child(0).integers(0, len(entries), ()))]
        case_id, vol = dataset.cases[ci]
        cy, cx = dataset.centroids[(ci, z, label)]
        j = cfg.center_jitter_px
        jy, jx = prng.child(1).uniform((2,), -j, j) if j > 0 else (0.0, 0.0)
        height, width = vol.labels.shape[1:]
        y0 = _crop_origin(cy + jy, cfg.patch_size, height)
        x0 = _crop_origin(cx + jx, cfg.patch_size, width)
        img, hot = _extract_patch(vol, z, y0, x0, cfg.patch_size, cfg.num_labels)
        if cfg.augment:
            img, hot = augment(img, hot, prng.child(2), cfg)
        images[slot, 0] = img
        onehot[slot] = hot
        provenance.append(PatchProvenance(ci, case_id, z, (y0, x0), label, g))
    return MiniBatch(images, onehot, provenance)
