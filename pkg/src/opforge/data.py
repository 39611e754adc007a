"""Dataset synthesis and manifests.

A dataset directory holds procedural texture images, measurements produced by
blurring a disjoint half of those images, truth-kernel sidecars, and a JSON
manifest listing everything by relative path.

The unpaired premise is structural: a training manifest lists the clean half
and the measurement files, never the measurement sources or the kernels, and
:func:`training_view` is the only accessor training code should touch. Eval
datasets are the opposite: aligned clean/measurement/kernel triplets.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.ndimage import gaussian_filter

from . import rngs
from .errors import ConfigError, ParameterError
from .fileio import load_tensor, save_tensor
from .forward_model import LsiOperator, NoiseModel, add_noise, apply
from .psf import Psf

__all__ = [
    "DatasetManifest", "TrainingView", "EvalView",
    "split_unpaired", "generate_texture_corpus", "synthesize_measurements",
    "build_dataset", "save_manifest", "load_manifest",
    "training_view", "eval_view", "load_stack",
]

MANIFEST_VERSION = 1
PsfSampler = Callable[[np.random.Generator], Psf]


@dataclass(frozen=True)
class DatasetManifest:
    version: int
    seed: int
    image_shape: tuple[int, int]
    psf_family: str
    noise_sigma: float
    clean_files: tuple[str, ...]
    measurement_files: tuple[str, ...]
    truth_kernel_files: tuple[str, ...] | None
    counts: dict

    def __post_init__(self):
        overlap = set(self.clean_files) & set(self.measurement_files)
        if overlap:
            raise ConfigError(
                f"manifest lists {len(overlap)} files as both clean and measurement"
            )
        if self.truth_kernel_files is not None and len(self.truth_kernel_files) != len(
            self.measurement_files
        ):
            raise ConfigError(
                "truth kernel list must align with measurements: "
                f"{len(self.truth_kernel_files)} vs {len(self.measurement_files)}"
            )


@dataclass(frozen=True)
class TrainingView:
    """What the training loop is allowed to see. No kernels, no pairings."""

    clean_paths: tuple[Path, ...]
    measurement_paths: tuple[Path, ...]
    image_shape: tuple[int, int]
    noise_sigma: float


@dataclass(frozen=True)
class EvalView:
    """Aligned triplets for scoring reconstructions."""

    clean_paths: tuple[Path, ...]
    measurement_paths: tuple[Path, ...]
    truth_kernel_paths: tuple[Path, ...]
    image_shape: tuple[int, int]
    noise_sigma: float
    psf_family: str


def split_unpaired(image_paths: list, seed: int):
    """Deterministic disjoint halves: first half clean, rest measurement sources."""
    if len(image_paths) < 2:
        raise ParameterError(f"need at least 2 images to split, got {len(image_paths)}")
    order = rngs.stream(seed, "split").permutation(len(image_paths))
    shuffled = [image_paths[i] for i in order]
    half = len(shuffled) // 2
    return shuffled[:half], shuffled[half:]


def _texture(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    """Multi-scale smoothed noise, a few hard-edged shapes, fine speckle."""
    h, w = shape
    img = np.zeros((h, w))
    for scale, amp in ((8, 0.9), (4, 0.5), (2, 0.25)):
        base = rng.standard_normal((max(h // scale, 1), max(w // scale, 1)))
        img += amp * np.kron(base, np.ones((scale, scale)))[:h, :w]
    img = gaussian_filter(img, sigma=1.0, mode="wrap")
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(2.0, min(h, w) / 4)
        lvl = rng.uniform(-1.2, 1.2)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = lvl
    for _ in range(rng.integers(1, 4)):
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        hh, ww = rng.integers(2, h // 2), rng.integers(2, w // 2)
        img[y0 : y0 + hh, x0 : x0 + ww] += rng.uniform(-0.8, 0.8)
    img += 0.08 * rng.standard_normal((h, w))
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-12:
        return np.zeros((h, w))
    return (img - lo) / (hi - lo)


def generate_texture_corpus(n: int, shape: tuple[int, int], seed: int,
                            out_dir) -> list[str]:
    """Write n images as tensor files under out_dir/images; returns relative paths."""
    if n < 1:
        raise ParameterError(f"corpus size must be >= 1, got {n}")
    out_dir = Path(out_dir)
    rel_paths = []
    for i in range(n):
        img = _texture(rngs.stream(seed, "corpus", i), tuple(shape))
        rel = f"images/{i:05d}.opfg"
        save_tensor(out_dir / rel, img)
        rel_paths.append(rel)
    return rel_paths


def synthesize_measurements(source_rel_paths: list[str], psf_sampler: PsfSampler,
                            noise: NoiseModel, seed: int, out_dir):
    """Blur each source with a freshly drawn kernel and add noise exactly once.

    Returns (measurement relpaths, truth-kernel relpaths). Kernels always go
    to disk as the eval sidecar; whether they are listed in a manifest is the
    caller's decision.
    """
    out_dir = Path(out_dir)
    meas_rel, kernel_rel = [], []
    for i, src in enumerate(source_rel_paths):
        rng = rngs.stream(seed, "synthesize", i)
        image = load_tensor(out_dir / src)
        psf = psf_sampler(rng)
        op = LsiOperator(psf, image.shape)
        meas = add_noise(rng, apply(op, image), noise)
        mrel = f"measurements/{i:05d}.opfg"
        krel = f"kernels/{i:05d}.opfg"
        save_tensor(out_dir / mrel, meas)
        save_tensor(out_dir / krel, psf.weights)
        meas_rel.append(mrel)
        kernel_rel.append(krel)
    return meas_rel, kernel_rel


def build_dataset(out_dir, n_images: int, image_shape: tuple[int, int],
                  psf_family: str, psf_sampler: PsfSampler, noise_sigma: float,
                  seed: int, kind: str = "train") -> DatasetManifest:
    """Generate a full dataset directory plus manifest.

    kind="train": disjoint unpaired halves, kernels unlisted.
    kind="eval": every image is a measurement source; aligned triplets listed.
    """
    if kind not in ("train", "eval"):
        raise ConfigError(f"dataset kind must be train or eval, got {kind!r}")
    out_dir = Path(out_dir)
    images = generate_texture_corpus(n_images, image_shape, seed, out_dir)
    noise = NoiseModel(noise_sigma)
    if kind == "train":
        clean, sources = split_unpaired(images, seed)
        meas, _ = synthesize_measurements(sources, psf_sampler, noise, seed, out_dir)
        kernels = None
        counts = {"clean": len(clean), "measurement": len(meas)}
    else:
        clean = images
        meas, kernels = synthesize_measurements(images, psf_sampler, noise, seed, out_dir)
        counts = {
            "clean": len(clean),
            "measurement": len(meas),
            "truth_kernel": len(kernels),
        }
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        seed=seed,
        image_shape=tuple(image_shape),
        psf_family=psf_family,
        noise_sigma=noise_sigma,
        clean_files=tuple(clean),
        measurement_files=tuple(meas),
        truth_kernel_files=None if kernels is None else tuple(kernels),
        counts=counts,
    )
    save_manifest(out_dir / "manifest.json", manifest)
    return manifest


def save_manifest(path, manifest: DatasetManifest) -> None:
    doc = {
        "version": manifest.version,
        "seed": manifest.seed,
        "image_shape": list(manifest.image_shape),
        "psf_family": manifest.psf_family,
        "noise_sigma": manifest.noise_sigma,
        "clean_files": list(manifest.clean_files),
        "measurement_files": list(manifest.measurement_files),
        "truth_kernel_files": (
            None
            if manifest.truth_kernel_files is None
            else list(manifest.truth_kernel_files)
        ),
        "counts": manifest.counts,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read manifest {path}: {err}") from err
    if doc.get("version") != MANIFEST_VERSION:
        raise ConfigError(f"unsupported manifest version {doc.get('version')}")
    kernels = doc.get("truth_kernel_files")
    return DatasetManifest(
        version=doc["version"],
        seed=doc["seed"],
        image_shape=tuple(doc["image_shape"]),
        psf_family=doc["psf_family"],
        noise_sigma=doc["noise_sigma"],
        clean_files=tuple(doc["clean_files"]),
        measurement_files=tuple(doc["measurement_files"]),
        truth_kernel_files=None if kernels is None else tuple(kernels),
        counts=doc["counts"],
    )


def training_view(manifest: DatasetManifest, root) -> TrainingView:
    root = Path(root)
    return TrainingView(
        clean_paths=tuple(root / p for p in manifest.clean_files),
        measurement_paths=tuple(root / p for p in manifest.measurement_files),
        image_shape=manifest.image_shape,
        noise_sigma=manifest.noise_sigma,
    )


def eval_view(manifest: DatasetManifest, root) -> EvalView:
    if manifest.truth_kernel_files is None:
        raise ConfigError("manifest has no truth kernels; build an eval dataset")
    root = Path(root)
    return EvalView(
        clean_paths=tuple(root / p for p in manifest.clean_files),
        measurement_paths=tuple(root / p for p in manifest.measurement_files),
        truth_kernel_paths=tuple(root / p for p in manifest.truth_kernel_files),
        image_shape=manifest.image_shape,
        noise_sigma=manifest.noise_sigma,
        psf_family=manifest.psf_family,
    )


def load_stack(paths) -> np.ndarray:
    """Read a list of tensor files into one (N, ...) array."""
    arrs = [load_tensor(p) for p in paths]
    return np.stack(arrs, axis=0)
