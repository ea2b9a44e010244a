"""Synthetic ultrasound phantoms: speckle, lesions, reverberation bands, shadowing.

A phantom is ``clip(texture * speckle + lesion_offset * mask + bands) * shadow``
on a 224 x 224 grid, with a binary lesion mask, a benign/malignant label and a
caption built from the same descriptors that decide the label.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, IntegrityError

GENERATOR_VERSION = "1"
LABELS = ("benign", "malignant")


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 224
    speckle_sigma: float = 0.7
    texture_level: float = 0.6
    texture_amplitude: float = 0.15
    center: tuple = (112.0, 112.0)  # (row, col)
    semi_axes: tuple = (40.0, 24.0)  # (a along rotated x, b along rotated y)
    rotation: float = 0.0
    lesion_offset: float = -0.25
    irregularity: float = 0.0  # radial boundary perturbation, pixels
    artifact_period: float = 8.0
    artifact_amplitude: float = 0.3
    shadow: bool = False
    shadow_attenuation: float = 0.5
    shadow_halfwidth: float = 20.0
    irregularity_threshold: float = 0.15  # fraction of the minor semi-axis
    axis_ratio_threshold: float = 1.3

    def validate(self):
        if self.speckle_sigma <= 0:
            raise ConfigurationError(f"speckle sigma must be positive, got {self.speckle_sigma}")
        if self.artifact_period < 2:
            raise ConfigurationError(f"artifact period {self.artifact_period} < 2 px")
        a, b = self.semi_axes
        if a <= 0 or b <= 0:
            raise ConfigurationError(f"semi-axes {self.semi_axes} must be positive")
        reach = max(a, b) + abs(self.irregularity)
        cy, cx = self.center
        hi = self.image_size - 1
        if cy - reach < 0 or cx - reach < 0 or cy + reach > hi or cx + reach > hi:
            raise ConfigurationError(f"lesion at {self.center} with reach {reach:.1f} px leaves the image")

    @property
    def axis_ratio(self):
        a, b = self.semi_axes
        return max(a, b) / min(a, b)

    @property
    def irregular(self):
        return self.irregularity > self.irregularity_threshold * min(self.semi_axes)

    @property
    def malignant(self):
        return self.irregular or self.axis_ratio < self.axis_ratio_threshold

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={' '.join(map(str, v)) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"


@dataclass
class PhantomSample:
    image: np.ndarray
    mask: np.ndarray
    label: int
    caption: str
    seed: int
    spec: PhantomSpec | None = None

    @property
    def label_name(self):
        return LABELS[self.label]


def speckle(shape, sigma, seed):
    """Rayleigh envelope |N(0, sigma) + i N(0, sigma)| per pixel."""
    if sigma <= 0:
        raise ConfigurationError(f"speckle sigma must be positive, got {sigma}")
    rng = np.random.default_rng(seed)
    re = rng.normal(0.0, sigma, shape)
    im = rng.normal(0.0, sigma, shape)
    return np.hypot(re, im)


def _boundary_harmonics(rng):
    orders = rng.choice(np.arange(3, 9), size=3, replace=False)
    weights = rng.dirichlet(np.ones(3))
    phases = rng.uniform(0, 2 * np.pi, 3)
    return orders, weights, phases


def lesion_mask(spec: PhantomSpec, harmonics=None):
    """Pixel-centre rasterisation of the (optionally perturbed) rotated ellipse."""
    n = spec.image_size
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)
    cy, cx = spec.center
    a, b = spec.semi_axes
    c, s = math.cos(spec.rotation), math.sin(spec.rotation)
    u = (cols - cx) * c + (rows - cy) * s
    v = -(cols - cx) * s + (rows - cy) * c
    rho = np.hypot(u / a, v / b)
    limit = 1.0
    if spec.irregularity and harmonics is not None:
        orders, weights, phases = harmonics
        phi = np.arctan2(v / b, u / a)
        wobble = sum(w * np.sin(k * phi + p) for k, w, p in zip(orders, weights, phases))
        limit = 1.0 + spec.irregularity / min(a, b) * wobble
    return rho <= limit


def gen_phantom(spec: PhantomSpec, seed: int) -> PhantomSample:
    spec.validate()
    rng = np.random.default_rng(seed)
    n = spec.image_size
    field_ = gaussian_filter(rng.standard_normal((n, n)), sigma=12.0, mode="wrap")
    field_ /= field_.std() + 1e-12
    texture = spec.texture_level * (1.0 + spec.texture_amplitude * field_)
    image = texture * speckle((n, n), spec.speckle_sigma, int(rng.integers(2**63 - 1)))
    mask = lesion_mask(spec, _boundary_harmonics(rng))
    image = image + spec.lesion_offset * mask
    phase = rng.uniform(0, 2 * np.pi)
    rows = np.arange(n, dtype=np.float64)[:, None]
    image = image + spec.artifact_amplitude * np.sin(2 * np.pi * rows / spec.artifact_period + phase)
    if spec.shadow:
        cy, cx = spec.center
        cols = np.arange(n)[None, :]
        shade = (rows > cy) & (np.abs(cols - cx) <= spec.shadow_halfwidth)
        image = image * np.where(shade, spec.shadow_attenuation, 1.0)
    image = np.clip(image, 0.0, 1.0)
    label = int(spec.malignant)
    return PhantomSample(image=image, mask=mask, label=label, caption=caption_for(spec), seed=seed, spec=spec)


def caption_for(spec: PhantomSpec) -> str:
    label = LABELS[int(spec.malignant)]
    shape = "a round shape" if spec.axis_ratio < spec.axis_ratio_threshold else "an oval shape"
    margin = "irregular, spiculated margins" if spec.irregular else "circumscribed margins"
    if spec.lesion_offset <= -0.3:
        echo = "markedly hypoechoic"
    elif spec.lesion_offset < 0:
        echo = "hypoechoic"
    else:
        echo = "isoechoic"
    text = f"A {label} nodule with {shape}, {margin}, appearing {echo}"
    if spec.shadow:
        text += " with posterior acoustic shadowing"
    return text


# ---------------------------------------------------------------- domain presets

PRESETS = {
    "A": dict(artifact_period=8.0, artifact_amplitude=0.3, speckle_sigma=0.8, shadow=False),
    "B": dict(artifact_period=14.0, artifact_amplitude=0.2, speckle_sigma=0.5, shadow=True),
}


def random_spec(rng, domain="A", **overrides) -> PhantomSpec:
    """Draw a lesion for a domain preset; roughly half the draws are malignant."""
    base = dict(PRESETS[domain])
    base.update(overrides)
    b = rng.uniform(14.0, 26.0)
    ratio = rng.uniform(1.0, 2.0)
    a = b * ratio
    irr = rng.uniform(0.2, 0.35) * b if rng.random() < 0.35 else 0.0
    reach = a + irr + 2
    cy = rng.uniform(reach, 224 - 1 - reach)
    cx = rng.uniform(reach, 224 - 1 - reach)
    spec = PhantomSpec(center=(cy, cx), semi_axes=(a, b), rotation=rng.uniform(0, np.pi),
                       lesion_offset=rng.uniform(-0.35, -0.15), irregularity=irr, **base)
    return spec


def make_dataset(n, domain="A", seed=0, **overrides):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        spec = random_spec(rng, domain, **overrides)
        samples.append(gen_phantom(spec, seed * 1_000_003 + i))
    return samples


def mean_spectrum(samples):
    """Mean magnitude of the centred 2D FFT over a sample list."""
    return np.mean([np.abs(np.fft.fftshift(np.fft.fft2(s.image - s.image.mean()))) for s in samples], axis=0)


# ---------------------------------------------------------------- serialization


def write_pgm(path, array8):
    h, w = array8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(array8, dtype=np.uint8).tobytes())


def read_pgm(path):
    if not os.path.exists(path):
        raise IntegrityError(f"missing file: {path}")
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    pos += 1
    if tokens[0] != "P5" or int(tokens[3]) != 255:
        raise IntegrityError(f"{path}: not an 8-bit P5 graymap")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data[pos : pos + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise IntegrityError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w)


@dataclass
class Manifest:
    name: str
    records: list  # dicts: path, mask_path, label, split, caption
    generator_version: str = GENERATOR_VERSION
    seed: int = 0


def write_dataset(samples, directory, name="phantoms", splits=None, seed=0):
    """Write P5 images and masks plus ``manifest.tsv``; returns the Manifest."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    os.makedirs(os.path.join(directory, "masks"), exist_ok=True)
    splits = splits or ["train"] * len(samples)
    records = []
    for i, (s, split) in enumerate(zip(samples, splits)):
        img_rel = f"images/{i:05d}.pgm"
        mask_rel = f"masks/{i:05d}.pgm"
        write_pgm(os.path.join(directory, img_rel), np.round(s.image * 255.0).astype(np.uint8))
        write_pgm(os.path.join(directory, mask_rel), (s.mask.astype(np.uint8) * 255))
        records.append(dict(path=img_rel, mask_path=mask_rel, label=s.label_name, split=split,
                            caption=s.caption, seed=s.seed))
    manifest = Manifest(name=name, records=records, seed=seed)
    with open(os.path.join(directory, "manifest.tsv"), "w", encoding="utf-8") as fh:
        fh.write(f"# name={name}\n# generator_version={GENERATOR_VERSION}\n# seed={seed}\n")
        for r in records:
            fh.write("\t".join([r["path"], r["mask_path"], r["label"], r["split"], r["caption"]]) + "\n")
    if samples and samples[0].spec is not None:
        with open(os.path.join(directory, "generator.cfg"), "w", encoding="utf-8") as fh:
            fh.write(f"generator_version={GENERATOR_VERSION}\nseed={seed}\ncount={len(samples)}\n")
            fh.write(samples[0].spec.to_text())
    return manifest


def read_dataset(directory):
    manifest_path = os.path.join(directory, "manifest.tsv")
    if not os.path.exists(manifest_path):
        raise IntegrityError(f"missing file: {manifest_path}")
    meta, records = {}, []
    with open(manifest_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k] = v
            elif line:
                path, mask_path, label, split, caption = line.split("\t")
                records.append(dict(path=path, mask_path=mask_path, label=label, split=split, caption=caption))
    samples = []
    for r in records:
        image = read_pgm(os.path.join(directory, r["path"])).astype(np.float64) / 255.0
        mask = read_pgm(os.path.join(directory, r["mask_path"])) > 127
        samples.append(PhantomSample(image=image, mask=mask, label=LABELS.index(r["label"]),
                                     caption=r["caption"], seed=-1))
    manifest = Manifest(name=meta.get("name", ""), records=records,
                        generator_version=meta.get("generator_version", ""), seed=int(meta.get("seed", 0)))
    return manifest, samples
