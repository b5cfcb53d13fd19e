"""Corpus manifests, stratified splitting and a synthetic spam/ham generator.

A manifest is a JSON-lines file, one ``{"path", "label", "split"}`` record
per image. Relative paths resolve against the manifest's directory. The
corpus id is the manifest file's stem.
"""

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._validation import HAM, SPAM
from .exceptions import CorpusError, ManifestValidationError
from ._resample import resample
from .imaging import load_image, save_image

LABELS = ("spam", "ham")
TEXTURE_AMPLITUDE = (0.25, 0.4)
SPLITS = ("train", "test")
LABEL_CODES = {"ham": HAM, "spam": SPAM}


@dataclass(frozen=True)
class Entry:
    path: str
    label: str
    split: str = "train"

    def __post_init__(self):
        if self.label not in LABELS:
            raise CorpusError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.split not in SPLITS:
            raise CorpusError(f"split must be one of {SPLITS}, got {self.split!r}")

    @property
    def code(self):
        return LABEL_CODES[self.label]


@dataclass
class CorpusManifest:
    entries: list = field(default_factory=list)
    corpus_id: str = ""
    root: str = "."

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.path in seen:
                raise CorpusError(f"duplicate path in manifest: {e.path}")
            seen.add(e.path)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, entry):
        p = Path(entry.path)
        return p if p.is_absolute() else Path(self.root) / p

    def select(self, split=None, label=None):
        entries = [
            e for e in self.entries if (split is None or e.split == split) and (label is None or e.label == label)
        ]
        return CorpusManifest(entries, self.corpus_id, self.root)

    def paths(self):
        return [self.resolve(e) for e in self.entries]

    def labels(self):
        return np.array([e.code for e in self.entries], dtype=np.int64)

    def load_images(self):
        """All images as a uint8 NHWC array (compact for 400x400 corpora)."""
        if not self.entries:
            return np.zeros((0, 0, 0, 3), dtype=np.uint8)
        first = load_image(self.resolve(self.entries[0]))
        out = np.empty((len(self.entries),) + first.shape, dtype=np.uint8)
        for i, e in enumerate(self.entries):
            img = first if i == 0 else load_image(self.resolve(e))
            if img.shape != first.shape:
                raise CorpusError(f"{e.path}: shape {img.shape} differs from {first.shape}")
            out[i] = np.rint(img * 255.0).astype(np.uint8)
        return out

    def validate(self):
        missing = [e.path for e in self.entries if not self.resolve(e).is_file()]
        if missing:
            raise ManifestValidationError(missing)


def save_manifest(manifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = Path(manifest.root).resolve()
    here = path.parent.resolve()
    lines = []
    for e in manifest.entries:
        full = (root / e.path).resolve() if not Path(e.path).is_absolute() else Path(e.path)
        try:
            rel = os.path.relpath(full, here)
        except ValueError:
            rel = str(full)
        lines.append(json.dumps({"path": Path(rel).as_posix(), "label": e.label, "split": e.split}))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_manifest(path, validate=True):
    path = Path(path)
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entries.append(Entry(rec["path"], rec["label"], rec.get("split", "train")))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed record ({exc})") from exc
    manifest = CorpusManifest(entries, path.stem, str(path.parent))
    if validate:
        manifest.validate()
    return manifest


def split_corpus(manifest, test_fraction=0.15, seed=0):
    """Stratified train/test assignment; each class keeps at least one item per split."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    split_of = {}
    for label in LABELS:
        idx = [i for i, e in enumerate(manifest.entries) if e.label == label]
        if not idx:
            continue
        if len(idx) < 2:
            raise CorpusError(f"class {label!r} has {len(idx)} member(s); need at least 2 to split")
        n_test = int(np.clip(round(len(idx) * test_fraction), 1, len(idx) - 1))
        chosen = set(rng.permutation(idx)[:n_test].tolist())
        for i in idx:
            split_of[i] = "test" if i in chosen else "train"
    entries = [replace(e, split=split_of[i]) for i, e in enumerate(manifest.entries)]
    return CorpusManifest(entries, manifest.corpus_id, manifest.root)


# --------------------------------------------------------------- synthetic


@dataclass
class SyntheticSpec:
    spam_count: int = 200
    ham_count: int = 200
    image_size: int = 400
    seed: int = 0
    noise_level: float = 0.04
    text_density: float = 0.6
    test_fraction: float = 0.15

    def __post_init__(self):
        if self.spam_count < 2 or self.ham_count < 2:
            raise ValueError("need at least 2 images per class")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if not 0.0 <= self.noise_level <= 1.0 or not 0.0 < self.text_density <= 1.0:
            raise ValueError("noise_level must be in [0, 1] and text_density in (0, 1]")


def render_spam(rng, size, density=0.6, noise=0.04):
    """Light page with dark word-blocks laid out in rows, like text-heavy spam."""
    img = np.empty((size, size, 3), dtype=np.float32)
    img[:] = rng.uniform(0.7, 1.0) + rng.uniform(-0.08, 0.08, size=3)
    unit = size / 400.0
    if rng.random() < 0.5:
        # coloured headline banner
        top = int(rng.uniform(0.03, 0.15) * size)
        img[top : top + int(rng.uniform(30, 60) * unit)] = rng.uniform(0.3, 1.0, size=3)
    row_h = max(2, int(rng.uniform(6, 14) * unit))
    gap = max(1, int(row_h * rng.uniform(0.5, 1.0)))
    margin = int(rng.uniform(0.04, 0.12) * size)
    y = margin
    ink = rng.uniform(0.0, 0.45, size=3)
    while y + row_h < size - margin:
        if rng.random() < density:
            x = margin + int(rng.uniform(0, 20) * unit)
            while True:
                wlen = max(2, int(rng.uniform(12, 70) * unit))
                if x + wlen > size - margin:
                    break
                img[y : y + row_h, x : x + wlen] = ink
                x += wlen + max(1, int(rng.uniform(5, 12) * unit))
        y += row_h + gap
    if noise > 0:
        speckle = rng.random((size, size)) < noise
        img[speckle] = rng.uniform(0.0, 1.0, size=(int(speckle.sum()), 3))
    return np.clip(img, 0.0, 1.0)


def render_ham(rng, size, noise=0.04):
    """Smooth gradients, soft ellipses and low-frequency texture, like a photo."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy)
    ramp = (ramp - ramp.min()) / max(float(np.ptp(ramp)), 1e-6)
    c0, c1 = rng.uniform(0.0, 0.8, size=3), rng.uniform(0.1, 0.9, size=3)
    img = c0 + ramp[..., None] * (c1 - c0)
    for _ in range(rng.integers(3, 9)):
        cy, cx = rng.uniform(0, 1, size=2)
        ry, rx = rng.uniform(0.08, 0.35, size=2)
        d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        # mostly crisp outlines: photographs carry real edges too
        sharpness = 20.0 if rng.random() < 0.75 else 1.0
        alpha = np.clip((1.0 - d) * sharpness + 0.5, 0.0, 1.0)[..., None] * rng.uniform(0.5, 0.95)
        img = img * (1 - alpha) + alpha * rng.uniform(0.0, 1.0, size=3)
    for _ in range(3):
        f = rng.uniform(1.0, 4.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (f[0] * xx + f[1] * yy) + phase)
        img = img + 0.06 * wave[..., None] * rng.uniform(-1, 1, size=3)
    # mid-frequency texture (foliage, fabric) that survives downsizing
    cells = int(rng.integers(16, 40))
    coarse = rng.uniform(-1.0, 1.0, size=(cells, cells, 3)).astype(np.float32)
    img = img + rng.uniform(*TEXTURE_AMPLITUDE) * resample(coarse, size, size)
    if noise > 0:
        img = img + rng.normal(0.0, noise * 0.5, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic_corpus(spec, out_dir):
    """Render spam and ham PNGs plus ``manifest.jsonl`` under ``out_dir``."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CorpusError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise CorpusError(f"output directory {out} is not writable")
    rng = np.random.default_rng(spec.seed)
    entries = []
    for i in range(spec.spam_count):
        rel = f"images/spam_{i:05d}.png"
        save_image(render_spam(rng, spec.image_size, spec.text_density, spec.noise_level), out / rel)
        entries.append(Entry(rel, "spam"))
    for i in range(spec.ham_count):
        rel = f"images/ham_{i:05d}.png"
        save_image(render_ham(rng, spec.image_size, spec.noise_level), out / rel)
        entries.append(Entry(rel, "ham"))
    manifest = split_corpus(CorpusManifest(entries, "manifest", str(out)), spec.test_fraction, spec.seed)
    save_manifest(manifest, out / "manifest.jsonl")
    return manifest
