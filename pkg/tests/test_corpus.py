import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from perturbforge.corpus import (
    CorpusManifest,
    Entry,
    SyntheticSpec,
    generate_synthetic_corpus,
    load_manifest,
    render_ham,
    render_spam,
    save_manifest,
    split_corpus,
)
from perturbforge.exceptions import CorpusError, ManifestValidationError
from perturbforge.imaging import load_image


def small_spec(**kw):
    base = dict(spam_count=4, ham_count=4, image_size=48, seed=7)
    base.update(kw)
    return SyntheticSpec(**base)


def fake_manifest(n_spam, n_ham):
    entries = [Entry(f"s{i}.png", "spam") for i in range(n_spam)] + [Entry(f"h{i}.png", "ham") for i in range(n_ham)]
    return CorpusManifest(entries, "fake", "/nonexistent")


def test_generation_is_deterministic(tmp_path):
    a = generate_synthetic_corpus(small_spec(), tmp_path / "a")
    b = generate_synthetic_corpus(small_spec(), tmp_path / "b")
    assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()
    np.testing.assert_array_equal(a.load_images(), b.load_images())


def test_generation_counts_and_labels(tmp_path):
    m = generate_synthetic_corpus(small_spec(spam_count=10, ham_count=10, image_size=32), tmp_path)
    assert len(m) == 20
    assert sum(e.label == "spam" for e in m) == 10
    loaded = load_manifest(tmp_path / "manifest.jsonl")
    assert loaded.corpus_id == "manifest"
    assert [e.path for e in loaded] == [e.path for e in m]


def test_generated_images_are_valid(tmp_path):
    m = generate_synthetic_corpus(small_spec(), tmp_path)
    for path in m.paths():
        img = load_image(path)
        assert img.shape == (48, 48, 3)
        assert img.min() >= 0 and img.max() <= 1


@given(st.integers(0, 2**31 - 1), st.floats(0, 0.2), st.floats(0.1, 1.0))
@settings(max_examples=15, deadline=None)
def test_renderers_stay_in_range(seed, noise, density):
    rng = np.random.default_rng(seed)
    for img in (render_spam(rng, 40, density, noise), render_ham(rng, 40, noise)):
        assert img.shape == (40, 40, 3) and img.dtype == np.float32
        assert img.min() >= 0 and img.max() <= 1


def test_spam_is_brighter_text_page_than_ham():
    rng = np.random.default_rng(0)
    spam = np.mean([np.median(render_spam(rng, 100, 0.6, 0.0)) for _ in range(10)])
    ham = np.mean([np.median(render_ham(rng, 100, 0.0)) for _ in range(10)])
    assert spam > ham


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(spam_count=1)
    with pytest.raises(ValueError):
        SyntheticSpec(text_density=0.0)


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(CorpusError):
        generate_synthetic_corpus(small_spec(), blocker / "sub")


# ------------------------------------------------------------------ split


def test_split_half():
    m = split_corpus(fake_manifest(10, 10), 0.5, seed=1)
    test = m.select(split="test")
    assert sum(e.label == "spam" for e in test) == 5
    assert sum(e.label == "ham" for e in test) == 5


@given(st.integers(2, 40), st.integers(2, 40), st.floats(0.05, 0.95), st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_split_partition_and_stratification(n_spam, n_ham, frac, seed):
    original = fake_manifest(n_spam, n_ham)
    m = split_corpus(original, frac, seed)
    assert [e.path for e in m] == [e.path for e in original]
    assert [e.label for e in m] == [e.label for e in original]
    for label, n in (("spam", n_spam), ("ham", n_ham)):
        n_test = sum(e.label == label and e.split == "test" for e in m)
        assert abs(n_test - frac * n) <= 1
        assert 1 <= n_test <= n - 1
    again = split_corpus(original, frac, seed)
    assert [e.split for e in again] == [e.split for e in m]


def test_split_errors():
    with pytest.raises(CorpusError):
        split_corpus(fake_manifest(1, 5), 0.5)
    with pytest.raises(ValueError):
        split_corpus(fake_manifest(3, 3), 1.0)


# --------------------------------------------------------------- manifest


def test_manifest_roundtrip(tmp_path):
    m = generate_synthetic_corpus(small_spec(), tmp_path / "c")
    save_manifest(m, tmp_path / "copy" / "other.jsonl")
    back = load_manifest(tmp_path / "copy" / "other.jsonl")
    assert back.corpus_id == "other"
    assert [(e.label, e.split) for e in back] == [(e.label, e.split) for e in m]
    assert [p.resolve() for p in back.paths()] == [p.resolve() for p in m.paths()]
    for line in (tmp_path / "copy" / "other.jsonl").read_text().splitlines():
        assert set(json.loads(line)) == {"path", "label", "split"}


def test_missing_files_listed(tmp_path):
    m = generate_synthetic_corpus(small_spec(), tmp_path)
    gone = [m.entries[1].path, m.entries[5].path]
    for p in gone:
        os.remove(tmp_path / p)
    with pytest.raises(ManifestValidationError) as info:
        load_manifest(tmp_path / "manifest.jsonl")
    assert sorted(info.value.missing) == sorted(gone)
    assert gone[0] in str(info.value)


def test_empty_manifest(tmp_path):
    (tmp_path / "empty.jsonl").write_text("")
    m = load_manifest(tmp_path / "empty.jsonl")
    assert len(m) == 0
    assert m.labels().shape == (0,)


def test_manifest_rejects_bad_records(tmp_path):
    (tmp_path / "bad.jsonl").write_text('{"path": "a.png", "label": "eggs", "split": "train"}\n')
    with pytest.raises(CorpusError):
        load_manifest(tmp_path / "bad.jsonl", validate=False)
    (tmp_path / "bad2.jsonl").write_text("not json\n")
    with pytest.raises(CorpusError):
        load_manifest(tmp_path / "bad2.jsonl", validate=False)
    with pytest.raises(CorpusError):
        CorpusManifest([Entry("a.png", "spam"), Entry("a.png", "ham")])
