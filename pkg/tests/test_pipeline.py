import json

import numpy as np
import pytest

from perturbforge.attacks import UniversalConfig, load_perturbation
from perturbforge.corpus import CorpusManifest, SyntheticSpec, generate_synthetic_corpus
from perturbforge.exceptions import ContractError
from perturbforge.imaging import load_image
from perturbforge.models import Checkpoint, build_classifier, build_surrogate, init_weights
from perturbforge.pipeline import PipelineConfig, StageTiming, build_adversarial_corpus, stage_timings


def untrained(spec, seed):
    net_weights = init_weights(spec, np.random.default_rng(seed))
    return Checkpoint(spec, np.concatenate([w.reshape(-1) for w in net_weights]))


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    manifest = generate_synthetic_corpus(SyntheticSpec(6, 6, 400, seed=1), root / "corpus")
    models = dict(
        cam_model=untrained(build_classifier("cnn"), 0),
        surrogate=untrained(build_surrogate("cnn"), 1),
        inverted_model=untrained(build_surrogate("cnn", labels_inverted=True), 2),
    )
    return root, manifest, models


def config(small_run, out, **kw):
    root, manifest, models = small_run
    opts = dict(manifest=manifest, universal=UniversalConfig(max_iterations=2, xi=16 / 255), dream_iterations=3,
                dream_limit=4, seed=5, **models)
    opts.update(kw)
    return PipelineConfig(out_dir=root / out, **opts)


@pytest.fixture(scope="module")
def first(small_run):
    return build_adversarial_corpus(config(small_run, "run1"))


def test_output_invariants(small_run, first):
    _, manifest, _ = small_run
    spam = manifest.select(label="spam")
    assert len(first.manifest) == len(spam) - len(first.failures)
    assert not first.failures
    hashes = {r.perturbation_hash for r in first.report.records}
    assert hashes == {first.artifact.sha256}
    for path in first.manifest.paths():
        assert load_image(path).shape == (400, 400, 3)
    assert np.abs(first.artifact.vector).max() <= 16 / 255
    stored = load_perturbation(first.manifest.root.parent.parent / "perturbations" / "universal.uprt")
    assert stored.sha256 == first.artifact.sha256


def test_same_seed_same_corpus(small_run, first):
    second = build_adversarial_corpus(config(small_run, "run2"))
    a, b = first.manifest.root, second.manifest.root
    assert (a / "records.jsonl").read_bytes() == (b / "records.jsonl").read_bytes()
    for entry in first.manifest.entries:
        assert (a / entry.path).read_bytes() == (b / entry.path).read_bytes()


def test_records_name_one_natural_each(first):
    lines = (first.manifest.root / "records.jsonl").read_text().splitlines()
    recs = [json.loads(line) for line in lines]
    assert len(recs) == len(first.manifest)
    assert all(isinstance(r["natural_index"], int) and r["natural_index"] >= 0 for r in recs)
    assert len({r["perturbation_sha256"] for r in recs}) == 1


def test_stage_timings_add_up(first):
    means = stage_timings(first)
    assert set(means) == {"cam", "mask", "natural", "universal", "total"}
    parts = means["cam"] + means["mask"] + means["natural"] + means["universal"]
    assert 0 < parts <= means["total"]
    with pytest.raises(ContractError):
        stage_timings([])
    t = [StageTiming("a", 1, 2, 3, 4, 11), StageTiming("b", 3, 2, 1, 0, 7)]
    assert stage_timings(t) == {"cam": 2, "mask": 2, "natural": 2, "universal": 2, "total": 9}


def test_failures_are_isolated(small_run, tmp_path):
    root, manifest, _ = small_run
    bad = tmp_path / "corpus"
    bad.mkdir()
    spam = manifest.select(label="spam")
    broken = spam.entries[0].path
    for entry in manifest.entries:
        data = manifest.resolve(entry).read_bytes()
        (bad / entry.path).parent.mkdir(parents=True, exist_ok=True)
        (bad / entry.path).write_bytes(b"not an image" if entry.path == broken else data)
    copy = CorpusManifest(manifest.entries, manifest.corpus_id, bad)
    nat_dir = root / "run1" / "perturbations" / "natural"
    result = build_adversarial_corpus(config(small_run, "broken", manifest=copy, natural_dir=nat_dir,
                                             inverted_model=None))
    assert len(result.failures) == 1
    assert result.failures[0].stage == "load"
    assert len(result.manifest) == len(spam) - 1


def test_empty_spam_subset(small_run, tmp_path):
    _, manifest, models = small_run
    ham_only = CorpusManifest(manifest.select(label="ham").entries, "ham", manifest.root)
    result = build_adversarial_corpus(PipelineConfig(manifest=ham_only, out_dir=tmp_path, **models))
    assert len(result.manifest) == 0 and result.artifact is None
    assert (tmp_path / "adversarial" / "pipeline" / "manifest.jsonl").is_file()


def test_config_validation(small_run, tmp_path):
    _, manifest, models = small_run
    with pytest.raises(ValueError):
        PipelineConfig(manifest=manifest, out_dir=tmp_path, alpha=1.5, **models)
    with pytest.raises(ContractError):
        PipelineConfig(manifest=manifest, out_dir=tmp_path, cam_model=models["cam_model"],
                       surrogate=models["surrogate"])
    with pytest.raises(ContractError):
        PipelineConfig(manifest=manifest, out_dir=tmp_path, refit_universal=False, **models)
