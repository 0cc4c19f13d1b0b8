import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyclevc import features, metrics, synth
from cyclevc.synth import SpeakerTransform, SynthSpec, SynthSpecError

SMALL = SynthSpec(seed=3, n_train=3, n_eval=2, q=6, t_min=30, t_max=50)


def test_same_seed_same_corpus():
    a, b = synth.generate(SMALL), synth.generate(SMALL)
    for name in ("train_a", "train_b", "eval_a", "eval_b", "oracle_ab", "oracle_ba"):
        assert all(np.array_equal(x, y) for x, y in zip(getattr(a, name), getattr(b, name)))


def test_bounds_respected():
    c = synth.generate(SMALL)
    assert len(c.train_a) == len(c.train_b) == 3 and len(c.eval_a) == 2
    for x in c.train_a + c.train_b + c.eval_a + c.eval_b:
        assert x.shape[0] == 6 and 30 <= x.shape[1] <= 50


def test_speakers_see_different_sentences():
    c = synth.generate(SMALL)
    base_a = [c.transform_a.invert(x) for x in c.train_a]
    base_b = [c.transform_b.invert(x) for x in c.train_b]
    assert all(a.shape != b.shape or not np.allclose(a, b) for a in base_a for b in base_b)


def test_oracle_is_exact_map():
    c = synth.generate(SMALL)
    for a, o in zip(c.eval_a, c.oracle_ab):
        assert metrics.mcd_utterance(c.map_ab(a), o) < 1e-9
    for b, o in zip(c.eval_b, c.oracle_ba):
        np.testing.assert_allclose(c.map_ba(b), o, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_transform_invertible(seed, t):
    rng = np.random.default_rng(seed)
    tr = synth._random_transform(SynthSpec(q=5), rng)
    x = rng.standard_normal((5, t))
    np.testing.assert_allclose(tr.invert(tr.apply(x)), x, atol=1e-9)


def test_transform_parameter_ranges():
    c = synth.generate(SynthSpec(seed=1))
    for tr in (c.transform_a, c.transform_b):
        assert np.all((tr.scale >= 0.5) & (tr.scale <= 2.0))
        np.testing.assert_allclose(tr.mix @ tr.mix.T, np.eye(20), atol=1e-10)
        assert tr.fir[1] == 1.0 and abs(tr.fir[0]) + abs(tr.fir[2]) < 1.0


def test_non_invertible_rejected():
    with pytest.raises(SynthSpecError):
        SpeakerTransform(np.ones(2), np.eye(2), np.array([0.6, 1.0, 0.5]), np.zeros(2))
    with pytest.raises(SynthSpecError):
        SpeakerTransform(np.array([1.0, 0.0]), np.eye(2), np.array([0.0, 1.0, 0.0]), np.zeros(2))
    with pytest.raises(SynthSpecError):
        SynthSpec(fir_side_max=0.5).validate()
    with pytest.raises(SynthSpecError):
        SynthSpec(scale_min=0.0).validate()


def test_spec_text():
    spec = SynthSpec.from_text("# comment\nseed = 9\nq = 7  # dims\nmix_angle = 0.3\n")
    assert (spec.seed, spec.q, spec.mix_angle) == (9, 7, 0.3)
    assert SynthSpec.from_text(spec.to_text()) == spec
    with pytest.raises(SynthSpecError, match="unknown"):
        SynthSpec.from_text("colour = red\n")
    with pytest.raises(SynthSpecError):
        SynthSpec.from_text("q = seven\n")


def test_written_corpus_and_ground_truth(tmp_path):
    c = synth.generate(SMALL)
    manifests = synth.write_corpus(c, tmp_path)
    assert set(manifests) == {"train_a", "train_b", "eval_a", "eval_b", "oracle_ab", "oracle_ba"}
    eval_paths = manifests["eval_a"].read_text().split()
    oracle_paths = manifests["oracle_ab"].read_text().split()
    ta, tb = synth.read_ground_truth(tmp_path / "ground_truth.txt")
    for pa, po in zip(eval_paths, oracle_paths):
        a, o = features.read_features(pa), features.read_features(po)
        mapped = tb.apply(ta.invert(a.astype(np.float64)))
        assert metrics.mcd_utterance(mapped, o) < 1e-3  # float32 storage
    assert SynthSpec.from_text((tmp_path / "synth_spec.txt").read_text()) == SMALL


def test_jitter_fills_high_modulation_band():
    quiet = synth.generate(SynthSpec(seed=5, n_train=1, n_eval=4, q=4, t_min=160, t_max=160, jitter=0.0))
    noisy = synth.generate(SynthSpec(seed=5, n_train=1, n_eval=4, q=4, t_min=160, t_max=160))

    def high_band(c):
        return np.mean([metrics.modulation_spectra(x)[:, 20:].mean() for x in c.eval_a])

    assert high_band(noisy) > high_band(quiet) + 2.0  # at least two decades more power
    with pytest.raises(SynthSpecError):
        SynthSpec(jitter=-0.1).validate()
