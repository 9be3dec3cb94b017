import numpy as np
import pytest

from ggdiff.corpus import PATTERNS, CorpusSpec, image_name, make_corpus, make_image


def test_deterministic_and_independent_of_count():
    a = make_corpus(CorpusSpec(6, 32, seed=4))
    b = make_corpus(CorpusSpec(6, 32, seed=4))
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))
    assert np.array_equal(make_image(CorpusSpec(100, 32, seed=4), 5).data, a[5].data)
    assert not np.array_equal(make_corpus(CorpusSpec(6, 32, seed=5))[0].data, a[0].data)


def test_images_valid():
    for im in make_corpus(CorpusSpec(8, 40, seed=0)):
        assert im.shape == (40, 40, 3) and im.colorspace == "RGB"
        assert im.data.min() >= 0 and im.data.max() <= 1
        assert im.data.std() > 0.01


def test_pattern_cycle():
    spec = CorpusSpec(5, 16, patterns=("checker", "blobs"), seed=0)
    assert spec.patterns == ("checker", "blobs")
    assert len(make_corpus(spec)) == 5
    assert make_corpus(CorpusSpec(0, 16)) == []


@pytest.mark.parametrize("kw", [dict(count=-1), dict(size=4), dict(patterns=("stripes",)), dict(patterns=())])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        CorpusSpec(**kw)


def test_names():
    assert image_name(3) == "img_0003.ppm" and set(PATTERNS) == {"gradient", "checker", "blobs", "texture"}
