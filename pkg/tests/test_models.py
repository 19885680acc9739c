import json

import numpy as np
import pytest

from skyseg import models
from skyseg.core import ConfigurationError
from skyseg.features import FeatureSpec

FAST = {"sa-mrf": {"t_max": 3}, "sa-icm-mrf": {"t_max": 3}}


@pytest.mark.parametrize("family", models.FAMILIES)
def test_round_trip_identical_predictions(family, well_separated, tmp_path):
    spec = FeatureSpec("X3", standardize=family in models.DISCRIMINATIVE)
    frames = well_separated.features(spec, "train")[:3]
    seg = models.train(family, frames, spec, FAST.get(family), seed=3, lam=0.9)
    path = tmp_path / "m.json"
    models.save_model(path, seg)
    back = models.load_model(path)
    assert back.family == family and back.lam == 0.9 and back.spec == spec
    test = well_separated.features(spec, "test")[0]
    p0, m0 = seg.segment(test)
    p1, m1 = back.segment(test)
    np.testing.assert_array_equal(m0, m1)
    np.testing.assert_allclose(p0, p1, rtol=0, atol=1e-12)
    # saving the loaded model again gives the same bytes
    models.save_model(tmp_path / "m2.json", back)
    assert (tmp_path / "m2.json").read_text() == path.read_text()


def test_model_file_errors(tmp_path, well_separated):
    spec = FeatureSpec()
    seg = models.train("gda", well_separated.features(spec, "train")[:2], spec)
    d = models.to_dict(seg)
    with pytest.raises(models.ModelFileError, match="version"):
        models.from_dict({**d, "version": 99})
    with pytest.raises(models.ModelFileError):
        models.from_dict({**d, "format": "other"})
    with pytest.raises(models.ModelFileError):
        models.from_dict({k: v for k, v in d.items() if k != "model"})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(models.ModelFileError):
        models.load_model(bad)
    json.dumps(d)  # plain JSON types only


def test_hyper_resolution():
    assert models.resolve_hyper("svc", {"C": "10"}) == {"C": 10.0, "n": 2}
    with pytest.raises(ConfigurationError):
        models.resolve_hyper("nope")
    with pytest.raises(ConfigurationError):
        models.resolve_hyper("gda", {"beta": 1})


def test_supervised_family_needs_labels(well_separated):
    spec = FeatureSpec()
    frames = well_separated.features(spec, "test", labelled=False)
    unl = [f for f in frames if f.labels is None]
    if not unl:
        pytest.skip("all synthetic test frames labelled")
    with pytest.raises(ConfigurationError):
        models.train("rrc", unl, spec)
