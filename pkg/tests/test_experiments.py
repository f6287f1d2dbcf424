import pytest

from rfcn.experiments import ComparisonConfig, compare, seed_dataset


def tiny(**kw):
    base = dict(scale=0.5, sequences=4, length=6, epochs=1, seeds=(1, 2), precision=64)
    base.update(kw)
    return ComparisonConfig(**base)


def test_one_run_per_seed_with_medians():
    rows = []
    result = compare(tiny(), log=lambda preset, seed, row: rows.append((preset, seed)))
    assert [r.seed for r in result.runs] == [1, 2]
    assert result.fc_median == pytest.approx(sum(r.fc_f for r in result.runs) / 2)
    assert {p for p, _ in rows} == {"fc-lenet", "rfc-lenet"}
    assert set(result.summary()) >= {"fc_f", "rfc_f", "fc_median", "rfc_median"}


def test_same_seed_same_scores():
    a, b = compare(tiny(seeds=(3,))), compare(tiny(seeds=(3,)))
    assert (a.runs[0].fc_f, a.runs[0].rfc_f) == (b.runs[0].fc_f, b.runs[0].rfc_f)


def test_seed_dataset_uses_the_preset_canvas():
    ds = seed_dataset(tiny(), 1, (14, 14))
    assert ds.train[0].frames[0].shape[-2:] == (14, 14)
    assert len(ds.train) + len(ds.test) == 4


def test_presets_must_share_an_input_size():
    with pytest.raises(ValueError, match="input size"):
        compare(tiny(fc_preset="fc-vgg"))
