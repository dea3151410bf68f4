import numpy as np
import pytest

from hanrock.aux_targets import FAMILIES
from hanrock.experiments import (ALL_FAMILIES, DeskConfig, desk_context, expand_preset, family_mask, prepare_desk,
                                 preset_weights, run_preset)
from hanrock.training import HParams


def test_family_masks_partition_the_sixteen_tasks():
    masks = [family_mask(f) for f in ALL_FAMILIES]
    assert np.array_equal(np.sum(masks, axis=0), np.ones(16))
    assert set(FAMILIES) == set(ALL_FAMILIES)
    with pytest.raises(ValueError):
        family_mask("gestures")


@pytest.mark.parametrize("name, active, variant", [
    ("h1-baseline", 0, "rock"), ("h1-ap", 8, "rock"), ("h1-aphf", 16, "rock"), ("h3-flat", 16, "flat"),
    ("h3-rock", 16, "rock"), ("h2:64", 16, "rock"),
])
def test_presets(name, active, variant):
    p = expand_preset(name)
    assert p.active_mask.sum() == active and p.variant == variant


def test_h1_ap_activates_actions_and_prosody():
    assert np.flatnonzero(expand_preset("h1-ap").active_mask).tolist() == list(range(8))


def test_h2_pins_primary_units():
    assert expand_preset("h2", P=16).fixed == {"P": 16}
    assert expand_preset("h2:1").name == "h2:1"
    with pytest.raises(ValueError):
        expand_preset("h2")
    with pytest.raises(ValueError):
        expand_preset("h4")


@pytest.fixture(scope="module")
def prepared():
    cfg = DeskConfig(n_conversations=10, turns_per_conv=6, budget=2, max_epochs=1, embed_dim=8, fusion_dim=4,
                     capacity=5, P=4, P_sweep=(1, 4))
    return cfg, prepare_desk(cfg)


@pytest.mark.parametrize("name", ["h1-baseline", "h1-ap", "h1-aphf", "h3-flat"])
def test_preset_weights_zero_inactive_tasks(prepared, name):
    cfg, prep = prepared
    preset = expand_preset(name)
    for scheme in ("random", "linear-mi", "softmax-mi"):
        hp = HParams(P=4, L=2, scheme=scheme, w_primary=0.7)
        w = preset_weights(preset, desk_context(cfg, prep, preset), hp)
        assert np.all(w.w_aux[~preset.active_mask] == 0)
        assert np.all(w.w_aux[preset.active_mask] > 0)
        assert abs(w.as_array().sum() - 1) < 1e-12
        if not preset.active_mask.any():
            assert w.w_primary == 1.0


def test_run_preset_records_preset_and_weights(prepared):
    cfg, prep = prepared
    table = run_preset(cfg, prep, expand_preset("h1-ap"))
    assert table.meta["preset"]["name"] == "h1-ap"
    for r in table.records:
        assert np.all(r.weights.w_aux[8:] == 0)
    flat = run_preset(cfg, prep, expand_preset("h3-flat"))
    assert {r.hparams.P for r in flat.records} == {cfg.P}
