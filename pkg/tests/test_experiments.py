import numpy as np
import pytest

from mitml.experiments import (
    DESK_RECIPE,
    LAMBDAS,
    N_FRAMES,
    desk_config,
    modality_probe,
    run_variant,
    sweep_configs,
    sweep_csv,
)
from mitml.training import TrainConfig


def test_desk_config_applies_recipe():
    cfg = desk_config(seed=3)
    assert cfg.epochs == DESK_RECIPE["epochs"] and cfg.seed == 3 and not cfg.augment


def test_sweep_configs():
    base = desk_config()
    lam = sweep_configs("lambda", base)
    assert [v for v, _ in lam] == list(LAMBDAS) == [0.01, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0]
    assert all(c.mode == "full" and c.lam == v for v, c in lam)
    assert [c.frames_per_tracklet for _, c in sweep_configs("n-frames", base)] == list(N_FRAMES)
    assert {c.mode for _, c in sweep_configs("pooling", base)} == {"baseline"}
    assert [v for v, _ in sweep_configs("adv-mode", base)] == ["three_class", "inverse_label", "uniform_target"]
    with pytest.raises(ValueError):
        sweep_configs("depth", base)


def test_probe_separates_and_fails_on_chance(rng):
    n = 60
    mods = np.tile([0, 1], n // 2)
    groups = np.repeat(np.arange(n // 2), 2)
    separable = rng.normal(size=(n, 6)) + 3.0 * mods[:, None]
    assert modality_probe(separable, mods, groups) >= 0.9
    mixed = rng.normal(size=(n, 6))
    assert modality_probe(mixed, mods, groups) < 0.75
    with pytest.raises(ValueError):
        modality_probe(mixed, np.zeros(n, int), groups)


def test_probe_ignores_feature_scale(rng):
    n = 40
    mods = np.tile([0, 1], n // 2)
    groups = np.repeat(np.arange(n // 2), 2)
    x = rng.normal(size=(n, 4))
    # modality encoded only in the norm: invisible after L2 normalisation
    scaled = x * np.where(mods == 1, 10.0, 1.0)[:, None]
    assert modality_probe(scaled, mods, groups) == modality_probe(x, mods, groups)


def test_run_variant_and_csv(small_store):
    cfg = TrainConfig(epochs=1, stage_channels=[4, 4, 8, 8, 8], batch_identities=4, augment=False, mode="baseline")
    res = run_variant(small_store, cfg)
    assert [r.direction for r in res.reports] == ["ir_to_vis", "vis_to_ir"]
    text = sweep_csv("pooling", [("average", res)])
    lines = text.splitlines()
    assert lines[0] == "sweep,value,direction,r1,r5,r10,r20,map,num_queries"
    assert lines[1].startswith("pooling,average,ir_to_vis,")
