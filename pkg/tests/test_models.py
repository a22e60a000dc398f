import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedifl.models import (
    NETWORK_IDS,
    ArchitectureConfig,
    build_bundle,
    generate,
    generator_input,
    identify,
    init_disentanglers,
    label_index,
    load_network,
    save_bundle,
    set_frozen,
)
from fedifl.nn import step_network

DESK = ArchitectureConfig.desk()


def small(**kw):
    return ArchitectureConfig.desk(input_length=64, **kw)


def test_default_primary_shape():
    b = build_bundle(ArchitectureConfig(), (0, 1, 3), range(5), seed=0)
    x = np.random.default_rng(0).standard_normal((1, 1, 1024)).astype(np.float32)
    assert b["P"].eval()(x).shape == (1, 32, 256)
    assert b.arch.primary_shape == (32, 256)


def test_input_length_must_divide_by_16():
    with pytest.raises(ValueError, match="divisible by 16"):
        ArchitectureConfig(input_length=1000)


def test_empty_or_foreign_label_space_rejected():
    with pytest.raises(ValueError):
        build_bundle(DESK, (), (0, 1), seed=0)
    with pytest.raises(ValueError):
        build_bundle(DESK, (0, 7), (0, 1), seed=0)


def test_equal_seeds_give_identical_parameters():
    a = build_bundle(DESK, (0, 1), range(5), seed=3)
    b = build_bundle(DESK, (0, 1), range(5), seed=3)
    c = build_bundle(DESK, (0, 1), range(5), seed=4)
    for k in NETWORK_IDS:
        for name, v in a[k].state().items():
            assert np.array_equal(v, b[k].state()[name])
    assert not np.array_equal(a["P"].state()["conv1.kernel"], c["P"].state()["conv1.kernel"])


def test_extractor_init_is_independent_of_label_space():
    a = build_bundle(DESK, (0, 1), range(5), seed=3)
    b = build_bundle(DESK, (0, 2, 3, 4), range(5), seed=3)
    for k in ("P", "D", "DI", "DS", "I", "global_clf"):
        for name, v in a[k].state().items():
            assert np.array_equal(v, b[k].state()[name])


def test_generator_output_matches_primary_features():
    space = (0, 2, 3, 4)
    b = build_bundle(DESK, space, range(5), seed=1)
    noise = np.zeros((3, DESK.noise_dim), np.float32)
    inp = generator_input([0, 3, 4], space, noise)
    assert inp.shape == (3, DESK.noise_dim + len(space))
    assert np.array_equal(inp[:, DESK.noise_dim:], np.eye(4, dtype=np.float32)[[0, 2, 3]])
    out = b["G"](inp)
    assert out.shape == (3, *DESK.primary_shape)
    assert out[0].size == DESK.channels[2] * DESK.input_length // 4


def test_classifier_widths():
    b = build_bundle(DESK, (0, 1, 3), range(5), seed=0)
    feats = np.ones((2, DESK.feature_dim), np.float32)
    assert b["local_clf"](feats).shape == (2, 3)
    assert b["global_clf"](feats).shape == (2, 5)
    assert b.local_index == {0: 0, 1: 1, 3: 2}


def test_label_index_is_pure_function_of_set():
    assert label_index([3, 0, 1, 3]) == label_index((1, 0, 3)) == {0: 0, 1: 1, 3: 2}


def test_disentanglers_copy_deep_extractor():
    b = build_bundle(DESK, (0, 1), range(5), seed=2)
    before = {k: v.copy() for k, v in b["D"].state().items()}
    init_disentanglers(b)
    for key in ("DI", "DS"):
        for name, v in b[key].state().items():
            assert np.array_equal(v, b["D"].state()[name])
    b["DI"].state()["fc.weight"][...] += 1.0
    for name, v in b["D"].state().items():
        assert np.array_equal(v, before[name])
    init_disentanglers(b)
    snap = b.snapshot(("DI", "DS"))
    init_disentanglers(b)
    for key in ("DI", "DS"):
        for name, v in b[key].state().items():
            assert np.array_equal(v, snap[key][name])


def _ipfg_like_step(b, rng):
    """Gradient through D, local classifier and generator; updates everything unfrozen."""
    space = b.label_space
    x = rng.standard_normal((4, 1, DESK.input_length)).astype(np.float32)
    y = rng.choice(space, 4)
    fake = generate(b["G"], y, space, rng, DESK.noise_dim)
    logits = b["local_clf"](b["D"](b["P"](x) + fake))
    g = b["D"].backward(b["local_clf"].backward(np.ones_like(logits)))
    b["P"].backward(g)
    b["G"].backward(g)
    for k in ("P", "D", "local_clf", "G"):
        step_network(b[k], 0.1)


def test_frozen_networks_bit_identical_over_ten_steps():
    b = build_bundle(DESK, (0, 1), range(5), seed=0)
    set_frozen(b, ("P", "D", "local_clf"), True)
    for k in ("P", "D", "local_clf"):
        b[k].eval()
    frozen = b.snapshot(("P", "D", "local_clf"))
    g0 = b.snapshot(("G",))
    rng = np.random.default_rng(0)
    for _ in range(10):
        _ipfg_like_step(b, rng)
    for k, st_ in frozen.items():
        for name, v in st_.items():
            assert np.array_equal(v, b[k].state()[name]), (k, name)
    assert any(not np.array_equal(v, b["G"].state()[n]) for n, v in g0["G"].items())
    assert b.frozen()["P"] and not b.frozen()["G"]


def test_freeze_unfreeze_and_repeat():
    b = build_bundle(DESK, (0, 1), range(5), seed=0)
    set_frozen(b, "P", True)
    set_frozen(b, "P", True)
    assert b["P"].frozen
    set_frozen(b, ["P"], False)
    before = b.snapshot(("P",))["P"]
    _ipfg_like_step(b, np.random.default_rng(1))
    assert any(not np.array_equal(v, b["P"].state()[n]) for n, v in before.items())


def test_unknown_network_id():
    b = build_bundle(DESK, (0, 1), range(5), seed=0)
    with pytest.raises(KeyError, match="Q"):
        set_frozen(b, ("P", "Q"), True)


def test_checkpoint_round_trip(tmp_path):
    b = build_bundle(DESK, (0, 1), range(5), seed=0)
    paths = save_bundle(b, tmp_path, client=2)
    assert sorted(p.name for p in paths) == sorted(f"2_{k}.params" for k in NETWORK_IDS)
    other = build_bundle(DESK, (0, 1), range(5), seed=9)
    load_network(other["DS"], tmp_path / "2_DS.params")
    for name, v in b["DS"].state().items():
        assert np.array_equal(v, other["DS"].state()[name])


@settings(max_examples=15, deadline=None)
@given(batch=st.integers(2, 5), space=st.sets(st.integers(0, 4), min_size=1), seed=st.integers(0, 100))
def test_forward_shapes_total(batch, space, seed):
    arch = small()
    space = tuple(sorted(space))
    b = build_bundle(arch, space, range(5), seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, 1, arch.input_length)).astype(np.float32)
    pf = b["P"](x)
    assert pf.shape == (batch, *arch.primary_shape)
    for k in ("D", "DI", "DS"):
        assert b[k](pf).shape == (batch, arch.feature_dim)
    fake = generate(b["G"], rng.choice(space, batch), space, rng, arch.noise_dim)
    assert fake.shape == pf.shape
    p = identify(b["I"], np.concatenate([pf, fake]))
    assert p.shape == (2 * batch,)
    assert np.all((p > 0) & (p < 1))
    df = b["D"](pf)
    assert b["local_clf"](df).shape == (batch, len(space))
    assert b["global_clf"](df).shape == (batch, 5)
    assert all(np.isfinite(v).all() for v in (pf, fake, df))
