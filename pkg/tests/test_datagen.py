import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedifl.datagen import (
    ClientDataset,
    DomainShiftSpec,
    FleetLayout,
    FormatError,
    LabelSpaceWarning,
    Shift,
    batch_iter,
    default_layout,
    default_shift_spec,
    label_space_violations,
    load_external,
    no_shift,
    save_fleet,
    synth_fleet,
)


def one_nn_accuracy(train_x, train_y, test_x, test_y):
    a = train_x.reshape(len(train_x), -1).astype(np.float64)
    b = test_x.reshape(len(test_x), -1).astype(np.float64)
    d = (b**2).sum(1)[:, None] - 2 * b @ a.T + (a**2).sum(1)[None]
    return float((train_y[d.argmin(1)] == test_y).mean())


@pytest.fixture(scope="module")
def small_fleet():
    return synth_fleet(default_layout(), None, 8, 128, seed=3)


def test_default_layout_label_spaces():
    lay = default_layout()
    assert lay.label_space(1) == (0, 1, 3)
    assert lay.label_space(2) == (0, 2, 3, 4)
    assert lay.label_space(3) == (0, 1, 2, 4)
    assert lay.label_space(4) == (0, 2, 3, 4)
    assert lay.global_space() == (0, 1, 2, 3, 4)
    assert sum(len(d) for d in lay.clients.values()) == 15
    assert lay.clients[1] == {1: (0, 1, 3), 2: (0, 1), 3: (0, 3)}


def test_pairwise_label_space_constraint_on_reference_layout():
    # clients 2 and 4 declare the same label set, which is the one pair
    # breaking the non-subset rule; every pair shares at least one label
    problems = label_space_violations({c: default_layout().label_space(c) for c in range(1, 5)})
    assert problems == ["label spaces of clients 2 [0, 2, 3, 4] and 4 [0, 2, 3, 4] are nested"]
    assert label_space_violations({1: (0, 1, 3), 2: (0, 2, 3, 4), 3: (0, 1, 2, 4)}) == []
    assert any("share no label" in p for p in label_space_violations({1: (0,), 2: (1,)}))


def test_fleet_is_deterministic(small_fleet):
    again = synth_fleet(default_layout(), None, 8, 128, seed=3)
    assert all(small_fleet[c].equals(again[c]) for c in small_fleet)
    other = synth_fleet(default_layout(), None, 8, 128, seed=4)
    assert not small_fleet[1].equals(other[1])


def test_fleet_labels_match_layout(small_fleet):
    lay = default_layout()
    for c, ds in small_fleet.items():
        assert ds.label_space == lay.label_space(c)
        assert ds.shape[1:] == (1, 128)
        for d in np.unique(ds.devices):
            assert set(ds.labels[ds.devices == d].tolist()) == set(lay.clients[c][int(d)])


def test_shift_free_devices_are_identical():
    fleet = synth_fleet(default_layout(), no_shift(), 3, 128, seed=0)
    a, b = fleet[1], fleet[3]
    xa = a._signals[(a.devices == 2) & (a.labels == 1)]
    xb = b._signals[(b.devices == 8) & (b.labels == 1)]
    xc = b._signals[(b.devices == 9) & (b.labels == 1)]
    assert np.array_equal(xa, xb) and np.array_equal(xb, xc)


def test_cross_client_shift_defeats_nearest_neighbour():
    lay = default_layout()
    train = synth_fleet(lay, None, 30, 256, seed=0, clients=[1, 2])
    test = synth_fleet(lay, None, 20, 256, seed=0, start_index=30, clients=[1, 2])
    c1 = train[1]
    within = one_nn_accuracy(c1._signals, c1.labels, test[1]._signals, test[1].labels)
    shared = np.isin(test[2].labels, c1.label_space)
    across = one_nn_accuracy(c1._signals, c1.labels, test[2]._signals[shared], test[2].labels[shared])
    assert within > 0.95
    assert across < 0.80


def test_rms_bounded():
    fleet = synth_fleet(default_layout(), None, 10, 256, seed=1)
    for ds in fleet.values():
        rms = np.sqrt((ds._signals.astype(np.float64) ** 2).mean(axis=(1, 2)))
        assert rms.min() >= 0.1 and rms.max() <= 10


def test_client_shift_touches_only_that_client():
    base = default_shift_spec()
    clients = dict(base.clients)
    clients[2] = Shift(clients[2].gain * 1.5, clients[2].noise, clients[2].freq_offset)
    moved = DomainShiftSpec(clients, base.devices)
    a = synth_fleet(default_layout(), base, 2, 128, seed=0)
    b = synth_fleet(default_layout(), moved, 2, 128, seed=0)
    for c in (1, 3, 4):
        assert a[c].equals(b[c])
    for d in np.unique(a[2].devices):
        m = a[2].devices == d
        assert not np.array_equal(a[2]._signals[m], b[2]._signals[m])


def test_heldout_split_differs_and_subset_is_stable():
    lay = default_layout()
    full = synth_fleet(lay, None, 4, 128, seed=0)
    only3 = synth_fleet(lay, None, 4, 128, seed=0, clients=[3])
    held = synth_fleet(lay, None, 4, 128, seed=0, start_index=4, clients=[3])
    assert only3[3].equals(full[3])
    assert not np.array_equal(held[3]._signals, full[3]._signals)


def test_invalid_arguments():
    with pytest.raises(ValueError):
        synth_fleet(n_per_device_per_label=0, L=128)
    with pytest.raises(ValueError):
        synth_fleet(n_per_device_per_label=1, L=32)
    with pytest.raises(ValueError):
        Shift(gain=0.0)


def test_round_trip(tmp_path, small_fleet):
    manifest = save_fleet(small_fleet, tmp_path / "fleet.fds", default_layout())
    assert json.loads(manifest.read_text())["clients"][0]["devices"][0] == {"id": 1, "labels": [0, 1, 3]}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        loaded = load_external(tmp_path / "fleet.fds", manifest)
    assert all(loaded[c].equals(small_fleet[c]) for c in small_fleet)
    assert [w.category for w in caught] == [LabelSpaceWarning]


def test_truncated_file_names_offset(tmp_path, small_fleet):
    path = tmp_path / "fleet.fds"
    save_fleet(small_fleet, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(FormatError) as err:
        load_external(path)
    assert err.value.offset is not None and "byte" in str(err.value)
    path.write_bytes(raw[:10])
    with pytest.raises(FormatError, match="truncated header"):
        load_external(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_external(path)


def test_manifest_label_out_of_range(tmp_path, small_fleet):
    path = tmp_path / "f.fds"
    save_fleet(small_fleet, path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    manifest["clients"][0]["devices"][0]["labels"].append(300)
    with pytest.raises(FormatError, match="outside 0..255"):
        load_external(path, manifest)


def test_unknown_label_rejected(tmp_path, small_fleet):
    path = tmp_path / "f.fds"
    save_fleet(small_fleet, path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    manifest["clients"][0]["devices"][0]["labels"] = [0, 1]
    with pytest.raises(FormatError, match="unknown label id 3"):
        load_external(path, manifest)


def test_layout_round_trips_through_manifest():
    lay = default_layout()
    assert FleetLayout.from_manifest(lay.to_manifest()) == lay


def test_batches_per_epoch_and_drop_last():
    fleet = synth_fleet(FleetLayout({1: {1: (0, 1), 2: (0, 1)}}), None, 128, 64, seed=0)
    ds = fleet[1]
    assert len(ds) == 512
    assert len(list(batch_iter(ds, 256, seed=0))) == 2
    assert len(list(batch_iter(ds, 200, seed=0))) == 2
    with pytest.raises(ValueError, match="smaller than one batch"):
        next(batch_iter(ds, 513, seed=0))
    with pytest.raises(ValueError):
        next(batch_iter(ds, 1, seed=0))


def test_batches_deterministic(small_fleet):
    ds = small_fleet[3]
    a = [y for _, y in batch_iter(ds, 16, seed=5, epoch=2)]
    b = [y for _, y in batch_iter(ds, 16, seed=5, epoch=2)]
    c = [y for _, y in batch_iter(ds, 16, seed=5, epoch=3)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_batches_mix_all_devices():
    # signal value encodes the device, so batches reveal their device mix
    devices = np.repeat([1, 2, 3], [40, 20, 12])
    ds = ClientDataset(1, devices[:, None, None].astype(np.float32) * np.ones((1, 1, 8)),
                       np.zeros(len(devices)), devices)
    for epoch in range(3):
        for x, _ in batch_iter(ds, 12, seed=0, epoch=epoch):
            counts = np.bincount(x[:, 0, 0].astype(int), minlength=4)[1:]
            assert counts.min() >= 1
            assert abs(counts[0] - 40 / 72 * 12) <= 2


def test_access_counter(small_fleet):
    ds = synth_fleet(default_layout(), None, 2, 64, seed=0, clients=[1])[1]
    assert ds.accesses == 0
    _ = len(ds), ds.labels, ds.shape
    assert ds.accesses == 0
    _ = ds.signals
    next(batch_iter(ds, 2, seed=0))
    assert ds.accesses == 2


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000), bs=st.integers(2, 12), client=st.sampled_from([1, 2, 3, 4]))
def test_epoch_covers_label_space(seed, bs, client):
    ds = synth_fleet(default_layout(), None, 6, 64, seed=seed, clients=[client])[client]
    seen = set()
    for _, y in batch_iter(ds, bs, seed=seed):
        seen |= set(y.tolist())
    assert seen == set(ds.label_space)
