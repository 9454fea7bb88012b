"""On-disk format, padding arithmetic, and p-value transforms."""

import json

import numpy as np
import pytest

from deepfdr.volume import (Volume3D, VolumeFormatError, crop_to, load_volume, pad_to,
                            save_volume, z_to_pvalue)


def linear(ix, iy, iz, dims):
    nx, ny, _ = dims
    return ix + nx * (iy + ny * iz)


def random_volume(shape, seed, masked=False):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=int(np.prod(shape))).astype(np.float32).astype(np.float64)
    mask = rng.uniform(size=data.size) < 0.7 if masked else None
    return Volume3D(dims=shape, data=data, mask=mask)


def test_x_fastest_layout():
    dims = (2, 2, 2)
    v = Volume3D(dims=dims, data=np.arange(8.0))
    assert v.data[linear(1, 0, 0, dims)] == 1.0
    assert v.data[linear(0, 1, 0, dims)] == 2.0
    assert v.data[linear(0, 0, 1, dims)] == 4.0
    assert v.to_grid()[1, 0, 0] == 1.0
    assert v.to_grid()[0, 1, 0] == 2.0


def test_length_mismatch_on_construction():
    with pytest.raises(VolumeFormatError, match="length mismatch"):
        Volume3D(dims=(2, 2, 2), data=np.zeros(7))


def test_payload_length_mismatch_on_load(tmp_path):
    v = Volume3D(dims=(2, 2, 2), data=np.zeros(8))
    save_volume(v, tmp_path / "a.vol", "statistic")
    raw = (tmp_path / "a.vol").read_bytes()
    (tmp_path / "a.vol").write_bytes(raw[:-4])
    with pytest.raises(VolumeFormatError, match="length mismatch"):
        load_volume(tmp_path / "a.vol")


@pytest.mark.parametrize("masked", [False, True])
def test_round_trip_bit_identical(tmp_path, masked):
    v = random_volume((5, 4, 3), seed=9, masked=masked)
    save_volume(v, tmp_path / "v.vol", "statistic")
    w = load_volume(tmp_path / "v.vol")
    assert w.dims == v.dims
    assert np.array_equal(w.data, v.data)
    if masked:
        assert np.array_equal(w.mask, v.mask)
    else:
        assert w.mask is None
    # a second save/load reproduces the exact bytes
    save_volume(w, tmp_path / "w.vol", "statistic")
    assert (tmp_path / "w.vol").read_bytes() == (tmp_path / "v.vol").read_bytes()


@pytest.mark.parametrize("kind", ["statistic", "pvalue", "label", "rejection",
                                  "probability"])
def test_round_trip_all_kinds(tmp_path, kind):
    rng = np.random.default_rng(13)
    if kind in ("label", "rejection"):
        data = (rng.uniform(size=24) < 0.4).astype(np.float64)
    elif kind in ("pvalue", "probability"):
        data = rng.uniform(size=24).astype(np.float32).astype(np.float64)
    else:
        data = rng.normal(size=24).astype(np.float32).astype(np.float64)
    v = Volume3D(dims=(4, 3, 2), data=data, mask=rng.uniform(size=24) < 0.8)
    save_volume(v, tmp_path / "k.vol", kind)
    w = load_volume(tmp_path / "k.vol")
    assert w.kind == kind
    assert np.array_equal(w.data, v.data)
    assert np.array_equal(w.mask, v.mask)


def test_range_check_blocks_write(tmp_path):
    bad = Volume3D(dims=(2, 1, 1), data=np.array([0.0, 2.0]))
    with pytest.raises(VolumeFormatError):
        save_volume(bad, tmp_path / "r.vol", "rejection")
    assert not (tmp_path / "r.vol").exists()


def test_empty_mask_saved_all_false(tmp_path):
    v = Volume3D(dims=(2, 2, 1), data=np.zeros(4), mask=np.zeros(4, dtype=bool))
    save_volume(v, tmp_path / "m.vol", "label")
    w = load_volume(tmp_path / "m.vol")
    assert w.mask is not None and not w.mask.any()


def test_sidecar_validation(tmp_path):
    v = random_volume((2, 2, 2), seed=1)
    save_volume(v, tmp_path / "s.vol", "statistic")
    sidecar = json.loads((tmp_path / "s.vol.json").read_text())
    sidecar["extra"] = 1
    (tmp_path / "s.vol.json").write_text(json.dumps(sidecar))
    with pytest.raises(VolumeFormatError, match="exactly keys"):
        load_volume(tmp_path / "s.vol")
    (tmp_path / "s.vol.json").write_text("{not json")
    with pytest.raises(VolumeFormatError, match="corrupt sidecar"):
        load_volume(tmp_path / "s.vol")
    (tmp_path / "s.vol.json").unlink()
    with pytest.raises(VolumeFormatError, match="missing sidecar"):
        load_volume(tmp_path / "s.vol")


def test_kind_checks_on_load(tmp_path):
    v = Volume3D(dims=(2, 1, 1), data=np.array([0.25, 0.5]))
    save_volume(v, tmp_path / "p.vol", "pvalue")
    sidecar = json.loads((tmp_path / "p.vol.json").read_text())
    sidecar["kind"] = "rejection"
    (tmp_path / "p.vol.json").write_text(json.dumps(sidecar))
    with pytest.raises(VolumeFormatError, match="exactly 0 or 1"):
        load_volume(tmp_path / "p.vol")


def test_z_to_pvalue_values():
    z = Volume3D(dims=(4, 1, 1), data=np.array([0.0, 1.959963985, 8.0, -1.959963985]))
    p = z_to_pvalue(z)
    assert p.kind == "pvalue"
    assert p.data[0] == 1.0
    # reference erfc evaluation at 22 digits: 0.04999999994623687540164
    assert abs(p.data[1] - 0.04999999994623687540164) < 1e-9
    assert p.data[2] < 1e-14
    assert p.data[3] == p.data[1]


def test_z_to_pvalue_monotone_and_symmetric():
    zs = np.linspace(0.0, 6.0, 200)
    z = Volume3D(dims=(200, 1, 1), data=zs)
    p = z_to_pvalue(z).data
    assert np.all(np.diff(p) < 0)
    zneg = z_to_pvalue(Volume3D(dims=(200, 1, 1), data=-zs)).data
    assert np.array_equal(p, zneg)


def test_z_to_pvalue_unmasked_set_to_one():
    mask = np.array([True, False, True, False])
    z = Volume3D(dims=(4, 1, 1), data=np.array([1.0, 2.0, 3.0, 4.0]), mask=mask)
    p = z_to_pvalue(z)
    assert p.data[1] == 1.0 and p.data[3] == 1.0
    assert p.data[0] < 1.0


def test_z_to_pvalue_nonfinite_masked_entry():
    with pytest.raises(VolumeFormatError, match="finite"):
        Volume3D(dims=(2, 1, 1), data=np.array([np.nan, 1.0]))


def test_pad_to_placement_and_fill():
    v = random_volume((3, 3, 3), seed=2)
    padded = pad_to(v, (5, 4, 3), fill=7.0)
    assert padded.dims == (5, 4, 3)
    # offset floor((t - s)/2) per axis: (1, 0, 0)
    assert padded.to_grid()[1, 0, 0] == v.to_grid()[0, 0, 0]
    grid_mask = padded.mask.reshape(3, 4, 5).transpose(2, 1, 0)
    assert grid_mask[1:4, 0:3, 0:3].all()
    assert not grid_mask[0, :, :].any()
    outside = padded.data[~padded.mask]
    assert np.all(outside == 7.0)
    # multiset of masked values preserved
    assert sorted(padded.masked_values()) == sorted(v.data)


def test_pad_to_30_to_32_offsets():
    v = random_volume((30, 30, 30), seed=3)
    padded = pad_to(v, (32, 32, 32), fill=0.0)
    assert np.array_equal(padded.to_grid()[1:31, 1:31, 1:31], v.to_grid())
    pv = pad_to(Volume3D(dims=(2, 2, 2), data=np.full(8, 0.5), kind="pvalue"),
                (4, 4, 4), fill=1.0)
    assert np.all(pv.data[~pv.mask] == 1.0)


def test_pad_identity_and_errors():
    v = random_volume((4, 4, 4), seed=4, masked=True)
    same = pad_to(v, (4, 4, 4), fill=0.0)
    assert np.array_equal(same.data, v.data)
    assert np.array_equal(same.mask, v.mask)
    with pytest.raises(VolumeFormatError, match="smaller than source"):
        pad_to(v, (3, 4, 4), fill=0.0)


def test_crop_inverts_pad():
    v = random_volume((5, 6, 7), seed=5, masked=True)
    padded = pad_to(v, (8, 8, 8), fill=0.0)
    back = crop_to(padded, (5, 6, 7))
    assert np.array_equal(back.data, v.data)
    assert np.array_equal(back.mask, v.mask)
