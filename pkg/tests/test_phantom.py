import json

import numpy as np
import pytest
from scipy import ndimage

from m2mil.phantom import (AIR_HU, CaseRecord, CorruptHeaderError, ExtentMismatchError, PhantomConfig,
                           TruncatedPayloadError, generate_case, generate_dataset, infected_fraction, lobe_labels,
                           read_case, read_manifest, write_case, write_manifest)

SMALL = PhantomConfig(depth=(32, 34), height=(64, 66), width=(64, 66))


def independent_infected_fraction(case):
    """Voxel scan: a lung voxel is infected where some blob's Gaussian reaches 1/2."""
    d, h, w = case.volume.shape
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    infected = np.zeros((d, h, w), dtype=bool)
    for b in case.blobs:
        r2 = (zz - b.center[0]) ** 2 + (yy - b.center[1]) ** 2 + (xx - b.center[2]) ** 2
        infected |= r2 <= 2 * b.sigma ** 2 * np.log(2)
    lung = case.mask > 0
    return (infected & lung).sum() / lung.sum()


def test_lobe_labels_partition_and_connectivity():
    lab = lobe_labels((40, 80, 80))
    assert set(np.unique(lab)) == {0, 1, 2, 3, 4, 5}
    for k in range(1, 6):
        assert ndimage.label(lab == k)[1] == 1


def test_generate_case_is_deterministic():
    a, b = generate_case(11, SMALL), generate_case(11, SMALL)
    assert a.volume.tobytes() == b.volume.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes()
    assert a.severe == b.severe


def test_intensity_layout():
    c = generate_case(3, SMALL)
    lung = c.mask > 0
    assert c.volume.min() <= AIR_HU
    assert abs(np.median(c.volume[lung]) + 850) < 120
    body_only = (c.volume > -200)
    assert abs(np.median(c.volume[body_only])) < 40


def test_zero_blobs_is_non_severe():
    c = generate_case(5, PhantomConfig(n_blobs=0))
    assert not c.severe and c.infected_fraction == 0.0 and c.blobs == []


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4, 5])
def test_infected_fraction_matches_voxel_scan(seed):
    config = PhantomConfig(depth=(32, 34), height=(64, 66), width=(64, 66), severe_prob=0.5)
    c = generate_case(seed, config)
    assert c.infected_fraction == pytest.approx(independent_infected_fraction(c), abs=2e-3)
    assert c.infected_fraction == infected_fraction(c.volume.shape, c.mask, c.blobs)
    assert c.severe == (c.infected_fraction >= config.tau)


def test_degenerate_config_rejected():
    with pytest.raises(ValueError):
        PhantomConfig(depth=(16, 20))
    with pytest.raises(ValueError):
        PhantomConfig(tau=1.5)


def test_case_round_trip(tmp_path):
    c = generate_case(2, SMALL)
    rel_vol, rel_mask = write_case(tmp_path, "c0", c.volume, c.mask, c.spacing)
    rec = CaseRecord("c0", rel_vol, rel_mask, c.severe, "p0")
    vol, mask, spacing = read_case(tmp_path, rec)
    assert vol.tobytes() == c.volume.tobytes()
    assert np.array_equal(mask, c.mask)
    assert spacing == pytest.approx(c.spacing)


def test_mask_less_case_reads_absent_mask(tmp_path):
    rel_vol, rel_mask = write_case(tmp_path, "c1", np.zeros((2, 3, 4)), None)
    assert rel_mask is None
    _, mask, _ = read_case(tmp_path, CaseRecord("c1", rel_vol, None, False, "p"))
    assert mask is None


def test_manifest_order_is_stable(tmp_path):
    recs = [CaseRecord(f"c{i:02d}", f"cases/c{i:02d}.vol", None, i % 5 == 0, f"p{i // 3}") for i in range(20)]
    write_manifest(tmp_path, recs)
    assert read_manifest(tmp_path) == recs


def test_distinct_read_errors(tmp_path):
    rel_vol, _ = write_case(tmp_path, "c2", np.ones((2, 3, 4)), None)
    rec = CaseRecord("c2", rel_vol, None, False, "p")
    vol_path = tmp_path / rel_vol
    good = vol_path.read_bytes()

    vol_path.write_bytes(good[:-4])
    with pytest.raises(TruncatedPayloadError):
        read_case(tmp_path, rec)
    vol_path.write_bytes(good + b"\0\0\0\0")
    with pytest.raises(ExtentMismatchError):
        read_case(tmp_path, rec)
    vol_path.write_bytes(good)
    (tmp_path / "cases" / "c2.json").write_text("{not json")
    with pytest.raises(CorruptHeaderError):
        read_case(tmp_path, rec)
    with pytest.raises(ExtentMismatchError):
        write_case(tmp_path, "c3", np.ones((2, 3, 4)), np.ones((2, 3, 5), dtype=np.uint8))


def test_generate_dataset_layout(tmp_path):
    recs = generate_dataset(tmp_path, n_cases=9, seed=1, mask_fraction=1 / 3, config=SMALL)
    assert len(recs) == 9
    assert sum(r.mask_path is not None for r in recs) == 3
    assert len({r.patient_id for r in recs}) == 3
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["version"] == 1 and len(doc["cases"]) == 9
    for r in recs:
        vol, mask, _ = read_case(tmp_path, r)
        assert (mask is None) == (r.mask_path is None)


def test_dataset_generation_is_byte_identical(tmp_path):
    generate_dataset(tmp_path / "a", n_cases=3, seed=4, config=SMALL)
    generate_dataset(tmp_path / "b", n_cases=3, seed=4, config=SMALL)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_default_generator_severe_share():
    labels = [generate_case(s).severe for s in range(60)]
    assert 0.08 <= np.mean(labels) <= 0.35
