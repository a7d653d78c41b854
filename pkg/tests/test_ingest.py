import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psflens.errors import AllZeroKernel, FormatError
from psflens.ingest import (
    PsfDataset,
    dataset_paths,
    load_dataset,
    merge_datasets,
    preprocess_scan,
    save_dataset,
)
from psflens.psf_core import FieldPoint, HighResScan, flux_centroid
from psflens.synthetic_lens import (
    SyntheticLensSpec,
    analytic_psf,
    generate_dataset,
    regenerate_from_meta,
    render_highres,
    series1_plan,
    single_plan,
)

SPEC = SyntheticLensSpec()


@pytest.fixture(scope="module")
def series1():
    return generate_dataset(SPEC, series1_plan())


def test_round_trip_bit_exact(series1, tmp_path):
    save_dataset(series1, tmp_path / "s1")
    back = load_dataset(tmp_path / "s1")
    assert len(back) == 243
    assert back.points == series1.points
    assert back.kernels.tobytes() == series1.kernels.tobytes()
    assert back.pitch == series1.pitch
    assert back.meta == json.loads(json.dumps(series1.meta))


def test_manifest_contents(series1, tmp_path):
    manifest, payload = save_dataset(series1, tmp_path / "s1")
    man = json.loads(manifest.read_text())
    assert man["format_version"] == 1
    assert man["count"] == 243 and len(man["entries"]) == 243
    assert man["meta"]["sampling_plan"]["grid_size"] == 276
    assert payload.stat().st_size == 243 * 169 * 8


def test_regenerates_from_manifest(series1, tmp_path):
    save_dataset(series1, tmp_path / "s1")
    back = load_dataset(tmp_path / "s1")
    again = regenerate_from_meta(back.meta)
    assert again.points == back.points
    assert again.kernels.tobytes() == back.kernels.tobytes()


def _write_raw(tmp_path, points, kernels, pitch=6.14):
    payload = np.ascontiguousarray(kernels, dtype="<f8").tobytes()
    man = {
        "format": "psflens-dataset",
        "format_version": 1,
        "count": len(points),
        "size_k": kernels.shape[1],
        "pitch_target": pitch,
        "meta": {},
        "payload": {"bytes": len(payload), "sha256": hashlib.sha256(payload).hexdigest()},
        "entries": points,
    }
    m, p = dataset_paths(tmp_path / "raw")
    p.write_bytes(payload)
    m.write_text(json.dumps(man))
    return tmp_path / "raw"


def test_zero_sum_kernel_rejected(tmp_path):
    k = np.zeros((2, 13, 13))
    k[0, 6, 6] = 1.0
    path = _write_raw(tmp_path, [[0, 0, 0], [0, 1, 0]], k)
    with pytest.raises(FormatError):
        load_dataset(path)


def test_duplicate_points_rejected(tmp_path):
    k = np.zeros((2, 3, 3))
    k[:, 1, 1] = 1.0
    path = _write_raw(tmp_path, [[0, 1, 0], [0, -1, 180]], k)
    with pytest.raises(FormatError):
        load_dataset(path)


def test_truncated_payload(series1, tmp_path):
    _, payload = save_dataset(series1, tmp_path / "s1")
    data = payload.read_bytes()
    payload.write_bytes(data[: len(data) // 2])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "s1")


def test_truncated_manifest(series1, tmp_path):
    manifest, _ = save_dataset(series1, tmp_path / "s1")
    text = manifest.read_text()
    manifest.write_text(text[: len(text) // 2])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "s1")


def test_flipped_payload_byte(series1, tmp_path):
    _, payload = save_dataset(series1, tmp_path / "s1")
    data = bytearray(payload.read_bytes())
    data[100] ^= 1
    payload.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "s1")


def test_version_mismatch(series1, tmp_path):
    manifest, _ = save_dataset(series1, tmp_path / "s1")
    man = json.loads(manifest.read_text())
    man["format_version"] = 2
    manifest.write_text(json.dumps(man))
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "s1")


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nothing")


def test_preprocess_identity_path():
    v = np.random.default_rng(3).random((13, 13))
    k = preprocess_scan(HighResScan(v, 6.14), 6.14)
    np.testing.assert_array_equal(k.values, v / v.sum())
    assert k.pitch == 6.14 and k.normalized


def test_preprocess_all_zero():
    with pytest.raises(AllZeroKernel):
        preprocess_scan(HighResScan(np.zeros((260, 260))), 6.0)


def test_preprocess_pitch_recorded():
    fp = FieldPoint(0, 0, 0)
    k = preprocess_scan(render_highres(SPEC, fp, 300), 6.0)
    assert k.pitch == pytest.approx(6.14, abs=1e-12) and k.size_k == 13


def test_preprocess_matches_analytic_single_point():
    fp = FieldPoint(-30.0, 2.5, 75.0)
    k = preprocess_scan(render_highres(SPEC, fp, 300), 6.0)
    ref = analytic_psf(SPEC, fp, oversample=80).values
    assert np.max(np.abs(k.values / ref - 1)) <= 1e-3


@settings(max_examples=25)
@given(
    st.integers(0, 60),
    st.integers(0, 60),
    st.floats(-50, 50),
    st.floats(-3, 3),
    st.floats(0, 360),
)
def test_centroid_preserved(dr, dc, dz, r, phi):
    fp = FieldPoint(dz, r, phi)
    blob = render_highres(SPEC, fp, 200, oversample=4).values
    scan = np.zeros((420, 420))
    scan[70 + dr : 270 + dr, 70 + dc : 270 + dc] = blob
    hs = HighResScan(scan)
    cy, cx = flux_centroid(scan)
    k = preprocess_scan(hs, 6.0)
    factor = 20
    r0 = int(np.ceil(cy - 13 * factor / 2 - 1e-6))
    c0 = int(np.ceil(cx - 13 * factor / 2 - 1e-6))
    ky, kx = k.centroid()
    # kernel pixel i spans scan rows r0 + 20 i .. r0 + 20 i + 19
    py = (r0 + factor * ky + (factor - 1) / 2) * hs.pitch
    px = (c0 + factor * kx + (factor - 1) / 2) * hs.pitch
    assert abs(py - cy * hs.pitch) <= k.pitch / 2
    assert abs(px - cx * hs.pitch) <= k.pitch / 2


def test_merge_dedups_by_canonical_point():
    a = generate_dataset(SPEC, single_plan(0.0, 1.0, 0.0))
    b = generate_dataset(SPEC, single_plan(0.0, -1.0, 180.0))
    c = generate_dataset(SPEC, single_plan(5.0, 1.0, 0.0))
    m = merge_datasets(a, b, c)
    assert len(m) == 2
    assert m.lookup(FieldPoint(0.0, -1.0, 180.0)) == 0


def test_subset_and_entries(series1):
    sub = series1.subset([0, 5])
    assert len(sub) == 2 and sub.points[1] == series1.points[5]
    fp, k = sub.entries[1]
    assert k.normalized and np.array_equal(k.values, series1.kernels[5])


def test_shape_checked():
    with pytest.raises(Exception):
        PsfDataset((FieldPoint(0, 0, 0),), np.zeros((2, 13, 13)), 6.14)
