import numpy as np
import pytest

from univit.evaluation import auroc
from univit.synthetic import (
    LABELS, FormatError, SyntheticDataset, decode_raw, encode_raw, gen_synthetic, make_sample, mask_to_labels,
    labels_to_mask, read_raw, structure_masks, write_raw,
)
from univit.tokenizer import CT3D, XRAY2D

SMALL = {XRAY2D: (1, 1, 64, 64), CT3D: (1, 32, 32, 32)}


def test_same_seed_bit_identical():
    a = make_sample(3, CT3D, 5, SMALL[CT3D])
    b = make_sample(3, CT3D, 5, SMALL[CT3D])
    assert a.volume.data.tobytes() == b.volume.data.tobytes()
    assert (a.labels == b.labels).all()
    c = make_sample(4, CT3D, 5, SMALL[CT3D])
    assert a.volume.data.tobytes() != c.volume.data.tobytes()


def test_default_shapes():
    assert make_sample(0, XRAY2D, 0).volume.shape == (1, 1, 224, 224)


def test_gen_rejects_zero():
    with pytest.raises(ValueError):
        gen_synthetic(0, XRAY2D, 0)


def test_label_marginals():
    y = SyntheticDataset(0, XRAY2D, 4000).labels()
    # Bernoulli(0.4): 4 standard errors at n=4000 is 0.031
    assert np.abs(y.mean(0) - 0.4).max() < 0.031


def test_dataset_labels_match_samples():
    ds = SyntheticDataset(1, CT3D, 6, SMALL[CT3D])
    np.testing.assert_array_equal(ds.labels(), np.stack([ds[i].labels for i in range(6)]))


def test_masks_non_empty_and_consistent():
    m2 = structure_masks((1, 112, 112))
    m3 = structure_masks((112, 112, 112))
    for name in LABELS:
        assert m2[name].sum() > 0, name
        # 2D realisation is the mid-depth cross-section of the 3D one
        mid = m3[name][56] > 0
        iou = (mid & (m2[name][0] > 0)).sum() / (mid | (m2[name][0] > 0)).sum()
        assert iou > 0.9, name


@pytest.mark.parametrize("modality", [XRAY2D, CT3D])
def test_unplanted_mean_intensity_is_uninformative(modality):
    samples = gen_synthetic(7, modality, 300, SMALL[modality], plant=False)
    score = np.array([s.volume.data.mean() for s in samples])
    y = np.stack([s.labels for s in samples])
    for j in range(len(LABELS)):
        assert 0.4 <= auroc(score, y[:, j]) <= 0.6


@pytest.mark.parametrize("modality", [XRAY2D, CT3D])
def test_pixel_detector_oracle(modality):
    # hand-coded detector: mean intensity inside the nominal structure minus its surroundings
    shape = SMALL[modality]
    samples = gen_synthetic(11, modality, 300, shape)
    masks = structure_masks(shape[1:])
    y = np.stack([s.labels for s in samples])
    for j, name in enumerate(LABELS):
        inside = masks[name] > 0.5
        score = np.array([s.volume.data[0][inside].mean() - s.volume.data[0][~inside].mean() for s in samples])
        assert auroc(score, y[:, j]) > 0.95, name


def test_raw_roundtrip(tmp_path):
    s = make_sample(0, CT3D, 1, SMALL[CT3D])
    write_raw(tmp_path / "a.mmv", s)
    back = read_raw(tmp_path / "a.mmv", 1)
    assert back.volume.data.tobytes() == s.volume.data.tobytes()
    assert back.modality == CT3D and (back.labels == s.labels).all()


def test_raw_layout():
    s = make_sample(0, XRAY2D, 2, (1, 1, 4, 6))
    buf = encode_raw(s)
    assert buf[:4] == b"MMV1"
    assert buf[4] == 0 and buf[5] == labels_to_mask(s.labels)
    assert np.frombuffer(buf[6:22], "<u4").tolist() == [1, 1, 4, 6]
    assert len(buf) == 22 + 4 * 24 + 4


def test_raw_corruption_rejected():
    buf = bytearray(encode_raw(make_sample(0, XRAY2D, 2, (1, 1, 4, 6))))
    with pytest.raises(FormatError, match="length"):
        decode_raw(bytes(buf[:-3]))
    buf[30] ^= 0xFF
    with pytest.raises(FormatError, match="checksum"):
        decode_raw(bytes(buf))
    with pytest.raises(FormatError, match="magic"):
        decode_raw(b"NOPE" + bytes(buf[4:]))


def test_mask_bits():
    assert labels_to_mask([1, 0, 1, 0, 0]) == 5
    np.testing.assert_array_equal(mask_to_labels(5), [1, 0, 1, 0, 0])
