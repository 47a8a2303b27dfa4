import json
import struct
import warnings
import zlib

import numpy as np
import pytest

from gmmtrans.errors import ConfigError, NumericError, ParseError
from gmmtrans.phantom import (
    PhantomSpec,
    build_dataset,
    generate_phantom_pair,
    load_manifest,
    load_pairs,
    load_training_images,
)
from gmmtrans.pngio import read_image, read_label_image, read_png_samples, write_image, write_label_image


# ---------------------------------------------------------------- phantom generation

def test_default_spec_values():
    spec = PhantomSpec()
    assert spec.image_size == 256 and spec.plaque_radius == (1.0, 2.0)
    assert spec.detection_threshold == pytest.approx(0.5 * (0.45 + 0.9))


@pytest.mark.parametrize("bad,field", [
    (dict(plaque_intensity=(0.4, 0.5)), "plaque_intensity"),
    (dict(noise_sigma=-0.1), "noise_sigma"),
    (dict(image_size=8), "image_size"),
    (dict(num_plaques=(3, 1)), "num_plaques"),
    (dict(vessel_intensity_shift=0.8), "vessel_intensity_shift"),
])
def test_invalid_spec(bad, field):
    with pytest.raises(ConfigError) as err:
        PhantomSpec(**bad)
    assert field in err.value.fields


def test_degenerate_domains_identical():
    pair = generate_phantom_pair(PhantomSpec(noise_sigma=0.0, vessel_intensity_shift=0.0), 3)
    assert np.array_equal(pair.image_a, pair.image_b)


def test_generation_deterministic():
    a, b = generate_phantom_pair(PhantomSpec(), 17), generate_phantom_pair(PhantomSpec(), 17)
    for name in ("image_a", "image_b", "plaque_mask", "organ_masks"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    c = generate_phantom_pair(PhantomSpec(), 18)
    assert not np.array_equal(a.image_a, c.image_a)


def test_domains_differ_only_on_vessel_and_noise():
    spec = PhantomSpec(noise_sigma=0.0)
    pair = generate_phantom_pair(spec, 5)
    diff = pair.image_b - pair.image_a
    assert np.allclose(diff[~pair.vessel_mask], 0.0)
    assert np.allclose(diff[pair.vessel_mask], spec.vessel_intensity_shift)


def test_plaque_counts_and_visibility_over_100_seeds():
    spec = PhantomSpec()
    tol = 4 * spec.noise_sigma
    for seed in range(100):
        pair = generate_phantom_pair(spec, seed)
        mask = pair.plaque_mask.astype(bool)
        assert 4 <= mask.sum() <= 64
        for image in (pair.image_a, pair.image_b):
            assert image.min() >= 0.0 and image.max() <= 1.0
            assert image[mask].min() >= spec.plaque_intensity[0] - tol
            assert image[mask].mean() - image[pair.vessel_mask].mean() >= 0.1


# ---------------------------------------------------------------- dataset

def test_dataset_layout(tmp_path):
    spec = PhantomSpec(image_size=48)
    manifest = build_dataset(spec, 3, 4, 2, 1, tmp_path, seed=1)
    assert len(manifest) == 3 + 4 + 2 + 1
    assert load_manifest(tmp_path) == manifest
    roles = {r: [m for m in manifest if m["role"] == r] for r in ("train_a", "train_b", "val", "test")}
    seeds = {r: {m["seed"] for m in v} for r, v in roles.items()}
    assert not seeds["train_a"] & seeds["train_b"]
    held_out = seeds["val"] | seeds["test"]
    assert not held_out & (seeds["train_a"] | seeds["train_b"])
    assert (tmp_path / "train_a" / "0000.png").exists() and (tmp_path / "train_b" / "0003.png").exists()
    for suffix in ("a", "b", "plaque", "organs"):
        assert (tmp_path / "val" / f"0001_{suffix}.png").exists()
    a, b = load_training_images(tmp_path)
    assert len(a) == 3 and len(b) == 4 and a[0].shape == (48, 48)
    pairs = load_pairs(tmp_path, "test")
    reference = generate_phantom_pair(spec, roles["test"][0]["seed"])
    assert np.array_equal(pairs[0].plaque_mask, reference.plaque_mask)
    assert np.max(np.abs(pairs[0].image_b - reference.image_b)) <= 1 / 65535


def test_training_split_is_unpaired(tmp_path):
    build_dataset(PhantomSpec(image_size=40), 2, 2, 1, 1, tmp_path, seed=3)
    records = json.loads((tmp_path / "manifest.json").read_text())
    a = [r["seed"] for r in records if r["role"] == "train_a"]
    b = [r["seed"] for r in records if r["role"] == "train_b"]
    assert set(a).isdisjoint(b)


def test_dataset_byte_identical_on_rerun(tmp_path):
    spec = PhantomSpec(image_size=40)
    build_dataset(spec, 2, 2, 1, 1, tmp_path / "x", seed=9)
    build_dataset(spec, 2, 2, 1, 1, tmp_path / "y", seed=9)
    files = sorted(p.relative_to(tmp_path / "x") for p in (tmp_path / "x").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "x" / rel).read_bytes() == (tmp_path / "y" / rel).read_bytes()


def test_dataset_counts_validated(tmp_path):
    with pytest.raises(ConfigError):
        build_dataset(PhantomSpec(image_size=40), 0, 2, 1, 1, tmp_path, seed=0)


def test_missing_training_file_reported(tmp_path):
    build_dataset(PhantomSpec(image_size=40), 1, 1, 1, 1, tmp_path, seed=0)
    (tmp_path / "train_b" / "0000.png").unlink()
    with pytest.raises(FileNotFoundError, match="0000.png"):
        load_training_images(tmp_path)


# ---------------------------------------------------------------- PNG I/O

def _png(width, height, depth, rows, filters):
    """Minimal independent grayscale PNG writer: ``rows`` are raw bytes per scanline."""
    def chunk(kind, data):
        return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", zlib.crc32(kind + data) & 0xFFFFFFFF)

    raw = b"".join(bytes([f]) + r for f, r in zip(filters, rows))
    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", struct.pack(">IIBBBBB", width, height, depth, 0, 0, 0, 0))
            + chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b""))


def _filter_row(ftype, cur, prev, bpp):
    out = bytearray(len(cur))
    for i, x in enumerate(cur):
        a = cur[i - bpp] if i >= bpp else 0
        b = prev[i]
        c = prev[i - bpp] if i >= bpp else 0
        if ftype == 0:
            pred = 0
        elif ftype == 1:
            pred = a
        elif ftype == 2:
            pred = b
        elif ftype == 3:
            pred = (a + b) // 2
        else:
            p = a + b - c
            pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
            pred = a if pa <= pb and pa <= pc else (b if pb <= pc else c)
        out[i] = (x - pred) % 256
    return bytes(out)


@pytest.mark.parametrize("depth", [8, 16])
def test_reader_handles_every_filter(tmp_path, depth):
    rng = np.random.default_rng(depth)
    h, w = 10, 7
    dtype = np.uint8 if depth == 8 else ">u2"
    samples = rng.integers(0, 2 ** depth, size=(h, w)).astype(dtype)
    bpp = depth // 8
    raw_rows = [samples[y].tobytes() for y in range(h)]
    filters = [y % 5 for y in range(h)]
    prev = bytes(w * bpp)
    rows = []
    for f, cur in zip(filters, raw_rows):
        rows.append(_filter_row(f, cur, prev, bpp))
        prev = cur
    path = tmp_path / "f.png"
    path.write_bytes(_png(w, h, depth, rows, filters))
    assert np.array_equal(read_png_samples(path), samples.astype(np.uint16 if depth == 16 else np.uint8))


def test_round_trip_within_quantization(tmp_path):
    image = np.random.default_rng(0).random((33, 47))
    write_image(image, tmp_path / "x.png")
    assert np.max(np.abs(read_image(tmp_path / "x.png") - image)) <= 1.6e-5


def test_zero_image_exact(tmp_path):
    write_image(np.zeros((16, 16)), tmp_path / "z.png")
    assert np.array_equal(read_image(tmp_path / "z.png"), np.zeros((16, 16)))


def test_out_of_range_clamped_with_warning(tmp_path):
    with pytest.warns(UserWarning, match="clamped"):
        write_image(np.array([[1.5, -0.2], [0.5, 0.0]]), tmp_path / "c.png")
    out = read_image(tmp_path / "c.png")
    assert out[0, 0] == 1.0 and out[0, 1] == 0.0


def test_non_finite_rejected(tmp_path):
    with pytest.raises(NumericError):
        write_image(np.array([[np.nan]]), tmp_path / "n.png")


def test_label_round_trip(tmp_path):
    labels = np.arange(20).reshape(4, 5)
    write_label_image(labels, tmp_path / "l.png")
    assert np.array_equal(read_label_image(tmp_path / "l.png"), labels)


def test_malformed_files_report_offsets(tmp_path):
    good = tmp_path / "g.png"
    write_image(np.random.default_rng(1).random((8, 8)), good)
    data = good.read_bytes()

    bad = tmp_path / "sig.png"
    bad.write_bytes(b"GIF89a" + data[6:])
    with pytest.raises(ParseError, match="offset 0"):
        read_image(bad)

    corrupt = bytearray(data)
    corrupt[20] ^= 0xFF  # inside IHDR data, so its CRC no longer matches
    bad.write_bytes(bytes(corrupt))
    with pytest.raises(ParseError) as err:
        read_image(bad)
    assert err.value.offset == 8

    bad.write_bytes(data[:40])
    with pytest.raises(ParseError) as err:
        read_image(bad)
    assert err.value.offset == 33


def test_written_files_readable_by_zlib_decoder(tmp_path):
    image = np.linspace(0, 1, 12).reshape(3, 4)
    write_image(image, tmp_path / "v.png")
    data = (tmp_path / "v.png").read_bytes()
    length = struct.unpack(">I", data[33:37])[0]
    assert data[37:41] == b"IDAT"
    raw = zlib.decompress(data[41:41 + length])
    rows = np.frombuffer(raw, np.uint8).reshape(3, 9)
    assert np.all(rows[:, 0] == 0)
    assert np.array_equal(rows[:, 1:].copy().view(">u2"), np.rint(image * 65535).astype(">u2"))
