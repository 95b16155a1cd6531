import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from transferlab.imageio import batch_to_tensor
from transferlab.models import ArchSpec, build, count_params, freeze_all_but_last_dense, snapshot
from transferlab.tensor import SeededRng
from transferlab.train import Dataset, TrainConfig, train_model
from transferlab.transfer import (
    FNV_OFFSET,
    FNV_PRIME,
    CacheMismatchError,
    FeatureCache,
    WeightFileError,
    encode_weights,
    extract_features,
    fingerprint,
    freeze_layers,
    load_model,
    load_weights,
    model_fingerprint,
    read_weights,
    save_weights,
)

MASK = (1 << 64) - 1


def fnv_reference(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & MASK
    return h


def small(arch="mini", seed=0, outputs=1):
    return build(ArchSpec(arch, (1, 16, 16), outputs=outputs, seed=seed))


def pixels(n, seed=0, size=16):
    return SeededRng(seed).integers(0, 256, (n, size, size)).astype(np.uint8)


class TestFingerprint:
    def test_empty(self):
        assert fingerprint(b"") == 14695981039346656037

    def test_one_zero_byte(self):
        assert fingerprint(b"\x00") == (14695981039346656037 * 1099511628211) & MASK

    @settings(max_examples=50, deadline=None)
    @given(st.binary(max_size=64))
    def test_matches_reference(self, data):
        assert fingerprint(data) == fnv_reference(data)

    @settings(max_examples=100, deadline=None)
    @given(st.binary(min_size=1, max_size=64), st.data())
    def test_single_bit_flip(self, data, draw):
        bit = draw.draw(st.integers(0, 8 * len(data) - 1))
        flipped = bytearray(data)
        flipped[bit // 8] ^= 1 << (bit % 8)
        assert fingerprint(bytes(flipped)) != fingerprint(data)


class TestWeights:
    def test_roundtrip_bitwise(self, tmp_path):
        a = small(seed=1)
        save_weights(a, tmp_path / "w.nnwt")
        b = small(seed=2)
        rep = load_weights(b, tmp_path / "w.nnwt", "strict")
        assert not rep.unmatched and not rep.unused
        assert snapshot(a) == snapshot(b)
        assert snapshot(load_model(tmp_path / "w.nnwt")) == snapshot(a)

    def test_layout(self, tmp_path):
        save_weights(small(), tmp_path / "w.nnwt")
        data = (tmp_path / "w.nnwt").read_bytes()
        assert data[:4] == b"NNWT"
        version, hlen = struct.unpack("<IQ", data[4:16])
        header = json.loads(data[16:16 + hlen])
        assert version == 1
        offsets = [t["offset"] for t in header["tensors"]]
        assert offsets == sorted(offsets)
        sizes = [4 * int(np.prod(t["shape"])) for t in header["tensors"]]
        assert sum(sizes) == len(data) - 16 - hlen

    def test_by_name_backbone_only(self, tmp_path):
        src = small(seed=1, outputs=4)
        save_weights(src, tmp_path / "bb.nnwt", backbone_only=True)
        dst = small("mini-frozen", seed=7)
        head_before = dst.layer("head_dense").params["W"].copy()
        rep = load_weights(dst, tmp_path / "bb.nnwt", "by-name")
        assert rep.unmatched == ["head_dense.W", "head_dense.b"]
        assert rep.unused == []
        np.testing.assert_array_equal(dst.layer("head_dense").params["W"], head_before)
        np.testing.assert_array_equal(dst.layer("block1_conv1").params["W"], src.layer("block1_conv1").params["W"])

    def test_strict_mismatch(self, tmp_path):
        save_weights(small(), tmp_path / "bb.nnwt", backbone_only=True)
        model = small()
        before = snapshot(model)
        with pytest.raises(WeightFileError):
            load_weights(model, tmp_path / "bb.nnwt", "strict")
        assert snapshot(model) == before

    def test_truncated_leaves_model(self, tmp_path):
        save_weights(small(seed=1), tmp_path / "w.nnwt")
        data = (tmp_path / "w.nnwt").read_bytes()
        (tmp_path / "t.nnwt").write_bytes(data[:-10])
        model = small(seed=2)
        before = snapshot(model)
        with pytest.raises(WeightFileError):
            load_weights(model, tmp_path / "t.nnwt", "by-name")
        assert snapshot(model) == before

    @pytest.mark.parametrize("mutate", [
        lambda d: b"XXXX" + d[4:],
        lambda d: d[:4] + struct.pack("<I", 2) + d[8:],
        lambda d: d[:16],
    ])
    def test_corrupt(self, tmp_path, mutate):
        save_weights(small(), tmp_path / "w.nnwt")
        (tmp_path / "c.nnwt").write_bytes(mutate((tmp_path / "w.nnwt").read_bytes()))
        with pytest.raises(WeightFileError):
            read_weights(tmp_path / "c.nnwt")

    def test_overlap(self, tmp_path):
        t = np.ones((2, 2), np.float32)
        data = bytearray(encode_weights([("a.W", t), ("b.W", t)], {}))
        hlen = struct.unpack("<Q", data[8:16])[0]
        header = json.loads(bytes(data[16:16 + hlen]))
        header["tensors"][1]["offset"] = 8
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        bad = bytes(data[:8]) + struct.pack("<Q", len(hb)) + hb + bytes(data[16 + hlen:])
        (tmp_path / "o.nnwt").write_bytes(bad)
        with pytest.raises(WeightFileError):
            read_weights(tmp_path / "o.nnwt")


class TestFreeze:
    def test_policies(self):
        model = small("mini-frozen")
        total = count_params(model)[0]
        freeze_layers(model, "all-but-last-dense")
        assert count_params(model) == (total, 65)
        freeze_layers(model, "none")
        assert count_params(model) == (total, total)
        freeze_layers(model, "by-name", ["block1_conv1"])
        assert count_params(model)[1] == total - (9 * 8 + 8)
        with pytest.raises(KeyError):
            freeze_layers(model, "by-name", ["nope"])


class TestFeatureCache:
    def test_hit_is_bitwise(self):
        model = small(seed=3)
        px = pixels(6)
        cache = FeatureCache()
        first = extract_features(model, px, cache)
        assert cache.misses == 6 and cache.hits == 0
        second = extract_features(model, px, cache)
        assert cache.hits == 6
        assert first.tobytes() == second.tobytes()
        assert first.tobytes() == extract_features(model, px).tobytes()

    def test_blank_page_zero_features(self):
        # white pixels carry no ink, and biases start at zero
        feats = extract_features(small(seed=3), np.full((2, 16, 16), 255, np.uint8))
        assert not feats.any()

    def test_persistence(self, tmp_path):
        model = small(seed=4)
        px = pixels(5, 1)
        cache = FeatureCache(tmp_path / "fc")
        ref = extract_features(model, px, cache)
        cache.flush()
        assert (tmp_path / "fc" / "features.idx").exists()
        again = FeatureCache(tmp_path / "fc", model_fingerprint(model))
        assert len(again) == 5
        assert extract_features(model, px, again).tobytes() == ref.tobytes()
        assert again.misses == 0

    def test_fingerprint_mismatch(self, tmp_path):
        model = small(seed=4)
        cache = FeatureCache(tmp_path / "fc")
        extract_features(model, pixels(2), cache)
        cache.flush()
        other = small(seed=5)
        with pytest.raises(CacheMismatchError):
            extract_features(other, pixels(2), cache)
        with pytest.raises(CacheMismatchError):
            FeatureCache(tmp_path / "fc", model_fingerprint(other))

    def test_weight_change_changes_fingerprint(self):
        model = small(seed=4)
        fp = model_fingerprint(model)
        model.layer("block3_conv1").params["W"][0, 0, 0, 0] += 1e-3
        assert model_fingerprint(model) != fp

    def test_cached_head_training_matches_end_to_end(self):
        px = pixels(12, 2)
        y = np.arange(12) % 2
        cfg = TrainConfig(max_epochs=6, batch_size=4, seed=3)
        a = small("mini-frozen", seed=6)
        freeze_all_but_last_dense(a)
        b = small("mini-frozen", seed=6)
        freeze_all_but_last_dense(b)
        train_model(a, Dataset(batch_to_tensor(px), y), None, cfg)
        feats = extract_features(b, px, FeatureCache())
        train_model(b, Dataset(feats, y), None, cfg, start=b.head_start)
        assert snapshot(a) == snapshot(b)
