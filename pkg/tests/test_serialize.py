"""Tensor file format and parameter directories: round-trips and errors."""

import struct

import numpy as np
import pytest

from hmba.serialize import (
    FormatError, write_tensor, read_tensor, save_params, load_params,
    load_config_text, restore_params,
)
from hmba.tensor import Tensor

RNG = np.random.default_rng(7)


class TestTensorFile:
    @pytest.mark.parametrize("shape", [(), (1,), (5,), (3, 4), (2, 3, 4, 5)])
    def test_round_trip_bit_exact(self, tmp_path, shape):
        arr = np.asarray(RNG.standard_normal(shape))
        path = tmp_path / "x.tensor"
        write_tensor(path, arr)
        back = read_tensor(path)
        assert back.shape == arr.shape
        assert back.dtype == np.float64
        assert np.array_equal(back.view(np.uint64), arr.view(np.uint64))

    def test_special_values_survive(self, tmp_path):
        arr = np.array([0.0, -0.0, 1e-310, np.pi, -1 / 3])
        path = tmp_path / "x.tensor"
        write_tensor(path, arr)
        assert np.array_equal(read_tensor(path).view(np.uint64),
                              arr.view(np.uint64))

    def test_tensor_object_accepted(self, tmp_path):
        t = Tensor(RNG.standard_normal((2, 2)))
        path = tmp_path / "x.tensor"
        write_tensor(path, t)
        np.testing.assert_array_equal(read_tensor(path), t.data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.tensor"
        write_tensor(path, np.ones(3))
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            read_tensor(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "x.tensor"
        write_tensor(path, np.ones(3))
        blob = bytearray(path.read_bytes())
        struct.pack_into("<I", blob, 4, 9)
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            read_tensor(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "x.tensor"
        path.write_bytes(b"HMBA\x01")
        with pytest.raises(FormatError, match="truncated"):
            read_tensor(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "x.tensor"
        write_tensor(path, np.ones(10))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError, match="payload"):
            read_tensor(path)


class TestParamDirectory:
    def _named(self):
        return [("a.w", Tensor(RNG.standard_normal((3, 2)))),
                ("a.b", Tensor(RNG.standard_normal(2))),
                ("head", Tensor(RNG.standard_normal((2, 4))))]

    def test_save_load_round_trip(self, tmp_path):
        named = self._named()
        save_params(tmp_path / "m", named, config_text="frames = 5\n")
        loaded = load_params(tmp_path / "m")
        assert set(loaded) == {"a.w", "a.b", "head"}
        for name, tensor in named:
            assert np.array_equal(loaded[name], tensor.data)
        assert load_config_text(tmp_path / "m") == "frames = 5\n"

    def test_config_optional(self, tmp_path):
        save_params(tmp_path / "m", self._named())
        assert load_config_text(tmp_path / "m") is None

    def test_restore_overwrites_live_tensors(self, tmp_path):
        named = self._named()
        save_params(tmp_path / "m", named)
        fresh = [(n, Tensor(np.zeros(t.shape))) for n, t in named]
        restore_params(fresh, load_params(tmp_path / "m"))
        for (_, src), (_, dst) in zip(named, fresh):
            assert np.array_equal(src.data, dst.data)

    def test_restore_rejects_name_mismatch(self, tmp_path):
        named = self._named()
        save_params(tmp_path / "m", named)
        loaded = load_params(tmp_path / "m")
        with pytest.raises(FormatError, match="mismatch"):
            restore_params(named[:2], loaded)

    def test_restore_rejects_shape_mismatch(self, tmp_path):
        named = self._named()
        save_params(tmp_path / "m", named)
        loaded = load_params(tmp_path / "m")
        bad = [(n, Tensor(np.zeros((9, 9)))) for n, _ in named]
        with pytest.raises(FormatError, match="shape"):
            restore_params(bad, loaded)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FormatError, match="manifest"):
            load_params(tmp_path)

    def test_duplicate_manifest_name(self, tmp_path):
        save_params(tmp_path / "m", self._named())
        man = tmp_path / "m" / "manifest.txt"
        man.write_text(man.read_text() + "a.w = p0000.tensor\n")
        with pytest.raises(FormatError, match="duplicate"):
            load_params(tmp_path / "m")


class TestConfigRoundTrip:
    def test_default_config_round_trips_bitwise(self):
        from hmba.config import RunConfig, parse_config
        cfg = RunConfig()
        assert parse_config(cfg.to_text()) == cfg

    def test_awkward_floats_round_trip(self):
        import dataclasses
        from hmba.config import RunConfig, parse_config
        cfg = dataclasses.replace(
            RunConfig(), lr=0.1 + 0.2, noise=1e-17, target_amp=2 / 3)
        back = parse_config(cfg.to_text())
        assert back.lr == cfg.lr and repr(back.lr) == repr(cfg.lr)
        assert back.noise == cfg.noise
        assert back.target_amp == cfg.target_amp

    def test_unknown_key_rejected(self):
        from hmba.config import parse_config
        with pytest.raises(ValueError, match="unknown key"):
            parse_config("not_a_key = 3\n")

    def test_comments_and_blanks_ignored(self):
        from hmba.config import parse_config
        cfg = parse_config("# comment\n\nframes = 7  # trailing\n")
        assert cfg.frames == 7

    def test_env_seed_override(self):
        from hmba.config import load_run_config
        cfg = load_run_config(None, env={"HMBA_SEED": "99"})
        assert cfg.seed == 99
