import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from koopdist.errors import (
    BadMagicError,
    ConfigError,
    FormatError,
    NonFinitePayloadError,
    TruncatedFileError,
    VersionMismatchError,
)
from koopdist.ndmath import make_rng
from koopdist.pairs import (
    PairMeta,
    PairSet,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    export_csv,
    load_checkpoint,
    load_pairs,
    pairs_from_bytes,
    pairs_to_bytes,
    save_checkpoint,
    save_pairs,
    split,
)


def make_set(n, labeled=False, seed=0):
    rng = make_rng(seed)
    labels = rng.integers(-1, 8, n) if labeled else None
    meta = PairMeta(teacher_kind="fm", nfe=10, seed=seed, conditional=labeled, prior_std=1.0)
    return PairSet(rng.standard_normal((n, 2)) * 3, rng.uniform(-4, 4, (n, 2)), labels, meta)


def narrowed(ps):
    return PairSet(ps.x_T.astype(np.float32).astype(np.float64),
                   ps.x_0.astype(np.float32).astype(np.float64), ps.labels, ps.meta)


@pytest.mark.parametrize("labeled", [False, True])
def test_round_trip_after_narrowing(tmp_path, labeled):
    ps = make_set(25, labeled)
    save_pairs(ps, tmp_path / "a.kdmp")
    back = load_pairs(tmp_path / "a.kdmp")
    assert back == narrowed(ps)
    assert back.meta == ps.meta
    # second save is byte-identical
    save_pairs(back, tmp_path / "b.kdmp")
    assert (tmp_path / "a.kdmp").read_bytes() == (tmp_path / "b.kdmp").read_bytes()


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 40), st.booleans(), st.integers(0, 1000))
def test_round_trip_property(n, labeled, seed):
    ps = make_set(n, labeled, seed)
    assert pairs_from_bytes(pairs_to_bytes(ps)) == narrowed(ps)


def test_empty_set_is_a_valid_file():
    ps = make_set(0)
    buf = pairs_to_bytes(ps)
    assert buf[:4] == b"KDMP" and struct.unpack("<BBI", buf[4:10]) == (1, 0, 0)
    assert len(pairs_from_bytes(buf)) == 0


def test_byte_layout():
    ps = PairSet(np.array([[1.0, 2.0]]), np.array([[3.0, -0.5]]), np.array([-1]),
                 PairMeta(conditional=True))
    buf = pairs_to_bytes(ps)
    assert struct.unpack("<4f", buf[10:26]) == (1.0, 2.0, 3.0, -0.5)
    assert struct.unpack("<H", buf[26:28]) == (0xFFFF,)
    (tlen,) = struct.unpack("<I", buf[28:32])
    text = buf[32:].decode("utf-8")
    assert len(buf) == 32 + tlen and "conditional=True" in text.splitlines()


def test_bad_magic_rejected():
    buf = bytearray(pairs_to_bytes(make_set(3)))
    buf[0:4] = b"XXXX"
    with pytest.raises(BadMagicError):
        pairs_from_bytes(bytes(buf))


def test_version_mismatch_rejected():
    buf = bytearray(pairs_to_bytes(make_set(3)))
    buf[4] = 2
    with pytest.raises(VersionMismatchError):
        pairs_from_bytes(bytes(buf))


@pytest.mark.parametrize("cut", [2, 9, 30, -1])
def test_truncation_rejected(cut):
    buf = pairs_to_bytes(make_set(3))
    with pytest.raises(TruncatedFileError):
        pairs_from_bytes(buf[:cut])


def test_nonfinite_payload_rejected():
    ps = make_set(2)
    ps.x_0[1, 0] = np.inf
    with pytest.raises(NonFinitePayloadError):
        pairs_to_bytes(ps)
    buf = bytearray(pairs_to_bytes(make_set(2)))
    buf[10:14] = struct.pack("<f", float("nan"))
    with pytest.raises(NonFinitePayloadError):
        pairs_from_bytes(bytes(buf))


def test_trailing_garbage_rejected():
    with pytest.raises(FormatError):
        pairs_from_bytes(pairs_to_bytes(make_set(2)) + b"\0")


def test_label_flag_must_match_meta():
    with pytest.raises(ConfigError):
        PairSet(np.zeros((2, 2)), np.zeros((2, 2)), None, PairMeta(conditional=True))


def test_meta_nfe_positive():
    with pytest.raises(ConfigError):
        PairMeta(nfe=0)


def test_pair_view_and_outside_flag():
    ps = PairSet(np.zeros((2, 2)), np.array([[-1.0, -3.0], [-3.0, -3.0]]), None, PairMeta())
    assert list(ps.outside) == [False, True]
    p = ps[1]
    assert p.outside and p.label is None
    assert len(list(ps)) == 2


def test_split_half():
    tr, va = split(make_set(10), 0.5, seed=3)
    assert len(tr) == len(va) == 5
    assert tr.meta == va.meta


def test_split_deterministic_and_exhaustive():
    ps = make_set(37, labeled=True)
    a, b = split(ps, 0.7, seed=9), split(ps, 0.7, seed=9)
    assert a[0] == b[0] and a[1] == b[1]
    rows = Counter(map(tuple, np.concatenate([ps.x_T, ps.x_0], 1)))
    parts = Counter(map(tuple, np.concatenate([np.concatenate([s.x_T, s.x_0], 1) for s in a])))
    assert rows == parts


@pytest.mark.parametrize("f", [0.0, 1.0, -0.1, 1.5])
def test_split_fraction_range(f):
    with pytest.raises(ConfigError):
        split(make_set(4), f)


def test_checkpoint_round_trip_exact(tmp_path):
    rng = make_rng(1)
    arrays = {"w": rng.standard_normal((3, 4)), "b": rng.standard_normal(4), "s": np.array(2.5),
              "ü": np.zeros((0, 2))}
    save_checkpoint(tmp_path / "c.kdmc", arrays, {"kind": "test"})
    back, meta = load_checkpoint(tmp_path / "c.kdmc")
    assert meta == {"kind": "test"}
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape and back[k].tobytes() == arrays[k].tobytes()


def test_checkpoint_bad_magic():
    buf = bytearray(checkpoint_to_bytes({"a": np.ones(2)}))
    buf[:4] = b"KDMP"
    with pytest.raises(BadMagicError):
        checkpoint_from_bytes(bytes(buf))


def test_checkpoint_rejects_nonfinite():
    with pytest.raises(NonFinitePayloadError):
        checkpoint_to_bytes({"a": np.array([np.nan])})


def test_metadata_cannot_hold_newlines():
    with pytest.raises(FormatError):
        checkpoint_to_bytes({}, {"k": "a\nb"})


def test_csv_export(tmp_path):
    ps = make_set(3, labeled=True)
    export_csv(ps, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "xT_x,xT_y,x0_x,x0_y,label" and len(lines) == 4
    assert float(lines[1].split(",")[0]) == ps.x_T[0, 0]
