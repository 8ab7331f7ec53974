import json

import numpy as np
import pytest

from iitrack import iit
from iitrack.checkpoint import MANIFEST, PAYLOAD, Checkpoint, load_checkpoint, save_checkpoint
from iitrack.config import NetConfig
from iitrack.net import ParamStore, TrackerNet


def make_checkpoint(seed=0, with_state=True):
    cfg = NetConfig(appearance_dim=4, bbox_dim=5, hidden_dim=8, lstm_dim=3, horizon=2)
    params = TrackerNet(cfg).init_params(seed)
    probes = iit.ProbeSet(iit.default_alignment(8), seed).store
    if with_state:
        rng = np.random.default_rng(seed)
        for n in params.names()[:3]:
            params.state[n] = rng.normal(size=params[n].data.shape)
    return Checkpoint(cfg, params, probes, epoch=3, step=42, probes_trained=True, meta={"note": "x"})


def test_load_then_save_is_byte_identical(tmp_path):
    save_checkpoint(make_checkpoint(), tmp_path / "a")
    ck = load_checkpoint(tmp_path / "a")
    save_checkpoint(ck, tmp_path / "b")
    for name in (MANIFEST, PAYLOAD):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_round_trip_values_are_float32_rounded(tmp_path):
    orig = make_checkpoint(1)
    save_checkpoint(orig, tmp_path)
    ck = load_checkpoint(tmp_path)
    assert ck.net == orig.net and (ck.epoch, ck.step, ck.probes_trained) == (3, 42, True)
    assert ck.meta == {"note": "x"}
    for store, back in ((orig.params, ck.params), (orig.probes, ck.probes)):
        assert store.names() == back.names()
        for n in store.names():
            np.testing.assert_array_equal(back[n].data, store[n].data.astype(np.float32).astype(np.float64))
    assert sorted(ck.params.state) == sorted(orig.params.state)


def test_manifest_describes_payload(tmp_path):
    save_checkpoint(make_checkpoint(2), tmp_path)
    man = json.loads((tmp_path / MANIFEST).read_text())
    payload = (tmp_path / PAYLOAD).read_bytes()
    assert man["payload_bytes"] == len(payload)
    end = 0
    for e in man["tensors"]:
        assert e["offset"] == end
        end += 4 * int(np.prod(e["shape"], dtype=np.int64))
        assert e["name"].split("/")[0] in ("net", "probe", "opt")
    assert end == len(payload)
    # little-endian float32
    first = man["tensors"][0]
    n = int(np.prod(first["shape"]))
    want = np.frombuffer(payload[:4 * n], dtype="<f4")
    ck = load_checkpoint(tmp_path)
    np.testing.assert_array_equal(ck.params[first["name"][4:]].data.ravel(), want.astype(np.float64))


def test_corrupt_checkpoints_are_rejected(tmp_path):
    save_checkpoint(make_checkpoint(with_state=False), tmp_path)
    payload = tmp_path / PAYLOAD
    payload.write_bytes(payload.read_bytes()[:-4])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path)
    man = tmp_path / MANIFEST
    d = json.loads(man.read_text())
    d["format"] = "other"
    man.write_text(json.dumps(d))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path)


def test_empty_store_round_trips(tmp_path):
    ck = Checkpoint(NetConfig(), ParamStore(), ParamStore())
    save_checkpoint(ck, tmp_path)
    back = load_checkpoint(tmp_path)
    assert back.params.names() == [] and (tmp_path / PAYLOAD).read_bytes() == b""
