import json

import numpy as np
import pytest

from iitrack import frames, sim
from iitrack.config import RunConfig, WorldConfig


def random_frames(n_seq=50, n_frames=20, seed=11):
    cfg = RunConfig(world=WorldConfig(n_frames=n_frames), seed=seed)
    out = []
    for s in range(n_seq):
        out.extend(sim.simulate_sequence(cfg, s))
    return out


def test_round_trip_1000_frames():
    frs = random_frames()
    assert len(frs) == 1000
    for fr in frs:
        line = frames.to_line(fr)
        back = frames.from_line(line)
        assert frames.to_line(back) == line
        assert back == fr
        assert "\n" not in line


def test_round_trip_preserves_arrays_exactly():
    fr = random_frames(1, 3)[2]
    back = frames.from_line(frames.to_line(fr))
    assert np.array_equal(back.grid.cells, fr.grid.cells)
    for a, b in zip(back.detections, fr.detections):
        assert a.box == b.box and np.array_equal(a.appearance, b.appearance)


def test_bitmask_row_major_lower_left():
    fr = random_frames(1, 1)[0]
    d = frames.frame_to_dict(fr)
    cells = np.zeros((100, 100), dtype=bool)
    cells[0, 3] = True  # row 0 = lowest y band
    g = frames.grid_from_dict(dict(d["grid"], bits=frames._pack_bits(cells)))
    assert g.occluded_at(-50 + 3.5, -50 + 0.5)
    assert not g.occluded_at(-50 + 0.5, -50 + 3.5)


def test_sequence_file_io(tmp_path):
    frs = random_frames(1, 5)
    p = tmp_path / "seq.jsonl"
    frames.write_sequence(p, frs)
    assert p.read_text().count("\n") == 5
    assert frames.read_sequence(p) == frs


def test_bad_bitmask_rejected():
    fr = random_frames(1, 1)[0]
    d = frames.frame_to_dict(fr)
    d["grid"]["bits"] = "AAAA"
    with pytest.raises(ValueError):
        frames.frame_from_dict(json.loads(json.dumps(d)))
