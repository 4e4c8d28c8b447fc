import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from termvel.config import RunConfig, dumps, loads
from termvel.errors import CheckpointError, ConfigError, ShapeError
from termvel.params import ParamStore, load, save


def _store(rng):
    return ParamStore({"a.w": rng.standard_normal((3, 2)), "a.b": np.zeros(2), "s": np.array(1.5)})


def test_store_round_trip(tmp_path, rng):
    p = _store(rng)
    save(p, tmp_path / "p")
    q = load(tmp_path / "p")
    assert list(q) == list(p)
    assert all(p[k].tobytes() == q[k].tobytes() and p[k].shape == q[k].shape for k in p)
    assert ParamStore.from_bytes(p.to_bytes()).to_bytes() == p.to_bytes()


def test_store_flat_round_trip(rng):
    p = _store(rng)
    assert p.size() == 9
    q = p.with_flat(p.flat() * 2)
    np.testing.assert_array_equal(q["a.w"], 2 * p["a.w"])
    with pytest.raises(ShapeError):
        p.with_flat(np.zeros(4))


def test_store_alignment_and_values(rng):
    p = _store(rng)
    with pytest.raises(ShapeError):
        p.check_aligned({"a.w": np.zeros((3, 2))})
    with pytest.raises(ShapeError):
        p.check_aligned({"a.w": np.zeros((2, 3)), "a.b": np.zeros(2), "s": np.zeros(())})
    z = p.zeros_like()
    assert all(np.all(z[k] == 0) for k in z)


def test_store_corruption_is_detected(rng):
    data = _store(rng).to_bytes()
    for bad in (data[:-3], b"NOPE" + data[4:], data + b"x"):
        with pytest.raises(CheckpointError):
            ParamStore.from_bytes(bad)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)))
def test_store_round_trip_any_array(arr):
    p = ParamStore({"x": arr})
    q = ParamStore.from_bytes(p.to_bytes())
    assert q["x"].shape == arr.shape and q["x"].tobytes() == np.asarray(arr, np.float64).tobytes()


def test_config_round_trip():
    rc = RunConfig()
    rc.model.hidden_dim = 16
    rc.sampler.scheme = "trunc"
    rc.objective.w2_weight_fm = False
    rc.task.mu0 = (0.5, 0.25)
    rc.task.kind = "gaussian"
    text = dumps(rc)
    back = loads(text)
    assert back == rc
    assert dumps(back) == text


def test_desk_config_loads():
    from pathlib import Path
    path = Path(__file__).resolve().parents[1] / "scripts" / "configs" / "desk_8gaussians.ini"
    rc = loads(path.read_text())
    assert rc.run.steps == 20000 and rc.sampler.scheme == "gap_star"


@pytest.mark.parametrize("text,line", [
    ("[run]\nsteps = 3\nbogus = 1\n", 3),
    ("[run]\nsteps = 3\n\n[nope]\nx = 1\n", 4),
    ("[run]\nsteps = many\n", 2),
    ("steps = 3\n", 1),
    ("[run]\nsteps = 1\nsteps = 2\n", 3),
    ("[model]\nhidden_dim = 6\nnum_heads = 4\n", None),
    ("[model]\nlabel_count = 3\n", None),
    ("[sampler]\nsigma_g = -1\n", None),
])
def test_config_errors_name_the_line(text, line):
    with pytest.raises(ConfigError) as info:
        loads(text)
    assert info.value.line == line
    if line is not None:
        assert str(info.value).startswith(f"line {line}:")


def test_config_booleans_and_tuples():
    rc = loads("[model]\nuse_scaled_param = yes\ninput_dim = 3\n[task]\nkind = gaussian\nmu0 = 0.0, 1.0, 2.0\n")
    assert rc.model.use_scaled_param is True
    assert rc.task.mu0 == (0.0, 1.0, 2.0)
