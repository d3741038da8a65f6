import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsv.io import ContainerError
from dsv.nn import (Architecture, Model, ParamMask, flatten_params, forward, init_model,
                    load_checkpoint, logits, save_checkpoint, unflatten_params, zero_model)
from dsv.tensor import ShapeError, Tensor

ARCHS = [
    Architecture("linear", (2,), 3),
    Architecture("linear", (2,), 2, tied=True),
    Architecture("mlp", (5,), 4, hidden=(6, 3)),
    Architecture("convnet", (1, 16, 16), 3, channels=4),
    Architecture("convnet", (3, 8, 8), 2, channels=2, depth=2),
]


def _probe(arch, n=4, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(n, *arch.input_shape))


def test_tied_linear_logits():
    arch = Architecture("linear", (2,), 2, tied=True)
    model = Model(arch, {"w": Tensor([1.0, 0.0]), "b": Tensor(0.0)})
    assert forward(model, np.array([[2.0, 0.0]])).data.tolist() == [[2.0, -2.0]]


def test_zero_mlp_gives_zero_logits():
    arch = Architecture("mlp", (7,), 4, hidden=(5,))
    out = forward(zero_model(arch), np.random.default_rng(0).normal(size=(3, 7))).data
    assert np.array_equal(out, np.zeros((3, 4)))


def test_convnet_logit_length():
    arch = Architecture("convnet", (1, 16, 16), 3)
    assert forward(init_model(arch), _probe(arch, 2)).shape == (2, 3)


def test_forward_rejects_wrong_shape():
    arch = Architecture("linear", (2,), 3)
    with pytest.raises(ShapeError):
        forward(init_model(arch), np.zeros((1, 3)))


def test_architecture_validation():
    with pytest.raises(ValueError):
        Architecture("resnet", (2,), 2)
    with pytest.raises(ValueError):
        Architecture("linear", (2,), 1)
    with pytest.raises(ValueError):
        Architecture("mlp", (2,), 3, tied=True)
    with pytest.raises(ValueError):
        Architecture("convnet", (1, 4, 4), 2, depth=3)


def _two_param_model():
    arch = Architecture("linear", (2,), 2, tied=True)
    return Model(arch, {"w": Tensor([1.0, 2.0]), "b": Tensor(3.0)})


def test_flatten_examples():
    model = _two_param_model()
    assert flatten_params(model).data.tolist() == [1.0, 2.0, 3.0]
    assert flatten_params(model, ParamMask.of(["b"])).data.tolist() == [3.0]
    with pytest.raises(ValueError, match="empty"):
        flatten_params(model, ParamMask.of([]))
    with pytest.raises(KeyError):
        flatten_params(model, ParamMask.of(["nope"]))


def test_last_layer_mask_length():
    arch = Architecture("convnet", (1, 16, 16), 3, channels=4)
    model = init_model(arch)
    mask = ParamMask.last_layer(model)
    shapes = arch.param_shapes()
    assert len(flatten_params(model, mask).data) == \
        int(np.prod(shapes["fc.weight"])) + int(np.prod(shapes["fc.bias"]))


@pytest.mark.parametrize("arch", ARCHS, ids=lambda a: a.kind)
def test_flatten_unflatten_round_trip(arch):
    model = init_model(arch, seed=3)
    vec = flatten_params(model)
    assert len(vec.data) == model.n_params()
    back = unflatten_params(zero_model(arch), vec)
    assert np.array_equal(flatten_params(back).data, vec.data)


@pytest.mark.parametrize("arch", ARCHS, ids=lambda a: a.kind)
def test_checkpoint_round_trip_bit_exact(arch, tmp_path):
    model = init_model(arch, seed=5)
    path = tmp_path / "m.dsvc"
    save_checkpoint(model, path, "seed = 5\n")
    loaded = load_checkpoint(path)
    assert loaded.arch == arch
    assert list(loaded.params) == list(model.params)
    assert flatten_params(loaded).data.tobytes() == flatten_params(model).data.tobytes()
    probe = _probe(arch)
    assert logits(loaded, probe).tobytes() == logits(model, probe).tobytes()


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "m.dsvc"
    save_checkpoint(init_model(ARCHS[0]), path)
    raw = path.read_bytes()
    (tmp_path / "magic.dsvc").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ContainerError, match="bad magic"):
        load_checkpoint(tmp_path / "magic.dsvc")
    (tmp_path / "short.dsvc").write_bytes(raw[:-5])
    with pytest.raises(ContainerError, match="truncated"):
        load_checkpoint(tmp_path / "short.dsvc")
    (tmp_path / "ver.dsvc").write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(ContainerError, match="version"):
        load_checkpoint(tmp_path / "ver.dsvc")


def test_checkpoint_shape_mismatch(tmp_path):
    small = init_model(Architecture("linear", (2,), 3))
    path = tmp_path / "m.dsvc"
    save_checkpoint(small, path)
    from dsv.io import read_container, write_container
    _, arrays = read_container(path, b"DSVC")
    other = Architecture("linear", (4,), 3).to_json()
    write_container(path, b"DSVC", other, arrays)
    with pytest.raises(ContainerError, match="shape mismatch"):
        load_checkpoint(path)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.permutations(list(range(4))))
def test_permuting_class_heads_permutes_logits(seed, perm):
    arch = Architecture("mlp", (3,), 4, hidden=(5,))
    model = init_model(arch, seed)
    perm = np.array(perm)
    swapped = model.with_params({"out.weight": model.params["out.weight"].data[perm],
                                 "out.bias": model.params["out.bias"].data[perm]})
    x = _probe(arch, 3, seed)
    assert np.allclose(logits(swapped, x), logits(model, x)[:, perm], atol=1e-14)


def test_init_is_seeded():
    a = flatten_params(init_model(ARCHS[3], 7)).data
    b = flatten_params(init_model(ARCHS[3], 7)).data
    c = flatten_params(init_model(ARCHS[3], 8)).data
    assert np.array_equal(a, b) and not np.array_equal(a, c)
