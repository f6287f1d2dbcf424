import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rfcn.model import (
    PRESETS,
    READOUT_GAIN,
    ArchitectureError,
    ArchitectureSpec,
    Conv,
    ConvGru,
    Deconv,
    Flatten,
    Gru,
    Model,
    build_preset,
    check_dense_prediction,
    format_architecture,
    format_shape_table,
    forward_window,
    infer_shapes,
    parse_architecture,
    shared_layer_pairs,
)
from rfcn.tensor import Record, Tensor, backward
from rfcn.training import logistic_loss


def frames_for(spec, rng, n=None):
    shape = (spec.in_channels,) + tuple(spec.input_hw)
    return [rng.uniform(0.05, 1.0, size=shape) for _ in range(n or spec.window)]


# --- presets ------------------------------------------------------------------------


def test_rfc_lenet_preset():
    spec = build_preset("rfc-lenet")
    assert spec.input_hw == (28, 28)
    r = spec.recurrent_index
    assert isinstance(spec.layers[r], Gru) and spec.layers[r].hidden == 784
    assert isinstance(spec.layers[r - 1], Flatten)
    assert isinstance(spec.layers[r - 2], Deconv) and (spec.layers[r - 2].F, spec.layers[r - 2].S) == (10, 4)
    assert "GRU: W(784×784)" in format_shape_table(spec)


def test_rfc_12s_preset_order():
    spec = build_preset("rfc-12s")
    r = spec.recurrent_index
    assert spec.layers[r].hidden == 100
    kinds = [type(layer).__name__ for layer in spec.layers]
    assert kinds.index("Flatten") < r < kinds.index("Deconv")
    deconv = spec.layers[kinds.index("Deconv")]
    assert (deconv.F, deconv.S) == (10, 4)


def test_rfc_vgg_preset_has_conv_gru():
    spec = build_preset("rfc-vgg")
    layer = spec.layers[spec.recurrent_index]
    assert isinstance(layer, ConvGru) and (layer.F, layer.D) == (3, 128)
    rows = infer_shapes(spec)
    assert rows[0].out_shape == (64, 68, 98)


def test_fc_lenet_is_rfc_lenet_without_gru():
    rfc, fc = build_preset("rfc-lenet"), build_preset("fc-lenet")
    assert not fc.is_recurrent
    assert fc.layers == [layer for layer in rfc.layers if not layer.recurrent]
    assert infer_shapes(fc)[-1].out_shape == (1, 28, 28)


def test_unknown_preset_and_bad_scale():
    with pytest.raises(ValueError, match="valid presets"):
        build_preset("rfc-alexnet")
    with pytest.raises(ValueError):
        build_preset("rfc-vgg", 1.5)


@pytest.mark.parametrize("name", PRESETS)
@pytest.mark.parametrize("scale", [1.0, 0.5, 0.25])
def test_presets_predict_densely(name, scale):
    spec = build_preset(name, scale)
    check_dense_prediction(spec)
    assert infer_shapes(spec)[-1].out_shape == (1,) + spec.input_hw


@given(name=st.sampled_from(PRESETS), scale=st.floats(0.01, 1.0))
def test_dense_prediction_wherever_the_chain_fits(name, scale):
    try:
        spec = build_preset(name, scale)
    except ArchitectureError as err:
        # only too-small inputs may fail, and the message names the layer
        assert "exceeds" in str(err) and "layer" in str(err)
        return
    check_dense_prediction(spec)


# --- shape inference ----------------------------------------------------------------


def test_strided_conv_rows():
    spec = ArchitectureSpec("one", (120, 180), [Conv(5, S=3, P=10, D=20)])
    assert infer_shapes(spec)[0].out_shape == (20, 42, 62)


def test_empty_layer_list():
    spec = ArchitectureSpec("empty", (5, 7), [])
    assert infer_shapes(spec) == []
    check_dense_prediction(spec)


def test_inconsistent_chain_names_layer():
    spec = ArchitectureSpec("bad", (8, 8), [Conv(3, D=4), Conv(9, D=2)])
    with pytest.raises(ArchitectureError, match=r"layer 1 \(Conv: F\(9\)"):
        infer_shapes(spec)


def test_two_recurrent_layers_rejected():
    with pytest.raises(ArchitectureError):
        ArchitectureSpec("x", (4, 4), [Flatten(), Gru(4), Gru(4)])


@pytest.mark.parametrize("name", PRESETS)
def test_parameter_count_matches_table(name):
    spec = build_preset(name, 0.25)
    model = Model(spec)
    assert model.parameter_count() == sum(r.params for r in infer_shapes(spec))
    names = list(model.params)
    assert len(names) == len(set(names))
    assert len({id(t) for t in model.params.values()}) == len(names)


# --- architecture files -------------------------------------------------------------


ARCH = """
# tiny recurrent lenet
name tiny
input H=12 W=12
window L=2
@recurrent-node-begin
conv F=3 P=2 D=4
relu
pool 2
conv F=1 D=1
deconv F=4 S=2
flatten
gru W=144
@recurrent-node-end
unflatten C=1 H=12 W=12
sigmoid
"""


def test_parse_architecture_file():
    spec = parse_architecture(ARCH)
    assert spec.name == "tiny" and spec.window == 2 and spec.input_hw == (12, 12)
    assert spec.recurrent_index == 6
    assert not spec.layers[-1].inside_recurrent_node
    check_dense_prediction(spec)


def test_architecture_round_trip():
    for name in PRESETS:
        spec = build_preset(name)
        back = parse_architecture(format_architecture(spec))
        assert back.layers == spec.layers
        assert [a.inside_recurrent_node for a in back.layers] == [a.inside_recurrent_node for a in spec.layers]


@pytest.mark.parametrize("text,lineno", [
    ("input H=4 W=4\nconv F=3 Q=1", 2),
    ("input H=4 W=4\n\nbogus F=1", 3),
    ("input H=4 W=4\nconv S=2", 2),
    ("input H=4 W=4\npool two", 2),
])
def test_parse_errors_carry_line_numbers(text, lineno):
    with pytest.raises(ArchitectureError, match=f"line {lineno}:"):
        parse_architecture(text)


def test_parse_requires_input_line():
    with pytest.raises(ArchitectureError, match="input"):
        parse_architecture("conv F=3")


# --- forward ------------------------------------------------------------------------


def test_rfc_vgg_quarter_scale_output(rng):
    model = Model(build_preset("rfc-vgg", 0.25), seed=3)
    out = forward_window(model, frames_for(model.spec, rng))
    assert out.shape == (1, 60, 90)
    assert np.all((out.data > 0) & (out.data < 1))


def test_fc_model_uses_only_last_frame(rng):
    model = Model(build_preset("fc-lenet"), seed=1)
    a, b, c, d, x = frames_for(model.spec, rng, 5)
    np.testing.assert_array_equal(forward_window(model, [a, b, x]).data, forward_window(model, [c, d, x]).data)


def test_rfc_model_uses_earlier_frames(rng):
    model = Model(build_preset("rfc-lenet", 0.5), seed=1)
    a, b, c, d, x = frames_for(model.spec, rng, 5)
    assert not np.allclose(forward_window(model, [a, b, x]).data, forward_window(model, [c, d, x]).data)


def test_window_of_one_is_a_single_recurrent_step(rng):
    spec = build_preset("rfc-lenet", 0.5, window=1)
    model = Model(spec, seed=2)
    (f,) = frames_for(spec, rng)
    out = forward_window(model, [f])
    feats = model.frame_features(Tensor(f))
    h = model.cell.step(feats, model.cell.zero_state(feats)).h
    np.testing.assert_array_equal(out.data, model.run_layers(h, spec.recurrent_index + 1, len(spec.layers)).data)


def test_window_length_is_checked(rng):
    model = Model(build_preset("rfc-lenet", 0.5), seed=2)
    with pytest.raises(ValueError):
        forward_window(model, frames_for(model.spec, rng, 2))


def test_shared_conv_weight_reaches_all_frames(rng):
    model = Model(build_preset("rfc-lenet", 0.5), seed=4)
    frames = frames_for(model.spec, rng)
    target = (rng.uniform(size=model.spec.input_hw) > 0.5).astype(float)
    w = model.params["00.conv.weight"]

    def grad(fs):
        with Record() as rec:
            out = forward_window(model, fs)
        _, seed = logistic_loss(out, target)
        return backward(rec, out, seed, wrt=[w])[0]

    full = grad(frames)
    # freezing the earlier frames' contribution changes the gradient, so all frames feed it
    zeroed = grad([np.zeros_like(frames[0]), np.zeros_like(frames[1]), frames[2]])
    assert np.abs(full).sum() > 0 and not np.allclose(full, zeroed)


def test_unregistered_tensors_do_not_affect_loss(rng):
    model = Model(build_preset("rfc-lenet", 0.5), seed=4)
    # jitter every tensor so zero-initialised matrices do not mask a gate
    for t in model.params.values():
        t.data += rng.uniform(-0.05, 0.05, size=t.shape)
    frames = frames_for(model.spec, rng)
    before = forward_window(model, frames).data.copy()
    stray = Tensor(np.ones(3), requires_grad=True)  # never handed to the model
    stray.data += 1e-3
    np.testing.assert_array_equal(forward_window(model, frames).data, before)
    # every registered tensor, by contrast, moves the output
    for name, t in model.params.items():
        saved = t.data.copy()
        t.data += 1e-3
        changed = not np.array_equal(forward_window(model, frames).data, before)
        t.data[...] = saved
        assert changed, name


def test_shared_layer_pairs():
    pairs = shared_layer_pairs(build_preset("fc-vgg"), build_preset("rfc-vgg"))
    assert len(pairs) == len(build_preset("fc-vgg").layers)
    with pytest.raises(ArchitectureError):
        shared_layer_pairs(build_preset("fc-lenet"), build_preset("rfc-12s"))


def test_model_is_deterministic_under_seed(rng):
    a, b = Model(build_preset("rfc-12s", 0.25), seed=9), Model(build_preset("rfc-12s", 0.25), seed=9)
    for n in a.params:
        assert a.params[n].data.tobytes() == b.params[n].data.tobytes()


def test_map_gru_starts_as_a_pass_through():
    model = Model(build_preset("rfc-lenet", 0.5), seed=0)
    cell = model.cell
    np.testing.assert_array_equal(cell.w_x.data, np.eye(196))
    assert not cell.w_h.data.any() and not cell.w_hz.data.any()
    readout = model.params[f"{model.spec.recurrent_index + 2:02d}.conv.weight"]
    assert readout.data.item() == READOUT_GAIN
    # the fc readout keeps its random draw
    fc = Model(build_preset("fc-lenet", 0.5), seed=0)
    assert fc.params["12.conv.weight"].data.item() != READOUT_GAIN
