import numpy as np
import pytest

from lact.errors import ShapeError
from lact.gradcheck import run_gradcheck
from lact.layers import ConvGRUCell, ResBlock, convgru_aggregate, convgru_step, res_block_forward
from lact.tensor import Tensor

from oracles import scalar_gru


def _zero(layer):
    for p in layer.parameters():
        p.data[...] = 0.0


def test_res_block_zero_branch_is_identity(rng):
    block = ResBlock(3, 3, rng)
    _zero(block)
    x = Tensor(rng.normal(size=(3, 4, 4, 4)))
    np.testing.assert_array_equal(res_block_forward(block, x).data, x.data)


@pytest.mark.parametrize("c_in,c_out,spatial", [(1, 4, (3, 5, 4)), (4, 2, (6, 6, 6)), (2, 2, (4, 3, 5))])
def test_res_block_keeps_spatial_shape(rng, c_in, c_out, spatial):
    out = ResBlock(c_in, c_out, rng)(Tensor(rng.normal(size=(c_in, *spatial))))
    assert out.shape == (c_out, *spatial)


def test_res_block_rejects_tiny_volume(rng):
    with pytest.raises(ShapeError):
        ResBlock(1, 1, rng)(Tensor(np.zeros((1, 2, 4, 4))))


def test_res_block_gradcheck():
    (r,) = run_gradcheck(only={"res_block"})
    assert r.max_rel_error < 1e-6


def test_gru_zero_weights_halves_state(rng):
    cell = ConvGRUCell(2, 3, rng)
    _zero(cell)
    h = Tensor(rng.normal(size=(3, 4, 4, 4)))
    out = convgru_step(cell, h, Tensor(rng.normal(size=(2, 4, 4, 4))))
    np.testing.assert_array_equal(out.data, 0.5 * h.data)


def test_gru_matches_scalar_reference(rng):
    cell = ConvGRUCell(1, 1, rng)
    # with a 1x1x1 volume and padding 1 only the kernel centre sees data
    w = {}
    for name, p in cell.named_parameters():
        p.data[...] = 0.0
        val = rng.normal()
        if p.data.ndim == 5:
            p.data[0, 0, 1, 1, 1] = val
        else:
            p.data[0] = val
        w[name] = val
    h_ref, h = 0.3, Tensor(np.full((1, 1, 1, 1), 0.3))
    for x in rng.normal(size=6):
        h_ref = scalar_gru(h_ref, x, w)
        h = convgru_step(cell, h, Tensor(np.full((1, 1, 1, 1), x)))
        assert abs(h.data.item() - h_ref) < 1e-12


def test_gru_saturated_update_gate_copies_candidate(rng):
    cell = ConvGRUCell(2, 2, rng)
    cell.b_z.data[...] = 40.0
    x = Tensor(rng.normal(size=(2, 3, 3, 3)))
    h = convgru_step(cell, cell.initial_state((3, 3, 3)), x)
    from lact.tensor import conv3d
    cand = np.tanh(conv3d(x, cell.w_h, cell.b_h, 1, 1).data)
    assert np.max(np.abs(h.data - cand)) < 1e-6


def test_gru_step_shape_errors(rng):
    cell = ConvGRUCell(2, 3, rng)
    with pytest.raises(ShapeError):
        cell.step(Tensor(np.zeros((3, 4, 4, 4))), Tensor(np.zeros((1, 4, 4, 4))))
    with pytest.raises(ShapeError):
        cell.step(Tensor(np.zeros((3, 4, 4, 5))), Tensor(np.zeros((2, 4, 4, 4))))


def test_aggregate_definitions(rng):
    cell = ConvGRUCell(2, 2, rng)
    xs = [Tensor(rng.normal(size=(2, 3, 3, 3))) for _ in range(3)]
    h0 = cell.initial_state((3, 3, 3))
    one = convgru_aggregate(cell, xs[:1])
    np.testing.assert_array_equal(one.data, convgru_step(cell, h0, xs[0]).data)
    h = h0
    for x in xs:
        h = convgru_step(cell, h, x)
    np.testing.assert_array_equal(convgru_aggregate(cell, xs).data, h.data)
    with pytest.raises(ShapeError):
        convgru_aggregate(cell, [])


def test_zero_cell_aggregates_to_zero(rng):
    cell = ConvGRUCell(2, 2, rng)
    _zero(cell)
    xs = [Tensor(rng.normal(size=(2, 3, 3, 3))) for _ in range(4)]
    np.testing.assert_array_equal(convgru_aggregate(cell, xs).data, 0.0)


@pytest.mark.parametrize("T", [1, 2, 3, 5])
def test_gru_param_count_closed_form(rng, T):
    c_x, c_h = 3, 4
    cell = ConvGRUCell(c_x, c_h, rng)
    xs = [Tensor(rng.normal(size=(c_x, 3, 3, 3))) for _ in range(T)]
    convgru_aggregate(cell, xs)
    assert cell.param_count() == 3 * (c_h * c_x * 27 + c_h * c_h * 27 + c_h)


def test_hidden_state_bounded(rng):
    cell = ConvGRUCell(2, 3, rng)
    h = cell.initial_state((4, 4, 4))
    for _ in range(4):
        h = cell.step(h, Tensor(rng.normal(size=(2, 4, 4, 4))))
        assert np.all(np.abs(h.data) < 1)


def test_aggregation_is_order_sensitive():
    r = np.random.default_rng(5)
    cell = ConvGRUCell(1, 2, r)
    a, b = (Tensor(r.normal(size=(1, 3, 3, 3))) for _ in range(2))
    diff = convgru_aggregate(cell, [a, b]).data - convgru_aggregate(cell, [b, a]).data
    assert np.max(np.abs(diff)) > 0
