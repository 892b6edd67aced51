"""Module system, feature-projection blocks and the encoder."""
import math

import numpy as np
import pytest

from conftest import check_module_grads
from faslseg.encoder import Encoder, EncoderConfig, encoder_preset
from faslseg.errors import ConfigError, DimensionError
from faslseg.model import count_parameters
from faslseg.nn import MHSA, BatchNorm2d, ConvBlock, ConvChain, Linear, Module, UpChain, chain_widths
from faslseg.tensor import Parameter, Tensor, no_grad

F64 = np.float64


def _identity_block(c: int) -> ConvBlock:
    block = ConvBlock(c, c, np.random.default_rng(0), dtype=F64)
    block.conv.weight.data = np.eye(c).reshape(c, c, 1, 1)
    return block


# -- module plumbing --------------------------------------------------------------


class _Pair(Module):
    def __init__(self, rng):
        super().__init__()
        self.first = Linear(2, 3, rng)
        self.rest = [Linear(3, 3, rng), Linear(3, 1, rng, bias=False)]


def test_parameter_names_are_hierarchical(rng):
    names = [n for n, _ in _Pair(rng).named_parameters()]
    assert names == ["first.weight", "first.bias", "rest.0.weight", "rest.0.bias", "rest.1.weight"]


def test_shared_parameter_is_rejected(rng):
    m = _Pair(rng)
    m.rest[0].bias = m.first.bias
    with pytest.raises(ConfigError, match="registered twice"):
        m.parameters()


def test_state_dict_round_trip(rng):
    a, b = _Pair(rng), _Pair(np.random.default_rng(99))
    b.load_state_dict(a.state_dict())
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_load_state_dict_reports_mismatch(rng):
    state = _Pair(rng).state_dict()
    del state["first.bias"]
    with pytest.raises(ConfigError, match="first.bias"):
        _Pair(rng).load_state_dict(state)


def test_empty_model_has_no_parameters():
    assert count_parameters(Module()) == 0
    assert count_parameters(None) == 0


# -- ConvBlock -------------------------------------------------------------------


def test_conv_block_parameter_count(rng):
    # 64*128 weights + 128 bias + 128 gamma + 128 beta; running stats are buffers
    assert count_parameters(ConvBlock(64, 128, rng)) == 8576


def test_conv_block_identity_on_positive_inputs(rng):
    block = _identity_block(3).eval()
    x = rng.uniform(0, 2, size=(2, 3, 4, 4))
    np.testing.assert_allclose(block(Tensor(x)).data, x / math.sqrt(1 + 1e-5), rtol=1e-12)


def test_conv_block_negative_slope():
    block = _identity_block(1).eval()
    out = block(Tensor(-np.ones((1, 1, 2, 2)))).data
    np.testing.assert_allclose(out, -0.01 / math.sqrt(1 + 1e-5), rtol=1e-12)


def test_conv_block_training_batch_of_two_constants():
    block = _identity_block(1).train()
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    out = block(Tensor(x)).data.ravel()
    # batch mean 2, biased variance 1
    s = 1 / math.sqrt(1 + 1e-5)
    np.testing.assert_allclose(out, [-0.01 * s, s], rtol=1e-12)


def test_conv_block_keeps_spatial_extent(rng):
    assert ConvBlock(4, 6, rng)(Tensor(rng.standard_normal((2, 4, 5, 7)))).shape == (2, 6, 5, 7)


def test_conv_block_channel_mismatch(rng):
    with pytest.raises(DimensionError, match="expects 4 channels"):
        ConvBlock(4, 6, rng)(Tensor(np.zeros((1, 3, 2, 2))))


@pytest.mark.parametrize("slope", [0.0, 1.0, -0.2])
def test_conv_block_rejects_bad_slope(slope, rng):
    with pytest.raises(ConfigError):
        ConvBlock(2, 2, rng, slope=slope)


def test_conv_block_eval_uses_running_stats(rng):
    block = ConvBlock(2, 2, rng, dtype=F64)
    block.bn._buffers["running_mean"][:] = [5.0, -5.0]
    block.eval()
    x = np.zeros((1, 2, 1, 1))
    out = block(Tensor(x)).data.ravel()
    # zero input: conv output is the zero bias, then BN subtracts the running mean
    np.testing.assert_allclose(out, [-5.0 * 0.01 / math.sqrt(1 + 1e-5), 5.0 / math.sqrt(1 + 1e-5)], rtol=1e-12)


def test_conv_block_gradients(rng):
    check_module_grads(ConvBlock(3, 4, rng, dtype=F64), rng.uniform(-1, 1, (2, 3, 3, 3)))


def test_batch_norm_parameters_and_buffers(rng):
    bn = BatchNorm2d(5)
    assert [n for n, _ in bn.named_parameters()] == ["gamma", "beta"]
    assert [n for n, _ in bn.named_buffers()] == ["running_mean", "running_var"]


# -- MHSA -----------------------------------------------------------------------


def _mhsa_with(weights: dict, d: int, heads: int) -> MHSA:
    m = MHSA(d, heads, np.random.default_rng(0), dtype=F64)
    for k, v in weights.items():
        getattr(m, k).data = np.asarray(v, dtype=F64)
    return m


def test_mhsa_single_position_identity():
    eye = np.eye(3)
    m = _mhsa_with({"w_q": eye, "w_k": eye, "w_v": eye, "w_o": eye}, 3, 1)
    x = np.array([0.3, -1.2, 2.0]).reshape(1, 3, 1, 1)
    np.testing.assert_allclose(m(Tensor(x)).data, x, rtol=1e-14)


def test_mhsa_identical_tokens(rng):
    m = MHSA(4, 2, rng, dtype=F64)
    x = np.broadcast_to(rng.standard_normal((1, 4, 1, 1)), (1, 4, 3, 3)).copy()
    out = m(Tensor(x)).data.reshape(4, 9)
    np.testing.assert_allclose(out, out[:, :1].repeat(9, axis=1), atol=1e-14)


def test_mhsa_two_token_closed_form():
    one = np.ones((1, 1))
    m = _mhsa_with({"w_q": one, "w_k": one, "w_v": one, "w_o": one}, 1, 1)
    a = math.sqrt(math.log(2.0))
    out = m(Tensor(np.array([0.0, a]).reshape(1, 1, 1, 2))).data.ravel()
    # token 0 attends equally; token 1 has scores [0, ln 2] -> weights [1/3, 2/3]
    np.testing.assert_allclose(out, [a / 2, 2 * a / 3], rtol=1e-14)


def test_mhsa_is_permutation_equivariant(rng):
    m = MHSA(6, 3, rng, dtype=F64)
    x = rng.standard_normal((1, 6, 2, 4))
    perm = rng.permutation(8)
    out = m(Tensor(x)).data.reshape(6, 8)
    xp = x.reshape(1, 6, 8)[:, :, perm].reshape(1, 6, 2, 4)
    np.testing.assert_allclose(m(Tensor(xp)).data.reshape(6, 8), out[:, perm], atol=1e-13)


def test_mhsa_heads_read_disjoint_column_blocks(rng):
    # zeroing head 1's query/key columns makes its attention uniform; head 0 is untouched
    m = MHSA(4, 2, rng, dtype=F64)
    x = rng.standard_normal((1, 4, 2, 2))
    base = m(Tensor(x)).data
    m.w_q.data[:, 2:] = 0.0
    m.w_o.data[2:, :] = 0.0
    changed = m(Tensor(x)).data
    m.w_q.data[:, 2:] = 1.0
    again = m(Tensor(x)).data
    np.testing.assert_allclose(changed, again, atol=1e-14)
    assert not np.allclose(base, changed)


def test_mhsa_parameter_count(rng):
    assert count_parameters(MHSA(32, 4, rng)) == 4 * 32 * 32


def test_mhsa_rejects_indivisible_heads(rng):
    with pytest.raises(ConfigError):
        MHSA(6, 4, rng)


def test_mhsa_gradients(rng):
    check_module_grads(MHSA(4, 2, rng, dtype=F64), rng.uniform(-1, 1, (2, 4, 2, 3)))


# -- UpChain / ConvChain ----------------------------------------------------------


def test_up_chain_zero_steps_is_identity(rng):
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    assert UpChain(0)(x) is x


@pytest.mark.parametrize("mode", UpChain.MODES)
@pytest.mark.parametrize("steps,size", [(1, 64), (3, 16)])
def test_up_chain_extents(mode, steps, size, rng):
    chain = UpChain(steps, mode, 2, rng)
    with no_grad():
        out = chain(Tensor(rng.standard_normal((1, 2, size, size)).astype(np.float32)))
    assert out.shape == (1, 2, 128, 128)


def test_up_chain_validation(rng):
    with pytest.raises(ConfigError):
        UpChain(-1)
    with pytest.raises(ConfigError):
        UpChain(1, "nearest")
    with pytest.raises(ConfigError):
        UpChain(1, "transposed_conv")


@pytest.mark.parametrize("mode", UpChain.MODES)
def test_up_chain_gradients(mode, rng):
    chain = UpChain(2, mode, 2, rng, dtype=F64)
    check_module_grads(chain, rng.uniform(-1, 1, (2, 2, 2, 2)))


def test_chain_widths():
    assert chain_widths(512, 128, 2) == [512, 256, 128]
    assert chain_widths(320, 128, 1) == [320, 128]
    assert chain_widths(64, 64, 3) == [64, 64, 64, 64]
    with pytest.raises(ConfigError):
        chain_widths(8, 4, 0)


def test_conv_chain_of_one_equals_block(rng):
    chain = ConvChain([3, 5], np.random.default_rng(7), dtype=F64)
    block = ConvBlock(3, 5, np.random.default_rng(7), dtype=F64)
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    np.testing.assert_array_equal(chain(x).data, block(x).data)


def test_conv_chain_two_blocks_shape(rng):
    chain = ConvChain(chain_widths(512, 128, 2), rng)
    with no_grad():
        out = chain(Tensor(rng.standard_normal((1, 512, 16, 16)).astype(np.float32)))
    assert out.shape == (1, 128, 16, 16)


def test_conv_chain_rejects_empty_and_mismatch(rng):
    with pytest.raises(ConfigError):
        ConvChain([4], rng)
    with pytest.raises(ConfigError):
        ConvChain.from_blocks([])
    with pytest.raises(ConfigError, match="block 0 outputs 4"):
        ConvChain.from_blocks([ConvBlock(2, 4, rng), ConvBlock(5, 3, rng)])


def test_conv_chain_gradients(rng):
    check_module_grads(ConvChain([4, 3, 2], rng, dtype=F64), rng.uniform(-1, 1, (2, 4, 2, 2)))


# -- encoder ----------------------------------------------------------------------


def test_toy_encoder_pyramid(rng):
    enc = Encoder(encoder_preset("toy"), rng)
    with no_grad():
        feats = enc(Tensor(rng.standard_normal((2, 3, 64, 64)).astype(np.float32)))
    assert [f.shape for f in feats] == [(2, 16, 16, 16), (2, 32, 8, 8), (2, 64, 4, 4), (2, 128, 2, 2)]


def test_small_encoder_with_spatial_reduction(rng):
    enc = Encoder(encoder_preset("small"), rng)
    with no_grad():
        feats = enc(Tensor(rng.standard_normal((1, 3, 64, 96)).astype(np.float32)))
    assert [f.shape[1:] for f in feats] == [(32, 16, 24), (64, 8, 12), (160, 4, 6), (256, 2, 3)]


def test_encoder_batch_items_independent_in_eval(rng):
    enc = Encoder(encoder_preset("toy"), rng).eval()
    img = rng.standard_normal((1, 3, 32, 32)).astype(np.float32)
    with no_grad():
        feats = enc(Tensor(np.concatenate([img, img])))
    for f in feats:
        np.testing.assert_array_equal(f.data[0], f.data[1])


def test_encoder_rejects_bad_extent(rng):
    with pytest.raises(DimensionError, match="divisible by 32"):
        Encoder(encoder_preset("toy"), rng)(Tensor(np.zeros((1, 3, 48, 64))))


@pytest.mark.parametrize(
    "change",
    [
        {"patch_strides": [2, 2, 2, 2]},
        {"stage_channels": [16, 32, 64]},
        {"heads_per_stage": [3, 2, 4, 8]},
        {"scale_preset": "full"},
    ],
)
def test_encoder_config_validation(change):
    with pytest.raises(ConfigError):
        EncoderConfig(**change).validate()


def test_encoder_gradients_small_config(rng):
    cfg = EncoderConfig(stage_channels=[4, 4, 8, 8], heads_per_stage=[1, 2, 2, 4], sr_ratios=[2, 1, 1, 1])
    enc = Encoder(cfg, rng, dtype=F64)

    class Last(Module):
        def __init__(self):
            super().__init__()
            self.enc = enc

        def forward(self, x):
            return self.enc(x)[-1]

    check_module_grads(Last(), rng.uniform(-1, 1, (1, 3, 32, 32)), max_entries=10)


def test_parameter_is_named_after_registration(rng):
    lin = Linear(2, 2, rng)
    assert isinstance(lin.weight, Parameter)
    dict(lin.named_parameters())
    assert lin.weight.name == "weight"
