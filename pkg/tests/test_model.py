import numpy as np
import pytest

from lact import tensor as tmod
from lact.errors import ConfigError, FormatError, ShapeError
from lact.model import ModelConfig, build, load, param_count, save
from lact.pipeline import soft_dice_bce_loss
from lact.tensor import backward, no_grad


# Closed-form parameter counts, written out from the layer definitions.
def resblock_params(ci, co):
    norms = 2 * ci + 2 * co
    convs = co * ci * 27 + co * co * 27 + co          # conv1 has no bias
    proj = co * ci + co if ci != co else 0
    return norms + convs + proj


def gru_params(c):
    return 3 * (c * c * 27 + c * c * 27 + c)


def closed_form(levels, base, aggregation, T=None):
    ch = [base * 2 ** l for l in range(levels)]
    total = ch[0] * 27 + ch[0]                        # stem
    total += resblock_params(ch[0], ch[0])
    total += sum(resblock_params(ch[l - 1], ch[l]) for l in range(1, levels))
    fused = ch if aggregation == "convgru" else [T * c for c in ch]
    if aggregation == "convgru":
        total += sum(gru_params(c) for c in ch)
    deeper = fused[-1]
    for l in range(levels - 2, -1, -1):
        total += resblock_params(fused[l] + deeper, ch[l])
        deeper = ch[l]
    return total + ch[0] + 1                          # head


def tiny(agg="convgru", T=None, seed=0, levels=2, base=2):
    return build(ModelConfig(levels=levels, base_channels=base, aggregation=agg,
                             concat_T=T if agg == "concat" else None, seed=seed))


def test_default_param_count_closed_form():
    model = build(ModelConfig())
    assert param_count(model) == closed_form(3, 8, "convgru") == 310105


@pytest.mark.parametrize("levels,base", [(2, 2), (3, 4), (4, 2)])
def test_param_count_closed_form_various(levels, base):
    assert param_count(tiny(levels=levels, base=base)) == closed_form(levels, base, "convgru")
    for T in (2, 3):
        m = tiny("concat", T, levels=levels, base=base)
        assert param_count(m) == closed_form(levels, base, "concat", T)


def test_concat_difference_closed_form():
    p2 = param_count(build(ModelConfig(aggregation="concat", concat_T=2)))
    p3 = param_count(build(ModelConfig(aggregation="concat", concat_T=3)))
    # fusion inputs grow by 48 channels at level 1 (16+32) and 8 at level 0
    expected = (2 * 48 + 16 * 48 * 27 + 16 * 48) + (2 * 8 + 8 * 8 * 27 + 8 * 8)
    assert p3 - p2 == expected == 23408


def test_build_is_deterministic():
    a, b = build(ModelConfig(seed=3)), build(ModelConfig(seed=3))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()


def test_registry_has_no_duplicates():
    params = build(ModelConfig()).parameters()
    assert len({id(p) for p in params}) == len(params)


@pytest.mark.parametrize("cfg", [
    ModelConfig(levels=0), ModelConfig(levels=1), ModelConfig(aggregation="concat"),
    ModelConfig(aggregation="mean"), ModelConfig(concat_T=2)])
def test_invalid_configs_rejected(cfg):
    with pytest.raises(ConfigError):
        build(cfg)


@pytest.mark.parametrize("T", [1, 2, 3, 5])
def test_convgru_forward_any_T(rng, T):
    model = tiny()
    before = param_count(model)
    out = model(rng.normal(size=(T, 1, 8, 8, 6)))
    assert out.shape == (1, 8, 8, 6)
    assert np.all((out.data > 0) & (out.data < 1))
    assert param_count(model) == before


def test_forward_input_checks(rng):
    with pytest.raises(ShapeError, match="divisible"):
        tiny(levels=3)(rng.normal(size=(2, 1, 8, 8, 6)))
    with pytest.raises(ShapeError, match="T=3"):
        tiny("concat", 3)(rng.normal(size=(2, 1, 8, 8, 8)))


def test_identical_time_points_give_identical_features(rng):
    model = tiny()
    x = rng.normal(size=(1, 8, 8, 8))
    series = np.stack([x, x, x])
    xs = model.check_input(series)
    feats = [model.encode(t) for t in xs]
    for level in range(2):
        assert feats[0][level].data.tobytes() == feats[2][level].data.tobytes()


def test_encoder_parameters_are_physically_shared(rng, monkeypatch):
    model = tiny()
    seen = []
    orig = tmod.conv3d

    def spy(x, kernel, *a, **k):
        seen.append(id(kernel))
        return orig(x, kernel, *a, **k)

    import lact.layers as layers
    monkeypatch.setattr(layers, "conv3d", spy)
    xs = model.check_input(rng.normal(size=(3, 1, 8, 8, 8)))
    per_t = []
    for x in xs:
        seen.clear()
        model.encode(x)
        per_t.append(list(seen))
    assert per_t[0] == per_t[1] == per_t[2]


def test_perturbing_encoder_kernel_changes_every_path(rng):
    model = tiny()
    xs = model.check_input(rng.normal(size=(3, 1, 8, 8, 8)))
    with no_grad():
        before = [model.encode(x)[0].data.copy() for x in xs]
        model.stem.kernel.data[0, 0, 1, 1, 1] += 0.1
        after = [model.encode(x)[0].data for x in xs]
    assert all(np.any(b != a) for b, a in zip(before, after))


def test_shared_gradient_is_sum_of_per_path_contributions(rng):
    model = tiny(seed=4)
    series = rng.normal(size=(3, 1, 8, 8, 8))
    target = (rng.random((1, 8, 8, 8)) < 0.2).astype(float)
    param = model.encoder[1][0].conv1.kernel
    idx = (1, 0, 2, 1, 0)
    model.zero_grad()
    backward(soft_dice_bce_loss(model(series), target))
    ad = param.grad[idx]

    xs = model.check_input(series)

    def loss_with_path_shift(t_shifted, eps):
        per_t = []
        for t, x in enumerate(xs):
            if t == t_shifted:
                param.data[idx] += eps
            per_t.append(model.encode(x))
            if t == t_shifted:
                param.data[idx] -= eps
        return soft_dice_bce_loss(model.decode(model.aggregate(per_t)), target).data.item()

    eps = 1e-5
    with no_grad():
        contributions = [(loss_with_path_shift(t, eps) - loss_with_path_shift(t, -eps)) / (2 * eps)
                         for t in range(3)]
    assert all(abs(c) > 0 for c in contributions)
    assert abs(sum(contributions) - ad) <= 1e-6 * max(abs(ad), 1e-8)


def test_baseline_and_recurrent_share_encoder_state(rng):
    rec = tiny(seed=1)
    base = tiny("concat", 3, seed=2)
    base.load_encoder_state(rec.encoder_state())
    x = rec.check_input(rng.normal(size=(3, 1, 8, 8, 8)))[0]
    with no_grad():
        for fa, fb in zip(rec.encode(x), base.encode(x)):
            assert fa.data.tobytes() == fb.data.tobytes()
    # the fused outputs differ because aggregation differs
    series = rng.normal(size=(3, 1, 8, 8, 8))
    with no_grad():
        assert np.any(rec(series).data != base(series).data)


def test_save_load_round_trip(rng):
    model = tiny(seed=9)
    for p in model.parameters():
        p.data += rng.normal(scale=0.01, size=p.shape)
    blob = save(model)
    assert blob[:4] == b"LACT"
    again = load(blob, model.config)
    x = rng.normal(size=(2, 1, 8, 8, 8))
    with no_grad():
        assert model(x).data.tobytes() == again(x).data.tobytes()
    assert save(again) == blob


def test_truncated_checkpoint_rejected():
    blob = save(tiny())
    for cut in (3, 20, len(blob) // 2, len(blob) - 1):
        with pytest.raises(FormatError):
            load(blob[:cut])


def test_checkpoint_version_and_magic_checked():
    blob = bytearray(save(tiny()))
    bad_magic = b"XXXX" + bytes(blob[4:])
    with pytest.raises(FormatError, match="magic"):
        load(bad_magic)
    blob[4] = 9
    with pytest.raises(FormatError, match="version"):
        load(bytes(blob))


def test_checkpoint_config_mismatch():
    blob = save(tiny("concat", 2))
    with pytest.raises(ConfigError):
        load(blob, ModelConfig(levels=2, base_channels=2, aggregation="concat", concat_T=3))
