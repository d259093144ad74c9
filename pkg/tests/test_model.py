import numpy as np
import pytest

from afa_ssr import tensor as T
from afa_ssr.toy import train as tr
from afa_ssr.toy.config import ToyConfig
from afa_ssr.toy.data import gen_dataset
from afa_ssr.toy.model import ToyModel

CFG = ToyConfig(image_size=32, train_size=8, val_size=4)


@pytest.fixture(scope="module")
def batch():
    return gen_dataset(CFG, "train")


def test_output_shapes(batch):
    out = ToyModel(CFG).forward(batch.images[:2])
    assert out.final.shape == (2, 4, 32, 32)
    assert len(out.per_scale) == 2 and all(p.shape == (2, 4, 32, 32) for p in out.per_scale)
    assert out.aux_fused.shape == (2, 4, 32, 32)
    assert len(out.heads_fused) == 4
    assert [a.shape for a in out.alphas] == [(2, 1, 32, 32)] * 2


def test_parameter_counts_are_matched():
    counts = {m: ToyModel(ToyConfig(fusion=m)).num_parameters() for m in ("afa", "sum", "concat-proj")}
    for mode in ("sum", "concat-proj"):
        assert abs(counts[mode] - counts["afa"]) <= 0.1 * counts["afa"], counts


def test_init_is_seeded():
    a, b = ToyModel(CFG), ToyModel(CFG)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    c = ToyModel(CFG.replace(seed=1))
    assert not np.array_equal(a.params["enc1.w"].data, c.params["enc1.w"].data)


def test_zero_attention_gives_fixed_coefficients(batch):
    model = ToyModel(CFG)
    model.calibrate(batch.images[:4])
    for p in model.attention_parameters():
        p.data[:] = 0
    with T.no_grad():
        x = T.add_scalar(T.Tensor(batch.images[:2]), -0.5)
        *_, att, rec = model.forward_scale(x, 1, trace=True)
    for name in ("node3", "node2", "node1"):
        expected = 0.25 * rec[f"{name}.f_s"].data + 0.25 * rec[f"{name}.f_d"].data
        np.testing.assert_allclose(rec[f"{name}.fused"].data, expected, atol=1e-5)
        np.testing.assert_array_equal(att[f"{name}.merge.a_s"].data, 0.5)
    f = [rec[f"final.in{i}"].data for i in range(3)]
    expected = 0.25 * 0.75 * 0.75 * f[0] + 0.25 * 0.75 * f[1] + 0.25 * f[2]
    np.testing.assert_allclose(rec["final.fused"].data, expected, atol=1e-5)


def test_alphas_valid_at_every_step(batch):
    model = ToyModel(CFG)
    model.calibrate(batch.images[:4])
    opt = tr.SGD(model.parameters(), 0.02)
    for step in range(3):
        out = model.forward(batch.images[2 * step : 2 * step + 2])
        a = np.stack([x.data for x in out.alphas])
        assert np.all(a >= 0) and np.all(a.sum(0) <= 1 + 1e-6)
        opt.step(T.backward(tr._loss(out, batch.labels[2 * step : 2 * step + 2]).total))


def test_calibration_targets(batch):
    model = ToyModel(CFG)
    model.calibrate(batch.images[:4])
    with T.no_grad():
        out = model.forward(batch.images[:4])
    rms = float(np.sqrt(np.mean(out.per_scale[1].data.astype(np.float64) ** 2)))
    assert rms == pytest.approx(ToyModel.LOGIT_RMS, rel=1e-3)


def test_state_dict_round_trip():
    a, b = ToyModel(CFG), ToyModel(CFG.replace(seed=3))
    b.load_state_dict(a.state_dict())
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    state = a.state_dict()
    state.pop("cls.w")
    with pytest.raises(ValueError, match="cls.w"):
        b.load_state_dict(state)


@pytest.mark.parametrize("mode", ["afa", "sum", "concat-proj"])
def test_every_mode_trains_a_step(batch, mode):
    model = ToyModel(CFG.replace(fusion=mode))
    out = model.forward(batch.images[:2])
    grads = T.backward(tr._loss(out, batch.labels[:2]).total)
    assert all(np.all(np.isfinite(g)) for g in grads.values())
    assert np.any(grads[model.params["enc1.w"]] != 0)
