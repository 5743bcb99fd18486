import numpy as np
import pytest

from carpe import tensor as tc
from carpe.dataio import FrameSample, to_relative
from carpe.model import (MAGIC, CarpeModel, Hyper, TrainConfig, WeightFormatError, count_flops,
                         count_params, forward, layer_macs, load_weights, save_weights, train)

from oracles import counted_macs, end_to_end_gradcheck


def linear_walker(velocity=(0.4, 0.1), start=(1.0, 2.0)):
    t = np.arange(20, dtype=float)[:, None]
    track = (np.asarray(start) + t * np.asarray(velocity))[None]
    obs = track[:, :8]
    return FrameSample("lin", 0, np.array([1]), obs, to_relative(obs), track[:, 8:])


def weights_bytes(model):
    return b"".join(p.data.tobytes() for p in model.parameters())


class TestForward:
    def test_shape(self, model, make_sample):
        out = forward(make_sample(np.random.default_rng(0), 1), model)
        assert out.shape == (1, 12, 2)

    def test_duplicates(self, model, make_sample):
        s = make_sample(np.random.default_rng(1), 2).permuted([0, 1, 1, 0])
        out = forward(s, model)
        # index-order neighbour sums add the same terms in a different order
        np.testing.assert_allclose(out[0], out[3], rtol=1e-6, atol=1e-6)
        np.testing.assert_allclose(out[1], out[2], rtol=1e-6, atol=1e-6)

    def test_permutation(self, model, make_sample):
        rng = np.random.default_rng(2)
        s = make_sample(rng, 7)
        perm = rng.permutation(7)
        np.testing.assert_allclose(forward(s.permuted(perm), model), forward(s, model)[perm],
                                   rtol=1e-5, atol=1e-5)

    def test_deterministic(self, model, make_sample):
        s = make_sample(np.random.default_rng(3), 4)
        assert forward(s, model).tobytes() == forward(s, model).tobytes()

    def test_batched_frames_equal_single(self, model, make_sample):
        rng = np.random.default_rng(4)
        samples = [make_sample(rng, int(rng.integers(1, 6))) for _ in range(5)]
        batched = forward(samples, model)
        single = np.concatenate([forward(s, model) for s in samples])
        np.testing.assert_array_equal(batched, single)

    def test_beta_mismatch(self, make_sample):
        model = CarpeModel.init(Hyper(beta=16))
        with pytest.raises(tc.ShapeError):
            forward(make_sample(np.random.default_rng(0), 2), model)


class TestTrain:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_overfit_single_linear_walker(self, seed):
        # constant-rate Adam at 0.01 reaches ~1e-7 and then spikes near the optimum
        report = train([linear_walker()], TrainConfig(epochs=200, lr=0.003, seed=seed))
        assert len(report.losses) == 200
        assert report.losses[-1] < 1e-3

    def test_zero_epochs_keeps_init(self):
        report = train([linear_walker()], TrainConfig(epochs=0, seed=5))
        fresh = CarpeModel.init(Hyper(), np.random.default_rng(5))
        assert report.losses == []
        assert weights_bytes(report.model) == weights_bytes(fresh)

    def test_bit_identical_runs(self, make_sample):
        rng = np.random.default_rng(0)
        data = [make_sample(rng, int(rng.integers(1, 5))) for _ in range(40)]
        cfg = TrainConfig(epochs=3, frame_batch=8, seed=11)
        a, b = train(data, cfg), train(data, cfg)
        assert a.losses == b.losses
        assert weights_bytes(a.model) == weights_bytes(b.model)

    def test_empty(self):
        with pytest.raises(ValueError):
            train([], TrainConfig(epochs=1))

    def test_needs_future(self, make_sample):
        s = make_sample(np.random.default_rng(0), 1)
        s.future = None
        with pytest.raises(ValueError):
            train([s], TrainConfig(epochs=1))

    def test_non_finite_loss_aborts(self, make_sample):
        s = make_sample(np.random.default_rng(0), 2)
        s.future[0, 0, 0] = np.inf
        with pytest.raises(FloatingPointError, match="epoch 1"):
            train([s], TrainConfig(epochs=1))

    def test_bad_config(self):
        with pytest.raises(ValueError):
            TrainConfig(frame_batch=0)


class TestAccounting:
    def test_default_count(self, model):
        assert count_params(model) == 87185

    def test_hand_sum(self, model):
        rho = 32 * 64 + 64
        phi = (64 * 32 + 32) + (32 * 16 + 16)
        convs = (2 * 2 * 2 * 128 + 128) + (128 * 2 * 256 + 256) + (256 * 2 * 24 + 24) + (24 * 24 + 24)
        assert count_params(model) == rho + 2 * phi + 1 + convs

    def test_doubling_c1(self, model):
        wide = CarpeModel.init(Hyper(C1=256))
        conv1_delta = 128 * (2 * 2 * 2 + 1)
        conv2_delta = 128 * 2 * 256
        assert count_params(wide) - count_params(model) == conv1_delta + conv2_delta

    def test_close_to_reported(self, model):
        assert abs(count_params(model) - 0.10e6) <= 0.2 * 0.10e6

    @pytest.mark.parametrize("num_peds", [1, 2, 5])
    def test_macs_match_counting_oracle(self, model, num_peds):
        assert sum(layer_macs(model, num_peds).values()) == counted_macs(model, num_peds)

    def test_flops_single_pedestrian(self, model):
        # 155,264 MACs: 155,200 in dense/conv layers plus 64 neighbour-sum adds
        assert count_flops(model, 1) == 2 * 155_264

    def test_flops_affine_in_p(self, model):
        f = [count_flops(model, p) for p in range(1, 8)]
        slopes = np.diff(f)
        assert np.all(slopes == slopes[0])
        assert slopes[0] == 2 * (155_200 + 2 * 64)

    def test_flops_order_of_magnitude(self, model):
        assert 1.44e6 / 10 <= count_flops(model, 1) <= 1.44e6 * 10


class TestWeights:
    def test_round_trip(self, tmp_path):
        m = CarpeModel.init(Hyper(), seed=9)
        for p in m.parameters():
            p.data[:] = np.random.default_rng(1).normal(size=p.shape)
        save_weights(m, tmp_path / "m.carpe")
        back = load_weights(tmp_path / "m.carpe")
        assert back.hyper == m.hyper
        assert weights_bytes(back) == weights_bytes(m)

    def test_layout(self, tmp_path, model):
        path = tmp_path / "m.carpe"
        save_weights(model, path)
        raw = path.read_bytes()
        assert raw[:8] == MAGIC
        n = int.from_bytes(raw[8:12], "little")
        assert raw[12:12 + n].decode() == "beta=8\nT=12\nC1=128\nC2=256\ncount=87185\n"
        blob = np.frombuffer(raw[12 + n:], dtype="<f4")
        assert blob.size == 87185
        np.testing.assert_array_equal(blob[:4], model.graph.rho.W.data.ravel()[:4])
        # epsilon follows rho and both phi MLPs
        assert blob[2112 + 2 * 2608] == model.graph.epsilon.data[0]
        np.testing.assert_array_equal(blob[-24:], model.pred.conv4.bias.data)

    def test_truncated(self, tmp_path, model):
        path = tmp_path / "m.carpe"
        save_weights(model, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(WeightFormatError, match="length mismatch"):
            load_weights(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.carpe"
        path.write_bytes(b"NOTCARPE" + bytes(20))
        with pytest.raises(WeightFormatError, match="magic"):
            load_weights(path)

    def test_manifest_for_other_beta(self, tmp_path):
        big = tmp_path / "big.carpe"
        save_weights(CarpeModel.init(Hyper(beta=16)), big)
        raw = big.read_bytes()
        n = int.from_bytes(raw[8:12], "little")
        manifest = raw[12:12 + n].replace(b"beta=16", b"beta=8")
        path = tmp_path / "m.carpe"
        path.write_bytes(raw[:8] + len(manifest).to_bytes(4, "little") + manifest + raw[12 + n:])
        with pytest.raises(WeightFormatError):
            load_weights(path)

    def test_corrupt_manifest(self, tmp_path, model):
        path = tmp_path / "m.carpe"
        save_weights(model, path)
        raw = bytearray(path.read_bytes())
        raw[12:16] = b"zz\xff!"
        path.write_bytes(bytes(raw))
        with pytest.raises(WeightFormatError, match="manifest"):
            load_weights(path)


@pytest.mark.parametrize("seed", range(10))
def test_end_to_end_gradients(seed):
    assert end_to_end_gradcheck(seed) < 1e-4
