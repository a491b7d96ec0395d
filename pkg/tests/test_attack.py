import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fisherdet import attack, nn, train
from fisherdet.attack import AttackConfig
from fisherdet.data import LabeledDataset, synthetic_blobs
from fisherdet.errors import ClassIndexError


def logistic(w):
    # logits (0, w * x): class 1 probability is sigmoid(w x)
    return nn.Network([nn.Dense(1, 2), nn.Softmax()], (1,), [0.0, w, 0.0, 0.0])


@pytest.fixture(scope="module")
def trained():
    ds = synthetic_blobs(3, 80, 6, seed=5, spread=0.15)
    net, _ = train.sgd_train(nn.mlp([6, 16, 3], seed=1), ds, train.TrainConfig(epochs=30, batch_size=16))
    return net, ds


class TestFGSM:
    def test_zero_budget(self, trained):
        net, ds = trained
        x = ds.inputs[0]
        assert attack.fgsm(net, x, int(ds.labels[0]), 0.0).tobytes() == x.tobytes()

    @pytest.mark.parametrize("x", [0.3, 0.95])
    def test_logistic_closed_form(self, x):
        # d/dx of -log f^0 = w * sigmoid(w x) > 0 for w > 0
        out = attack.fgsm(logistic(2.0), np.array([x]), 0, 0.1)
        assert out[0] == min(x + 0.1, 1.0)

    def test_clip_saturation(self):
        out = attack.fgsm(logistic(2.0), np.array([1.0]), 0, 0.2)
        assert out[0] == 1.0

    def test_zero_gradient_components_unchanged(self):
        net = nn.Network([nn.Dense(2, 2), nn.Softmax()], (2,), [1.0, -1.0, 0.0, 0.0, 0.0, 0.0])
        out = attack.fgsm(net, np.array([0.5, 0.5]), 0, 0.1)
        assert out[1] == 0.5
        assert out[0] != 0.5

    def test_bad_label(self, trained):
        net, ds = trained
        with pytest.raises(ClassIndexError):
            attack.fgsm(net, ds.inputs[0], 7, 0.1)


class TestMIFGSM:
    def test_zero_budget(self, trained):
        net, ds = trained
        out = attack.mi_fgsm(net, ds.inputs[1], int(ds.labels[1]), AttackConfig(epsilon=0.0, steps=5))
        assert out.tobytes() == ds.inputs[1].tobytes()

    @pytest.mark.parametrize("mu", [0.0, 1.0, 3.5])
    def test_single_step_is_fgsm(self, trained, mu):
        net, ds = trained
        for i in range(10):
            a = attack.mi_fgsm(net, ds.inputs[i], int(ds.labels[i]), AttackConfig(epsilon=0.07, steps=1, momentum=mu))
            b = attack.fgsm(net, ds.inputs[i], int(ds.labels[i]), 0.07)
            assert a.tobytes() == b.tobytes()

    def test_zero_gradient_step_is_noop(self):
        # constant network: every loss gradient is zero
        net = nn.Network([nn.Dense(2, 2), nn.Softmax()], (2,))
        x = np.array([0.2, 0.8])
        assert attack.mi_fgsm(net, x, 0, AttackConfig()).tobytes() == x.tobytes()

    @settings(max_examples=25, deadline=None)
    @given(eps=st.floats(0, 0.5), steps=st.integers(1, 12), mu=st.floats(0, 2), i=st.integers(0, 239))
    def test_budget_and_range(self, trained, eps, steps, mu, i):
        net, ds = trained
        x = ds.inputs[i]
        out = attack.mi_fgsm(net, x, int(ds.labels[i]), AttackConfig(epsilon=eps, steps=steps, momentum=mu))
        assert np.max(np.abs(out - x)) <= eps + 1e-12
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestAttackBatch:
    def test_zero_budget_no_success(self, trained):
        net, ds = trained
        res = attack.attack_batch(net, ds, AttackConfig(epsilon=0.0))
        assert not res.success.any()
        np.testing.assert_array_equal(res.clean_pred, res.adv_pred)

    def test_single_successful_flip(self):
        # logits (0.5, 10 x): class 0 at x=0.02, class 1 after a 0.1 step up
        net = nn.Network([nn.Dense(1, 2), nn.Softmax()], (1,), [0.0, 10.0, 0.5, 0.0])
        ds = LabeledDataset(np.array([[0.02]]), np.array([0]))
        res = attack.attack_batch(net, ds, AttackConfig(method="fgsm", epsilon=0.1))
        assert res.success.tolist() == [True]

    def test_failed_attacks_are_kept(self, trained):
        net, ds = trained
        res = attack.attack_batch(net, ds, AttackConfig(epsilon=0.02))
        assert len(res.adversarial) == len(ds)
        assert (~res.success).any()

    def test_predicted_label_mode(self, trained):
        net, ds = trained
        res = attack.attack_batch(net, ds, AttackConfig(epsilon=0.1), label_source="predicted_label")
        assert len(res.adv_pred) == len(ds)

    def test_monotone_threat(self, trained):
        net, ds = trained
        acc = {}
        for eps in (0.02, 0.1):
            res = attack.attack_batch(net, ds, AttackConfig(epsilon=eps))
            acc[eps] = np.mean(res.adv_pred == ds.labels)
        assert acc[0.1] <= acc[0.02]
