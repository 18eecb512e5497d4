import numpy as np
import pytest
import torch

from ttsfuda import selftrain
from ttsfuda.config import AdaptConfig
from ttsfuda.data import SegDataset, SegSample, UnlabeledView
from ttsfuda.exceptions import ConfigError, DatasetError
from ttsfuda.models import ArchSpec, build_model
from ttsfuda.selftrain import TeacherStudentPair, adapt_stage2, aug_consistency_loss, ema_update, pseudo_labels

ARCH = ArchSpec(dims=2, levels=2, in_channels=3, out_classes=1, base_width=4)


def constant_pair(teacher_value, student_value, rate=0.99):
    pair = TeacherStudentPair.from_model(build_model(ARCH, 0), rate)
    with torch.no_grad():
        for p in pair.teacher.parameters():
            p.fill_(teacher_value)
        for p in pair.student.parameters():
            p.fill_(student_value)
    return pair


def first_param(model):
    return next(model.parameters()).detach()


def config(**overrides):
    cfg = AdaptConfig(arch=ARCH.to_dict(), batch_size=2)
    return cfg.replace(**{"stage2.epochs": 2, **overrides})


@pytest.fixture(scope="module")
def view():
    rng = np.random.default_rng(0)
    return UnlabeledView.from_array(rng.uniform(size=(6, 3, 8, 8)).astype(np.float32), "tiny")


class TestEma:
    def test_single_update(self):
        pair = ema_update(constant_pair(0.0, 1.0))
        assert float(first_param(pair.teacher).max()) == pytest.approx(0.01, abs=1e-7)

    def test_two_updates(self):
        pair = constant_pair(0.0, 1.0)
        ema_update(ema_update(pair))
        assert float(first_param(pair.teacher).max()) == pytest.approx(0.0199, abs=1e-7)
        assert pair.ema_updates == 2

    def test_closed_form(self):
        pair = constant_pair(0.0, 1.0)
        pair.teacher.double()
        pair.student.double()
        for k in range(1, 101):
            ema_update(pair)
            assert abs(float(first_param(pair.teacher)[0].flatten()[0]) - (1 - 0.99 ** k)) < 1e-9

    def test_contraction(self):
        pair = TeacherStudentPair.from_model(build_model(ARCH, 0), 0.9)
        pair.student = build_model(ARCH, 1)
        before = [(t - s).abs() for t, s in zip(pair.teacher.parameters(), pair.student.parameters())]
        ema_update(pair)
        for gap, t, s in zip(before, pair.teacher.parameters(), pair.student.parameters()):
            assert t.shape == s.shape
            torch.testing.assert_close((t - s).abs(), 0.9 * gap, atol=1e-6, rtol=1e-5)

    def test_rate_bounds(self):
        with pytest.raises(ConfigError):
            TeacherStudentPair.from_model(build_model(ARCH, 0), 1.5)

    def test_architecture_mismatch(self):
        with pytest.raises(ConfigError):
            TeacherStudentPair(build_model(ARCH, 0), build_model(ArchSpec(dims=2, levels=2, in_channels=3, base_width=8), 0))


def test_pseudo_labels():
    probs = torch.tensor([[[[0.2, 0.5, 0.9]]]])
    assert pseudo_labels(probs).flatten().tolist() == [0.0, 1.0, 1.0]
    multi = torch.tensor([0.1, 0.7, 0.2]).view(1, 3, 1, 1)
    assert pseudo_labels(multi).flatten().tolist() == [1]


class TestConsistencyGradient:
    def test_gradcheck(self):
        a = torch.randn(2, 4, 3, 3, dtype=torch.float64)
        b = torch.randn(2, 4, 3, 3, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda s: aug_consistency_loss(a, s), (b,), eps=1e-6, atol=1e-8, rtol=1e-4)

    def test_zero_gradient_when_teacher_equals_student(self):
        model = build_model(ARCH, 0)
        x = torch.rand(2, 3, 8, 8)
        with torch.no_grad():
            _, t_lat = model(x)
        _, s_lat = model(x)
        aug_consistency_loss(t_lat, s_lat).backward()
        assert all(float(p.grad.abs().max()) == 0.0 for p in model.parameters() if p.grad is not None)


class TestAdaptStage2:
    def test_zero_lr_and_rate_one_is_noop(self, view):
        init = build_model(ARCH, 2)
        out = adapt_stage2(init, view, config(**{"optimizer.lr": 0.0, "stage2.ema_rate": 1.0}))
        for a, b in zip(init.state_dict().values(), out.state_dict().values()):
            assert torch.equal(a, b)

    def test_ema_bookkeeping(self, view):
        init = build_model(ARCH, 2)
        pair = TeacherStudentPair.from_model(init, 0.99)
        out = adapt_stage2(init, view, config(), pair=pair)
        assert pair.ema_updates == 2 * 3
        assert out is pair.teacher
        assert out.step_count == init.step_count + 6

    def test_teacher_receives_no_gradient(self, view):
        init = build_model(ARCH, 2)
        pair = TeacherStudentPair.from_model(init, 1.0)
        adapt_stage2(init, view, config(**{"optimizer.lr": 1e-2}), pair=pair)
        assert all(p.grad is None for p in pair.teacher.parameters())
        # with rate 1 the teacher only moves through the EMA, which leaves it unchanged
        for a, b in zip(init.state_dict().values(), pair.teacher.state_dict().values()):
            assert torch.equal(a, b)
        assert any(not torch.equal(a, b) for a, b in zip(init.state_dict().values(), pair.student.state_dict().values()))

    def test_init_untouched(self, view):
        init = build_model(ARCH, 2)
        before = {k: v.clone() for k, v in init.state_dict().items()}
        adapt_stage2(init, view, config(**{"optimizer.lr": 1e-2}))
        assert all(torch.equal(before[k], v) for k, v in init.state_dict().items())

    @pytest.mark.parametrize("swap", [False, True])
    def test_augmentation_routing(self, view, monkeypatch, swap):
        monkeypatch.setattr(selftrain, "apply_strong", lambda x, seed, specs: torch.zeros_like(x))
        monkeypatch.setattr(selftrain, "apply_weak", lambda x, seed, specs: torch.ones_like(x))
        init = build_model(ARCH, 2)
        pair = TeacherStudentPair.from_model(init, 0.99)
        seen = {}

        def spy(name):
            def hook(module, inputs, output):
                seen.setdefault(name, float(inputs[0].mean()))
            return hook

        pair.teacher.register_forward_hook(spy("teacher"))
        pair.student.register_forward_hook(spy("student"))
        adapt_stage2(init, view, config(**{"stage2.epochs": 1, "stage2.swap_aug_routing": swap}), pair=pair)
        assert seen == ({"teacher": 1.0, "student": 0.0} if swap else {"teacher": 0.0, "student": 1.0})

    def test_rejects_labeled_dataset(self):
        ds = SegDataset([SegSample(np.zeros((3, 8, 8), np.float32), np.zeros((8, 8), np.uint8), "a")])
        with pytest.raises(TypeError):
            adapt_stage2(build_model(ARCH, 0), ds, config())

    def test_empty_dataset(self):
        with pytest.raises(DatasetError):
            adapt_stage2(build_model(ARCH, 0), UnlabeledView([], []), config())

    def test_deterministic(self, view):
        init = build_model(ARCH, 2)
        cfg = config(**{"optimizer.lr": 1e-3})
        a, b = adapt_stage2(init, view, cfg), adapt_stage2(init, view, cfg)
        assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
