import copy
import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from classforget.data import ClassPartition, MiniBatch
from classforget.erwp import (LossComponents, ModelPair, UnlearnConfig,
                              classification_loss, erwp_batch_loss, erwp_epoch,
                              erwp_run, kd_loss, RunHistory)
from classforget.errors import EmptyBatchError, InvalidPartitionError
from classforget.models import predict_logits
from classforget.relevance import all_false_mask, all_true_mask

from conftest import TinyLinearNet, assert_bit_identical


def batch_of(images, labels, partition):
    labels = torch.as_tensor(labels)
    return MiniBatch(images, labels, partition.excluded_flags(labels))


def two_class_partition():
    return ClassPartition.last_k(2, 1)


class TestClassificationLoss:
    def test_excluded_example_at_half_probability(self):
        # logits (0, 0) put probability 0.5 on the true (excluded) class:
        # the negated cross-entropy is ln(0.5)
        partition = two_class_partition()
        logits = torch.zeros(1, 2)
        batch = batch_of(torch.zeros(1, 1), [1], partition)
        l_c_e, l_c_ne, l_c = classification_loss(logits, batch, partition)
        expected = math.log(0.5)  # -0.6931471805599453
        assert float(l_c_e) == pytest.approx(expected, abs=1e-6)
        assert float(l_c_ne) == 0.0
        assert float(l_c) == pytest.approx(expected, abs=1e-6)

    def test_no_excluded_examples(self):
        partition = two_class_partition()
        logits = torch.tensor([[2.0, -1.0], [0.5, 0.1]])
        batch = batch_of(torch.zeros(2, 1), [0, 0], partition)
        l_c_e, l_c_ne, l_c = classification_loss(logits, batch, partition)
        assert float(l_c_e) == 0.0
        assert float(l_c) == pytest.approx(float(l_c_ne) / 2)

    def test_perfect_remaining_prediction(self):
        partition = two_class_partition()
        logits = torch.tensor([[50.0, -50.0]])
        batch = batch_of(torch.zeros(1, 1), [0], partition)
        _, _, l_c = classification_loss(logits, batch, partition)
        assert float(l_c) == pytest.approx(0.0, abs=1e-6)

    def test_empty_batch_raises(self):
        partition = two_class_partition()
        batch = MiniBatch(torch.zeros(0, 1), torch.zeros(0, dtype=torch.long),
                          torch.zeros(0, dtype=torch.bool))
        with pytest.raises(EmptyBatchError):
            classification_loss(torch.zeros(0, 2), batch, partition)


class TestKdLoss:
    def closed_form(self, s_logits, t_logits, kappa, direction):
        # direct scalar evaluation of the temperature-softened divergence
        def soft(v):
            exps = [math.exp(x / kappa) for x in v]
            z = sum(exps)
            return [e / z for e in exps]
        p_s, p_t = soft(s_logits), soft(t_logits)
        if direction == "teacher-to-student":
            return sum(t * math.log(t / s) for t, s in zip(p_t, p_s))
        return sum(s * math.log(s / t) for s, t in zip(p_s, p_t))

    def test_identical_logits_give_zero(self):
        partition = ClassPartition.last_k(3, 1)
        logits = torch.tensor([[0.3, -1.2, 4.0], [2.0, 2.0, 2.0]])
        batch = batch_of(torch.zeros(2, 1), [0, 2], partition)
        for direction in ("teacher-to-student", "student-to-teacher"):
            _, _, l_kd = kd_loss(logits, logits.clone(), batch, partition,
                                 kappa=2.0, direction=direction)
            assert abs(float(l_kd)) <= 1e-9

    @pytest.mark.parametrize("direction",
                             ["teacher-to-student", "student-to-teacher"])
    def test_two_class_slice_closed_form(self, direction):
        # student slice (0, 0), teacher slice (2, 0), kappa=2: softened
        # distributions are (0.5, 0.5) and (e, 1)/(e + 1)
        partition = ClassPartition.from_excluded(3, [2])
        student = torch.tensor([[0.0, 0.0, 5.0]])
        teacher = torch.tensor([[2.0, 0.0, -1.0]])
        batch = batch_of(torch.zeros(1, 1), [2], partition)
        l_kd_e, l_kd_ne, l_kd = kd_loss(student, teacher, batch, partition,
                                        kappa=2.0, direction=direction)
        expected = self.closed_form([0.0, 0.0], [2.0, 0.0], 2.0, direction)
        assert float(l_kd_e) == pytest.approx(expected, abs=1e-6)
        assert float(l_kd_ne) == 0.0
        assert float(l_kd) == pytest.approx(expected, abs=1e-6)

    def test_reverse_direction_value(self):
        # KL((0.5, 0.5) || (e, 1)/(e+1)) = ln(1/2) + ln(e+1) - 1/2
        val = self.closed_form([0.0, 0.0], [2.0, 0.0], 2.0,
                               "student-to-teacher")
        assert val == pytest.approx(0.1201145070, abs=1e-9)

    def test_large_temperature_flattens_to_zero(self):
        partition = ClassPartition.last_k(4, 1)
        student = torch.tensor([[3.0, -1.0, 0.5, 2.0]])
        teacher = torch.tensor([[-2.0, 1.5, 0.0, 1.0]])
        batch = batch_of(torch.zeros(1, 1), [0], partition)
        _, _, small = kd_loss(student, teacher, batch, partition, kappa=1e6)
        _, _, big = kd_loss(student, teacher, batch, partition, kappa=2.0)
        # both softened distributions approach uniform: the divergence decays
        # toward zero (up to float32 noise) and far below the kappa=2 value
        assert abs(float(small)) < 1e-6
        assert abs(float(small)) < abs(float(big)) / 1e3

    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 6))
    @settings(max_examples=30, deadline=None)
    def test_nonnegative(self, seed, n):
        g = torch.Generator().manual_seed(seed)
        partition = ClassPartition.last_k(5, 2)
        student = torch.randn(n, 5, generator=g) * 3
        teacher = torch.randn(n, 5, generator=g) * 3
        labels = torch.randint(0, 5, (n,), generator=g)
        batch = batch_of(torch.zeros(n, 1), labels, partition)
        for direction in ("teacher-to-student", "student-to-teacher"):
            l_kd_e, l_kd_ne, l_kd = kd_loss(student, teacher, batch,
                                            partition, 2.0, direction)
            assert float(l_kd) >= -1e-9
            assert float(l_kd_e) >= -1e-9 and float(l_kd_ne) >= -1e-9

    def test_no_remaining_classes_rejected_at_partition_level(self):
        with pytest.raises(InvalidPartitionError):
            ClassPartition(tuple(range(3)), ())


def toy_pair(seed=0, num_classes=4, dim=3, dtype=torch.float32):
    torch.manual_seed(seed)
    student = TinyLinearNet(dim, num_classes).to(dtype)
    teacher = TinyLinearNet(dim, num_classes).to(dtype)
    return ModelPair(teacher=teacher, student=student)


class TestLossAlgebra:
    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 12))
    @settings(max_examples=25, deadline=None)
    def test_breakdown_identities(self, seed, n):
        g = torch.Generator().manual_seed(seed)
        partition = ClassPartition.last_k(4, 2)
        pair = toy_pair(seed % 1000)
        images = torch.randn(n, 3, generator=g)
        labels = torch.randint(0, 4, (n,), generator=g)
        batch = batch_of(images, labels, partition)
        cfg = UnlearnConfig(beta=7.5, kappa=2.0, lr=1e-3, epochs=1)
        _, b = erwp_batch_loss(pair, batch, partition, cfg)
        s = batch.s
        assert b.l_c == pytest.approx((b.l_c_e + b.l_c_ne) / s, abs=1e-9)
        assert b.l_kd == pytest.approx((b.l_kd_e + b.l_kd_ne) / s, abs=1e-9)
        assert b.total == pytest.approx(b.l_c + 7.5 * b.l_kd, abs=1e-9)
        for v in (b.l_c_e, b.l_c_ne, b.l_c, b.l_kd_e, b.l_kd_ne, b.l_kd,
                  b.total):
            assert math.isfinite(v)


class TestGradientCheck:
    def test_total_loss_matches_central_differences(self):
        # 16-parameter double-precision model; the analytic gradient of the
        # combined loss must match central finite differences to 1e-4
        partition = ClassPartition.last_k(4, 2)
        pair = toy_pair(3, dtype=torch.float64)
        g = torch.Generator().manual_seed(11)
        images = torch.randn(8, 3, generator=g, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2, 3, 0, 1, 2, 3])
        batch = batch_of(images, labels, partition)
        cfg = UnlearnConfig(beta=10.0, kappa=2.0, lr=1e-3, epochs=1)

        def total_loss():
            t, _ = erwp_batch_loss(pair, batch, partition, cfg)
            return t

        params = list(pair.student.named_parameters())
        analytic = torch.autograd.grad(total_loss(),
                                       [p for _, p in params])
        eps = 1e-6
        for (name, p), a in zip(params, analytic):
            flat = p.data.view(-1)
            fd = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(total_loss().detach())
                flat[i] = orig - eps
                down = float(total_loss().detach())
                flat[i] = orig
                fd[i] = (up - down) / (2 * eps)
            a_flat = a.reshape(-1)
            denom = torch.maximum(a_flat.abs() + fd.abs(),
                                  torch.tensor(1e-8, dtype=torch.float64))
            rel = ((a_flat - fd).abs() / denom).max()
            assert float(rel) <= 1e-4, f"{name}: rel error {float(rel)}"


class TestEngine:
    def make_setup(self, seed=0):
        partition = ClassPartition.last_k(4, 2)
        pair = toy_pair(seed)
        g = torch.Generator().manual_seed(seed + 1)
        images = torch.randn(32, 3, generator=g)
        labels = torch.arange(32) % 4
        batches = [batch_of(images[i:i + 8], labels[i:i + 8], partition)
                   for i in range(0, 32, 8)]
        return partition, pair, batches

    def test_beta_zero_all_false_mask_is_noop_but_reports(self):
        partition, pair, batches = self.make_setup()
        before = {n: p.detach().clone()
                  for n, p in pair.student.named_parameters()}
        cfg = UnlearnConfig(beta=0.0, kappa=2.0, lr=0.5, epochs=1)
        mask = all_false_mask(pair.student)
        history = erwp_epoch(pair, batches, mask, partition, cfg)
        assert len(history) == 4
        assert all(math.isfinite(b.total) for b in history)
        for n, p in pair.student.named_parameters():
            assert_bit_identical(p.detach(), before[n], n)

    def test_unmasked_tensors_bit_identical_after_run(self):
        from classforget.data import (ImageDataset, LimitedSubsetSpec,
                                      build_limited_subset)
        partition = ClassPartition.last_k(4, 2)
        pair = toy_pair(5)
        g = torch.Generator().manual_seed(9)
        ds = ImageDataset(torch.randn(40, 3, generator=g),
                          torch.arange(40) % 4, 4)
        subset = build_limited_subset(
            ds, LimitedSubsetSpec(fraction_per_class=1.0, seed=0))
        mask = all_false_mask(pair.student)
        mask.tensors["head.weight"][2:, :] = True  # only excluded rows move
        before = {n: p.detach().clone()
                  for n, p in pair.student.named_parameters()}
        teacher_before = {n: p.detach().clone()
                          for n, p in pair.teacher.named_parameters()}
        cfg = UnlearnConfig(beta=2.0, kappa=2.0, lr=0.05, epochs=3,
                            batch_size=8)
        erwp_run(pair, subset, mask, partition, cfg)
        for n, p in pair.student.named_parameters():
            m = mask.tensors[n]
            assert_bit_identical(p.detach()[~m], before[n][~m], n)
        assert not torch.equal(
            pair.student.head.weight.detach()[2:], before["head.weight"][2:])
        for n, p in pair.teacher.named_parameters():
            assert_bit_identical(p.detach(), teacher_before[n], f"teacher {n}")

    def test_excluded_ce_rises_after_run(self):
        from classforget.data import (ImageDataset, LimitedSubsetSpec,
                                      build_limited_subset)
        import torch.nn.functional as F
        partition = ClassPartition.last_k(4, 2)
        pair = toy_pair(7)
        g = torch.Generator().manual_seed(21)
        ds = ImageDataset(torch.randn(40, 3, generator=g),
                          torch.arange(40) % 4, 4)
        subset = build_limited_subset(
            ds, LimitedSubsetSpec(fraction_per_class=1.0, seed=0))
        exc_sel = partition.excluded_flags(ds.labels)

        def excluded_ce(model):
            logits = predict_logits(model, ds.images[exc_sel])
            return float(F.cross_entropy(logits, ds.labels[exc_sel]))

        before = excluded_ce(pair.student)
        cfg = UnlearnConfig(beta=10.0, kappa=2.0, lr=0.05, epochs=4,
                            batch_size=8)
        final, _ = erwp_run(pair, subset, all_true_mask(pair.student),
                            partition, cfg)
        assert excluded_ce(final) > before

    def test_epochs_zero_keeps_student_identical(self):
        from classforget.data import (ImageDataset, LimitedSubsetSpec,
                                      build_limited_subset)
        partition = ClassPartition.last_k(4, 2)
        pair = toy_pair(2)
        ds = ImageDataset(torch.randn(8, 3), torch.arange(8) % 4, 4)
        subset = build_limited_subset(
            ds, LimitedSubsetSpec(fraction_per_class=1.0, seed=0))
        before = {n: p.detach().clone()
                  for n, p in pair.student.named_parameters()}
        cfg = UnlearnConfig(epochs=0)
        final, history = erwp_run(pair, subset, all_true_mask(pair.student),
                                  partition, cfg)
        assert history.losses == [] and history.reports == []
        for n, p in final.named_parameters():
            assert_bit_identical(p.detach(), before[n], n)

    def test_component_switches(self):
        partition, pair, batches = self.make_setup(3)
        cfg = UnlearnConfig(beta=5.0)
        _, full = erwp_batch_loss(pair, batches[0], partition, cfg)
        _, no_exc = erwp_batch_loss(pair, batches[0], partition, cfg,
                                    LossComponents(excluded_ce=False))
        _, no_kd = erwp_batch_loss(pair, batches[0], partition, cfg,
                                   LossComponents(kd=False))
        assert no_exc.l_c_e == 0.0 and full.l_c_e != 0.0
        assert no_exc.l_c_ne == full.l_c_ne
        assert no_kd.l_kd == 0.0 and no_kd.total == no_kd.l_c

    def test_lr_schedule_applies(self):
        from classforget.data import (ImageDataset, LimitedSubsetSpec,
                                      build_limited_subset)
        partition = ClassPartition.last_k(4, 2)
        pair_a = toy_pair(4)
        pair_b = copy.deepcopy(pair_a)
        ds = ImageDataset(torch.randn(16, 3), torch.arange(16) % 4, 4)
        subset = build_limited_subset(
            ds, LimitedSubsetSpec(fraction_per_class=1.0, seed=0))
        mask = all_true_mask(pair_a.student)
        # dropping the lr to ~zero from epoch 2 must change the trajectory
        cfg_a = UnlearnConfig(lr=0.05, epochs=3, batch_size=8,
                              lr_schedule=((2, 1e-12),))
        cfg_b = UnlearnConfig(lr=0.05, epochs=3, batch_size=8)
        final_a, _ = erwp_run(pair_a, subset, mask, partition, cfg_a)
        final_b, _ = erwp_run(pair_b, subset, mask, partition, cfg_b)
        assert not torch.equal(final_a.head.weight.detach(),
                               final_b.head.weight.detach())

    def test_losses_csv_layout(self):
        partition, pair, batches = self.make_setup(1)
        cfg = UnlearnConfig(beta=1.0, lr=1e-3)
        history = RunHistory()
        for i, b in enumerate(erwp_epoch(pair, batches, all_false_mask(
                pair.student), partition, cfg)):
            history.losses.append((1, i, b))
        csv = history.losses_csv(config_hash="deadbeef", seed=9)
        lines = csv.strip().splitlines()
        assert lines[0] == "# config_hash=deadbeef seed=9"
        assert lines[1] == "epoch,batch,l_c_e,l_c_ne,l_kd_e,l_kd_ne,total"
        assert len(lines) == 2 + len(batches)
