import math

import numpy as np
import pytest

from diffcanon import distill, numerics, toydata
from diffcanon.autodiff import Tensor
from diffcanon.canon import CanonicalBundle
from diffcanon.errors import ConfigError, InvalidInputError
from diffcanon.rng import Rng

# ---------------------------------------------------------------- oracles


def brute_align(z, zc, labels, tau):
    b = len(labels)
    total = 0.0
    for i in range(b):
        pos = [j for j in range(b) if labels[j] == labels[i]]
        denom = sum(math.exp(np.dot(z[i], zc[k]) / tau) for k in range(b))
        s = sum(math.log(math.exp(np.dot(z[i], zc[j]) / tau) / denom) for j in pos)
        total += s / len(pos)
    return -total / b


def brute_cluster(zc, labels, tau):
    b = len(labels)
    total = 0.0
    for i in range(b):
        pos = [j for j in range(b) if j != i and labels[j] == labels[i]]
        denom = sum(math.exp(np.dot(zc[i], zc[k]) / tau) for k in range(b) if k != i)
        if pos:
            s = sum(math.log(math.exp(np.dot(zc[i], zc[j]) / tau) / denom) for j in pos)
            total += -s / len(pos)
        else:
            total += math.log(denom)
    return total / b


def unit_rows(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def rand_batch(rng, b, d=4, classes=2):
    z = unit_rows(rng.normal(size=(b, d)))
    zc = unit_rows(rng.normal(size=(b, d)))
    labels = rng.integers(0, classes, size=b)
    return z, zc, labels


# ---------------------------------------------------------------- align loss


def test_align_uniform_similarities():
    z = np.tile([1.0, 0.0], (4, 1))
    labels = np.array([0, 0, 1, 1])
    val = distill.align_loss(Tensor(z), Tensor(z.copy()), labels, 0.1).item()
    assert val == pytest.approx(math.log(4.0), abs=1e-12)


def test_align_two_sample_worked_example():
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    labels = np.array([0, 1])
    val = distill.align_loss(Tensor(z), Tensor(z.copy()), labels, 0.1).item()
    expected = math.log1p(math.exp(-10.0))
    assert val == pytest.approx(expected, rel=1e-8)


def test_align_matches_double_loop_on_100_batches():
    rng = Rng(7)
    for _ in range(100):
        b = int(rng.integers(2, 33))
        z, zc, labels = rand_batch(rng, b)
        got = distill.align_loss(Tensor(z), Tensor(zc), labels, 0.1).item()
        assert abs(got - brute_align(z, zc, labels, 0.1)) <= 1e-8


def test_align_empty_batch_raises():
    with pytest.raises(InvalidInputError):
        distill.align_loss(Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 2))),
                           np.zeros(0, dtype=int), 0.1)


# ---------------------------------------------------------------- cluster loss


def test_cluster_one_per_class_zero_similarity():
    zc = np.array([[1.0, 0.0], [0.0, 1.0]])
    val = distill.cluster_loss(Tensor(zc), np.array([0, 1]), 0.1).item()
    assert val == pytest.approx(0.0, abs=1e-12)


def test_cluster_two_same_class_degenerates_to_zero():
    rng = Rng(9)
    zc = unit_rows(rng.normal(size=(2, 3)))
    val = distill.cluster_loss(Tensor(zc), np.array([1, 1]), 0.1).item()
    assert val == pytest.approx(0.0, abs=1e-12)


def test_cluster_mixed_batch_matches_double_loop():
    rng = Rng(12)
    zc = unit_rows(rng.normal(size=(4, 3)))
    labels = np.array([0, 0, 1, 1])
    got = distill.cluster_loss(Tensor(zc), labels, 0.1).item()
    assert abs(got - brute_cluster(zc, labels, 0.1)) <= 1e-8


def test_cluster_matches_double_loop_on_100_batches():
    rng = Rng(8)
    for _ in range(100):
        b = int(rng.integers(2, 33))
        _, zc, labels = rand_batch(rng, b, classes=3)
        got = distill.cluster_loss(Tensor(zc), labels, 0.1).item()
        assert abs(got - brute_cluster(zc, labels, 0.1)) <= 1e-8


def test_cluster_small_batch_raises():
    with pytest.raises(InvalidInputError):
        distill.cluster_loss(Tensor(np.ones((1, 2))), np.array([0]), 0.1)


# ---------------------------------------------------------------- cka distill loss


def test_cka_loss_maximal_alignment_clamped():
    rng = Rng(3)
    a = rng.normal(size=(10, 4))
    q = np.linalg.qr(rng.normal(size=(4, 4)))[0]
    val = distill.cka_distill_loss(Tensor(a @ q), Tensor(a @ q), a, 0.5).item()
    assert val == pytest.approx(math.log(1e-7), rel=1e-6)


def test_cka_loss_lambda_one_ignores_canonical_term():
    rng = Rng(4)
    z = rng.normal(size=(8, 3))
    a = rng.normal(size=(8, 5))
    v1 = distill.cka_distill_loss(Tensor(z), Tensor(rng.normal(size=(8, 3))), a, 1.0).item()
    v2 = distill.cka_distill_loss(Tensor(z), Tensor(rng.normal(size=(8, 3))), a, 1.0).item()
    assert v1 == v2 == pytest.approx(math.log(1.0 - numerics.linear_cka(z, a)), rel=1e-10)


def test_cka_loss_recombines_from_linear_cka():
    rng = Rng(5)
    for _ in range(20):
        z = rng.normal(size=(9, 4))
        zc = rng.normal(size=(9, 4))
        a = rng.normal(size=(9, 6))
        lam = float(rng.uniform(0.0, 1.0))
        got = distill.cka_distill_loss(Tensor(z), Tensor(zc), a, lam).item()
        want = (lam * math.log(1.0 - numerics.linear_cka(z, a)) +
                (1.0 - lam) * math.log(1.0 - numerics.linear_cka(zc, a)))
        assert abs(got - want) <= 1e-10
        assert got <= 0.0


def test_loss_signs_on_random_batches():
    rng = Rng(6)
    for _ in range(25):
        b = int(rng.integers(2, 16))
        z, zc, labels = rand_batch(rng, b)
        assert distill.align_loss(Tensor(z), Tensor(zc), labels, 0.1).item() >= 0.0
        # the contrastive cluster term is non-negative whenever every
        # anchor has at least one same-class peer
        if all(np.sum(labels == c) >= 2 for c in np.unique(labels)):
            assert distill.cluster_loss(Tensor(zc), labels, 0.1).item() >= -1e-9


# ---------------------------------------------------------------- gradients


def fd_check(build, x0, tol=1e-4, h=1e-6, coords=8):
    t = Tensor(x0.copy(), requires_grad=True)
    build(t).backward()
    worst = 0.0
    for ci in Rng(0).integers(0, x0.size, size=coords):
        xp, xm = x0.copy(), x0.copy()
        xp.reshape(-1)[ci] += h
        xm.reshape(-1)[ci] -= h
        fd = (build(Tensor(xp)).item() - build(Tensor(xm)).item()) / (2 * h)
        got = t.grad.reshape(-1)[ci]
        worst = max(worst, abs(fd - got) / max(abs(fd), abs(got), 1e-8))
    assert worst <= tol, f"worst relative error {worst:.3e}"


def test_align_gradient_finite_difference():
    rng = Rng(31)
    z, zc, labels = rand_batch(rng, 6)
    fd_check(lambda t: distill.align_loss(t, Tensor(zc), labels, 0.1), z)


def test_cluster_gradient_finite_difference():
    rng = Rng(32)
    _, zc, labels = rand_batch(rng, 6)
    fd_check(lambda t: distill.cluster_loss(t, labels, 0.1), zc)


def test_cka_gradient_finite_difference():
    rng = Rng(33)
    z = rng.normal(size=(7, 3))
    zc = rng.normal(size=(7, 3))
    a = rng.normal(size=(7, 4))
    fd_check(lambda t: distill.cka_distill_loss(t, Tensor(zc), a, 0.5), z)


def test_total_loss_gradient_finite_difference(tiny_pool):
    rng = Rng(34)
    xs = rng.normal(size=(6, 2))
    labels = rng.integers(0, 2, size=6)
    cfg = distill.DistillConfig()
    student = distill.StudentClassifier(Rng(1))
    bundles = distill.sample_bundles(tiny_pool, labels, rng)

    w1 = student.W1
    w0 = w1.data.copy()

    def f(vals):
        w1.data[...] = vals
        loss, _ = distill.total_loss(xs, labels, bundles, student, cfg)
        w1.data[...] = w0
        return loss.item()

    loss, _ = distill.total_loss(xs, labels, bundles, student, cfg)
    for p in student.parameters():
        p.grad = None
    loss.backward()
    grad = w1.grad.copy()
    flat = w0.reshape(-1)
    worst = 0.0
    for ci in Rng(0).integers(0, flat.size, size=6):
        h = 1e-6
        vp, vm = w0.copy(), w0.copy()
        vp.reshape(-1)[ci] += h
        vm.reshape(-1)[ci] -= h
        fd = (f(vp) - f(vm)) / (2 * h)
        got = grad.reshape(-1)[ci]
        worst = max(worst, abs(fd - got) / max(abs(fd), abs(got), 1e-8))
    assert worst <= 1e-4


# ---------------------------------------------------------------- total loss / pool


@pytest.fixture(scope="module")
def tiny_pool():
    rng = Rng(77)
    bundles = []
    for i in range(8):
        cls = i % 2
        center = np.array([4.0, 0.0]) if cls else np.array([0.0, 0.0])
        bundles.append(CanonicalBundle(
            seed_sample_id=i, t_e=400, k=1,
            latent=rng.normal(size=2),
            canonical_sample=center + 0.05 * rng.normal(size=2),
            canonical_feature=rng.normal(size=80) + 3.0 * cls,
            cond=cls))
    return distill.ClaRepPool.from_bundles(bundles)


def test_pool_groups_by_class(tiny_pool):
    assert set(tiny_pool.by_class) == {0, 1}
    assert all(len(v) == 4 for v in tiny_pool.by_class.values())
    assert tiny_pool.size() == 8


def test_total_loss_reduces_to_cross_entropy(tiny_pool):
    rng = Rng(41)
    xs = rng.normal(size=(8, 2))
    labels = rng.integers(0, 2, size=8)
    student = distill.StudentClassifier(Rng(2))
    cfg = distill.DistillConfig(lambda_cs=0.0, lambda_dist=0.0)
    bundles = distill.sample_bundles(tiny_pool, labels, rng)
    with_terms, comps = distill.total_loss(xs, labels, bundles, student, cfg)
    plain, _ = distill.total_loss(xs, labels, None, student, cfg)
    assert with_terms.item() == pytest.approx(plain.item(), abs=1e-12)
    assert with_terms.item() == pytest.approx(comps["cls"], abs=1e-12)


def test_total_loss_recombination_identity(tiny_pool):
    rng = Rng(42)
    xs = rng.normal(size=(10, 2))
    labels = rng.integers(0, 2, size=10)
    student = distill.StudentClassifier(Rng(3))
    cfg = distill.DistillConfig(lambda_cs=0.7, lambda_cf=0.3, lambda_dist=2.0,
                                lambda_cka=0.6)
    bundles = distill.sample_bundles(tiny_pool, labels, rng)
    total, c = distill.total_loss(xs, labels, bundles, student, cfg)
    manual = (c["cls"] + cfg.lambda_cs * (cfg.lambda_cf * c["align"] +
                                          (1 - cfg.lambda_cf) * c["cluster"])
              + cfg.lambda_dist * c["cka"])
    assert total.item() == pytest.approx(manual, abs=1e-12)


def test_missing_class_raises_named_config_error():
    bundles = [CanonicalBundle(seed_sample_id=0, t_e=1, k=1, latent=np.zeros(2),
                               canonical_sample=np.zeros(2),
                               canonical_feature=np.zeros(80), cond=0)]
    pool = distill.ClaRepPool.from_bundles(bundles)
    with pytest.raises(ConfigError, match="class 1"):
        distill.sample_bundles(pool, np.array([0, 1]), Rng(0))


def test_pool_sampling_uniform_per_class(tiny_pool):
    rng = Rng(90)
    labels = np.ones(100, dtype=np.int64)
    counts = {b.seed_sample_id: 0 for b in tiny_pool.by_class[1]}
    draws = 1000
    for _ in range(draws):
        for b in distill.sample_bundles(tiny_pool, labels, rng):
            counts[b.seed_sample_id] += 1
    n = draws * 100
    p = 1.0 / len(counts)
    sigma = math.sqrt(p * (1 - p) / n)
    for sid, c in counts.items():
        assert abs(c / n - p) <= 3 * sigma + 1e-9, f"entry {sid} drawn non-uniformly"


# ---------------------------------------------------------------- training


def test_vanilla_student_reaches_95_clean():
    data = toydata.sample_dataset(600, Rng(1).split("data"))
    cfg = distill.DistillConfig(epochs=60, seed=0)
    student, _ = distill.train_student(data, None, cfg, Rng(0).split("student"))
    held_out = toydata.sample_dataset(500, Rng(99))
    report = distill.evaluate(student, held_out)
    assert report.clean_accuracy >= 0.95


def test_training_deterministic(tiny_pool):
    data = toydata.sample_dataset(200, Rng(2).split("data"))
    cfg = distill.DistillConfig(epochs=5, seed=0)
    s1, log1 = distill.train_student(data, tiny_pool, cfg, Rng(5).split("s"))
    s2, log2 = distill.train_student(data, tiny_pool, cfg, Rng(5).split("s"))
    assert log1 == log2
    for a, b in zip(s1.parameters(), s2.parameters()):
        assert np.array_equal(a.data, b.data)


def test_training_rejects_partial_pool():
    data = toydata.sample_dataset(100, Rng(3).split("data"))
    only_zero = distill.ClaRepPool.from_bundles([
        CanonicalBundle(seed_sample_id=0, t_e=1, k=1, latent=np.zeros(2),
                        canonical_sample=np.zeros(2),
                        canonical_feature=np.zeros(80), cond=0)])
    with pytest.raises(ConfigError):
        distill.train_student(data, only_zero, distill.DistillConfig(epochs=1), Rng(0))


def test_training_rejects_unknown_optimizer():
    data = toydata.sample_dataset(50, Rng(3).split("data"))
    with pytest.raises(ConfigError):
        distill.train_student(data, None,
                              distill.DistillConfig(epochs=1, optimizer="lbfgs"), Rng(0))


def test_sgd_momentum_optimizer_trains():
    data = toydata.sample_dataset(300, Rng(4).split("data"))
    cfg = distill.DistillConfig(epochs=40, optimizer="sgd", lr=5e-3)
    student, log = distill.train_student(data, None, cfg, Rng(6))
    assert log[-1]["total"] < log[0]["total"]
    assert distill.evaluate(student, data).clean_accuracy >= 0.9


# ---------------------------------------------------------------- pgd / evaluate


def zeroed_student():
    s = distill.StudentClassifier(Rng(0))
    for p in s.parameters():
        p.data[...] = 0.0
    return s


def test_pgd_zero_gradient_stays_at_random_start():
    s = zeroed_student()
    x = Rng(1).normal(size=(5, 2))
    y = np.zeros(5, dtype=np.int64)
    atk = distill.AttackConfig(epsilon=0.1, steps=5, step_size=0.05)
    start_rng, attack_rng = Rng(50), Rng(50)
    expected_start = x + start_rng.uniform(-0.1, 0.1, size=x.shape)
    out = distill.pgd_attack(s, x, y, atk, attack_rng)
    assert np.array_equal(out, expected_start)
    assert np.max(np.abs(out - x)) <= 0.1


def test_pgd_single_step_zero_start_is_fgsm(trained_student):
    x = np.array([[3.5, 0.2], [0.5, -0.1]])
    y = np.array([1, 0])
    atk = distill.AttackConfig(epsilon=0.1, steps=1, step_size=0.1)
    out = distill.pgd_attack(trained_student, x, y, atk, rng=None)
    x_t = Tensor(x.copy(), requires_grad=True)
    _, logits = trained_student.forward_graph(x_t)
    distill.cross_entropy(logits, y).backward()
    assert np.array_equal(out, x + 0.1 * np.sign(x_t.grad))


def test_pgd_ball_constraint_1000_trials(trained_student):
    rng = Rng(60)
    atk = distill.AttackConfig(epsilon=0.1, steps=5, step_size=0.05)
    x = rng.normal(size=(1000, 2)) * 2.0 + np.array([2.0, 0.0])
    y = rng.integers(0, 2, size=1000)
    out = distill.pgd_attack(trained_student, x, y, atk, rng)
    assert np.max(np.abs(out - x)) <= 0.1 + 1e-9


def test_pgd_input_gradient_matches_finite_difference(trained_student):
    x0 = np.array([[2.2, 0.3]])
    y = np.array([1])
    x_t = Tensor(x0.copy(), requires_grad=True)
    _, logits = trained_student.forward_graph(x_t)
    distill.cross_entropy(logits, y).backward()
    for ci in range(2):
        h = 1e-6
        xp, xm = x0.copy(), x0.copy()
        xp[0, ci] += h
        xm[0, ci] -= h

        def f(v):
            _, lg = trained_student.forward_graph(Tensor(v))
            return distill.cross_entropy(lg, y).item()

        fd = (f(xp) - f(xm)) / (2 * h)
        got = x_t.grad[0, ci]
        assert abs(fd - got) / max(abs(fd), abs(got), 1e-8) <= 1e-4


def test_attack_config_validation(trained_student):
    x = np.zeros((1, 2))
    y = np.zeros(1, dtype=np.int64)
    with pytest.raises(InvalidInputError):
        distill.pgd_attack(trained_student, x, y,
                           distill.AttackConfig(epsilon=0.0), Rng(0))
    with pytest.raises(InvalidInputError):
        distill.pgd_attack(trained_student, x, y,
                           distill.AttackConfig(steps=0), Rng(0))
    with pytest.raises(InvalidInputError):
        distill.pgd_attack(trained_student, x, y,
                           distill.AttackConfig(norm="l2"), Rng(0))


class BayesStudent:
    """Hand-coded optimal rule wrapped in the student interface."""

    def predict(self, x):
        return toydata.bayes_rule(np.atleast_2d(x))


def test_bayes_rule_student_is_perfect_on_cores():
    xs = [toydata.toy_point(y, u, np.zeros(2)) for y in (0, 1) for u in (-0.1, 0.0, 0.1)]
    samples = [toydata.LabeledSample(x, int(i >= 3)) for i, x in enumerate(xs)]
    data = toydata.ToyDataset(samples=samples, seed=0)
    report = distill.evaluate(BayesStudent(), data)
    assert report.clean_accuracy == 1.0


def test_random_students_average_half_accuracy():
    data = toydata.sample_dataset(2000, Rng(8).split("data"))
    accs = [distill.evaluate(distill.StudentClassifier(Rng(1000 + i)), data).clean_accuracy
            for i in range(40)]
    assert abs(float(np.mean(accs)) - 0.5) <= 0.05


@pytest.fixture(scope="module")
def trained_student():
    data = toydata.sample_dataset(400, Rng(1).split("data"))
    cfg = distill.DistillConfig(epochs=40, seed=0)
    student, _ = distill.train_student(data, None, cfg, Rng(0).split("student"))
    return student


def test_student_checkpoint_round_trip(trained_student, tmp_path):
    path = str(tmp_path / "student.json")
    distill.save_student(trained_student, path)
    loaded = distill.load_student(path)
    for a, b in zip(trained_student.parameters(), loaded.parameters()):
        assert np.array_equal(a.data, b.data)
    x = Rng(4).normal(size=(5, 2))
    assert np.array_equal(trained_student.predict(x), loaded.predict(x))
