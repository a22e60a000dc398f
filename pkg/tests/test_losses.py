import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedifl import losses as L
from fedifl.nn import ShapeError, finite_diff_gradient, relative_error


# ---------------------------------------------------------------- oracles

def cos_oracle(a, b, eps=1e-8):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb + eps)


def pair_sum_oracle(A, B, ya, yb, term):
    """Sum over all (i, j) of term(same_label, cos(a_i, b_j))."""
    total = 0.0
    for i in range(len(A)):
        for j in range(len(B)):
            total += term(ya[i] == yb[j], cos_oracle(A[i], B[j]))
    return total


def csi_oracle(A, B, ya, yb):
    return pair_sum_oracle(A, B, ya, yb, lambda same, s: (1 - s) ** 2 if same else 0.0)


def cdsi_oracle(A, B, ya, yb):
    return pair_sum_oracle(A, B, ya, yb, lambda same, s: 0.0 if same else s**2)


def fipl_pair_oracle(A, B, ya, yb):
    return pair_sum_oracle(A, B, ya, yb, lambda same, s: s**2 if same else 0.0)


def ssim_oracle(features, labels, prototypes, label_space):
    total = 0.0
    for f, y in zip(features, labels):
        num = sum(math.exp(cos_oracle(prototypes[c], f)) for c in label_space if c != y and c in prototypes)
        total += math.log(1 + num / math.exp(cos_oracle(prototypes[y], f)))
    return total / len(labels)


def random_batch(rng, n=4, d=5, classes=3):
    return rng.standard_normal((n, d)), rng.integers(0, classes, n)


# ---------------------------------------------------------------- cosine / prototypes

def test_cosine_examples():
    u = np.array([0.6, 0.8])
    assert abs(L.cosine_similarity(u, u) - 1) <= 1e-6
    assert L.cosine_similarity([1, 0], [0, 1]) == 0
    assert abs(L.cosine_similarity([1, 2, 3], [4, 5, 6]) - 0.974632) <= 1e-5


def test_cosine_dimension_mismatch():
    with pytest.raises(ShapeError):
        L.cosine_similarity([1, 2], [1, 2, 3])


def test_prototypes(rng):
    f = np.array([[1.0, 0.0]])
    np.testing.assert_array_equal(L.feature_prototypes(f, [2])[2], [1.0, 0.0])
    p = L.feature_prototypes(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 0])
    np.testing.assert_array_equal(p[0], [0.5, 0.5])
    feats, labels = rng.standard_normal((20, 3)), rng.integers(0, 4, 20)
    sums, counts = {}, {}
    for x, y in zip(feats, labels.tolist()):
        sums[y] = sums.get(y, 0) + x
        counts[y] = counts.get(y, 0) + 1
    protos = L.feature_prototypes(feats, labels)
    assert set(protos) == set(sums)
    for y in sums:
        np.testing.assert_allclose(protos[y], sums[y] / counts[y], atol=1e-14)


# ---------------------------------------------------------------- structural similarity

def test_ssim_two_class_scalar():
    # S(fp_y, f) = 1 and S(fp_c, f) = -1
    f = np.array([[1.0, 0.0]])
    protos = {0: np.array([2.0, 0.0]), 1: np.array([-3.0, 0.0])}
    assert abs(L.structural_similarity_loss(f, [0], protos, {0, 1}) - 0.126928) <= 1e-5


def test_ssim_equal_similarities_give_log_count():
    f = np.array([[1.0, 0.0, 0.0]])
    protos = {0: np.array([0.0, 1.0, 0.0]), 1: np.array([0.0, 0.0, 1.0]), 2: np.array([0.0, -1.0, 0.0])}
    assert abs(L.structural_similarity_loss(f, [0], protos, {0, 1, 2}) - math.log(3)) <= 1e-12


def test_ssim_matches_oracle(rng):
    for _ in range(20):
        feats, labels = random_batch(rng, n=8, classes=4)
        protos = L.feature_prototypes(feats, labels)
        space = set(range(4))
        got = L.structural_similarity_loss(feats, labels, protos, space)
        assert abs(got - ssim_oracle(feats, labels, protos, space)) <= 1e-10


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), classes=st.integers(2, 5))
def test_ssim_bounds(seed, classes):
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((12, 4))
    labels = rng.integers(0, classes, 12)
    protos = L.feature_prototypes(feats, labels)
    k = len(protos)
    v = L.structural_similarity_loss(feats, labels, protos, range(classes))
    lo, hi = math.log(1 + (k - 1) * math.exp(-2)), math.log(1 + (k - 1) * math.exp(2))
    assert lo - 1e-12 <= v <= hi + 1e-12


def test_ssim_missing_prototype():
    with pytest.raises(KeyError):
        L.structural_similarity_loss(np.ones((1, 2)), [3], {0: np.ones(2)}, {0, 3})


def test_ssim_gradient_through_prototypes(rng):
    for _ in range(10):
        feats, labels = random_batch(rng, n=6, classes=3)
        _, g = L.structural_similarity_grad(feats, labels, {0, 1, 2})
        num = finite_diff_gradient(
            lambda: L.structural_similarity_grad(feats, labels, {0, 1, 2})[0], {"f": feats})["f"]
        assert relative_error(g, num) <= 1e-4


# ---------------------------------------------------------------- cross entropy

def test_cross_entropy_examples(rng):
    logits = np.array([[100.0, 0.0, 0.0]])
    assert L.cross_entropy(logits, [7], {7: 0, 8: 1, 9: 2}) <= 1e-6
    assert abs(L.cross_entropy(np.zeros((2, 5)), [0, 3], {i: i for i in range(5)}) - math.log(5)) <= 1e-12
    logits = rng.standard_normal((4, 3))
    labels = [2, 0, 1, 1]
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    oracle = -np.mean([math.log(p[i, y]) for i, y in enumerate(labels)])
    assert abs(L.cross_entropy(logits, labels, {0: 0, 1: 1, 2: 2}) - oracle) <= 1e-10


def test_cross_entropy_unmapped_label():
    with pytest.raises(KeyError):
        L.cross_entropy(np.zeros((1, 2)), [5], {0: 0, 1: 1})


def test_cross_entropy_gradient(rng):
    logits = rng.standard_normal((5, 4))
    labels = rng.integers(0, 4, 5)
    imap = {i: i for i in range(4)}
    _, g = L.cross_entropy_grad(logits, labels, imap)
    num = finite_diff_gradient(lambda: L.cross_entropy(logits, labels, imap), {"z": logits})["z"]
    assert relative_error(g, num) <= 1e-4


def test_ipcl_loss_is_sum(rng):
    feats, labels = random_batch(rng)
    s = L.structural_similarity_loss(feats, labels, L.feature_prototypes(feats, labels), range(3))
    c = L.cross_entropy(rng.standard_normal((4, 3)), labels, {0: 0, 1: 1, 2: 2})
    assert abs(L.ipcl_loss(s, c) - (s + c)) <= 1e-12
    assert L.ipcl_loss(s, 0.0) == s


# ---------------------------------------------------------------- adversarial

def test_adversarial_perfect_identifier():
    lg, li = L.adversarial_losses(np.full(4, 1 - 1e-7), np.full(4, 1e-7))
    assert li <= 1e-6
    assert abs(lg - (-math.log(1e-7))) <= 1e-9
    assert abs(lg - 16.1) <= 0.05


def test_adversarial_symmetry_point():
    lg, li = L.adversarial_losses(np.full(3, 0.5), np.full(3, 0.5))
    assert abs(li - 2 * math.log(2)) <= 1e-12
    assert abs(lg - math.log(2)) <= 1e-12


def test_adversarial_generator_gradient_sign(rng):
    fake = rng.uniform(0.05, 0.95, 6)
    _, _, d_fake_g = L.adversarial_grads(rng.uniform(0.05, 0.95, 6), fake)
    assert (d_fake_g < 0).all()


def test_adversarial_rejects_out_of_range():
    with pytest.raises(ValueError):
        L.adversarial_losses(np.array([1.5]), np.array([0.5]))


def test_adversarial_gradients_match_fd(rng):
    real = rng.uniform(0.05, 0.95, 5)
    fake = rng.uniform(0.05, 0.95, 5)
    dri, dfi, dfg = L.adversarial_grads(real, fake)
    num = finite_diff_gradient(lambda: L.adversarial_losses(real, fake)[1], {"r": real, "f": fake})
    assert relative_error(dri, num["r"]) <= 1e-4
    assert relative_error(dfi, num["f"]) <= 1e-4
    num = finite_diff_gradient(lambda: L.adversarial_losses(real, fake)[0], {"f": fake})
    assert relative_error(dfg, num["f"]) <= 1e-4


def test_adversarial_logit_form_agrees_inside_window(rng):
    zr, zf = rng.standard_normal(8) * 3, rng.standard_normal(8) * 3
    sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
    lg, li, dri, dfi, dfg = L.adversarial_losses_from_logits(zr, zf)
    lg2, li2 = L.adversarial_losses(sig(zr), sig(zf))
    assert abs(lg - lg2) <= 1e-10 and abs(li - li2) <= 1e-10
    num = finite_diff_gradient(lambda: L.adversarial_losses_from_logits(zr, zf)[1], {"r": zr, "f": zf})
    assert relative_error(dri, num["r"]) <= 1e-4
    assert relative_error(dfi, num["f"]) <= 1e-4
    num = finite_diff_gradient(lambda: L.adversarial_losses_from_logits(zr, zf)[0], {"f": zf})
    assert relative_error(dfg, num["f"]) <= 1e-4


def test_ipfg_loss():
    assert L.ipfg_loss(1.25, 0.5) == 1.75
    assert L.ipfg_loss(1.25, 0.0) == 1.25


# ---------------------------------------------------------------- similarity matrix / LDM

def test_similarity_matrix_examples(rng):
    A = rng.standard_normal((4, 3))
    assert np.abs(np.diag(L.similarity_matrix(A, A)) - 1).max() <= 1e-6
    Q = np.eye(4)[:3]
    np.testing.assert_allclose(L.similarity_matrix(Q, Q), np.eye(3), atol=1e-7)
    A, B = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    SI = L.similarity_matrix(A, B)
    for i in range(3):
        for j in range(3):
            assert abs(SI[i, j] - cos_oracle(A[i], B[j])) <= 1e-10


def test_similarity_matrix_shape_error():
    with pytest.raises(ShapeError):
        L.similarity_matrix(np.ones((2, 3)), np.ones((2, 4)))


def test_similarity_matrix_backward(rng):
    A, B = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
    R = rng.standard_normal((3, 5))
    dA, dB = L.similarity_matrix_backward(A, B, R)
    num = finite_diff_gradient(lambda: float((L.similarity_matrix(A, B) * R).sum()), {"A": A, "B": B})
    assert relative_error(dA, num["A"]) <= 1e-4
    assert relative_error(dB, num["B"]) <= 1e-4


def test_ldm_examples():
    np.testing.assert_array_equal(L.label_discriminant_matrix([0, 1], [0, 1]), [[1, 0], [0, 1]])
    assert L.label_discriminant_matrix([2, 2, 2], [2, 2, 2]).all()
    np.testing.assert_array_equal(L.label_discriminant_matrix([0, 1, 2], [2, 1, 0]), np.fliplr(np.eye(3)))
    with pytest.raises(ShapeError):
        L.label_discriminant_matrix([0, 1], [0])


# ---------------------------------------------------------------- CSI / CDSI / FIPL pair terms

def test_csi_examples(rng):
    Q = np.eye(4)
    assert abs(L.csi(Q, Q, [0, 1, 2, 3], [0, 1, 2, 3])) <= 1e-6
    a = np.array([[1.0, 0.0]])
    b = np.array([[0.5, math.sqrt(3) / 2]])  # cos = 0.5
    assert abs(L.csi(a, b, [1], [1]) - 0.25) <= 1e-6
    A, B = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    ya, yb = rng.integers(0, 2, 4), rng.integers(0, 2, 4)
    assert abs(L.csi(A, B, ya, yb) - csi_oracle(A, B, ya, yb)) <= 1e-10


def test_cdsi_examples(rng):
    assert L.cdsi(np.eye(2), np.eye(2), [0, 1], [0, 1]) == 0.0
    a = np.array([[1.0, 0.0]])
    b = np.array([[-0.5, math.sqrt(3) / 2]])  # cos = -0.5
    assert abs(L.cdsi(a, b, [0], [1]) - 0.25) <= 1e-6
    A, B = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    ya, yb = rng.integers(0, 3, 5), rng.integers(0, 3, 5)
    assert abs(L.cdsi(A, B, ya, yb) - cdsi_oracle(A, B, ya, yb)) <= 1e-10


def test_pair_shape_errors():
    with pytest.raises(ShapeError):
        L.csi(np.ones((2, 3)), np.ones((3, 3)), [0, 1], [0, 1, 2])
    with pytest.raises(ShapeError):
        L.cdsi(np.ones((2, 3)), np.ones((2, 3)), [0, 1], [0])


# ---------------------------------------------------------------- FICL / FIPL

def test_ficl_examples(rng):
    A = np.array([[1.0, 0.0], [2.0, 0.0]])
    assert abs(L.ficl([(A, [0, 0]), (A.copy(), [0, 0])])) <= 1e-6
    batches = [random_batch(rng, n=4, d=3, classes=2) for _ in range(3)]
    brute = sum(
        csi_oracle(Ab, Bb, ya, yb) + cdsi_oracle(Ab, Bb, ya, yb)
        for a, (Ab, ya) in enumerate(batches)
        for b, (Bb, yb) in enumerate(batches)
        if a != b
    )
    assert abs(L.ficl(batches) - brute) <= 1e-9


def test_ficl_needs_two_batches(rng):
    with pytest.raises(ValueError):
        L.ficl([random_batch(rng)])


def test_fipl_examples(rng):
    inv = [(np.array([[1.0, 0.0]]), [0])]
    assert L.fipl(inv, [(np.array([[0.0, 3.0]]), [0])]) == 0.0
    assert abs(L.fipl(inv, [(np.array([[2.0, 0.0]]), [0])]) - 1) <= 1e-6
    invs = [random_batch(rng, n=4, d=3) for _ in range(2)]
    spes = [random_batch(rng, n=4, d=3) for _ in range(2)]
    brute = sum(fipl_pair_oracle(A, B, ya, yb) for A, ya in invs for B, yb in spes)
    assert abs(L.fipl(invs, spes) - brute) <= 1e-10


def test_mean_reduction_scales(rng):
    batches = [random_batch(rng, n=4, d=3) for _ in range(3)]
    assert abs(L.ficl(batches, "mean") - L.ficl(batches) / 16) <= 1e-12
    assert abs(L.fipl(batches, batches, "mean") - L.fipl(batches, batches) / 16) <= 1e-12


def test_ficl_fipl_gradients(rng):
    for _ in range(5):
        sets = [random_batch(rng, n=4, d=3, classes=2) for _ in range(3)]
        spec = [random_batch(rng, n=4, d=3, classes=2) for _ in range(3)]
        _, g = L.ficl_grad(sets, "mean")
        params = {str(i): s[0] for i, s in enumerate(sets)}
        num = finite_diff_gradient(lambda: L.ficl(sets, "mean"), params)
        for i in range(3):
            assert relative_error(g[i], num[str(i)]) <= 1e-4
        _, gi, gs = L.fipl_grad(sets, spec)
        params.update({f"s{i}": s[0] for i, s in enumerate(spec)})
        num = finite_diff_gradient(lambda: L.fipl(sets, spec), params)
        for i in range(3):
            assert relative_error(gi[i], num[str(i)]) <= 1e-4
            assert relative_error(gs[i], num[f"s{i}"]) <= 1e-4


# ---------------------------------------------------------------- orthogonal

def test_orthogonal_examples(rng):
    I = np.eye(3)
    assert L.orthogonal_loss(I, I[[1, 2, 0]]) == 0.0
    assert abs(L.orthogonal_loss(I, I) - 3.0) <= 1e-12
    A, B = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    oracle = sum(
        float(a @ b) ** 2 + abs(np.linalg.norm(a) - 1) + abs(np.linalg.norm(b) - 1) for a, b in zip(A, B)
    )
    assert abs(L.orthogonal_loss(A, B) - oracle) <= 1e-10
    raw = sum(float(a @ b) + abs(np.linalg.norm(a) - 1) + abs(np.linalg.norm(b) - 1) for a, b in zip(A, B))
    assert abs(L.orthogonal_loss(A, B, form="raw") - raw) <= 1e-10


def test_orthogonal_shape_error():
    with pytest.raises(ShapeError):
        L.orthogonal_loss(np.ones((2, 3)), np.ones((3, 3)))


@pytest.mark.parametrize("form", ["squared", "raw"])
def test_orthogonal_gradient(rng, form):
    A, B = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    _, dA, dB = L.orthogonal_loss_grad(A, B, form, "mean")
    num = finite_diff_gradient(lambda: L.orthogonal_loss(A, B, form, "mean"), {"A": A, "B": B})
    assert relative_error(dA, num["A"]) <= 1e-4
    assert relative_error(dB, num["B"]) <= 1e-4


def test_cct_loss_is_sum():
    assert L.cct_loss(0.5, 0.25, 0.125, 1.0) == 1.875
    assert L.cct_loss(0, 0, 0, 0) == 0


# ---------------------------------------------------------------- properties

@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 6), d=st.integers(1, 5))
def test_pairwise_losses_nonnegative(seed, n, d):
    rng = np.random.default_rng(seed)
    sets = [random_batch(rng, n=n, d=d, classes=3) for _ in range(3)]
    A, ya = sets[0]
    B, yb = sets[1]
    assert L.csi(A, B, ya, yb) >= 0
    assert L.cdsi(A, B, ya, yb) >= 0
    assert L.ficl(sets) >= 0
    assert L.fipl(sets, sets) >= 0
    assert L.orthogonal_loss(A, B) >= 0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_csi_self_with_distinct_labels_vanishes(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((5, 4))
    y = np.arange(5)
    diag = np.diag(L.similarity_matrix(A, A))
    assert abs(L.csi(A, A, y, y) - ((1 - diag) ** 2).sum()) <= 1e-12
    assert L.csi(A, A, y, y) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_losses_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    A, ya = random_batch(rng, n=6, d=4)
    B, yb = random_batch(rng, n=6, d=4)
    p = rng.permutation(6)
    assert abs(L.csi(A, B, ya, yb) - L.csi(A[p], B, ya[p], yb)) <= 1e-10
    assert abs(L.cdsi(A, B, ya, yb) - L.cdsi(A, B[p], ya, yb[p])) <= 1e-10
    assert abs(L.fipl([(A, ya)], [(B, yb)]) - L.fipl([(A[p], ya[p])], [(B, yb)])) <= 1e-10
    assert abs(L.ficl([(A, ya), (B, yb)]) - L.ficl([(A[p], ya[p]), (B, yb)])) <= 1e-10
    assert abs(L.orthogonal_loss(A, B) - L.orthogonal_loss(A[p], B[p])) <= 1e-10
    pr = L.feature_prototypes(A, ya)
    assert abs(L.structural_similarity_loss(A, ya, pr, range(3))
               - L.structural_similarity_loss(A[p], ya[p], pr, range(3))) <= 1e-10
    z = rng.standard_normal((6, 3))
    imap = {0: 0, 1: 1, 2: 2}
    assert abs(L.cross_entropy(z, ya, imap) - L.cross_entropy(z[p], ya[p], imap)) <= 1e-10
