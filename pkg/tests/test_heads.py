import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from nirvis.datamodel import JointLabelMap
from nirvis.heads import (
    ClassifierError,
    ClassifierWeights,
    MarginConfig,
    arcface_logits,
    arcface_loss,
    joint_finetune_loss,
    mean_classifier_init,
    rct_penalty,
    subspace_extract,
)


def unit(x, dim):
    return x / x.norm(dim=dim, keepdim=True)


def instance(seed, b=8, c=5, d=16, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    e = unit(torch.randn(b, d, generator=g, dtype=dtype), 1)
    w = unit(torch.randn(d, c, generator=g, dtype=dtype), 0)
    y = torch.randint(0, c, (b,), generator=g)
    return e, w, y


def test_m0_single_example():
    w = unit(torch.tensor([[1.0, 0.6], [0.0, 0.8]], dtype=torch.float64), 0)
    e = w[:, 0][None]
    loss, logits = arcface_loss(e, w, torch.tensor([0]), MarginConfig(0.0, 1.0))
    c1 = float(w[:, 1] @ w[:, 0])
    np.testing.assert_allclose(logits.numpy(), [[1.0, c1]], atol=1e-15)
    assert float(loss) == pytest.approx(-math.log(math.e / (math.e + math.exp(c1))), abs=1e-12)


def test_margin_increases_loss():
    for seed in range(10):
        e, w, y = instance(seed)
        l0, _ = arcface_loss(e, w, y, MarginConfig(0.0))
        l5, lg = arcface_loss(e, w, y, MarginConfig(0.5))
        assert float(l5) > float(l0)


def test_fallback_below_pi_minus_m():
    m, s = 0.5, 64.0
    theta = torch.tensor([0.3, math.pi - 0.2], dtype=torch.float64)
    e = torch.stack([torch.cos(theta), torch.sin(theta)], 1)
    w = torch.eye(2, dtype=torch.float64)
    logits = arcface_logits(e, w, torch.tensor([0, 0]), MarginConfig(m, s))
    assert float(logits[0, 0]) == pytest.approx(s * math.cos(0.3 + m), abs=1e-10)
    assert float(logits[1, 0]) == pytest.approx(s * (math.cos(math.pi - 0.2) - m * math.sin(m)), abs=1e-10)
    # off-target logits are untouched
    np.testing.assert_allclose(logits[:, 1].numpy(), s * e[:, 1].numpy(), atol=1e-12)


def test_rotation_invariance():
    e, w, y = instance(4)
    q, _ = torch.linalg.qr(torch.randn(16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(1)))
    a = arcface_logits(e, w, y, MarginConfig(0.5))
    b = arcface_logits(e @ q.T, q @ w, y, MarginConfig(0.5))
    np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-6)


def test_input_validation():
    e, w, y = instance(0)
    with pytest.raises(ClassifierError, match="embeddings"):
        arcface_loss(e * 1.01, w, y, MarginConfig())
    with pytest.raises(ClassifierError, match="columns"):
        arcface_loss(e, w * 2, y, MarginConfig())
    with pytest.raises(ClassifierError, match="labels"):
        arcface_loss(e, w, y + 10, MarginConfig())
    with pytest.raises(ValueError):
        MarginConfig(margin=-0.1)


def test_classifier_weights_container():
    with pytest.raises(ClassifierError):
        ClassifierWeights(np.zeros((4, 2)), ["a"])
    with pytest.raises(ClassifierError):
        ClassifierWeights(np.zeros((4, 2)), ["a", "a"])
    cw = ClassifierWeights(np.eye(3), ["a", "b", "c"])
    assert cw.identity_map == {"a": 0, "b": 1, "c": 2}


def test_mean_init_singletons_are_exact(rng):
    e = rng.standard_normal((4, 6))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    clf = mean_classifier_init(e, [0, 1, 2, 3], 4)
    np.testing.assert_array_equal(clf.matrix, (e / np.linalg.norm(e, axis=1, keepdims=True)).T)
    assert clf.frozen


def test_mean_init_errors():
    e = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ClassifierError, match="zero norm"):
        mean_classifier_init(e, [0, 0, 1], 2)
    with pytest.raises(ClassifierError, match=r"\[2\]"):
        mean_classifier_init(e, [0, 1, 1], 3)


def test_mean_init_separates_narrow_cones():
    rng = np.random.default_rng(5)
    centers = np.eye(6)[:, :5].T  # orthogonal centers, 90 degrees apart
    emb, lab = [], []
    for c, mu in enumerate(centers):
        x = mu + 0.1 * rng.standard_normal((20, 6))  # half-angle well below 45 degrees
        emb.append(x / np.linalg.norm(x, axis=1, keepdims=True))
        lab += [c] * 20
    emb = np.concatenate(emb)
    clf = mean_classifier_init(emb, lab, 5)
    np.testing.assert_allclose(np.linalg.norm(clf.matrix, axis=0), 1, atol=1e-6)
    assert np.mean((emb @ clf.matrix).argmax(1) == np.array(lab)) == 1.0


def test_subspace_extract_single_column():
    joint = JointLabelMap.from_dict({"source_ids": ["A", "B"], "target_ids": ["C"]})
    m = np.random.default_rng(0).standard_normal((4, 3))
    out = subspace_extract(ClassifierWeights(m, ["A", "B", "C"]), joint)
    assert out.identities == ["C"]
    assert out.matrix.tobytes() == m[:, [2]].tobytes()
    probe = np.random.default_rng(1).standard_normal(4)
    assert probe @ np.ascontiguousarray(out.matrix[:, 0]) == probe @ np.ascontiguousarray(m[:, 2])
    with pytest.raises(ClassifierError):
        subspace_extract(ClassifierWeights(m[:, :2], ["A", "B"]), joint)


def test_rct_penalty_cases(rng):
    p0 = {"w": torch.zeros(3, 2, dtype=torch.float64), "b": torch.zeros(1, dtype=torch.float64)}
    assert float(rct_penalty(p0, p0)) == 0.0
    shifted = {"w": p0["w"], "b": torch.tensor([0.3], dtype=torch.float64)}
    assert float(rct_penalty(shifted, p0)) == pytest.approx(0.09, abs=1e-15)
    v = rng.standard_normal(6)
    moved = {"w": torch.from_numpy(v[:6].reshape(3, 2)), "b": p0["b"]}
    assert float(rct_penalty(moved, p0)) == pytest.approx(float(np.sum(v * v)), abs=1e-10)
    with pytest.raises(ClassifierError):
        rct_penalty({"w": torch.zeros(2)}, p0)


@settings(max_examples=40)
@given(st.floats(0.01, 10), st.floats(0.01, 10))
def test_rct_strictly_increasing_along_ray(t1, t2):
    v = torch.tensor([0.3, -1.2, 0.5], dtype=torch.float64)
    snap = {"p": torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)}
    f = lambda t: float(rct_penalty({"p": snap["p"] + t * v}, snap))  # noqa: E731
    if t1 < t2:
        assert f(t1) < f(t2)


def test_joint_loss_worked_values():
    assert joint_finetune_loss(1.7, 99.0, 0.0).l_total == 1.7
    assert joint_finetune_loss(2.0, 3.0, 1.0).l_total == 5.0
    assert joint_finetune_loss(2.0, 3.0, 0.5).l_total == 3.5
    with pytest.raises(ValueError):
        joint_finetune_loss(1.0, 1.0, -0.5)


def test_joint_loss_lambda_zero_blocks_source_gradient():
    src = torch.tensor(3.0, requires_grad=True)
    tgt = torch.tensor(2.0, requires_grad=True)
    out = joint_finetune_loss(tgt * 1.0, src * 2.0, 0.0)
    out.total.backward()
    assert src.grad is None and float(tgt.grad) == 1.0


def test_joint_loss_with_rct():
    out = joint_finetune_loss(torch.tensor(1.0), None, 0.0, rct=torch.tensor(4.0), rct_weight=0.5)
    assert out.l_total == 3.0 and out.rct == 4.0
