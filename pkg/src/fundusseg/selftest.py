"""Built-in verification suites behind `self-test` and `grad-check`.

Each suite returns (name, passed, detail) rows.  The checks are compact
replicas of the package's core guarantees, runnable on an installed copy
without the test tree: finite-difference gradient agreement, attention
blocks against naive loop references, residual identities of fresh
blocks, exact AUC pair-counting agreement, loss fixtures, histogram
equalization properties, optimizer hand examples, and checkpoint round
trips.
"""

from __future__ import annotations

import math
import os
import tempfile
import time

import numpy as np

from . import reference as ref
from . import tensor as T
from .blocks import GlobalContextBlock, RelationBlock
from .checkpoint import Checkpoint
from .imgproc import ClaheParams, _clip_histogram, clahe_channel
from .loss import LossWeights, total_loss, weighted_ce
from .metrics import auc_pr, auc_roc
from .network import ModelConfig, SegmentationNetwork, VARIANTS
from .tensor import Node
from .train import TrainConfig, lr_at, sgd_step
from .tensor import Parameter

Check = tuple[str, bool, str]


def _randomize(block, seed):
    rng = np.random.default_rng(seed)
    for p in block.params():
        p.data = rng.standard_normal(p.data.shape) * 0.5
        p.grad = None


def _weight_dict(head_or_block):
    return {
        "query.kernel": head_or_block.query.kernel.data,
        "query.bias": head_or_block.query.bias.data,
        "key.kernel": head_or_block.key.kernel.data,
        "key.bias": head_or_block.key.bias.data,
        "value.kernel": head_or_block.value.kernel.data,
        "value.bias": head_or_block.value.bias.data,
        "embed.kernel": head_or_block.embed.kernel.data,
        "embed.bias": head_or_block.embed.bias.data,
    }


# -- gradient suites -------------------------------------------------------------

def suite_tensor_gradients() -> list[Check]:
    """Finite-difference checks on every differentiable op, float64."""
    rng = np.random.default_rng(42)

    def leaf(*shape):
        return Node(rng.standard_normal(shape))

    out: list[Check] = []
    cases = []

    a, b = leaf(4, 5), leaf(4, 5)
    cases.append(("add", lambda: T.mean_all(T.add(a, b)), [a, b]))
    c, d = leaf(3, 7), leaf(3, 7)
    cases.append(("mul", lambda: T.mean_all(T.mul(c, d)), [c, d]))
    e = leaf(6, 6)
    cases.append(("scale", lambda: T.mean_all(T.scale(e, -1.7)), [e]))
    f = leaf(5, 5)
    cases.append(("add_scalar", lambda: T.mean_all(T.add_scalar(f, 2.5)), [f]))
    g = leaf(4, 9)
    cases.append(("relu", lambda: T.mean_all(T.relu(g)), [g]))
    m1, m2 = leaf(4, 6), leaf(6, 3)
    cases.append(("matmul", lambda: T.mean_all(T.matmul(m1, m2)), [m1, m2]))
    tr = leaf(3, 8)
    cases.append(("transpose", lambda: T.mean_all(T.mul(T.transpose(tr), T.transpose(tr))), [tr]))
    sm = leaf(5, 7)
    cases.append(("softmax_cols", lambda: T.mean_all(T.mul(T.softmax_cols(sm), T.softmax_cols(sm))), [sm]))
    ak, aq, av = leaf(3, 10), leaf(3, 6), leaf(3, 10)
    cases.append(("attention_core",
                  lambda: T.mean_all(T.attention_core(ak, aq, av)),
                  [ak, aq, av]))
    cx, cw, cb = leaf(3, 6, 6), leaf(4, 3, 3, 3), leaf(4)
    cases.append(("conv2d", lambda: T.mean_all(T.conv2d(cx, cw, cb)), [cx, cw, cb]))
    cases.append(("conv2d_nobias", lambda: T.mean_all(T.conv2d(cx, cw)), [cx, cw]))
    p = leaf(2, 6, 6)
    cases.append(("avg_pool2x2", lambda: T.mean_all(T.avg_pool2x2(p)), [p]))
    u = leaf(2, 3, 3)
    cases.append(("upsample_nearest2x", lambda: T.mean_all(T.mul(
        T.upsample_nearest2x(u), T.upsample_nearest2x(u))), [u]))
    gp = leaf(4, 5, 5)
    cases.append(("global_avg_pool", lambda: T.mean_all(T.global_avg_pool(gp)), [gp]))
    k1, k2 = leaf(2, 4, 4), leaf(3, 4, 4)
    cases.append(("concat_channels", lambda: T.mean_all(T.mul(
        T.concat_channels(k1, k2), T.concat_channels(k1, k2))), [k1, k2]))
    sl = leaf(5, 4, 4)
    cases.append(("slice_channels", lambda: T.mean_all(T.mul(
        T.slice_channels(sl, 1, 4), T.slice_channels(sl, 1, 4))), [sl]))
    bx, bv = leaf(3, 4, 4), leaf(3, 1)
    cases.append(("broadcast_add_channels", lambda: T.mean_all(T.mul(
        T.broadcast_add_channels(bx, bv), T.broadcast_add_channels(bx, bv))), [bx, bv]))
    fl = leaf(3, 4, 5)
    cases.append(("flatten/unflatten", lambda: T.mean_all(T.mul(
        T.unflatten_spatial(T.flatten_spatial(fl), 4, 5), fl)), [fl]))
    s1 = leaf(4, 4)
    cases.append(("sum_all", lambda: T.scale(T.sum_all(T.mul(s1, s1)), 0.1), [s1]))

    for name, objective, wrt in cases:
        worst, _ = T.grad_check(objective, wrt, h=1e-5)
        out.append((f"grad:{name}", worst < 1e-4, f"max rel err {worst:.3e}"))
    return out


def suite_model_gradients(*, input_hw: int = 8, sample_per_tensor: int = 2,
                          seed: int = 1) -> list[Check]:
    """Sampled finite-difference check through the full network and loss."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(backbone_channels=(4, 8), feature_channels=8,
                      reduction=8, **VARIANTS["full"])
    net = SegmentationNetwork(cfg, dtype=np.float64, seed=seed)
    img = rng.random((3, input_hw, input_hw))
    lesion_labels = rng.integers(0, 5, size=(input_hw, input_hw))
    vessel_labels = rng.integers(0, 2, size=(input_hw, input_hw))
    weights = LossWeights()

    # attention key biases shift every softmax column uniformly, so they
    # cancel exactly: checked analytically, excluded from the FD probe
    live = [p for p in net.params() if not p.name.endswith("key.bias")]
    dead = [p for p in net.params() if p.name.endswith("key.bias")]

    def objective():
        lesion, vessel = net.forward(img, training=True)
        return total_loss(lesion, lesion_labels, vessel, vessel_labels,
                          weights)[0]

    t0 = time.time()
    worst, _ = T.grad_check(objective, live,
                            sample_per_tensor=sample_per_tensor,
                            rng=np.random.default_rng(7))
    dt = time.time() - t0
    objective().backward()
    dead_max = max(np.abs(p.grad).max() for p in dead) if dead else 0.0
    return [
        ("grad:model-live", worst < 1e-4,
         f"max rel err {worst:.3e} over {len(live)} tensors ({dt:.1f}s)"),
        ("grad:model-inert-key-bias", dead_max < 1e-10,
         f"max |grad| {dead_max:.3e} over {len(dead)} tensors"),
    ]


# -- attention block oracles -------------------------------------------------------

def suite_block_oracles() -> list[Check]:
    """Vectorized blocks against naive per-position loop references."""
    worst_gcb = worst_rel = 0.0
    for c in (8, 16):
        for hw in (1, 2, 4):
            for seed in range(20):
                rng = np.random.default_rng(1000 * c + 10 * hw + seed)
                f = rng.standard_normal((c, hw, hw))
                gcb = GlobalContextBlock("g", c, reduction=8, dtype=np.float64)
                _randomize(gcb, seed)
                with T.no_grad():
                    got = gcb(Node(f)).data
                want = ref.global_context_naive(f, _weight_dict(gcb))
                worst_gcb = max(worst_gcb, float(np.abs(got - want).max()))

                f_v = rng.standard_normal((c, hw, hw))
                rel = RelationBlock("r", c, heads="both", reduction=8,
                                    dtype=np.float64)
                _randomize(rel, seed + 500)
                with T.no_grad():
                    got = rel(Node(f), Node(f_v)).data
                want = ref.relation_naive(f, f_v, _weight_dict(rel.self_head),
                                          _weight_dict(rel.cross_head))
                worst_rel = max(worst_rel, float(np.abs(got - want).max()))
    return [
        ("oracle:global-context", worst_gcb < 1e-6,
         f"max |diff| {worst_gcb:.3e} over 120 cases"),
        ("oracle:relation", worst_rel < 1e-6,
         f"max |diff| {worst_rel:.3e} over 120 cases"),
    ]


def suite_residual_identities() -> list[Check]:
    """Freshly built blocks are exact identities (zero-init embeds)."""
    rng = np.random.default_rng(3)
    f = rng.standard_normal((16, 4, 4))
    f_v = rng.standard_normal((16, 4, 4))
    gcb = GlobalContextBlock("g", 16, reduction=8, dtype=np.float64)
    with T.no_grad():
        ok_gcb = np.array_equal(gcb(Node(f)).data, f)
    rel = RelationBlock("r", 16, heads="both", reduction=8, dtype=np.float64)
    with T.no_grad():
        out = rel(Node(f), Node(f_v)).data
    ok_rel = np.array_equal(out[:16], f) and np.array_equal(out[16:], f)
    return [
        ("identity:global-context", bool(ok_gcb), "fresh block output == input bitwise"),
        ("identity:relation", bool(ok_rel), "fresh block output == stacked input bitwise"),
    ]


# -- metric oracles ---------------------------------------------------------------

def suite_auc_oracles() -> list[Check]:
    out: list[Check] = []
    # frozen hand fixture: scores (.1,.4,.35,.8), labels (0,0,1,1):
    # concordant pairs 3 of 4 -> AUC_ROC 0.75
    s = np.array([0.1, 0.4, 0.35, 0.8])
    y = np.array([0, 0, 1, 1])
    got = auc_roc(s, y)
    out.append(("auc:hand-fixture", got == 0.75, f"auc_roc {got!r}, want 0.75"))

    rng = np.random.default_rng(9)
    agree = mirror = True
    for trial in range(200):
        n = int(rng.integers(4, 40))
        scores = rng.choice([0.1, 0.25, 0.5, 0.5, 0.9], size=n) \
            if trial % 3 else rng.random(n)
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] ^= 1
        u2, denom = ref.auc_roc_pairs_naive(scores, labels)
        if auc_roc(scores, labels) != ref.auc_from_pairs(u2, denom):
            agree = False
        if auc_roc(scores, labels) + auc_roc(-scores, labels) != 1.0:
            mirror = False
    out.append(("auc:pair-counting", agree,
                "sort-based == naive O(n^2) on 200 fixtures"))
    out.append(("auc:complement", mirror,
                "auc(s) + auc(-s) == 1.0 exactly on 200 fixtures"))

    # PR on a perfect ranking is exactly 1
    got = auc_pr(np.array([0.1, 0.2, 0.8, 0.9]), np.array([0, 0, 1, 1]))
    out.append(("auc:pr-perfect", got == 1.0, f"auc_pr {got!r}, want 1.0"))
    return out


def suite_loss_oracles() -> list[Check]:
    out: list[Check] = []
    zeros = Node(np.zeros((5, 4, 4)))
    got = float(weighted_ce(zeros, np.zeros((4, 4), dtype=np.int64),
                            np.ones(5)).data)
    want = -math.log(0.2)
    out.append(("loss:uniform-logits", abs(got - want) < 1e-6,
                f"CE {got:.12f}, want -ln(0.2) = {want:.12f}"))

    rng = np.random.default_rng(17)
    lesion = Node(rng.standard_normal((5, 6, 6)))
    vessel = Node(rng.standard_normal((2, 6, 6)))
    ll = rng.integers(0, 5, size=(6, 6))
    vl = rng.integers(0, 2, size=(6, 6))
    w0 = LossWeights(lam=0.0)
    total, lesion_term, _ = total_loss(lesion, ll, vessel, vl, w0)
    out.append(("loss:lambda-zero", total is lesion_term,
                "total IS the lesion term when lam == 0"))

    naive = ref.weighted_ce_naive(lesion.data, ll,
                                  np.array(LossWeights().lesion))
    mine = float(weighted_ce(lesion, ll, LossWeights().lesion).data)
    out.append(("loss:naive-agreement", abs(mine - naive) < 1e-12,
                f"|{mine:.15f} - {naive:.15f}| < 1e-12"))
    return out


def suite_clahe_properties() -> list[Check]:
    out: list[Check] = []
    const = np.full((40, 40), 131, dtype=np.uint8)
    fixed = np.array_equal(clahe_channel(const, ClaheParams(2.0, 4)), const)
    out.append(("clahe:constant-fixed-point", fixed,
                "constant channel maps to itself"))

    rng = np.random.default_rng(23)
    img = rng.integers(0, 256, size=(48, 48), dtype=np.uint8)
    got = clahe_channel(img, ClaheParams(clip_limit=1e9, grid=1))
    want = ref.equalize_global_naive(img)
    out.append(("clahe:grid1-is-global", np.array_equal(got, want),
                "grid=1, huge clip == global equalization"))

    hist = np.bincount(img.ravel(), minlength=256)
    c_int = max(1, int(2.0 * img.size / 256))
    clipped = _clip_histogram(hist.copy(), c_int)
    excess = int((np.maximum(hist - c_int, 0)).sum())
    ok = (clipped.sum() == hist.sum()
          and clipped.max() <= c_int + excess // 256 + 1)
    out.append(("clahe:clip-bound", bool(ok),
                f"count preserved, max bin {clipped.max()} <= "
                f"{c_int + excess // 256 + 1}"))
    return out


def suite_optimizer_examples() -> list[Check]:
    out: list[Check] = []
    p = Parameter(np.array([1.0]), "w")
    p.grad = np.array([1.0])
    sgd_step([p], {}, lr=0.1, momentum=0.0, weight_decay=0.0)
    out.append(("sgd:plain", p.data[0] == 0.9, f"p {p.data[0]!r}, want 0.9"))

    q = Parameter(np.array([0.0]), "q")
    vel: dict = {}
    for _ in range(2):
        q.grad = np.array([1.0])
        sgd_step([q], vel, lr=0.1, momentum=0.9, weight_decay=0.0)
    out.append(("sgd:momentum", abs(q.data[0] + 0.29) < 1e-15,
                f"p {q.data[0]!r}, want -0.29"))

    cfg = TrainConfig()
    ok = (lr_at(0, cfg) == 0.001
          and abs(lr_at(120, cfg) - 0.0001) < 1e-12
          and abs(lr_at(240, cfg) - 0.00001) < 1e-12)
    out.append(("sgd:lr-schedule", ok, "0.001 / 0.0001 / 0.00001 at 0/120/240"))
    return out


def suite_checkpoint_roundtrip() -> list[Check]:
    rng = np.random.default_rng(31)
    ck = Checkpoint(
        config={"model": {"feature_channels": 8}},
        epoch=2,
        params={"a.kernel": rng.standard_normal((3, 3)).astype(np.float32)},
        momentum={"a.kernel": rng.standard_normal((3, 3)).astype(np.float32)},
        state={"n.mean": rng.standard_normal(3).astype(np.float32)})
    with tempfile.TemporaryDirectory() as tmp:
        p1, p2 = os.path.join(tmp, "a.ckpt"), os.path.join(tmp, "b.ckpt")
        ck.save(p1)
        Checkpoint.load(p1).save(p2)
        same = open(p1, "rb").read() == open(p2, "rb").read()
    return [("checkpoint:byte-identical", same, "save -> load -> save")]


ALL_SUITES = (
    ("tensor-gradients", suite_tensor_gradients),
    ("model-gradients", suite_model_gradients),
    ("block-oracles", suite_block_oracles),
    ("residual-identities", suite_residual_identities),
    ("auc-oracles", suite_auc_oracles),
    ("loss-oracles", suite_loss_oracles),
    ("clahe-properties", suite_clahe_properties),
    ("optimizer-examples", suite_optimizer_examples),
    ("checkpoint-roundtrip", suite_checkpoint_roundtrip),
)


def run_suites(suites=ALL_SUITES, emit=print) -> bool:
    """Run the given suites, print one PASS/FAIL line per check, and a
    summary line; returns True iff everything passed."""
    failed = 0
    total = 0
    for suite_name, fn in suites:
        for name, ok, detail in fn():
            total += 1
            failed += not ok
            emit(f"[{'PASS' if ok else 'FAIL'}] {suite_name}/{name}: {detail}")
    emit(f"{total - failed}/{total} checks passed")
    return failed == 0
