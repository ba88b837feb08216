"""Acceptance criteria 1-10. Each test records a PASS/FAIL line in the terminal summary."""
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, numeric_grad, rel_error
from sqlgrade.cli import main
from sqlgrade.data import generate_synthetic, kfold_split, loo_split, to_example
from sqlgrade.layers import BatchNorm, ConvEncoder, Dense, DotProductAttention, Dropout, Embedding, GlobalAvgPool
from sqlgrade.metrics import balanced_accuracy, confusion, precision_recall, roc_auc
from sqlgrade.model import ModelConfig, build, load_checkpoint, save_checkpoint
from sqlgrade.tensor import SeededRng
from sqlgrade.tokenizer import build_vocab, lex
from sqlgrade.training import RMSprop, TrainConfig, bce_loss, cce_loss, cross_validate, fit_vocab, mse_loss, train
from test_layers import check_layer
from test_metrics import concordance
from test_model import PARAM_COUNT_V1000, random_ids

# first passing epoch under the fixed seeds below, checked every 5 epochs
OVERFIT_EPOCH_BOUND = 155


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    assert ok, detail


# -- 1 -------------------------------------------------------------------------


def _layer_errors(seed):
    rng = SeededRng(seed)
    errs = {}

    emb = Embedding(4, 3, rng)
    ids = np.array([[1, 2, 1, 0]])

    def emb_bwd(R):
        emb.zero_grad()
        emb.backward(R)
        return {}, emb.grads

    errs["embedding"] = check_layer(lambda: emb.forward(ids), emb_bwd, {}, {"table": emb.params["table"]}, rng)

    conv = ConvEncoder(3, 4, 3, rng)
    conv.params["bias"] = rng.normal(4, 0.1)
    x = rng.normal((2, 5, 3))

    def conv_bwd(R):
        conv.zero_grad()
        return {"x": conv.backward(R)}, conv.grads

    errs["conv"] = check_layer(lambda: conv.forward(x), conv_bwd, {"x": x}, dict(conv.params), rng)

    for scaled in (False, True):
        att = DotProductAttention(scaled=scaled)
        q, v = rng.normal((2, 5, 4)), rng.normal((2, 5, 4))
        errs[f"attention(scaled={scaled})"] = check_layer(
            lambda: att.forward(q, v), lambda R: (dict(zip("qv", att.backward(R))), {}), {"q": q, "v": v}, {}, rng
        )

    pool = GlobalAvgPool()
    xp = rng.normal((2, 6, 3))
    errs["pool"] = check_layer(lambda: pool.forward(xp), lambda R: ({"x": pool.backward(R)}, {}), {"x": xp}, {}, rng)

    drop = Dropout(0.25)
    xd = rng.normal((4, 6))
    errs["dropout"] = check_layer(lambda: drop.forward(xd, True, SeededRng(seed + 100)), lambda R: ({"x": drop.backward(R)}, {}), {"x": xd}, {}, rng)

    for training in (True, False):
        bn = BatchNorm(3)
        bn.params["gamma"] = rng.normal(3) + 1.5
        bn.params["beta"] = rng.normal(3)
        bn.state["running_var"] = rng.random(3) + 0.5
        xb = rng.normal((5, 3)) * 2

        def bn_bwd(R, bn=bn):
            bn.zero_grad()
            return {"x": bn.backward(R)}, bn.grads

        errs[f"batchnorm(training={training})"] = check_layer(lambda bn=bn, xb=xb, t=training: bn.forward(xb, t), bn_bwd, {"x": xb}, dict(bn.params), rng)

    for act in ("tanh", "sigmoid", "softmax", "linear"):
        d = Dense(4, 3, act, rng)
        d.params["bias"] = rng.normal(3, 0.1)
        xx = rng.normal((5, 4))

        def d_bwd(R, d=d):
            d.zero_grad()
            return {"x": d.backward(R)}, d.grads

        errs[f"dense({act})"] = check_layer(lambda d=d, xx=xx: d.forward(xx), d_bwd, {"x": xx}, dict(d.params), rng)
    return errs


def _loss_errors(seed):
    rng = SeededRng(seed)
    errs = {}
    pred = rng.uniform(0.05, 0.95, (3, 6))
    target = (rng.random((3, 6)) > 0.5) * 1.0
    errs["bce"] = rel_error(bce_loss(pred, target)[1], numeric_grad(lambda: bce_loss(pred, target)[0], pred, h=1e-6))

    probs = rng.uniform(0.1, 1.0, (4, 4))
    probs /= probs.sum(axis=1, keepdims=True)
    one_hot = np.eye(4)[rng.integers(0, 4, 4)]
    analytic = cce_loss(probs, one_hot)[1]
    # perturb only target entries so the row-sum guard never trips
    num = np.zeros_like(probs)
    for i, j in zip(*np.nonzero(one_hot)):
        q = probs.copy()
        q[i, j] += 1e-6
        hi = -(one_hot * np.log(q)).sum() / 4
        q[i, j] -= 2e-6
        lo = -(one_hot * np.log(q)).sum() / 4
        num[i, j] = (hi - lo) / 2e-6
    errs["cce"] = rel_error(analytic, num)

    yhat, y = rng.random((5, 1)), rng.random((5, 1))
    errs["mse"] = rel_error(mse_loss(yhat, y)[1], numeric_grad(lambda: mse_loss(yhat, y)[0], yhat, h=1e-6))
    return errs


def test_1_gradient_integrity():
    t0 = time.perf_counter()
    layer_worst, loss_worst = {}, {}
    for seed in range(10):
        for k, v in _layer_errors(seed).items():
            layer_worst[k] = max(layer_worst.get(k, 0.0), v)
        for k, v in _loss_errors(seed).items():
            loss_worst[k] = max(loss_worst.get(k, 0.0), v)
    elapsed = time.perf_counter() - t0
    lw, sw = max(layer_worst.values()), max(loss_worst.values())
    ok = lw < 1e-4 and sw < 1e-6 and elapsed < 60
    record("1 gradient integrity", ok, f"10 seeds, worst layer rel err {lw:.2e} (<1e-4), worst loss rel err {sw:.2e} (<1e-6), {elapsed:.1f}s")


# -- 2 -------------------------------------------------------------------------


def test_2_auc_oracle_equivalence():
    t0 = time.perf_counter()
    rng = SeededRng(2024)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[rng.integers(0, n)] = 1
        labels[(np.nonzero(labels)[0][0] + 1) % n] = 0
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        worst = max(worst, abs(roc_auc(scores, labels).auc - concordance(scores, labels)))
    elapsed = time.perf_counter() - t0
    record("2 AUC oracle equivalence", worst <= 1e-12 and elapsed < 10, f"1000 instances n<=50, max |diff| {worst:.1e} (<=1e-12), {elapsed:.1f}s")


# -- 3 -------------------------------------------------------------------------


def test_3_architecture_shape_contract():
    net = build(ModelConfig(vocab_size=1000), SeededRng(0))
    ids = random_ids(SeededRng(3), 8, vocab_size=1000, max_len=172)
    z = net.forward_trunk(ids)
    out = net.forward_joint(ids)
    sums = [abs(sum(p.remark_probs) - 1.0) for p in net.predict_batch(ids)]
    checks = {
        "trunk [B,2]": z.shape == (8, 2),
        "trunk in (-1,1)": bool(np.all(np.abs(z) < 1)),
        "joint [B,6]": out.shape == (8, 6),
        "joint in (0,1)": bool(np.all((out > 0) & (out < 1))),
        "remark sum": max(sums) <= 1e-9,
        "param count": net.parameter_count() == PARAM_COUNT_V1000,
    }
    failed = [k for k, v in checks.items() if not v]
    record("3 architecture shape contract", not failed, f"params {net.parameter_count()} (frozen {PARAM_COUNT_V1000}), max |sum-1| {max(sums):.1e}" + (f", failed {failed}" if failed else ""))


# -- 4 -------------------------------------------------------------------------


def _outputs(net, ids):
    preds = net.predict_batch(ids)
    return {
        "C": np.array([p.p_correct for p in preds]),
        "R": np.array([p.remark_probs for p in preds]),
        "G": np.array([p.grade_hat for p in preds]),
    }


def test_4_parameter_sharing_contract():
    net = build(ModelConfig(vocab_size=40), SeededRng(4))
    ids = random_ids(SeededRng(5), 6, vocab_size=40)
    # make running statistics non-trivial so head batchnorms are not near-identity
    net.forward_trunk(ids, training=True, rng=SeededRng(1))
    base = _outputs(net, ids)
    rng = SeededRng(6)
    violations = []
    params = net.parameters()
    for name, theta in params.items():
        if name == "embedding.table":
            ix = (int(ids[0, 0]), int(rng.integers(0, theta.shape[1])))
        else:
            ix = np.unravel_index(int(rng.integers(0, theta.size)), theta.shape)
        old = theta[ix]
        theta[ix] = old + 0.5
        moved = {h: float(np.max(np.abs(_outputs(net, ids)[h] - base[h]))) for h in "CRG"}
        theta[ix] = old
        owner = {"head_c": "C", "head_r": "R", "head_g": "G"}.get(name.split(".")[0])
        for h, delta in moved.items():
            expect_change = owner is None or owner == h
            if expect_change != (delta > 1e-12):
                violations.append(f"{name}{ix} -> {h} moved {delta:.1e}")
    record("4 parameter sharing contract", not violations, f"{len(params)} parameter tensors perturbed, {len(violations)} violations" + (f": {violations[:3]}" if violations else ""))


# -- 5 -------------------------------------------------------------------------


@pytest.mark.slow
def test_5_overfit_sanity(synthetic_200):
    vocab = fit_vocab(synthetic_200)
    examples = [to_example(r, vocab) for r in synthetic_200]
    x = np.stack([e.x for e in examples])
    y_correct = np.array([e.y_correct for e in examples])
    y_remark = np.stack([e.y_remark for e in examples])
    rng = SeededRng(7)
    net = build(ModelConfig(vocab_size=len(vocab), seed=7), rng.child(0))
    hit = {}

    def on_epoch(epoch, _):
        if (epoch + 1) % 5:
            return False
        preds = net.predict_batch(x)
        auc = roc_auc([p.p_correct for p in preds], y_correct).auc
        probs = np.array([p.remark_probs for p in preds])
        macro_ap = float(np.mean([precision_recall(probs[:, k], y_remark[:, k]).average_precision for k in range(4)]))
        hit.update(epoch=epoch + 1, auc=auc, ap=macro_ap)
        return auc >= 0.95 and macro_ap >= 0.90

    t0 = time.perf_counter()
    train(net, examples, TrainConfig(epochs=300, batch_size=32, learning_rate=0.001), rng.child(1), on_epoch=on_epoch)
    elapsed = time.perf_counter() - t0
    ok = hit["auc"] >= 0.95 and hit["ap"] >= 0.90 and hit["epoch"] <= OVERFIT_EPOCH_BOUND and elapsed < 300
    record(
        "5 overfit sanity",
        ok,
        f"epoch {hit['epoch']} (bound {OVERFIT_EPOCH_BOUND}): train AUC {hit['auc']:.4f} (>=0.95), remark macro-AP {hit['ap']:.4f} (>=0.90), {elapsed:.0f}s (<300s)",
    )


# -- 6 -------------------------------------------------------------------------


def _partition_ok(plan, n):
    vals = [set(v) for _, v in plan.folds]
    return set().union(*vals) == set(range(n)) and sum(map(len, vals)) == n and all(
        not set(t) & set(v) and set(t) | set(v) == set(range(n)) for t, v in plan.folds
    )


def test_6_cross_validation_laws():
    grid = [(n, k) for n in (2, 3, 7, 10, 11, 50, 97, 200) for k in (2, 3, 5, 10) if k <= n]
    partitions = all(_partition_ok(kfold_split(n, k, seed=s), n) for n, k in grid for s in range(3))
    loo = all(len(loo_split(n)) == n and _partition_ok(loo_split(n), n) for n in (2, 5, 31))

    records = generate_synthetic(24, seed=6)
    plan = kfold_split(24, 4, seed=6)
    small = ModelConfig(vocab_size=2, embed_dim=8, conv_filters=6)
    tcfg = TrainConfig(epochs=2, batch_size=8)

    def signature(res):
        return [(f.fold, f.history.final_checksum, [(p.p_correct, p.remark_probs, p.grade_hat, p.bottleneck_xy) for p in f.predictions]) for f in res.folds]

    base = cross_validate(records, plan, small, tcfg, seed=6)
    oof = base.out_of_fold()
    coverage = len(oof) == 24 and all(i in plan.folds[f][1] for i, (f, _) in enumerate(oof))
    variants = [
        cross_validate(records, plan, small, tcfg, seed=6, fold_order=[3, 1, 0, 2]),
        cross_validate(records, plan, small, tcfg, seed=6, jobs=2),
        cross_validate(records, plan, small, tcfg, seed=6, jobs=3, fold_order=[2, 3, 0, 1]),
    ]
    identical = all(signature(v) == signature(base) for v in variants)
    ok = partitions and loo and coverage and identical
    record("6 cross-validation laws", ok, f"partition {partitions} over {len(grid)}x3 plans, LOO {loo}, OOF coverage {coverage}, bit-identical under order/jobs {identical}")


# -- 7 -------------------------------------------------------------------------


def test_7_metric_closed_forms():
    ba = balanced_accuracy(confusion([1, 1, 0, 1], [1, 1, 0, 0], (0, 1)))
    ap = precision_recall([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]).average_precision
    bce = bce_loss(np.array([[0.5]]), np.array([[1.0]]))[0]
    cce = cce_loss(np.full((1, 4), 0.25), np.eye(4)[[2]])[0]
    diffs = {"BA": abs(ba - 0.75), "AP": abs(ap - 0.25), "BCE": abs(bce - math.log(2)), "CCE": abs(cce - math.log(4))}
    record("7 metric closed forms", max(diffs.values()) <= 1e-9, ", ".join(f"{k} err {v:.1e}" for k, v in diffs.items()) + " (<=1e-9)")


# -- 8 -------------------------------------------------------------------------


def test_8_checkpoint_round_trip(tmp_path):
    corpus = [lex(r.submitted_answer) for r in generate_synthetic(40, seed=8)]
    vocab = build_vocab(corpus)
    config = ModelConfig(vocab_size=len(vocab), seed=8)
    net = build(config, SeededRng(8))
    ids = random_ids(SeededRng(9), 100, vocab_size=len(vocab), max_len=120)
    net.forward_trunk(ids[:16], training=True, rng=SeededRng(1))
    before = net.predict_batch(ids)
    path = tmp_path / "rt.grader.json"
    save_checkpoint(net, config, vocab, path)
    net2, config2, vocab2 = load_checkpoint(path)
    after = net2.predict_batch(ids)
    same = sum(a == b for a, b in zip(before, after))
    record("8 checkpoint round trip", same == 100 and config2 == config and vocab2 == vocab, f"{same}/100 predictions bitwise identical after reload")


# -- 9 -------------------------------------------------------------------------


def test_9_end_to_end_determinism(tmp_path):
    data = tmp_path / "d.csv"
    assert main(["gen", "--n", "40", "--seed", "9", "--out", str(data)]) == 0
    out = {}
    for run in ("a", "b"):
        assert main(["train", "--data", str(data), "--epochs", "2", "--seed", "9", "--out", str(tmp_path / f"m{run}.json")]) == 0
        jobs = "1" if run == "a" else "2"
        assert main(["xval", "--data", str(data), "--epochs", "1", "--k", "4", "--seed", "9", "--jobs", jobs, "--out", str(tmp_path / f"x{run}.json")]) == 0
        out[run] = ((tmp_path / f"m{run}.json").read_bytes(), (tmp_path / f"x{run}.json").read_bytes())
    ckpt = out["a"][0] == out["b"][0]
    metrics = out["a"][1] == out["b"][1]
    record("9 end-to-end determinism", ckpt and metrics, f"checkpoint bytes identical {ckpt}, xval metrics JSON identical {metrics} (jobs 1 vs 2)")


# -- 10 ------------------------------------------------------------------------


def test_10_rmsprop_single_step():
    params = {"theta": np.array([1.0])}
    RMSprop(learning_rate=0.001, rho=0.9, epsilon=1e-8).step(params, {"theta": np.array([1.0])})
    err = abs(params["theta"][0] - 0.9968377)
    # the quoted value is rounded to 7 places; compare the exact update at 1e-9 as well
    exact = abs(params["theta"][0] - (1 - 0.001 / (math.sqrt(0.1) + 1e-8)))
    record("10 RMSprop single step", exact <= 1e-9 and err <= 5e-8, f"theta {params['theta'][0]:.10f}, |diff| vs exact {exact:.1e} (<=1e-9), vs 0.9968377 {err:.1e}")
