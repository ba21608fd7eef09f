"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line through the ``acceptance`` fixture; the
lines are printed together in the terminal summary.
"""

import itertools
import time

import numpy as np
import pytest

from hycedis.baselines import (
    KvHead,
    McDropout,
    SoftmaxClassifier,
    SoftmaxThreshold,
    TemperatureScaling,
    fit_temperature,
    pooled_softmax_features,
)
from hycedis.cli import main
from hycedis.confidence import ModelConfig, predict_confidence, train_hycedis
from hycedis.corpus import SPLITS, CorpusConfig, generate_corpus
from hycedis.fusion import EncodedFeatures, Fusion
from hycedis.ie_schema import GROUND_TRUTH, BBox, IeField, label_predictions
from hycedis.metrics import ece, roc_auc
from hycedis.nn_core import LSTM, MLP, Dense, binary_softmax_bce, bce_grad, bce_loss, grad_check
from hycedis.vcad import VAE, VcadModel
from oracles import auc_pairs, auc_pairs_matrix, brute_force_labels, ece_loop

SEEDS = range(5)
ARMS = [(f, v) for f in ("concat", "bilinear") for v in (False, True)]


def train_features(split):
    X = np.stack([d.doc_feature for d in split.documents])
    C = np.array([d.category for d in split.documents])
    return X, C


# criterion 1 ---------------------------------------------------------------


def _dense_case(rng):
    layer = Dense(5, 1, "sigmoid", rng=rng)
    layer.params["b"][:] = rng.normal(size=1)
    x, y = rng.normal(size=(8, 5)), rng.integers(0, 2, 8).astype(float)

    def loss_fn():
        p, cache = layer.forward(x)
        _, g = layer.backward(bce_grad(p[:, 0], y)[:, None] / len(y), cache)
        return float(np.mean(bce_loss(p[:, 0], y))), g

    return loss_fn, layer.params


def _lstm_case(rng):
    lstm = LSTM(3, 4, rng)
    x, target = rng.normal(size=(3, 5, 3)), rng.normal(size=(3, 4))
    lengths = np.array([5, 2, 4])

    def loss_fn():
        h, cache = lstm.forward(x, lengths)
        _, g = lstm.backward(h - target, cache)
        return 0.5 * float(np.sum((h - target) ** 2)), g

    return loss_fn, lstm.params


def _fusion_case(rng, method):
    f = Fusion(method, 3, 4, 2, proj_dim=5, rng=rng)
    inputs = {"vis": rng.normal(size=(3, 3)), "ocr": rng.normal(size=(3, 4)), "node": rng.normal(size=(3, 2))}
    target = rng.normal(size=(3, f.out_dim))

    def loss_fn():
        y, cache = f.forward(EncodedFeatures(inputs["vis"], inputs["ocr"], inputs["node"]))
        de, g = f.backward(y - target, cache)
        return 0.5 * float(np.sum((y - target) ** 2)), dict(g, vis=de.e_vis, ocr=de.e_ocr, node=de.e_node)

    return loss_fn, {**f.named_parameters(), **inputs}


def _ce_head_case(rng):
    head = MLP([6, 5, 2], ["relu", "identity"], rng)
    for layer in head.layers:
        layer.params["b"][:] = rng.normal(scale=0.5, size=layer.out_dim)
    x, y = rng.normal(size=(7, 6)), rng.integers(0, 2, 7).astype(float)
    params = {**head.named_parameters(), "x": x}

    def loss_fn():
        logits, cache = head.forward(params["x"])
        loss, d, _ = binary_softmax_bce(logits, y)
        dx, g = head.backward(d, cache)
        return loss, dict(g, x=dx)

    return loss_fn, params


def _vae_case(rng):
    vae = VAE(4, 5, 2, rng)
    x, noise = rng.normal(size=(3, 4)), rng.normal(size=(2, 3, 2))

    def loss_fn():
        (total, _, _), g = vae.loss(x, noise)
        return total, g

    return loss_fn, vae.named_parameters()


def test_criterion_1_gradient_fidelity(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    cases = {
        "dense": _dense_case(rng),
        "lstm": _lstm_case(rng),
        "fusion-concat": _fusion_case(rng, "concat"),
        "fusion-bilinear": _fusion_case(rng, "bilinear"),
        "ce-head": _ce_head_case(rng),
        "vae": _vae_case(rng),
    }
    errors = {name: grad_check(fn, params) for name, (fn, params) in cases.items()}
    elapsed = time.perf_counter() - start
    ok = max(errors.values()) <= 1e-4 and elapsed < 30
    worst = max(errors, key=errors.get)
    assert acceptance(1, "gradient fidelity", ok,
                      f"worst {worst} {errors[worst]:.2e} <= 1e-4, {elapsed:.1f}s < 30s"), errors


# criterion 2 ---------------------------------------------------------------


def _tie_patterns(n):
    """Sorted score vectors for every way of grouping n positions into ties."""
    for cuts in itertools.product((0, 1), repeat=n - 1):
        level, out = 0, [0.0]
        for c in cuts:
            level += c
            out.append(float(level))
        yield out


def test_criterion_2_metric_oracles(acceptance):
    # both metrics are invariant under reordering the samples, and AUC only sees
    # the order of scores, so these enumerations cover every input up to that
    start = time.perf_counter()
    worst_auc = worst_ece = 0.0
    checked = 0
    ece_grid = [0.0, 0.3, 1.0]  # both ends and an interior bin edge
    for n in range(1, 9):
        for labels in itertools.product((0, 1), repeat=n):
            if 0 < sum(labels) < n:
                for scores in _tie_patterns(n):
                    worst_auc = max(worst_auc, abs(roc_auc(scores, labels) - auc_pairs(scores, labels)))
                    checked += 1
            for scores in itertools.combinations_with_replacement(ece_grid, n):
                worst_ece = max(worst_ece, abs(ece(scores, labels) - ece_loop(scores, labels)))
                checked += 1
    rng = np.random.default_rng(7)
    for i in range(1000):
        n = int(rng.integers(2, 257))
        scores = rng.random(n)
        if i % 2:
            scores = np.round(scores, 1)
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        worst_auc = max(worst_auc, abs(roc_auc(scores, labels) - auc_pairs_matrix(scores, labels)))
        worst_ece = max(worst_ece, abs(ece(scores, labels) - ece_loop(scores.tolist(), labels.tolist())))
        checked += 1
    elapsed = time.perf_counter() - start
    ok = worst_auc <= 1e-12 and worst_ece <= 1e-12 and elapsed < 10
    assert acceptance(2, "metric oracles", ok,
                      f"{checked} cases, max AUC err {worst_auc:.1e}, max ECE err {worst_ece:.1e}, "
                      f"{elapsed:.1f}s < 10s")


# criterion 3 ---------------------------------------------------------------


def _random_document(rng):
    texts, keys = ["total", "date", "acme co"], ["k1", "k2"]

    def box():
        x, y = int(rng.integers(0, 40)), int(rng.integers(0, 40))
        return BBox(x, y, x + int(rng.integers(2, 25)), y + int(rng.integers(2, 25)))

    gts = [IeField(box(), str(rng.choice(texts)), str(rng.choice(keys)), GROUND_TRUTH)
           for _ in range(int(rng.integers(1, 7)))]
    preds = [IeField(box(), str(rng.choice(texts)), str(rng.choice(keys))) for _ in range(int(rng.integers(1, 9)))]
    # a prediction covering 3/10 of a ground-truth box has IoU exactly 0.3
    anchor = gts[0]
    k = int(rng.integers(1, 4))
    x, y = int(rng.integers(0, 40)), int(rng.integers(0, 40))
    boundary_gt = IeField(BBox(x, y, x + 10 * k, y + 10), anchor.text, anchor.key, GROUND_TRUTH)
    boundary_pred = IeField(BBox(x, y, x + 3 * k, y + 10), anchor.text, anchor.key)
    return preds + [boundary_pred], gts + [boundary_gt]


def test_criterion_3_labeling_oracle(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    mismatches = boundary_ones = positives = 0
    for _ in range(500):
        preds, gts = _random_document(rng)
        got = label_predictions(preds, gts)
        mismatches += got != brute_force_labels(preds, gts)
        # the boundary prediction may still match some other ground-truth box,
        # so only count it when the boundary box is its only candidate
        others = [g for g in gts[:-1] if (g.key, g.text) == (preds[-1].key, preds[-1].text)]
        if not others:
            boundary_ones += got[-1]
        positives += sum(got)
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and boundary_ones == 0 and elapsed < 5
    assert acceptance(3, "labeling oracle", ok,
                      f"500 documents, {mismatches} mismatches, {boundary_ones} boundary fields labeled 1, "
                      f"{positives} positives, {elapsed:.2f}s < 5s")


# criterion 4 ---------------------------------------------------------------


def test_criterion_4_vcad_separation(acceptance):
    start = time.perf_counter()
    splits = generate_corpus(CorpusConfig(seed=42))
    X, C = train_features(splits["train"])
    vcad = VcadModel(X.shape[1])
    vcad.fit(X, C, seed=0)
    te = vcad.score(np.stack([d.doc_feature for d in splits["test"].documents]))
    ood = vcad.score(np.stack([d.doc_feature for d in splits["ood"].documents]))
    auc = roc_auc(np.r_[te, ood], np.r_[np.zeros(len(te)), np.ones(len(ood))])
    before = vcad.digest()
    train_hycedis(splits["train"], splits["val"], vcad, ModelConfig(epochs=3))
    frozen = vcad.digest() == before
    elapsed = time.perf_counter() - start
    ok = auc >= 0.9 and frozen and elapsed < 120
    assert acceptance(4, "VCAD separation", ok,
                      f"test-vs-OOD AUC {auc:.4f} >= 0.9, params unchanged by training: {frozen}, "
                      f"{elapsed:.1f}s < 120s")


# criteria 5 and 6 ----------------------------------------------------------


@pytest.fixture(scope="module")
def table_runs():
    """Four HYCEDIS arms and the four baselines on the default test split, five seeds."""
    start = time.perf_counter()
    splits = generate_corpus(CorpusConfig())
    tr, va, te, ood = splits["train"], splits["val"], splits["test"], splits["ood"]
    ood = ood.restrict_keys(ood.shared_keys)
    X, C = train_features(tr)
    vcad = VcadModel(X.shape[1])
    vcad.fit(X, C, seed=0)
    digest = vcad.digest()
    y = te.labels
    results = {}

    def add(name, scores, ood_scores=None):
        row = results.setdefault(name, {"auc": [], "ece": [], "ood_auc": []})
        row["auc"].append(roc_auc(scores, y))
        row["ece"].append(ece(scores, y))
        if ood_scores is not None:
            row["ood_auc"].append(roc_auc(ood_scores, ood.labels))

    for seed in SEEDS:
        for fusion, use_vcad in ARMS:
            cfg = ModelConfig(fusion=fusion, use_vcad=use_vcad, seed=seed)
            model, _ = train_hycedis(tr, va, vcad if use_vcad else None, cfg)
            scores = [o.p_correct for o in predict_confidence(model, vcad, te.records, tr.alphabet)]
            ood_scores = [o.p_correct for o in predict_confidence(model, vcad, ood.records, tr.alphabet)]
            add(f"{fusion}+vcad" if use_vcad else fusion, scores, ood_scores)
        add("softmax-threshold", SoftmaxThreshold().fit(tr.records).score(te.records))
        add("temp-scaling", TemperatureScaling().fit(va).score(te.records))
        clf = SoftmaxClassifier(len(pooled_softmax_features(tr.records[0])), seed=seed)
        clf.fit(tr.records, seed=seed)
        add("softmax-classifier", clf.score(te.records))
        head = KvHead(len(tr.keys), seed=seed).fit(tr, seed=seed)
        add("mc-dropout", McDropout(head, tr.keys, seed=seed).score(te.records))
    means = {k: {m: float(np.mean(v)) if v else None for m, v in row.items()} for k, row in results.items()}
    return means, time.perf_counter() - start, vcad.digest() == digest


def test_criterion_5_fusion_and_vcad_ordering(acceptance, table_runs):
    means, elapsed, frozen = table_runs
    auc = {k: v["auc"] for k, v in means.items()}
    checks = {
        "bilinear >= concat": auc["bilinear"] >= auc["concat"],
        "concat+vcad >= concat": auc["concat+vcad"] >= auc["concat"],
        "bilinear+vcad >= bilinear": auc["bilinear+vcad"] >= auc["bilinear"],
        "hycedis - concat >= 1pt": auc["bilinear+vcad"] - auc["concat"] >= 0.01,
    }
    ok = all(checks.values()) and elapsed < 25 * 60 and frozen
    detail = ", ".join(f"{k} {100 * auc[k]:.2f}" for k in ("concat", "concat+vcad", "bilinear", "bilinear+vcad"))
    failed = [k for k, v in checks.items() if not v]
    assert acceptance(5, "fusion/VCAD ordering", ok,
                      f"mean AUC {detail}; failed {failed or 'none'}; {elapsed / 60:.1f} min < 25 min"), checks


def test_criterion_6_baseline_ordering(acceptance, table_runs):
    means, _, _ = table_runs
    six = {"hycedis": means["bilinear+vcad"], "mcp": means["bilinear"]}
    six.update({k: means[k] for k in ("softmax-threshold", "temp-scaling", "softmax-classifier", "mc-dropout")})
    margin = six["hycedis"]["auc"] - six["softmax-threshold"]["auc"]
    best_ece = min(six, key=lambda k: six[k]["ece"])
    ok = margin >= 0.02 and best_ece == "hycedis"
    table = ", ".join(f"{k} {100 * v['auc']:.2f}/{v['ece']:.4f}" for k, v in six.items())
    assert acceptance(6, "baseline ordering", ok,
                      f"AUC margin over softmax-threshold {100 * margin:.2f} pts >= 2, lowest ECE {best_ece}; "
                      f"AUC/ECE {table}")


def test_vcad_helps_on_ood_split(table_runs):
    # the default model, averaged over the same five seeds, scored on the
    # shared-key OOD fields
    means, _, _ = table_runs
    assert means["bilinear+vcad"]["ood_auc"] >= means["bilinear"]["ood_auc"]


# criterion 7 ---------------------------------------------------------------


def test_criterion_7_temperature_recovery(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    z = rng.normal(size=(20000, 4)) * 2.0
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    y = (rng.random(len(p))[:, None] > np.cumsum(p, axis=1)).sum(axis=1)
    hot = 3.0 * z
    t = fit_temperature(hot, y).t

    def top(logits):
        q = np.exp(logits - logits.max(axis=1, keepdims=True))
        q /= q.sum(axis=1, keepdims=True)
        return q.max(axis=1), (q.argmax(axis=1) == y).astype(int)

    before, after = ece(*top(hot)), ece(*top(hot / t))
    same_argmax = bool(np.array_equal((hot / t).argmax(axis=1), hot.argmax(axis=1)))
    elapsed = time.perf_counter() - start
    ok = 2.7 <= t <= 3.3 and after < before and same_argmax and elapsed < 10
    assert acceptance(7, "temperature recovery", ok,
                      f"T {t:.4f} in [2.7, 3.3], ECE {before:.4f} -> {after:.4f}, argmax unchanged: {same_argmax}, "
                      f"{elapsed:.2f}s < 10s")


# criterion 8 ---------------------------------------------------------------

PIPELINE_SETTINGS = ["corpus.n_train=80", "corpus.n_val=15", "corpus.n_test=20", "corpus.n_ood=10",
                     "model.epochs=3", "vcad.embed_epochs=20", "vcad.vae_epochs=20", "eval.baseline_epochs=5",
                     "eval.mc_passes=5"]


def _pipeline(root):
    sets = [a for s in PIPELINE_SETTINGS for a in ("--set", s)]
    data, ckpt = root / "data", root / "ckpt"
    codes = [
        main(["generate", "--out", str(data), "--seed", "42"] + sets),
        main(["train", "--data", str(data), "--out", str(ckpt / "hycedis.ckpt"), "--seed", "1"] + sets),
        main(["train", "--data", str(data), "--out", str(ckpt / "mcp.ckpt"), "--seed", "1", "--no-vcad"] + sets),
        main(["eval", "--data", str(data), "--checkpoint", str(ckpt / "hycedis.ckpt"), "--checkpoint",
              str(ckpt / "mcp.ckpt"), "--out", str(root / "reports"), "--seed", "1"] + sets),
    ]
    files = [data / f"{s}.jsonl" for s in SPLITS] + [ckpt / "hycedis.ckpt", ckpt / "mcp.ckpt"]
    files += [root / "reports" / "report-test.json", root / "reports" / "reliability-test.csv"]
    return codes, {f.relative_to(root): f.read_bytes() for f in files}


def test_criterion_8_reproducible_pipeline(acceptance, tmp_path):
    codes_a, a = _pipeline(tmp_path / "a")
    codes_b, b = _pipeline(tmp_path / "b")
    differing = [str(k) for k in a if a[k] != b[k]]
    ok = codes_a == codes_b == [0, 0, 0, 0] and not differing
    assert acceptance(8, "reproducibility", ok,
                      f"{len(a)} artifacts compared, exit codes {codes_a}, differing {differing or 'none'}")
