"""Self-checks: gradient fidelity, closed-form values and brute-force oracles.

Every check returns a :class:`CheckResult`. The fast suites run in a few
seconds; the end-to-end and reproducibility suites train full models.
"""

from __future__ import annotations

import itertools
import json
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import functional as F
from . import objectives as O
from .encoders import DualEncoder, EncoderConfig, encode_images, encode_reports
from .evaluation import auc, metrics_from_scores
from .knowledge import (build_dictionary, kmeans, load_dictionary, retrieve, save_dictionary,
                        tfidf_fit, tfidf_vector)
from .tensor import Tape, Tensor, grad_check

__all__ = [
    "CheckResult",
    "check_gradients",
    "check_analytic_values",
    "check_masking",
    "check_tfidf",
    "check_clustering",
    "check_metrics",
    "check_end_to_end",
    "check_reproducibility",
    "FAST_SUITES",
    "run_suites",
]

GRAD_TOL = 1e-4
E2E_BARS = {"macro_auc": 0.85, "pointing": 0.7, "report_polarity": 0.8}
E2E_MAX_SECONDS = 600.0
E2E_MAX_EPOCHS = 10


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    start = time.perf_counter()
    ok, detail = fn()
    return CheckResult(name, bool(ok), detail, time.perf_counter() - start)


# --- random instances shared by the gradient and masking suites ---------------

N, D, S, P = 4, 8, 3, 4
MASK = np.array([[1, 1, 1], [1, 1, 0], [1, 1, 1], [1, 1, 1]], dtype=bool)  # one padded slot
LABELS = np.array([[1, 0, -1], [0, 1, 1], [1, -1, 0], [0, 0, 1]], dtype=np.float64)
TEMPS = O.TemperatureParams()


def _instance(seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    c = LABELS.shape[1]
    return {
        "V": rng.normal(size=(N, D)),
        "T": rng.normal(size=(N, D)),
        "temp": np.array(0.5),
        "Tp": rng.normal(size=(c, D)),
        "Tn": rng.normal(size=(c, D)),
        "sents": rng.normal(size=(N, S, D)),
        "patches": rng.normal(size=(N, P, D)),
    }


def _unit(x):
    return F.l2_normalize(x, axis=-1)


def _basic(V, T, temp):
    return O.contrastive_loss(_unit(V), _unit(T), temp)


def _cls(V, Tp, Tn, temp):
    return O.classification_loss(O.classify_probs(_unit(V), _unit(Tp), _unit(Tn), temp), LABELS)


def _seg(sents, patches, mask=MASK):
    return O.alignment_loss(O.sentence_batch(_unit(sents), mask), _unit(patches),
                            TEMPS.lambda1, TEMPS.lambda2)


def _all(V, T, temp, Tp, Tn, sents, patches):
    return O.total_loss(_basic(V, T, temp), _cls(V, Tp, Tn, temp), _seg(sents, patches),
                        O.LossWeights(1.0, 0.7, 0.4))


def tiny_encoder_config() -> EncoderConfig:
    return EncoderConfig(dim=8, hidden=8, patch_side=4, grid=2, buckets=32, seed=3)


TINY_REPORTS = [
    ["there is edema", "no effusion", "heart normal"],
    ["no edema", "small effusion"],
    ["there is edema in the upper left", "no nodule", "clear lungs"],
    ["no edema", "no effusion", "lungs clear"],
]


def _tiny_images(seed: int = 1) -> np.ndarray:
    return np.random.default_rng(seed).uniform(size=(N, 8, 8))


def _encoder_losses(model: DualEncoder, images, reports, slots: int, prompts=None):
    """(basic, cls, seg) through the encoders for a small batch."""
    local, v = encode_images(images, model)
    sents, t = encode_reports(reports, model, slots)
    basic = O.contrastive_loss(v, t, model.temp)
    pos, neg = prompts or (["there is edema", "effusion present"], ["no edema", "no effusion"])
    _, pe = encode_reports([[s] for s in pos + neg], model, 1)
    c = len(pos)
    logits = O.pair_logits(v, F.take(pe, np.arange(c)), F.take(pe, np.arange(c, 2 * c)), model.temp)
    cls = O.classification_loss_from_logits(logits, LABELS[:, :c])
    seg = O.alignment_loss(sents, local.grid, TEMPS.lambda1, TEMPS.lambda2)
    return basic, cls, seg


def check_gradients() -> tuple[bool, str]:
    """Tape gradients against central differences for every loss."""
    x = _instance()
    cases = {
        "basic": (_basic, [x["V"], x["T"], x["temp"]]),
        "cls": (_cls, [x["V"], x["Tp"], x["Tn"], x["temp"]]),
        "seg": (_seg, [x["sents"], x["patches"]]),
        "all": (_all, [x[k] for k in ("V", "T", "temp", "Tp", "Tn", "sents", "patches")]),
    }
    errors = {name: grad_check(f, inputs) for name, (f, inputs) in cases.items()}

    # the same losses differentiated through the encoders, w.r.t. every parameter
    cfg = tiny_encoder_config()
    base = DualEncoder.init(cfg, temp=0.3)
    names = list(base.params)
    images = _tiny_images()

    def through(which):
        def f(*tensors):
            model = DualEncoder(cfg, dict(zip(names, tensors)))
            basic, cls, seg = _encoder_losses(model, images, TINY_REPORTS, S)
            parts = {"basic": basic, "cls": cls, "seg": seg}
            if which == "all":
                return O.total_loss(basic, cls, seg, O.LossWeights())
            return parts[which]
        return f

    arrays = [base.params[n].data for n in names]
    for which in ("basic", "cls", "seg", "all"):
        errors[f"encoder/{which}"] = grad_check(through(which), arrays)

    # the padded slot of report 1 must receive exactly zero gradient
    sents = Tensor(x["sents"], requires_grad=True)
    with Tape() as tape:
        tape.backward(_seg(sents, Tensor(x["patches"])))
    padded_zero = bool(np.all(sents.grad[~MASK] == 0.0))

    worst = max(errors.values())
    detail = ", ".join(f"{k}={v:.1e}" for k, v in errors.items())
    return worst <= GRAD_TOL and padded_zero, f"max rel err {worst:.2e} ({detail}); padded grad zero={padded_zero}"


def check_analytic_values() -> tuple[bool, str]:
    n = 4
    same = np.ones((n, 3)) / np.sqrt(3)
    uniform = [O.contrastive_loss(same, same, 0.07, symmetric=sym).item() for sym in (True, False)]
    d_uniform = max(abs(u - math.log(n)) for u in uniform)

    rng = np.random.default_rng(0)
    g = rng.normal(size=(1, 4, 5))
    s = rng.normal(size=(1, 3, 5))
    single = O.alignment_loss(O.sentence_batch(_unit(Tensor(s)), np.ones((1, 3), bool)),
                              _unit(Tensor(g)), 0.1, 0.1).item()
    bce = O.classification_loss(np.array([[0.5]]), np.array([[1.0]])).item()
    d_bce = abs(bce - math.log(2))
    ok = d_uniform <= 1e-9 and abs(single) <= 1e-12 and d_bce <= 1e-12
    return ok, (f"|uniform - ln4|={d_uniform:.1e}, single-example alignment={single:.1e}, "
                f"|BCE - ln2|={d_bce:.1e}")


def check_masking() -> tuple[bool, str]:
    """Extra blank slots change neither loss values nor any gradient."""
    # embedding level: padded slots may hold arbitrary garbage
    x = _instance()
    rng = np.random.default_rng(7)
    wide = np.concatenate([x["sents"], rng.normal(size=(N, 2, D))], axis=1)
    wide_mask = np.concatenate([MASK, np.zeros((N, 2), bool)], axis=1)

    def run(matrix, mask):
        m, p = Tensor(matrix, requires_grad=True), Tensor(x["patches"], requires_grad=True)
        with Tape() as tape:
            loss = _seg(m, p, mask)
            tape.backward(loss)
        return loss.item(), m.grad, p.grad

    l3, gm3, gp3 = run(x["sents"], MASK)
    l5, gm5, gp5 = run(wide, wide_mask)
    emb_ok = (abs(l3 - l5) <= 1e-12 and np.array_equal(gm3, gm5[:, :S]) and
              np.all(gm5[:, S:] == 0) and np.array_equal(gp3, gp5))

    # encoder level: every parameter gradient is bitwise identical for S=3 and S=5
    cfg = tiny_encoder_config()
    images = _tiny_images()
    results = []
    for slots in (S, S + 2):
        model = DualEncoder.init(cfg, temp=0.3)
        with Tape() as tape:
            parts = _encoder_losses(model, images, TINY_REPORTS, slots)
            total = O.total_loss(*parts, O.LossWeights())
            tape.backward(total)
        results.append(([p.item() for p in parts] + [total.item()],
                        {k: p.grad for k, p in model.params.items()}))
    (va, ga), (vb, gb) = results
    max_dv = max(abs(a - b) for a, b in zip(va, vb))
    max_dg = max(float(np.max(np.abs(ga[k] - gb[k]))) for k in ga)
    enc_ok = max_dv <= 1e-12 and max_dg == 0.0
    return emb_ok and enc_ok, (f"embedding-level equal={emb_ok}; encoder-level max loss diff "
                               f"{max_dv:.1e}, max grad diff {max_dg:.1e}")


def check_tfidf() -> tuple[bool, str]:
    corpus = ["no pleural effusion", "small pleural effusion", "clear lungs"]
    vocab = tfidf_fit(corpus)
    s1, s3 = tfidf_vector(corpus[0], vocab), tfidf_vector(corpus[2], vocab)
    want = {"pleural": (1 / 3) * math.log(3 / 2), "clear": 0.5 * math.log(3)}
    d = max(abs(s1["pleural"] - want["pleural"]), abs(s3["clear"] - want["clear"]))
    rounded = round(s1["pleural"], 6) == 0.135155 and round(s3["clear"], 6) == 0.549306
    ubiq = tfidf_fit(["the heart", "the lungs", "the end"])
    zero = tfidf_vector("the heart", ubiq).get("the", 0.0) == 0.0 and \
        all(v == 0.0 for v in tfidf_vector("the the", ubiq).values())
    return d <= 1e-9 and rounded and zero, f"max deviation {d:.1e}; ubiquitous term zero={zero}"


def _objective(x, assign, centroids) -> float:
    return float(sum(np.sum((x[i] - centroids[assign[i]]) ** 2) for i in range(len(x))))


def bank_sentences(n: int = 200) -> list[str]:
    """``n`` distinct short findings sentences over a small vocabulary."""
    findings = ["edema", "effusion", "pneumonia", "nodule", "atelectasis"]
    sizes = ["small", "large", "mild", "moderate", "subtle", "severe"]
    places = ["upper left", "upper right", "lower left", "lower right", "left base",
              "right base", "apex"]
    pool = [f"There is {s} {f} in the {p}." for f, s, p in itertools.product(findings, sizes, places)]
    pool += [f"There is no {f} near the {p}." for f, p in itertools.product(findings, places)]
    if len(pool) < n:
        raise ValueError("sentence bank too small")
    return pool[:n]


def check_clustering() -> tuple[bool, str]:
    rng = np.random.default_rng(11)
    monotone = 0
    for run in range(100):
        n, d = int(rng.integers(5, 40)), int(rng.integers(1, 6))
        x = rng.normal(size=(n, d))
        k = int(rng.integers(1, min(n, 8) + 1))
        res = kmeans(x, k, seed=run)
        hist = np.asarray(res.objective)
        final = _objective(x, res.assignments, res.centroids)
        if np.all(np.diff(hist) <= 1e-12) and abs(final - hist[-1]) <= 1e-9 * max(1.0, final):
            monotone += 1
    x = rng.normal(size=(12, 3))
    full = kmeans(x, 12, seed=0)
    k_eq_n = full.objective[-1] == 0.0 and len(set(full.assignments.tolist())) == 12

    model = DualEncoder.init(EncoderConfig(seed=5))
    sentences = bank_sentences(200)
    dictionary = build_dictionary([" ".join(sentences)], model, k=10, restarts=1)
    agree = 0
    for _ in range(50):
        q = rng.normal(size=model.config.dim)
        qn = q / np.linalg.norm(q)
        winners = []
        for c in range(dictionary.k):
            best, best_cos = None, -np.inf
            for i, (sc, emb) in enumerate(zip(dictionary.clusters, dictionary.embeddings)):
                cos = float(np.dot(emb, qn))
                if sc == c and cos > best_cos:
                    best, best_cos = i, cos
            if best is not None:
                winners.append((best_cos, -best, best))
        oracle = [w[2] for w in sorted(winners, reverse=True)[:5]]
        got = [i for i, _, _ in retrieve(q, dictionary, 5)]
        agree += got == oracle
    ok = monotone == 100 and k_eq_n and agree == 50
    return ok, f"monotone runs {monotone}/100, K=N objective 0: {k_eq_n}, retrieval agreement {agree}/50"


def check_metrics() -> tuple[bool, str]:
    perfect = auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    inverted = auc([0.9, 0.1], [0, 1])
    tied = auc([0.3] * 6, [1, 0, 1, 0, 0, 1])
    rng = np.random.default_rng(2)
    classes = ["a", "b", "c", "d"]
    labels = (rng.random((1000, 4)) < 0.4).astype(float)
    macro = metrics_from_scores(rng.random((1000, 4)), labels, classes).macro["auc"]
    ok = perfect == 1.0 and inverted == 0.0 and tied == 0.5 and abs(macro - 0.5) <= 0.05
    return ok, f"AUC perfect={perfect}, inverted={inverted}, tied={tied}; random macro AUC={macro:.3f}"


FAST_SUITES: dict[str, Callable[[], tuple[bool, str]]] = {
    "gradient fidelity": check_gradients,
    "analytic loss values": check_analytic_values,
    "masking contract": check_masking,
    "tf-idf oracle": check_tfidf,
    "clustering and retrieval oracles": check_clustering,
    "metric oracles": check_metrics,
}


def check_end_to_end(run=None, seed: int = 0) -> tuple[bool, str]:
    """Train on the default synthetic corpus and compare against the pass bars."""
    from .experiment import run_synthetic

    run = run or run_synthetic(seed=seed)
    m = run.metrics
    epochs = len(run.checkpoint.history)
    ok = (all(m[k] >= bar for k, bar in E2E_BARS.items()) and run.seconds <= E2E_MAX_SECONDS
          and epochs <= E2E_MAX_EPOCHS)
    detail = ", ".join(f"{k}={m[k]:.3f} (>= {bar})" for k, bar in E2E_BARS.items())
    return ok, f"{detail}; {epochs} epochs in {run.seconds:.0f}s"


def _checkpoint_bytes(ckpt) -> str:
    return json.dumps(ckpt.to_json(), sort_keys=True)


def check_reproducibility(first=None, second=None, seed: int = 0) -> tuple[bool, str]:
    """Identical seeds give identical artifacts; files round-trip bitwise."""
    from .experiment import run_synthetic
    from .trainer import load_checkpoint, save_checkpoint

    first = first or run_synthetic(seed=seed)
    second = second or run_synthetic(seed=seed)
    same_ckpt = _checkpoint_bytes(first.checkpoint) == _checkpoint_bytes(second.checkpoint)
    same_metrics = (first.metrics == second.metrics and
                    first.classification.to_json() == second.classification.to_json() and
                    first.segmentation.to_json() == second.segmentation.to_json())
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.json"
        save_checkpoint(first.checkpoint, path)
        loaded = load_checkpoint(path)
        ckpt_rt = (all(np.array_equal(loaded.params[k], v) for k, v in first.checkpoint.params.items())
                   and loaded.temp == first.checkpoint.temp
                   and _checkpoint_bytes(loaded) == _checkpoint_bytes(first.checkpoint))
        dpath = Path(tmp) / "dict.json"
        save_dictionary(first.dictionary, dpath)
        d2 = load_dictionary(dpath)
        dict_rt = (d2.sentences == first.dictionary.sentences and
                   np.array_equal(d2.clusters, first.dictionary.clusters) and
                   np.array_equal(d2.embeddings, first.dictionary.embeddings) and
                   d2.vocab.idf == first.dictionary.vocab.idf)
    ok = same_ckpt and same_metrics and ckpt_rt and dict_rt
    return ok, (f"identical checkpoints={same_ckpt}, identical metrics={same_metrics}, "
                f"checkpoint round-trip={ckpt_rt}, dictionary round-trip={dict_rt}")


def run_suites(full: bool = False, echo: Callable[[str], None] | None = print) -> list[CheckResult]:
    results = [_timed(name, fn) for name, fn in FAST_SUITES.items()]
    if echo:
        for r in results:
            echo(r.line())
    if full:
        from .experiment import run_synthetic

        holder = {}

        def e2e():
            holder["run"] = run_synthetic()
            return check_end_to_end(holder["run"])

        for name, fn in (("end-to-end synthetic reproduction", e2e),
                         ("reproducibility", lambda: check_reproducibility(holder.get("run")))):
            r = _timed(name, fn)
            results.append(r)
            if echo:
                echo(r.line())
    return results
