"""Acceptance criteria 1-10; each test prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``. Criteria 5 and 6 share
one toy learning run (foundation pretraining plus three prefix-tuning seeds).
Set ZSSLU_SKIP_TOY=1 to skip that run; the two criteria then report SKIP.
"""

import itertools
import os
import time

import numpy as np
import pytest

from zsslu import data, metrics, tensor as T
from zsslu.kernels import edit_distance
from zsslu.model import ModelConfig, Transformer
from zsslu.pipeline import PipelineConfig, run_asr, run_pipeline
from zsslu.prefix import PrefixBanks, PrefixConfig, inject, new_bank, new_banks
from zsslu.questions import Question, question_set_for_corpus
from zsslu.training import (AdamW, LinearSchedule, PretrainConfig, TrainConfig, build_batch, build_foundation,
                            compute_loss, train)

from conftest import numeric_grad, tiny_model
from test_kernels import dp_reference
from test_metrics import _random_entities, brute_force_credit

# tolerances and budgets
FD_STEP, FD_RTOL, FD_FLOOR, FD_SEEDS, FD_BUDGET_S = 1e-5, 1e-3, 1e-8, 10, 60.0
IDENTITY_TOL = 1e-12
CACHE_TOL = 1e-6
FREEZE_STEPS = 100
TOY_SEEDS = (0, 1, 2)
TOY_SLU_F1, TOY_INTENT_ACC, TOY_BUDGET_S = 0.60, 0.90, 30 * 60.0
METRIC_CASES, MAX_ENTITIES = 1000, 4
BASE_LR = 0.002

# toy calibration: prefix-tuning rate, epochs and per-task prefix blocks for the desk-scale run
TOY_TRAIN = dict(epochs=5, base_lr=0.01, eval_every_epoch=False)
TOY_PREFIX = dict(task_masking=True)
TOY_SIZES = (2000, 100, 100)
ABLATIONS = ("none", "no-transcript", "no-asr-states")


def report(capsys, n: int, ok, detail: str) -> None:
    status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
    with capsys.disabled():
        print(f"\nACCEPTANCE {n:>2} {status}: {detail}")
    if ok is None:
        pytest.skip(detail)
    assert ok, detail


# ---------------------------------------------------------------- 1


def test_01_gradient_integrity(spec, qset, capsys):
    corpus = data.generate_corpus(spec, (8, 0, 0))
    data.featurize_all(corpus["train"], spec, 0)
    t0, worst, n_params = time.perf_counter(), 0.0, 0
    for seed in range(FD_SEEDS):
        model = tiny_model(spec, qset, seed=seed, init_scale=0.3)
        banks = new_banks(PrefixConfig(per_task_length=2, task_masking=bool(seed % 2)), model.config, 0.3,
                          np.random.default_rng(seed))
        rng = np.random.default_rng(seed)
        exs = [corpus["train"][i] for i in rng.choice(8, 2, replace=False)]
        batches = [build_batch(e, qset, 2, rng) for e in exs]
        cfg = PipelineConfig.for_ablation(ABLATIONS[seed % 3])

        def loss_value():
            return compute_loss(model, banks, batches, qset, cfg)[0].item()

        T.backward(compute_loss(model, banks, batches, qset, cfg)[0])
        for p in banks.tensors():
            num = numeric_grad(loss_value, p, h=FD_STEP)
            worst = max(worst, float(np.max(np.abs(p.grad - num) / (np.abs(p.grad) + FD_FLOOR))))
            n_params += p.data.size
    elapsed = time.perf_counter() - t0
    report(capsys, 1, worst <= FD_RTOL and elapsed < FD_BUDGET_S,
           f"max |g-fd|/(|g|+1e-8) = {worst:.2e} (tol {FD_RTOL:g}) over {n_params} prefix entries, "
           f"{FD_SEEDS} seeds, {elapsed:.1f}s (budget {FD_BUDGET_S:.0f}s)")


# ---------------------------------------------------------------- 2


def test_02_zero_length_prefix_identity(spec, qset, capsys):
    model = tiny_model(spec, qset, seed=5, init_scale=0.3, n_dec_layers=2)
    x = data.featurize("play some music with the artist to adele", spec, np.random.default_rng(0))
    empty = new_banks(PrefixConfig(per_task_length=0), model.config)
    ids = [model.vocab.sot] + model.vocab.encode("play some music")
    enc_a, enc_b = model.encode(x), model.encode(x, empty.encoder)
    dec_a, _ = model.decode_step(ids, None, enc_a)
    dec_b, _ = model.decode_step(ids, None, enc_b, empty.decoder)
    err = max(np.max(np.abs(enc_a.states.data - enc_b.states.data)), np.max(np.abs(dec_a.data - dec_b.data)))
    pa, pb = run_pipeline(x, model, None, qset), run_pipeline(x, model, empty, qset)
    rng = np.random.default_rng(1)
    k, v = T.Tensor(rng.normal(size=(7, 16))), T.Tensor(rng.normal(size=(7, 16)))
    bank = new_bank("decoder-self", 1, 3, 16, 1.0, rng)
    k2, v2 = inject(k, v, bank, 0)
    sliced = np.array_equal(k2.data[3:], k.data) and np.array_equal(v2.data[3:], v.data)
    ok = err <= IDENTITY_TOL and pa == pb and sliced
    report(capsys, 2, ok, f"length-0 prefix max |diff| = {err:.1e} (tol {IDENTITY_TOL:g}), "
                          f"pipeline identical: {pa == pb}, inject-then-slice exact: {sliced}")


# ---------------------------------------------------------------- 3


def test_03_cache_equivalence(spec, qset, capsys):
    vocab_model = tiny_model(spec, qset)
    cfg = ModelConfig(vocab_size=len(vocab_model.vocab), d_feat=spec.d_feat)
    worst = {}
    for plen in (0, 2, 10):
        model = Transformer(cfg, vocab_model.vocab, rng=np.random.default_rng(plen))
        banks = new_banks(PrefixConfig(per_task_length=plen), cfg, 0.5, np.random.default_rng(plen + 1))
        x = data.featurize("tune the radio with the city to paris", spec, np.random.default_rng(plen))
        enc = model.encode(x, banks.encoder)
        ids = [model.vocab.sot] + model.vocab.encode("tune the radio with the city to paris and the volume at low")
        full, _ = model.decode_step(ids, None, enc, banks.decoder)
        state, rows = None, []
        for t in ids:
            lg, state = model.decode_step([t], state, enc, banks.decoder)
            rows.append(lg.data[0])
        worst[plen] = float(np.max(np.abs(np.array(rows) - full.data)))
    ok = all(e <= CACHE_TOL for e in worst.values())
    report(capsys, 3, ok, "incremental vs full max |logit diff| by prefix length "
                          + ", ".join(f"{k}: {v:.1e}" for k, v in worst.items()) + f" (tol {CACHE_TOL:g})")


# ---------------------------------------------------------------- 4


def test_04_freeze_contract(spec, qset, capsys):
    vocab_model = tiny_model(spec, qset)
    cfg = ModelConfig(vocab_size=len(vocab_model.vocab), d_feat=spec.d_feat)
    model = Transformer(cfg, vocab_model.vocab, rng=np.random.default_rng(0))
    before = model.checksum()
    snapshot = {k: v.data.copy() for k, v in model.params.items()}
    banks = new_banks(PrefixConfig(), cfg, rng=np.random.default_rng(0))
    init = [t.data.copy() for t in banks.tensors()]
    corpus = data.generate_corpus(spec, (400, 0, 0))
    data.featurize_all(corpus["train"], spec, 0)
    res = train(model, banks, corpus["train"], qset.without_slots(spec.held_out_slots),
                TrainConfig(epochs=1, batch_size=4, n_negatives=3, max_steps=FREEZE_STEPS),
                np.random.default_rng(0))
    same = model.checksum() == before and all(np.array_equal(snapshot[k], v.data) for k, v in model.params.items())
    moved = sum(not np.array_equal(a, t.data) for a, t in zip(init, banks.tensors()))
    ok = res.steps == FREEZE_STEPS and same and moved == len(init)
    report(capsys, 4, ok, f"{res.steps} steps: base checksum unchanged: {same}; "
                          f"prefix tensors changed: {moved}/{len(init)}")


# ---------------------------------------------------------------- 5 and 6


def _prediction_key(p):
    return (p.intent, tuple(sorted(p.entity_pairs())))


@pytest.fixture(scope="module")
def toy_run():
    if os.environ.get("ZSSLU_SKIP_TOY") == "1":
        return None
    t0 = time.perf_counter()
    spec = data.default_spec()
    qset = question_set_for_corpus(spec)
    corpus = data.generate_corpus(spec, TOY_SIZES)
    exclude = [e.transcript for name in ("dev", "test") for e in corpus[name]]
    base = build_foundation(spec, qset, config=PretrainConfig(), exclude=exclude, seed=0, log_every=0)
    t_base = time.perf_counter() - t0
    checksum = base.checksum()
    seen = qset.without_slots(spec.held_out_slots)
    runs = []
    for seed in TOY_SEEDS:
        data.featurize_corpus(corpus, spec, seed)
        banks = new_banks(PrefixConfig(**TOY_PREFIX), base.config, rng=np.random.default_rng([seed, 0]))
        train(base, banks, corpus["train"], seen, TrainConfig(**TOY_TRAIN), np.random.default_rng([seed, 1]))
        test = corpus["test"]
        out = {}
        for abl in ABLATIONS:
            preds = [run_pipeline(ex.features, base, banks, qset, PipelineConfig.for_ablation(abl)) for ex in test]
            out[abl] = (metrics.evaluate(test, preds, spec.held_out_slots), preds)
        runs.append(out)
    assert base.checksum() == checksum
    return {"runs": runs, "seconds": time.perf_counter() - t0, "base_seconds": t_base}


def test_05_toy_zero_shot_learning(toy_run, capsys):
    if toy_run is None:
        report(capsys, 5, None, "toy learning run skipped (ZSSLU_SKIP_TOY=1)")
    full = [r["none"][0] for r in toy_run["runs"]]
    f1 = float(np.mean([r.slu_f1 for r in full]))
    acc = float(np.mean([r.intent_accuracy for r in full]))
    secs = toy_run["seconds"]
    ok = f1 >= TOY_SLU_F1 and acc >= TOY_INTENT_ACC and secs < TOY_BUDGET_S
    per_seed = "; ".join(f"seed {s}: F1 {r.slu_f1:.3f} acc {r.intent_accuracy:.2f} WER {r.wer:.3f}"
                         for s, r in zip(TOY_SEEDS, full))
    report(capsys, 5, ok, f"held-out SLU-F1 {f1:.3f} (>= {TOY_SLU_F1}), intent acc {acc:.3f} "
                          f"(>= {TOY_INTENT_ACC}) over {len(full)} seeds [{per_seed}]; "
                          f"{secs / 60:.1f} min incl. {toy_run['base_seconds'] / 60:.1f} min foundation "
                          f"(budget {TOY_BUDGET_S / 60:.0f} min)")


def test_06_ablation_ordering(toy_run, capsys):
    if toy_run is None:
        report(capsys, 6, None, "toy learning run skipped (ZSSLU_SKIP_TOY=1)")
    mean = {abl: float(np.mean([r[abl][0].slu_f1 for r in toy_run["runs"]])) for abl in ABLATIONS}
    distinct = 0
    for r in toy_run["runs"]:
        keys = zip(*[[_prediction_key(p) for p in r[abl][1]] for abl in ABLATIONS])
        distinct += sum(len(set(k)) == 3 for k in keys)
    ok = mean["none"] > mean["no-asr-states"] and distinct >= 1
    report(capsys, 6, ok, "mean held-out SLU-F1 " + ", ".join(f"{k}: {v:.3f}" for k, v in mean.items())
           + f"; utterances where all three configurations disagree: {distinct}")


# ---------------------------------------------------------------- 7


def test_07_metric_oracles(capsys):
    rng = np.random.default_rng(7)
    vocab = ["a", "b", "c", "d", "e"]
    wer_bad = 0
    for _ in range(METRIC_CASES):
        r = list(rng.choice(vocab, rng.integers(1, 10)))
        h = list(rng.choice(vocab, rng.integers(0, 10)))
        wer_bad += metrics.wer(" ".join(r), " ".join(h)) != dp_reference(r, h) / len(r)
        wer_bad += edit_distance(r, h) != dp_reference(r, h)
    match_bad, worst = 0, 0.0
    for _ in range(METRIC_CASES):
        g = _random_entities(rng, rng.integers(0, MAX_ENTITIES + 1))
        p = _random_entities(rng, rng.integers(0, MAX_ENTITIES + 1))
        for mode in metrics.MODES:
            d = abs(metrics.matched_credit(g, p, mode) - brute_force_credit(g, p, mode))
            worst = max(worst, d)
            match_bad += d > 1e-12
    ok = wer_bad == 0 and match_bad == 0
    report(capsys, 7, ok, f"WER/edit distance vs DP reference: {wer_bad} mismatches in {METRIC_CASES} pairs; "
                          f"entity matching vs brute-force optimum: {match_bad} mismatches in "
                          f"{METRIC_CASES} cases x {len(metrics.MODES)} modes (max |diff| {worst:.1e})")


# ---------------------------------------------------------------- 8


def test_08_selection_rules(capsys):
    import test_pipeline as tp

    checks = {}
    m = tp._constructed({"music": ("Yes", 60.0)})
    cache, qs = tp._cache(m), tp._questions()
    from zsslu.pipeline import classify_intent, fill_slots

    ref = classify_intent(tp.TRANSCRIPT, cache, m, None, qs)
    checks["intent argmax invariant under all question orders"] = ref[0][0] == "play_music" and all(
        classify_intent(tp.TRANSCRIPT, cache, m, None, list(perm)) == ref
        for perm in itertools.permutations(qs.q_intent))
    ok_conflict = True
    for penalized, winner in (("color", "shade"), ("shade", "color")):
        m = tp._constructed({penalized: ("No", 100.0)})
        cache = tp._cache(m)
        qs2 = tp._questions({"color": "What is the color?", "shade": "What is the shade?"})
        lp = {s: tp._answer(m, cache, f"What is the {s}?").logprob for s in ("color", "shade")}
        out = fill_slots(tp.TRANSCRIPT, cache, m, None, "play_music", qs2)
        ok_conflict &= [(s, v) for s, v, _ in out] == [(winner, "red")] and max(lp, key=lp.get) == winner
    checks["duplicate answer kept by higher log-prob"] = ok_conflict
    m = tp._constructed({"size": ("<eot>", 600.0)})
    cache = tp._cache(m)
    out = fill_slots(tp.TRANSCRIPT, cache, m, None, "play_music", tp._questions())
    checks["end-of-text alone yields no entity"] = (tp._answer(m, cache, "What is the size?").tokens == []
                                                    and "size" not in {s for s, _, _ in out})
    report(capsys, 8, all(checks.values()), "; ".join(f"{k}: {v}" for k, v in checks.items()))


# ---------------------------------------------------------------- 9


def test_09_schedule_and_optimizer(spec, qset, capsys):
    checks = {}
    sched = LinearSchedule(TrainConfig().base_lr, 200)
    checks["lr(0)=0.002"] = sched.lr(0) == BASE_LR
    checks["lr(mid)=0.001"] = abs(sched.lr(100) - BASE_LR / 2) < 1e-18
    checks["lr(end)=0"] = sched.lr(200) == 0.0
    checks["no warmup"] = sched.lr(1) < sched.lr(0)
    model = tiny_model(spec, qset)
    banks = new_banks(PrefixConfig(per_task_length=1), model.config)
    corpus = data.generate_corpus(spec, (6, 0, 0))
    data.featurize_all(corpus["train"], spec, 0)
    res = train(model, banks, corpus["train"], qset, TrainConfig(epochs=2, batch_size=3, n_negatives=1),
                np.random.default_rng(0))
    checks["training run ends at lr 0"] = res.log[-1]["lr"] == 0.0 and res.steps == 4
    p = T.Tensor(np.array([1.0, -3.0, 0.5]), requires_grad=True)
    opt = AdamW([p], weight_decay=0.0)
    for _ in range(3):
        p.grad = np.zeros(3)
        opt.step(BASE_LR)
    checks["zero grad, no decay: unchanged"] = np.array_equal(p.data, [1.0, -3.0, 0.5])
    q = T.Tensor(np.array([1.0, -3.0, 0.5]), requires_grad=True)
    opt = AdamW([q], weight_decay=0.01)
    q.grad = np.zeros(3)
    opt.step(BASE_LR)
    checks["zero grad: pure decay by (1 - lr*wd)"] = np.allclose(q.data, np.array([1.0, -3.0, 0.5]) * (1 - BASE_LR * 0.01),
                                                                 rtol=0, atol=1e-15)
    report(capsys, 9, all(checks.values()), "; ".join(f"{k}: {v}" for k, v in checks.items()))


# ---------------------------------------------------------------- 10


def test_10_zero_shot_intent_extension(spec, qset, capsys):
    assert len(qset.q_intent) == 10
    model = tiny_model(spec, qset, seed=11, init_scale=0.1, n_dec_layers=2)
    banks = new_banks(PrefixConfig(per_task_length=2), model.config, 0.3, np.random.default_rng(3))
    extended = qset.with_intent(Question("make_tea", "intent", "Does the user want to make tea?"), ["time"])
    exs = data.generate_corpus(spec, (0, 0, 30))["test"]
    data.featurize_all(exs, spec, 0)
    cfg = PipelineConfig(max_asr_len=12)
    compared = argmax_new = mismatched = 0
    for ex in exs:
        a = run_pipeline(ex.features, model, banks, qset, cfg)
        b = run_pipeline(ex.features, model, banks, extended, cfg)
        if b.intent == "make_tea":
            argmax_new += 1
            continue
        compared += 1
        same = (a.transcript, a.intent, a.intent_score, a.entities) == (b.transcript, b.intent, b.intent_score,
                                                                         b.entities)
        same &= [r for r in b.intent_ranking if r[0] != "make_tea"] == a.intent_ranking
        mismatched += not same
    ok = compared > 0 and mismatched == 0
    report(capsys, 10, ok, f"11th intent added: {compared} utterances compared bit-for-bit, {mismatched} differ; "
                           f"{argmax_new} where the new intent wins were excluded")


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(pytest.main([__file__, "-v"]))
