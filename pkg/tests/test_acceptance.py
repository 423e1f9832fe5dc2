"""Acceptance suite: the ten criteria on the synthetic binary benchmark.

Five seeds of the 500 x 60, rank-3 benchmark are trained once per module with the
default RunConfig. Run with ``pytest tests/test_acceptance.py -v``; the terminal
summary prints one PASS/FAIL line per criterion.
"""
import math

import numpy as np
import pytest

from chnet.baselines import fit_head, maml_outer_loss, maml_start_head, mean_impute_head
from chnet.chn import encode_context
from chnet.config import RunConfig
from chnet.datasets import (RowView, cap_targets, generate_synthetic, sample_context_size,
                            sample_episode)
from chnet.evaluation import (MethodContext, eval_episode, evaluate_kshot, parse_methods,
                              per_seed_means, report_csv, time_grid, train_all)
from chnet.metrics import auroc
from chnet.numerics import Rng, bernoulli_nll_from_logit, gaussian_nll, kl_standard_normal
from chnet.pvae import FrozenBase, decode, encode_partial

from oracles import (auroc_instance, elbo_fd_instance, knn_instance, meta_loss_fd_instance,
                     mlp_fd_instance, pair_count_auroc)

pytestmark = pytest.mark.slow

SEEDS = (1, 2, 3, 4, 5)
KS = (0, 1, 4, 16)
METHODS = parse_methods("chn,random,mean_impute,mean_head,mean_head_matching,knn:10,"
                        "train_from_random:10,chn_then_finetune:10,maml")
CONFIG = RunConfig()


def benchmark(seed):
    return generate_synthetic(500, 60, 3, 0.0, 0.12, "binary", 4,
                              Rng(seed).child("synth").generator())


def run_pipeline(seed):
    ds, metas, _ = benchmark(seed)
    trained = train_all(CONFIG, ds, metas, seed)
    ctx = MethodContext(trained.base, trained.split, metas, seed, trained.chn, trained.maml,
                        CONFIG.tfr_lr)
    return ds, metas, trained, ctx


class SeedRun:
    def __init__(self, seed):
        self.seed = seed
        self.dataset, self.metas, self.trained, self.ctx = run_pipeline(seed)
        self.hash_after_training = self.trained.model.param_hash()
        self.report = evaluate_kshot(METHODS, self.ctx, KS)
        self.csv = report_csv(self.report.rows, [f"seed = {seed}", *CONFIG.lines()])
        self.means = per_seed_means(self.report.rows)
        self.hash_after_eval = self.trained.model.param_hash()

    def auroc(self, method, k):
        return self.means[method, k, "auroc", self.seed]


@pytest.fixture(scope="module")
def runs():
    return {seed: SeedRun(seed) for seed in SEEDS}


def count(flags):
    return sum(bool(f) for f in flags)


# --- 1. gradients ------------------------------------------------------------------

def test_criterion_01_gradient_suite(toy_base, toy_dataset, record_property):
    elbo_err = max(elbo_fd_instance(s) for s in range(20))
    meta_err = max(meta_loss_fd_instance(toy_base, toy_dataset, s) for s in range(20))
    mlp_err = max(mlp_fd_instance(s) for s in range(20))
    record_property("detail", f"max rel err: elbo {elbo_err:.1e}, meta-loss {meta_err:.1e}, "
                              f"mlp {mlp_err:.1e} (bound 1e-4)")
    assert max(elbo_err, meta_err, mlp_err) < 1e-4


# --- 2. closed forms ---------------------------------------------------------------

def test_criterion_02_closed_forms(record_property):
    values = {
        "kl": (kl_standard_normal(np.array([1.0]), np.array([0.0])), 0.5),
        "mean_impute": (mean_impute_head([1, 1, 1, 0], "binary", 0.5, 4).b, math.log(3)),
        "gaussian_nll": (float(gaussian_nll(0.7, 0.7, 0.1)), 0.5 * math.log(0.2 * math.pi)),
        "bernoulli_nll": (float(bernoulli_nll_from_logit(1.0, 0.0)), math.log(2)),
    }
    worst = max(abs(got - want) for got, want in values.values())
    record_property("detail", f"max abs err {worst:.1e} over {len(values)} values (bound 1e-9)")
    assert worst <= 1e-9


# --- 3. oracle equivalence ---------------------------------------------------------

def test_criterion_03_oracle_equivalence(record_property):
    auroc_ok = 0
    for seed in range(100):
        scores, labels = auroc_instance(seed)
        auroc_ok += auroc(scores, labels) == pair_count_auroc(scores.tolist(), labels.tolist())
    knn_ok = 0
    for seed in range(20):
        h, w, b = knn_instance(seed)
        knn_ok += bool(np.array_equal(h.w, w) and h.b == b)
    record_property("detail", f"auroc exact on {auroc_ok}/100, knn exact on {knn_ok}/20")
    assert auroc_ok == 100 and knn_ok == 20


# --- 4. invariances ----------------------------------------------------------------

def test_criterion_04_invariance_suite(runs, record_property):
    gen = np.random.default_rng(0)
    failures = []
    for run in runs.values():
        model, base, chn = run.trained.model, run.trained.base, run.trained.chn
        view = RowView(run.dataset, np.asarray(run.trained.split.train))
        for _ in range(20):
            f, v = view.row(int(gen.integers(run.dataset.n_rows)))
            p = gen.permutation(len(f))
            a, b = encode_partial(model, f, v), encode_partial(model, f[p], v[p])
            if not (np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])):
                failures.append(f"seed {run.seed} set encoder")
            j = int(gen.choice(run.trained.split.meta_test))
            rows, vals = run.dataset.feature_observations(j)
            q = gen.permutation(len(rows))
            if not np.array_equal(encode_context(chn, base, rows, vals),
                                  encode_context(chn, base, rows[q], vals[q])):
                failures.append(f"seed {run.seed} context encoding")
        z = gen.standard_normal((8, model.latent_dim))
        heads = list(run.trained.split.train)
        joint = decode(model, z, heads)
        if not all(np.array_equal(joint[:, c], decode(model, z, [j])[:, 0])
                   for c, j in enumerate(heads)):
            failures.append(f"seed {run.seed} decode factorisation")
        if not run.hash_after_training == run.hash_after_eval == base.model.param_hash():
            failures.append(f"seed {run.seed} base hash")
    record_property("detail", "all bit-identical, base hash fixed through meta-training, "
                              "baselines and evaluation" if not failures else "; ".join(failures))
    assert not failures


# --- 5. training improves ----------------------------------------------------------

def maml_check(run):
    """Outer loss on fixed episodes, at the start head and at the learned initialisation."""
    start = maml_start_head(run.trained.base, Rng(run.seed).child("train", "maml"), "sigmoid")
    gen = Rng(run.seed).child("maml_check").generator()
    episodes = [cap_targets(sample_episode(run.dataset, j, sample_context_size(gen, CONFIG.k_max),
                                           gen), CONFIG.target_cap, gen)
                for j in run.trained.split.meta_train for _ in range(3)]
    args = (run.trained.base, episodes, CONFIG.maml_alpha, CONFIG.maml_inner_steps)
    return maml_outer_loss(start, *args), maml_outer_loss(run.trained.maml.head, *args)


def tfr_check(run, k=4, epochs=10):
    """Mean context loss over meta-test features before and after ``epochs`` steps."""
    first, last = [], []
    for j in run.trained.split.meta_test:
        ep = eval_episode(run.dataset, j, k, run.seed)
        _, trace = fit_head(run.trained.base, run.ctx.random_init(ep), ep.context_rows,
                            ep.context_values, epochs, CONFIG.tfr_lr)
        first.append(trace[0])
        last.append(trace[epochs])
    return float(np.mean(first)), float(np.mean(last))


def test_criterion_05a_base_elbo_improves(runs, record_property):
    # the trace is the unweighted ELBO although training down-weights the KL term
    pairs = [(r.trained.base_trace[0], r.trained.base_trace[-1]) for r in runs.values()]
    hits = count(last > first for first, last in pairs)
    record_property("detail", f"{hits}/5 seeds (need 4); ELBO first->last: "
                              + ", ".join(f"{a:.2f}->{b:.2f}" for a, b in pairs))
    assert hits >= 4


def test_criterion_05b_chn_meta_objective_improves(runs, record_property):
    pairs = [(r.trained.chn_trace[0], r.trained.chn_trace[-1]) for r in runs.values()]
    hits = count(last > first for first, last in pairs)
    record_property("detail", f"{hits}/5 seeds (need 4); l(psi) first->last: "
                              + ", ".join(f"{a:.3f}->{b:.3f}" for a, b in pairs))
    assert hits >= 4


def test_criterion_05c_maml_outer_loss_falls(runs, record_property):
    pairs = [maml_check(r) for r in runs.values()]
    hits = count(after < before for before, after in pairs)
    record_property("detail", f"{hits}/5 seeds (need 4); outer loss start->learned: "
                              + ", ".join(f"{a:.4f}->{b:.4f}" for a, b in pairs))
    assert hits >= 4


def test_criterion_05d_train_from_random_context_loss(runs, record_property):
    pairs = [tfr_check(r) for r in runs.values()]
    hits = count(after <= before for before, after in pairs)
    record_property("detail", f"{hits}/5 seeds (need 4); context loss epoch 0->10: "
                              + ", ".join(f"{a:.4f}->{b:.4f}" for a, b in pairs))
    assert hits >= 4


# --- 6. k-shot trends --------------------------------------------------------------

def test_criterion_06a_chn_beats_mean_impute(runs, record_property):
    hits = count(all(r.auroc("chn", k) >= r.auroc("mean_impute", k) for k in (1, 4, 16))
                 for r in runs.values())
    gaps = [np.mean([r.auroc("chn", k) - r.auroc("mean_impute", k) for r in runs.values()])
            for k in (1, 4, 16)]
    record_property("detail", f"{hits}/5 seeds (need 4); mean gap k=1,4,16: "
                              + ", ".join(f"{g:+.3f}" for g in gaps))
    assert hits >= 4


def test_criterion_06b_information_monotonicity(runs, record_property):
    diffs = [r.auroc("chn", 16) - r.auroc("chn", 0) for r in runs.values()]
    hits = count(d >= 0 for d in diffs)
    record_property("detail", f"{hits}/5 seeds (need 4); AUROC(k=16) - AUROC(k=0) per seed: "
                              + ", ".join(f"{d:+.3f}" for d in diffs))
    assert hits >= 4


def test_criterion_06c_chn_beats_random_by_margin(runs, record_property):
    diffs = [r.auroc("chn", 4) - r.auroc("random", 4) for r in runs.values()]
    hits = count(d >= 0.05 for d in diffs)
    record_property("detail", f"{hits}/5 seeds (need 4); AUROC gap at k=4 per seed: "
                              + ", ".join(f"{d:+.3f}" for d in diffs))
    assert hits >= 4


# --- 7. fine-tuning the CHN head ---------------------------------------------------

def test_criterion_07_finetune_gain_ordering(runs, record_property):
    hits = 0
    pairs = []
    for r in runs.values():
        from_chn = r.auroc("chn_then_finetune:10", 4) - r.auroc("chn", 4)
        from_random = r.auroc("train_from_random:10", 4) - r.auroc("random", 4)
        hits += from_chn < from_random
        pairs.append(f"{from_chn:+.3f}/{from_random:+.3f}")
    record_property("detail", f"{hits}/5 seeds (need 3); gain chn/random: " + ", ".join(pairs))
    assert hits >= 3


# --- 8. timing ratios --------------------------------------------------------------

def test_criterion_08_timing_ratios(runs, record_property):
    run = runs[SEEDS[0]]
    # uncached so the context encodings are part of the measured cost
    base = FrozenBase(run.trained.model, run.dataset, run.trained.split.train, cache=False)
    ctx = MethodContext(base, run.trained.split, run.metas, run.seed, run.trained.chn)
    chn, tfr = parse_methods("chn,train_from_random:10")
    features = list(run.trained.split.meta_train) + list(run.trained.split.meta_test)
    t = time_grid([(m, k) for m in (chn, tfr) for k in (1, 16)], ctx, features,
                  batch_size=128, repetitions=30)
    chn_ratio = t[chn, 16][0] / t[chn, 1][0]
    tfr_ratio = t[tfr, 16][0] / t[tfr, 1][0]
    record_property("detail", f"chn k16/k1 {chn_ratio:.2f} (< 1.5), "
                              f"train_from_random:10 k16/k1 {tfr_ratio:.2f} (> 1.2)")
    assert chn_ratio < 1.5 and tfr_ratio > 1.2


# --- 9. protocol integrity ---------------------------------------------------------

def test_criterion_09_protocol_integrity(runs, record_property):
    again = SeedRun(SEEDS[0])
    same_bytes = again.csv == runs[SEEDS[0]].csv
    mismatched = sum(run.report.episodes[seed, f, k] != h
                     for run in runs.values()
                     for (seed, _, f, k), h in run.report.seen.items())
    checked = sum(len(run.report.seen) for run in runs.values())
    record_property("detail", f"rerun CSV identical: {same_bytes}; episode hash mismatches "
                              f"{mismatched}/{checked}")
    assert same_bytes and mismatched == 0


# --- 10. zero-shot -----------------------------------------------------------------

def test_criterion_10_zero_shot_coverage(runs, record_property):
    rows = [row for run in runs.values() for row in run.report.rows if row.k == 0]
    defined = {row.method for row in rows if np.isfinite(row.value)}
    missing = [str(m) for m in METHODS if str(m) not in defined]
    bad = sum(not np.isfinite(row.value) for row in rows)
    record_property("detail", f"{len(METHODS)} methods, {len(rows)} k=0 rows, "
                              f"{bad} undefined")
    assert not missing and bad == 0
