"""End-to-end acceptance suite on the 25-mode toy world.

Targets, judges and black-box runs are trained once per session and shared
between criteria. The whole file takes roughly 25 minutes on one core.
"""

import math
import time

import numpy as np
import pytest
from oracles import central_difference, energy_test
from scipy import stats

from ganextract import extraction, gan, metrics, worlds
from ganextract.defenses import DefensePolicy
from ganextract.extraction import AttackConfig, CalibratedClassifier, MhConfig
from ganextract.gan import LatentPrior, TrainConfig
from ganextract.metrics import GaussianMoments
from ganextract.nnet import sigmoid
from ganextract.provider import Capability, QueryLedger, TargetProvider
from ganextract.worlds import Provenance, SampleBatch

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2, 3, 4)
BUDGETS = (10_000, 30_000, 50_000, 90_000)
FRACTIONS = (0.1, 0.2, 0.3)
WORLD = worlds.grid25()
TARGET_CONFIG = TrainConfig(steps=20_000, batch_size=256)
ATTACK = AttackConfig(TrainConfig(steps=5000, lr_final=1e-5), select_every=500, phase2_steps=2000, phase2_lr=1e-4)
TRANSFER = TrainConfig(steps=2000, lr_final=1e-5)


def attack_config(seed):
    return AttackConfig(ATTACK.train.replace(seed=seed), ATTACK.phase2_steps, ATTACK.select_every, ATTACK.phase2_lr)


def pretty(values, digits=4):
    return "[" + ", ".join(f"{v:.{digits}f}" for v in values) + "]"


# -- shared session state --------------------------------------------------

@pytest.fixture(scope="session")
def targets():
    out = {}
    for seed in SEEDS:
        start = time.perf_counter()
        model, corpus = gan.train_target(WORLD, TARGET_CONFIG.replace(seed=seed))
        out[seed] = (model, corpus, time.perf_counter() - start)
    return out


@pytest.fixture(scope="session")
def judges(targets):
    return {seed: metrics.Judge(targets[seed][0], WORLD, n=50_000, seed=seed, k=None) for seed in SEEDS}


def provider_for(targets, seed, **kwargs):
    model, corpus, _ = targets[seed]
    return TargetProvider(model, corpus=corpus, seed=seed, **kwargs)


@pytest.fixture(scope="session")
def black_box_runs(targets, judges):
    runs = {}
    for seed in SEEDS:
        for budget in BUDGETS:
            prov = provider_for(targets, seed, capability=Capability.partial_black_box(max(FRACTIONS)))
            runs[seed, budget] = extraction.run_black_box_accuracy(prov, budget, attack_config(seed), judges[seed])
    return runs


# -- 1 ---------------------------------------------------------------------

def test_criterion_01_target_quality(targets, report_criterion):
    hq, times = [], []
    for seed in SEEDS:
        model, _, elapsed = targets[seed]
        hq.append(worlds.high_quality_fraction(gan.generate(model, 50_000, seed=[seed, 100]), WORLD))
        times.append(elapsed)
    good = sum(h >= 0.90 for h in hq)
    fast = all(t <= 180 for t in times)
    ok = report_criterion(1, good >= 4 and fast, f"HQ {pretty(hq)} ({good}/5 >= 0.90), "
                                                 f"train time {pretty(times, 0)} s")
    assert ok


# -- 2 ---------------------------------------------------------------------

def test_criterion_02_mh_improves_quality(targets, report_criterion):
    gains = []
    for seed in SEEDS:
        prov = provider_for(targets, seed, capability=Capability.white_box(0.1))
        real = prov.real_data(0.1)
        fake = prov.query(len(real))
        clf = extraction.calibrate(prov.discriminator_logit(real.points), prov.discriminator_logit(fake.points))
        direct = gan.generate(targets[seed][0], 50_000, seed=[seed, 200])
        refined = extraction.mh_subsample(prov, clf, real, MhConfig(K=200, N=50_000), seed=seed)
        gains.append(worlds.high_quality_fraction(refined, WORLD) - worlds.high_quality_fraction(direct, WORLD))
    good = sum(g >= 0.003 for g in gains)
    ok = report_criterion(2, good >= 4, f"HQ gain (pp) {pretty(100 * np.array(gains), 2)} ({good}/5 >= 0.3)")
    assert ok


# -- 3 ---------------------------------------------------------------------

def test_criterion_03_query_count_monotonicity(black_box_runs, report_criterion):
    rhos, accs = [], []
    for seed in SEEDS:
        acc = [black_box_runs[seed, b].report.accuracy for b in BUDGETS]
        accs.append(pretty(acc))
        rhos.append(stats.spearmanr(BUDGETS, acc)[0])
    good = sum(r == -1.0 for r in rhos)
    ok = report_criterion(3, good >= 4, f"spearman {pretty(rhos, 2)} ({good}/5 == -1); accuracy per seed "
                                        + "; ".join(accs))
    assert ok


# -- 4 ---------------------------------------------------------------------

def test_criterion_04_partial_real_data(targets, judges, black_box_runs, report_criterion):
    decreasing, first_step, rows = 0, 0, []
    for seed in SEEDS:
        base = black_box_runs[seed, 50_000]
        fid = [base.report.fidelity]
        for f in FRACTIONS:
            prov = provider_for(targets, seed, capability=Capability.partial_black_box(max(FRACTIONS)))
            run = extraction.run_partial_black_box(prov, 50_000, f, attack_config(seed), judges[seed], base=base)
            fid.append(run.report.fidelity)
        decreasing += all(a > b for a, b in zip(fid, fid[1:]))
        first_step += fid[1] < fid[0]
        rows.append(pretty(fid))
    ok = report_criterion(4, decreasing >= 4 and first_step == 5,
                          f"strictly decreasing {decreasing}/5, fid(10%)<fid(0%) {first_step}/5; fidelity at "
                          f"0/10/20/30% " + "; ".join(rows))
    assert ok


# -- 5 ---------------------------------------------------------------------

def test_criterion_05_prior_robustness(targets, judges, black_box_runs, report_criterion):
    rel = []
    for seed in SEEDS:
        normal = black_box_runs[seed, 50_000].report.accuracy
        prov = provider_for(targets, seed, capability=Capability.latent())
        uniform = extraction.run_black_box_accuracy(prov, 50_000, attack_config(seed), judges[seed],
                                                    prior_codes=LatentPrior("uniform", 2, -1.0, 1.0))
        u = uniform.report.accuracy
        rel.append(abs(normal - u) / min(normal, u))
    good = sum(r <= 0.25 for r in rel)
    ok = report_criterion(5, good == 5, f"relative accuracy gap normal vs uniform {pretty(rel, 2)} ({good}/5 <= 0.25)")
    assert ok


# -- 6 ---------------------------------------------------------------------

def test_criterion_06_defense_efficacy(targets, judges, black_box_runs, report_criterion):
    wins = {}
    details = []
    for name, policy in (("linear_interp", DefensePolicy("linear_interp", k=9)),
                         ("gaussian_noise", DefensePolicy("gaussian_noise", variance=0.001))):
        wins[name] = 0
        for seed in SEEDS:
            base = black_box_runs[seed, 50_000].report.fidelity
            prov = provider_for(targets, seed, defense=policy)
            run = extraction.run_black_box_accuracy(prov, 50_000, attack_config(seed), judges[seed])
            wins[name] += run.report.fidelity > base
            details.append(f"{name}[{seed}] {run.report.fidelity:.4f} vs {base:.4f}")
    ok = report_criterion(6, all(w >= 4 for w in wins.values()), f"defended fidelity worse in {wins}; "
                                                                   + "; ".join(details))
    assert ok


# -- 7 ---------------------------------------------------------------------

def test_criterion_07_transfer_learning(black_box_runs, report_criterion):
    good, rows = 0, []
    for seed in SEEDS:
        extracted = black_box_runs[seed, 50_000].model
        rec = extraction.transfer_learning_study(extracted, worlds.shifted_grid25(), TRANSFER.replace(seed=seed),
                                                 seed=seed)
        good += rec.final_finetune < rec.final_scratch
        rows.append(f"{rec.final_finetune:.4f} vs {rec.final_scratch:.4f}")
    ok = report_criterion(7, good >= 4, f"fine-tune < scratch in {good}/5; final Frechet " + "; ".join(rows))
    assert ok


# -- 8 ---------------------------------------------------------------------

def brute_force_frechet(mu_a, cov_a, mu_b, cov_b):
    vals, vecs = np.linalg.eig(cov_a @ cov_b)
    root = vecs @ np.diag(np.sqrt(vals.astype(complex))) @ np.linalg.inv(vecs)
    diff = mu_a - mu_b
    return float(np.real(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * np.trace(root)))


def direct_js(p, q):
    total = 0.0
    for a, b in zip(p, q):
        m = (a + b) / 2
        total += (0.5 * a * math.log(a / m) if a > 0 else 0.0) + (0.5 * b * math.log(b / m) if b > 0 else 0.0)
    return total


def test_criterion_08_metric_oracles(report_criterion):
    rng = np.random.default_rng(8)
    worst_fd = 0.0
    for _ in range(1000):
        dim = int(rng.integers(1, 6))
        mats = [rng.normal(size=(dim, dim)) for _ in range(2)]
        cov_a, cov_b = (m @ m.T + 1e-3 * np.eye(dim) for m in mats)
        mu_a, mu_b = rng.normal(size=dim), rng.normal(size=dim)
        got = metrics.frechet_distance(GaussianMoments(mu_a, cov_a), GaussianMoments(mu_b, cov_b))
        want = brute_force_frechet(mu_a, cov_a, mu_b, cov_b)
        worst_fd = max(worst_fd, abs(got - want) / max(abs(want), 1e-300))
    worst_js = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 40))
        p, q = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
        want = direct_js(p, q)
        worst_js = max(worst_js, abs(metrics.js_divergence(p, q) - want) / want)
    worst_closed = 0.0
    for _ in range(200):
        dim = int(rng.integers(1, 6))
        mu_a, mu_b = rng.normal(size=dim), rng.normal(size=dim)
        point = metrics.frechet_distance(GaussianMoments(mu_a, np.zeros((dim, dim))),
                                         GaussianMoments(mu_b, np.zeros((dim, dim))))
        worst_closed = max(worst_closed, abs(point - np.sum((mu_a - mu_b) ** 2)))
        s_a, s_b = rng.uniform(0.1, 3, size=2)
        iso = metrics.frechet_distance(GaussianMoments(mu_a, s_a ** 2 * np.eye(dim)),
                                       GaussianMoments(mu_a, s_b ** 2 * np.eye(dim)))
        worst_closed = max(worst_closed, abs(iso - dim * (s_a - s_b) ** 2))
    ok = report_criterion(8, worst_fd <= 1e-8 and worst_js <= 1e-12 and worst_closed <= 1e-10,
                          f"Frechet rel err {worst_fd:.2e}, JS rel err {worst_js:.2e}, closed-form abs err "
                          f"{worst_closed:.2e}")
    assert ok


# -- 9 ---------------------------------------------------------------------

def _probes(params, n, rng):
    arrays = params.arrays()
    sizes = np.array([a.size for a in arrays])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for flat in rng.choice(sizes.sum(), size=n, replace=False):
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        yield arrays[i], np.unravel_index(flat - offsets[i], arrays[i].shape), i


def _worst_gradient_error(loss, grads, params, rng):
    worst = 0.0
    for arr, idx, i in _probes(params, 100, rng):
        fd = central_difference(loss, arr, idx)
        an = grads.arrays()[i][idx]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


def test_criterion_09_gradient_checks(report_criterion):
    rng = np.random.default_rng(9)
    model = gan.init_model(TrainConfig(hidden=32, seed=9))
    for b in model.generator.biases + model.discriminator.biases:
        b[:] = rng.normal(scale=0.2, size=b.shape)
    real, fake, z = rng.normal(size=(64, 2)), rng.normal(size=(64, 2)), rng.normal(size=(64, 2))
    _, d_grads = gan.d_loss_grad(model, real, fake)
    _, g_grads = gan.g_loss_grad(model, z)
    d_err = _worst_gradient_error(lambda: gan.d_loss(model, real, fake), d_grads, model.discriminator, rng)
    g_err = _worst_gradient_error(lambda: gan.g_loss(model, z), g_grads, model.generator, rng)
    ok = report_criterion(9, d_err < 1e-4 and g_err < 1e-4, f"worst relative error D {d_err:.2e}, G {g_err:.2e}")
    assert ok


# -- 10 --------------------------------------------------------------------

class _FiniteProvider:
    def __init__(self, support, probs, seed):
        self.support, self.probs = np.asarray(support, float), np.asarray(probs, float)
        self.rng = np.random.default_rng(seed)
        self.ledger = QueryLedger()

    def query(self, n):
        self.ledger.charge(n)
        return SampleBatch(self.support[self.rng.choice(len(self.support), size=n, p=self.probs)],
                           Provenance.GENERATED)


def test_criterion_10_mh_correctness(report_criterion):
    target = gan.init_model(TrainConfig(hidden=32, seed=10))
    prov = TargetProvider(target, Capability.white_box(), seed=10)
    seeds = worlds.sample(WORLD, 1000, seed=10)
    n = 20_000
    flat = extraction.mh_subsample(prov, CalibratedClassifier(0.0, 0.0), seeds, MhConfig(K=5, N=n), seed=11)
    p_energy = energy_test(flat.points, gan.generate(target, n, seed=12).points, seed=13)

    support = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    q, r = np.array([0.5, 0.3, 0.2]), np.array([1.0, 2.0, 4.0])

    def ratio(x):
        out = np.full(len(x), 1e-9)
        for i, s in enumerate(support):
            out[np.all(x == s, axis=1)] = r[i]
        return out

    m = 100_000
    out = extraction.mh_subsample(_FiniteProvider(support, q, 14), None, np.array([[9.0, 9.0]]),
                                  MhConfig(K=30, N=m), seed=15, ratio_fn=ratio)
    counts = np.array([np.all(out.points == s, axis=1).sum() for s in support])
    pi = q * r / (q * r).sum()
    p_chi2 = stats.chisquare(counts, pi * m).pvalue
    ok = report_criterion(10, p_energy > 1e-3 and p_chi2 > 1e-3,
                          f"uniform-ratio energy test p={p_energy:.3f}, 3-state chi2 p={p_chi2:.3f}")
    assert ok


# -- 11 --------------------------------------------------------------------

def test_criterion_11_calibration_recovery(report_criterion):
    rng = np.random.default_rng(11)
    n = 10_000
    d = rng.normal(size=n)
    y = rng.uniform(size=n) < sigmoid(2 * d - 1)
    clf = extraction.calibrate(d[y], d[~y])
    p = sigmoid(2 * d - 1)
    design = np.column_stack([d, np.ones(n)])
    se = np.sqrt(np.diag(np.linalg.inv(design.T @ (design * (p * (1 - p))[:, None]))))
    z_a, z_b = abs(clf.slope - 2) / se[0], abs(clf.intercept + 1) / se[1]

    p_g = worlds.gaussian((0.0, 0.0), sigma=1.5)
    x = worlds.sample(WORLD, 100, seed=12).points
    d_star = worlds.optimal_discriminator(WORLD, p_g, x)
    ratio = extraction.density_ratio(CalibratedClassifier(1.0, 0.0), np.log(d_star) - np.log1p(-d_star))
    truth = worlds.density(WORLD, x) / worlds.density(p_g, x)
    worst = float(np.max(np.abs(ratio / truth - 1)))
    ok = report_criterion(11, z_a < 3 and z_b < 3 and worst < 0.05,
                          f"(a,b)=({clf.slope:.3f},{clf.intercept:.3f}) at {z_a:.2f}/{z_b:.2f} SE; "
                          f"worst ratio error {worst:.2e}")
    assert ok


# -- 12 --------------------------------------------------------------------

class _CountingProvider(TargetProvider):
    """Counts every latent code that reaches the generator, independently of the ledger."""

    generated = 0
    violations = 0

    def _generate(self, codes):
        self.generated += len(codes)
        if self.ledger.budget is not None and self.ledger.used > self.ledger.budget:
            self.violations += 1
        return super()._generate(codes)


def test_criterion_12_ledger_integrity(targets, report_criterion):
    model, corpus, _ = targets[0]
    world_judge = metrics.Judge(model, WORLD, n=5000, seed=0, k=None)
    cfg = AttackConfig(TrainConfig(steps=300, seed=0), select_every=100, phase2_steps=100)
    results = []
    runs = (
        ("black_box", 20_000, lambda p: extraction.run_black_box_accuracy(p, 20_000, cfg, world_judge)),
        ("partial", 20_000, lambda p: extraction.run_partial_black_box(p, 20_000, 0.1, cfg, world_judge)),
        ("white_box", 200_000, lambda p: extraction.run_white_box(p, 200_000, cfg, world_judge,
                                                                    mh=MhConfig(K=20, N=5000))),
    )
    for name, budget, run_fn in runs:
        prov = _CountingProvider(model, Capability.white_box(0.1), budget=budget, corpus=corpus, seed=0)
        run = run_fn(prov)
        trace_ok = all(u <= budget for u in run.extra["ledger_trace"])
        consistent = prov.generated == prov.ledger.used == run.queries == run.report.queries
        results.append((name, trace_ok and consistent and prov.violations == 0, prov.generated, run.queries))
    ok = report_criterion(12, all(r[1] for r in results),
                          "; ".join(f"{n}: generated {g}, reported {q}" for n, _, g, q in results))
    assert ok
