"""Model-extraction pipelines against a GAN provider.

Three scenarios are covered: black-box accuracy extraction (retrain on
queried samples), partial black-box fidelity extraction (continue training
after mixing in leaked real data) and white-box fidelity extraction
(Metropolis-Hastings refinement of queried samples with the calibrated
target discriminator). A transfer-learning harness measures how useful an
extracted generator is as a warm start on a new distribution.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .gan import ConfigError, GanModel, TrainConfig, generate, init_model, train
from .metrics import AttackReport, Judge, frechet_distance, moments
from .nnet import sigmoid
from .provider import QueryLedger
from .worlds import MixtureSpec, Provenance, SampleBatch, as_points
from .worlds import sample as sample_world

log = logging.getLogger(__name__)

RATIO_CLAMP = 1e-7


# -- calibration -----------------------------------------------------------

@dataclass(frozen=True)
class CalibratedClassifier:
    """``C(d) = sigmoid(slope * d + intercept)`` over raw discriminator logits."""

    slope: float
    intercept: float
    degenerate: bool = False

    def __call__(self, d):
        return sigmoid(self.slope * np.asarray(d, dtype=float) + self.intercept)

    def density_ratio(self, d):
        return density_ratio(self, d)


def _logistic_objective(params, d, y, l2):
    a, b = params
    z = a * d + b
    p = sigmoid(z)
    # log(1 + e^z) - y z, written stably
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * a * a
    r = p - y
    grad = np.array([np.mean(r * d) + l2 * a, np.mean(r)])
    w = p * (1.0 - p)
    hess = np.array([[np.mean(w * d * d) + l2, np.mean(w * d)], [np.mean(w * d), np.mean(w)]])
    return loss, grad, hess


def calibrate(d_real, d_fake, tol: float = 1e-8, max_iter: int = 200, l2: float = 1e-6) -> CalibratedClassifier:
    """Fit a 1-D logistic regression separating real (label 1) from generated logits.

    A tiny ridge on the slope keeps the fit finite when the two groups are
    perfectly separated; the boundary then sits in the middle of the gap.
    """
    d_real = np.asarray(d_real, dtype=float).ravel()
    d_fake = np.asarray(d_fake, dtype=float).ravel()
    if len(d_real) < 2 or len(d_fake) < 2:
        raise ValueError("calibration needs at least two logits per class")
    d = np.concatenate([d_real, d_fake])
    y = np.concatenate([np.ones(len(d_real)), np.zeros(len(d_fake))])
    if np.ptp(d) == 0:
        return CalibratedClassifier(0.0, float(np.log(len(d_real) / len(d_fake))), degenerate=True)
    # work on standardized scores, map back at the end
    center, scale = d.mean(), d.std()
    ds = (d - center) / scale
    l2s = l2 * scale * scale
    params = np.array([0.0, float(np.log(len(d_real) / len(d_fake)))])
    loss, grad, hess = _logistic_objective(params, ds, y, l2s)
    for _ in range(max_iter):
        if np.linalg.norm(grad) < tol:
            break
        step = np.linalg.solve(hess + 1e-12 * np.eye(2), grad)
        t = 1.0
        while True:
            cand = params - t * step
            c_loss, c_grad, c_hess = _logistic_objective(cand, ds, y, l2s)
            if c_loss <= loss - 1e-4 * t * grad @ step or t < 1e-10:
                break
            t *= 0.5
        params, loss, grad, hess = cand, c_loss, c_grad, c_hess
    a = params[0] / scale
    b = params[1] - a * center
    return CalibratedClassifier(float(a), float(b))


def density_ratio(clf: CalibratedClassifier, d_logit):
    """Odds ``C / (1 - C)`` of the calibrated probability, clamped to ``[1e-7, 1e7]``-ish."""
    c = np.clip(clf(d_logit), RATIO_CLAMP, 1.0 - RATIO_CLAMP)
    out = c / (1.0 - c)
    return float(out) if np.ndim(out) == 0 else out


# -- metering --------------------------------------------------------------

class MeteredProvider:
    """Client-side budget guard; every generator call is charged before it is forwarded."""

    def __init__(self, provider, budget: int | None):
        self.provider = provider
        self.ledger = QueryLedger(budget)
        self.trace = []

    def _charge(self, n):
        self.ledger.charge(n)
        self.trace.append(self.ledger.used)

    def query(self, n: int) -> SampleBatch:
        self._charge(n)
        return self.provider.query(n)

    def query_with_codes(self, codes) -> SampleBatch:
        codes = np.atleast_2d(np.asarray(codes, dtype=float))
        self._charge(len(codes) if codes.size else 0)
        return self.provider.query_with_codes(codes)

    def real_data(self, fraction):
        return self.provider.real_data(fraction)

    def discriminator_logit(self, x):
        return self.provider.discriminator_logit(x)


# -- Metropolis-Hastings subsampling ---------------------------------------

@dataclass(frozen=True)
class MhConfig:
    K: int = 200
    N: int = 50_000
    m: int | None = None
    max_chains: int | None = None

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if self.N < 1:
            raise ConfigError("N must be at least 1")
        if self.m is not None and self.m < 2:
            raise ConfigError("calibration set size m must be at least 2")


class MhIncomplete(RuntimeError):
    """The chain restart cap was hit before enough refined samples were collected."""

    def __init__(self, samples: SampleBatch, chains: int):
        super().__init__(f"only {len(samples)} refined samples after {chains} chains")
        self.samples = samples
        self.chains = chains


def mh_subsample(provider, clf: CalibratedClassifier, real_seeds, cfg: MhConfig, seed=0,
                 ratio_fn=None) -> SampleBatch:
    """Independent Metropolis-Hastings chains started from real samples.

    Each chain makes ``K`` generator proposals, accepting ``x'`` with
    probability ``min(1, r(x') / r(x))``. A chain's final state is kept only
    if at least one proposal was accepted. Chains run in vectorized rounds
    until ``N`` samples exist or ``max_chains`` (default ``100 * N``) chains
    have been started. ``ratio_fn(points)`` overrides the discriminator-based
    ratio (used with analytic oracles).
    """
    seeds = as_points(real_seeds)
    if len(seeds) == 0:
        raise ValueError("MH subsampling needs at least one real seed")
    if ratio_fn is None:
        def ratio_fn(x):
            return density_ratio(clf, provider.discriminator_logit(x))
    rng = np.random.default_rng(seed)
    max_chains = cfg.max_chains if cfg.max_chains is not None else 100 * cfg.N
    kept, collected, started = [], 0, 0
    while collected < cfg.N:
        n_chains = min(cfg.N - collected, max_chains - started)
        if n_chains <= 0:
            raise MhIncomplete(SampleBatch(np.vstack(kept) if kept else np.empty((0, seeds.shape[1])),
                                           Provenance.REFINED), started)
        started += n_chains
        x = seeds[rng.integers(len(seeds), size=n_chains)].copy()
        r_x = np.asarray(ratio_fn(x), dtype=float)
        still_real = np.ones(n_chains, dtype=bool)
        for _ in range(cfg.K):
            proposal = as_points(provider.query(n_chains))
            r_p = np.asarray(ratio_fn(proposal), dtype=float)
            u = rng.uniform(size=n_chains)
            accept = u <= np.minimum(1.0, r_p / r_x)
            x[accept] = proposal[accept]
            r_x[accept] = r_p[accept]
            still_real &= ~accept
        kept.append(x[~still_real])
        collected += int((~still_real).sum())
    return SampleBatch(np.vstack(kept)[: cfg.N], Provenance.REFINED)


# -- model selection -------------------------------------------------------

def model_selection_checkpoint(history) -> int:
    """Index of the entry with the lowest accuracy value; earliest wins ties.

    ``history`` holds ``(accuracy, fidelity)`` pairs or objects with an
    ``accuracy`` attribute. Fidelity is never consulted.
    """
    if len(history) == 0:
        raise ValueError("history is empty")
    values = [h.accuracy if hasattr(h, "accuracy") else h[0] for h in history]
    return int(np.argmin(values))


@dataclass
class Checkpoint:
    step: int
    accuracy: float
    fidelity: float
    model: GanModel = field(repr=False)


class _Selector:
    """Scores every checkpoint the training loop reports (every ``log_every`` steps and the last step)."""

    def __init__(self, judge: Judge):
        self.judge = judge
        self.checkpoints: list[Checkpoint] = []

    def __call__(self, step, model):
        acc, fid, _ = self.judge.accuracy_and_fidelity(model)
        self.checkpoints.append(Checkpoint(step, acc, fid, model.copy()))

    def choose(self, final: GanModel) -> tuple[GanModel, int | None]:
        if not self.checkpoints:
            return final, None
        best = self.checkpoints[model_selection_checkpoint(self.checkpoints)]
        return best.model, best.step


# -- pipelines -------------------------------------------------------------

@dataclass
class AttackConfig:
    """Attack-side training setup shared by the pipelines.

    ``select_every`` enables checkpoint selection by lowest accuracy; the
    selected checkpoint is the one reported. The continuation phase (after
    real data is added) starts from that checkpoint and runs ``phase2_steps``
    steps (default ``train.steps``) from ``phase2_lr`` (default ``train.lr``);
    Adam moments carry over. Its final checkpoint is reported unless
    ``phase2_select`` is set, in which case the lowest-accuracy checkpoint of
    the continuation is reported instead.
    """

    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=5000))
    phase2_steps: int | None = None
    select_every: int | None = 500
    phase2_lr: float | None = None
    phase2_select: bool = False

    def phase2(self) -> TrainConfig:
        return self.train.replace(steps=self.train.steps if self.phase2_steps is None else self.phase2_steps,
                                  lr=self.train.lr if self.phase2_lr is None else self.phase2_lr)

    def to_dict(self) -> dict:
        return {"train": asdict(self.train), "phase2_steps": self.phase2_steps,
                "select_every": self.select_every, "phase2_lr": self.phase2_lr, "phase2_select": self.phase2_select}

    @classmethod
    def from_dict(cls, data: dict) -> "AttackConfig":
        return cls(TrainConfig(**data.get("train", {})), data.get("phase2_steps"),
                   data.get("select_every", 500), data.get("phase2_lr"), data.get("phase2_select", False))


@dataclass
class ExtractionRun:
    scenario: str
    budget: int | None
    real_fraction: float
    report: AttackReport
    model: GanModel = field(repr=False)
    queries: int = 0
    selected_step: int | None = None
    extra: dict = field(default_factory=dict)


def _check_train_budget(budget, config: AttackConfig):
    if budget is None or budget < config.train.batch_size:
        raise ConfigError(f"budget {budget} is smaller than the attack batch size {config.train.batch_size}")


def _train_and_select(data, config: AttackConfig, judge: Judge, init=None, phase2=False):
    base = config.phase2() if phase2 else config.train
    cfg = base.replace(seed=base.seed + int(phase2))
    if not config.select_every or (phase2 and not config.phase2_select):
        model = train(data, cfg, init=init)
        return model, model, None
    selector = _Selector(judge)
    model = train(data, cfg.replace(log_every=config.select_every), init=init, callback=selector)
    chosen, step = selector.choose(model)
    return model, chosen, step


def run_black_box_accuracy(provider, budget: int, config: AttackConfig, judge: Judge,
                           prior_codes=None) -> ExtractionRun:
    """Query ``budget`` samples once and retrain a GAN on them.

    With ``prior_codes`` (an attacker-chosen prior) the samples come from
    latent-code queries instead of plain generation.
    """
    _check_train_budget(budget, config)
    metered = MeteredProvider(provider, budget)
    if prior_codes is None:
        data = metered.query(budget)
    else:
        codes = prior_codes.sample(budget, np.random.default_rng([config.train.seed, 53]))
        data = metered.query_with_codes(codes)
    final, chosen, step = _train_and_select(data, config, judge)
    report = judge.report(chosen, metered.ledger.used)
    return ExtractionRun("black_box_accuracy", budget, 0.0, report, chosen, metered.ledger.used, step,
                         {"final_model": final, "ledger_trace": metered.trace, "data": data})


def run_partial_black_box(provider, budget: int, real_fraction: float, config: AttackConfig,
                          judge: Judge, base: ExtractionRun | None = None) -> ExtractionRun:
    """Black-box extraction, then continued training on generated plus leaked real data.

    ``base`` reuses an earlier black-box run (same provider seed and config)
    as the first phase instead of querying again.
    """
    if base is None:
        base = run_black_box_accuracy(provider, budget, config, judge)
    else:
        base = ExtractionRun(**{**base.__dict__, "extra": dict(base.extra)})
    if real_fraction == 0:
        base.scenario = "partial_black_box"
        return base
    real = provider.real_data(real_fraction)
    mixed = base.extra["data"].concat(real)
    final, chosen, step = _train_and_select(mixed, config, judge, init=base.model, phase2=True)
    report = judge.report(chosen, base.queries)
    return ExtractionRun("partial_black_box", budget, real_fraction, report, chosen, base.queries, step,
                         {"final_model": final, "phase1_report": base.report,
                          "ledger_trace": base.extra["ledger_trace"], "real_count": len(real)})


def run_white_box(provider, budget: int | None, config: AttackConfig, judge: Judge,
                  mh: MhConfig = MhConfig(), real_fraction: float = 0.1, seed=0) -> ExtractionRun:
    """Calibrate the target discriminator, MH-refine queried samples, train, then add real data.

    The report describes the final (white-box) model; the refined-only
    model's report is kept under ``extra["mh_report"]``.
    """
    if real_fraction <= 0:
        raise ConfigError("white-box extraction needs some real data for calibration")
    metered = MeteredProvider(provider, budget)
    real = metered.real_data(real_fraction)
    m = mh.m if mh.m is not None else len(real)
    if m < 2 or len(real) < 2:
        raise ConfigError("not enough real samples to calibrate the discriminator")
    calib_real = real.points[:m]
    fake = metered.query(m)
    clf = calibrate(metered.discriminator_logit(calib_real), metered.discriminator_logit(fake.points))
    refined = mh_subsample(metered, clf, real, mh, seed=seed)
    if len(refined) < config.train.batch_size:
        raise ConfigError("too few refined samples to train on")
    _, mh_chosen, mh_step = _train_and_select(refined, config, judge)
    mh_report = judge.report(mh_chosen, metered.ledger.used)
    final, chosen, step = _train_and_select(refined.concat(real), config, judge, init=mh_chosen, phase2=True)
    report = judge.report(chosen, metered.ledger.used)
    return ExtractionRun("white_box", budget, real_fraction, report, chosen, metered.ledger.used, step,
                         {"mh_report": mh_report, "mh_model": mh_chosen, "mh_selected_step": mh_step,
                          "calibrator": clf, "refined": refined, "ledger_trace": metered.trace,
                          "refined_count": len(refined)})


# -- transfer learning -----------------------------------------------------

@dataclass
class TransferRecord:
    steps: list
    finetune: list
    scratch: list

    @property
    def final_finetune(self) -> float:
        return self.finetune[-1]

    @property
    def final_scratch(self) -> float:
        return self.scratch[-1]


def transfer_learning_study(extracted: GanModel, new_world: MixtureSpec, config: TrainConfig,
                            data_size: int = 50_000, eval_n: int = 20_000, eval_every: int = 500,
                            seed=0) -> TransferRecord:
    """Fine-tune ``extracted`` on ``new_world`` next to an identically seeded from-scratch run."""
    data = sample_world(new_world, data_size, seed=[seed, 11])
    ref = moments(sample_world(new_world, eval_n, seed=[seed, 12]))

    def score(model):
        return frechet_distance(moments(generate(model, eval_n, seed=[seed, 13])), ref)

    traces = {}
    for name, init in (("finetune", extracted), ("scratch", None)):
        start = init if init is not None else init_model(config, extracted.prior)
        trace = [(0, score(start))]

        def cb(step, model, trace=trace):
            if step % eval_every == 0 or step == config.steps:
                trace.append((step, score(model)))

        if config.steps > 0:
            fresh = start.copy()
            fresh.history = []
            train(data, config.replace(log_every=min(eval_every, config.steps)), init=fresh,
                  keep_optimizer=False, callback=cb)
        traces[name] = trace
    steps = [s for s, _ in traces["finetune"]]
    return TransferRecord(steps, [v for _, v in traces["finetune"]], [v for _, v in traces["scratch"]])
