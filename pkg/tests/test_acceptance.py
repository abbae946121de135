"""End-to-end acceptance gate: eight numbered checks, one test per check.

Run with ``pytest -v tests/test_acceptance.py`` — each check reports exactly
one PASSED/FAILED line.  The checks, in order:

1. lattice log-likelihood == brute-force path enumeration (1000 instances)
2. analytic gradients == central finite differences (>= 100 instances)
3. closed-form Gaussian KL == quadrature (1e-6) and Monte Carlo (3 sigma)
4. the variational objective lower-bounds the marginal label likelihood
5. degenerate configurations reduce the variational losses to plain CTC
   exactly (and the chain objective to the frame-independent one)
6. decoder invariants: monotone emission frames, exhaustive beam == MAP,
   score monotone in beam width
7. desk-scale training trends across the five model variants (frozen seeds)
8. bitwise-deterministic training metrics under fixed seeds

Check 7 trains real models and dominates the runtime (several minutes of
CPU); everything else is fast.  The training fixture config below is frozen:
the error-rate threshold and the trend comparisons were calibrated once
against the linear baseline and must not be retuned per run.
"""

from __future__ import annotations

import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import param_central_diff, rel_err, tiny_model
from vctc.autodiff import Tensor, backward, log_softmax
from vctc.ctc import (
    NEG_INF,
    brute_force_log_likelihood,
    collapse,
    ctc_log_likelihood,
    ctc_loss_node,
)
from vctc.decoding import BeamConfig, beam_search_decode, best_path_decode
from vctc.harness.data import SyntheticTaskSpec, generate_dataset
from vctc.harness.oracles import (
    closed_form_kl,
    gauss_hermite_kl_1d,
    monte_carlo_kl,
    run_ctc_oracle_suite,
)
from vctc.harness.training import TrainConfig, TrainData, mean_pass_error_rate, train
from vctc.losses import loss_ci, loss_ctc, loss_markov
from vctc.models import Variant, forward, frame_log_probs_given_z, sequence_loss
from vctc.numerics import Rng
from vctc.variational import DiagGaussian, kl_diag_gauss


# --------------------------------------------------------------------------
# 1. lattice likelihood vs enumeration
# --------------------------------------------------------------------------


def test_criterion_1_lattice_matches_enumeration_on_1000_instances():
    t0 = time.perf_counter()
    outcome = run_ctc_oracle_suite(n_instances=1000, seed=2024)
    elapsed = time.perf_counter() - t0
    print(f"\n  {outcome.line()}  [{elapsed:.2f}s]")
    assert outcome.worst <= 1e-9
    assert elapsed < 5.0


# --------------------------------------------------------------------------
# 2. analytic gradients vs central finite differences
# --------------------------------------------------------------------------


def _random_feasible_ctc_instance(rng: np.random.Generator):
    while True:
        T = int(rng.integers(2, 6))
        K = int(rng.integers(2, 4))
        U = int(rng.integers(0, min(T, 3) + 1))
        y = rng.integers(0, K - 1, size=U).tolist()
        logits = rng.standard_normal((T, K))
        lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        if ctc_log_likelihood(lp, y) > NEG_INF:
            return logits, y


def test_criterion_2_gradients_match_central_differences():
    h = 1e-5
    worst = 0.0
    n_checked = 0
    rng = np.random.default_rng(811)

    # (a) alignment-likelihood gradient through the softmax, 40 instances
    for _ in range(40):
        logits, y = _random_feasible_ctc_instance(rng)

        def value(x):
            lp = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
            return ctc_log_likelihood(lp, y)

        t = Tensor(logits.copy(), requires_grad=True)
        backward(ctc_loss_node(log_softmax(t, axis=-1), y))
        got = t.grad
        want = _central_diff_array(value, logits, h)
        worst = max(worst, rel_err(got, want))
        n_checked += 1

    # (b) closed-form divergence gradient w.r.t. all four inputs, 40 instances
    for _ in range(40):
        d = int(rng.integers(1, 5))
        packed = rng.uniform(-1.5, 1.5, size=4 * d)

        def kl_value(v):
            mu_q, lv_q, mu_p, lv_p = v.reshape(4, d)
            return kl_diag_gauss(DiagGaussian(mu_q, lv_q), DiagGaussian(mu_p, lv_p)).item()

        mu_q = Tensor(packed[:d].copy(), requires_grad=True)
        lv_q = Tensor(packed[d : 2 * d].copy(), requires_grad=True)
        mu_p = Tensor(packed[2 * d : 3 * d].copy(), requires_grad=True)
        lv_p = Tensor(packed[3 * d :].copy(), requires_grad=True)
        backward(kl_diag_gauss(DiagGaussian(mu_q, lv_q), DiagGaussian(mu_p, lv_p)))
        got = np.concatenate([mu_q.grad, lv_q.grad, mu_p.grad, lv_p.grad])
        want = _central_diff_array(kl_value, packed, h)
        worst = max(worst, rel_err(got, want))
        n_checked += 1

    # (c) full-model parameter gradients for the three variational variants,
    # 10 fresh instances each (the latent draw is frozen by replaying the rng)
    for variant in (Variant.CI, Variant.MD, Variant.MA):
        for i in range(10):
            cfg, params = tiny_model(variant, seed=100 + i, vocab_size=2, d_in=2, d_z=2, d_hidden=3)
            T = int(rng.integers(2, 5))
            X = rng.standard_normal((T, cfg.d_in))
            y = [int(rng.integers(0, 2))] if T > 1 else []
            draw = 1000 + i

            def value():
                return sequence_loss(cfg, params, X, y, rng=Rng(draw)).total.item()

            out = sequence_loss(cfg, params, X, y, rng=Rng(draw))
            backward(out.total)
            got = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                   for n, t in params.items()}
            want = param_central_diff(value, params, h)
            for name in want:
                worst = max(worst, rel_err(got[name], want[name]))
            n_checked += 1

    print(f"\n  [{'PASS' if worst <= 1e-4 else 'FAIL'}] gradient suite: "
          f"worst rel err {worst:.3e} over {n_checked} instances (tol 1e-4)")
    assert n_checked >= 100
    assert worst <= 1e-4


def _central_diff_array(f, x: np.ndarray, h: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat_x, flat_g = x.reshape(-1), g.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        up = f(x)
        flat_x[i] = orig - h
        down = f(x)
        flat_x[i] = orig
        flat_g[i] = (up - down) / (2.0 * h)
    return g


# --------------------------------------------------------------------------
# 3. closed-form KL vs quadrature and Monte Carlo
# --------------------------------------------------------------------------


def test_criterion_3_kl_matches_quadrature_and_monte_carlo():
    rng = np.random.default_rng(37)
    worst_quad = 0.0
    for _ in range(200):
        mu_q, mu_p = rng.uniform(-3, 3, 2)
        lv_q, lv_p = rng.uniform(-2, 2, 2)
        closed = closed_form_kl(mu_q, lv_q, mu_p, lv_p)
        quad = gauss_hermite_kl_1d(float(mu_q), float(lv_q), float(mu_p), float(lv_p))
        worst_quad = max(worst_quad, abs(closed - quad))

    worst_sigma = 0.0
    for d in (1, 2, 4, 8):
        mu_q, mu_p = rng.uniform(-2, 2, (2, d))
        lv_q, lv_p = rng.uniform(-1.5, 1.5, (2, d))
        closed = closed_form_kl(mu_q, lv_q, mu_p, lv_p)
        est, se = monte_carlo_kl(mu_q, lv_q, mu_p, lv_p, n=1_000_000, rng=Rng(50 + d))
        worst_sigma = max(worst_sigma, abs(closed - est) / se)

    ok = worst_quad <= 1e-6 and worst_sigma <= 3.0
    print(f"\n  [{'PASS' if ok else 'FAIL'}] KL: quadrature dev {worst_quad:.2e} "
          f"(tol 1e-6), MC dev {worst_sigma:.2f} sigma (tol 3)")
    assert worst_quad <= 1e-6
    assert worst_sigma <= 3.0


# --------------------------------------------------------------------------
# 4. the objective lower-bounds the marginal label likelihood
# --------------------------------------------------------------------------


def test_criterion_4_objective_is_a_lower_bound_on_marginal_likelihood():
    """Importance sampling with the posterior as proposal:

        log w_i = log p(y | z_i, X) + log p(z_i) - log q(z_i),  z_i ~ q

    mean(log w) estimates the bound; LSE(log w) - log N estimates the true
    log-marginal.  The bound estimate must not exceed the marginal estimate
    by more than the combined Monte Carlo noise.
    """
    cfg, params = tiny_model(Variant.CI, seed=5, vocab_size=2, d_in=3, d_z=2, d_hidden=4)
    data_rng = np.random.default_rng(6)
    X = data_rng.standard_normal((4, cfg.d_in))
    y = [0, 1]

    out = forward(cfg, params, X, rng=Rng(0))  # only q/prior params are used
    q_mu = np.stack([q.mu.data for q in out.q_seq])
    q_lv = np.stack([q.log_var.data for q in out.q_seq])
    p_seq = out.prior_seq

    N = 10_000
    eps = np.random.default_rng(99).standard_normal((N, *q_mu.shape))
    z_samples = q_mu + np.exp(0.5 * q_lv) * eps

    log_w = np.empty(N)
    log_cond = np.empty(N)
    for i in range(N):
        z = z_samples[i]
        lp = frame_log_probs_given_z(cfg, params, X, z)
        cond = ctc_log_likelihood(lp, y)
        log_q = sum(q.log_density(z[t]) for t, q in enumerate(out.q_seq))
        log_p = sum(p.log_density(z[t]) for t, p in enumerate(p_seq))
        log_cond[i] = cond
        log_w[i] = cond + log_p - log_q

    bound_est = float(log_w.mean())
    bound_se = float(log_w.std(ddof=1) / math.sqrt(N))

    shift = log_w.max()
    w_tilde = np.exp(log_w - shift)
    marginal_est = shift + math.log(w_tilde.mean())
    # delta method: se of log-mean-exp is se(w~) / mean(w~)
    marginal_se = float(w_tilde.std(ddof=1) / (w_tilde.mean() * math.sqrt(N)))

    # the analytic objective value (sampling only the reconstruction term)
    kl_total = sum(
        kl_diag_gauss(q, p).item() for q, p in zip(out.q_seq, p_seq)
    )
    loss_est = float(log_cond.mean()) - kl_total
    loss_se = float(log_cond.std(ddof=1) / math.sqrt(N))

    slack = 3.0 * (marginal_se + max(bound_se, loss_se))
    ok = loss_est <= marginal_est + slack and bound_est <= marginal_est + slack
    print(f"\n  [{'PASS' if ok else 'FAIL'}] bound {loss_est:.4f} (se {loss_se:.4f}) "
          f"<= marginal {marginal_est:.4f} (se {marginal_se:.4f}) over {N} samples")
    assert bound_est <= marginal_est + slack
    assert loss_est <= marginal_est + slack
    # and the bound is genuinely below (not merely within noise of) the
    # marginal for this non-degenerate model
    assert loss_est < marginal_est


# --------------------------------------------------------------------------
# 5. degenerate reductions are exact
# --------------------------------------------------------------------------


def test_criterion_5_degenerate_reductions_are_exact():
    cfg, params = tiny_model(Variant.CI, seed=21, vocab_size=2, d_in=3, d_z=2, d_hidden=4)
    # tie the prior head to the posterior head so q == p frame by frame
    for part in ("mu", "logvar"):
        params[f"p_{part}/weight"].data[...] = params[f"q_{part}/weight"].data
        params[f"p_{part}/bias"].data[...] = params[f"q_{part}/bias"].data

    X = np.random.default_rng(3).standard_normal((5, cfg.d_in))
    y = [0, 1]
    out = forward(cfg, params, X, rng=Rng(77))
    flp = out.frame_log_probs
    blank = cfg.vocab.blank_index

    plain = loss_ctc(flp, y, blank).total.item()
    ci = loss_ci(flp, y, out.q_seq, out.prior_seq, 1.0, blank).total.item()
    markov = loss_markov(flp, y, out.q_seq, out.prior_seq, Rng(5), 1.0, 1, blank).total.item()

    diff_ci = abs(ci - plain)
    diff_markov = abs(markov - plain)

    # z-independent priors: the chain objective must equal the
    # frame-independent one exactly, now with q != p
    cfg2, params2 = tiny_model(Variant.CI, seed=22, vocab_size=2, d_in=3, d_z=2, d_hidden=4)
    out2 = forward(cfg2, params2, X, rng=Rng(78))
    ci2 = loss_ci(out2.frame_log_probs, y, out2.q_seq, out2.prior_seq, 1.0, blank).total.item()
    markov2 = loss_markov(
        out2.frame_log_probs, y, out2.q_seq, out2.prior_seq, Rng(6), 1.0, 1, blank
    ).total.item()
    diff_chain = abs(markov2 - ci2)

    ok = diff_ci <= 1e-12 and diff_markov <= 1e-12 and diff_chain == 0.0
    print(f"\n  [{'PASS' if ok else 'FAIL'}] reductions: |ci-ctc| {diff_ci:.1e}, "
          f"|chain-ctc| {diff_markov:.1e} (tol 1e-12), |chain-ci| {diff_chain:.1e} (exact)")
    assert diff_ci <= 1e-12
    assert diff_markov <= 1e-12
    assert diff_chain == 0.0


# --------------------------------------------------------------------------
# 6. decoder properties
# --------------------------------------------------------------------------


def _enumerate_map(lp: np.ndarray, blank: int):
    T, K = lp.shape
    best_y, best_score = None, -np.inf
    seen = set()
    for path in itertools.product(range(K), repeat=T):
        y = tuple(collapse(path, blank))
        if y in seen:
            continue
        seen.add(y)
        score = brute_force_log_likelihood(lp, list(y), blank)
        if score > best_score:
            best_y, best_score = y, score
    return list(best_y), best_score


def test_criterion_6_decoder_properties():
    rng = np.random.default_rng(4097)

    def random_lp(T, K):
        logits = 2.0 * rng.standard_normal((T, K))
        return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))

    # (a) emission frames nondecreasing on every decode we can produce
    for _ in range(50):
        lp = random_lp(int(rng.integers(2, 9)), int(rng.integers(2, 5)))
        for out in (
            best_path_decode(lp),
            beam_search_decode(lp, BeamConfig(beam_width=1)),
            beam_search_decode(lp, BeamConfig(beam_width=8)),
        ):
            assert len(out.emission_frames) == len(out.tokens)
            assert all(a <= b for a, b in zip(out.emission_frames, out.emission_frames[1:]))

    # (b) exhaustive beam equals brute-force MAP (T <= 4, two symbols + blank)
    worst_map_dev = 0.0
    for _ in range(25):
        T = int(rng.integers(1, 5))
        lp = random_lp(T, 3)
        out = beam_search_decode(lp, BeamConfig(beam_width=100_000))
        want_y, want_score = _enumerate_map(lp, blank=2)
        assert out.tokens == want_y
        worst_map_dev = max(worst_map_dev, abs(out.score - want_score))

    # (c) score monotone in beam width, and every pruned-width score is
    # bounded by the exhaustive one (a pruned beam can only lose path mass)
    for _ in range(10):
        lp = random_lp(6, 4)
        scores = [beam_search_decode(lp, BeamConfig(beam_width=w)).score for w in (1, 2, 4, 8, 32)]
        exhaustive = beam_search_decode(lp, BeamConfig(beam_width=100_000)).score
        for narrow, wide in zip(scores, scores[1:]):
            assert wide >= narrow - 1e-12
        for s in scores:
            assert s <= exhaustive + 1e-12

    print(f"\n  [PASS] decoder: frames monotone (50), beam == MAP (25, worst dev "
          f"{worst_map_dev:.1e}), width-monotone scores bounded by exhaustive (10)")


# --------------------------------------------------------------------------
# 7. desk-scale training trends (frozen config)
# --------------------------------------------------------------------------

TREND_TASK = dict(
    vocab_size=3,
    d_in=8,
    min_duration=2,
    max_duration=3,
    min_target_len=2,
    max_target_len=4,
    silence_min=0,
    silence_max=1,
    embedding_seed=777,
)
TREND_NOISE_TRAIN = 0.20
TREND_NOISE_TEST = 0.40
TREND_SEEDS = (0, 1, 2, 3, 4)
TREND_STEPS = 600
TREND_KL_WEIGHT = 2.0
TREND_TER_THRESHOLD = 0.10  # calibrated once against the linear baseline


def _trend_data() -> TrainData:
    train_ds = generate_dataset(
        SyntheticTaskSpec(seed=11, noise_std=TREND_NOISE_TRAIN, **TREND_TASK), 160
    )
    dev_ds = generate_dataset(
        SyntheticTaskSpec(seed=12, noise_std=TREND_NOISE_TRAIN, **TREND_TASK), 64
    )
    test_ds = generate_dataset(
        SyntheticTaskSpec(seed=13, noise_std=TREND_NOISE_TEST, **TREND_TASK), 64
    )
    return TrainData(train=train_ds, dev=dev_ds, test=test_ds)


def _trend_run(variant: Variant, seed: int, data: TrainData, tmp: Path) -> tuple[float, float]:
    cfg = TrainConfig(
        variant=variant,
        steps=TREND_STEPS,
        seed=seed,
        batch_size=16,
        lr_start=3e-2,
        lr_end=1e-3,
        schedule="geometric",
        kl_weight=TREND_KL_WEIGHT,
        d_z=6,
        d_hidden=16,
        eval_every=10**9,  # final-step evaluation only
        checkpoint_path=str(tmp / f"{variant.value}_{seed}.ckpt"),
        metrics_path=str(tmp / f"{variant.value}_{seed}.csv"),
    )
    res = train(cfg, data)
    dev = mean_pass_error_rate(res.model_cfg, res.params, data.dev)
    test = mean_pass_error_rate(res.model_cfg, res.params, data.test)
    return dev, test


@pytest.fixture(scope="session")
def trend_results(tmp_path_factory) -> dict[str, np.ndarray]:
    tmp = tmp_path_factory.mktemp("trend_runs")
    data = _trend_data()
    results: dict[str, list[tuple[float, float]]] = {}
    for variant in (Variant.NONREG_CTC, Variant.CI, Variant.MD):
        results[variant.value] = [_trend_run(variant, s, data, tmp) for s in TREND_SEEDS]
    for variant in (Variant.LINEAR_CTC, Variant.MA):
        results[variant.value] = [_trend_run(variant, TREND_SEEDS[0], data, tmp)]
    return {k: np.asarray(v) for k, v in results.items()}


def test_criterion_7_trend_reproduction(trend_results):
    lines = []
    for name, arr in trend_results.items():
        lines.append(
            f"{name}: dev {arr[:, 0].mean():.4f} test {arr[:, 1].mean():.4f} "
            f"gap {(arr[:, 1] - arr[:, 0]).mean():+.4f} ({len(arr)} seed(s))"
        )

    # (a) every run of every variant learns the task on the held-out
    # in-distribution split
    worst_dev = max(float(arr[:, 0].max()) for arr in trend_results.values())

    # (b) averaged over the seeds: the regularized posterior/prior objective
    # shrinks the distribution-shift gap relative to the unregularized
    # latent model, and the chain-prior objective generalizes at least as
    # well as the frame-independent one
    ci = trend_results[Variant.CI.value]
    nonreg = trend_results[Variant.NONREG_CTC.value]
    md = trend_results[Variant.MD.value]
    ci_gap = float((ci[:, 1] - ci[:, 0]).mean())
    nonreg_gap = float((nonreg[:, 1] - nonreg[:, 0]).mean())
    md_test = float(md[:, 1].mean())
    ci_test = float(ci[:, 1].mean())

    ok = worst_dev <= TREND_TER_THRESHOLD and ci_gap < nonreg_gap and md_test <= ci_test
    print(f"\n  [{'PASS' if ok else 'FAIL'}] trends: worst dev {worst_dev:.4f} "
          f"(tol {TREND_TER_THRESHOLD}), gap ci {ci_gap:+.4f} < nonreg {nonreg_gap:+.4f}, "
          f"test md {md_test:.4f} <= ci {ci_test:.4f}")
    for line in lines:
        print(f"    {line}")
    assert worst_dev <= TREND_TER_THRESHOLD
    assert ci_gap < nonreg_gap
    assert md_test <= ci_test


# --------------------------------------------------------------------------
# 8. determinism
# --------------------------------------------------------------------------


def test_criterion_8_identical_seeds_reproduce_metrics_exactly(tmp_path):
    task = SyntheticTaskSpec(seed=5, vocab_size=2, d_in=4, noise_std=0.1)
    data = TrainData(
        train=generate_dataset(task, 24),
        dev=generate_dataset(SyntheticTaskSpec(seed=6, vocab_size=2, d_in=4, noise_std=0.1), 8),
        test=generate_dataset(SyntheticTaskSpec(seed=7, vocab_size=2, d_in=4, noise_std=0.1), 8),
    )

    def run(tag: str, clock) -> str:
        cfg = TrainConfig(
            variant=Variant.CI,
            steps=6,
            seed=42,
            batch_size=8,
            d_z=4,
            d_hidden=8,
            eval_every=2,
            checkpoint_path=str(tmp_path / f"{tag}.ckpt"),
            metrics_path=str(tmp_path / f"{tag}.csv"),
        )
        train(cfg, data, clock=clock)
        return (tmp_path / f"{tag}.csv").read_text()

    # real clock: identical except the wall-clock column
    a, b = run("a", time.perf_counter), run("b", time.perf_counter)
    strip = lambda text: [line.rsplit(",", 1)[0] for line in text.splitlines()]
    assert strip(a) == strip(b)

    # injected deterministic clock: byte-identical files
    fake = itertools.count(0.0, 0.25)
    c = run("c", lambda: next(fake))
    fake2 = itertools.count(0.0, 0.25)
    d = run("d", lambda: next(fake2))
    assert c == d

    print("\n  [PASS] determinism: metrics identical minus wall clock; "
          "byte-identical under an injected clock")
