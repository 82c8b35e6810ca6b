"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The sorting-task criterion trains two small models end to end and dominates
the runtime; everything else runs in seconds to minutes.
"""

import math
import time

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import chisquare

from contmem import tasks
from contmem.basis import make_basis
from contmem.cli import _batches, basis_mse, evaluate_model, run_training
from contmem.config import RunConfig
from contmem.memory import (
    AttentionRecord,
    empty_memory,
    expected_basis,
    gaussian_interval_mass,
    ltm_attend,
    state_num_bytes,
    sticky_locations,
    update,
)
from contmem.metrics import read_records
from contmem.model import Adam, Model, kl_loss, nll_loss, train_step

from fdcheck import numeric_grad


def report(name, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'} {name}"
    if detail:
        line += f" :: {detail}"
    print(line, flush=True)
    assert ok, line


# -- criterion: gradient suite ------------------------------------------------


def test_gradient_suite():
    """Every parameter of the miniature model matches finite differences."""
    cfg = RunConfig(vocab_size=8, num_layers=1, num_heads=2, embed_size=8,
                    input_len=8, stm_len=8, basis_n=8, ffn_hidden=8,
                    ltm_mode="linspace").model_config()
    model = Model(cfg, np.random.default_rng(21))
    toks = np.array([3, 1, 4, 1, 5, 0, 2, 6])
    targets = np.array([1, 4, 1, 5, 0, 2, 6, 7])
    # fixed states with an active memory and a full cache; the states are
    # inputs, not parameters, so the loss is a pure function of the weights
    _, states, _, _ = model.forward(toks, model.init_states())

    def loss():
        logits, _, _, sig2 = model.forward(toks, states, update_memory=False)
        out = nll_loss(logits, targets, reduction="sum")
        return out + kl_loss(sig2, cfg.sigma0, cfg.kl_form) * cfg.kl_weight

    t0 = time.perf_counter()
    model.zero_grad()
    loss().backward()
    worst = 0.0
    worst_name = ""
    checked = 0
    for name, t in model.params.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(lambda: float(loss().data), t.data)
        a, n = analytic.ravel(), numeric.ravel()
        err = np.abs(a - n)
        rel = err / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-300)
        bad = (err > 1e-7) & (rel > 1e-4)
        checked += a.size
        if bad.any():
            report("gradient-suite", False, f"{name}: {bad.sum()} entries off")
        m = float(rel[err > 1e-7].max()) if (err > 1e-7).any() else 0.0
        if m > worst:
            worst, worst_name = m, name
    dt = time.perf_counter() - t0
    report("gradient-suite", dt < 60.0,
           f"{checked} params, worst rel err {worst:.2e} ({worst_name}), {dt:.1f}s")


# -- criterion: quadrature oracles --------------------------------------------


def test_quadrature_oracles():
    rng = np.random.default_rng(77)
    spec = make_basis(10, (0.01, 0.05))
    t0 = time.perf_counter()
    worst = 0.0
    cases = 0
    for _ in range(50):
        mu = rng.uniform(-0.2, 1.2)
        s2 = rng.uniform(1e-3, 0.6) ** 2
        got = expected_basis(mu, s2, spec)
        for j in range(spec.n):
            ref, _ = quad(
                lambda t: math.exp(-0.5 * (t - mu) ** 2 / s2)
                / math.sqrt(2 * math.pi * s2)
                * math.exp(-0.5 * (t - spec.centers[j]) ** 2 / spec.widths[j] ** 2)
                / (spec.widths[j] * math.sqrt(2 * math.pi)),
                -12.0, 13.0, limit=400, epsabs=1e-12, epsrel=1e-11,
                points=[mu, spec.centers[j]])
            worst = max(worst, abs(got[j] - ref))
            cases += 1
    for _ in range(500):
        mu = rng.uniform(-0.5, 1.5)
        s2 = rng.uniform(1e-3, 1.0) ** 2
        a = rng.uniform(-1.0, 2.0)
        b = a + rng.uniform(0.0, 1.0)
        got = gaussian_interval_mass(mu, s2, a, b)
        ref, _ = quad(lambda t: math.exp(-0.5 * (t - mu) ** 2 / s2)
                      / math.sqrt(2 * math.pi * s2),
                      a, b, limit=200, epsabs=1e-12, epsrel=1e-11)
        worst = max(worst, abs(got - ref))
        cases += 1
    dt = time.perf_counter() - t0
    report("quadrature-oracles", worst < 1e-8 and dt < 60.0,
           f"{cases} cases, worst abs err {worst:.2e}, {dt:.1f}s")


# -- criterion: regression trade-off ------------------------------------------


def test_regression_tradeoff():
    t0 = time.perf_counter()
    counts = [16, 32, 64, 128, 256, 512]
    seeds = list(range(10))
    mses = [basis_mse(n, 1024, 32, seeds) for n in counts]
    non_increasing = all(a >= b for a, b in zip(mses, mses[1:]))
    plateau = mses[-1] / mses[-2] > 0.5
    dt = time.perf_counter() - t0
    detail = " ".join(f"N={n}:{m:.4f}" for n, m in zip(counts, mses))
    report("regression-tradeoff", non_increasing and plateau and dt < 300.0,
           f"{detail}, plateau ratio {mses[-1] / mses[-2]:.2f}, {dt:.0f}s")


# -- criterion: desk-scale sorting --------------------------------------------

DESK_STEPS = 4000
DESK_LR = 1e-3
DESK_BATCH = 1
DESK_EVAL_LIMIT = 100


def _train_sorting(data_dir, mode, steps=DESK_STEPS, seed=0):
    data = tasks.read_dataset(data_dir / "train.txt")
    cfg = RunConfig(ltm_mode=mode, steps=steps, learning_rate=DESK_LR,
                    batch_size=DESK_BATCH, seed=seed)
    rng = np.random.Generator(np.random.PCG64(seed))
    model = Model(cfg.model_config(), rng)
    opt = Adam(model.params)
    for step in range(1, steps + 1):
        train_step(model, opt, _batches(data, DESK_BATCH, rng), step, steps,
                   DESK_LR, rng=rng)
    return model


@pytest.mark.slow
def test_desk_scale_sorting(tmp_path):
    data_dir = tmp_path / "data"
    tasks.gen_dataset(data_dir, {"train": 2000, "test": 200}, 1000,
                      master_seed=0)
    test_data = tasks.read_dataset(data_dir / "test.txt")
    accs = {}
    for mode in ("linspace", "off", "sticky"):
        model = _train_sorting(data_dir, mode)
        accs[mode], _ = evaluate_model(model, test_data, limit=DESK_EVAL_LIMIT,
                                       rng=np.random.default_rng(1))
    margin = accs["linspace"] - accs["off"]
    ok = margin >= 0.05 and accs["linspace"] >= 0.25 and accs["off"] >= 0.25
    report("desk-scale-sorting", ok,
           f"ltm {accs['linspace']:.3f} stm-only {accs['off']:.3f} "
           f"sticky {accs['sticky']:.3f} (reported), margin {margin:.3f}")


# -- criterion: boundedness and cost flatness ---------------------------------


def test_boundedness_and_cost():
    spec = make_basis(64, (0.01, 0.05))
    mem = empty_memory(spec, 64, tau=0.75)
    rng = np.random.default_rng(5)
    cfg = RunConfig(num_layers=1).model_config()
    model = Model(cfg, np.random.default_rng(5))
    params = model.layers[0]["ltm"]
    from contmem.autodiff import Tensor
    queries = [Tensor(rng.normal(size=(64, 32))) for _ in range(2)]
    # warm caches so timings measure steady state
    warm = update(mem, rng.normal(size=(64, 64)))
    update(warm, rng.normal(size=(64, 64)))
    sizes, upd_ms, read_ms = [], [], []
    for _ in range(100):
        t0 = time.perf_counter()
        mem = update(mem, rng.normal(size=(64, 64)))
        t1 = time.perf_counter()
        ltm_attend(mem, queries, params)
        t2 = time.perf_counter()
        sizes.append(state_num_bytes(mem))
        upd_ms.append(t1 - t0)
        read_ms.append(t2 - t1)
    flat_size = len(set(sizes)) == 1
    upd_ratio = np.mean(upd_ms[89:]) / np.mean(upd_ms[:10])
    read_ratio = np.mean(read_ms[89:]) / np.mean(read_ms[:10])
    ok = flat_size and upd_ratio < 1.5 and read_ratio < 1.5
    report("boundedness-cost-flatness", ok,
           f"state {sizes[0]} B constant={flat_size}, update ratio "
           f"{upd_ratio:.2f}, read ratio {read_ratio:.2f}")


# -- criterion: sticky sampler statistics -------------------------------------


def test_sticky_sampler_statistics():
    rng = np.random.default_rng(9)
    bins = 50
    m = 10000
    # concentration: two tight attention peaks; the sampled mass near them
    # must match the records' interval mass (z test at alpha = 0.01)
    mus = np.array([[0.2] * 8, [0.7] * 8])
    sig2 = np.full((2, 8), 0.06 ** 2)
    rec = AttentionRecord(mus=mus, sigma2s=sig2)
    locs, fell_back = sticky_locations(rec, bins, m, rng)
    assert not fell_back
    p_true = 0.0
    for mu_row, s_row in zip(mus, sig2):
        for mu, s2 in zip(mu_row, s_row):
            p_true += gaussian_interval_mass(mu, s2, 0.1, 0.3)
            p_true += gaussian_interval_mass(mu, s2, 0.6, 0.8)
    p_true /= mus.size
    inside = float(((np.abs(locs - 0.2) <= 0.1) | (np.abs(locs - 0.7) <= 0.1)).mean())
    z = abs(inside - p_true) / math.sqrt(p_true * (1 - p_true) / m)
    conc_ok = z < 2.576  # alpha = 0.01 two-sided
    # uniformity: flat record => locations uniform on [0,1] (chi-square)
    flat = AttentionRecord(mus=rng.random((2, 8)),
                           sigma2s=np.full((2, 8), 100.0 ** 2))
    locs_u, _ = sticky_locations(flat, bins, m, rng)
    counts = np.histogram(locs_u, bins=bins, range=(0.0, 1.0))[0]
    _, p = chisquare(counts)
    unif_ok = p > 0.01
    report("sticky-sampler-statistics", conc_ok and unif_ok,
           f"concentration z={z:.2f} (mass {inside:.3f} vs {p_true:.3f}), "
           f"uniformity chi-square p={p:.3f}")


# -- criterion: determinism and checkpoint resume -----------------------------


def _train_rows(path):
    return [{k: v for k, v in r.items() if k != "tokens_per_s"}
            for r in read_records(path)]


def test_determinism_and_resume(tmp_path):
    data_dir = tmp_path / "data"
    tasks.gen_dataset(data_dir, {"train": 8}, 16, master_seed=1)

    def cfg(name, **kw):
        base = dict(num_layers=1, num_heads=2, embed_size=8, input_len=8,
                    stm_len=8, basis_n=8, ffn_hidden=8, sticky_bins=5,
                    ltm_mode="sticky", data_dir=str(data_dir),
                    out_dir=str(tmp_path / name), seed=3, steps=8,
                    learning_rate=1e-3, emit_interval=1)
        base.update(kw)
        return RunConfig(**base)

    run_training(cfg("a", save_interval=4))
    run_training(cfg("b", save_interval=4))
    identical = _train_rows(tmp_path / "a" / "train.csv") == \
        _train_rows(tmp_path / "b" / "train.csv")
    run_training(cfg("resumed"), resume=str(tmp_path / "a" / "ckpt_4.bin"))
    tail = _train_rows(tmp_path / "a" / "train.csv")[4:]
    resumed = _train_rows(tmp_path / "resumed" / "train.csv")
    resume_ok = len(resumed) == len(tail) and all(
        a["step"] == b["step"]
        and all(abs(a[c] - b[c]) <= 1e-8 * max(1.0, abs(a[c]))
                for c in ("nll", "kl", "total", "lr"))
        for a, b in zip(tail, resumed))
    report("determinism-and-resume", identical and resume_ok,
           f"repeat identical={identical}, resume within 1e-8={resume_ok}")


# -- criterion: out-of-scope declaration --------------------------------------


def test_out_of_scope_declaration():
    # pretrained-LM perplexity/dialogue experiments are intentionally not
    # reproduced; nothing in this suite measures or depends on them
    import contmem
    import contmem.cli as cli
    names = set(dir(contmem)) | set(dir(cli))
    absent = not any("perplexity" in n.lower() or "gpt" in n.lower()
                     for n in names)
    report("out-of-scope-declaration", absent,
           "pretrained-LM perplexity and dialogue metrics not reproduced; "
           "no criterion depends on them")
