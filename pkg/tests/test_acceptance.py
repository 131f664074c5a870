"""Acceptance criteria, one ``test_criterion_<key>_*`` group per criterion.

Criteria 1-8 are self-contained property checks. Criteria 9-15 score trained
checkpoints found under ``$LPN_ACCEPTANCE_RUNS`` (default ``<repo>/runs``),
laid out the way ``demos/run_desk_suite.py`` writes them::

    runs/overfit/seed-0/latest.ckpt
    runs/pattern-mean/seed-{0,1,2}/latest.ckpt
    runs/pattern-ga1/seed-{0,1,2}/latest.ckpt
    runs/ood-ga1/seed-{0,1,2}/latest.ckpt

A missing or under-trained run fails the criterion with a message naming it.
The ``arc`` criterion trains the ARC preset for 100 steps and takes several
minutes on a CPU.
"""
import json
import math
import os
from dataclasses import replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import stats

from lpn.cli import EXIT_OK, main
from lpn.decoder import Decoder
from lpn.diagnostics import latent_gradcheck, parameter_gradcheck
from lpn.encoder import aggregate_latents, sample_latent
from lpn.eval import evaluate_tasks, summarize
from lpn.grids import Grid, GridSequence, decode_sequence, encode_sequence
from lpn.model import LPN, pairs_to_batch, tasks_to_batch
from lpn.nncore import ARCH_PRESETS, REPORTED_PARAM_COUNTS, ArchConfig, OptimConfig
from lpn.persistence import load_checkpoint, read_checkpoint, save_checkpoint, serialize_checkpoint
from lpn.search import SearchConfig, latent_optimize_batch, parse_infer, init_latent
from lpn.taskgen import PatternFamilyConfig, TINY_CONFIG, generate_tasks
from lpn.training import TRAIN_PRESETS, Trainer, kl_gaussian, step_noise, task_losses

from conftest import SMALL

RUNS = Path(os.environ.get("LPN_ACCEPTANCE_RUNS", Path(__file__).resolve().parents[1] / "runs"))
EVAL_TASKS = int(os.environ.get("LPN_ACCEPTANCE_TASKS", "200"))
EVAL_SEED = 10_000  # disjoint from the training seeds 0..2


# --------------------------------------------------------------------------- 1


def test_criterion_1_codec_round_trip_and_pad_independence():
    rng = np.random.default_rng(2024)
    failures = 0
    for _ in range(10_000):
        r, c = rng.integers(1, 31, size=2)
        g = Grid(rng.integers(0, 10, size=(r, c)))
        s = encode_sequence(g)
        noise = rng.integers(0, 10, size=s.pixel_tokens.shape)
        noisy = GridSequence(s.shape_tokens, np.where(s.pad_mask, s.pixel_tokens, noise), s.pad_mask)
        failures += decode_sequence(s) != g or decode_sequence(noisy) != g
    assert failures == 0


# --------------------------------------------------------------------------- 2


RANDOM_ARCHS = [
    SMALL,
    ArchConfig(2, 2, 6, 2.0, 1, 3, 4, 1.0, latent_dim=3, max_rows=4, max_cols=6),
    ArchConfig(0, 1, 8, 1.0, 3, 1, 8, 2.0, latent_dim=5, max_rows=6, max_cols=4),
]


def _random_problem(arch, seed):
    torch.manual_seed(seed)
    model = LPN(arch, seed=seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.2 * torch.randn_like(p))
    fam = replace(TINY_CONFIG, grid_rows=min(arch.max_rows, 4), grid_cols=min(arch.max_cols, 4),
                  pairs_per_task=3, query_pairs=0)
    batch = tasks_to_batch(generate_tasks("tiny-pattern", fam, seed, 2), arch)
    z = torch.randn(2, arch.latent_dim, generator=torch.Generator().manual_seed(seed))
    return model, batch, z


@pytest.mark.parametrize("k", range(len(RANDOM_ARCHS)))
def test_criterion_2_latent_gradient_check(k):
    model, batch, z = _random_problem(RANDOM_ARCHS[k], k)
    rep = latent_gradcheck(model, batch, z, num_coords=z.numel(), seed=k, rtol=1e-2, atol=1e-3)
    assert rep.passed, rep.summary()


@pytest.mark.parametrize("k", range(len(RANDOM_ARCHS)))
def test_criterion_2_parameter_gradient_spot_check(k):
    model, batch, z = _random_problem(RANDOM_ARCHS[k], k)
    reps = parameter_gradcheck(model, batch, z, num_coords=6, seed=k, rtol=1e-2, atol=1e-3)
    assert reps
    for name, rep in reps.items():
        assert rep.passed, f"{name}: {rep.summary()}"


# --------------------------------------------------------------------------- 3


def test_criterion_3_kl_closed_form_and_monte_carlo():
    rng = np.random.default_rng(3)
    mean, lv = rng.standard_normal((20, 8)), rng.uniform(-2, 2, (20, 8))
    closed = 0.5 * np.sum(mean**2 + np.exp(lv) - 1 - lv, axis=-1)
    got = kl_gaussian(torch.from_numpy(mean).float(), torch.from_numpy(lv).float()).double().numpy()
    assert np.max(np.abs(got - closed) / np.maximum(1.0, np.abs(closed))) <= 1e-6

    m, v = mean[0], lv[0]
    sd = np.exp(0.5 * v)
    z = m + sd * rng.standard_normal((100_000, m.size))
    log_ratio = (stats.norm.logpdf(z, m, sd) - stats.norm.logpdf(z)).sum(-1)
    se = log_ratio.std(ddof=1) / math.sqrt(len(log_ratio))
    assert abs(log_ratio.mean() - closed[0]) <= 3 * se


# --------------------------------------------------------------------------- 4


def test_criterion_4_permutation_invariance(small_model):
    task = generate_tasks("tiny-pattern", replace(TINY_CONFIG, pairs_per_task=5), 4, 1)[0]
    noise = torch.randn(5, SMALL.latent_dim, generator=torch.Generator().manual_seed(0))

    def aggregated(order):
        b = pairs_to_batch([task.pairs[i] for i in order], SMALL)
        with torch.no_grad():
            mean, lv = small_model.encoder(*b.tensors())
        return aggregate_latents(sample_latent(mean, lv, noise[list(order)]))

    ref = aggregated(range(5))
    rng = np.random.default_rng(0)
    for _ in range(10):
        perm = rng.permutation(5)
        assert torch.equal(aggregated(perm), ref)

    shuffled = replace(task, pairs=tuple(task.pairs[i] for i in rng.permutation(5)))
    for spec in ("mean", "ga:3"):
        a = evaluate_tasks(small_model, [task], parse_infer(spec))[0]
        b = evaluate_tasks(small_model, [shuffled], parse_infer(spec))[0]
        assert a.predictions == b.predictions


# --------------------------------------------------------------------------- 5


def test_criterion_5_search_identities(small_model):
    tasks = generate_tasks("tiny-pattern", TINY_CONFIG, 5, 12)
    batch = tasks_to_batch(tasks, SMALL)
    gen = torch.Generator().manual_seed(0)
    z0, std = init_latent(small_model, batch, "encoder_mean", gen)

    mean = latent_optimize_batch(small_model, batch, z0, parse_infer("mean"))
    ga0 = latent_optimize_batch(small_model, batch, z0, parse_infer("ga:0"))
    for a, b in zip(mean, ga0):
        assert np.array_equal(a.best_latent, b.best_latent) and a.best_loglik == b.best_loglik
    pa = evaluate_tasks(small_model, tasks, parse_infer("mean"))
    pb = evaluate_tasks(small_model, tasks, parse_infer("ga:0"))
    assert [r.predictions for r in pa] == [r.predictions for r in pb]

    configs = [
        parse_infer("ga:10"),
        SearchConfig(method="gradient_ascent", steps=10, step_size=1.0, optimizer="adam", lr_schedule="cosine"),
        SearchConfig(method="gradient_ascent", steps=5, step_size=5.0),
        parse_infer("rs:20"),
        replace(parse_infer("rs:20"), rs_around="posterior"),
    ]
    for cfg in configs:
        for rep in latent_optimize_batch(small_model, batch, z0, cfg, torch.Generator().manual_seed(1), std):
            assert rep.best_loglik >= rep.init_loglik
            rb = rep.running_best()
            assert all(y >= x for x, y in zip(rb, rb[1:]))
            assert rep.best_loglik == rb[-1]


# --------------------------------------------------------------------------- 6


def test_criterion_6_leave_one_out_isolation(small_model):
    tasks = generate_tasks("tiny-pattern", replace(TINY_CONFIG, query_pairs=0), 6, 3)
    noise = step_noise(0, 0, (3, 4, SMALL.latent_dim))
    cfg = replace(TRAIN_PRESETS["tiny"], family="tiny-pattern")
    base = task_losses(small_model, tasks_to_batch(tasks, SMALL), noise, cfg).z_init
    rng = np.random.default_rng(6)
    for t in range(3):
        for i in range(4):
            pairs = list(tasks[t].pairs)
            x, _ = pairs[i]
            pairs[i] = (x, Grid(rng.integers(0, 10, size=rng.integers(1, 6, size=2))))
            mutated = list(tasks)
            mutated[t] = replace(tasks[t], pairs=tuple(pairs))
            z = task_losses(small_model, tasks_to_batch(mutated, SMALL), noise, cfg).z_init
            assert torch.equal(z[t, i], base[t, i])


# --------------------------------------------------------------------------- 7


def test_criterion_7_causal_masking_exhaustive(small_model):
    dec: Decoder = small_model.decoder
    x = Grid(np.random.default_rng(7).integers(0, 10, (3, 4)))
    y = Grid(np.random.default_rng(8).integers(0, 10, (5, 5)))
    b = pairs_to_batch([(x, y)], SMALL)
    z = torch.randn(1, SMALL.latent_dim, generator=torch.Generator().manual_seed(7))
    with torch.no_grad():
        base = dec(z, *b.tensors())
        for t in range(25):
            for delta in range(1, 10):
                pix = b.out_pixels.clone()
                pix[0, t] = (pix[0, t] + delta) % 10
                out = dec(z, b.in_shapes, b.in_pixels, b.out_shapes, pix)
                assert torch.equal(out.row_logits, base.row_logits)
                assert torch.equal(out.col_logits, base.col_logits)
                assert torch.equal(out.grid_logits[:, : t + 1], base.grid_logits[:, : t + 1]), (t, delta)


# --------------------------------------------------------------------------- 8


def test_criterion_8_checkpoint_round_trip(tmp_path, small_model):
    from torch.optim import AdamW

    opt = AdamW(small_model.parameters(), lr=1e-3)
    small_model.zero_grad()
    sum(p.square().sum() for p in small_model.parameters()).backward()
    opt.step()
    first = save_checkpoint(tmp_path / "a.ckpt", small_model, opt, meta={"step": 1, "seed": 0})
    model, opt2, meta = load_checkpoint(first, expect_arch=SMALL, optim_config=OptimConfig(lr=1e-3))
    for (k, a), (_, b) in zip(small_model.state_dict().items(), model.state_dict().items()):
        assert torch.equal(a, b), k
    second = save_checkpoint(tmp_path / "b.ckpt", model, opt2, meta)
    assert first.read_bytes() == second.read_bytes()


def test_criterion_8_golden_file():
    from test_persistence import GOLDEN, golden_model

    assert serialize_checkpoint(golden_model(), meta={"step": 3}) == GOLDEN.read_bytes()
    ck = read_checkpoint(GOLDEN)
    assert ck.header["format_version"] == 1 and ck.meta == {"step": 3}


# --------------------------------------------------------------------------- desk-scale runs


def _load_runs(name: str, preset: str, steps: int, inner_steps: int, family: str, batch_size: int = 128):
    """Checkpoints of a finished run family, or a failure naming what is missing."""
    root = RUNS / name
    paths = sorted(root.glob("seed-*/latest.ckpt"))
    if not paths:
        pytest.fail(f"no trained checkpoints under {root}; produce them with demos/run_desk_suite.py "
                    f"(needs {steps} steps at batch {batch_size})")
    models = []
    for path in paths:
        model, _, meta = load_checkpoint(path, expect_arch=ARCH_PRESETS[preset])
        tc = meta.get("train_config", {})
        got = (meta.get("step"), tc.get("batch_size"), tc.get("inner_steps"), tc.get("family"))
        want = (steps, batch_size, inner_steps, family)
        if got != want:
            pytest.fail(f"{path}: run has (step, batch, inner_steps, family) = {got}, criterion needs {want}")
        model.eval()
        models.append(model)
    return models


@lru_cache(maxsize=None)
def _pattern_tasks(density: float = 0.5):
    return tuple(generate_tasks("pattern", PatternFamilyConfig(color_density=density), EVAL_SEED, EVAL_TASKS))


_scores: dict = {}


def _accuracy(run: str, models, spec: str, init: str = "encoder_mean", density: float = 0.5) -> float:
    """Mean exact-match percent over the run's seeds."""
    key = (run, spec, init, density)
    if key not in _scores:
        cfg = parse_infer(spec, init=init)
        accs = [100 * summarize(evaluate_tasks(m, list(_pattern_tasks(density)), cfg, seed=0))["exact_top1"]
                for m in models]
        _scores[key] = float(np.mean(accs))
    return _scores[key]


def _mean_runs():
    return _load_runs("pattern-mean", "pattern", 20_000, 0, "pattern")


def _ga1_runs():
    return _load_runs("pattern-ga1", "pattern", 20_000, 1, "pattern")


def test_criterion_9_decoder_validation_fixed_program():
    models = _load_runs("overfit", "overfit", 10_000, 0, "fixed-program")
    for path, model in zip(sorted((RUNS / "overfit").glob("seed-*/latest.ckpt")), models):
        assert model.num_parameters() <= 1_000_000
        meta = read_checkpoint(path, select=()).meta
        tc = meta["train_config"]
        fam = replace(PatternFamilyConfig(**{**tc.get("family_overrides", {})}), query_pairs=1)
        tasks = generate_tasks("fixed-program", fam, EVAL_SEED, EVAL_TASKS, program_seed=tc["program_seed"])
        s = summarize(evaluate_tasks(model, tasks, parse_infer("mean")))
        assert s["pixel_accuracy"] >= 0.96, s


def test_criterion_10_pattern_mean_training():
    models = _mean_runs()
    mean, ga100 = _accuracy("mean", models, "mean"), _accuracy("mean", models, "ga:100")
    assert mean <= 15.0, mean
    assert 40.0 <= ga100 <= 90.0, ga100


def test_criterion_11_pattern_ga1_training():
    ga1, mean_runs = _ga1_runs(), _mean_runs()
    assert _accuracy("ga1", ga1, "ga:100") >= 95.0
    for spec in ("ga:5", "ga:20", "ga:100"):
        assert _accuracy("ga1", ga1, spec) > _accuracy("mean", mean_runs, spec), spec


@pytest.mark.parametrize("run", ["mean", "ga1"])
def test_criterion_12_inference_budget_monotonicity(run):
    models = _mean_runs() if run == "mean" else _ga1_runs()
    accs = [_accuracy(run, models, s) for s in ("mean", "ga:5", "ga:20", "ga:100")]
    drops = [a - b for a, b in zip(accs, accs[1:]) if b < a]
    assert len(drops) <= 1 and all(d <= 2.0 for d in drops), accs


def test_criterion_13_encoder_initialisation_matters():
    models = _ga1_runs()
    enc = _accuracy("ga1", models, "ga:100", "encoder_mean")
    prior = _accuracy("ga1", models, "ga:100", "prior")
    assert enc - prior >= 10.0, (enc, prior)


def test_criterion_14_out_of_distribution_density():
    models = _load_runs("ood-ga1", "ood", 100_000, 1, "pattern")
    assert _accuracy("ood", models, "mean", density=1.0) <= 5.0
    assert _accuracy("ood", models, "ga:100", density=1.0) >= 60.0


def test_criterion_15_random_search_inefficiency():
    models = _mean_runs()
    assert abs(_accuracy("mean", models, "rs:250") - _accuracy("mean", models, "mean")) <= 5.0


# --------------------------------------------------------------------------- ARC preset substitute


ARC_STEPS = 100


@pytest.fixture(scope="module")
def arc_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("arc")
    arch = ARCH_PRESETS["arc"]
    cfg = replace(TRAIN_PRESETS["arc"], steps=ARC_STEPS, batch_size=1, micro_batch=1, pairs=2,
                  eval_every=0, log_every=1, ckpt_every=0)
    trainer = Trainer(arch, cfg, out)
    history = trainer.run()
    return trainer, history, out / "latest.ckpt"


def test_criterion_arc_preset_parameter_count():
    n = LPN(ARCH_PRESETS["arc"]).num_parameters()
    assert abs(4 * n / REPORTED_PARAM_COUNTS["arc"] - 1) <= 0.02


def test_criterion_arc_preset_trains_with_finite_losses(arc_run):
    trainer, history, ckpt = arc_run
    assert trainer.step == ARC_STEPS and len(history) == ARC_STEPS
    assert all(math.isfinite(r.loss) and math.isfinite(r.grad_norm) for r in history)
    assert read_checkpoint(ckpt, select=()).meta["step"] == ARC_STEPS


def test_criterion_arc_eval_protocol_on_arc_schema_file(arc_run, tmp_path):
    _, _, ckpt = arc_run
    challenges = {
        "t0": {"train": [{"input": [[1, 2], [3, 4]], "output": [[4, 3], [2, 1]]},
                         {"input": [[5, 0, 0]], "output": [[0, 0, 5]]}],
               "test": [{"input": [[7, 8]]}]},
        "t1": {"train": [{"input": [[2]], "output": [[2, 2]]}],
               "test": [{"input": [[3]]}, {"input": [[6]]}]},
    }
    solutions = {"t0": [[[8, 7]]], "t1": [[[3, 3]], [[6, 6]]]}
    (tmp_path / "c.json").write_text(json.dumps(challenges))
    (tmp_path / "s.json").write_text(json.dumps(solutions))
    out = tmp_path / "eval"
    argv = ["eval", "--checkpoint", str(ckpt), "--expect-preset", "arc", "--dataset", str(tmp_path / "c.json"),
            "--solutions", str(tmp_path / "s.json"), "--search", "arc", "--attempts", "2", "--out", str(out)]
    for spec in ("mean", "ga:1", "ga:5"):
        argv += ["--infer", spec]
    assert main(argv) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert [r["inference"] for r in summary["rows"]] == ["Mean", "GA 1", "GA 5"]
    for row in summary["rows"]:
        assert row["tasks"] == 2 and row["exact_top2"] >= row["exact_top1"]
    assert all(c["optimizer"] == "adam" for c in summary["config"]["inference"][1:])
