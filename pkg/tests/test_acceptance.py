"""Acceptance gate: six checks, one verdict line per criterion.

Run ``pytest -s tests/test_acceptance.py`` to see each line; every check
also fails its test on violation, so plain ``pytest`` enforces the gate.
"""

import itertools
import math
import time
from pathlib import Path

import numpy as np
from scipy import stats

import spsim.cli as cli
from spsim.cluster import ClusterSpec
from spsim.config import load_config
from spsim.diffusion import forward_step, make_linear_schedule, q_sample
from spsim.executor import (
    ShardingPlan,
    allgather_then_shard,
    alltoall_reshard,
    contiguous_bounds,
    make_batch,
    placement_spread,
    reference_iteration,
    run_sp_iteration,
)
from spsim.model import PatchSpec, ToyDenoiser
from spsim.numerics import SeededRng
from spsim.planner import (
    TrainStrategy,
    Workload,
    calibrate,
    candidate_sp_sizes,
    iteration_time,
    memory_saving_strategy,
    plan_search,
    vae_stage_time,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def report(criterion: int, ok: bool, detail: str) -> None:
    print(f"\nacceptance criterion {criterion}: "
          f"{'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {criterion}: {detail}"


def test_criterion_1_sharded_equivalence_at_1e9():
    start = time.perf_counter()
    spec = PatchSpec()
    assert spec.tokens_per_frame(96, 96) == 36
    model = ToyDenoiser.init(SeededRng(42), spec, dim=48, heads=24, depth=2)
    schedule = make_linear_schedule(100)
    batch = make_batch(42, 4, 96, 96, 6, 48)
    ref = reference_iteration(model, schedule, batch)
    cluster = ClusterSpec(nodes=1, devices_per_node=8)
    worst = 0.0
    runs = 0
    for p in (1, 2, 3, 4, 6, 8):
        for axis in ("spatial", "temporal"):
            for attn in ("head_parallel", "gather"):
                got = run_sp_iteration(model, schedule, batch,
                                       ShardingPlan(p, axis, attn), cluster)
                worst = max(worst, abs(got.loss - ref.loss) / abs(ref.loss))
                runs += 1
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-9 and elapsed < 60.0,
           f"{runs} sharded runs, worst relative loss deviation {worst:.2e} "
           f"<= 1e-9 in {elapsed:.1f}s")


def test_criterion_2_diffusion_math():
    # (i) iterating the one-step forward map agrees with the closed form
    s = make_linear_schedule(100)
    rng = SeededRng(7)
    x0 = rng.normal((5, 8))
    x = x0.copy()
    acc = np.zeros_like(x0)
    coef = 1.0
    worst_chain = 0.0
    for t in range(1, 101):
        n = rng.normal(x.shape)
        beta = float(s.betas[t - 1])
        x = forward_step(x, beta, n)
        acc = math.sqrt(1.0 - beta) * acc + math.sqrt(beta) * n
        coef *= math.sqrt(1.0 - beta)
        eps = acc / math.sqrt(s.one_minus_alpha_bars[t - 1])
        worst_chain = max(
            worst_chain,
            float(np.max(np.abs(q_sample(s, x0, t, eps) - x))),
            abs(coef - math.sqrt(s.alpha_bars[t - 1])),
        )

    # (ii) analytic loss gradient vs central finite differences
    spec = PatchSpec()
    model = ToyDenoiser.init(SeededRng(5), spec, dim=24, heads=6, depth=1)
    g = SeededRng(99)
    latents = g.split(1).normal((2, 8, 8, spec.latent_channels))
    prompt = g.split(2).normal((3, 24))
    true_noise = g.split(3).normal(latents.shape)
    noisy = np.stack([q_sample(s, latents[f], 40, true_noise[f])
                      for f in range(2)])
    _, grad = model.loss_and_output_grad(noisy, 40, prompt, true_noise)
    idx = g.split(4).integers(0, model.w_out.size, 24)
    worst_grad = 0.0
    for flat in np.unique(idx):
        i, j = divmod(int(flat), model.w_out.shape[1])
        keep = model.w_out[i, j]
        h = 1e-6 * max(1.0, abs(keep))
        model.w_out[i, j] = keep + h
        up, _ = model.loss_and_output_grad(noisy, 40, prompt, true_noise)
        model.w_out[i, j] = keep - h
        down, _ = model.loss_and_output_grad(noisy, 40, prompt, true_noise)
        model.w_out[i, j] = keep
        fd = (up - down) / (2.0 * h)
        worst_grad = max(worst_grad,
                         abs(fd - grad[i, j]) / max(abs(fd), abs(grad[i, j])))

    # (iii) the stored signal/noise variance split sums to exactly one
    identity_exact = all(
        bool(np.all(sch.alpha_bars + sch.one_minus_alpha_bars == 1.0))
        for sch in (s, make_linear_schedule(1000))
    )
    report(2, worst_chain <= 1e-12 and worst_grad <= 1e-4 and identity_exact,
           f"chain vs closed form {worst_chain:.2e} <= 1e-12, "
           f"gradient vs finite differences {worst_grad:.2e} <= 1e-4 on "
           f"{len(np.unique(idx))} parameters, signal identity exact: "
           f"{identity_exact}")


# the measured two-device comparison: per shape, the saving ratio used and
# the measured seconds (or the observed failure mode) per strategy
TABLE = (
    (Workload(32, 256, 256, global_batch=2), 0.2,
     {"baseline": 15.7, "recompute": 14.2, "offload": 13.6,
      "combination": 13.6}),
    (Workload(32, 512, 384, global_batch=2), 0.5,
     {"baseline": "oom", "recompute": 26.6, "offload": 58.4,
      "combination": 25.7}),
    (Workload(32, 1024, 768, global_batch=2), 1.0,
     {"baseline": "oom", "recompute": 67.5, "offload": "break_down",
      "combination": 65.3}),
    (Workload(128, 256, 256, global_batch=2), 0.8,
     {"baseline": "oom", "recompute": 31.2, "offload": 130.8,
      "combination": 30.3}),
)


def _table_cells(cfg, cp):
    cells = {}
    cal = cfg.calibration
    for row, (wl, ratio, measured) in enumerate(TABLE):
        for kind, target in measured.items():
            strat = memory_saving_strategy(
                kind, 0.0 if kind == "baseline" else ratio,
                dp_size=cal.dp_size, global_batch=cal.global_batch,
                zero_stage=cal.zero_stage)
            est = iteration_time(strat, cfg.cluster, cfg.model, wl, cp)
            cells[(row, kind)] = (est, target, wl, strat)
    return cells


def test_criterion_3_table_reproduction():
    start = time.perf_counter()
    cfg = load_config(str(CONFIGS / "calibration_rig.yaml"))
    cal = cfg.calibration

    # calibrate on the single baseline anchor, then project every cell
    base = memory_saving_strategy("baseline", 0.0, dp_size=cal.dp_size,
                                  global_batch=cal.global_batch,
                                  zero_stage=cal.zero_stage)
    fit = calibrate([(TABLE[0][0], base, 15.7)], cfg.cluster, cfg.model,
                    cfg.cost)
    cells = _table_cells(cfg, fit.params)

    # (a) infeasibility lands exactly on the cells that failed in practice
    status_exact = all(
        est.status == (target if isinstance(target, str) else "ok")
        for est, target, _, _ in cells.values()
    )

    # (c) within-row orderings survive the projection
    t = {key: est.total for key, (est, _, _, _) in cells.items()}
    orderings = (
        all(t[(row, "combination")] <= t[(row, "recompute")] + 1e-9
            for row in range(4))
        and t[(0, "recompute")] <= t[(0, "baseline")]
        and t[(3, "offload")] >= 2.0 * t[(3, "recompute")]
        and all(0.90 <= t[(row, "combination")] / t[(row, "recompute")] <= 1.00
                for row in (1, 2, 3))
    )

    # (d) a joint refit over every measured cell stays within 25%
    anchors = [(wl, strat, target) for (est, target, wl, strat) in cells.values()
               if not isinstance(target, str)]
    refit = calibrate(anchors, cfg.cluster, cfg.model, cfg.cost)
    elapsed = time.perf_counter() - start
    report(3, status_exact and orderings and refit.max_abs_residual <= 0.25
           and elapsed < 5.0,
           f"statuses exact: {status_exact}, orderings hold: {orderings}, "
           f"refit residual {refit.max_abs_residual:.1%} <= 25% over "
           f"{len(anchors)} cells in {elapsed:.1f}s")


def test_criterion_4_throughput_trend():
    start = time.perf_counter()
    cfg = load_config(str(CONFIGS / "production_cluster.yaml"))
    total = cfg.cluster.total_devices
    gb = cfg.workload.global_batch
    candidates = candidate_sp_sizes(cfg.cluster, cfg.model)

    sp_intra = max(sp for sp, pl in candidates if pl == "intra")
    families = {"intra": TrainStrategy(
        sp_size=sp_intra, sp_placement="intra", dp_size=total // sp_intra,
        zero_stage=3, recompute_ratio=0.8, offload_ratio=0.2,
        global_batch=gb, grad_accum=math.ceil(gb / (total // sp_intra)))}
    for sp, pl in candidates:
        if pl == "cross":
            dp = total // sp
            families[f"cross{sp}"] = TrainStrategy(
                sp_size=sp, sp_placement="cross", dp_size=dp, zero_stage=3,
                recompute_ratio=0.0, offload_ratio=0.0, global_batch=gb,
                grad_accum=math.ceil(gb / dp))

    curves = {name: [] for name in families}
    for frames in range(8, 161, 8):
        wl = Workload(frames, 1920, 1080, global_batch=gb)
        tokens = wl.tokens(cfg.model.patch)
        for name, strat in families.items():
            est = iteration_time(strat, cfg.cluster, cfg.model, wl, cfg.cost)
            curves[name].append((tokens, est.total, est.feasible))

    intra = curves.pop("intra")
    intra_ok_to = max(tok for tok, _, ok in intra if ok)
    xs = [tok for tok, _, ok in intra if ok]
    ys = [t for _, t, ok in intra if ok]
    r2 = stats.linregress(xs, ys).rvalue ** 2

    boundaries = {}
    for name, pts in curves.items():
        feas = [tok for tok, _, ok in pts if ok]
        boundaries[name] = max(feas) if feas else 0
    max_cross = max(boundaries.values())

    elapsed = time.perf_counter() - start
    ok = (r2 >= 0.98 and intra_ok_to >= 1.1e6
          and all(b <= 0.72e6 for b in boundaries.values())
          and 0.48e6 <= max_cross <= 0.72e6
          and elapsed < 10.0)
    report(4, ok,
           f"intra linear R^2={r2:.5f} >= 0.98 and feasible to "
           f"{intra_ok_to:,} tokens >= 1.1M; cross families feasible only to "
           f"{sorted(boundaries.values())} tokens (max {max_cross:,} within "
           f"0.6M +/- 20%) in {elapsed:.1f}s")


def test_criterion_5_workflow_mechanisms():
    # (i) split-by-modality balance vs fused equal division
    rng = SeededRng(505)
    cases = uneven = strictly_better = 0
    spread_ok = fused_ok = True
    for _ in range(200):
        p = int(rng.integers(2, 13)[()])
        lt = int(rng.integers(1, 51)[()])
        lv = int(rng.integers(p, 60 * p)[()])
        separate = placement_spread(lt, lv, p, "separate")
        fused = placement_spread(lt, lv, p, "fused")
        spread_ok &= separate <= 2
        fused_ok &= fused >= separate
        cases += 1
        if lt % p != 0:
            uneven += 1
            strictly_better += fused > separate
    strict_frac = strictly_better / uneven

    # (ii) frame-parallel encode time scales as 1/P
    cfg = load_config(str(CONFIGS / "calibration_rig.yaml"))
    wl = Workload(840, 256, 256, global_batch=2)  # 840 divides by 1..8
    t1 = vae_stage_time(wl, 1, cfg.cluster, cfg.cost)
    vae_ok = all(
        abs(vae_stage_time(wl, p, cfg.cluster, cfg.cost) - t1 / p)
        <= 0.05 * (t1 / p)
        for p in range(2, 9)
    )

    # (iii) the all-to-all reshard ships fewer bytes than gather-everything
    reshard_ok = True
    g = SeededRng(6)
    frames, lv, dim = 8, 45, 16
    for p in range(2, 9):
        local = [dict() for _ in range(p)]
        for f in range(frames):
            local[f % p][f] = g.normal((lv, dim))
        vbounds = contiguous_bounds(lv, p)
        fbounds = contiguous_bounds(frames, p)
        for axis in ("spatial", "temporal"):
            fast, fast_sent = alltoall_reshard(local, axis, vbounds, fbounds,
                                               frames, p, lv, dim)
            slow, slow_sent = allgather_then_shard(local, axis, vbounds,
                                                   fbounds, frames, p, lv, dim)
            reshard_ok &= fast_sent < slow_sent
            reshard_ok &= all(np.array_equal(a, b) for a, b in zip(fast, slow))

    report(5, spread_ok and fused_ok and strict_frac >= 0.5 and vae_ok
           and reshard_ok,
           f"separate spread <= 2 on {cases} cases, fused >= separate always, "
           f"strictly worse on {strict_frac:.0%} of {uneven} ragged cases; "
           f"encode time ~1/P within 5% for P<=8: {vae_ok}; reshard bytes < "
           f"gather bytes for P in 2..8: {reshard_ok}")


def test_criterion_6_planner_soundness(tmp_path):
    cfg = load_config(str(CONFIGS / "production_cluster.yaml"))
    result = plan_search(cfg.cluster, cfg.model, cfg.workload, cfg.cost)

    # independent enumeration of the same grid
    expected = []
    grid = 0
    for (sp, pl), stage, r, o in itertools.product(
            candidate_sp_sizes(cfg.cluster, cfg.model), (0, 1, 2, 3),
            [round(0.1 * i, 10) for i in range(11)], (0.0, 0.2)):
        if cfg.cluster.total_devices % sp or r + o > 1.0 + 1e-9:
            continue
        grid += 1
        dp = cfg.cluster.total_devices // sp
        strat = TrainStrategy(
            sp_size=sp, sp_placement=pl, dp_size=dp, zero_stage=stage,
            recompute_ratio=r, offload_ratio=o,
            global_batch=cfg.workload.global_batch,
            grad_accum=math.ceil(cfg.workload.global_batch / dp))
        est = iteration_time(strat, cfg.cluster, cfg.model, cfg.workload,
                             cfg.cost)
        if est.feasible:
            expected.append((strat, est))
    expected.sort(key=lambda se: (
        se[1].total,
        se[1].breakdown.device_total + se[1].breakdown.host_pinned,
        se[0].key()))
    order_exact = (
        grid >= 200 and grid == result.grid_size
        and len(result.ranked) == len(expected)
        and all(s_got == s_want
                and abs(e_got.total - e_want.total) <= 1e-12 * e_want.total
                for (s_got, e_got), (s_want, e_want)
                in zip(result.ranked, expected))
    )

    # equal seeds, equal bytes, for every CSV the commands emit
    blobs = []
    for name in ("run1", "run2"):
        out = tmp_path / name
        assert cli.main(["plan", "--config", str(CONFIGS / "production_cluster.yaml"),
                         "--out", str(out), "--seed", "11"]) == 0
        assert cli.main(["sweep", "--config", str(CONFIGS / "production_cluster.yaml"),
                         "--out", str(out), "--seed", "11",
                         "--axis", "frames"]) == 0
        blobs.append((out / "strategies.csv").read_bytes()
                     + (out / "sweep_frames.csv").read_bytes())
    byte_stable = blobs[0] == blobs[1]

    report(6, order_exact and byte_stable,
           f"search matches brute force over {grid} grid points "
           f"({len(expected)} feasible, exact order), repeated runs "
           f"byte-identical: {byte_stable}")
