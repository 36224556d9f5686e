"""Command-line entry points: simulate, plan, sweep, calibrate.

Exit codes: 0 on success, 1 for configuration problems, 2 when the sharded
simulation deviates from the single-device reference, 3 when a plan search
finds nothing feasible.
"""

import argparse
import csv
import math
import os
import sys

import yaml

from .config import ConfigError, RunConfig, load_config
from .diffusion import make_linear_schedule
from .executor import (
    ShardingPlan,
    make_batch,
    reference_iteration,
    run_sp_iteration,
)
from .model import ToyDenoiser
from .numerics import SeededRng
from .planner import (
    TrainStrategy,
    Workload,
    calibrate,
    candidate_sp_sizes,
    iteration_time,
    memory_saving_strategy,
    plan_search,
)
from .reports import (
    fmt_value,
    plot_calibration,
    plot_comm_bytes,
    plot_strategies,
    plot_sweep,
    write_csv,
)

EQUIVALENCE_TOL = 1e-9
SWEEP_AXES = ("frames", "resolution", "sp_size")

STRATEGY_COLUMNS = ["rank", "sp_size", "placement", "zero_stage",
                    "recompute_ratio", "offload_ratio", "total_s", "compute_s",
                    "comm_s", "recompute_s", "offload_s", "vae_s",
                    "peak_mem_gb", "feasible", "status"]


class _Parser(argparse.ArgumentParser):
    """Argparse that reports usage problems as configuration errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="spsim",
        description=("Deterministic sequence-parallel training simulator and "
                     "iteration-time planner for video diffusion workloads."),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "simulate": "run the sharded toy iteration grid against the reference",
        "plan": "rank training strategies for one input shape",
        "sweep": "trace iteration time along one axis for each strategy family",
        "calibrate": "fit model constants to measured iteration times",
    }
    for name, help_text in specs.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", required=True, metavar="PATH",
                        help="yaml run configuration")
        sp.add_argument("--out", default="./out", metavar="DIR",
                        help="output directory (created if missing)")
        sp.add_argument("--seed", type=int, default=42, metavar="N",
                        help="seed for synthetic data")
        if name == "plan":
            sp.add_argument("--shape", default="", metavar="FxHxW",
                            help="frames x height x width "
                                 "(default: workload from config)")
        if name == "sweep":
            sp.add_argument("--axis", default="frames", metavar="NAME",
                            help=f"one of {', '.join(SWEEP_AXES)}")
    return parser


def _parse_shape(text: str):
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ConfigError(f"--shape must look like FxHxW, got {text!r}")
    try:
        f, h, w = (int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"--shape must be three integers, got {text!r}")
    if min(f, h, w) < 1:
        raise ConfigError(f"--shape values must be positive, got {text!r}")
    return f, h, w


def _toy_plans(cfg: RunConfig):
    """The simulate grid; a plan is either runnable or skipped with a reason."""
    toy = cfg.toy
    runnable, skipped = [], []
    for p in toy.sp_sizes:
        if toy.heads % p != 0:
            skipped.append((p, f"sp={p}: skipped ({toy.heads} heads not "
                               f"divisible by {p})"))
            continue
        if p == 1:
            runnable.append(ShardingPlan(sp_size=1))
            continue
        for axis in toy.axes:
            for attn in toy.attentions:
                for text in toy.text_placements:
                    if text == "fused" and axis != "spatial":
                        continue
                    runnable.append(ShardingPlan(p, axis, attn, text))
    return runnable, skipped


def cmd_simulate(cfg: RunConfig, out: str, seed: int) -> int:
    toy = cfg.toy
    spec = cfg.model.patch
    model = ToyDenoiser.init(SeededRng(seed), spec, dim=toy.dim,
                             heads=toy.heads, depth=toy.depth)
    schedule = make_linear_schedule(toy.timesteps)
    batch = make_batch(seed, toy.frames, toy.height, toy.width,
                       toy.text_len, toy.dim)
    ref = reference_iteration(model, schedule, batch)
    print(f"reference loss {ref.loss:.12g} at timestep {ref.timestep}")

    runnable, skipped = _toy_plans(cfg)
    lines, rows, bytes_per_plan = [], [], {}
    failures = 0
    for plan in runnable:
        got = run_sp_iteration(model, schedule, batch, plan, cfg.cluster)
        dev = abs(got.loss - ref.loss) / abs(ref.loss)
        verdict = "PASS" if dev <= EQUIVALENCE_TOL else "FAIL"
        failures += verdict == "FAIL"
        comm_s = got.log.replay_time(cfg.cluster)
        line = (f"{plan.describe()} rel_dev={dev:.3e} "
                f"comm_s={fmt_value(comm_s)} {verdict}")
        lines.append(line)
        print(line)
        rows.extend(got.log.rows())
        bytes_per_plan[plan.describe()] = got.log.total_bytes_sent()
    for _, reason in skipped:
        lines.append(f"SKIP {reason}")
        print(f"SKIP {reason}")
    verdict = "ALL PASS" if failures == 0 else f"{failures} FAILED"
    lines.append(f"tolerance {EQUIVALENCE_TOL:g}: {verdict}")
    print(lines[-1])

    with open(os.path.join(out, "equivalence.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    write_csv(os.path.join(out, "commlog.csv"),
              ["stage", "collective", "group_size", "placement",
               "bytes_per_device"], rows)
    plot_comm_bytes(bytes_per_plan, os.path.join(out, "commlog.png"),
                    f"bytes sent per plan (seed {seed})")
    return 2 if failures else 0


def _strategy_rows(pairs, start_rank: int):
    rows = []
    for rank, (s, e) in enumerate(pairs, start=start_rank):
        rows.append([
            rank, s.sp_size, s.sp_placement, s.zero_stage,
            float(s.recompute_ratio), float(s.offload_ratio),
            float(e.total), float(e.compute_time), float(e.exposed_comm_time),
            float(e.recompute_time), float(e.exposed_offload_time),
            float(e.vae_time), e.breakdown.device_total / 1e9,
            e.feasible, e.status,
        ])
    return rows


def cmd_plan(cfg: RunConfig, out: str, seed: int, shape: str) -> int:
    if shape:
        frames, height, width = _parse_shape(shape)
        workload = Workload(frames=frames, height=height, width=width,
                            global_batch=cfg.workload.global_batch)
    else:
        workload = cfg.workload
    result = plan_search(cfg.cluster, cfg.model, workload, cfg.cost,
                         recompute_grid=cfg.search.recompute_grid,
                         offload_grid=cfg.search.offload_grid)
    rows = _strategy_rows(result.ranked, 1)
    rows += _strategy_rows(result.rejected, len(result.ranked) + 1)
    columns = list(STRATEGY_COLUMNS)
    if not result.ranked:
        # nothing fits: say why, per row
        columns.append("binding_constraint")
        for row, (_, est) in zip(rows, result.rejected):
            row.append(est.violated)
    write_csv(os.path.join(out, "strategies.csv"), columns, rows)

    tokens = workload.tokens(cfg.model.patch)
    shape_label = f"{workload.frames}x{workload.height}x{workload.width}"
    if result.ranked:
        plot_strategies(result.ranked, os.path.join(out, "strategies.png"),
                        f"fastest feasible plans, {shape_label} "
                        f"({tokens:,} tokens)")
        best_s, best_e = result.ranked[0]
        print(f"{len(result.ranked)} of {result.grid_size} strategies feasible "
              f"for {shape_label} ({tokens:,} tokens)")
        print(f"best: {best_s.describe()} -> {best_e.total:.1f} s/iter, "
              f"{best_e.breakdown.device_total / 1e9:.1f} GB peak")
        return 0
    print(f"no feasible strategy for {shape_label} ({tokens:,} tokens); "
          f"binding constraint: {result.binding_constraint}")
    return 3


def _sweep_families(cfg: RunConfig):
    """Named fixed strategies whose scaling the sweep traces."""
    candidates = candidate_sp_sizes(cfg.cluster, cfg.model)
    total = cfg.cluster.total_devices
    gb = cfg.workload.global_batch
    families = []
    intra = [sp for sp, placement in candidates if placement == "intra"
             and total % sp == 0]
    if intra:
        sp = max(intra)
        dp = total // sp
        families.append(("intra_workflow", TrainStrategy(
            sp_size=sp, sp_placement="intra", dp_size=dp, zero_stage=3,
            recompute_ratio=0.8, offload_ratio=0.2, global_batch=gb,
            grad_accum=math.ceil(gb / dp))))
    for sp, placement in candidates:
        if placement != "cross" or total % sp != 0:
            continue
        dp = total // sp
        name = f"cross_{sp // cfg.cluster.devices_per_node}node"
        families.append((name, TrainStrategy(
            sp_size=sp, sp_placement="cross", dp_size=dp, zero_stage=3,
            recompute_ratio=0.0, offload_ratio=0.0, global_batch=gb,
            grad_accum=math.ceil(gb / dp))))
    return families


def cmd_sweep(cfg: RunConfig, out: str, seed: int, axis: str) -> int:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"--axis must be one of {', '.join(SWEEP_AXES)}, "
                          f"got {axis!r}")
    wl = cfg.workload
    patch = cfg.model.patch
    rows, series = [], {}

    def record(family, axis_value, workload, strategy):
        est = iteration_time(strategy, cfg.cluster, cfg.model, workload,
                             cfg.cost)
        tokens = workload.tokens(patch)
        rows.append([family, axis_value, tokens, float(est.total), est.feasible])
        series.setdefault(family, []).append((tokens, est.total, est.feasible))

    if axis == "frames":
        sweep = cfg.sweep
        values = range(sweep.frames_start, sweep.frames_stop + 1,
                       sweep.frames_step)
        for family, strategy in _sweep_families(cfg):
            for frames in values:
                record(family, frames,
                       Workload(frames, wl.height, wl.width, wl.global_batch),
                       strategy)
    elif axis == "resolution":
        for family, strategy in _sweep_families(cfg):
            for height, width in cfg.sweep.resolutions:
                record(family, f"{height}x{width}",
                       Workload(wl.frames, height, width, wl.global_batch),
                       strategy)
    else:  # sp_size
        total = cfg.cluster.total_devices
        for sp, placement in candidate_sp_sizes(cfg.cluster, cfg.model):
            if total % sp != 0:
                continue
            dp = total // sp
            g = math.ceil(wl.global_batch / dp)
            for family, r, o in (("baseline", 0.0, 0.0),
                                 ("workflow", 0.8, 0.2)):
                record(family, sp, wl, TrainStrategy(
                    sp_size=sp, sp_placement=placement, dp_size=dp,
                    zero_stage=3, recompute_ratio=r, offload_ratio=o,
                    global_batch=wl.global_batch, grad_accum=g))

    path = os.path.join(out, f"sweep_{axis}.csv")
    write_csv(path, ["family", "axis_value", "tokens", "total_s", "feasible"],
              rows)
    plot_sweep(series, os.path.join(out, f"sweep_{axis}.png"),
               f"iteration time vs {axis}", "sequence tokens")
    feasible = sum(1 for r in rows if r[4])
    print(f"swept {axis}: {len(rows)} points ({feasible} feasible) "
          f"across {len(series)} families -> {path}")
    return 0


def _load_anchors(path: str, cal):
    """Measured iteration times: columns shape, strategy, seconds (+ratio)."""
    anchors, labels = [], []
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read anchors {path}: {exc}")
    with fh:
        reader = csv.DictReader(fh)
        need = {"shape", "strategy", "seconds"}
        if reader.fieldnames is None or need - set(reader.fieldnames):
            raise ConfigError(
                f"{path}: anchors need columns {', '.join(sorted(need))} "
                f"(plus optional ratio)"
            )
        for i, row in enumerate(reader, start=2):
            try:
                frames, height, width = _parse_shape(row["shape"])
                ratio = float(row.get("ratio") or 0.0)
                seconds = float(row["seconds"])
                strategy = memory_saving_strategy(
                    row["strategy"].strip(), ratio, dp_size=cal.dp_size,
                    global_batch=cal.global_batch, zero_stage=cal.zero_stage)
            except (ConfigError, ValueError) as exc:
                raise ConfigError(f"{path}:{i}: bad anchor row: {exc}")
            workload = Workload(frames, height, width,
                                global_batch=cal.global_batch)
            anchors.append((workload, strategy, seconds))
            labels.append((row["shape"], row["strategy"].strip(), ratio))
    return anchors, labels


def cmd_calibrate(cfg: RunConfig, out: str, seed: int, config_path: str) -> int:
    cal = cfg.calibration
    if not cal.anchors:
        raise ConfigError("calibration.anchors is not set in the config")
    anchors_path = cal.anchors
    if not os.path.isabs(anchors_path):
        anchors_path = os.path.join(os.path.dirname(os.path.abspath(config_path)),
                                    anchors_path)
    anchors, labels = _load_anchors(anchors_path, cal)
    try:
        fit = calibrate(anchors, cfg.cluster, cfg.model, cfg.cost)
    except ValueError as exc:
        raise ConfigError(f"calibration failed: {exc}")

    lines = [
        f"anchors: {len(fit.rows)} from {os.path.basename(anchors_path)}",
        f"fitted efficiency: {fit.params.efficiency:.9g}",
        f"max |residual|: {fit.max_abs_residual * 100:.1f}%",
        "",
        f"{'shape':>12} {'strategy':>12} {'ratio':>5} {'measured':>9} "
        f"{'modeled':>9} {'residual':>9}",
    ]
    for (shape, kind, ratio), row in zip(labels, fit.rows):
        lines.append(
            f"{shape:>12} {kind:>12} {ratio:>5g} {row.target_s:>9.2f} "
            f"{row.predicted_s:>9.2f} {row.residual * 100:>+8.1f}%"
        )
    text = "\n".join(lines) + "\n"
    with open(os.path.join(out, "calibration.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")

    calibrated = dict(cfg.raw)
    cost = dict(calibrated.get("cost") or {})
    cost["efficiency"] = float(fit.params.efficiency)
    calibrated["cost"] = cost
    with open(os.path.join(out, "calibrated.yaml"), "w", encoding="utf-8") as fh:
        fh.write("# regenerated by `spsim calibrate`; efficiency refit\n")
        yaml.safe_dump(calibrated, fh, sort_keys=False)
    plot_calibration(fit.rows, os.path.join(out, "calibration.png"),
                     "modeled vs measured iteration time")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        os.makedirs(args.out, exist_ok=True)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.out, args.seed)
        if args.command == "plan":
            return cmd_plan(cfg, args.out, args.seed, args.shape)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.out, args.seed, args.axis)
        return cmd_calibrate(cfg, args.out, args.seed, args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
