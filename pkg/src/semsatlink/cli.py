"""Command-line experiment runner.

Subcommands: gen-data, train, sweep, ber-curve, report. Every run
reads an INI-style config (section per subcommand), applies command
line overrides, and writes the fully resolved config next to its
outputs so any artifact can be regenerated from that file alone.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import configparser
import csv
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import codec, pipeline
from .channel import ChannelProfile
from .dataset import SceneSpec, generate_scene, save_scene, scene_batch
from .ldpc import ldpc_decode, ldpc_encode, make_ldpc_code
from .linksim import Scenario, run_sweep, trace_to_rows
from .ofdm import transmit_bits
from .channel import ChannelState, sample_channel

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    """Bad invocation or configuration; maps to exit code 1."""


# ---------------------------------------------------------------------------
# Config plumbing


DEFAULTS: Dict[str, Dict[str, str]] = {
    "common": {
        "seed": "0",
    },
    "gen-data": {
        "count": "16",
        "height": "64",
        "width": "32",
        "num_objects": "4",
        "num_categories": "4",
    },
    "train": {
        "stage": "base",
        "run_dir": "runs/default",
        "epochs": "",
    },
    "sweep": {
        "run_dir": "",
        "episodes": "32",
        "snr_low_db": "-10",
        "snr_high_db": "10",
        "cci_fraction": "0.0",
        "pipelines": "semantic,adaptive-semantic,classic",
        "modes": "regenerative",
        "detector_mode": "oracle",
        "retransmission_limit": "4",
        "uplink_delay_ms": "3.0",
        "downlink_delay_ms": "5.0",
    },
    "ber-curve": {
        "modulation": "16",
        "snrs_db": "0,2,4,6,8,10,12,14",
        "uncoded_bits": "200000",
        "coded_info_bits": "81920",
        "with_coded": "false",
    },
    "report": {
        "in_dir": "",
    },
}


def load_config(path: Optional[str], overrides: Sequence[str],
                section: str, seed: Optional[int]) -> Dict[str, str]:
    """Defaults < config file < --set overrides < --seed flag."""
    parser = configparser.ConfigParser()
    parser.read_dict(DEFAULTS)
    if path:
        if not os.path.exists(path):
            raise UsageError(f"config file not found: {path}")
        parser.read(path)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override must look like key=value or "
                             f"section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        sec, _, name = key.strip().rpartition(".")
        sec = sec or section
        if not parser.has_section(sec):
            parser.add_section(sec)
        parser.set(sec, name, value.strip())
    if seed is not None:
        parser.set("common", "seed", str(seed))
    resolved = dict(parser.items("common"))
    resolved.update(parser.items(section))
    return resolved


def write_resolved(cfg: Dict[str, str], section: str,
                   out_dir: str) -> None:
    parser = configparser.ConfigParser()
    parser.add_section("common")
    parser.set("common", "seed", cfg["seed"])
    parser.add_section(section)
    for key, value in sorted(cfg.items()):
        if key != "seed":
            parser.set(section, key, str(value))
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved.ini"), "w",
              encoding="utf-8") as fh:
        parser.write(fh)


def _cfg_int(cfg: Dict[str, str], key: str) -> int:
    try:
        return int(cfg[key])
    except ValueError:
        raise UsageError(f"{key} must be an integer, got {cfg[key]!r}")


def _cfg_float(cfg: Dict[str, str], key: str) -> float:
    try:
        return float(cfg[key])
    except ValueError:
        raise UsageError(f"{key} must be a number, got {cfg[key]!r}")


def _cfg_list(cfg: Dict[str, str], key: str) -> List[str]:
    return [v.strip() for v in cfg[key].split(",") if v.strip()]


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.set, "gen-data", args.seed)
    count = _cfg_int(cfg, "count")
    if count < 0:
        raise UsageError("count cannot be negative")
    seed = _cfg_int(cfg, "seed")
    spec = SceneSpec(height=_cfg_int(cfg, "height"),
                     width=_cfg_int(cfg, "width"),
                     num_objects=_cfg_int(cfg, "num_objects"),
                     num_categories=_cfg_int(cfg, "num_categories"),
                     background_seed=seed)
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for k in range(count):
        scene = generate_scene(spec, rng_seed=seed * 1_000_000 + k)
        paths = save_scene(scene, out_dir)
        rows.append([scene.scene_id] +
                    [os.path.basename(paths[n])
                     for n in ("image", "segmap", "mask")])
    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "image", "segmap", "mask"])
        writer.writerows(rows)
    write_resolved(cfg, "gen-data", out_dir)
    print(f"wrote {count} scenes to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set, "train", args.seed)
    stage = args.stage or cfg["stage"]
    if stage not in pipeline.STAGES:
        raise UsageError(f"unknown stage {stage!r}; expected one of "
                         f"{', '.join(pipeline.STAGES)}")
    run_dir = args.run_dir or cfg["run_dir"]
    epochs = None
    if cfg["epochs"]:
        epochs = _cfg_int(cfg, "epochs")
    try:
        run = pipeline.TrainingRun(run_dir, seed=_cfg_int(cfg, "seed"))
        result = run.run_stage(stage, epochs=epochs)
    except pipeline.MissingStageError as exc:
        raise UsageError(str(exc))
    cfg["stage"] = stage
    cfg["run_dir"] = run_dir
    write_resolved(cfg, "train", run_dir)
    losses = ", ".join(f"{k} {v:.5f}"
                       for k, v in sorted(result["final_loss"].items()))
    print(f"stage {stage}: {result['epochs']} epochs in "
          f"{result['seconds']:.1f}s ({losses})")
    return 0


# ---------------------------------------------------------------------------
# sweep


def _sweep_scenarios(cfg: Dict[str, str]) -> List[Scenario]:
    lo = _cfg_float(cfg, "snr_low_db")
    hi = _cfg_float(cfg, "snr_high_db")
    fraction = _cfg_float(cfg, "cci_fraction")
    pipelines = _cfg_list(cfg, "pipelines")
    modes = _cfg_list(cfg, "modes")
    detector = cfg["detector_mode"]
    scenarios = []
    for mode in modes:
        for pipe in pipelines:
            for up in (lo, hi):
                for down in (lo, hi):
                    det_mode = ("crc-baseline" if pipe == "classic"
                                else detector)
                    try:
                        scenarios.append(Scenario(
                            uplink_snr_db=up, downlink_snr_db=down,
                            uplink_cci_fraction=fraction,
                            downlink_cci_fraction=fraction,
                            mode=mode, pipeline=pipe,
                            detector_mode=det_mode,
                            retransmission_limit=_cfg_int(
                                cfg, "retransmission_limit"),
                            uplink_delay_ms=_cfg_float(
                                cfg, "uplink_delay_ms"),
                            downlink_delay_ms=_cfg_float(
                                cfg, "downlink_delay_ms")))
                    except ValueError as exc:
                        raise UsageError(str(exc))
    return scenarios


AGGREGATE_COLUMNS = [
    "pipeline", "mode", "detector_mode", "uplink_snr_db",
    "downlink_snr_db", "uplink_cci_fraction", "downlink_cci_fraction",
    "episodes", "success_rate", "mean_delay_ms", "p50_delay_ms",
    "p90_delay_ms", "mean_retransmissions", "satellite_rejections",
    "gateway_rejections", "accepted_required_mse_max",
    "accepted_required_mse_mean",
]


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.set, "sweep", args.seed)
    seed = _cfg_int(cfg, "seed")
    episodes = _cfg_int(cfg, "episodes")
    if episodes < 1:
        raise UsageError("episodes must be >= 1")
    scenarios = _sweep_scenarios(cfg)
    run_dir = args.run_dir or cfg["run_dir"]
    bank = None
    if run_dir:
        run = pipeline.TrainingRun(run_dir, seed=seed)
        bundle = run.bundle()
        if cfg["detector_mode"] == "trained":
            bank = run.detector_bank()
    else:
        if cfg["detector_mode"] == "trained":
            raise UsageError("trained detector mode needs --run-dir "
                             "with trained checkpoints")
        bundle = codec.make_bundle(seed=seed)
    scenes = scene_batch(SceneSpec(), range(episodes))
    rows, traces = run_sweep(scenarios, scenes, bundle, rng_seed=seed,
                             detector_bank=bank, keep_traces=True)
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "aggregate.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(AGGREGATE_COLUMNS)
        for row in rows:
            writer.writerow([row[c] for c in AGGREGATE_COLUMNS])
    with open(os.path.join(out_dir, "traces.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode_id", "t_ms", "node", "kind",
                         "detail"])
        for episode_id, trace in traces:
            writer.writerows(trace_to_rows(trace, episode_id))
    with open(os.path.join(out_dir, "episodes.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode_id", "pipeline", "mode",
                         "uplink_snr_db", "downlink_snr_db", "verdict",
                         "total_delay_ms", "retransmissions"])
        k = 0
        for s_idx, scenario in enumerate(scenarios):
            for _ in range(episodes):
                episode_id, trace = traces[k]
                writer.writerow([
                    episode_id, scenario.pipeline, scenario.mode,
                    scenario.uplink_snr_db, scenario.downlink_snr_db,
                    trace.final_verdict, trace.total_delay_ms,
                    trace.retransmission_count])
                k += 1
    write_resolved(cfg, "sweep", out_dir)
    print(f"swept {len(scenarios)} scenarios x {episodes} episodes "
          f"-> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# ber-curve


def cmd_ber_curve(args) -> int:
    cfg = load_config(args.config, args.set, "ber-curve", args.seed)
    seed = _cfg_int(cfg, "seed")
    order = _cfg_int(cfg, "modulation")
    if order not in (4, 16):
        raise UsageError("modulation must be 4 or 16")
    snrs = [float(v) for v in _cfg_list(cfg, "snrs_db")]
    if not snrs:
        raise UsageError("snr list cannot be empty")
    uncoded_bits = _cfg_int(cfg, "uncoded_bits")
    with_coded = cfg["with_coded"].lower() in ("true", "1", "yes")
    bits_per_symbol = 2 if order == 4 else 4
    profile = ChannelProfile(powers_db=(0.0,), delays_ns=(0.0,),
                             normalized_doppler=0.0)
    code = make_ldpc_code() if with_coded else None
    out_rows = []
    rng = np.random.default_rng([23, seed])
    for snr_db in snrs:
        h = sample_channel(profile, int(rng.integers(2 ** 31)))
        state = ChannelState(snr_db, np.zeros(512, dtype=bool))
        payload = rng.integers(0, 2, size=uncoded_bits,
                               dtype=np.uint8)
        link = transmit_bits(payload, order, h, state,
                             int(rng.integers(2 ** 31)))
        uncoded = float(np.mean(link.bits != payload))
        simulated = uncoded_bits
        coded = ""
        if with_coded:
            info = rng.integers(0, 2,
                                size=_cfg_int(cfg, "coded_info_bits"),
                                dtype=np.uint8)
            blocks = info.reshape(-1, code.k)
            sent = ldpc_encode(blocks, code).ravel()
            clink = transmit_bits(sent, order, h, state,
                                  int(rng.integers(2 ** 31)))
            llrs = clink.llrs[:sent.size].reshape(-1, code.n)
            decoded, _ = ldpc_decode(llrs, code)
            coded = float(np.mean(decoded != blocks))
            simulated += sent.size
        out_rows.append([snr_db, uncoded, coded, simulated])
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "ber.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["snr_db", "uncoded_ber", "coded_ber",
                         "bits_simulated"])
        writer.writerows(out_rows)
    svg_rows = [(r[0], r[1]) for r in out_rows]
    _write_line_svg(os.path.join(out_dir, "ber.svg"), svg_rows,
                    "Es/N0 (dB)", "BER", log_y=True)
    write_resolved(cfg, "ber-curve", out_dir)
    print(f"measured {len(snrs)} SNR points -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# report


def _read_csv(path: str) -> List[Dict[str, str]]:
    if not os.path.exists(path):
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        try:
            return list(csv.DictReader(fh))
        except csv.Error as exc:
            raise UsageError(f"malformed CSV {path}: {exc}")


def _svg_header(width: int, height: int) -> List[str]:
    return [f'<svg xmlns="http://www.w3.org/2000/svg" '
            f'width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">',
            f'<rect width="{width}" height="{height}" fill="white"/>']


def _svg_text(x: float, y: float, text: str, size: int = 11,
              anchor: str = "start") -> str:
    safe = (str(text).replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;"))
    return (f'<text x="{x:.1f}" y="{y:.1f}" font-size="{size}" '
            f'text-anchor="{anchor}" font-family="sans-serif">'
            f'{safe}</text>')


def _write_bar_svg(path: str, labels: List[str], values: List[str],
                   title: str) -> None:
    """Bar chart whose printed labels are the raw CSV strings."""
    n = max(len(labels), 1)
    bar_w, gap, left, top, plot_h = 46, 14, 60, 40, 220
    width = left + n * (bar_w + gap) + 30
    height = top + plot_h + 120
    parts = _svg_header(width, height)
    parts.append(_svg_text(width / 2, 20, title, 14, "middle"))
    numeric = [float(v) for v in values] if values else []
    peak = max([abs(v) for v in numeric] + [1.0])
    for k, (label, raw) in enumerate(zip(labels, values)):
        v = float(raw)
        h = plot_h * abs(v) / peak
        x = left + k * (bar_w + gap)
        y = top + plot_h - h
        parts.append(f'<rect x="{x}" y="{y:.1f}" width="{bar_w}" '
                     f'height="{h:.1f}" fill="#4477aa"/>')
        parts.append(_svg_text(x + bar_w / 2, y - 4, raw, 10, "middle"))
        parts.append(
            f'<g transform="translate({x + bar_w / 2:.1f},'
            f'{top + plot_h + 10}) rotate(45)">'
            + _svg_text(0, 8, label, 9) + "</g>")
    parts.append(f'<line x1="{left - 6}" y1="{top + plot_h}" '
                 f'x2="{width - 20}" y2="{top + plot_h}" '
                 f'stroke="black"/>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))


def _write_line_svg(path: str, points, x_label: str, y_label: str,
                    log_y: bool = False, step: bool = False) -> None:
    left, top, plot_w, plot_h = 60, 30, 360, 220
    width, height = left + plot_w + 30, top + plot_h + 60
    parts = _svg_header(width, height)
    pts = [(float(x), float(y)) for x, y in points
           if not (log_y and float(y) <= 0)]
    if pts:
        xs = [p[0] for p in pts]
        ys = [np.log10(p[1]) if log_y else p[1] for p in pts]
        x_lo, x_hi = min(xs), max(xs)
        y_lo, y_hi = min(ys), max(ys)
        x_span = (x_hi - x_lo) or 1.0
        y_span = (y_hi - y_lo) or 1.0
        coords = []
        for (x, _), y in zip(pts, ys):
            px = left + plot_w * (x - x_lo) / x_span
            py = top + plot_h * (1 - (y - y_lo) / y_span)
            coords.append((px, py))
        if step:
            d = [f"M {coords[0][0]:.1f} {coords[0][1]:.1f}"]
            for (x0, _), (x1, y1) in zip(coords, coords[1:]):
                d.append(f"H {x1:.1f} V {y1:.1f}")
            path_d = " ".join(d)
        else:
            path_d = "M " + " L ".join(f"{x:.1f} {y:.1f}"
                                       for x, y in coords)
        parts.append(f'<path d="{path_d}" fill="none" '
                     f'stroke="#aa3344" stroke-width="1.5"/>')
        parts.append(_svg_text(left, top + plot_h + 34,
                               f"{x_label}: {x_lo:g} to {x_hi:g}"))
        parts.append(_svg_text(left, 18,
                               f"{y_label}"
                               + (" (log scale)" if log_y else "")))
    parts.append(f'<rect x="{left}" y="{top}" width="{plot_w}" '
                 f'height="{plot_h}" fill="none" stroke="black"/>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))


def cmd_report(args) -> int:
    cfg = load_config(args.config, args.set, "report", args.seed)
    in_dir = args.in_dir or cfg["in_dir"]
    if not in_dir:
        raise UsageError("report needs an input directory (--in-dir)")
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    aggregate = _read_csv(os.path.join(in_dir, "aggregate.csv"))
    episodes = _read_csv(os.path.join(in_dir, "episodes.csv"))
    summary_path = os.path.join(out_dir, "summary.txt")
    if not aggregate:
        with open(summary_path, "w", encoding="utf-8") as fh:
            fh.write("no sweep rows found\n")
        write_resolved(cfg, "report", out_dir)
        print(f"empty report -> {out_dir}")
        return 0
    labels = [f"{r['pipeline'][:7]}/{r['mode'][:5]} "
              f"u{r['uplink_snr_db']} d{r['downlink_snr_db']}"
              for r in aggregate]
    _write_bar_svg(os.path.join(out_dir, "success_rates.svg"), labels,
                   [r["success_rate"] for r in aggregate],
                   "Delivery success rate per cell")
    sat = sum(int(r["satellite_rejections"]) for r in aggregate)
    gw = sum(int(r["gateway_rejections"]) for r in aggregate)
    _write_bar_svg(os.path.join(out_dir, "rejection_split.svg"),
                   ["satellite", "gateway"], [str(sat), str(gw)],
                   "Rejections by node")
    delays = sorted(float(r["total_delay_ms"]) for r in episodes)
    if delays:
        cdf = [(d, (k + 1) / len(delays))
               for k, d in enumerate(delays)]
        _write_line_svg(os.path.join(out_dir, "delay_cdf.svg"), cdf,
                        "delay (ms)", "P(delay <= x)", step=True)
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(aggregate)} scenario cells, "
                 f"{len(episodes)} episodes\n")
        for r in aggregate:
            fh.write(f"  {r['pipeline']:18s} {r['mode']:12s} "
                     f"up {r['uplink_snr_db']:>5s} dB "
                     f"down {r['downlink_snr_db']:>5s} dB  "
                     f"success {r['success_rate']}\n")
        fh.write(f"rejections: satellite {sat}, gateway {gw}\n")
    write_resolved(cfg, "report", out_dir)
    print(f"report -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so usage errors map to exit code 1."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="semsatlink",
        description="Semantic satellite-link simulation toolkit")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def common(p, out=True):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="override a config key")
        p.add_argument("--seed", type=int, help="global seed")
        if out:
            p.add_argument("--out-dir", required=True,
                           help="output directory")

    p = sub.add_parser("gen-data", help="generate a scene corpus")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one pipeline stage")
    common(p, out=False)
    p.add_argument("--stage", choices=pipeline.STAGES)
    p.add_argument("--run-dir", help="training run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run the scenario grid")
    common(p)
    p.add_argument("--run-dir", help="trained checkpoint directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ber-curve", help="measure BER over SNR")
    common(p)
    p.set_defaults(func=cmd_ber_curve)

    p = sub.add_parser("report", help="render sweep results")
    common(p)
    p.add_argument("--in-dir", help="sweep output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
