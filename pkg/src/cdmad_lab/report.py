"""Result files: metrics.csv, per-run confusion and bias traces, SVG bar
charts of softmax(g_I) per epoch, summary.json and results.json.

Every writer is deterministic, so emitting the same results twice gives
byte-identical files.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

from .data import LongTailSpec
from .harness import RunResult, aggregate, refine_label
from .metrics import confusion_proportion_csv, confusion_text

CSV_HEADER = ("config_id", "seed", "algo", "refine", "probe", "gamma_l", "gamma_u",
              "bacc", "gm", "ber", "acc_many", "acc_medium", "acc_few")


class EmitError(OSError):
    pass


def fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def run_tag(r: RunResult):
    return f"{r.config_id}_s{r.seed}"


def _gammas(cfg):
    lt = {**LongTailSpec().__dict__, **cfg.get("longtail", {})}
    return float(lt["gamma_l"]), float(lt["gamma_u"])


def metrics_row(r: RunResult):
    gl, gu = _gammas(r.config)
    f = r.final
    many, medium, few = f["group_acc"]
    vals = (r.config_id, r.seed, r.config["algo"], refine_label(r.config), r.probe, gl, gu,
            f["bacc"], f["gm"], f["ber"], many, medium, few)
    return ",".join(fmt(v) for v in vals)


def metrics_csv(results):
    ok = sorted((r for r in results if not r.error), key=lambda r: (r.config_id, r.seed))
    return "\n".join([",".join(CSV_HEADER), *map(metrics_row, ok)]) + "\n"


def bias_trace_csv(r: RunResult):
    C = len(r.bias_trace[0]) if r.bias_trace else 0
    lines = ["epoch,phase," + ",".join(f"p_{k}" for k in range(C))]
    for e, p in enumerate(r.bias_trace):
        phase = r.phase_trace[e] if e < len(r.phase_trace) else ""
        lines.append(f"{e},{phase}," + ",".join(f"{v:.6f}" for v in p))
    return "\n".join(lines) + "\n"


def bias_svg(trace, title="", cols=10):
    """Grid of small bar charts, one panel per epoch, bars = softmax(g_I)."""
    n = len(trace)
    C = len(trace[0]) if n else 0
    pw, ph, pad = 120, 80, 16
    rows = max(1, math.ceil(n / cols))
    W, H = cols * (pw + pad) + pad, rows * (ph + pad + 12) + pad + 20
    top = max([max(p) for p in trace] + [1e-12])
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="10">',
           f'<text x="{pad}" y="14">{title}</text>']
    bw = pw / max(C, 1)
    for e, p in enumerate(trace):
        x0 = pad + (e % cols) * (pw + pad)
        y0 = 20 + pad + (e // cols) * (ph + pad + 12)
        out.append(f'<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>')
        for k, v in enumerate(p):
            h = ph * v / top
            out.append(f'<rect x="{x0 + k * bw + 1:.2f}" y="{y0 + ph - h:.2f}" '
                       f'width="{bw - 2:.2f}" height="{h:.2f}" fill="#4a6fa5"/>')
        out.append(f'<text x="{x0}" y="{y0 + ph + 11}">epoch {e}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def emit(results, out_dir):
    """Write every output file for ``results`` into ``out_dir``; returns the
    list of paths written."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = {"metrics.csv": metrics_csv(results),
                 "summary.json": _dump(aggregate(results)),
                 "results.json": _dump([r.to_dict() for r in results])}
        for r in results:
            if r.error:
                continue
            tag = run_tag(r)
            files[f"confusion_{tag}.txt"] = (confusion_text(r.final["confusion"]) + "\n"
                                             + confusion_proportion_csv(r.final["confusion"]))
            files[f"bias_trace_{tag}.csv"] = bias_trace_csv(r)
            files[f"bias_{tag}.svg"] = bias_svg(r.bias_trace, f"softmax(g_I) per epoch, {tag}")
        written = []
        for name in sorted(files):
            path = out / name
            path.write_text(files[name], encoding="utf-8", newline="\n")
            written.append(path)
    except OSError as exc:
        raise EmitError(f"cannot write results to {out}: {exc}") from exc
    return written


def load_results(in_dir):
    path = Path(in_dir) / "results.json"
    with open(path, encoding="utf-8") as fh:
        return [RunResult.from_dict(d) for d in json.load(fh)]
