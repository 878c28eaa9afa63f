"""CSV, plot-data and figure output for experiment results."""
import csv
import io
import math
from pathlib import Path

TRIAL_HEADER = ["setting", "sweep_name", "sweep_value", "estimator", "trial", "sensitivity", "specificity", "rrmse",
                "runtime_ms", "seed"]
METRICS = ("sensitivity", "specificity", "rrmse")


def fmt(x):
    """Full-precision float text (17 significant digits)."""
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        return format(x, ".17g")
    return str(x)


def short(x):
    """Six significant digits for console output."""
    if isinstance(x, float):
        return "nan" if math.isnan(x) else format(x, ".6g")
    return str(x)


def _csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def trials_csv(cfg, results, timing=False):
    """Per-trial metrics. ``runtime_ms`` is left empty unless ``timing`` (keeps output reproducible)."""
    rows = []
    for res in results:
        value = cfg.sweep_values[res.si]
        for est, sens, spec, err, rt in res.rows:
            rows.append([cfg.setting, cfg.sweep_name, value, est, res.trial, sens, spec, err,
                         rt if timing else "", res.seed])
    return _csv(rows, TRIAL_HEADER)


def failures_csv(cfg, results):
    rows = [[cfg.setting, cfg.sweep_values[r.si], est, r.trial, msg] for r in results for est, msg in r.failures]
    return _csv(rows, ["setting", "sweep_value", "estimator", "trial", "error"])


def aggregate_csv(cfg, agg, timing=False):
    header = ["setting", "sweep_name", "sweep_value", "estimator", "trials", "failed", "sensitivity_mean",
              "sensitivity_std", "specificity_mean", "specificity_std", "rrmse_mean", "rrmse_std", "runtime_ms_mean"]
    rows = [[cfg.setting, cfg.sweep_name, m.sweep_value, m.estimator, m.trials, m.failed, m.sensitivity,
             m.sensitivity_std, m.specificity, m.specificity_std, m.rrmse, m.rrmse_std,
             m.runtime_ms if timing else ""] for m in agg]
    return _csv(rows, header)


def stage_csv(cfg, table):
    rows = [[cfg.setting, cfg.model, v, stage, ne, net, nef, k] for v, stage, ne, net, nef, k in table]
    return _csv(rows, ["setting", "model", cfg.sweep_name, "stage", "N_E", "N_ET", "N_EF", "trials"])


def trace_csv(cfg, results):
    rows = []
    for res in results:
        for stage, f in enumerate(res.f_ape):
            rows.append([cfg.setting, cfg.sweep_values[res.si], res.trial, stage, f])
    return _csv(rows, ["setting", cfg.sweep_name, "trial", "stage", "f_ape"])


def plot_data(cfg, agg):
    """``{filename: text}`` two-column ``sweep_value mean`` files, one per (estimator, metric)."""
    files = {}
    for est in cfg.estimators:
        for metric in METRICS:
            lines = [f"# {cfg.setting} {est} {metric} vs {cfg.sweep_name}"]
            for m in agg:
                if m.estimator == est:
                    lines.append(f"{fmt(m.sweep_value)} {fmt(getattr(m, metric))}")
            files[f"{cfg.setting}_{est}_{metric}.dat"] = "\n".join(lines) + "\n"
    return files


def write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def render_figures(cfg, agg, out_dir, results=None):
    """Metric-vs-sweep figures (and the stopping-function traces, if any) as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    written = []
    for metric in METRICS:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for est in cfg.estimators:
            pts = [(m.sweep_value, getattr(m, metric)) for m in agg if m.estimator == est]
            pts = [(x, y) for x, y in pts if not math.isnan(y)]
            if pts:
                ax.plot(*zip(*pts), marker="o", label=est)
        ax.set_xlabel(cfg.sweep_name)
        ax.set_ylabel(metric)
        ax.set_title(f"{cfg.setting} ({cfg.model})")
        if ax.lines:
            ax.legend()
        fig.tight_layout()
        path = out_dir / f"{cfg.setting}_{metric}.png"
        fig.savefig(path, dpi=120, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    if results and any(r.f_ape for r in results):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for res in results:
            if res.f_ape and res.trial == 0:
                vals = [math.log(f) if f > 0 else float("nan") for f in res.f_ape[1:]]
                ax.plot(range(1, len(vals) + 1), vals, marker=".",
                        label=f"{cfg.sweep_name}={fmt(cfg.sweep_values[res.si])}")
        ax.set_xlabel("stage")
        ax.set_ylabel("log f_ape")
        ax.legend(fontsize="small")
        fig.tight_layout()
        path = out_dir / f"{cfg.setting}_f_ape.png"
        fig.savefig(path, dpi=120, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written


def write_report(cfg, results, agg, out_dir, timing=False, figures=True, stages=None):
    """Write all artifacts of one experiment; returns the list of paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = cfg.setting
    paths = []

    def put(name, text):
        write_text(out_dir / name, text)
        paths.append(out_dir / name)

    put(f"{tag}_trials.csv", trials_csv(cfg, results, timing))
    put(f"{tag}_aggregate.csv", aggregate_csv(cfg, agg, timing))
    if any(r.failures for r in results):
        put(f"{tag}_failures.csv", failures_csv(cfg, results))
    if stages:
        put(f"{tag}_stages.csv", stage_csv(cfg, stages))
    if any(r.f_ape for r in results):
        put(f"{tag}_f_ape.csv", trace_csv(cfg, results))
    for name, text in plot_data(cfg, agg).items():
        put(name, text)
    if figures:
        paths.extend(render_figures(cfg, agg, out_dir, results))
    return paths
