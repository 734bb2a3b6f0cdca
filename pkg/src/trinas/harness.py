"""Batch experiment driver: search, evaluate, ablate, verify, convert.

Every command takes a resolved :class:`~trinas.config.ExperimentConfig`
(or a path to one) plus an output directory, runs to completion without
interaction, and leaves three kinds of artifact behind: line-oriented
text (genotypes), CSV (metrics, summaries) and a small binary checkpoint.
Each artifact embeds the config hash in its header, so any file found on
disk can be traced back to the exact settings that produced it.

Ablation grids can fan out across worker processes; the ``LFM_THREADS``
environment variable caps how many, with a default of one (fully serial,
deterministic timing). Results are aggregated in grid order regardless of
completion order, so parallel and serial runs produce identical CSVs.
"""

import csv
import io
import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import optim
from .autodiff.collections import gradients
from .config import ExperimentConfig, _canon, _resolve, load_config
from .data import (LabeledImageSet, Split, nchw, save_lfmc)
from .oracle import (analytic_quadratic_hypergrad, fd_gradients,
                     random_quadratic_problem, unrolled_hypergrad_fd)
from .search_space import (DiscreteCell, EvalNetwork, GenotypeError,
                           SupernetSpec, genotype_text, opset_hash,
                           parse_genotype_text)
from .trilevel import evaluate_accuracy, hypergradient_arch, run_search
from .data import BatchStream


class CheckpointError(ValueError):
    """The byte stream is not a valid checkpoint."""


@dataclass
class RunReport:
    """What one command produced and where it put it."""

    genotype: str
    genotype_path: str
    metrics_path: str
    checkpoint_path: str
    wall_clock: float
    config_hash: str
    details: dict = field(default_factory=dict)


# -- checkpoint container --------------------------------------------------


_CKPT_MAGIC = b"LFCP"
_CKPT_VERSION = 1


def save_checkpoint(path, state: dict, config_hash: str) -> None:
    """Write named float64 arrays with a versioned header."""
    out = io.BytesIO()
    out.write(_CKPT_MAGIC)
    out.write(struct.pack("<H", _CKPT_VERSION))
    out.write(config_hash.ljust(16)[:16].encode("ascii"))
    out.write(struct.pack("<I", len(state)))
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        nb = name.encode("utf-8")
        out.write(struct.pack("<H", len(nb)))
        out.write(nb)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(out.getvalue())


def load_checkpoint(path) -> tuple:
    """Read a checkpoint; returns (config_hash, {name: array})."""
    with open(path, "rb") as fh:
        buf = fh.read()

    def take(n, what):
        nonlocal off
        if off + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes "
                                  f"for {what} at offset {off}")
        piece = buf[off:off + n]
        off += n
        return piece

    off = 0
    if take(4, "magic") != _CKPT_MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config_hash = take(16, "config hash").decode("ascii").strip()
    (count,) = struct.unpack("<I", take(4, "entry count"))
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        nbytes = 8 * int(np.prod(shape, dtype=np.int64)) if ndim else 8
        data = np.frombuffer(take(nbytes, f"data of {name}"), dtype="<f8")
        state[name] = data.reshape(shape).copy()
    return config_hash, state


# -- CSV and SVG emission ----------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_metrics_csv(path, rows: list, num_classes: int,
                      config_hash: str) -> None:
    """Per-iteration search metrics in the documented column order."""
    cols = (["iteration", "epoch", "loss_w1", "loss_gan_g", "loss_gan_h",
             "loss_w2_real", "loss_w2_synth", "val_loss"]
            + [f"l_c{c}" for c in range(num_classes)] + ["grad_norm_A"])
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in cols) + "\n")


def write_rows_csv(path, cols: list, rows: list, config_hash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for row in rows:
            writer.writerow([row[c] if isinstance(row[c], str) else _fmt(row[c])
                             for c in cols])


_PALETTE = ("#1b6ca8", "#c1403d", "#3a7d44", "#8e5ba6", "#c98a12")


def svg_line_chart(series: list, xlabel: str, ylabel: str,
                   width: int = 640, height: int = 400) -> str:
    """A dependency-free SVG line chart.

    ``series`` is a list of (label, xs, ys, yerr-or-None); error bars are
    drawn as vertical whiskers. Output is deterministic for fixed input.
    """
    ml, mr, mt, mb = 60, 16, 16, 44
    pw, ph = width - ml - mr, height - mt - mb
    xs_all = [x for _, xs, _, _ in series for x in xs]
    ys_all = [y for _, _, ys, _ in series for y in ys]
    for _, _, ys, yerr in series:
        if yerr is not None:
            ys_all += [y + e for y, e in zip(ys, yerr)]
            ys_all += [y - e for y, e in zip(ys, yerr)]
    if not xs_all:
        raise ValueError("no points to plot")
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    xpad, ypad = 0.05 * (x1 - x0), 0.05 * (y1 - y0)
    x0, x1, y0, y1 = x0 - xpad, x1 + xpad, y0 - ypad, y1 + ypad
    px = lambda x: ml + (x - x0) / (x1 - x0) * pw
    py = lambda y: mt + (y1 - y) / (y1 - y0) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" '
             'fill="none" stroke="#444"/>']
    for i in range(5):
        xt = x0 + (x1 - x0) * i / 4
        yt = y0 + (y1 - y0) * i / 4
        parts.append(f'<line x1="{px(xt):.1f}" y1="{mt + ph}" '
                     f'x2="{px(xt):.1f}" y2="{mt + ph + 4}" stroke="#444"/>')
        parts.append(f'<text x="{px(xt):.1f}" y="{mt + ph + 18}" '
                     f'font-size="11" text-anchor="middle" '
                     f'font-family="sans-serif">{xt:g}</text>')
        parts.append(f'<line x1="{ml - 4}" y1="{py(yt):.1f}" x2="{ml}" '
                     f'y2="{py(yt):.1f}" stroke="#444"/>')
        parts.append(f'<text x="{ml - 8}" y="{py(yt) + 4:.1f}" '
                     f'font-size="11" text-anchor="end" '
                     f'font-family="sans-serif">{yt:g}</text>')
    parts.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" '
                 f'font-size="12" text-anchor="middle" '
                 f'font-family="sans-serif">{xlabel}</text>')
    parts.append(f'<text x="14" y="{mt + ph / 2:.1f}" font-size="12" '
                 f'text-anchor="middle" font-family="sans-serif" '
                 f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{ylabel}</text>')
    for k, (label, xs, ys, yerr) in enumerate(series):
        color = _PALETTE[k % len(_PALETTE)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        for x, y in zip(xs, ys):
            parts.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" '
                         f'r="2.5" fill="{color}"/>')
        if yerr is not None:
            for x, y, e in zip(xs, ys, yerr):
                parts.append(f'<line x1="{px(x):.1f}" y1="{py(y - e):.1f}" '
                             f'x2="{px(x):.1f}" y2="{py(y + e):.1f}" '
                             f'stroke="{color}"/>')
        parts.append(f'<text x="{ml + pw - 6}" y="{mt + 16 + 14 * k}" '
                     f'font-size="11" text-anchor="end" fill="{color}" '
                     f'font-family="sans-serif">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -- search ------------------------------------------------------------------


def _as_config(cfg) -> ExperimentConfig:
    if isinstance(cfg, ExperimentConfig):
        return cfg
    return load_config(cfg)


def cmd_search(cfg, out_dir, log=None) -> RunReport:
    """Run the relaxed search and write genotype, metrics and checkpoint."""
    cfg = _as_config(cfg)
    os.makedirs(out_dir, exist_ok=True)
    split, _ = cfg.load_data()
    setup = cfg.search_setup()
    chash = cfg.config_hash
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")

    last_good = {}

    def keep(epoch, state):
        last_good.clear()
        last_good.update(state, **{"meta.epoch": np.array(float(epoch))})

    t0 = time.perf_counter()
    try:
        res = run_search(setup, split, log=log, snapshot_hook=keep)
    except ad.NonFiniteError:
        # abort, but leave the newest finite state behind for inspection
        if last_good:
            save_checkpoint(ckpt_path, last_good, chash)
        raise

    geno = genotype_text(res.cell, config_hash=chash,
                         ops_fingerprint=opset_hash(cfg.net_spec.ops))
    geno_path = os.path.join(out_dir, "genotype.txt")
    with open(geno_path, "w") as fh:
        fh.write(geno)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    write_metrics_csv(metrics_path, res.metrics, cfg.net_spec.num_classes,
                      chash)
    final = {"meta.epoch": np.array(float(setup.epochs - 1))}
    for prefix, ws in (("arch", res.arch.weights), ("w1", res.weights["w1"]),
                       ("w2", res.weights["w2"]), ("g", res.weights["g"]),
                       ("h", res.weights["h"])):
        for name, vals in ws.snapshot().items():
            final[f"{prefix}.{name}"] = vals
    save_checkpoint(ckpt_path, final, chash)
    return RunReport(
        genotype=geno, genotype_path=geno_path, metrics_path=metrics_path,
        checkpoint_path=ckpt_path,
        wall_clock=time.perf_counter() - t0, config_hash=chash,
        details={"sup_val_accuracy": res.sup_val_accuracy,
                 "iterations": res.iterations})


# -- evaluate ----------------------------------------------------------------


def _eval_network_for(cfg: ExperimentConfig, cell: DiscreteCell):
    ev = cfg.evaluation
    spec = SupernetSpec(
        num_cells=ev.cells, num_nodes=cell.num_intermediate + 3,
        channels=ev.channels, num_classes=cfg.net_spec.num_classes,
        in_shape=cfg.net_spec.in_shape, ops=cfg.net_spec.ops,
        use_reduction=cell.reduce is not None)
    return EvalNetwork(spec, cell)


def train_eval_network(cfg: ExperimentConfig, cell: DiscreteCell,
                       split: Split, test: LabeledImageSet, log=None):
    """Retrain a discrete cell from scratch on train plus validation.

    Returns (weights, network, metric rows, detail dict). The two search
    halves merge back into one training pool, mirroring the two-phase
    protocol where the search split exists only to steer the architecture.
    """
    ev = cfg.evaluation
    net = _eval_network_for(cfg, cell)
    pool = LabeledImageSet(
        np.concatenate([split.train.images, split.val.images]),
        np.concatenate([split.train.labels, split.val.labels]),
        split.train.num_classes)
    rng_init = np.random.default_rng([cfg.seed, 0xE7A1])
    ws = net.init_weights(rng_init)
    opt = optim.SGD(momentum=cfg.rates.momentum,
                    weight_decay=cfg.rates.weight_decay,
                    grad_clip=cfg.rates.grad_clip)
    stream = BatchStream(pool, np.random.default_rng([cfg.seed, 0xBA7C]))
    aug_rng = np.random.default_rng([cfg.seed, 0xA06])
    iters_per = max(1, pool.n // ev.batch_size)
    total = ev.epochs * iters_per
    rows = []
    for t in range(total):
        x, y = stream.next(ev.batch_size)
        x = nchw(x)
        if ev.augment_noise > 0.0:
            jitter = ev.augment_noise * aug_rng.standard_normal(x.shape)
            x = np.clip(x + jitter, -1.0, 1.0)
        loss = ad.cross_entropy(net.forward(ws, ad.constant(x)), y)
        opt.step(ws, gradients(loss, ws),
                 optim.cosine_lr(t, total, ev.w_max, ev.w_min))
        rows.append({"iteration": t, "epoch": t // iters_per,
                     "loss": loss.item()})
        if log is not None and t % (5 * iters_per) == 0:
            log(f"eval iter {t:5d} epoch {t // iters_per:3d} "
                f"loss {loss.item():.4f}")
    fwd = lambda a: net.forward(ws, ad.constant(a))
    details = {
        "num_params": ws.num_params,
        "copies": ev.cells,
        "train_accuracy": evaluate_accuracy(fwd, pool, ev.batch_size),
        "test_accuracy": evaluate_accuracy(fwd, test, ev.batch_size),
    }
    details["test_error"] = 1.0 - details["test_accuracy"]
    return ws, net, rows, details


def cmd_evaluate(genotype_path, cfg, out_dir, force: bool = False,
                 log=None) -> RunReport:
    """Retrain a searched genotype from scratch and report held-out error."""
    cfg = _as_config(cfg)
    os.makedirs(out_dir, exist_ok=True)
    with open(genotype_path, "r") as fh:
        geno_text = fh.read()
    cell, header = parse_genotype_text(geno_text)

    allowed = set(cfg.net_spec.ops)
    for nodes in (cell.normal,) + ((cell.reduce,) if cell.reduce else ()):
        for chosen in nodes:
            for _, op in chosen:
                if op not in allowed:
                    raise GenotypeError(
                        f"genotype uses op {op!r} which the configured "
                        f"op set does not contain")
    ours = opset_hash(cfg.net_spec.ops)
    theirs = header.get("opset_hash")
    if theirs is not None and theirs != ours and not force:
        raise GenotypeError(
            f"genotype was searched over op set {theirs}, config has "
            f"{ours}; pass force to evaluate anyway")

    split, test = cfg.load_data()
    if test is None:
        raise GenotypeError("evaluation needs a held-out test set; use the "
                            "blobs source or set data.test_source")
    t0 = time.perf_counter()
    ws, net, rows, details = train_eval_network(cfg, cell, split, test, log)
    chash = cfg.config_hash
    metrics_path = os.path.join(out_dir, "eval_metrics.csv")
    write_rows_csv(metrics_path, ["iteration", "epoch", "loss"], rows, chash)
    ckpt_path = os.path.join(out_dir, "eval_checkpoint.bin")
    save_checkpoint(ckpt_path,
                    {f"eval.{k}": v for k, v in ws.snapshot().items()}, chash)
    return RunReport(
        genotype=geno_text, genotype_path=str(genotype_path),
        metrics_path=metrics_path, checkpoint_path=ckpt_path,
        wall_clock=time.perf_counter() - t0, config_hash=chash,
        details=details)


# -- ablation studies ---------------------------------------------------------


STUDIES = ("lambda_sweep", "synthetic_only", "generator_capacity")

_DEFAULT_LAMBDA_GRID = (0.0, 0.1, 0.5, 1.0, 2.0, 3.0)


def _study_points(cfg: ExperimentConfig, study: str, grid) -> list:
    """(label, x-coordinate, override dict) per grid point."""
    if study == "lambda_sweep":
        lams = _DEFAULT_LAMBDA_GRID if grid is None else tuple(grid)
        return [(f"lambda={lam:g}", float(lam),
                 {"weighting.lambda": repr(float(lam))}) for lam in lams]
    if study == "synthetic_only":
        return [("synthetic_plus_real", 0.0,
                 {"weighting.synthetic_only": "false"}),
                ("synthetic_only", 1.0,
                 {"weighting.synthetic_only": "true"})]
    if study == "generator_capacity":
        tiers = ("tiny", "small", "medium") if grid is None else tuple(grid)
        return [(tier, float(i), {"generator.capacity": tier})
                for i, tier in enumerate(tiers)]
    raise ValueError(f"unknown study {study!r}; choose from {STUDIES}")


def _run_point(args):
    """One (point, seed) cell of an ablation grid. Top level for pickling."""
    base_values, overrides, seed, out_dir = args
    raw = {k: _canon(v) for k, v in base_values.items()}
    try:
        sub = _resolve(raw, {**overrides, "run.seed": str(seed)})
        rep = cmd_search(sub, out_dir)
        ev = cmd_evaluate(rep.genotype_path, sub, out_dir)
        return {"status": "ok",
                "sup_val_acc": rep.details["sup_val_accuracy"],
                "test_acc": ev.details["test_accuracy"],
                "test_err": ev.details["test_error"],
                "error": ""}
    except Exception as exc:  # record and keep the grid going
        return {"status": "error", "sup_val_acc": "", "test_acc": "",
                "test_err": "", "error": f"{type(exc).__name__}: {exc}"}


def worker_count() -> int:
    """Ablation process parallelism, capped by LFM_THREADS (default 1)."""
    raw = os.environ.get("LFM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"LFM_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def cmd_ablate(cfg, study: str, out_dir, grid=None, seeds=None,
               log=None) -> RunReport:
    """Run a study grid over (point, seed), aggregate mean and std error."""
    cfg = _as_config(cfg)
    os.makedirs(out_dir, exist_ok=True)
    points = _study_points(cfg, study, grid)
    if seeds is None:
        seeds = tuple(cfg.seed + i for i in range(3))
    chash = cfg.config_hash

    jobs = []
    for label, x, overrides in points:
        safe = label.replace("=", "_")
        for seed in seeds:
            jobs.append(((label, x, seed),
                         (cfg.values, overrides, seed,
                          os.path.join(out_dir, safe, f"seed{seed}"))))
    t0 = time.perf_counter()
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_point, [a for _, a in jobs]))
    else:
        outcomes = []
        for (label, _, seed), args in jobs:
            if log is not None:
                log(f"{study}: {label} seed {seed}")
            outcomes.append(_run_point(args))

    run_rows = []
    for ((label, x, seed), _), out in zip(jobs, outcomes):
        run_rows.append({"point": label, "x": x, "seed": seed, **out})
    runs_path = os.path.join(out_dir, "runs.csv")
    write_rows_csv(runs_path,
                   ["point", "x", "seed", "status", "sup_val_acc",
                    "test_acc", "test_err", "error"], run_rows, chash)

    summary_rows, xs, means, stds = [], [], [], []
    for label, x, _ in points:
        errs = [r["test_err"] for r in run_rows
                if r["point"] == label and r["status"] == "ok"]
        if errs:
            mean, std = float(np.mean(errs)), float(np.std(errs))
        else:
            mean, std = float("nan"), float("nan")
        summary_rows.append({"point": label, "x": x, "runs_ok": len(errs),
                             "mean_test_err": mean, "std_test_err": std})
        if errs:
            xs.append(x), means.append(mean), stds.append(std)
    summary_path = os.path.join(out_dir, "summary.csv")
    write_rows_csv(summary_path,
                   ["point", "x", "runs_ok", "mean_test_err", "std_test_err"],
                   summary_rows, chash)
    plot_path = os.path.join(out_dir, "plot.svg")
    if xs:
        xlabel = {"lambda_sweep": "lambda", "synthetic_only": "mode",
                  "generator_capacity": "capacity tier"}[study]
        with open(plot_path, "w") as fh:
            fh.write(svg_line_chart(
                [("mean test error", xs, means, stds)], xlabel, "test error"))
    return RunReport(
        genotype="", genotype_path="", metrics_path=summary_path,
        checkpoint_path="", wall_clock=time.perf_counter() - t0,
        config_hash=chash,
        details={"study": study, "runs": run_rows, "summary": summary_rows,
                 "runs_path": runs_path, "plot_path": plot_path})


# -- verification suite --------------------------------------------------------


def _gradcheck_cases():
    """(name, weight set, nullary loss closure) triples over shared tensors.

    The finite-difference oracle perturbs the weight set's arrays in
    place, so each closure must rebuild its graph from those same tensors
    on every call.
    """
    rng = np.random.default_rng(20)
    mk = lambda *s: ad.parameter(rng.standard_normal(s) * 0.5)
    sq = lambda t: ad.tsum(t * t)
    cases = []

    def case(name, loss_fn, *params):
        ws = ad.WeightSet({f"p{i}": p for i, p in enumerate(params)})
        cases.append((name, ws, loss_fn))

    x, w = mk(2, 3, 6, 6), mk(4, 3, 3, 3)
    case("conv2d", lambda x=x, w=w: sq(ad.conv2d(x, w)), x, w)
    x, w = mk(2, 2, 7, 7), mk(3, 2, 3, 3)
    case("conv2d stride 2", lambda x=x, w=w: sq(ad.conv2d(x, w, stride=2)),
         x, w)
    x, w = mk(2, 3, 6, 6), mk(3, 3, 3)
    case("depthwise conv", lambda x=x, w=w: sq(ad.depthwise_conv2d(x, w)),
         x, w)
    x, w = mk(1, 2, 8, 8), mk(2, 2, 3, 3)
    case("dilated conv", lambda x=x, w=w: sq(ad.conv2d(x, w, dilation=2)),
         x, w)
    x = mk(2, 2, 6, 6)
    case("max pool", lambda x=x: sq(ad.max_pool(x, 3, stride=2)), x)
    x = mk(2, 2, 6, 6)
    case("avg pool", lambda x=x: sq(ad.avg_pool(x, 3, stride=1)), x)
    x = mk(5, 3, 4, 4)
    case("batch norm",
         lambda x=x: ad.tsum(ad.batch_norm(x) * ad.batch_norm(x)
                             * ad.constant(np.arange(240.0).reshape(5, 3, 4, 4)
                                           / 240.0)), x)
    x, w = mk(6, 10), mk(10, 4)
    labels = np.arange(6) % 4
    case("dense + cross entropy",
         lambda x=x, w=w: ad.cross_entropy(ad.matmul(x, w), labels), x, w)
    x = mk(5, 7)
    ramp = ad.constant(np.arange(35.0).reshape(5, 7) / 35.0)
    case("softmax", lambda x=x: ad.tsum(ad.softmax(x) * ramp), x)
    return cases


def verify_checks(term_scale: dict = None) -> list:
    """The oracle battery behind cmd_verify; (name, ok, detail) per check.

    ``term_scale`` rescales individual hypergradient terms inside the
    quadratic-agreement check; it exists so tests can prove a corrupted
    term is caught and named.
    """
    results = []

    worst_op, worst_err = "", 0.0
    for name, ws, loss_fn in _gradcheck_cases():
        got = gradients(loss_fn(), ws)
        fd = fd_gradients(loss_fn, ws, h=1e-6)
        for key in ws.names():
            denom = max(np.linalg.norm(fd[key]), 1e-12)
            err = np.linalg.norm(got[key] - fd[key]) / denom
            if err > worst_err:
                worst_op, worst_err = name, err
    ok = worst_err <= 1e-6
    results.append(("gradient checks", ok,
                    f"worst {worst_err:.2e} ({worst_op})"))

    rng = np.random.default_rng(77)
    worst_term, worst_err = "", 0.0
    for k in range(25):
        lam = (0.0, 0.5, 1.0, 2.0)[k % 4]
        prob = random_quadratic_problem(rng, lam=lam,
                                        synthetic_only=(k % 7 == 3 and lam > 0))
        xi = (0.13, 0.09, 0.06)
        total, info = hypergradient_arch(prob, *xi, mode="second",
                                         term_scale=term_scale)
        ana_total, ana_terms = analytic_quadratic_hypergrad(prob, *xi)
        for term, ana in ana_terms.items():
            got = info[term]["w"]
            err = np.linalg.norm(got - ana) / max(np.linalg.norm(ana), 1e-9)
            if err > worst_err:
                worst_term, worst_err = term, err
        resid = total["w"] - ana_total
        err = np.linalg.norm(resid) / max(np.linalg.norm(ana_total), 1e-9)
        if err > worst_err:
            # name the term whose direction best explains the residual;
            # an unattributable residual stays labeled as the total
            blame, align = "total", 0.9
            rn = np.linalg.norm(resid)
            for term, ana in ana_terms.items():
                na = np.linalg.norm(ana)
                if rn > 0.0 and na > 0.0:
                    cos = abs(np.vdot(resid, ana)) / (rn * na)
                    if cos > align:
                        blame, align = term, cos
            worst_term, worst_err = blame, err
    ok = worst_err <= 1e-6
    results.append(("quadratic hypergradient agreement", ok,
                    f"worst {worst_err:.2e} ({worst_term})"))

    worst_err = 0.0
    for k in range(3):
        prob = random_quadratic_problem(np.random.default_rng(300 + k),
                                        lam=(0.5, 1.0, 2.0)[k])
        total, _ = hypergradient_arch(prob, 0.13, 0.09, 0.06, mode="second")
        fd = unrolled_hypergrad_fd(prob, 0.13, 0.09, 0.06, h=1e-6)
        worst_err = max(worst_err, np.linalg.norm(total["w"] - fd["w"])
                        / np.linalg.norm(fd["w"]))
    ok = worst_err <= 1e-6
    results.append(("unrolled finite-difference agreement", ok,
                    f"worst {worst_err:.2e}"))

    prob = random_quadratic_problem(np.random.default_rng(9), lam=0.0)
    total, info = hypergradient_arch(prob, 0.13, 0.09, 0.06, mode="second")
    zeros = (info["w1_path"].norm() == 0.0 and info["gen_path"].norm() == 0.0)
    first, _ = hypergradient_arch(prob, 0.0, 0.0, 0.0, mode="second")
    f1, _ = hypergradient_arch(prob, 0.0, 0.0, 0.0, mode="first")
    collapse = np.array_equal(first["w"], f1["w"])
    ok = zeros and collapse
    results.append(("lambda zero degeneracy", ok,
                    "indirect paths exactly zero" if ok else
                    "nonzero indirect path at lambda zero"))
    return results


def cmd_verify(log=print, term_scale: dict = None) -> int:
    """Print the oracle pass/fail table; 0 when everything holds."""
    results = verify_checks(term_scale=term_scale)
    width = max(len(name) for name, _, _ in results)
    failures = 0
    for name, ok, detail in results:
        mark = "PASS" if ok else "FAIL"
        failures += 0 if ok else 1
        log(f"{mark}  {name.ljust(width)}  {detail}")
    log(f"{len(results) - failures}/{len(results)} checks passed")
    return 0 if failures == 0 else 1


# -- converter ----------------------------------------------------------------


def _read_pgm(path) -> np.ndarray:
    """Minimal binary/ascii PGM reader (P5/P2, maxval <= 255)."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] not in (10, 13):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    magic, w, h, maxval = (tokens[0], int(tokens[1]), int(tokens[2]),
                           int(tokens[3]))
    if magic not in (b"P5", b"P2") or maxval > 255:
        raise ValueError(f"{path}: unsupported PGM variant")
    if magic == b"P5":
        pix = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1)
    else:
        pix = np.array(data[pos:].split()[:w * h], dtype=np.uint8)
    if pix.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return pix.reshape(h, w)


def convert_directory(src_dir, out_path, log=None) -> dict:
    """Pack class-per-subdirectory images into the binary container.

    Subdirectory names sort into class indices; ``.npy`` arrays ([H, W]
    or [H, W, C]) and 8-bit PGM files are accepted. Integer pixel values
    map linearly onto [-1, 1]; float arrays are rescaled by the global
    maximum absolute value when any pixel falls outside that range.
    """
    classes = sorted(d for d in os.listdir(src_dir)
                     if os.path.isdir(os.path.join(src_dir, d)))
    if len(classes) < 2:
        raise ValueError(f"{src_dir}: need at least two class directories")
    images, labels = [], []
    for ci, cname in enumerate(classes):
        cdir = os.path.join(src_dir, cname)
        files = sorted(f for f in os.listdir(cdir)
                       if f.endswith((".npy", ".pgm")))
        if not files:
            raise ValueError(f"{cdir}: no .npy or .pgm files")
        for fname in files:
            fpath = os.path.join(cdir, fname)
            if fname.endswith(".npy"):
                arr = np.load(fpath)
            else:
                arr = _read_pgm(fpath)
            if arr.ndim == 2:
                arr = arr[:, :, None]
            if arr.ndim != 3:
                raise ValueError(f"{fpath}: expected [H, W] or [H, W, C], "
                                 f"got shape {arr.shape}")
            if np.issubdtype(arr.dtype, np.integer):
                arr = arr.astype(np.float64) / 127.5 - 1.0
            images.append(arr.astype(np.float64))
            labels.append(ci)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"images disagree on shape: {sorted(shapes)}")
    stack = np.stack(images)
    peak = np.abs(stack).max()
    if peak > 1.0:
        stack /= peak
    stack = stack.astype(np.float32).astype(np.float64)
    ds = LabeledImageSet(stack, np.array(labels, dtype=np.int64),
                         len(classes))
    save_lfmc(out_path, ds)
    if log is not None:
        log(f"wrote {ds.n} images, {len(classes)} classes -> {out_path}")
    return {"classes": classes, "count": ds.n, "shape": stack.shape[1:]}
