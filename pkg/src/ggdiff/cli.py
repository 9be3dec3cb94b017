"""Command line entry point: gencorpus, degrade, fit, restore, eval.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from . import degrade as deg
from .config import ConfigError, get_int, load_config, restore_config
from .corpus import PATTERNS, CorpusSpec, image_name, make_image
from .diffusion import GmmPrior, fit_gmm, make_schedule
from .dqr import QualityModel, fit_pristine_model
from .ggd import DegenerateInputError, ggd_fit
from .guide import TRACE_COLUMNS, corpus_reference_stats, run_restoration
from .imgproc import Histogram, PpmError, list_images, load_image, pixel_histogram, psnr, save_image, ssim
from .latentcodec import encode, latent_stats, stats_mask
from .rng import derive_seed

log = logging.getLogger("ggdiff")

REPORT_VERSION = "1"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# small I/O helpers

def _sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(columns)
        for r in rows:
            values = [r.get(c) for c in columns] if isinstance(r, dict) else r
            wr.writerow([_cell(v) for v in values])


def _parse_cell(s: str):
    if s == "":
        return None
    if s in ("true", "false"):
        return s == "true"
    for fn in (int, float):
        try:
            return fn(s)
        except ValueError:
            pass
    return s


def read_csv_report(path) -> list:
    """Rows of a report CSV, with cells converted back to JSON-like values."""
    with open(path, encoding="utf-8", newline="") as fh:
        return [{k: _parse_cell(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_report(out_dir, kind: str, columns, rows) -> None:
    _write_json(os.path.join(out_dir, "report.json"),
                {"version": REPORT_VERSION, "kind": kind, "columns": list(columns), "rows": rows})
    write_csv(os.path.join(out_dir, "report.csv"), columns, rows)


def _load_dir(path):
    if not os.path.isdir(path):
        raise FileNotFoundError(f"not a directory: {path}")
    names = list_images(path)
    return names, [load_image(os.path.join(path, n)) for n in names]


def _manifest(out_dir, files, extra):
    entries = [{"name": f, "sha256": _sha256(os.path.join(out_dir, f))} for f in files]
    digest = hashlib.sha256("".join(e["name"] + e["sha256"] for e in entries).encode()).hexdigest()
    obj = {"version": REPORT_VERSION, "files": entries, "checksum": digest}
    obj.update(extra)
    _write_json(os.path.join(out_dir, "manifest.json"), obj)
    return obj


# --------------------------------------------------------------------------
# subcommands

def cmd_gencorpus(args, cfg) -> int:
    spec = CorpusSpec(count=args.count if args.count is not None else get_int(cfg, "corpus.count", 10),
                      size=args.size if args.size is not None else get_int(cfg, "corpus.size", 32),
                      patterns=tuple(args.patterns.split(",")) if args.patterns else PATTERNS,
                      seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    files = []
    for i in range(spec.count):
        name = image_name(i)
        save_image(make_image(spec, i), os.path.join(args.out, name))
        files.append(name)
    _manifest(args.out, files, {"kind": "corpus", "spec": {"count": spec.count, "size": spec.size,
                                                           "patterns": list(spec.patterns), "seed": spec.seed}})
    return EXIT_OK


def parse_degradation(text: str) -> tuple:
    """``noise-heavy`` (preset) or ``noise:sigma=0.1,seed=3``; returns
    (spec dict, whether a seed was given explicitly)."""
    if ":" not in text:
        if text not in deg.PRESETS:
            raise UsageError(f"unknown degradation {text!r}; presets: {sorted(deg.PRESETS)}")
        return {"preset": text}, False
    kind, _, rest = text.partition(":")
    d = {"kind": kind}
    for part in filter(None, rest.split(",")):
        if "=" not in part:
            raise UsageError(f"bad degradation parameter {part!r}")
        k, v = part.split("=", 1)
        d[k.strip()] = v.strip()
    return d, "seed" in d


def _resolve(d: dict, explicit_seed: bool, seed: int) -> deg.DegradationSpec:
    try:
        if "preset" in d:
            return deg.preset(d["preset"], seed)
        spec = deg.DegradationSpec.from_dict(d)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad degradation {d}: {exc}") from exc
    return spec if explicit_seed else deg.with_seed(spec, seed)


def _requested(args, cfg) -> list:
    """Degradations from --spec, then the per-family flags (in physical
    order), else a single ``degrade.*`` spec from the config file."""
    parsed = [parse_degradation(s) for s in args.spec]
    flags = [({"kind": "lowlight", "gamma": args.lowlight_gamma}, args.lowlight_gamma),
             ({"kind": "haze", "beta": args.haze_beta, "A": args.haze_A}, args.haze_beta),
             ({"kind": "noise", "sigma": args.noise_sigma}, args.noise_sigma)]
    parsed += [(d, False) for d, v in flags if v is not None]
    if not parsed and "degrade.kind" in cfg:
        d = {k[len("degrade."):]: v for k, v in cfg.items() if k.startswith("degrade.")}
        parsed = [(d, "seed" in d)]
    return parsed


def _describe(parsed) -> list:
    out = []
    for d, _ in parsed:
        out.append(d["preset"] if "preset" in d else
                   d["kind"] + ":" + ",".join(f"{k}={v}" for k, v in d.items() if k != "kind"))
    return out


def cmd_degrade(args, cfg) -> int:
    parsed = _requested(args, cfg)
    if not parsed:
        raise UsageError("degrade needs --spec, a family flag or degrade.* config keys")
    names, images = _load_dir(args.input)
    os.makedirs(args.out, exist_ok=True)
    applied = []
    for name, img in zip(names, images):
        specs = [_resolve(d, ex, derive_seed(args.seed, f"degrade:{name}", k))
                 for k, (d, ex) in enumerate(parsed)]
        save_image(deg.compose(img, specs), os.path.join(args.out, name))
        applied.append({"image": name, "degradations": [s.to_dict() for s in specs]})
    _manifest(args.out, names, {"kind": "degrade", "requested": _describe(parsed), "applied": applied})
    return EXIT_OK


def _latent_histogram(img, bins=64) -> Histogram:
    z = encode(img)
    v = z.coeffs[stats_mask(z)]
    m = float(np.max(np.abs(v))) or 1.0
    dens, edges = np.histogram(v, bins=bins, range=(-m, m), density=True)
    return Histogram(edges, dens)


def fit_domain(img, domain: str):
    """GGD fit of one image: centred pixels or AC latent coefficients."""
    if domain == "latent":
        return latent_stats(encode(img))
    return ggd_fit(img.data.ravel() - img.data.mean())


def cmd_fit(args, cfg) -> int:
    names, images = _load_dir(args.input)
    os.makedirs(os.path.join(args.out, "histograms"), exist_ok=True)
    rows = []
    for name, img in zip(names, images):
        p = fit_domain(img, args.domain)
        rows.append({"image": name, "domain": args.domain, "alpha": p.alpha, "sigma": p.sigma})
        h = pixel_histogram(img) if args.domain == "pixel" else _latent_histogram(img)
        h.to_csv(os.path.join(args.out, "histograms", os.path.splitext(name)[0] + f"_{args.domain}.csv"))
    write_csv(os.path.join(args.out, "ggd.csv"), ("image", "domain", "alpha", "sigma"), rows)
    return EXIT_OK


RESTORE_COLUMNS = ("image", "task", "psnr_before", "psnr_after", "ssim_before", "ssim_after",
                   "alpha_pixel", "sigma_pixel", "alpha_latent", "sigma_latent", "kld_ref",
                   "refine_rounds", "converged", "final_score")


def _safe_fit(img, domain):
    try:
        p = fit_domain(img, domain)
        return p.alpha, p.sigma
    except (DegenerateInputError, ValueError):
        return None, None


def _restore_one(job):
    name, lq, clean, rcfg, prior, qmodel, ref, timing = job
    t0 = time.perf_counter()
    sched = make_schedule(T=rcfg.stage_bounds[0])
    res = run_restoration(lq, rcfg, sched, prior, qmodel, reference_stats=ref)
    row = dict.fromkeys(RESTORE_COLUMNS)
    row.update(image=name, task=rcfg.task_preset)
    if clean is not None:
        row.update(psnr_before=psnr(lq, clean), psnr_after=psnr(res.restored, clean))
        try:
            row.update(ssim_before=ssim(lq, clean), ssim_after=ssim(res.restored, clean))
        except ValueError:  # image smaller than the SSIM window
            pass
    row["alpha_pixel"], row["sigma_pixel"] = _safe_fit(res.restored, "pixel")
    row["alpha_latent"], row["sigma_latent"] = _safe_fit(res.restored, "latent")
    row.update(kld_ref=res.final_kld_ref, refine_rounds=res.refine_rounds_used,
               converged=res.converged, final_score=res.final_score)
    if timing:
        row["wall_time"] = time.perf_counter() - t0
    return row, res.restored, list(res.trace_rows())


def _map(fn, jobs, n_jobs):
    if n_jobs <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, jobs))


def cmd_restore(args, cfg) -> int:
    rcfg = restore_config(cfg, seed=args.seed)
    names, images = _load_dir(args.input)
    clean = {}
    if args.clean:
        cnames, cimgs = _load_dir(args.clean)
        clean = dict(zip(cnames, cimgs))
        missing = sorted(set(names) - set(clean))
        if missing:
            raise ValueError(f"no clean reference for {missing}")
    os.makedirs(args.out, exist_ok=True)
    train = None
    if args.train:
        train = _load_dir(args.train)[1]
    if args.prior:
        with open(args.prior, encoding="utf-8") as fh:
            prior = GmmPrior.from_json(fh.read())
    elif train:
        prior = fit_gmm([encode(im) for im in train], K=get_int(cfg, "prior.K", 5),
                        seed=derive_seed(args.seed, "prior"))
        with open(os.path.join(args.out, "prior.json"), "w", encoding="utf-8") as fh:
            fh.write(prior.to_json())
    else:
        raise UsageError("restore needs --prior or --train")
    if args.quality_model:
        with open(args.quality_model, encoding="utf-8") as fh:
            qmodel = QualityModel.from_json(fh.read())
    elif train:
        qmodel = fit_pristine_model(train)
        with open(os.path.join(args.out, "quality_model.json"), "w", encoding="utf-8") as fh:
            fh.write(qmodel.to_json())
    else:
        qmodel = None
    ref = corpus_reference_stats(train) if train else None

    jobs = []
    for name, img in zip(names, images):
        icfg = type(rcfg)(**{**rcfg.__dict__, "seed": derive_seed(rcfg.seed, f"restore:{name}")})
        jobs.append((name, img, clean.get(name), icfg, prior, qmodel, ref, args.timing))
    results = _map(_restore_one, jobs, args.jobs)

    for sub in ("restored", "traces"):
        os.makedirs(os.path.join(args.out, sub), exist_ok=True)
    rows = []
    for name, (row, restored, trace) in zip(names, results):
        save_image(restored, os.path.join(args.out, "restored", name))
        write_csv(os.path.join(args.out, "traces", os.path.splitext(name)[0] + ".csv"), TRACE_COLUMNS, trace)
        rows.append(row)
    columns = RESTORE_COLUMNS + (("wall_time",) if args.timing else ())
    write_report(args.out, "restore", columns, rows)
    return EXIT_OK


EVAL_COLUMNS = ("image", "psnr", "ssim")


def cmd_eval(args, cfg) -> int:
    rn, rimgs = _load_dir(args.input)
    fn, fimgs = _load_dir(args.reference)
    if set(rn) != set(fn):
        only_r = sorted(set(rn) - set(fn))
        only_f = sorted(set(fn) - set(rn))
        raise ValueError(f"cannot pair images: only in restored {only_r}, only in reference {only_f}")
    ref = dict(zip(fn, fimgs))
    rows = []
    for name, img in zip(rn, rimgs):
        try:
            s = ssim(img, ref[name])
        except ValueError:
            s = None
        rows.append({"image": name, "psnr": psnr(img, ref[name]), "ssim": s})
    os.makedirs(args.out, exist_ok=True)
    write_report(args.out, "eval", EVAL_COLUMNS, rows)
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="master seed (default: config seed, else 0)")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ggdiff", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gencorpus", parents=[common], help="write the synthetic corpus")
    g.add_argument("--count", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--patterns", help=f"comma list from {','.join(PATTERNS)}")

    d = sub.add_parser("degrade", parents=[common], help="apply degradations to a directory")
    d.add_argument("input")
    d.add_argument("--spec", action="append", default=[],
                   help="preset name or kind:key=val,... (repeatable, applied in order)")
    d.add_argument("--noise-sigma", type=float, help="additive Gaussian noise level")
    d.add_argument("--haze-beta", type=float, help="haze density")
    d.add_argument("--haze-A", type=float, default=1.0, help="atmospheric light")
    d.add_argument("--lowlight-gamma", type=float, help="low-light gamma")

    f = sub.add_parser("fit", parents=[common], help="GGD fits and histograms")
    f.add_argument("input")
    f.add_argument("--domain", choices=("pixel", "latent"), default="latent")

    r = sub.add_parser("restore", parents=[common], help="guided restoration")
    r.add_argument("input")
    r.add_argument("--train", help="clean corpus used to fit prior / quality model / reference stats")
    r.add_argument("--prior", help="prefitted prior JSON")
    r.add_argument("--quality-model", help="prefitted quality model JSON")
    r.add_argument("--clean", help="clean references (same file names) for PSNR/SSIM")
    r.add_argument("--timing", action="store_true", help="add wall_time to the report")

    e = sub.add_parser("eval", parents=[common], help="PSNR/SSIM against references")
    e.add_argument("input")
    e.add_argument("reference")
    return p


COMMANDS = {"gencorpus": cmd_gencorpus, "degrade": cmd_degrade, "fit": cmd_fit,
            "restore": cmd_restore, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_config(args.config) if args.config else {}
        if args.seed is None:
            args.seed = get_int(cfg, "seed", get_int(cfg, "guide.seed", 0))
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, KeyError) as exc:
        print(f"ggdiff: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, np.linalg.LinAlgError, DegenerateInputError) as exc:
        print(f"ggdiff: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PpmError, OSError, ValueError) as exc:
        print(f"ggdiff: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
