"""``strata`` command line: one subcommand per pipeline stage plus end-to-end runs.

Exit codes: 0 success, 2 usage error, 3 format/parse error, 4 numeric or
precondition error.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import __version__, cluster, dimred, evaluate, parallel, phantom, preprocess
from .cube_io import GrayImage, load_cube, load_gray, save_cube, save_gray
from .errors import FormatError, InvalidValue, StrataError

log = logging.getLogger("strata")

EXIT_USAGE = 2


class UsageError(Exception):
    """Invalid invocation detected after argument parsing (exit code 2)."""


@dataclass
class PipelineConfig:
    trim: tuple[int, int] = (4, 4)
    bin: int = 4
    order: str = "trim-bin-norm"
    target: str = "mean"
    drop_tail: bool = False
    pca_k: int | None = None
    variance: float | None = 0.995
    method: str = "gmm"
    k: int | None = None
    seed: int = 0
    restarts: int = 10
    cov: str = "full"
    reg: float = 1e-6
    max_iter: int = 300
    tol: float | None = None

    def validate(self) -> None:
        if self.k is None:
            raise UsageError("the cluster count K is required (--k or a config file)")
        if self.k < 1:
            raise InvalidValue("k", f"{self.k} must be >= 1")
        if self.method not in ("kmeans", "gmm"):
            raise InvalidValue("method", f"expected kmeans or gmm, got {self.method!r}")
        if self.order not in preprocess.ORDERS:
            raise InvalidValue("order", f"expected one of {preprocess.ORDERS}")
        if self.cov not in ("full", "diag"):
            raise InvalidValue("cov", f"expected full or diag, got {self.cov!r}")
        if self.pca_k is not None:
            self.variance = None

    def tolerance(self, method: str) -> float:
        if self.tol is not None:
            return self.tol
        return 1e-4 if method == "kmeans" else 1e-6

    def echo(self) -> list[str]:
        out = []
        for key, value in asdict(self).items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            out.append(f"{key} = {value}")
        return out


# -- parsing helpers ---------------------------------------------------------


def _pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'leading,trailing', got {text!r}") from None
    return a, b


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None
    return w, h


def _target(text: str):
    if text in ("mean", "mean_of_means"):
        return "mean"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'mean' or a number, got {text!r}") from None


_CONFIG_TYPES = {
    "trim": _pair, "bin": int, "order": str, "target": _target,
    "drop_tail": lambda v: v.lower() in ("1", "true", "yes"),
    "pca_k": int, "variance": float, "method": str, "k": int, "seed": int,
    "restarts": int, "cov": str, "reg": float, "max_iter": int, "tol": float,
}


def read_config(path: Path) -> dict:
    """``key = value`` config file for ``separate``/``compare``."""
    values = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip().lower().replace("-", "_")
        if not sep:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        if key not in _CONFIG_TYPES:
            log.warning("%s:%d: ignoring unknown key %r", path, lineno, key)
            continue
        try:
            values[key] = _CONFIG_TYPES[key](raw.strip())
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise FormatError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return values


def build_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        for key, value in read_config(Path(args.config)).items():
            setattr(cfg, key, value)
    for f in fields(PipelineConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(cfg, f.name, value)
    if getattr(args, "pca_k", None) is not None:
        cfg.variance = None
    elif getattr(args, "variance", None) is not None:
        cfg.pca_k = None
    cfg.validate()
    return cfg


@contextlib.contextmanager
def stage(name: str) -> Iterator[None]:
    log.info("[%s]", name)
    try:
        yield
    except StrataError as exc:
        if not hasattr(exc, "stage"):
            exc.stage = name
        raise


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# -- pipeline pieces ---------------------------------------------------------


def _fit_cluster(scores: dimred.ScoreCube, cfg: PipelineConfig, method: str):
    """Returns (label map, sidecar lines)."""
    tol = cfg.tolerance(method)
    if method == "kmeans":
        model, labels = cluster.kmeans_fit(scores, cfg.k, seed=cfg.seed, max_iter=cfg.max_iter,
                                           tol=tol, restarts=cfg.restarts)
        stats = [f"inertia = {_fmt(model.inertia)}", f"iterations = {model.iterations}"]
    else:
        model = cluster.gmm_fit(scores, cfg.k, covariance=cfg.cov, seed=cfg.seed,
                                max_iter=cfg.max_iter, tol=tol, reg=cfg.reg,
                                restarts=cfg.restarts)
        labels = cluster.gmm_assign(scores, model)
        stats = [f"log_likelihood = {_fmt(model.log_likelihood)}",
                 f"iterations = {model.iterations}",
                 "weights = " + " ".join(_fmt(w) for w in model.weights)]
    sidecar = [f"k = {cfg.k}", f"method = {method}", f"seed = {cfg.seed}"] + stats
    return labels, sidecar


def _write_labels(out: Path, labels: cluster.LabelMap, sidecar: list[str],
                  layers: bool = True) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_gray(out / "labels.pgm", cluster.render_label_map(labels))
    counts = np.bincount(labels.labels.ravel(), minlength=labels.k)
    lines = sidecar + [f"pixels_{i} = {int(c)}" for i, c in enumerate(counts)]
    (out / "labels.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if layers:
        for c in range(labels.k):
            for mode in ("mask", "inverse"):
                img = cluster.extract_layer(None, labels, [c], mode)
                save_gray(out / "layers" / f"cluster_{c:02d}_{mode}.pgm", img)


def _reduce(cube_path: Path, white_path: Path | None, cfg: PipelineConfig):
    with stage("load"):
        cube = load_cube(cube_path)
        white = load_cube(white_path) if white_path else None
    with stage("preprocess"):
        reduced, _ = preprocess.preprocess(cube, white, trim=cfg.trim, size=cfg.bin,
                                           order=cfg.order, target=cfg.target,
                                           drop_tail=cfg.drop_tail)
    del cube, white
    with stage("pca"):
        model = dimred.fit_pca(reduced, k=cfg.pca_k, variance=cfg.variance)
        scores = dimred.project(reduced, model)
        residual = reduced.pixels() - dimred.reconstruct(scores.matrix(), model)
        resid_ratio = (float((residual ** 2).sum() / (residual.shape[0] - 1)
                             / model.total_variance) if model.total_variance > 0 else 0.0)
    return reduced, model, scores, resid_ratio


def _manifest(cfg: PipelineConfig, cube_path, white_path, reduced, model, resid_ratio) -> list[str]:
    return [
        f"tool = strata {__version__}",
        f"cube = {cube_path}",
        f"white = {white_path if white_path else ''}",
        *cfg.echo(),
        f"bands_after_binning = {reduced.bands}",
        f"pca_components = {model.k}",
        "explained_ratio = " + " ".join(_fmt(r) for r in model.explained_ratio),
        f"cumulative_ratio = {_fmt(model.cumulative_ratio)}",
        f"residual_ratio = {_fmt(resid_ratio)}",
    ]


def load_truth(directory: Path) -> evaluate.LayerGroundTruth:
    """Masks ``NN_<name>.pgm`` in filename order; nonzero pixels are in the layer."""
    files = sorted(Path(directory).glob("*.pgm"))
    if not files:
        raise FormatError(f"no .pgm masks in {directory}")
    names, masks = [], []
    for f in files:
        stem = f.stem
        head, sep, rest = stem.partition("_")
        names.append(rest if sep and head.isdigit() else stem)
        masks.append(load_gray(f).pixels > 0)
    shapes = {m.shape for m in masks}
    if len(shapes) != 1:
        raise FormatError(f"masks in {directory} differ in size")
    return evaluate.LayerGroundTruth(tuple(names), np.stack(masks))


def labels_from_image(image: GrayImage) -> cluster.LabelMap:
    """Invert a rendered label map: distinct gray levels, ascending, become 0..K-1."""
    levels, inverse = np.unique(image.pixels, return_inverse=True)
    return cluster.LabelMap(inverse.reshape(image.pixels.shape), len(levels))


# -- subcommands -------------------------------------------------------------


def cmd_phantom(args) -> None:
    if args.spec:
        spec = phantom.load_spec(args.spec)
        changes = {k: v for k, v in (("seed", args.seed), ("bands", args.bands)) if v is not None}
        if args.size:
            changes["width"], changes["height"] = args.size
        spec = replace(spec, **changes)
    else:
        width, height = args.size or (256, 256)
        spec = phantom.PRESETS[args.preset](seed=args.seed or 0, width=width, height=height,
                                            bands=args.bands or 1040)
    with stage("phantom"):
        phantom.write_phantom(phantom.generate_phantom(spec), args.out)


def cmd_normalize(args) -> None:
    with stage("normalize"):
        cube = load_cube(args.input)
        factors = preprocess.compute_white_factors(load_cube(args.white), args.target)
        save_cube(args.out, preprocess.apply_normalization(cube, factors))
        if args.factors:
            Path(args.factors).write_text(
                f"target = {_fmt(factors.target)}\n"
                + "\n".join(_fmt(f) for f in factors.factors) + "\n", encoding="utf-8")


def cmd_bin(args) -> None:
    with stage("bin"):
        cube = load_cube(args.input)
        white = load_cube(args.white) if args.white else None
        out, _ = preprocess.preprocess(cube, white, trim=args.trim, size=args.bin,
                                       order=args.order, target=args.target,
                                       drop_tail=args.drop_tail)
        save_cube(args.out, out)


def cmd_pca(args) -> None:
    with stage("pca"):
        cube = load_cube(args.input)
        model = dimred.fit_pca(cube, k=args.pca_k,
                               variance=None if args.pca_k is not None else args.variance)
        dimred.save_model(args.model, model)
        log.info("kept %d components, cumulative ratio %.6f", model.k, model.cumulative_ratio)
        if args.scores:
            scores = dimred.project(cube, model)
            np.save(args.scores, scores.scores)


def cmd_cluster(args) -> None:
    with stage("cluster"):
        try:
            raw = np.load(args.scores, allow_pickle=False)
        except ValueError as exc:
            raise FormatError(f"{args.scores}: {exc}") from None
        scores = dimred.ScoreCube(raw)
        cfg = PipelineConfig(method=args.method, k=args.k, seed=args.seed,
                             restarts=args.restarts, cov=args.cov, reg=args.reg,
                             max_iter=args.max_iter, tol=args.tol)
        cfg.validate()
        labels, sidecar = _fit_cluster(scores, cfg, cfg.method)
        _write_labels(Path(args.out), labels, sidecar)


def cmd_separate(args) -> None:
    cfg = build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reduced, model, scores, resid = _reduce(args.cube, args.white, cfg)
    with stage("write"):
        save_cube(out / "normalized.hdr", reduced)
        dimred.save_model(out / "pca_model.txt", model)
        (out / "scores_summary.txt").write_text(dimred.score_summary(scores, model),
                                                encoding="utf-8")
    with stage("cluster"):
        labels, sidecar = _fit_cluster(scores, cfg, cfg.method)
        _write_labels(out, labels, sidecar)
    lines = _manifest(cfg, args.cube, args.white, reduced, model, resid)
    lines += [s for s in sidecar if not s.startswith(("k =", "method =", "seed ="))]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_compare(args) -> None:
    cfg = build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reduced, model, scores, resid = _reduce(args.cube, args.white, cfg)
    truth = None
    if args.truth:
        with stage("truth"):
            truth = load_truth(Path(args.truth))
    lines = _manifest(cfg, args.cube, args.white, reduced, model, resid)
    lines = [ln for ln in lines if not ln.startswith("method =")]
    for method in ("kmeans", "gmm"):
        with stage(method):
            labels, sidecar = _fit_cluster(scores, cfg, method)
            _write_labels(out / method, labels, sidecar)
            lines += [f"{method}.{s}" for s in sidecar[3:]]
            if truth is not None:
                report = evaluate.match_clusters(labels, truth)
                (out / f"report_{method}.txt").write_text(evaluate.format_report(report),
                                                          encoding="utf-8")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_evaluate(args) -> None:
    with stage("evaluate"):
        labels = labels_from_image(load_gray(args.labels))
        truth = load_truth(Path(args.truth))
        text = evaluate.format_report(evaluate.match_clusters(labels, truth))
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# -- argument parser ---------------------------------------------------------


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cube", required=True, type=Path, help="cube header (.hdr)")
    p.add_argument("--white", type=Path, help="white-reference cube header")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--config", type=Path, help="key = value file; flags override it")
    p.add_argument("--trim", type=_pair)
    p.add_argument("--bin", type=int)
    p.add_argument("--order", choices=preprocess.ORDERS)
    p.add_argument("--target", type=_target)
    p.add_argument("--drop-tail", action="store_true", default=None)
    sel = p.add_mutually_exclusive_group()
    sel.add_argument("--pca-k", "--components", dest="pca_k", type=int)
    sel.add_argument("--variance", type=float)
    p.add_argument("--k", type=int, help="number of clusters K")
    p.add_argument("--seed", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--cov", choices=("full", "diag"))
    p.add_argument("--reg", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--tol", type=float)


def _common_flags(p: argparse.ArgumentParser, default) -> None:
    p.add_argument("--threads", type=int, default=default,
                   help="worker threads (default: STRATA_THREADS or all cores)")
    p.add_argument("-q", "--quiet", action="store_true", default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="strata", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"strata {__version__}")
    _common_flags(parser, None)
    # the same flags are accepted after the subcommand name
    common = argparse.ArgumentParser(add_help=False)
    _common_flags(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic layered drawing")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", type=Path, help="TOML phantom description")
    src.add_argument("--preset", choices=sorted(phantom.PRESETS))
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--bands", type=int)
    p.add_argument("--size", type=_size, help="WIDTHxHEIGHT")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("normalize", parents=[common],
                       help="white-reference channel normalization")
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--white", required=True, type=Path)
    p.add_argument("--target", type=_target, default="mean")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--factors", type=Path, help="also write the per-band factors")
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("bin", parents=[common], help="trim and bin bands (optionally normalize)")
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--trim", type=_pair, default=(4, 4))
    p.add_argument("--bin", type=int, default=4)
    p.add_argument("--order", choices=preprocess.ORDERS, default="trim-bin-norm")
    p.add_argument("--white", type=Path, help="normalize with this white reference")
    p.add_argument("--target", type=_target, default="mean")
    p.add_argument("--drop-tail", action="store_true")
    p.set_defaults(func=cmd_bin)

    p = sub.add_parser("pca", parents=[common], help="fit PCA and optionally write scores")
    p.add_argument("--in", dest="input", required=True, type=Path)
    sel = p.add_mutually_exclusive_group()
    sel.add_argument("--k", dest="pca_k", type=int)
    sel.add_argument("--variance", type=float, default=0.995)
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--scores", type=Path, help=".npy file for the (H, W, k) scores")
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("cluster", parents=[common], help="cluster PCA scores")
    p.add_argument("--scores", required=True, type=Path)
    p.add_argument("--method", choices=("kmeans", "gmm"), default="gmm")
    p.add_argument("--k", required=True, type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--cov", choices=("full", "diag"), default="full")
    p.add_argument("--reg", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=300)
    p.add_argument("--tol", type=float)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("separate", parents=[common], help="run the full workflow")
    _add_pipeline_flags(p)
    p.add_argument("--method", choices=("kmeans", "gmm"))
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("compare", parents=[common],
                       help="K-means and GMM side by side on the same scores")
    _add_pipeline_flags(p)
    p.add_argument("--truth", type=Path, help="directory of ground-truth mask PGMs")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score a label map against ground-truth masks")
    p.add_argument("--labels", required=True, type=Path)
    p.add_argument("--truth", required=True, type=Path)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="strata: %(message)s")
    try:
        with parallel.workers(args.threads):
            args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"strata: {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StrataError as exc:
        where = getattr(exc, "stage", args.command)
        print(f"strata: {where}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"strata: {args.command}: {exc}", file=sys.stderr)
        return FormatError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
