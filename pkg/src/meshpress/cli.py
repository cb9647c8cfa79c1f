"""Command-line pipeline: fit, train, compress, decompress, add, eval, rd.

Exit codes: 0 success, 1 internal error, 2 input error, 3 format error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .archive import ArchiveError, load_tensors, save_tensors
from .cnr import (
    DecoderArch,
    StateFileError,
    TrainConfig,
    UpModule,
    fit_new_feature,
    load_state,
    save_state,
    train_set,
)
from .codec import Bitstream, BitstreamError, compress_set, decode_bitstream, decode_shapes, encode_bitstream
from .mesh import DegenerateMeshError, MeshStructureError, ObjParseError, TriangleMesh, load_obj, save_obj
from .metrics import MetricsRecord, RdPoint, emit_rd, emit_shape_metrics, evaluate_pair
from .quant import QuantSpec, quantize
from .rgr.fit import EmptySurfaceError, fit_tensor_detailed
from .rgr.dmc import dmc_extract
from .rgr.grid import GridSpec, TsdfDefTensor
from .rgr.render import default_views, recon_error

log = logging.getLogger("meshpress")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_FORMAT = 0, 1, 2, 3


class InputError(Exception):
    """Bad arguments, configuration or input files."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


@dataclass(frozen=True)
class Config:
    K: int = 128
    K_feat: int = 4
    C: int = 16
    L: int = 5
    scale: int = 2
    head_width: int = 64
    widths: Tuple[int, ...] = (16,)
    kernel: int = 3
    head_kernel: int = 1
    final_kernel: int = 1
    N_feat: int = 8
    N_param: int = 8
    lambda_reg: float = 10.0
    lambda1: float = 5.0
    lambda2: float = 10.0
    tau: float = 2.0 / 3.0
    epochs: int = 400
    lr_fit: float = 0.01
    lr_train: float = 1e-3
    lr_schedule: str = "constant"
    max_iter: int = 500
    n_target: int = 20000
    n_eval: int = 100000
    seed: int = 0
    views: Tuple[float, ...] = (0.0, 90.0, 180.0, 270.0)
    rd_widths: Tuple[int, ...] = (8, 16, 32)

    def arch(self, widths: Optional[Sequence[int]] = None) -> DecoderArch:
        ws = list(widths if widths is not None else self.widths)
        if len(ws) == 1:
            ws = ws * self.L
        if len(ws) != self.L:
            raise InputError(f"widths lists {len(ws)} entries but L={self.L}")
        arch = DecoderArch(
            self.K_feat, self.C, self.head_width,
            tuple(UpModule(self.kernel, self.scale, w) for w in ws),
            self.head_kernel, self.final_kernel,
        )
        if arch.output_res != self.K:
            raise InputError(
                f"K_feat * scale^L = {arch.output_res} does not match K = {self.K}"
            )
        return arch

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lambda1=self.lambda1, lambda2=self.lambda2, tau=self.tau, epochs=self.epochs,
            lr=self.lr_train, lr_schedule=self.lr_schedule, feature_quant=QuantSpec(-1.0, 1.0, self.N_feat),
            param_quant=QuantSpec(-1.0, 1.0, self.N_param), seed=self.seed,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(Config)}


def _parse_value(key: str, text: str):
    parser = {"str": str, "int": int, "float": float, "Tuple[int, ...]": _ints, "Tuple[float, ...]": _floats}
    return parser[str(_FIELD_TYPES[key])](text)


def parse_config(text: str, base: Config = Config()) -> Config:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise InputError(f"config line {lineno}: unknown key '{key}'")
        try:
            updates[key] = _parse_value(key, value)
        except ValueError as exc:
            raise InputError(f"config line {lineno}: bad value for {key}: {exc}") from exc
    cfg = replace(base, **updates)
    _validate(cfg)
    return cfg


def _validate(cfg: Config) -> None:
    positive = ["K", "K_feat", "C", "L", "scale", "head_width", "kernel", "head_kernel",
                "final_kernel", "N_feat", "N_param", "n_target", "n_eval"]
    for key in positive:
        if getattr(cfg, key) <= 0:
            raise InputError(f"{key} must be positive")
    if cfg.K < 8:
        raise InputError("K must be at least 8")
    if any(w <= 0 for w in cfg.widths + cfg.rd_widths):
        raise InputError("widths must be positive")
    if cfg.lambda_reg < 0 or cfg.lambda1 < 0 or cfg.lambda2 < 0:
        raise InputError("loss weights must be non-negative")
    if not 0 < cfg.tau <= 1:
        raise InputError("tau must lie in (0, 1]")
    if cfg.epochs < 0 or cfg.max_iter < 0:
        raise InputError("epochs and max_iter must be non-negative")
    if cfg.lr_fit <= 0 or cfg.lr_train <= 0:
        raise InputError("learning rates must be positive")
    if cfg.lr_schedule not in ("constant", "cosine"):
        raise InputError("lr_schedule must be 'constant' or 'cosine'")


def load_config(path: Optional[str], seed: Optional[int]) -> Config:
    cfg = Config()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise InputError(f"config file {path} not found")
        cfg = parse_config(p.read_text(), cfg)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _mesh_files(directory: str) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"mesh directory {directory} not found")
    files = sorted(d.glob("*.obj"), key=lambda p: p.name)
    if not files:
        raise InputError(f"no .obj files in {directory}")
    return files


def _read_mesh(path: Path) -> TriangleMesh:
    try:
        mesh = load_obj(path)
    except (ObjParseError, MeshStructureError, DegenerateMeshError) as exc:
        raise InputError(f"{path}: {exc}") from exc
    if mesh.n_faces == 0:
        raise InputError(f"{path}: mesh has no faces")
    if np.abs(mesh.vertices).max() > 1.0:
        raise InputError(f"{path}: vertices must lie in [-1, 1]^3 (normalize the mesh first)")
    return mesh


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} {path} not found")
    return p


def _fit_one(args) -> Tuple[TsdfDefTensor, float, float, float]:
    path, cfg = args
    mesh = _read_mesh(Path(path))
    res = fit_tensor_detailed(
        mesh, GridSpec(cfg.K), max_iter=cfg.max_iter, lr=cfg.lr_fit,
        lambda_reg=cfg.lambda_reg, seed=cfg.seed, n_target=cfg.n_target,
    )
    views = default_views(azimuths_deg=cfg.views)
    image_err = recon_error(dmc_extract(res.tensor), mesh, views)[2] if views else float("nan")
    return res.tensor, res.initial_loss, res.final_loss, image_err


def _require_out(args) -> Path:
    if not args.out:
        raise InputError("--out is required")
    return Path(args.out)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_fit(args, cfg: Config) -> int:
    out = _require_out(args)
    files = _mesh_files(args.mesh_dir)
    jobs = [(str(f), cfg) for f in files]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_fit_one, jobs))
    else:
        results = []
        for i, job in enumerate(jobs):
            results.append(_fit_one(job))
            log.info("fit %d/%d %s", i + 1, len(jobs), files[i].stem)
    for f, (_, initial, final, image_err) in zip(files, results):
        print(f"{f.stem}: surrogate loss {initial:.6f} -> {final:.6f}, image error {image_err:.1f}")
    save_tensors(out, [f.stem for f in files], [r[0] for r in results])
    print(f"wrote {len(files)} tensors to {out}")
    return EXIT_OK


def cmd_train(args, cfg: Config) -> int:
    out = _require_out(args)
    names, tensors = load_tensors(_need_file(args.tensors, "tensor archive"))
    if not tensors:
        raise InputError("tensor archive is empty")
    k = tensors[0].grid.resolution
    if k != cfg.K:
        raise InputError(f"archive has K={k} but the config says K={cfg.K}")
    arch = cfg.arch()
    tcfg = cfg.train_config()
    state = None
    if args.resume:
        state = load_state(_need_file(args.resume, "model state"))
        if state.arch != arch or state.names != names:
            raise InputError("resumed state does not match the config or archive")
        tcfg = state.cfg
    state = train_set(
        tensors, arch, tcfg, state=state, epochs=cfg.epochs, names=names,
        log=lambda e, l: log.info("epoch %d loss %.6f", e, l),
    )
    save_state(state, out)
    loss_csv = out.with_name(out.stem + "_loss.csv")
    with open(loss_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(state.history, 1):
            w.writerow([i, repr(v)])
    print(f"trained {len(names)} shapes for {state.epoch} epochs; final loss {state.history[-1]:.6f}"
          if state.history else "no epochs run")
    return EXIT_OK


def _original_bytes(mesh_dir: Optional[str], names: Sequence[str]) -> Optional[int]:
    if not mesh_dir:
        return None
    files = {p.stem: p for p in _mesh_files(mesh_dir)}
    missing = [n for n in names if n not in files]
    if missing:
        raise InputError(f"original meshes missing for: {', '.join(missing)}")
    return sum(files[n].stat().st_size for n in names)


def cmd_compress(args, cfg: Config) -> int:
    out = _require_out(args)
    state = load_state(_need_file(args.state, "model state"))
    original = _original_bytes(args.meshes, state.names)
    data, report = compress_set(
        state.features, state.params, state.arch,
        state.cfg.feature_quant, state.cfg.param_quant, state.names, original,
    )
    out.write_bytes(data)
    if report is not None:
        print(report.summary())
    else:
        print(f"compressed {len(data) / 1e6:.4f} MB")
    return EXIT_OK


def _write_meshes(out_dir: Path, decoded) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for shape in decoded:
        save_obj(shape.mesh, out_dir / f"{shape.name}.obj")


def cmd_decompress(args, cfg: Config) -> int:
    out = _require_out(args)
    data = _need_file(args.bitstream, "bitstream").read_bytes()
    bs = decode_bitstream(data)  # validates fully before anything is written
    decoded = decode_shapes(bs)
    _write_meshes(out, decoded)
    for shape in decoded:
        print(f"{shape.name}: {shape.mesh.n_faces} faces, decoded in {1e3 * shape.seconds:.1f} ms")
    return EXIT_OK


def cmd_add(args, cfg: Config) -> int:
    out = _require_out(args)
    mesh_path = _need_file(args.mesh, "mesh")
    mesh = _read_mesh(mesh_path)
    state = load_state(_need_file(args.state, "model state"))
    bs = decode_bitstream(_need_file(args.bitstream, "bitstream").read_bytes())
    if bs.arch != state.arch:
        raise InputError("model state and bitstream describe different decoders")
    if mesh_path.stem in bs.names:
        raise InputError(f"shape '{mesh_path.stem}' is already in the bitstream")
    res = fit_tensor_detailed(
        mesh, GridSpec(bs.arch.output_res), max_iter=cfg.max_iter, lr=cfg.lr_fit,
        lambda_reg=cfg.lambda_reg, seed=cfg.seed, n_target=cfg.n_target,
    )
    feature = fit_new_feature(res.tensor, bs.params(), bs.arch, state.cfg)
    bs.features = np.concatenate([bs.features, quantize(feature, bs.feature_quant)[None]])
    bs.names = list(bs.names) + [mesh_path.stem]
    out.write_bytes(encode_bitstream(bs))
    new = decode_shapes(_single(bs, -1))[0]
    rec = evaluate_pair(new.mesh, mesh, cfg.n_eval, cfg.seed)
    print(f"added {mesh_path.stem}: shape count {bs.n_shapes}, CD {rec.cd:.6f}, F1@0.01 {rec.f1_01:.4f}")
    return EXIT_OK


def _single(bs, index: int):
    return Bitstream(bs.arch, bs.feature_quant, bs.param_quant, bs.features[index][None],
                     bs.theta, [bs.names[index]])


def evaluate_dirs(orig_dir: str, recon_dir: str, n_eval: int, seed: int) -> List[Tuple[str, MetricsRecord]]:
    orig = _mesh_files(orig_dir)
    recon = _mesh_files(recon_dir)
    if len(orig) != len(recon):
        raise InputError(f"{len(orig)} original meshes but {len(recon)} reconstructions")
    if [p.stem for p in orig] != [p.stem for p in recon]:
        raise InputError("original and reconstructed mesh names differ")
    return [
        (o.stem, evaluate_pair(load_obj(r), load_obj(o), n_eval, seed)) for o, r in zip(orig, recon)
    ]


def cmd_eval(args, cfg: Config) -> int:
    out = _require_out(args)
    records = evaluate_dirs(args.orig_dir, args.recon_dir, cfg.n_eval, cfg.seed)
    emit_shape_metrics(Path(args.recon_dir).name, records, out)
    for name, r in records:
        print(f"{name}: cd {r.cd:.6f} nc {r.nc:.4f} f1@0.005 {r.f1_005:.4f} f1@0.01 {r.f1_01:.4f}")
    return EXIT_OK


def cmd_rd(args, cfg: Config) -> int:
    out = _require_out(args)
    names, tensors = load_tensors(_need_file(args.tensors, "tensor archive"))
    if not tensors or tensors[0].grid.resolution != cfg.K:
        raise InputError(f"archive must hold tensors with K={cfg.K}")
    gts = {p.stem: p for p in _mesh_files(args.meshes)}
    original = _original_bytes(args.meshes, names)
    points = []
    for width in cfg.rd_widths:
        arch = cfg.arch((width,))
        state = train_set(tensors, arch, cfg.train_config(), names=names)
        data, report = compress_set(
            state.features, state.params, arch, state.cfg.feature_quant,
            state.cfg.param_quant, names, original,
        )
        decoded = decode_shapes(decode_bitstream(data))
        recs = [evaluate_pair(d.mesh, load_obj(gts[d.name]), cfg.n_eval, cfg.seed) for d in decoded]
        mean = MetricsRecord(*np.mean([r.row() for r in recs], axis=0).tolist())
        points.append(RdPoint(f"width{width}", report.ratio, mean))
        print(f"width {width}: ratio {report.ratio:.2f}, cd {mean.cd:.6f}, f1@0.01 {mean.f1_01:.4f}")
    emit_rd(points, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--workers", type=int, default=1, help="parallel workers for fit")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="meshpress", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("fit", parents=[common], help="fit a TSDF-Def tensor per mesh")
    p.add_argument("mesh_dir")
    p = sub.add_parser("train", parents=[common], help="train features and decoder")
    p.add_argument("tensors")
    p.add_argument("--resume", help="model state to continue from")
    p = sub.add_parser("compress", parents=[common], help="entropy-code a trained model")
    p.add_argument("state")
    p.add_argument("--meshes", help="original OBJ directory, for the compression report")
    p = sub.add_parser("decompress", parents=[common], help="decode meshes from a bitstream")
    p.add_argument("bitstream")
    p = sub.add_parser("add", parents=[common], help="append a new mesh to a bitstream")
    p.add_argument("mesh")
    p.add_argument("state")
    p.add_argument("bitstream")
    p = sub.add_parser("eval", parents=[common], help="per-shape distortion metrics")
    p.add_argument("orig_dir")
    p.add_argument("recon_dir")
    p = sub.add_parser("rd", parents=[common], help="rate-distortion sweep over decoder widths")
    p.add_argument("tensors")
    p.add_argument("--meshes", required=True, help="original OBJ directory")
    return parser


COMMANDS = {
    "fit": cmd_fit, "train": cmd_train, "compress": cmd_compress, "decompress": cmd_decompress,
    "add": cmd_add, "eval": cmd_eval, "rd": cmd_rd,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.workers < 1:
            raise InputError("--workers must be at least 1")
        cfg = load_config(args.config, args.seed)
        return COMMANDS[args.command](args, cfg)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (BitstreamError, StateFileError, ArchiveError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (EmptySurfaceError, ObjParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
