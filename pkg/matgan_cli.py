#!/usr/bin/env python3
"""
matgan_cli.py - Command-line entry point for matgan3d.

Subcommands: synth | train | generate | moments | compare | classify | nn
Each one prints a JSON result on stdout; logs go to stderr and matgan.log.
All randomness derives from the single `seed` key, split per subcommand.
"""

import argparse
import csv
import dataclasses
import glob
import json
import logging
import os
import sys

import numpy as np

import autodiff_tensor as ad
import feature_classifier as fc
import matgan_logger as _mlog
import moment_invariants as mi
import synth_data as sd
import voxel_grid as vg
import wgan_trainer as wt
from autodiff_tensor import Tensor
from matgan_config import CANONICAL_KEYS, ConfigError, RunConfig
from style_gan3d import Discriminator, load_checkpoint

logger = _mlog.get("cli")

# consumer ids for splitting the top-level seed
SEED_STREAMS = {"synth": 0, "train": 1, "generate": 2, "classify": 3}


def child_seed(seed, consumer):
    """Deterministic 32-bit seed for one consumer of the run seed."""
    seq = np.random.SeedSequence(seed, spawn_key=(SEED_STREAMS[consumer],))
    return int(seq.generate_state(1)[0])


# ========== INPUT HELPERS ==========
def _volume_files(path):
    """[(name, path)] in manifest order for a dataset directory, sorted otherwise."""
    if os.path.isdir(path):
        if os.path.exists(os.path.join(path, sd.MANIFEST_NAME)):
            return [(r.file, os.path.join(path, r.file)) for r in sd.read_manifest(path)]
        found = sorted(glob.glob(os.path.join(path, "*.vgrid")) + glob.glob(os.path.join(path, "*.binvox")))
        return [(os.path.basename(p), p) for p in found]
    if not os.path.exists(path):
        raise FileNotFoundError(f"input not found: {path}")
    return [(os.path.basename(path), path)]


def _load_volume(path):
    if path.endswith(".binvox"):
        return vg.read_binvox(path)
    if vg.payload_kind(path) == vg.KIND_LABELS:
        return vg.load_labels(path)
    return vg.load_grid(path)


def _load_grids(path):
    files = _volume_files(path)
    if not files:
        raise FileNotFoundError(f"no voxel files in {path}")
    return [name for name, _ in files], [_load_volume(p) for _, p in files]


def _require_grids(names, volumes, op):
    for name, vol in zip(names, volumes):
        if not isinstance(vol, vg.VoxelGrid):
            raise ValueError(f"{op}: {name} holds grain labels, expected an occupancy grid")
    return volumes


def _critic_for(config, checkpoint):
    if checkpoint:
        _, d, _ = load_checkpoint(checkpoint, dtype=config.DTYPE)
        return d
    logger.warning("No --checkpoint given, extracting features from an untrained critic")
    return Discriminator(config.model_config(), seed=child_seed(config.SEED, "classify"))


# ========== COMMANDS ==========
class MatganCommands:
    """One method per subcommand; each returns a JSON-serializable result dict."""

    def __init__(self, config):
        self.config = config

    def synth(self, args):
        spec = sd.SynthSpec(
            kind=args.kind,
            size=args.size,
            count=args.count,
            seed=child_seed(self.config.SEED, "synth"),
            n_seeds=args.n_seeds,
            grain_cube=args.grain_cube if args.grain_cube else self.config.OUTPUT_SIZE,
        )
        rows = sd.generate_dataset(spec, args.out)
        return {"success": True, "written": len(rows), "out": args.out,
                "manifest": os.path.join(args.out, sd.MANIFEST_NAME)}

    def train(self, args):
        model_cfg = self.config.model_config()
        train_cfg = self.config.train_config()
        train_cfg = dataclasses.replace(train_cfg, seed=child_seed(self.config.SEED, "train"))
        names, grids = _load_grids(args.data)
        _require_grids(names, grids, "train")
        g = d = None
        start = 0
        if args.resume:
            g, d, start = load_checkpoint(args.resume, dtype=self.config.DTYPE)
            if g.config != model_cfg:
                raise ConfigError(f"checkpoint {args.resume} was trained with {g.config}, config asks for {model_cfg}")
        result = wt.train(train_cfg, model_cfg, grids, out_dir=args.out, generator=g, discriminator=d,
                          start_step=start)
        last = result.trace[-1] if result.trace else None
        return {
            "success": True,
            "steps": result.generator_updates,
            "critic_updates": result.critic_updates,
            "final_d_loss": last.d_loss if last else None,
            "final_g_loss": last.g_loss if last else None,
            "checkpoints": result.checkpoints,
            "log": os.path.join(args.out, "train_log.csv"),
        }

    def generate(self, args):
        g, _, step = load_checkpoint(args.checkpoint, dtype=self.config.DTYPE)
        rng = np.random.default_rng(child_seed(self.config.SEED, "generate"))
        z = wt.sample_latent(rng, args.count, g.config.latent_dim, self.config.Z_VARIANCE, g.config.np_dtype)
        os.makedirs(args.out, exist_ok=True)
        written, artifacts = [], []
        with ad.no_grad():
            for start in range(0, args.count, self.config.BATCH):
                out = g(Tensor(z[start:start + self.config.BATCH])).data
                for i, sample in enumerate(out[:, 0], start=start):
                    grid = vg.VoxelGrid(sample, pitch=sd.SYNTH_PITCH)
                    name = os.path.join(args.out, f"sample_{i:05d}.vgrid")
                    if args.binarize:
                        grid = vg.binarize(grid, self.config.THRESHOLD)
                        artifacts.append(vg.artifact_voxels(grid))
                        if args.export_largest and grid.solid_count():
                            largest_dir = os.path.join(args.out, "largest")
                            os.makedirs(largest_dir, exist_ok=True)
                            vg.save_grid(os.path.join(largest_dir, f"sample_{i:05d}.vgrid"), vg.largest_component(grid))
                    vg.save_grid(name, grid)
                    written.append(name)
        logger.info(f"Generated {len(written)} samples from {args.checkpoint} (step {step})")
        result = {"success": True, "written": len(written), "out": args.out, "checkpoint_step": step}
        if args.binarize:
            result["artifact_voxels"] = artifacts
        return result

    def moments(self, args):
        names, volumes = _load_grids(args.input)
        rows, artifacts = [], 0
        for name, vol in zip(names, volumes):
            if isinstance(vol, vg.LabeledVolume):
                for label, inv in mi.invariants_for_labels(vol, workers=self.config.WORKERS).items():
                    rows.append((name, label, inv))
                continue
            binary = vol if vol.is_binary else vg.binarize(vol, self.config.THRESHOLD)
            stray = vg.artifact_voxels(binary)
            if stray:
                logger.debug(f"{name}: {stray} voxels outside the largest component")
            artifacts += stray
            rows.append((name, 1, mi.omega_invariants(mi.compute_moments(binary))))

        os.makedirs(args.out, exist_ok=True)
        mi.write_invariants_csv(os.path.join(args.out, "invariants.csv"), rows)
        result = {"success": True, "grains": len(rows), "nonphysical": sum(1 for r in rows if not r[2].valid),
                  "artifact_voxels": artifacts, "summaries": {}}
        population = [inv for _, _, inv in rows]
        for which in mi.INVARIANT_NAMES:
            try:
                summary = mi.summarize(population, bins=self.config.BINS, which=which)
            except mi.EmptyDistributionError:
                logger.warning(f"{which}: no physical grains, summary skipped")
                continue
            path = os.path.join(args.out, f"summary_{which}.csv")
            mi.write_summary_csv(path, summary)
            result["summaries"][which] = {"path": path, "count": summary.count,
                                          "mean": summary.mean, "std": summary.std}
        return result

    def compare(self, args):
        a = mi.read_summary_csv(args.reference)
        b = mi.read_summary_csv(args.candidate)
        cmp = mi.compare(a, b)
        if args.out:
            mi.write_comparison_csv(args.out, cmp)
        return {
            "success": True,
            "which": cmp.which,
            "delta_mean": cmp.delta_mean,
            "std_ratio": cmp.std_ratio,
            "intersection": cmp.intersection,
            "low_tail_fraction": cmp.low_tail_fraction,
            "signature_holds": cmp.signature_holds,
        }

    def classify(self, args):
        d = _critic_for(self.config, args.checkpoint)
        train_grids, train_labels = sd.load_dataset(args.train)
        test_grids, test_labels = sd.load_dataset(args.test)
        x_train = fc.extract_features(d, train_grids)
        x_test = fc.extract_features(d, test_grids)
        if args.features_out:
            fc.write_features_csv(args.features_out, x_train, train_labels)
        model = fc.svm_train(x_train, train_labels, C=args.C, epochs=args.epochs,
                             seed=child_seed(self.config.SEED, "classify"), standardize=args.standardize)
        acc = fc.accuracy(fc.svm_predict(model, x_test), test_labels)
        print(f"accuracy: {acc:.4f}")
        return {"success": True, "train": len(x_train), "test": len(x_test),
                "feature_length": int(x_train.values.shape[1]), "accuracy": acc}

    def nn(self, args):
        q_names, queries = _load_grids(args.query)
        c_names, corpus = _load_grids(args.corpus)
        _require_grids(q_names + c_names, queries + corpus, "nn")
        if args.space == "features":
            d = _critic_for(self.config, args.checkpoint)
            q = fc.extract_features(d, queries).values
            c = fc.extract_features(d, corpus).values
        else:
            q = np.stack([g.data.ravel() for g in queries]).astype(np.float64)
            c = np.stack([g.data.ravel() for g in corpus]).astype(np.float64)
        idx, dist = fc.nearest_neighbor(q, c)
        pairs = []
        for name, i, dd in zip(q_names, idx, dist):
            print(f"{name}\t{c_names[i]}\t{dd:.6g}")
            pairs.append({"query": name, "nearest": c_names[i], "distance": float(dd)})
        if args.out:
            with open(args.out, "w", newline="", encoding="utf-8") as f:
                w = csv.writer(f)
                w.writerow(["query", "nearest", "distance"])
                for p in pairs:
                    w.writerow([p["query"], p["nearest"], repr(p["distance"])])
        return {"success": True, "queries": len(pairs), "min_distance": float(np.min(dist)),
                "all_distinct": bool(np.all(dist > 0))}


def _build_commands(commands):
    return {
        "synth": commands.synth,
        "train": commands.train,
        "generate": commands.generate,
        "moments": commands.moments,
        "compare": commands.compare,
        "classify": commands.classify,
        "nn": commands.nn,
    }


# ========== ARGUMENTS ==========
def _config_parent():
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("configuration (defaults, then --config file, then these flags)")
    group.add_argument("--config", help="key=value config file")
    for key, (kind, default) in CANONICAL_KEYS.items():
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", type=kind, default=None,
                           metavar=kind.__name__.upper(), help=f"default {default}")
    return parent


def build_parser():
    parent = _config_parent()
    parser = argparse.ArgumentParser(prog="matgan", description="3D voxel GAN for grain microstructures")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[parent], help="write a synthetic dataset")
    p.add_argument("--kind", choices=sd.KINDS, required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=16, help="grid edge (voronoi: tessellated domain edge)")
    p.add_argument("--n-seeds", type=int, default=40, help="voronoi seed points per tessellation")
    p.add_argument("--grain-cube", type=int, default=None, help="voronoi grain cube edge (default output_size)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[parent], help="train generator and critic")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="directory for train_log.csv and checkpoints")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("generate", parents=[parent], help="sample volumes from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--binarize", action="store_true", help="write thresholded grids")
    p.add_argument("--export-largest", action="store_true",
                   help="with --binarize, also write each largest component under largest/")

    p = sub.add_parser("moments", parents=[parent], help="per-grain moment invariants and summaries")
    p.add_argument("--input", required=True, help="VGRID/binvox file or directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", parents=[parent], help="compare two distribution summaries")
    p.add_argument("--reference", required=True)
    p.add_argument("--candidate", required=True)
    p.add_argument("--out", help="comparison CSV")

    p = sub.add_parser("classify", parents=[parent], help="critic features + linear SVM")
    p.add_argument("--train", required=True, help="labelled dataset directory")
    p.add_argument("--test", required=True, help="labelled dataset directory")
    p.add_argument("--checkpoint", help="trained critic weights (an untrained critic is used otherwise)")
    p.add_argument("--C", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--features-out", help="CSV of training features")

    p = sub.add_parser("nn", parents=[parent], help="nearest training sample per query")
    p.add_argument("--query", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--space", choices=("voxels", "features"), default="voxels")
    p.add_argument("--checkpoint", help="critic weights for --space features")
    p.add_argument("--out", help="CSV of nearest-neighbour distances")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {key: getattr(args, f"cfg_{key}") for key in CANONICAL_KEYS}
    try:
        config = RunConfig(args.config, overrides)
    except ConfigError as e:
        print(f"matgan: config error: {e}", file=sys.stderr)
        return 2

    _mlog.setup(console_level=getattr(logging, config.LOG_LEVEL.upper(), logging.INFO))
    config.log_effective()
    commands = _build_commands(MatganCommands(config))
    logger.info(f"Running '{args.command}'")
    try:
        result = commands[args.command](args)
    except (ValueError, OSError, RuntimeError) as e:
        logger.debug(f"'{args.command}' failed", exc_info=True)
        logger.error(f"'{args.command}' failed: {e}")
        print(f"matgan {args.command}: error: {e}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
