"""Command line surface: one subcommand per pipeline stage.

Every stage reads the same hyperparameter overrides, stamps its output
with the resulting config hash, and refuses inputs produced under a
different hash. Validation problems exit 2; stage progress goes to
stderr, summaries and reports to stdout.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import figures, service
from .clustering import ClusterModel, kmeans
from .config import PipelineConfig
from .contrastive import load_checkpoint, save_checkpoint, train_joint
from .gesture_vae import GestureVae, VaeConfig, train_vae
from .ingest import load_dataset, synth_dataset
from .metrics import FgdFeatureModel, metric_report
from .motion import load_clip, save_clip
from .retrieval import GenerationRequest, GestureLibrary, build_library, generate
from .text_encoder import TextEncoder, pretrain_attention

HYPER_FLAGS = (
    "seed", "k_clusters", "cluster_restarts", "margin", "alpha", "beta", "batch_size",
    "lr", "pretrain_lr", "vae_epochs", "pretrain_epochs", "joint_epochs",
    "fgd_epochs", "fps", "k_neighbors",
)


def _hyper_parser():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="pipeline config JSON to start from")
    g = p.add_argument_group("hyperparameter overrides")
    g.add_argument("--seed", type=int)
    g.add_argument("--k-clusters", type=int, dest="k_clusters")
    g.add_argument("--cluster-restarts", type=int, dest="cluster_restarts")
    g.add_argument("--margin", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--beta", type=float)
    g.add_argument("--batch-size", type=int, dest="batch_size")
    g.add_argument("--lr", type=float)
    g.add_argument("--pretrain-lr", type=float, dest="pretrain_lr")
    g.add_argument("--vae-epochs", type=int, dest="vae_epochs")
    g.add_argument("--pretrain-epochs", type=int, dest="pretrain_epochs")
    g.add_argument("--joint-epochs", type=int, dest="joint_epochs")
    g.add_argument("--fgd-epochs", type=int, dest="fgd_epochs")
    g.add_argument("--fps", type=float)
    g.add_argument("--k-neighbors", type=int, dest="k_neighbors")
    return p


def _config_from(args):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    return cfg.override(**{n: getattr(args, n, None) for n in HYPER_FLAGS})


def _require_hash(found, cfg, what):
    if found != cfg.config_hash:
        raise ValueError(
            f"{what} was produced under config {found[:12] or '<unset>'}, "
            f"the active config is {cfg.config_hash[:12]}"
        )


def _progress(stage):
    return lambda epoch, loss: print(
        f"{stage} epoch {epoch + 1}: {loss:.6f}", file=sys.stderr
    )


# ---------------------------------------------------------------------------
# stages

def cmd_synth_data(args):
    cfg = _config_from(args)
    ds = synth_dataset(
        args.out,
        seed=cfg.seed,
        families=args.families,
        per_family=args.per_family,
        fps=cfg.fps,
    )
    print(
        f"wrote {len(ds.samples)} samples over {args.families} families to {args.out}"
    )
    return 0


def cmd_train_vae(args):
    cfg = _config_from(args)
    ds = load_dataset(args.dataset)
    sequences = [item.keyposes for item in ds.training_samples("train")]
    vae, trace = train_vae(
        sequences,
        epochs=cfg.vae_epochs,
        seed=cfg.seed,
        config=VaeConfig(hidden=cfg.hidden, z_dim=cfg.z_dim),
        lr=cfg.lr,
        batch_size=cfg.batch_size,
        log=_progress("vae"),
    )
    vae.config_hash = cfg.config_hash
    vae.save(args.out)
    print(f"vae on {len(sequences)} sequences, final loss {trace[-1]:.6f} -> {args.out}")
    return 0


def cmd_cluster(args):
    cfg = _config_from(args)
    ds = load_dataset(args.dataset)
    vae = GestureVae.load(args.vae)
    _require_hash(vae.config_hash, cfg, "vae model")
    latents = [
        (item.clip_id, vae.encode(item.keyposes).mu)
        for item in ds.training_samples("train")
    ]
    model = kmeans(latents, k=cfg.k_clusters, seed=cfg.seed,
                   n_init=cfg.cluster_restarts)
    model = dataclasses.replace(model, config_hash=cfg.config_hash)
    model.save(args.out)
    print(
        f"k={cfg.k_clusters} over {len(latents)} latents, "
        f"final sse {model.sse_trace[-1]:.6f} -> {args.out}"
    )
    return 0


def cmd_pretrain_attention(args):
    cfg = _config_from(args)
    ds = load_dataset(args.dataset)
    examples = [(item.text, item.labels) for item in ds.training_samples("train")]
    encoder, trace = pretrain_attention(
        examples,
        ds.provider(),
        epochs=cfg.pretrain_epochs,
        seed=cfg.seed,
        lr=cfg.pretrain_lr,
        batch_size=cfg.batch_size,
        log=_progress("attention"),
    )
    encoder.config_hash = cfg.config_hash
    encoder.save(args.out)
    print(
        f"attention head on {len(examples)} examples, final bce "
        f"{trace[-1]:.6f} -> {args.out}"
    )
    return 0


def cmd_train(args):
    cfg = _config_from(args)
    ds = load_dataset(args.dataset)
    clusters = ClusterModel.load(args.clusters)
    _require_hash(clusters.config_hash, cfg, "cluster model")
    text_enc = None
    if args.text_encoder:
        text_enc = TextEncoder.load(args.text_encoder)
        _require_hash(text_enc.config_hash, cfg, "pretrained text encoder")
    samples = ds.training_samples("train")
    text_enc, gest_enc, traces = train_joint(
        samples,
        clusters,
        ds.provider(),
        epochs=cfg.joint_epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        lr=cfg.lr,
        margin=cfg.margin,
        alpha=cfg.alpha,
        beta=cfg.beta,
        text_encoder=text_enc,
        log=_progress("joint"),
    )
    text_enc.config_hash = ""
    save_checkpoint(args.out, text_enc, gest_enc, config_hash=cfg.config_hash)
    print(
        f"joint training on {len(samples)} samples, final total "
        f"{traces['total'][-1]:.6f} -> {args.out}"
    )
    return 0


def cmd_build_library(args):
    cfg = _config_from(args)
    ds = load_dataset(args.dataset)
    _, gest_enc, ck_hash = load_checkpoint(args.checkpoint)
    _require_hash(ck_hash, cfg, "checkpoint")
    clusters = ClusterModel.load(args.clusters)
    _require_hash(clusters.config_hash, cfg, "cluster model")
    samples = ds.training_samples("train")
    library = build_library(
        samples, gest_enc, clusters, args.out, config_hash=cfg.config_hash
    )
    print(f"library of {len(library)} entries -> {args.out}")
    return 0


def _parse_override(specs):
    if not specs:
        return None
    pairs = []
    for spec in specs:
        idx, _, weight = spec.partition(":")
        try:
            pairs.append((int(idx), float(weight)))
        except ValueError:
            raise ValueError(
                f"override {spec!r} is not index:weight"
            ) from None
    return tuple(pairs)


def cmd_generate(args):
    cfg = _config_from(args)
    ds = load_dataset(args.dataset)
    text_enc, gest_enc, ck_hash = load_checkpoint(args.checkpoint)
    _require_hash(ck_hash, cfg, "checkpoint")
    library = GestureLibrary.load(args.library)
    _require_hash(library.config_hash, cfg, "library")
    request = GenerationRequest(
        text=args.text,
        attention_override=_parse_override(args.override),
        target_duration_s=args.duration,
        seed=cfg.seed,
        k_neighbors=cfg.k_neighbors,
    )
    motion, diagnostics = generate(
        request, (text_enc, gest_enc, ck_hash), library, ds.provider()
    )
    out = Path(args.out)
    save_clip(motion, out)
    diag_path = out.with_suffix(".diagnostics.json")
    diag_doc = {
        "config_hash": cfg.config_hash,
        "segments": [d.to_doc() for d in diagnostics],
    }
    diag_path.write_bytes(
        (json.dumps(diag_doc, sort_keys=True, separators=(",", ":")) + "\n").encode()
    )
    for d in diagnostics:
        print(
            f"segment {d.segment}: {' '.join(d.tokens)} -> "
            f"{d.clip_id} (distance {d.distance:.4f})"
        )
    print(f"wrote {out} and {diag_path}")
    return 0


def _load_clip_dir(path):
    path = Path(path)
    files = sorted(path.glob("*.json"))
    if not files:
        raise ValueError(f"no motion files in {path}")
    return [load_clip(f) for f in files]


def _load_scores(path, set_a):
    doc = json.loads(Path(path).read_bytes().decode())
    if isinstance(doc, list):
        return [float(v) for v in doc]
    scores = []
    for clip in set_a:
        if clip.clip_id not in doc:
            raise ValueError(f"no score for clip {clip.clip_id!r}")
        scores.append(float(doc[clip.clip_id]))
    return scores


def cmd_eval(args):
    cfg = _config_from(args)
    set_a = _load_clip_dir(args.set_a)
    set_b = _load_clip_dir(args.set_b)
    if args.feature_vae:
        model = FgdFeatureModel.load(args.feature_vae)
    else:
        model = FgdFeatureModel.fit(
            set_a + set_b,
            epochs=cfg.fgd_epochs,
            seed=cfg.seed,
            lr=cfg.lr,
            z_dim=cfg.fgd_z_dim,
            frame_len=cfg.fgd_frame_len,
            pad_len=cfg.fgd_pad_len,
            log=_progress("features"),
        )
    scores = _load_scores(args.scores, set_a) if args.scores else None
    report = metric_report(
        set_a, set_b, model, scores=scores, config_hash=cfg.config_hash
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = json.dumps(report.to_doc(), sort_keys=True, separators=(",", ":")) + "\n"
    (out / "report.json").write_bytes(doc.encode())
    (out / "report.csv").write_text(report.csv())
    (out / "report.txt").write_text(report.table())
    figures.metric_bars(report, out / "metrics.png")

    feats_a = model.features(set_a)
    feats_b = model.features(set_b)
    rng = np.random.default_rng(cfg.seed)
    q, _ = np.linalg.qr(rng.standard_normal((feats_a.shape[1], 2)))
    points = [
        {"xy": (f @ q).tolist(), "cluster": idx}
        for idx, feats in enumerate((feats_a, feats_b))
        for f in feats
    ]
    figures.space_scatter(points, out / "features.png")

    sys.stdout.write(report.table())
    print(f"report files in {out}")
    return 0


def cmd_serve(args):
    cfg = _config_from(args)
    ds = load_dataset(args.dataset)
    text_enc, gest_enc, ck_hash = load_checkpoint(args.checkpoint)
    _require_hash(ck_hash, cfg, "checkpoint")
    library = GestureLibrary.load(args.library)
    _require_hash(library.config_hash, cfg, "library")
    state = service.ServiceState(
        text_encoder=text_enc,
        gesture_encoder=gest_enc,
        library=library,
        provider=ds.provider(),
        config_hash=cfg.config_hash,
        seed=cfg.seed,
    )
    service.serve(
        state,
        port=args.port,
        ready=lambda s: print(f"listening on port {s.server_address[1]}", flush=True),
    )
    return 0


# ---------------------------------------------------------------------------
# wiring

def build_parser():
    hyper = _hyper_parser()
    parser = argparse.ArgumentParser(
        prog="gesturekit",
        description="text-to-gesture pipeline: data, training, retrieval, serving",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[hyper], help="generate a toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--families", type=int, default=4)
    p.add_argument("--per-family", type=int, default=50, dest="per_family")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-vae", parents=[hyper], help="fit the key-pose vae")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("cluster", parents=[hyper], help="k-means over vae latents")
    p.add_argument("--dataset", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser(
        "pretrain-attention", parents=[hyper], help="fit the word score head"
    )
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_attention)

    p = sub.add_parser("train", parents=[hyper], help="joint contrastive training")
    p.add_argument("--dataset", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--text-encoder", dest="text_encoder")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "build-library", parents=[hyper], help="embed training clips for retrieval"
    )
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_library)

    p = sub.add_parser("generate", parents=[hyper], help="text to stitched motion")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--library", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--duration", type=float)
    p.add_argument(
        "--override",
        action="append",
        metavar="INDEX:WEIGHT",
        help="pin a word's attention, repeatable",
    )
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", parents=[hyper], help="compare two clip sets")
    p.add_argument("--set-a", required=True, dest="set_a")
    p.add_argument("--set-b", required=True, dest="set_b")
    p.add_argument("--out", required=True)
    p.add_argument("--feature-vae", dest="feature_vae")
    p.add_argument("--scores")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", parents=[hyper], help="run the HTTP service")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--library", required=True)
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
