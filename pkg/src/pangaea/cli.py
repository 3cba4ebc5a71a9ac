"""Command line interface.

Exit codes: 0 on success, 1 on a runtime failure (one machine-parsable
line on stderr), 2 on usage errors. Worker counts for multi-modality
steps are capped by the PANGAEA_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .data_io import (
    RunManifest,
    emit_plotdata,
    load_checkpoint,
    make_step_logger,
    read_plotdata,
    read_table_csv,
    read_tensor,
    sample_graph_neighbors,
    save_checkpoint,
    write_tensor,
)
from .errors import ConfigError, ContractError, PangaeaError
from .finetune import FinetuneConfig, TaskData, evaluate, finetune
from .pretrain import (
    AdamW,
    OptimizerConfig,
    ScheduleConfig,
    build_graph_batch,
    build_image_batch,
    build_table_batch,
    build_text_batch,
    build_timeseries_batch,
    default_corruption,
    impute_missing,
    make_recon_head,
    pretrain_loop,
)
from .scaling import attention_affinity, fit_scaling
from .synth import gen_synthetic
from .tokenizer import tokenize_set
from .transformer import count_parameters, desk_config, forward, init_model
from .triplets import (
    AUDIO_SHAPE,
    IMAGE_SHAPE,
    TIMESERIES_LEN,
    ModalityKind,
    encode_audio,
    encode_graph,
    encode_image,
    encode_pointcloud,
    encode_table,
    encode_text,
    encode_timeseries,
)

_PRETRAIN_NAMES = ("table", "timeseries", "text", "graph", "image")


def _resolve_manifest(args) -> RunManifest:
    manifest = RunManifest.load(args.manifest) if getattr(args, "manifest", None) \
        else RunManifest()
    overrides = {}
    for flag in ("seed", "steps", "epochs", "modalities"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if getattr(args, "config", None):
        with open(args.config) as fh:
            overrides["model"] = {**manifest.model, **json.load(fh)}
    if overrides:
        manifest = RunManifest.from_dict({**manifest.to_dict(), **overrides})
    return manifest


def _imputed_table_rows(path: str) -> np.ndarray:
    table = read_table_csv(path)
    cols = []
    for j in range(table.values.shape[1]):
        col = table.values[:, j]
        cols.append(impute_missing(col, "continuous") if np.isnan(col).any() else col)
    return np.stack(cols, axis=1)


def _load_encode_samples(modality: ModalityKind, path: str, seed: int) -> list:
    if modality is ModalityKind.TABLE:
        return [row for row in _imputed_table_rows(path)]
    if modality is ModalityKind.GRAPH:
        with open(path) as fh:
            data = json.load(fh)
        feats = np.asarray(data["features"], dtype=np.float64)
        adjacency = {int(k): list(v) for k, v in data["adjacency"].items()}
        out = []
        for node in sorted(adjacency):
            ids = sample_graph_neighbors(adjacency, node, seed=seed + node)
            out.append((feats[node], feats[ids]))
        return out
    arr = read_tensor(path)
    if modality is ModalityKind.TIMESERIES:
        if arr.ndim == 1:
            arr = arr[None, :] if arr.size == TIMESERIES_LEN else arr
        if arr.ndim == 1:
            raise ContractError(f"expected ({TIMESERIES_LEN},) or (n, "
                                f"{TIMESERIES_LEN}), got {arr.shape}")
        return [w for w in arr]
    if modality is ModalityKind.TEXT:
        ids = np.rint(arr).astype(np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        return [s for s in ids]
    if modality is ModalityKind.IMAGE:
        if arr.shape == IMAGE_SHAPE:
            arr = arr[None]
        return [im for im in arr]
    if modality is ModalityKind.AUDIO:
        if arr.shape == AUDIO_SHAPE:
            arr = arr[None]
        return [sp for sp in arr]
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ContractError(f"expected grouped points (n, g, k, 3), got {arr.shape}")
    return [g for g in arr]


_ENCODERS = {
    ModalityKind.TIMESERIES: encode_timeseries,
    ModalityKind.IMAGE: encode_image,
    ModalityKind.AUDIO: encode_audio,
    ModalityKind.POINTCLOUD: encode_pointcloud,
}


def _encode_one(modality: ModalityKind, sample, seed: int, vocab_size: int = 4096):
    if modality is ModalityKind.TABLE:
        return encode_table(sample, rng_seed=seed)
    if modality is ModalityKind.TEXT:
        return encode_text(sample, vocab_size=vocab_size)
    if modality is ModalityKind.GRAPH:
        anchor, neighbors = sample
        return encode_graph(anchor, neighbors)
    return _ENCODERS[modality](sample)


def cmd_encode(args) -> int:
    modality = ModalityKind(args.modality)
    samples = _load_encode_samples(modality, args.input, args.seed or 0)
    sets = [_encode_one(modality, s, seed=(args.seed or 0) + i)
            for i, s in enumerate(samples)]
    counts = sorted({len(s.triplets) for s in sets})
    count_text = counts[0] if len(counts) == 1 else ",".join(map(str, counts))
    summary = (f"encode modality={modality.value} samples={len(sets)} "
               f"triplets={count_text} tokens_with_marker={counts[-1] + 1}")
    print(summary)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"modality": modality.value, "samples": len(sets),
                       "triplets_per_sample": counts}, fh, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_gen_synth(args) -> int:
    modality = ModalityKind(args.modality)
    options = {}
    if args.config:
        with open(args.config) as fh:
            options = json.load(fh)
    data = gen_synthetic(modality, options, seed=args.seed or 0)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    if modality is ModalityKind.GRAPH:
        write_tensor(os.path.join(out, "features.pgt"), data["features"])
        with open(os.path.join(out, "adjacency.json"), "w") as fh:
            json.dump({"features": data["features"].tolist(),
                       "adjacency": {str(k): v for k, v in data["adjacency"].items()}},
                      fh, sort_keys=True)
        n = len(data["features"])
    else:
        write_tensor(os.path.join(out, "samples.pgt"), data["samples"])
        n = len(data["samples"])
    write_tensor(os.path.join(out, "labels.pgt"), np.asarray(data["labels"], dtype=np.float64))
    meta = {"modality": modality.value, "seed": args.seed or 0, "options": options,
            "samples": n}
    with open(os.path.join(out, "meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")
    print(f"gen-synth modality={modality.value} samples={n} out={out}")
    return 0


def cmd_fit_scaling(args) -> int:
    points = read_plotdata(args.input)
    fit = fit_scaling(points)
    print(f"fit-scaling p={fit.p:.6f} c={fit.c:.6f} sse={fit.residual_sse:.6e} "
          f"boundary={str(fit.boundary).lower()} points={len(points)}")
    if args.out:
        xs = sorted({int(round(x)) for x, _ in points} | set(range(6)))
        emit_plotdata(args.out, [(x, float(fit.predict(x))) for x in xs])
    return 0


def _synth_options(manifest: RunManifest, name: str, config_vocab: int) -> dict:
    options = dict(manifest.data.get(name, {}))
    if name == "text":
        options.setdefault("vocab", config_vocab)
    return options


def _pretrain_datasets(manifest: RunManifest, config) -> dict:
    datasets = {}
    for i, name in enumerate(manifest.modalities):
        kind = ModalityKind(name)
        options = _synth_options(manifest, name, config.vocab_size)
        data = gen_synthetic(kind, options, seed=manifest.seed + 101 * i)
        if kind is ModalityKind.GRAPH:
            feats = data["features"]
            neighbors = np.stack([
                feats[sample_graph_neighbors(data["adjacency"], node,
                                             seed=manifest.seed + node)]
                for node in range(len(feats))])
            datasets[kind] = {"features": feats, "neighbors": neighbors}
        else:
            datasets[kind] = data["samples"]
    return datasets


def _batch_for(kind: ModalityKind, data, spec, rng, batch_size: int, vocab: int):
    if kind is ModalityKind.GRAPH:
        idx = rng.choice(len(data["features"]),
                         size=min(batch_size, len(data["features"])), replace=False)
        return build_graph_batch(data["features"][idx], data["neighbors"][idx],
                                 spec, rng)
    idx = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
    if kind is ModalityKind.TABLE:
        return build_table_batch(data[idx], spec, rng)
    if kind is ModalityKind.TIMESERIES:
        return build_timeseries_batch(data[idx], spec, rng)
    if kind is ModalityKind.TEXT:
        return build_text_batch(data[idx], spec, rng, vocab_size=vocab)
    return build_image_batch(data[idx], spec, rng)


def _corruption_specs(manifest: RunManifest, kinds) -> dict:
    specs = {}
    for kind in kinds:
        spec = default_corruption(kind)
        overrides = manifest.corruption.get(kind.value)
        if overrides:
            spec = dataclasses.replace(spec, **overrides)
        specs[kind] = spec
    return specs


def _trainable(state, heads: dict) -> dict:
    params = dict(state.named())
    for kind, head in sorted(heads.items(), key=lambda kv: kv[0].value):
        for i, (w, b) in enumerate(head):
            params[f"recon.{kind.value}.{i}.w"] = w
            params[f"recon.{kind.value}.{i}.b"] = b
    return params


def cmd_pretrain(args) -> int:
    manifest = _resolve_manifest(args)
    bad = [m for m in manifest.modalities if m not in _PRETRAIN_NAMES]
    if bad:
        raise ConfigError(f"not pre-training modalities: {bad}")
    config = desk_config(**manifest.model)
    state = init_model(config, seed=manifest.seed)
    datasets = _pretrain_datasets(manifest, config)
    specs = _corruption_specs(manifest, datasets)
    heads = {}
    for i, kind in enumerate(sorted(datasets, key=lambda m: m.value)):
        raw_len = None
        if kind is ModalityKind.TABLE:
            raw_len = datasets[kind].shape[-1]
        elif kind is ModalityKind.GRAPH:
            raw_len = datasets[kind]["features"].shape[-1]
        heads[kind] = make_recon_head(state, kind, seed=manifest.seed + 1 + i,
                                      raw_len=raw_len)

    rng = np.random.default_rng(manifest.seed + 99)

    def batch_fn(step):
        return {k: _batch_for(k, datasets[k], specs[k], rng, manifest.batch_size,
                              config.vocab_size)
                for k in sorted(datasets, key=lambda m: m.value)}

    os.makedirs(manifest.out_dir, exist_ok=True)
    log_path = os.path.join(manifest.out_dir, "steps.log")
    if os.path.exists(log_path):
        os.unlink(log_path)
    schedule = ScheduleConfig(total_steps=manifest.steps)
    try:
        opt_config = OptimizerConfig(**manifest.optimizer)
    except TypeError as exc:
        raise ConfigError(f"bad optimizer settings: {exc}")
    opt = AdamW(_trainable(state, heads), opt_config)
    tstate = pretrain_loop(state, heads, batch_fn, schedule, opt,
                           steps=manifest.steps, strategy=manifest.strategy,
                           log_fn=make_step_logger(log_path))

    manifest.save(os.path.join(manifest.out_dir, "manifest.json"))
    save_checkpoint(os.path.join(manifest.out_dir, "model.ckpt"), state,
                    step=tstate.step, rng_state={"seed": manifest.seed})
    finals = " ".join(f"loss.{k.value}={v[-1]:.4f}"
                      for k, v in sorted(tstate.loss_history.items(),
                                         key=lambda kv: kv[0].value))
    print(f"pretrain steps={tstate.step} strategy={manifest.strategy} "
          f"out={manifest.out_dir} {finals}")
    return 0


def _synth_task(kind: ModalityKind, manifest: RunManifest, config, task_kind: str):
    options = _synth_options(manifest, kind.value, config.vocab_size)
    seed = manifest.seed + 7
    if kind is ModalityKind.TABLE and task_kind == "classification":
        options.setdefault("kind", "logistic")
    data = gen_synthetic(kind, options, seed=seed)
    if kind is ModalityKind.GRAPH:
        feats = data["features"]
        samples = []
        for node in range(len(feats)):
            ids = sample_graph_neighbors(data["adjacency"], node, seed=seed + node)
            samples.append((feats[node], feats[ids]))
        labels = np.asarray(data["labels"])
    else:
        samples = [s for s in data["samples"]]
        labels = np.asarray(data["labels"])
    split = max(1, int(0.75 * len(samples)))
    return TaskData(modality=kind,
                    X_train=samples[:split], y_train=labels[:split],
                    X_val=samples[split:], y_val=labels[split:],
                    task_kind=task_kind)


def cmd_finetune(args) -> int:
    manifest = _resolve_manifest(args)
    kind = ModalityKind(manifest.modalities[0])
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint).state
        config = state.config
    else:
        config = desk_config(**manifest.model)
        state = init_model(config, seed=manifest.seed)
    task = _synth_task(kind, manifest, config, args.task)
    if args.task == "classification":
        out_dim = int(np.asarray(task.y_train).max()) + 1
        loss_kind = "ce"
    else:
        out_dim, loss_kind = 1, "mse"
        task.y_train = task.y_train.astype(np.float64)
        task.y_val = task.y_val.astype(np.float64)
    lr = manifest.optimizer.get("lr_base", 2e-4) if manifest.optimizer else 2e-4
    config_ft = FinetuneConfig(head_out_dim=out_dim, lr=lr, epochs=manifest.epochs,
                               loss_kind=loss_kind, batch_size=manifest.batch_size,
                               seed=manifest.seed)
    result = finetune(state, task, config_ft)

    os.makedirs(manifest.out_dir, exist_ok=True)
    log_path = os.path.join(manifest.out_dir, "finetune.log")
    if os.path.exists(log_path):
        os.unlink(log_path)
    logger = make_step_logger(log_path)
    for row in result.trace:
        logger(row)
    save_checkpoint(os.path.join(manifest.out_dir, "finetuned.ckpt"), result.state,
                    step=manifest.epochs, rng_state={"seed": manifest.seed})
    metrics = evaluate(result.state, task, config_ft, seed=manifest.seed)
    shown = " ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items()))
    print(f"finetune modality={kind.value} epochs={manifest.epochs} "
          f"out={manifest.out_dir} {shown}")
    return 0


def cmd_eval(args) -> int:
    manifest = _resolve_manifest(args)
    bundle = load_checkpoint(args.checkpoint)
    if not bundle.state.head:
        raise ContractError("checkpoint has no task head; run finetune first")
    kind = ModalityKind(manifest.modalities[0])
    task = _synth_task(kind, manifest, bundle.state.config, args.task)
    if args.task == "classification":
        out_dim = int(np.asarray(task.y_train).max()) + 1
        loss_kind = "ce"
    else:
        out_dim, loss_kind = 1, "mse"
        task.y_val = task.y_val.astype(np.float64)
    config_ft = FinetuneConfig(head_out_dim=out_dim, loss_kind=loss_kind,
                               epochs=0, batch_size=manifest.batch_size,
                               seed=manifest.seed)
    metrics = evaluate(bundle.state, task, config_ft, seed=manifest.seed)
    shown = " ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items()))
    print(f"eval modality={kind.value} checkpoint={args.checkpoint} {shown}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({k: float(v) for k, v in metrics.items()}, fh, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_affinity(args) -> int:
    manifest = _resolve_manifest(args)
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint).state
    else:
        state = init_model(desk_config(**manifest.model), seed=manifest.seed)
    config = state.config
    names = manifest.modalities
    bad = [m for m in names if m not in _PRETRAIN_NAMES]
    if bad:
        raise ConfigError(f"affinity is defined over pre-training modalities, "
                          f"got {bad}")

    tokens = None
    segments = [None]  # the shared reconstruction slot stays unlabeled
    for i, name in enumerate(sorted(names)):
        kind = ModalityKind(name)
        options = _synth_options(manifest, name, config.vocab_size)
        data = gen_synthetic(kind, options, seed=manifest.seed + 11 * i)
        if kind is ModalityKind.GRAPH:
            feats = data["features"]
            ids = sample_graph_neighbors(data["adjacency"], 0, seed=manifest.seed)
            sample = (feats[0], feats[ids])
        else:
            sample = data["samples"][0]
        tset = _encode_one(kind, sample, seed=manifest.seed, vocab_size=config.vocab_size)
        toks = tokenize_set(tset, state.tokenizer)
        if tokens is None:
            tokens = [toks[0]]
        tokens.extend(toks[1:])
        segments.extend([kind] * (len(toks) - 1))

    _, trace = forward(tokens, None, state, collect_attention=True)
    matrix, order = attention_affinity([lay for lay in trace.layers], segments)
    labels = [m.value for m in order]
    peak = np.unravel_index(int(np.argmax(matrix)), matrix.shape)
    print(f"affinity modalities={','.join(labels)} layers={len(trace.layers)} "
          f"peak={labels[peak[0]]}->{labels[peak[1]]}:{matrix[peak]:.6f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"modalities": labels, "matrix": matrix.tolist()}, fh,
                      sort_keys=True)
            fh.write("\n")
    return 0


def cmd_inspect(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    cfg = bundle.state.config
    groups = count_parameters(bundle.state, breakdown=True)
    total = sum(groups.values())
    parts = " ".join(f"{k}={v}" for k, v in sorted(groups.items()))
    print(f"checkpoint step={bundle.step} n_blocks={cfg.n_blocks} "
          f"n_heads={cfg.n_heads} hidden_dim={cfg.hidden_dim} "
          f"topology={cfg.global_topology} params={total} {parts}")
    return 0


def _add_common(sub, *flags):
    if "manifest" in flags:
        sub.add_argument("--manifest", help="run manifest JSON path")
    if "seed" in flags:
        sub.add_argument("--seed", type=int, default=None)
    if "modalities" in flags:
        sub.add_argument("--modalities", nargs="+", default=None,
                         metavar="MODALITY")
    if "steps" in flags:
        sub.add_argument("--steps", type=int, default=None)
    if "epochs" in flags:
        sub.add_argument("--epochs", type=int, default=None)
    if "out" in flags:
        sub.add_argument("--out", default=None)
    if "config" in flags:
        sub.add_argument("--config", default=None,
                         help="JSON file of model/generator overrides")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pangaea",
        description="Unified triplet encoding, pre-training, and scaling analysis.")
    subs = parser.add_subparsers(dest="command", required=True)

    enc = subs.add_parser("encode", help="convert raw samples to triplet sets")
    enc.add_argument("--modality", required=True,
                     choices=[m.value for m in ModalityKind])
    enc.add_argument("--input", required=True)
    _add_common(enc, "seed", "out")
    enc.set_defaults(func=cmd_encode)

    pre = subs.add_parser("pretrain", help="masked-reconstruction pre-training")
    _add_common(pre, "manifest", "seed", "modalities", "steps", "out", "config")
    pre.set_defaults(func=cmd_pretrain)

    fin = subs.add_parser("finetune", help="supervised fine-tuning with a task head")
    fin.add_argument("--checkpoint", default=None)
    fin.add_argument("--task", choices=("classification", "regression"),
                     default="classification")
    _add_common(fin, "manifest", "seed", "modalities", "epochs", "out", "config")
    fin.set_defaults(func=cmd_finetune)

    ev = subs.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--task", choices=("classification", "regression"),
                    default="classification")
    _add_common(ev, "manifest", "seed", "modalities", "out")
    ev.set_defaults(func=cmd_eval)

    fit = subs.add_parser("fit-scaling", help="fit the modality-count curve")
    fit.add_argument("--input", required=True, help="two-column plot data")
    _add_common(fit, "out")
    fit.set_defaults(func=cmd_fit_scaling)

    aff = subs.add_parser("affinity", help="cross-modality attention affinity")
    aff.add_argument("--checkpoint", default=None)
    _add_common(aff, "manifest", "seed", "modalities", "out", "config")
    aff.set_defaults(func=cmd_affinity)

    gen = subs.add_parser("gen-synth", help="write a seeded synthetic dataset")
    gen.add_argument("--modality", required=True,
                     choices=[m.value for m in ModalityKind])
    _add_common(gen, "seed", "out", "config")
    gen.set_defaults(func=cmd_gen_synth)

    ins = subs.add_parser("inspect-checkpoint", help="print checkpoint summary")
    ins.add_argument("--checkpoint", required=True)
    ins.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PangaeaError as exc:
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
