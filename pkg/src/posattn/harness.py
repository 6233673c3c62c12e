"""Training, evaluation sweeps and run persistence."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .model import ModelConfig, ModelParams, forward, init_params, load_checkpoint, save_checkpoint
from .tasks import TaskBatch, sample_test_ood, sample_train

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "posattn.manifest/1"
METRIC_FIELDS = ("epoch", "train_mse", "val_mse")
OOD_FIELDS = ("scale", "mse", "n_samples", "seed")


@dataclass
class TrainConfig:
    task: str = "cumulative_min"
    attention: str = "positional"
    n: int = 8
    samples: int = 30_000
    val_samples: int = 1_000
    epochs: int = 2_000
    batch_size: int = 256
    lr: float = 1e-4
    lr_min: float = 1e-6
    variable_length: bool = False
    seed: int = 0
    num_layers: int | None = None
    heads: int = 2
    d_x: int = 64
    d_v: int = 32
    d_o: int = 64
    mlp_hidden: int = 64

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            max_len=self.n,
            attention_kind=self.attention,
            num_layers=self.num_layers,
            heads=self.heads,
            d_x=self.d_x,
            d_v=self.d_v,
            d_o=self.d_o,
            mlp_hidden=self.mlp_hidden,
        )

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class RunManifest:
    config: TrainConfig
    model: dict
    metrics: list[dict] = field(default_factory=list)
    ood: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    checkpoint: str | None = None
    status: str = "running"
    wall_clock: float = 0.0
    version: str = __version__

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["schema"] = MANIFEST_SCHEMA
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "RunManifest":
        doc = dict(doc)
        if doc.pop("schema", None) != MANIFEST_SCHEMA:
            raise ValueError("unsupported manifest schema")
        doc["config"] = TrainConfig.from_dict(doc["config"])
        return cls(**doc)


# --------------------------------------------------------------------------
# schedules, seeds, evaluation


def cosine_lr(epoch: int, epochs: int, lr: float, lr_min: float) -> float:
    """Learning rate for 0-based ``epoch``: cosine from ``lr`` down to ``lr_min``."""
    if epochs <= 1:
        return lr
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * epoch / (epochs - 1)))


def derive_seeds(seed: int, k: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(k)]


def evaluate(params: ModelParams, batches: list[TaskBatch], chunk: int = 1024) -> float:
    """Mean squared error over every output entry of every batch."""
    sq = 0.0
    count = 0
    for b in batches:
        for lo in range(0, len(b), chunk):
            x = b.inputs[lo : lo + chunk]
            pred = forward(params, x).data
            sq += float(((pred - b.targets[lo : lo + chunk]) ** 2).sum())
            count += pred.size
    return sq / count


def _minibatches(batches: list[TaskBatch], size: int, rng: np.random.Generator):
    chunks = []
    for g, b in enumerate(batches):
        order = rng.permutation(len(b))
        chunks.extend((g, order[i : i + size]) for i in range(0, len(b), size))
    for k in rng.permutation(len(chunks)):
        g, idx = chunks[k]
        yield batches[g].inputs[idx], batches[g].targets[idx]


# --------------------------------------------------------------------------
# training


def train(
    cfg: TrainConfig,
    out_dir=None,
    stop_after: int | None = None,
    progress_every: int | None = None,
) -> tuple[RunManifest, ModelParams]:
    """Train one model; returns the manifest and the best-validation parameters.

    ``stop_after`` ends the run after that many epochs while keeping the
    schedule of the full ``cfg.epochs`` budget (used to replay a prefix).
    With ``out_dir`` and ``progress_every`` set, the run directory is
    rewritten every that many epochs with status "running".
    """
    start = time.perf_counter()
    model_cfg = cfg.model_config()
    data_seed, val_seed, init_seed, shuffle_seed = derive_seeds(cfg.seed, 4)
    length = None if cfg.variable_length else cfg.n
    train_set = sample_train(cfg.task, cfg.n, cfg.samples, data_seed, length=length)
    val_set = sample_train(cfg.task, cfg.n, cfg.val_samples, val_seed, length=length)
    params = init_params(model_cfg, init_seed)
    plist = params.parameters()
    state = ad.AdamState.for_params(plist)
    rng = np.random.default_rng(shuffle_seed)
    manifest = RunManifest(config=cfg, model=model_cfg.to_dict())

    best_val = evaluate(params, val_set)
    best_state = params.state()
    manifest.metrics.append({"epoch": 0, "train_mse": evaluate(params, train_set), "val_mse": best_val})
    last = cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)
    try:
        for epoch in range(last):
            lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min)
            sq = 0.0
            seen = 0
            for x, y in _minibatches(train_set, cfg.batch_size, rng):
                with ad.Tape() as tape:
                    loss = ad.masked_mse(forward(params, x), y)
                ad.backward(loss, tape, leaves=plist)
                ad.adam_step(plist, [p.grad for p in plist], state, lr)
                sq += loss.item() * y.size
                seen += y.size
            val = evaluate(params, val_set)
            manifest.metrics.append({"epoch": epoch + 1, "train_mse": sq / seen, "val_mse": val})
            if val < best_val:
                best_val, best_state = val, params.state()
                manifest.best_epoch = epoch + 1
            if progress_every and out_dir is not None and (epoch + 1) % progress_every == 0:
                snapshot = params.copy()
                snapshot.load_state(best_state)
                manifest.wall_clock = time.perf_counter() - start
                write_run(manifest, snapshot, out_dir)
            if (epoch + 1) % 50 == 0:
                log.info("%s/%s seed %d epoch %d train %.3e val %.3e", cfg.attention, cfg.task, cfg.seed,
                         epoch + 1, sq / seen, val)
        manifest.status = "completed"
    except (ad.NumericOverflowError, FloatingPointError) as exc:
        manifest.status = f"failed: {exc}"
        log.warning("run diverged: %s", exc)
    params.load_state(best_state)
    manifest.wall_clock = time.perf_counter() - start
    if out_dir is not None:
        write_run(manifest, params, out_dir)
    return manifest, params


def ood_sweep(
    params: ModelParams,
    task: str,
    scales=range(1, 11),
    samples: int = 1_000,
    seed: int = 0,
    variable_length: bool = False,
) -> list[dict]:
    """MSE on fresh test batches per scale; scale 1 draws from the training sampler."""
    n = params.config.max_len
    length = None if variable_length else n
    rows = []
    for c in scales:
        s = derive_seeds(seed * 1000 + int(c), 1)[0]
        if c == 1:
            batches = sample_train(task, n, samples, s, length=length)
        else:
            batches = sample_test_ood(task, n, samples, float(c), s, length=length)
        rows.append({"scale": c, "mse": evaluate(params, batches), "n_samples": samples, "seed": seed})
    return rows


def _sweep_point(job: dict) -> dict:
    cfg = TrainConfig.from_dict(job["config"])
    manifest, params = train(cfg)
    ood = ood_sweep(params, cfg.task, scales=[job["c"]], samples=job["test_samples"], seed=cfg.seed)[0]
    final = manifest.metrics[-1]
    return {
        "attention": cfg.attention,
        "task": cfg.task,
        "n": cfg.n,
        "num_layers": manifest.model["num_layers"],
        "samples": cfg.samples,
        "seed": cfg.seed,
        "train_mse": final["train_mse"],
        "val_mse": min(m["val_mse"] for m in manifest.metrics),
        "ood_mse": ood["mse"],
        "scale": job["c"],
    }


def _run_jobs(jobs: list[dict], workers: int) -> list[dict]:
    if workers <= 1:
        return [_sweep_point(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_sweep_point, jobs))


def sample_size_sweep(
    task: str,
    sizes=(5_000, 10_000, 20_000, 30_000, 40_000, 50_000),
    c: float = 3,
    seeds=(0, 1, 2),
    attentions=("positional", "self"),
    base: TrainConfig | None = None,
    test_samples: int = 1_000,
    workers: int = 1,
) -> list[dict]:
    base = base or TrainConfig(task=task, epochs=500)
    jobs = [
        {"config": {**asdict(base), "task": task, "attention": a, "samples": size, "seed": s},
         "c": c, "test_samples": test_samples}
        for a in attentions for size in sizes for s in seeds
    ]
    return _run_jobs(jobs, workers)


def length_sweep(
    task: str,
    ns=(2, 4, 8, 16, 32),
    c: float = 3,
    seeds=(0, 1, 2),
    attentions=("positional", "self"),
    base: TrainConfig | None = None,
    test_samples: int = 1_000,
    workers: int = 1,
) -> list[dict]:
    """Fixed-length runs per n; depth follows ceil(log2 n) + 1 via the config default."""
    base = base or TrainConfig(task=task, epochs=500)
    jobs = [
        {"config": {**asdict(base), "task": task, "attention": a, "n": n, "num_layers": None, "seed": s},
         "c": c, "test_samples": test_samples}
        for a in attentions for n in ns for s in seeds
    ]
    return _run_jobs(jobs, workers)


# --------------------------------------------------------------------------
# persistence


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def to_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items() if k in columns})
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    def parse(v: str):
        for cast in (int, float):
            try:
                return cast(v)
            except ValueError:
                pass
        return v

    with open(path, newline="") as fh:
        return [{k: parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_run(manifest: RunManifest, params: ModelParams, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.json"
    save_checkpoint(params, ckpt)
    manifest.checkpoint = ckpt.name
    _atomic_write(out / "metrics.csv", to_csv(manifest.metrics, METRIC_FIELDS))
    if manifest.ood:
        _atomic_write(out / "ood.csv", to_csv(manifest.ood, OOD_FIELDS))
    _atomic_write(out / "manifest.json", json.dumps(manifest.to_dict(), indent=1))
    return out


def load_run(run_dir) -> tuple[RunManifest, ModelParams]:
    run_dir = Path(run_dir)
    manifest = RunManifest.from_dict(json.loads((run_dir / "manifest.json").read_text()))
    return manifest, load_checkpoint(run_dir / (manifest.checkpoint or "checkpoint.json"))


# --------------------------------------------------------------------------
# headline comparison


def run_with_ood(cfg: TrainConfig, out_dir, scales=range(1, 11), test_samples: int = 1_000,
                 progress_every: int | None = None) -> RunManifest:
    """Train, sweep the OOD scales on the best checkpoint and persist both."""
    manifest, params = train(cfg, out_dir=out_dir, progress_every=progress_every)
    manifest.ood = ood_sweep(params, cfg.task, scales, test_samples, cfg.seed, cfg.variable_length)
    write_run(manifest, params, out_dir)
    return manifest


def gap_summary(manifests: list[RunManifest], scale: float = 3) -> dict:
    """Median OOD MSE at ``scale`` per attention kind and the standard/positional ratio."""
    per_kind: dict[str, dict[str, list[float]]] = {}
    for m in manifests:
        if m.status != "completed":
            continue
        row = next((r for r in m.ood if float(r["scale"]) == float(scale)), None)
        if row is None:
            continue
        entry = per_kind.setdefault(m.config.attention, {"ood": [], "val": [], "seeds": []})
        entry["ood"].append(row["mse"])
        entry["val"].append(min(r["val_mse"] for r in m.metrics))
        entry["seeds"].append(m.config.seed)
    summary: dict = {"scale": scale}
    for kind, entry in per_kind.items():
        summary[kind] = {
            "seeds": entry["seeds"],
            "ood_median": float(np.median(entry["ood"])),
            "val_median": float(np.median(entry["val"])),
        }
    if "positional" in summary and "self" in summary:
        summary["ratio"] = summary["self"]["ood_median"] / summary["positional"]["ood_median"]
    return summary
