"""Command-line pipeline: synthetic data, prototypes, alignment training,
feature extraction, boosted-tree regression, evaluation, and the experiment
grid.

Every command reads and writes only the paths given to it, echoes its
resolved configuration into the output directory, and is idempotent: the
same inputs produce byte-identical JSON/binary outputs. Plots are SVG with
deterministic ids. PROTOPOP_THREADS caps worker pools (default 1).
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import click
import numpy as np

from . import data as dm
from . import gbdt
from . import metrics as mx
from . import prototypes as pt
from . import training as tr
from .encoders import TableEncoderProvider
from .prototypes import SamplingPlan

SPLITS_FILE = "splits.json"
CONFIG_FILE = "config.json"


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class SplitConfig:
    train: float = 0.7
    val: float = 0.15
    test: float = 0.15
    seed: int = 0


@dataclass(frozen=True)
class OversampleConfig:
    threshold: float = 12.0
    factor: int = 1  # 1 disables duplication


@dataclass(frozen=True)
class RunConfig:
    synthetic: dm.SyntheticConfig = dm.SyntheticConfig()
    sampling: SamplingPlan = SamplingPlan()
    train: tr.TrainConfig = tr.TrainConfig()
    gbdt_a: gbdt.GBDTConfig = gbdt.CONFIG_A
    gbdt_b: gbdt.GBDTConfig = gbdt.CONFIG_B
    split: SplitConfig = SplitConfig()
    oversample: OversampleConfig = OversampleConfig()

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "synthetic": dm.SyntheticConfig,
    "sampling": SamplingPlan,
    "train": tr.TrainConfig,
    "gbdt_a": gbdt.GBDTConfig,
    "gbdt_b": gbdt.GBDTConfig,
    "split": SplitConfig,
    "oversample": OversampleConfig,
}


class ConfigError(ValueError):
    pass


def config_from_dict(doc: dict) -> RunConfig:
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {}
    base = RunConfig()
    for section, cls in _SECTIONS.items():
        body = doc.get(section, {})
        fields = {f.name for f in dataclasses.fields(cls)}
        bad = set(body) - fields
        if bad:
            raise ConfigError(f"unknown keys in '{section}': {sorted(bad)}")
        kwargs[section] = replace(getattr(base, section), **body)
    return RunConfig(**kwargs)


def load_config(path, seed=None) -> RunConfig:
    cfg = config_from_dict(json.loads(Path(path).read_text(encoding="utf-8"))) if path \
        else RunConfig()
    if seed is not None:
        cfg = RunConfig(
            synthetic=replace(cfg.synthetic, seed=seed),
            sampling=cfg.sampling,
            train=replace(cfg.train, seed=seed),
            gbdt_a=replace(cfg.gbdt_a, seed=seed),
            gbdt_b=replace(cfg.gbdt_b, seed=seed + 1),
            split=replace(cfg.split, seed=seed),
            oversample=cfg.oversample,
        )
    return cfg


def _echo_config(out_dir: Path, cfg: RunConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_FILE).write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# shared loading


def _load_dataset(data_dir: Path) -> dm.Dataset:
    records, classes = dm.load_manifest(data_dir / dm.MANIFEST_FILE)
    return dm.Dataset(records, classes)


def _load_splits(data_dir: Path, dataset: dm.Dataset, cfg: RunConfig) -> dict[str, list[str]]:
    path = data_dir / SPLITS_FILE
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    s = cfg.split
    return dm.split_ids(dataset, fractions=(s.train, s.val, s.test), seed=s.seed)


def _load_provider(data_dir: Path, class_tokens=None) -> TableEncoderProvider:
    tables = {}
    for source in (dm.SOURCE_TITLE, dm.SOURCE_ALLTAGS):
        d = data_dir / dm.EMBED_DIR / source
        if d.is_dir():
            tables[source] = dm.read_embeddings(d)
    if not tables:
        raise dm.DataError(f"no embedding tables under {data_dir / dm.EMBED_DIR}")
    return TableEncoderProvider(tables, class_tokens=class_tokens)


def _labels(dataset: dm.Dataset, ids) -> np.ndarray:
    return np.array([dataset.get(pid).popularity for pid in ids])


def _save_svg(fig, path: Path) -> None:
    import matplotlib
    matplotlib.rcParams["svg.hashsalt"] = "protopop"
    fig.savefig(path, format="svg", metadata={"Date": None})


# ---------------------------------------------------------------------------
# commands


@click.group()
def main():
    """Prototype-augmented prompt alignment + boosted-tree popularity pipeline."""


def _cli_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True),
                      default=None, help="Run-config JSON.")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Override every stage seed.")(fn)
    return fn


def _fail(exc: BaseException) -> None:
    click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
    sys.exit(1)


def _guarded(body):
    try:
        body()
    except (ConfigError, dm.DataError, gbdt.GBDTError, mx.UndefinedCorrelation,
            ValueError, OSError) as exc:
        _fail(exc)


@main.command("gen-synth")
@_cli_options
@click.option("--out", "out_dir", type=click.Path(), required=True)
def gen_synth(config_path, seed, out_dir):
    """Generate the synthetic dataset, embeddings, and split lists."""
    def body():
        cfg = load_config(config_path, seed)
        out = Path(out_dir)
        world = dm.build_world(cfg.synthetic)
        out.mkdir(parents=True, exist_ok=True)
        dm.save_manifest(out / dm.MANIFEST_FILE, world.dataset.records, world.dataset.classes)
        for source, table in sorted(world.tables.items()):
            dm.write_embeddings(out / dm.EMBED_DIR / source, table)
        s = cfg.split
        splits = dm.split_ids(world.dataset, fractions=(s.train, s.val, s.test), seed=s.seed)
        _write_json(out / SPLITS_FILE, splits)
        _echo_config(out, cfg)
        click.echo(f"wrote {len(world.dataset)} posts, {world.dataset.classes.k} classes -> {out}")
    _guarded(body)


@main.command("stats")
@_cli_options
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def stats(config_path, seed, data_dir, out_dir):
    """Token-count statistics of the descriptive text fields."""
    def body():
        cfg = load_config(config_path, seed)
        out = Path(out_dir)
        dataset = _load_dataset(Path(data_dir))
        title_counts = [len(r.title_tokens) for r in dataset.records]
        tag_counts = [len(r.tag_tokens) for r in dataset.records]

        def hist(counts):
            out_h = {}
            for c in counts:
                out_h[str(c)] = out_h.get(str(c), 0) + 1
            return out_h

        doc = {
            "total_posts": len(dataset),
            "title_token_counts": hist(title_counts),
            "tags_token_counts": hist(tag_counts),
            "empty_titles": sum(1 for c in title_counts if c == 0),
        }
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "stats.json", doc)
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        for name, counts in (("title", title_counts), ("alltags", tag_counts)):
            fig, ax = plt.subplots(figsize=(4, 3))
            ax.hist(counts, bins=range(0, max(counts) + 2), color="#4878b0", edgecolor="white")
            ax.set_xlabel("word count")
            ax.set_ylabel("posts")
            ax.set_title(name)
            fig.tight_layout()
            _save_svg(fig, out / f"{name}_hist.svg")
            plt.close(fig)
        _echo_config(out, cfg)
        click.echo(f"stats over {len(dataset)} posts -> {out}")
    _guarded(body)


@main.command("build-prototypes")
@_cli_options
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def build_prototypes_cmd(config_path, seed, data_dir, out_dir):
    """Diversity-sample training shots and build class prototypes."""
    def body():
        cfg = load_config(config_path, seed)
        data = Path(data_dir)
        dataset = _load_dataset(data)
        splits = _load_splits(data, dataset, cfg)
        train_ids = set(splits["train"])
        train_view = dm.Dataset([r for r in dataset.records if r.post_id in train_ids],
                                dataset.classes)
        provider = _load_provider(data)
        protos = pt.build_prototypes(train_view, provider, cfg.sampling,
                                     seed=cfg.synthetic.seed)
        out = Path(out_dir)
        pt.save_prototypes(out, protos, dataset)
        _echo_config(out, cfg)
        click.echo(f"built {protos.k} prototypes from {len(train_view)} training posts -> {out}")
    _guarded(body)


@main.command("train-align")
@_cli_options
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--protos", "protos_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--source", type=click.Choice([dm.SOURCE_TITLE, dm.SOURCE_ALLTAGS]),
              default=None, help="Text source override.")
def train_align(config_path, seed, data_dir, protos_dir, out_dir, source):
    """Train prompt/fusion parameters by classification alignment."""
    def body():
        cfg = load_config(config_path, seed)
        if source is not None:
            cfg_train = replace(cfg.train, source=source)
        else:
            cfg_train = cfg.train
        data = Path(data_dir)
        dataset = _load_dataset(data)
        splits = _load_splits(data, dataset, cfg)
        protos = pt.load_prototypes(Path(protos_dir), dataset)
        names = [e.name for e in dataset.classes.entries]
        class_tokens = {n: protos.textual[i] for i, n in enumerate(names)}
        provider = _load_provider(data, class_tokens=class_tokens)
        train_recs = [dataset.get(pid) for pid in splits["train"]]
        model, history = tr.train_alignment(train_recs, provider, protos, cfg_train,
                                            class_names=names)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tr.save_model(out / "model.ckpt", model)
        _write_json(out / "history.json", history)
        _echo_config(out, cfg)
        click.echo(f"trained on {len(train_recs)} posts; "
                   f"final epoch loss {history['epoch_means'][-1]:.4f} -> {out}")
    _guarded(body)


@main.command("extract")
@_cli_options
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def extract(config_path, seed, data_dir, model_path, out_dir):
    """Forward inference over every post; writes the feature table."""
    def body():
        cfg = load_config(config_path, seed)
        data = Path(data_dir)
        dataset = _load_dataset(data)
        splits = _load_splits(data, dataset, cfg)
        provider = _load_provider(data)
        model = tr.load_model(model_path)
        user_stats = dm.compute_user_stats(dataset, splits["train"])
        table = tr.extract_features(model, dataset.records, provider, user_stats)
        out = Path(out_dir)
        tr.save_features(out, table)
        _echo_config(out, cfg)
        click.echo(f"extracted {len(table.ids)}x{table.width} features -> {out}")
    _guarded(body)


def _fit_eval_src(features, dataset, train_ids, eval_ids, blocks, config, oversample):
    x = features.subset(train_ids, blocks)
    y = _labels(dataset, train_ids)
    if oversample.factor > 1:
        idx = gbdt.oversample_tail(y, threshold=oversample.threshold,
                                   factor=oversample.factor)
        x, y = x[idx], y[idx]
    forest = gbdt.fit_gbdt(x, y, config)
    preds = gbdt.predict(forest, features.subset(eval_ids, blocks))
    return forest, mx.spearman(_labels(dataset, eval_ids), preds)


@main.command("select")
@_cli_options
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--ratio", type=float, default=None, help="Keep ratio override.")
@click.option("--sweep", default=None,
              help="Comma-separated ratios; trains a regressor per ratio "
                   "and reports validation SRC (needs --features).")
@click.option("--features", "features_dir", type=click.Path(exists=True), default=None)
def select(config_path, seed, data_dir, model_path, out_dir, ratio, sweep, features_dir):
    """Rank training samples by alignment loss and keep the easiest."""
    def body():
        cfg = load_config(config_path, seed)
        data = Path(data_dir)
        dataset = _load_dataset(data)
        splits = _load_splits(data, dataset, cfg)
        provider = _load_provider(data)
        model = tr.load_model(model_path)
        train_recs = [dataset.get(pid) for pid in splits["train"]]
        losses = tr.per_sample_losses(model, train_recs, provider)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

        if sweep:
            if not features_dir:
                raise ConfigError("--sweep requires --features")
            table = tr.load_features(features_dir)
            rows = []
            for rho in [float(x) for x in sweep.split(",")]:
                kept = tr.select_samples(losses, rho)
                _, src = _fit_eval_src(table, dataset, kept, splits["val"],
                                       list(tr.FEATURE_BLOCKS), cfg.gbdt_a, cfg.oversample)
                rows.append({"ratio": rho, "kept": len(kept), "val_src": src})
            _write_json(out / "sweep.json", rows)
            lines = [f"{'ratio':>6} {'kept':>6} {'val SRC':>9}"]
            lines += [f"{r['ratio']:>6.2f} {r['kept']:>6} {r['val_src']:>9.4f}" for r in rows]
            (out / "sweep.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
            click.echo("\n".join(lines))
        else:
            rho = ratio if ratio is not None else cfg.train.selection_ratio
            kept = tr.select_samples(losses, rho)
            _write_json(out / "selected_ids.json", {"ratio": rho, "ids": kept})
            click.echo(f"kept {len(kept)}/{len(losses)} training posts at ratio {rho}")
        _echo_config(out, cfg)
    _guarded(body)


@main.command("train-gbdt")
@_cli_options
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--features", "features_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--selected", "selected_path", type=click.Path(exists=True), default=None,
              help="selected_ids.json restricting the training rows.")
def train_gbdt(config_path, seed, data_dir, features_dir, out_dir, selected_path):
    """Fit both boosted-tree configurations and tune the fusion weight."""
    def body():
        cfg = load_config(config_path, seed)
        data = Path(data_dir)
        dataset = _load_dataset(data)
        splits = _load_splits(data, dataset, cfg)
        table = tr.load_features(features_dir)
        train_ids = splits["train"]
        if selected_path:
            kept = set(json.loads(Path(selected_path).read_text(encoding="utf-8"))["ids"])
            train_ids = [pid for pid in train_ids if pid in kept]
        x = table.rows(train_ids)
        y = _labels(dataset, train_ids)
        if cfg.oversample.factor > 1:
            idx = gbdt.oversample_tail(y, threshold=cfg.oversample.threshold,
                                       factor=cfg.oversample.factor)
            x, y = x[idx], y[idx]
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        forests = {}
        for tag, gcfg in (("a", cfg.gbdt_a), ("b", cfg.gbdt_b)):
            forests[tag] = gbdt.fit_gbdt(x, y, replace(gcfg, tag=tag))
            gbdt.save_forest(out / f"forest_{tag}.bin", forests[tag])
        val_x = table.rows(splits["val"])
        val_y = _labels(dataset, splits["val"])
        weights = gbdt.fuse_predictions(gbdt.predict(forests["a"], val_x),
                                        gbdt.predict(forests["b"], val_x), val_y)
        _write_json(out / "fusion.json", {"weight_a": weights.weight_a})
        _echo_config(out, cfg)
        click.echo(f"trained forests on {len(y)} rows; fusion weight_a={weights.weight_a:.2f}")
    _guarded(body)


@main.command("predict")
@_cli_options
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--features", "features_dir", type=click.Path(exists=True), required=True)
@click.option("--forests", "forests_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--split", "split_name", type=click.Choice(["train", "val", "test", "all"]),
              default="test")
@click.option("--regressor", type=click.Choice(["fused", "a", "b"]), default="fused")
def predict_cmd(config_path, seed, data_dir, features_dir, forests_dir, out_dir,
                split_name, regressor):
    """Write predictions CSV for a split."""
    def body():
        cfg = load_config(config_path, seed)
        data = Path(data_dir)
        dataset = _load_dataset(data)
        splits = _load_splits(data, dataset, cfg)
        table = tr.load_features(features_dir)
        ids = table.ids if split_name == "all" else splits[split_name]
        x = table.rows(ids)
        fdir = Path(forests_dir)
        if regressor == "fused":
            fa = gbdt.load_forest(fdir / "forest_a.bin")
            fb = gbdt.load_forest(fdir / "forest_b.bin")
            w = json.loads((fdir / "fusion.json").read_text(encoding="utf-8"))["weight_a"]
            preds = gbdt.FusionWeights(w).blend(gbdt.predict(fa, x), gbdt.predict(fb, x))
        else:
            preds = gbdt.predict(gbdt.load_forest(fdir / f"forest_{regressor}.bin"), x)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["post_id,prediction"]
        lines += [f"{pid},{float(p)!r}" for pid, p in zip(ids, preds)]
        (out / "predictions.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        _echo_config(out, cfg)
        click.echo(f"wrote {len(ids)} predictions ({regressor}, {split_name}) -> {out}")
    _guarded(body)


@main.command("eval")
@_cli_options
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--predictions", "pred_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def eval_cmd(config_path, seed, data_dir, pred_path, out_dir):
    """Rank-correlation and error report, overall and per category."""
    def body():
        cfg = load_config(config_path, seed)
        dataset = _load_dataset(Path(data_dir))
        ids, preds = [], []
        for line in Path(pred_path).read_text(encoding="utf-8").splitlines()[1:]:
            pid, val = line.split(",")
            ids.append(pid)
            preds.append(float(val))
        preds = np.array(preds)
        actual = _labels(dataset, ids)
        names = [dataset.classes.name(dataset.get(pid).class_index) for pid in ids]
        report = mx.per_class_report(actual, preds, names)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
        (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(actual, preds, s=6, alpha=0.5, color="#4878b0")
        lim = [min(actual.min(), preds.min()), max(actual.max(), preds.max())]
        ax.plot(lim, lim, color="#c44e52", linewidth=1)
        ax.set_xlabel("actual popularity")
        ax.set_ylabel("predicted popularity")
        fig.tight_layout()
        _save_svg(fig, out / "scatter.svg")
        plt.close(fig)
        _echo_config(out, cfg)
        click.echo(f"SRC={report.src:.4f} MAE={report.mae:.4f} n={report.n} -> {out}")
    _guarded(body)


@main.command("grid")
@_cli_options
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--features", "features_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def grid(config_path, seed, data_dir, features_dir, out_dir):
    """Feature-set x regressor x fusion results table on the test split."""
    def body():
        cfg = load_config(config_path, seed)
        data = Path(data_dir)
        dataset = _load_dataset(data)
        splits = _load_splits(data, dataset, cfg)
        table = tr.load_features(features_dir)
        feature_rows = {
            "frozen": ["image", "text_global"],
            "frozen+user": ["image", "text_global", "user_stats"],
            "aligned": [b for b in tr.FEATURE_BLOCKS if b != "user_stats"],
            "aligned+user": list(tr.FEATURE_BLOCKS),
        }
        results = []
        for row_name, blocks in feature_rows.items():
            xtr = table.subset(splits["train"], blocks)
            ytr = _labels(dataset, splits["train"])
            if cfg.oversample.factor > 1:
                idx = gbdt.oversample_tail(ytr, threshold=cfg.oversample.threshold,
                                           factor=cfg.oversample.factor)
                xtr, ytr = xtr[idx], ytr[idx]
            xv, yv = table.subset(splits["val"], blocks), _labels(dataset, splits["val"])
            xt, yt = table.subset(splits["test"], blocks), _labels(dataset, splits["test"])
            fa = gbdt.fit_gbdt(xtr, ytr, cfg.gbdt_a)
            fb = gbdt.fit_gbdt(xtr, ytr, cfg.gbdt_b)
            weights = gbdt.fuse_predictions(gbdt.predict(fa, xv), gbdt.predict(fb, xv), yv)
            pa, pb = gbdt.predict(fa, xt), gbdt.predict(fb, xt)
            entry = {"features": row_name, "fusion_weight_a": weights.weight_a}
            for tag, preds in (("a", pa), ("b", pb), ("fused", weights.blend(pa, pb))):
                entry[f"src_{tag}"] = mx.spearman(yt, preds)
                entry[f"mae_{tag}"] = mx.mae(yt, preds)
            results.append(entry)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "grid.json", results)
        header = (f"{'features':<14} {'SRC(a)':>8} {'MAE(a)':>8} {'SRC(b)':>8} "
                  f"{'MAE(b)':>8} {'SRC(f)':>8} {'MAE(f)':>8}")
        lines = [header]
        for e in results:
            lines.append(f"{e['features']:<14} {e['src_a']:>8.4f} {e['mae_a']:>8.4f} "
                         f"{e['src_b']:>8.4f} {e['mae_b']:>8.4f} "
                         f"{e['src_fused']:>8.4f} {e['mae_fused']:>8.4f}")
        (out / "grid.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        _echo_config(out, cfg)
        click.echo("\n".join(lines))
    _guarded(body)


if __name__ == "__main__":
    main()
