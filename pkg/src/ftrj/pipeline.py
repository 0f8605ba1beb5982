"""Run orchestration: data, classifier, metric, flow and evaluation phases in a run directory.

Layout of a run directory::

    config.echo        effective configuration
    manifest.json      command, seeds, input hashes, timings, outputs, status
    checkpoints/       classifier, embedding, geodesic, flow (binary tensors)
    metrics.json       held-out W1 per timepoint, mean, lineage consistency
    trajectories.csv   simulated trajectories with class probabilities
    marginals.csv      generated vs observed held-out points
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_module, save_module
from .classifier import Classifier, train_classifier
from .config import ConfigError, ExperimentConfig, load_config
from .data import DataError, SyntheticConfig, TimeSeriesDataset, component_seeds, gen_synthetic, load_dataset, save_dataset
from .finsler import ConformalMetric, FinslerMetric
from .flow import VectorField, lineage_consistency, simulate, simulate_and_classify, train_flow
from .geodesic import EmbeddingModel, GeodesicModel, train_metric
from .lineage import LineageError, LineageTree, load_lineage, save_lineage
from .transport import TransportError, ot_coupling, wasserstein1

logger = logging.getLogger(__name__)

METRICS_SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_EVALUATION = 5


# config sections the classifier depends on; runs agreeing on these can share one
_CLASSIFIER_KEYS = {"seed", "data", "synthetic", "lineage", "net", "classifier"}


class PhaseError(RuntimeError):
    """A pipeline phase failed; ``code`` is the process exit status to use."""

    def __init__(self, phase: str, code: int, message: str):
        super().__init__(f"{phase}: {message}")
        self.phase = phase
        self.code = code


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_inputs(cfg: ExperimentConfig, data_seed: int) -> tuple[TimeSeriesDataset, LineageTree]:
    """Dataset and lineage named by the config, with held-out roles applied."""
    try:
        if cfg["data.source"] == "synthetic":
            scfg = SyntheticConfig(dim=cfg["synthetic.dim"], cluster_std=cfg["synthetic.std"],
                                   n_endpoint=cfg["synthetic.n_endpoint"],
                                   n_intermediate=cfg["synthetic.n_intermediate"], offset=cfg["synthetic.offset"])
            ds, tree = gen_synthetic(scfg, seed=data_seed)
        else:
            if not cfg["data.path"]:
                raise DataError("data.source = csv needs data.path")
            ds = load_dataset(cfg["data.path"])
            tree = None
        if cfg["lineage.path"]:
            tree = load_lineage(cfg["lineage.path"], cfg["lineage.transitive_closure"])
        if tree is None:
            raise DataError("no lineage given; set lineage.path")
        if cfg["data.source"] == "csv" and tree.class_names != ds.class_names:
            ds = load_dataset(cfg["data.path"], class_names=tree.class_names)
        if cfg["data.heldout"]:
            ds = ds.with_heldout(cfg["data.heldout"])
        if not ds.heldout_times:
            raise DataError("no held-out timepoints to evaluate")
        ds.endpoints()
    except (DataError, LineageError, OSError) as exc:
        raise PhaseError("data", EXIT_DATA, str(exc)) from exc
    return ds, tree


@dataclass
class Run:
    """State of one run directory; phases fill in models and write checkpoints."""

    cfg: ExperimentConfig
    out: Path
    command: str = "pipeline"
    seeds: dict = field(default_factory=dict)
    data: TimeSeriesDataset | None = None
    tree: LineageTree | None = None
    classifier: Classifier | None = None
    embedding: EmbeddingModel | None = None
    geodesic: GeodesicModel | None = None
    vector_field: VectorField | None = None
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.out = Path(self.out)
        self.seeds = component_seeds(self.cfg["seed"])

    @property
    def ckpt(self) -> Path:
        return self.out / "checkpoints"

    # ----- bookkeeping -----

    def start(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        self.ckpt.mkdir(exist_ok=True)
        (self.out / "config.echo").write_text(self.cfg.dumps(), encoding="utf-8")
        inputs = {}
        for key in ("data.path", "lineage.path"):
            if self.cfg[key]:
                p = Path(self.cfg[key])
                inputs[key] = _sha256(p) if p.exists() else None
        self.manifest = {
            "command": self.command,
            "config": self.cfg.as_dict(),
            "seeds": self.seeds,
            "inputs": inputs,
            "timings": {},
            "outputs": {},
            "status": "running",
        }
        self.write_manifest()

    def write_manifest(self) -> None:
        (self.out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n",
                                                encoding="utf-8")

    def finish(self, status: str) -> None:
        if not self.manifest:
            return
        self.manifest["status"] = status
        self.write_manifest()

    def _output(self, name: str, path: Path) -> None:
        self.manifest.setdefault("outputs", {})[name] = str(path.relative_to(self.out))

    # ----- model construction -----

    def _hidden(self):
        return self.cfg.hidden()

    def load_data(self) -> None:
        if self.data is None:
            self.data, self.tree = load_inputs(self.cfg, self.seeds["data"])

    def metric(self) -> FinslerMetric:
        cfg = self.cfg
        if cfg["metric.base"] == "rbf":
            pts = self.data.points[np.isin(self.data.times, self.data.train_times)]
            base = ConformalMetric.fit_rbf(pts, cfg["metric.clusters"], cfg["metric.kappa"], cfg["metric.epsilon"],
                                           seed=self.seeds["metric"])
        else:
            base = ConformalMetric()
        for p in self.classifier.parameters():
            p.requires_grad_(False)
        return FinslerMetric.from_tree(self.classifier, self.tree, base, cfg["finsler.lambda"])

    def _new_classifier(self) -> Classifier:
        return Classifier(self.data.dim, self.tree.n_classes, self.cfg["classifier.smoothing"], self._hidden(),
                          self.cfg["net.activation"])

    def _load(self, module, name):
        path = self.ckpt / f"{name}.ftrj"
        try:
            load_module(module, path)
        except (OSError, CheckpointError) as exc:
            raise PhaseError("checkpoint", EXIT_TRAINING, f"cannot load {path}: {exc}") from exc
        module.eval()
        return module

    def load_checkpoints(self, upto: str) -> None:
        """Restore models saved by earlier phases, up to and including ``upto``."""
        self.load_data()
        order = ["classifier", "metric", "flow"]
        wanted = order[:order.index(upto) + 1]
        if "classifier" in wanted and self.classifier is None:
            self.classifier = self._load(self._new_classifier(), "classifier")
        if "metric" in wanted and self.embedding is None:
            self.embedding = self._load(EmbeddingModel(self.data.dim, self.cfg["embed.latent_dim"], self._hidden(),
                                                       self.cfg["net.activation"]), "embedding")
            self.geodesic = self._load(GeodesicModel(self.data.dim, self._hidden(), self.cfg["net.activation"]),
                                       "geodesic")
        if "flow" in wanted and self.vector_field is None:
            self.vector_field = self._load(VectorField(self.data.dim, self._hidden(), self.cfg["net.activation"]), "flow")

    # ----- phases -----

    def _timed(self, phase: str, fn):
        t = time.perf_counter()
        try:
            result = fn()
        except PhaseError:
            raise
        except (FloatingPointError, RuntimeError, ValueError, TransportError) as exc:
            code = EXIT_EVALUATION if phase == "evaluate" else EXIT_TRAINING
            raise PhaseError(phase, code, str(exc)) from exc
        self.manifest.setdefault("timings", {})[phase] = round(time.perf_counter() - t, 3)
        self.write_manifest()
        return result

    def train_classifier(self, cache: dict | None = None) -> None:
        self.load_data()
        cfg = self.cfg
        key = tuple((k, json.dumps(v)) for k, v in cfg.items() if k.split(".")[0] in _CLASSIFIER_KEYS)
        if cache is not None and key in cache:
            self.classifier = cache[key]
        else:
            def fit():
                f, report = train_classifier(
                    self.data, self.tree, smoothing=cfg["classifier.smoothing"], batch_size=cfg["classifier.batch"],
                    max_epochs=cfg["classifier.max_epochs"], patience=cfg["classifier.patience"],
                    lr=cfg["classifier.lr"], train_on=cfg["classifier.train_on"], hidden=self._hidden(),
                    activation=cfg["net.activation"], seed=self.seeds["classifier"])
                self.manifest["classifier"] = {"val_accuracy": report.val_accuracy, "epochs": report.epochs}
                return f

            self.classifier = self._timed("classifier", fit)
            if cache is not None:
                cache[key] = self.classifier
        save_module(self.classifier, self.ckpt / "classifier.ftrj")
        self._output("classifier", self.ckpt / "classifier.ftrj")

    def train_metric(self) -> None:
        """Fit embedding and geodesic, keeping the restart with the lowest final geodesic energy.

        The energy is non-convex in the interpolant once the lineage penalty is
        on, so several initializations are tried; selection uses the training
        objective only. Without a penalty a single start is used. With several
        starts, start ``k`` bends the initial curves by ``+-`` a fraction of the
        chord length along the ``k // 2``-th column of a random orthonormal basis.
        """
        self.load_checkpoints("classifier")
        cfg = self.cfg
        metric = self.metric()
        n_starts = cfg["geodesic.restarts"] if metric.active else 1

        bends = [None]
        if n_starts > 1:
            t0, t1 = self.data.endpoints()
            chord = float(np.linalg.norm(self.data.at(t1).mean(0) - self.data.at(t0).mean(0)))
            rng = np.random.default_rng(self.seeds["metric"])
            q, _ = np.linalg.qr(rng.standard_normal((self.data.dim, self.data.dim)))
            size = cfg["geodesic.restart_bend"] * chord
            bends = [(-1) ** k * size * q[:, (k // 2) % self.data.dim] for k in range(n_starts)]

        def fit(seed, bend):
            return train_metric(self.data, metric, latent_dim=cfg["embed.latent_dim"], iters=cfg["train.iters"],
                                batch_size=cfg["train.batch"], lr=cfg["train.lr"],
                                stop_gradient_jacobian=cfg["geodesic.stop_gradient_jacobian"], hidden=self._hidden(),
                                activation=cfg["net.activation"], seed=seed, init_bend=bend)

        def fit_all():
            best, summaries = None, []
            for k in range(n_starts):
                seed = self.seeds["metric"] if k == 0 else int(
                    np.random.SeedSequence([self.seeds["metric"], k]).generate_state(1)[0])
                res = fit(seed, bends[k])
                tail = res.history[-20:]
                summary = {key: float(np.mean([h[key] for h in tail])) for key in ("emb", "geo")}
                summaries.append(summary)
                logger.info("metric start %d: final geodesic energy %.4f", k, summary["geo"])
                if best is None or summary["geo"] < summaries[best[0]]["geo"]:
                    best = (k, res)
            return best, summaries

        (chosen, res), summaries = self._timed("metric", fit_all)
        self.manifest["metric"] = {"starts": summaries, "chosen": chosen}
        self.embedding, self.geodesic = res.embedding, res.geodesic
        save_module(self.embedding, self.ckpt / "embedding.ftrj")
        save_module(self.geodesic, self.ckpt / "geodesic.ftrj")
        self._output("embedding", self.ckpt / "embedding.ftrj")
        self._output("geodesic", self.ckpt / "geodesic.ftrj")

    def train_flow(self) -> None:
        self.load_checkpoints("metric")
        cfg = self.cfg
        e = self.embedding

        def fit():
            # one assignment over the full endpoint populations under the learned distance
            t0, t1 = self.data.endpoints()
            with torch.no_grad():
                pi = ot_coupling(e.pairwise(torch.as_tensor(self.data.at(t0)), torch.as_tensor(self.data.at(t1))))
            return train_flow(self.geodesic, pi, self.data,
                              iters=cfg["flow.iters"], batch_size=cfg["flow.batch"], lr=cfg["flow.lr"],
                              hidden=self._hidden(), activation=cfg["net.activation"], seed=self.seeds["flow"])

        self.vector_field = self._timed("flow", fit).field
        save_module(self.vector_field, self.ckpt / "flow.ftrj")
        self._output("flow", self.ckpt / "flow.ftrj")

    def evaluate(self, heldout=None, validation: bool = False) -> dict:
        """Held-out W1 and lineage consistency; writes metrics.json and the CSV bundles.

        With ``validation`` only the first held-out timepoint is scored, against
        a fixed half of its points, and nothing but metrics is written.
        """
        self.load_checkpoints("flow")
        return self._timed("evaluate", lambda: self._evaluate(heldout, validation))

    def _evaluate(self, heldout, validation):
        cfg, ds = self.cfg, self.data
        rng = np.random.default_rng(self.seeds["eval"])
        times = [float(t) for t in heldout] if heldout else ds.heldout_times
        if validation:
            times = times[:1]
        unknown = set(times) - set(ds.timepoints)
        if unknown:
            raise PhaseError("evaluate", EXIT_EVALUATION, f"unknown held-out timepoints {sorted(unknown)}")
        t0, _ = ds.endpoints()
        src = ds.at(t0)
        per_t, generated, observed = {}, {}, {}
        for t in times:
            truth = ds.at(t)
            if validation:
                truth = truth[np.random.default_rng(0).permutation(len(truth))[:max(1, len(truth) // 2)]]
            if len(truth) > len(src):
                raise PhaseError("evaluate", EXIT_EVALUATION, f"more held-out points at t={t} than sources")
            x0 = src[rng.choice(len(src), len(truth), replace=False)]
            sim = simulate(self.vector_field, x0, [ds.normalized_time(t)], cfg["flow.steps"])[ds.normalized_time(t)]
            generated[t], observed[t] = sim.numpy(), truth
            per_t[t] = wasserstein1(generated[t], truth)

        n_traj = min(cfg["eval.n_trajectories"], len(src))
        x0 = src[rng.choice(len(src), n_traj, replace=False)]
        table = simulate_and_classify(self.vector_field, self.classifier, x0, np.linspace(0.0, 1.0, cfg["eval.grid"]),
                                      cfg["flow.steps"])
        metrics = {
            "schema_version": METRICS_SCHEMA_VERSION,
            "w1_per_t": {repr(t): w for t, w in per_t.items()},
            "w1_mean": float(np.mean(list(per_t.values()))),
            "lineage_consistency": lineage_consistency(table, adjacency=self.tree.adjacency),
            "n_trajectories": n_traj,
            "lambda": cfg["finsler.lambda"],
            "seed": cfg["seed"],
        }
        allowed = cfg["eval.allowed_classes"]
        if allowed:
            idx = {self.tree.class_names.index(str(c)) for c in allowed}
            metrics["allowed_consistency"] = lineage_consistency(table, allowed=idx)
        if validation:
            return metrics
        (self.out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        table.write_csv(self.out / "trajectories.csv")
        write_marginals(self.out / "marginals.csv", generated, observed)
        for name in ("metrics.json", "trajectories.csv", "marginals.csv"):
            self._output(name.split(".")[0], self.out / name)
        return metrics


def write_marginals(path, generated: dict, observed: dict) -> None:
    dim = next(iter(observed.values())).shape[1]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "source"] + [f"x_{i + 1}" for i in range(dim)])
        for t in sorted(observed):
            for tag, pts in (("generated", generated[t]), ("observed", observed[t])):
                for row in pts:
                    w.writerow([repr(t), tag] + [repr(float(v)) for v in row])


def run_pipeline(cfg: ExperimentConfig, out, *, dry_run: bool = False, classifier_cache: dict | None = None,
                 validation: bool = False) -> dict:
    """All phases in order. Raises :class:`PhaseError` naming the failed phase.

    Partial checkpoints from finished phases stay on disk.
    """
    run = Run(cfg, out, "pipeline")
    run.start()
    try:
        run.load_data()
        if dry_run:
            run.finish("dry-run")
            return {}
        torch.manual_seed(cfg["seed"])
        run.train_classifier(classifier_cache)
        run.train_metric()
        run.train_flow()
        metrics = run.evaluate(validation=validation)
    except PhaseError as exc:
        run.manifest["error"] = str(exc)
        run.finish(f"failed:{exc.phase}")
        raise
    run.finish("ok")
    return metrics


def open_run(out, command: str) -> Run:
    """Reattach to an existing run directory using its echoed config."""
    out = Path(out)
    echo = out / "config.echo"
    if not echo.exists():
        raise PhaseError("config", EXIT_CONFIG, f"{out} is not a run directory (no config.echo)")
    try:
        cfg = load_config(echo)
    except ConfigError as exc:
        raise PhaseError("config", EXIT_CONFIG, str(exc)) from exc
    run = Run(cfg, out, command)
    manifest = out / "manifest.json"
    run.manifest = json.loads(manifest.read_text()) if manifest.exists() else {}
    return run


def export_plots(out, n_trajectories: int = 50) -> None:
    """Rewrite ``trajectories.csv`` and ``marginals.csv`` from saved checkpoints."""
    run = open_run(out, "export-plots")
    run.cfg = run.cfg.replace(eval__n_trajectories=n_trajectories)
    try:
        run.load_checkpoints("flow")
    except PhaseError as exc:
        raise PhaseError("export", EXIT_EVALUATION, f"missing checkpoints: {exc}") from exc
    metrics_path = Path(out) / "metrics.json"
    saved = metrics_path.read_bytes() if metrics_path.exists() else None
    run._evaluate(None, False)
    if saved is not None:
        metrics_path.write_bytes(saved)


def save_synthetic(cfg: ExperimentConfig, out) -> tuple[Path, Path]:
    """Write the configured synthetic dataset and its lineage to ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds, tree = load_inputs(cfg.replace(data__source="synthetic"), component_seeds(cfg["seed"])["data"])
    save_dataset(ds, out / "dataset.csv")
    save_lineage(tree, out / "lineage.json")
    return out / "dataset.csv", out / "lineage.json"
