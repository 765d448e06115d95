"""Two-phase training with intra-network modulation, evaluation and metric export."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import dap as dapmod
from . import modulator as modmod
from . import pdm as pdmmod
from .autodiff import DegenerateError, NumericError, Tensor
from .net import FUSION_KINDS, MultimodalNet, nearest_prototype, save_checkpoint

log = logging.getLogger(__name__)

MODES = ("joint_baseline", "aim", "aim_label", "aim_wo_pa", "aim_wo_da")
METRICS_FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class ExperimentConfig:
    mode: str = "aim"
    fusion: str = "concatenation"
    metric: str = "cv"
    E: int = 10
    E_T: int = 60
    batch_size: int = 64
    lr: float = 1e-3
    momentum: float = 0.9
    dap_lr: float = 1e-2
    pdm_lr: float = 1e-4
    ema_momentum: float = 0.9
    latent_dim: int = 64
    hidden: int = 32
    depth: int = 4
    lambda_task: float = 1.0
    seed: int = 0
    # dataset: a directory holding train.mmds/test.mmds, or the synthetic spec below
    data_path: str = ""
    M: int = 2
    K: int = 6
    dims: list = field(default_factory=lambda: [16, 16])
    snr: list = field(default_factory=lambda: [1.5, 0.6])
    n_train: int = 1200
    n_test: int = 300
    data_seed: int = 0
    out_dir: str = ""
    tag: str = ""
    # behaviour toggles
    detach_block_inputs: bool = True
    detach_prototypes: bool = True
    pdm_in_phase2: bool = True
    pdm_stop_theta: bool = True
    aux_to_decoupler: bool = True
    zero_block_weight: int = -1

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.fusion not in FUSION_KINDS:
            raise ConfigError(f"fusion must be one of {FUSION_KINDS}, got {self.fusion!r}")
        if self.metric not in modmod.METRIC_KINDS:
            raise ConfigError(f"metric must be one of {modmod.METRIC_KINDS}, got {self.metric!r}")
        if not 0 <= self.E < self.E_T:
            raise ConfigError(f"need 0 <= E < E_T, got E={self.E}, E_T={self.E_T}")
        if self.batch_size < 1 or self.latent_dim < 1 or self.hidden < 1 or self.depth < 1:
            raise ConfigError("batch_size, latent_dim, hidden and depth must be positive")
        if min(self.lr, self.dap_lr, self.pdm_lr) <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need positive learning rates and momentum in [0, 1)")
        if not 0 <= self.ema_momentum < 1:
            raise ConfigError("ema_momentum must lie in [0, 1)")
        if self.lambda_task < 0:
            raise ConfigError("lambda_task must be nonnegative")
        if not -1 <= self.zero_block_weight < self.M:
            raise ConfigError("zero_block_weight must be -1 or a modality index")

    def dataset_spec(self) -> datamod.DatasetSpec:
        return datamod.DatasetSpec(M=self.M, K=self.K, dims=list(self.dims),
                                   n_train=self.n_train, n_test=self.n_test,
                                   snr=list(self.snr), seed=self.data_seed)

    @property
    def label(self) -> str:
        return self.tag or self.mode

    # flat key=value text form
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        defaults = cls()
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            kwargs[key] = _parse_value(getattr(defaults, key), value, lineno)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_text(text)


def _parse_value(default, value: str, lineno: int):
    try:
        if isinstance(default, bool):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            kind = type(default[0]) if default else float
            return [kind(v) for v in value.split(",") if v.strip()]
        return value
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse {value!r}") from None


def load_datasets(cfg: ExperimentConfig) -> tuple:
    if cfg.data_path:
        root = Path(cfg.data_path)
        return datamod.load(root / "train.mmds"), datamod.load(root / "test.mmds")
    return datamod.generate(cfg.dataset_spec())


def _probs_true(logits: np.ndarray, labels) -> np.ndarray:
    return pdmmod.true_class_prob(logits, labels)


def _np_distance(a: np.ndarray, p: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - p[None, :, :]
    return np.clip(np.sqrt(np.einsum("nkd,nkd->nk", diff, diff)), 0.0, 50.0)


@dataclass
class BatchResult:
    total: Tensor
    s: np.ndarray
    s_aux: np.ndarray | None
    stats: dict
    modulated: bool


class Trainer:
    """Owns one training context: network, prototypes, decoupler, optimizers."""

    def __init__(self, cfg: ExperimentConfig, train: datamod.MultimodalSet,
                 test: datamod.MultimodalSet | None = None):
        cfg.validate()
        if train.M != cfg.M and not cfg.data_path:
            raise ConfigError("dataset modality count differs from config")
        self.cfg, self.train_set, self.test_set = cfg, train, test
        self.net = MultimodalNet(train.dims, train.K, hidden=cfg.hidden, depth=cfg.depth,
                                 fusion=cfg.fusion, seed=cfg.seed)
        self.bank = dapmod.PrototypeBank(train.dims, train.K, seed=cfg.seed)
        self.uses_pdm = cfg.mode in ("aim", "aim_label", "aim_wo_da")
        self.decoupler = (pdmmod.Decoupler(self.net, cfg.latent_dim, seed=cfg.seed)
                          if self.uses_pdm else None)
        self.label_heads = None
        if cfg.mode == "aim_label":
            rng = np.random.default_rng([cfg.seed, 13])
            self.label_heads = [[(Tensor(rng.standard_normal((b.out_dim, train.K)) / np.sqrt(b.out_dim),
                                         requires_grad=True, name=f"head{m}.{d}.w"),
                                  Tensor(np.zeros(train.K), requires_grad=True, name=f"head{m}.{d}.b"))
                                 for d, b in enumerate(enc.blocks)]
                                for m, enc in enumerate(self.net.encoders)]
        self.opt = ad.SGD(self.net.parameters() + self._head_params(), lr=cfg.lr, momentum=cfg.momentum)
        self.pdm_opt = (ad.SGD(self.decoupler.parameters(), lr=cfg.pdm_lr, momentum=cfg.momentum)
                        if self.decoupler is not None else None)
        self.dap_opt = ad.SGD(self.bank.roots, lr=cfg.dap_lr, momentum=cfg.momentum)
        self.rec = modmod.ModulationRecord(cfg.depth, train.M, cfg.metric, cfg.ema_momentum)
        self.rng = np.random.default_rng([cfg.seed, 3])
        self.step_log: list = []
        self.bank.propagate(self.net)

    @property
    def modulating_mode(self) -> bool:
        return self.cfg.mode != "joint_baseline"

    def _head_params(self) -> list:
        if self.label_heads is None:
            return []
        return [t for per_m in self.label_heads for pair in per_m for t in pair]

    def trainable(self) -> list:
        params = self.net.parameters() + self._head_params()
        if self.decoupler is not None:
            params += self.decoupler.parameters()
        return params

    def extra_named_tensors(self) -> list:
        named = [(r.name, r) for r in self.bank.roots]
        if self.decoupler is not None:
            named += self.decoupler.named_parameters()
        if self.label_heads is not None:
            named += [(t.name, t) for per_m in self.label_heads for pair in per_m for t in pair]
        return named

    # ------------------------------------------------------------ objective

    def _score(self, m: int, d: int, out: Tensor, protos) -> Tensor:
        """Logits of a depth-``d`` (0-based) block output: negated prototype
        distances, or the per-depth linear head in label mode."""
        if self.label_heads is not None:
            w, b = self.label_heads[m][d]
            return ad.affine(out, ad.detach(w), ad.detach(b))
        return ad.neg(pdmmod.clipped_distance(out, protos))

    def _score_np(self, m: int, d: int, out: np.ndarray, protos) -> np.ndarray:
        if self.label_heads is not None:
            w, b = self.label_heads[m][d]
            return out @ w.value + b.value
        p = protos.value if isinstance(protos, Tensor) else protos
        return -_np_distance(out, p)

    def batch_objective(self, xb: list, yb: np.ndarray, modulate: bool,
                        weights_fn=None) -> BatchResult:
        """Build the loss of one optimisation step.

        ``weights_fn(s_batch, s_aux_batch) -> (s_hat, alpha)`` supplies the
        detached modulation weights; by default it updates the record.
        """
        cfg, net, M, D = self.cfg, self.net, self.net.M, self.net.depth
        yb = np.asarray(yb)
        xs = [Tensor(x) for x in xb]
        logits, hs = net.forward(xs)
        l_task = ad.cross_entropy(logits, yb)
        stats = {"L_task": l_task.item()}

        images = self.bank.root_forward(net, frozen=True)
        self.bank.protos = [[h.value for h in per_m] for per_m in images]
        dap_total = dapmod.dap_task_loss(self.bank, net, images) + dapmod.dap_orth_loss(self.bank, images=images)
        stats["L_dap"] = dap_total.item()
        if cfg.detach_prototypes:
            protos = [[ad.detach(h) for h in per_m] for per_m in images]
        else:
            protos = self.bank.root_forward(net, frozen=False)

        def block_input(m, d):
            if d == 0:
                return xs[m]
            return ad.detach(hs[m][d - 1]) if cfg.detach_block_inputs else hs[m][d - 1]

        run_pdm = self.uses_pdm and (not modulate or cfg.pdm_in_phase2)
        want_aux = modulate and cfg.mode != "aim_wo_pa"
        s_batch = np.zeros((D, M))
        s_aux = np.zeros((D, M)) if self.uses_pdm and (run_pdm or want_aux) else None
        l_block = [[None] * M for _ in range(D)]
        l_aux = [[None] * M for _ in range(D)]
        l_pdm = None
        mask_stats = {}
        for m, enc in enumerate(net.encoders):
            for d, block in enumerate(enc.blocks):
                inp = block_input(m, d)
                p_md = protos[m][d]
                if modulate:
                    full_logits = self._score(m, d, block.forward(inp), p_md)
                    l_block[d][m] = ad.cross_entropy(full_logits, yb)
                    s_batch[d, m] = _probs_true(full_logits.value, yb).mean()
                else:
                    s_batch[d, m] = _probs_true(self._score_np(m, d, hs[m][d].value, p_md), yb).mean()
                if not (run_pdm or want_aux):
                    continue
                decs = self.decoupler.layers[m][d]
                live = dec = None
                if want_aux and run_pdm and cfg.aux_to_decoupler:
                    live, dec = pdmmod.decouple_routes(decs, block, (False, cfg.pdm_stop_theta))
                elif want_aux:
                    live = pdmmod.decouple(decs, block, stop_theta=False,
                                           frozen_decoupler=not cfg.aux_to_decoupler)
                elif run_pdm:
                    dec = pdmmod.decouple(decs, block, stop_theta=cfg.pdm_stop_theta)
                if live is not None:
                    aux_logits = self._score(m, d, block.forward(inp, params=live.aux), p_md)
                    l_aux[d][m] = ad.cross_entropy(aux_logits, yb)
                    s_aux[d, m] = _probs_true(aux_logits.value, yb).mean()
                if run_pdm:
                    comp_logits = self._score(m, d, block.forward(inp, params=dec.comp), p_md)
                    term = ad.cross_entropy(comp_logits, yb) + dec.recon
                    l_pdm = term if l_pdm is None else l_pdm + term
                    if live is None:
                        with ad.no_grad():
                            aux_np = block.forward(ad.detach(inp), params=[(ad.detach(w), ad.detach(b)) for w, b in dec.aux])
                        s_aux[d, m] = _probs_true(self._score_np(m, d, aux_np.value, p_md), yb).mean()
                    for i, (mean, lo, hi) in enumerate(pdmmod.mask_stats(dec.masks)):
                        mask_stats[(m, d, i)] = (mean, lo, hi)

        if weights_fn is None:
            self.rec.estimate_performance(s_batch, s_aux)
            s_hat, alpha = self.rec.s_hat.copy(), self.rec.alpha.copy()
        else:
            s_hat, alpha = weights_fn(s_batch, s_aux)

        total = ad.scalar_mul(l_task, cfg.lambda_task) if modulate else l_task
        if modulate:
            l_depth = []
            for d in range(D):
                weights = s_hat[d].copy()
                blocks_d = l_block[d]
                if cfg.zero_block_weight >= 0:
                    # force (1 - s_hat) to 0 on that modality's full block
                    z = cfg.zero_block_weight
                    blocks_d = list(blocks_d)
                    blocks_d[z] = ad.scalar_mul(blocks_d[z], 0.0)
                aux_d = None if cfg.mode == "aim_wo_pa" else l_aux[d]
                l_depth.append(modmod.depth_loss(weights, blocks_d, aux_d))
            l_mod = modmod.total_modulation_loss(alpha, l_depth, unit_alpha=cfg.mode == "aim_wo_da")
            total = total + l_mod
            stats["L_mod"] = l_mod.item()
            stats["L_depth"] = np.array([t.item() for t in l_depth])
            stats["L_block"] = np.array([[t.item() for t in row] for row in l_block])
            if cfg.mode != "aim_wo_pa":
                stats["L_aux"] = np.array([[t.item() for t in row] for row in l_aux])
        if l_pdm is not None:
            total = total + l_pdm
            stats["L_pdm"] = l_pdm.item()
        if self.label_heads is not None:
            head_ce = None
            for m in range(M):
                for d in range(D):
                    w, b = self.label_heads[m][d]
                    ce = ad.cross_entropy(ad.affine(ad.detach(hs[m][d]), w, b), yb)
                    head_ce = ce if head_ce is None else head_ce + ce
            total = total + head_ce
            stats["L_heads"] = head_ce.item()
        stats["masks"] = mask_stats
        stats["s_hat"], stats["alpha"] = s_hat, alpha
        return BatchResult(total + dap_total, s_batch, s_aux, stats, modulate)

    # -------------------------------------------------------------- training

    def step(self, xb, yb, epoch: int) -> dict:
        modulate = self.modulating_mode and epoch >= self.cfg.E
        res = self.batch_objective(xb, yb, modulate)
        self.step_log.append((epoch, "L_mod" in res.stats))
        ad.backward(res.total)
        self.opt.step()
        if self.pdm_opt is not None:
            self.pdm_opt.step()
        self.dap_opt.step()
        return res.stats

    def run_epoch(self, epoch: int) -> dict:
        n = len(self.train_set)
        order = self.rng.permutation(n)
        agg: dict = {}
        masks = {}
        batches = 0
        for start in range(0, n, self.cfg.batch_size):
            idx = order[start:start + self.cfg.batch_size]
            stats = self.step([x[idx] for x in self.train_set.x], self.train_set.y[idx], epoch)
            masks = stats.pop("masks")
            stats.pop("s_hat"), stats.pop("alpha")
            for k, v in stats.items():
                agg[k] = agg.get(k, 0.0) + np.asarray(v, dtype=np.float64)
            batches += 1
        means = {k: v / batches for k, v in agg.items()}
        means["masks"] = masks
        return means


def _accuracy(pred, y) -> float:
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError("empty dataset")
    return float(np.mean(np.asarray(pred) == y))


def evaluate(net: MultimodalNet, bank: dapmod.PrototypeBank, test: datamod.MultimodalSet) -> tuple:
    """Multimodal accuracy (argmax, ties to the lowest class) and per-modality probe accuracies."""
    if len(test) == 0:
        raise ValueError("empty test set")
    bank.propagate(net)
    acc = _accuracy(net.predict(test.x), test.y)
    feats = net.features(test.x)
    probes = [_accuracy(nearest_prototype(feats[m][-1], bank.protos[m][-1]), test.y)
              for m in range(net.M)]
    return acc, probes


@dataclass
class History:
    config: ExperimentConfig
    rows: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    grams: dict = field(default_factory=dict)
    initial: dict = field(default_factory=dict)
    phase_boundary_violations: int = 0
    status: str = "ok"


def _dap_snapshot(tr: Trainer) -> dict:
    with ad.no_grad():
        total, _, _ = dapmod.dap_objective(tr.bank, tr.net)
    tr.bank.propagate(tr.net)
    offdiag = [[dapmod.mean_abs_offdiag(dapmod.orthogonality_gram(tr.bank, m, d))
                for d in range(1, tr.net.depth + 1)] for m in range(tr.net.M)]
    return {"dap_objective": total.item(), "orth_offdiag": offdiag}


def epoch_row(tr: Trainer, epoch: int, means: dict) -> dict:
    cfg, D, M = tr.cfg, tr.net.depth, tr.net.M
    train_acc, _ = evaluate(tr.net, tr.bank, tr.train_set)
    test_acc, probes = evaluate(tr.net, tr.bank, tr.test_set or tr.train_set)
    snap = _dap_snapshot(tr)
    rec = tr.rec
    row = {"epoch": epoch, "phase": 2 if epoch >= cfg.E else 1,
           "train_acc": train_acc, "test_acc": test_acc}
    for m in range(M):
        row[f"probe_acc_m{m}"] = probes[m]
    for key in ("L_task", "L_mod", "L_pdm", "L_dap"):
        row[key] = float(means.get(key, 0.0))
    row["dap_objective"] = snap["dap_objective"]
    alpha = [modmod.imbalance(rec.s[d], cfg.metric) for d in range(D)]
    l_depth = means.get("L_depth", np.zeros(D))
    for d in range(D):
        row[f"alpha_d{d + 1}"] = alpha[d]
        row[f"L_depth_d{d + 1}"] = float(l_depth[d])
    s_hat = [modmod.softmax(rec.s[d]) for d in range(D)]
    l_block = means.get("L_block", np.zeros((D, M)))
    l_aux = means.get("L_aux", np.zeros((D, M)))
    s_aux = rec.s_aux if rec.s_aux is not None else np.zeros((D, M))
    for d in range(D):
        for m in range(M):
            tag = f"d{d + 1}_m{m}"
            row[f"s_{tag}"] = float(rec.s[d, m])
            row[f"s_aux_{tag}"] = float(s_aux[d, m])
            row[f"s_hat_{tag}"] = float(s_hat[d][m])
            row[f"L_block_{tag}"] = float(l_block[d, m])
            row[f"L_aux_{tag}"] = float(l_aux[d, m])
    for m in range(M):
        for d in range(D):
            row[f"orth_offdiag_m{m}_d{d + 1}"] = snap["orth_offdiag"][m][d]
    masks = means.get("masks", {})
    for m in range(M):
        for d in range(D):
            for i in range(len(tr.net.encoders[m].blocks[d].layers)):
                mean, lo, hi = masks.get((m, d, i), (0.0, 0.0, 0.0))
                base = f"mask_m{m}_d{d + 1}_l{i}"
                row[f"{base}_mean"], row[f"{base}_min"], row[f"{base}_max"] = mean, lo, hi
    return row


def resolve_out_dir(cfg: ExperimentConfig) -> Path | None:
    root = os.environ.get("AIMLAB_OUT")
    if root:
        return Path(root) / (cfg.out_dir or f"{cfg.label}_seed{cfg.seed}")
    return Path(cfg.out_dir) if cfg.out_dir else None


def train(cfg: ExperimentConfig, train_set=None, test_set=None, out_dir=None,
          export: bool = True) -> tuple:
    """Run the full schedule; returns ``(trainer, history)``.

    Outputs (metrics, summary, grams, checkpoint) are written when an output
    directory is known and ``export`` is set.
    """
    cfg.validate()
    if train_set is None:
        train_set, test_set = load_datasets(cfg)
    out = Path(out_dir) if out_dir is not None else resolve_out_dir(cfg)
    tr = Trainer(cfg, train_set, test_set)
    hist = History(cfg)
    hist.initial = _dap_snapshot(tr)
    last_good = [p.value.copy() for p in tr.trainable() + tr.bank.roots]
    for epoch in range(cfg.E_T):
        t0 = time.perf_counter()
        try:
            means = tr.run_epoch(epoch)
        except (NumericError, DegenerateError) as exc:
            hist.status = f"diverged at epoch {epoch}: {exc}"
            ckpt = None
            for p, v in zip(tr.trainable() + tr.bank.roots, last_good):
                p.value[...] = v
            if out is not None:
                out.mkdir(parents=True, exist_ok=True)
                ckpt = out / "last_good.ckpt"
                save_checkpoint(ckpt, tr.net, tr.extra_named_tensors())
            raise TrainingDiverged(hist.status, ckpt) from exc
        hist.rows.append(epoch_row(tr, epoch, means))
        hist.timings.append((epoch, time.perf_counter() - t0))
        if epoch == cfg.E - 1 or epoch == cfg.E_T - 1:
            hist.grams[epoch] = tr.bank.snapshot()
        last_good = [p.value.copy() for p in tr.trainable() + tr.bank.roots]
        log.debug("epoch %d test_acc %.4f", epoch, hist.rows[-1]["test_acc"])
    hist.phase_boundary_violations = sum(1 for e, mod in tr.step_log if mod and e < cfg.E)
    if out is not None and export:
        export_metrics(hist, out)
        save_checkpoint(out / "final.ckpt", tr.net, tr.extra_named_tensors(),
                        extra={"mode": cfg.mode})
    return tr, hist


def summary_of(hist: History) -> dict:
    cfg, last = hist.config, hist.rows[-1]
    D, M = cfg.depth, len([k for k in last if k.startswith("probe_acc_m")])
    alpha = [last[f"alpha_d{d + 1}"] for d in range(D)]
    return {
        "format_version": METRICS_FORMAT_VERSION,
        "status": hist.status,
        "config": dataclasses.asdict(cfg),
        "epochs": len(hist.rows),
        "final_train_acc": last["train_acc"],
        "final_test_acc": last["test_acc"],
        "final_probe_acc": [last[f"probe_acc_m{m}"] for m in range(M)],
        "final_alpha": alpha,
        "mean_final_alpha": float(np.mean(alpha)),
        "final_s": [[last[f"s_d{d + 1}_m{m}"] for m in range(M)] for d in range(D)],
        "final_s_aux": [[last[f"s_aux_d{d + 1}_m{m}"] for m in range(M)] for d in range(D)],
        "initial_dap_objective": hist.initial["dap_objective"],
        "initial_orth_offdiag": hist.initial["orth_offdiag"],
        "phase_boundary_violations": hist.phase_boundary_violations,
    }


def export_metrics(hist: History, out_dir) -> dict:
    """Write metrics.csv, timings.csv, summary.json and the prototype gram CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out / "metrics.csv", "summary": out / "summary.json",
             "timings": out / "timings.csv"}
    columns = list(hist.rows[0].keys())
    with open(paths["metrics"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in hist.rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
    with open(paths["timings"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "seconds"])
        writer.writerows(hist.timings)
    paths["summary"].write_text(json.dumps(summary_of(hist), indent=2, allow_nan=False))
    grams = []
    for epoch, protos in hist.grams.items():
        bank = dapmod.PrototypeBank.__new__(dapmod.PrototypeBank)
        bank.protos, bank.K, bank.roots = protos, protos[0][0].shape[0], [None] * len(protos)
        grams += dapmod.export_grams(bank, out, epoch)
    paths["grams"] = grams
    return paths


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _run_one(job):
    cfg, run_dir = job
    try:
        _, hist = train(cfg, out_dir=run_dir)
        return summary_of(hist), None
    except Exception as exc:  # recorded per row; the suite keeps going
        return None, f"{type(exc).__name__}: {exc}"


def suite_run_dir(out_dir, cfg: ExperimentConfig) -> Path:
    """Per-run output directory inside a suite: ``runs/<label>_seed<seed>``."""
    return Path(out_dir) / "runs" / f"{cfg.label}_seed{cfg.seed}"


SUITE_FIELDS = ("final_test_acc", "final_train_acc", "mean_final_alpha")


def run_suite(configs, out_dir=None, workers: int = 1) -> list:
    """Run every config and aggregate mean and (population) std per label.

    Returns the aggregated rows. With ``out_dir`` it writes suite.csv and
    runs.csv there, and each run's own outputs under :func:`suite_run_dir`.
    """
    configs = list(configs)
    if not configs:
        raise ConfigError("run_suite needs at least one config")
    jobs = [(c, suite_run_dir(out_dir, c) if out_dir is not None else None) for c in configs]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]

    runs, groups = [], {}
    for cfg, (summary, error) in zip(configs, results):
        runs.append((cfg, summary, error))
        groups.setdefault(cfg.label, []).append((summary, error))
    rows = []
    for label, items in groups.items():
        ok = [s for s, e in items if e is None]
        row = {"label": label, "n_runs": len(items), "n_failed": len(items) - len(ok)}
        for key in SUITE_FIELDS:
            vals = np.array([s[key] for s in ok]) if ok else np.array([np.nan])
            row[f"{key}_mean"] = float(vals.mean())
            row[f"{key}_std"] = float(vals.std())
        n_mod = len(ok[0]["final_probe_acc"]) if ok else 0
        for m in range(n_mod):
            vals = np.array([s["final_probe_acc"][m] for s in ok])
            row[f"probe_acc_m{m}_mean"] = float(vals.mean())
            row[f"probe_acc_m{m}_std"] = float(vals.std())
        rows.append(row)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        columns = []
        for row in rows:
            columns += [c for c in row if c not in columns]
        with open(out / "suite.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            writer.writerows(rows)
        with open(out / "runs.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label", "seed", "final_test_acc", "error"])
            for cfg, summary, error in runs:
                writer.writerow([cfg.label, cfg.seed,
                                 "" if summary is None else summary["final_test_acc"],
                                 error or ""])
    return rows


def e_sweep(base: ExperimentConfig, starts, seeds=(0,), out_dir=None, workers: int = 1) -> list:
    """Suite over modulation start epochs ``starts`` and ``seeds``, one label per start."""
    configs = []
    for e in starts:
        for seed in seeds:
            configs.append(dataclasses.replace(base, E=int(e), seed=int(seed),
                                               tag=f"{base.label}_E{e}", out_dir=""))
    return run_suite(configs, out_dir=out_dir, workers=workers)


def evaluate_checkpoint(path, test: datamod.MultimodalSet) -> tuple:
    """Load a saved run (network and prototype roots) and evaluate it on ``test``."""
    from .net import load_checkpoint
    net, header, arrays = load_checkpoint(path)
    if test.dims != list(header["dims"]) or test.K != header["K"]:
        raise ConfigError("dataset shape does not match the checkpoint")
    bank = dapmod.PrototypeBank(header["dims"], header["K"])
    for m, root in enumerate(bank.roots):
        key = f"proto{m}.root"
        if key not in arrays:
            raise ConfigError(f"checkpoint lacks prototype roots {key!r}")
        root.value[...] = arrays[key]
    return evaluate(net, bank, test)
