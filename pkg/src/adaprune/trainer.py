"""Three-phase training (dense pretrain, SPM warmup, joint fine-tune),
evaluation and the ablation harness."""
import csv
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .analysis import DecisionLog
from .autodiff import Tensor, backward, no_grad
from .backbones import build_network, extract_cost_specs
from .checkpoint import file_hash, load_checkpoint, read_arrays, save_checkpoint
from .config import PHASES
from .cost import BudgetConfig, CostEstimator, compute_lambda, multi_task_loss, sample_flops
from .data import batches, load_cifar, normalize_augment, synth_dataset
from .errors import NonFiniteError, PrerequisiteError
from .optim import SGD, step_lr
from .spm import Variant, round_half_up

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["step", "L_cls", "cost_term", "lambda", "p_t", "p_t/p0", "active_fraction_per_layer"]


def load_data(cfg):
    if cfg.dataset == "synthetic":
        return synth_dataset(
            cfg.synthetic_n,
            cfg.num_classes,
            seed=cfg.seed,
            n_test=cfg.synthetic_test_n,
            image_size=cfg.image_size,
            noise=cfg.synthetic_noise,
        )
    return load_cifar(cfg.data_dir, cfg.dataset)


def match_k_fraction(specs, budget):
    """Uniform keep fraction whose dense top-k FLOPs land closest to ``budget``."""
    best_k, best_gap = 1.0, None
    for k in np.linspace(0.01, 1.0, 991):
        decisions = {}
        for s in specs:
            if s.gated:
                keep = max(1, round_half_up(k * s.C_out))
                row = np.zeros((1, s.C_out), dtype=bool)
                row[0, :keep] = True
                decisions[s.layer_id] = row
        gap = abs(float(sample_flops(specs, decisions)[0]) - budget)
        if best_gap is None or gap < best_gap:
            best_k, best_gap = float(k), gap
    return best_k


def make_network(cfg, variant=None, k_fraction=None):
    variant = Variant.parse(variant or cfg.variant)
    net_cfg = cfg.network_config()
    if variant is Variant.FIXED_K and k_fraction is None:
        k_fraction = cfg.k_fraction
        if k_fraction is None:
            specs, p0 = extract_cost_specs(net_cfg)
            k_fraction = match_k_fraction(specs, cfg.budget_fraction * p0)
    return build_network(net_cfg, variant, cfg.binarizer(), k_fraction or 0.5, seed=cfg.seed)


def phase_paths(cfg, variant=None):
    out = Path(cfg.out_dir)
    variant = Variant.parse(variant or cfg.variant)
    return {
        "pretrain": out / "pretrain.ckpt",
        "warmup": out / variant.value / "warmup.ckpt",
        "finetune": out / variant.value / "finetune.ckpt",
    }


class MetricsWriter:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "w", newline="")
        self._w = csv.writer(self._f)
        self._w.writerow(METRICS_COLUMNS)

    def row(self, step, cls_loss, cost, lam, p_t, p0, fractions):
        self._w.writerow(
            [step, repr(cls_loss), repr(cost), repr(lam), repr(p_t), repr(p_t / p0), ";".join(repr(f) for f in fractions)]
        )

    def close(self):
        self._f.close()


@dataclass
class PhaseResult:
    checkpoint: Path
    metrics: Path
    steps: int
    final_loss: float = float("nan")
    p_t: float = float("nan")
    summary: dict = field(default_factory=dict)


def _train(net, cfg, phase, train, optimizer, metrics, specs, p0, budget=None, estimator=None):
    epochs = {"pretrain": cfg.epochs_pretrain, "warmup": cfg.epochs_warmup, "finetune": cfg.epochs_finetune}[phase]
    base_lr = cfg.phase_lr(phase)
    rng = np.random.default_rng([cfg.seed, PHASES.index(phase)])
    gated = bool(net.spms)
    step, loss_val, p_t = 0, float("nan"), float(p0)
    net.train()
    for epoch in range(epochs):
        optimizer.lr = step_lr(base_lr, epoch, cfg.lr_step_epochs, cfg.lr_gamma)
        for idx in batches(len(train), cfg.batch_size, rng, drop_last=len(train) >= 2 * cfg.batch_size):
            if len(idx) < 2:
                continue
            x = Tensor(normalize_augment(train, idx, "train", rng, cfg.do_augment))
            try:
                cls_loss = ops.softmax_cross_entropy(net(x), train.labels[idx])
                lam, cost = 0.0, 0.0
                if gated:
                    clean = cfg.cost_estimate == "clean"
                    per_sample = sample_flops(specs, net.decisions(clean))
                    fractions = [float((s.last_clean if clean else s.last_hard).mean()) for s in net.spms]
                    if estimator is not None:
                        p_t = estimator.update(per_sample)
                    else:
                        p_t = float(per_sample.mean())
                else:
                    fractions = [1.0] * len(specs)
                # FIXED_K keeps k channels whatever s is, so the budget loop has
                # nothing to steer and a negative lambda would only inflate |s|
                if phase == "finetune" and gated and net.variant is not Variant.FIXED_K:
                    lam = compute_lambda(budget, p_t)
                    sal = net.saliencies()
                    if cfg.cost_on == "s1":
                        sal = [s.last_s1 if s.last_s1 is not None else s.last_s for s in net.spms]
                    loss, cost = multi_task_loss(cls_loss, sal, lam, net.n_filters, return_term=True)
                else:
                    loss = cls_loss
                optimizer.zero_grad()
                backward(loss)
                optimizer.step()
            except NonFiniteError as e:
                raise NonFiniteError(f"{phase} step {step} (lr={optimizer.lr}): {e}") from None
            loss_val = float(cls_loss.data)
            metrics.row(step, loss_val, cost, lam, p_t, p0, fractions)
            step += 1
        log.info("%s epoch %d/%d: L_cls=%.4f p_t/p0=%.3f", phase, epoch + 1, epochs, loss_val, p_t / p0)
    return step, loss_val, p_t


def phase1_pretrain(cfg, data=None):
    """Train the dense backbone with cross entropy."""
    train, _ = data or load_data(cfg)
    net = make_network(cfg, Variant.UNPRUNED)
    specs, p0 = extract_cost_specs(net)
    paths = phase_paths(cfg)
    opt = SGD(net.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    metrics = MetricsWriter(Path(cfg.out_dir) / "metrics_pretrain.csv")
    try:
        steps, loss, _ = _train(net, cfg, "pretrain", train, opt, metrics, specs, p0)
    finally:
        metrics.close()
    save_checkpoint(net, paths["pretrain"], meta={"phase": "pretrain", "seed": cfg.seed})
    return PhaseResult(paths["pretrain"], metrics.path, steps, loss, p0)


def _require(path, phase):
    if not Path(path).exists():
        raise PrerequisiteError(f"missing prerequisite: {phase} checkpoint {path} (run `train --phase {phase}` first)")


def phase2_warmup(cfg, pretrained=None, data=None, variant=None):
    """Train only the SPMs on the classification loss; backbone frozen."""
    variant = Variant.parse(variant or cfg.variant)
    paths = phase_paths(cfg, variant)
    pretrained = Path(pretrained or paths["pretrain"])
    _require(pretrained, "pretrain")
    paths["warmup"].parent.mkdir(parents=True, exist_ok=True)
    if variant is Variant.UNPRUNED:
        shutil.copyfile(pretrained, paths["warmup"])
        return PhaseResult(paths["warmup"], None, 0)
    train, _ = data or load_data(cfg)
    net = make_network(cfg, variant)
    load_checkpoint(net, pretrained, allow_missing_spm=True)
    for p in net.backbone_parameters():
        p.frozen = True
    specs, p0 = extract_cost_specs(net)
    opt = SGD(net.parameters(), cfg.phase_lr("warmup"), cfg.momentum, cfg.weight_decay)
    metrics = MetricsWriter(paths["warmup"].parent / "metrics_warmup.csv")
    try:
        steps, loss, p_t = _train(net, cfg, "warmup", train, opt, metrics, specs, p0)
    finally:
        metrics.close()
    for p in net.backbone_parameters():
        p.frozen = False
    save_checkpoint(net, paths["warmup"], meta={"phase": "warmup", "seed": cfg.seed, "k_fraction": _k(net)})
    return PhaseResult(paths["warmup"], metrics.path, steps, loss, p_t)


def _k(net):
    return net.spms[0].k_fraction if net.spms else None


def _net_for_checkpoint(cfg, path, variant):
    _, meta = read_arrays(path)
    return make_network(cfg, variant, meta.get("k_fraction")), meta


def phase3_finetune(cfg, warm=None, data=None, variant=None):
    """Joint fine-tune under the FLOPs budget (adaptive cost weight)."""
    variant = Variant.parse(variant or cfg.variant)
    paths = phase_paths(cfg, variant)
    warm = Path(warm or paths["warmup"])
    _require(warm, "warmup")
    train, _ = data or load_data(cfg)
    net, _ = _net_for_checkpoint(cfg, warm, variant)
    load_checkpoint(net, warm)
    specs, p0 = extract_cost_specs(net)
    budget = BudgetConfig.from_fraction(
        cfg.budget_fraction,
        p0,
        lambda0=cfg.lambda0,
        estimator_window=cfg.estimator_window,
        n_filters=net.n_filters,
        n_layers=len(specs),
    )
    estimator = CostEstimator(p0, cfg.estimator_window)
    opt = SGD(net.parameters(), cfg.phase_lr("finetune"), cfg.momentum, cfg.weight_decay)
    metrics = MetricsWriter(paths["finetune"].parent / "metrics_finetune.csv")
    try:
        steps, loss, p_t = _train(net, cfg, "finetune", train, opt, metrics, specs, p0, budget, estimator)
    finally:
        metrics.close()
    gap = abs(p_t - budget.p) / p0
    summary = {"p_t": p_t, "p": budget.p, "p0": p0, "gap_over_p0": gap, "steps": steps}
    log.info("finetune done: |p_t - p|/p0 = %.4f", gap)
    save_checkpoint(
        net, paths["finetune"], opt, estimator, meta={"phase": "finetune", "seed": cfg.seed, "k_fraction": _k(net)}
    )
    (paths["finetune"].parent / "finetune_summary.json").write_text(json.dumps(summary, indent=2))
    return PhaseResult(paths["finetune"], metrics.path, steps, loss, p_t, summary)


def run_phases(cfg, phases=PHASES, data=None, variant=None):
    data = data or load_data(cfg)
    results = {}
    for phase in phases:
        if phase == "pretrain":
            results[phase] = phase1_pretrain(cfg, data)
        elif phase == "warmup":
            results[phase] = phase2_warmup(cfg, data=data, variant=variant)
        elif phase == "finetune":
            results[phase] = phase3_finetune(cfg, data=data, variant=variant)
        else:
            raise ValueError(f"unknown phase {phase!r}")
    return results


# ------------------------------------------------------------------ evaluation


@dataclass
class EvalResult:
    top1: float
    mean_flops: float
    per_layer_active: dict
    p0: int
    log: DecisionLog = None

    @property
    def error(self):
        return 1.0 - self.top1

    @property
    def pruned_rate(self):
        return 1.0 - self.mean_flops / self.p0


def evaluate(net, split, cfg=None, checkpoint_hash="", batch_size=None):
    """Top-1 accuracy, mean dynamic FLOPs and per-layer active fraction.

    Runs in inference mode without touching weights, BN statistics or any
    estimator; the model's train/eval flag is restored afterwards.
    """
    batch_size = batch_size or (cfg.eval_batch_size if cfg else 500)
    specs, p0 = extract_cost_specs(net, input_shape=split.images.shape[1:])
    dlog = DecisionLog({s.layer_id: s.head.c_out for s in net.spms}, split.split, checkpoint_hash)
    current = {}
    prev = net.training
    net.eval()
    net.set_decision_sink(lambda lid, hard: dlog.record(lid, current["ids"], hard))
    correct, flops = 0, []
    try:
        with no_grad():
            for idx in batches(len(split), batch_size):
                current["ids"] = idx
                logits = net(Tensor(normalize_augment(split, idx, "eval")))
                correct += int((logits.data.argmax(axis=1) == split.labels[idx]).sum())
                if net.spms:
                    flops.append(sample_flops(specs, net.decisions()))
    finally:
        net.set_decision_sink(None)
        net.train(prev)
    if net.spms:
        mean_flops = float(np.concatenate(flops).mean())
        per_layer = {lid: float(dlog.matrix(lid).mean()) for lid in dlog.layer_ids}
    else:
        mean_flops = float(p0)
        per_layer = {s.layer_id: 1.0 for s in specs}
        dlog = None
    return EvalResult(correct / len(split), mean_flops, per_layer, p0, dlog)


def evaluate_checkpoint(cfg, path, split="test", data=None, variant=None):
    _require(path, "checkpoint")
    arrays, meta = read_arrays(path)
    variant = Variant.parse(variant or meta.get("variant", cfg.variant))
    net = make_network(cfg, variant, meta.get("k_fraction"))
    load_checkpoint(net, path)
    train, test = data or load_data(cfg)
    return evaluate(net, test if split == "test" else train, cfg, checkpoint_hash=file_hash(path))


def run_ablation(cfg, variants=(Variant.SANP, Variant.FIXED_K, Variant.STATIC), data=None, report=None):
    """Pretrain once, then warm up / fine-tune / evaluate each variant.

    Writes an ``ablation.csv`` with error, FLOPs and pruned rate per variant.
    """
    data = data or load_data(cfg)
    paths = phase_paths(cfg)
    if not paths["pretrain"].exists():
        phase1_pretrain(cfg, data)
    rows = []
    for v in variants:
        v = Variant.parse(v)
        phase2_warmup(cfg, data=data, variant=v)
        phase3_finetune(cfg, data=data, variant=v)
        res = evaluate_checkpoint(cfg, phase_paths(cfg, v)["finetune"], data=data, variant=v)
        rows.append(
            {
                "variant": v.value,
                "error_pct": 100.0 * res.error,
                "flops_m": res.mean_flops / 1e6,
                "pruned_pct": 100.0 * res.pruned_rate,
            }
        )
    report = Path(report or Path(cfg.out_dir) / "ablation.csv")
    report.parent.mkdir(parents=True, exist_ok=True)
    with open(report, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["variant", "error_pct", "flops_m", "pruned_pct"])
        w.writeheader()
        w.writerows(rows)
    return rows
