"""Two-phase training loop: labeled-only burn-in, then teacher-student
semi-supervised training with EMA teacher, pseudo-labeling, patch mixing,
text augmentation, and the contrastive alignment loss.

All randomness is drawn from purpose-keyed generators derived from
(seed, step, purpose-id), so disabling one component never shifts the
random stream of another and runs are bit-reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch

from . import augment, objectives, postext
from .model import (ModelConfig, SegModel, Vocabulary, ema_update, init_model,
                    load_checkpoint, save_checkpoint, tokenize)
from .synthdata import Dataset, Sample

# purpose ids for derived rng streams
_RNG_WEAK = 1
_RNG_STRONG = 2
_RNG_POSAUG = 3
_RNG_MIX = 4
_RNG_PAIRING = 5
_RNG_BATCH = 6
_RNG_STRONG_U = 7


@dataclass
class TrainConfig:
    seed: int = 0
    epochs_total: int = 30
    burnin_fraction: float = 0.2
    batch_size: int = 32
    label_ratio: float = 0.05
    lr_max: float = 3e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    m: float = 0.999
    delta_pl: float = 0.9
    delta_gate: float = 0.5
    tau: float = 0.07
    rho: float = 0.5
    lambda_u: float = 1.0
    lambda_itcl_sup: float = 0.02
    lambda_itcl_unsup: float = 0.1
    block_size: int = 16
    use_ema_ssl: bool = True
    use_posaug: bool = True
    use_tpatchmix: bool = True
    use_itcl: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            if "enc_channels" in self.model:
                self.model["enc_channels"] = tuple(self.model["enc_channels"])
            self.model = ModelConfig(**self.model)
        for k in ("lr_max", "lr_min", "batch_size", "tau", "m"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        for k in ("lambda_u", "lambda_itcl_sup", "lambda_itcl_unsup"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")

    @classmethod
    def from_file(cls, path: Path) -> "TrainConfig":
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class TrainState:
    student: SegModel
    teacher: SegModel | None
    optimizer: torch.optim.Optimizer
    vocab: Vocabulary
    config: TrainConfig
    step: int = 0
    phase: str = "burnin"  # burnin | ssl


def lr_schedule(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing from lr_max at step 0 to lr_min at total_steps."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def make_optimizer(model: SegModel, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=config.lr_max,
                             betas=(0.9, 0.999), eps=1e-8,
                             weight_decay=config.weight_decay)


def optimizer_step(state: TrainState, loss: torch.Tensor, lr: float) -> None:
    """Backprop the scalar loss and apply one decoupled-weight-decay update."""
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at step {state.step}")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()


def _rng(config: TrainConfig, step: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, step, purpose])


def _to_batch(images, vocab, texts, dtype=torch.float32):
    x = torch.as_tensor(np.stack(images), dtype=dtype).unsqueeze(1)
    toks = torch.as_tensor(np.stack([tokenize(t, vocab) for t in texts]))
    return x, toks


def _labeled_batch_ids(labeled_ids, step, config):
    """Seeded per-step draw (without replacement) from the labeled pool."""
    rng = _rng(config, step, _RNG_BATCH)
    n = min(config.batch_size, len(labeled_ids))
    idx = rng.choice(len(labeled_ids), size=n, replace=False)
    return [labeled_ids[i] for i in sorted(idx)]


def _weak_views(samples, step, config, with_masks=False):
    rng = _rng(config, step, _RNG_WEAK)
    images, masks = [], []
    for s in samples:
        img, msk, _ = augment.weak_augment(s.image, s.mask if with_masks else None, rng=rng)
        images.append(img)
        masks.append(msk)
    return images, masks


def _strong_views(images, step, config, purpose=_RNG_STRONG):
    rng = _rng(config, step, purpose)
    return [augment.strong_photometric(img, rng) for img in images]


def burnin_step(state: TrainState, samples: list[Sample], lr: float) -> objectives.LossBreakdown:
    images, masks = _weak_views(samples, state.step, state.config, with_masks=True)
    x, toks = _to_batch(images, state.vocab, [s.text for s in samples])
    y = torch.as_tensor(np.stack(masks), dtype=x.dtype)
    logits, _, _, _ = state.student(x, toks)
    sup = objectives.dice_ce_loss(logits, y)
    optimizer_step(state, sup, lr)
    state.step += 1
    return objectives.total_loss(float(sup.detach()), 0.0, 0.0, 0.0,
                                 state.config.lambda_u, state.config.lambda_itcl_sup,
                                 state.config.lambda_itcl_unsup)


def ssl_step(state: TrainState, labeled: list[Sample], unlabeled: list[Sample]):
    """One semi-supervised step; returns the loss breakdown.

    The teacher predicts on weak views with unchanged text; patch mixing (if
    enabled) rewrites student images/texts/targets per pair; the student sees
    photometric-strong views with optionally perturbed text. The teacher EMA
    update runs after the student optimizer step.
    """
    cfg = state.config
    if state.phase != "ssl":
        raise RuntimeError("ssl_step before burn-in completed")
    step = state.step
    teacher_net = state.teacher if cfg.use_ema_ssl else state.student

    l_images, l_masks = _weak_views(labeled, step, cfg, with_masks=True)
    u_images, _ = _weak_views(unlabeled, step, cfg)

    with torch.no_grad():
        xw, toksw = _to_batch(u_images, state.vocab, [s.text for s in unlabeled])
        t_logits, _, _, _ = teacher_net(xw, toksw)
        p_teacher = torch.sigmoid(t_logits).numpy().astype(np.float64)

    targets = [objectives.pseudo_label(p, cfg.delta_pl) for p in p_teacher]
    texts = [postext.parse_positions(s.text) for s in unlabeled]
    student_u_images = list(u_images)

    if cfg.use_tpatchmix:
        pair_rng = _rng(cfg, step, _RNG_PAIRING)
        partners = pair_rng.permutation(len(unlabeled))
        mix_cfg = augment.MixConfig(block_size=cfg.block_size, delta_gate=cfg.delta_gate)
        mix_rng = _rng(cfg, step, _RNG_MIX)
        for i, j in enumerate(partners):
            if i == j:
                continue
            out = augment.tpatchmix(
                (u_images[i], texts[i]), (u_images[int(j)], texts[int(j)]),
                p_teacher[i], p_teacher[int(j)], mix_cfg, mix_rng)
            if out.applied:
                student_u_images[i] = out.mixed_image
                targets[i] = out.mixed_pseudo_mask
                texts[i] = out.mixed_text

    itcl_texts_u = [t.text for t in texts]  # pre-PosAug captions feed the contrastive heads
    if cfg.use_posaug:
        aug_rng = _rng(cfg, step, _RNG_POSAUG)
        texts = [postext.posaug(t, cfg.rho, aug_rng) for t in texts]

    l_strong = _strong_views(l_images, step, cfg)
    u_strong = _strong_views(student_u_images, step, cfg, purpose=_RNG_STRONG_U)

    xl, toksl = _to_batch(l_strong, state.vocab, [s.text for s in labeled])
    yl = torch.as_tensor(np.stack(l_masks), dtype=xl.dtype)
    logits_l, _, vl, ul = state.student(xl, toksl)
    sup = objectives.dice_ce_loss(logits_l, yl)

    xu, toksu = _to_batch(u_strong, state.vocab, [t.text for t in texts])
    yu = torch.as_tensor(np.stack(targets), dtype=xu.dtype)
    logits_u, _, _, _ = state.student(xu, toksu)
    unsup = objectives.dice_ce_loss(logits_u, yu)

    itcl_sup = torch.zeros(())
    itcl_unsup = torch.zeros(())
    if cfg.use_itcl:
        # labeled branch: student texts are the original captions already
        a_l = postext.affinity_matrix([s.q for s in labeled])
        itcl_sup = objectives.itcl_loss(vl, ul, a_l, cfg.tau)

        toks_orig = torch.as_tensor(np.stack([tokenize(t, state.vocab)
                                              for t in itcl_texts_u]))
        vu, uu = state.student.embeddings(xu, toks_orig)
        a_u = postext.affinity_matrix([postext.parse_positions(t).label
                                       for t in itcl_texts_u])
        itcl_unsup = objectives.itcl_loss(vu, uu, a_u, cfg.tau)

    loss = (sup + cfg.lambda_u * unsup + cfg.lambda_itcl_sup * itcl_sup
            + cfg.lambda_itcl_unsup * itcl_unsup)
    lr = state.optimizer.param_groups[0]["lr"]
    optimizer_step(state, loss, lr)
    if cfg.use_ema_ssl:
        state.teacher.load_state_dict(
            ema_update(state.teacher.state_dict(), state.student.state_dict(), cfg.m))
    state.step += 1
    return objectives.total_loss(float(sup.detach()), float(unsup.detach()),
                                 float(itcl_sup.detach()), float(itcl_unsup.detach()), cfg.lambda_u,
                                 cfg.lambda_itcl_sup, cfg.lambda_itcl_unsup)


def _predict(model: SegModel, samples: list[Sample], vocab, batch_size=16):
    preds = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            x, toks = _to_batch([s.image for s in chunk], vocab, [s.text for s in chunk])
            logits, _, _, _ = model(x, toks)
            preds.extend((torch.sigmoid(logits).numpy() >= 0.5).astype(np.float64))
    return preds


def evaluate_model(model: SegModel, samples: list[Sample], vocab) -> dict:
    """Mean Dice / mIoU with no augmentation and original captions."""
    if not samples:
        raise ValueError("empty evaluation split")
    preds = _predict(model, samples, vocab)
    gts = [s.mask for s in samples]
    records = [{"id": s.id, "dice": objectives.dice_metric(p, g),
                "iou": objectives.iou(p, g)}
               for s, p, g in zip(samples, preds, gts)]
    summary = {"mean_dice": float(np.mean([r["dice"] for r in records])),
               "miou": objectives.miou_metric(preds, gts)}
    return {"records": records, "summary": summary}


def evaluate_checkpoint(ckpt_path: Path, dataset: Dataset, split: str) -> dict:
    from .model import _words

    model, vocab, _ = load_checkpoint(ckpt_path)
    model.eval()
    samples = dataset.split(split)
    missing = {w for s in samples for w in _words(s.text)} - set(vocab.word_to_id)
    if missing:
        raise ValueError(f"vocabulary mismatch: dataset words {sorted(missing)} "
                         "missing from checkpoint vocabulary")
    return evaluate_model(model, samples, vocab)


def train(config: TrainConfig, dataset: Dataset, out_dir: Path) -> Path:
    """Run burn-in then SSL epochs; returns the best-validation checkpoint path.

    Writes ``metrics.jsonl`` (per-step loss parts, per-epoch validation
    metrics), ``best.ckpt`` and ``final.ckpt`` under out_dir.
    """
    if config.epochs_total <= 0:
        raise ValueError("epochs_total must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)

    train_ids = dataset.manifest.splits["train"]
    labeled_ids = dataset.labeled_train_ids(config.label_ratio)
    unlabeled_ids = [i for i in train_ids if i not in set(labeled_ids)] or list(labeled_ids)
    val = dataset.split("val")

    corpus = [dataset.samples[i].text for i in train_ids]
    vocab = Vocabulary.build(corpus)
    student = init_model(config.model, len(vocab), config.seed)
    state = TrainState(student=student, teacher=None,
                       optimizer=make_optimizer(student, config),
                       vocab=vocab, config=config)

    burnin_epochs = round(config.burnin_fraction * config.epochs_total)
    if not config.use_ema_ssl:
        # no teacher-student stage: the whole run is supervised-only
        burnin_epochs = config.epochs_total
    ssl_epochs = config.epochs_total - burnin_epochs
    steps_per_burnin_epoch = max(1, math.ceil(len(labeled_ids) / config.batch_size))
    steps_per_ssl_epoch = max(1, math.ceil(len(unlabeled_ids) / config.batch_size))
    total_steps = (burnin_epochs * steps_per_burnin_epoch
                   + ssl_epochs * steps_per_ssl_epoch)

    config_echo = asdict(config)
    best_dice, best_path = -1.0, out_dir / "best.ckpt"
    log_path = out_dir / "metrics.jsonl"
    with open(log_path, "w", encoding="utf-8") as log:
        def log_record(rec):
            log.write(json.dumps(rec, sort_keys=True) + "\n")

        def run_epoch(epoch, phase):
            pool_ids = labeled_ids if phase == "burnin" else unlabeled_ids
            n_steps = steps_per_burnin_epoch if phase == "burnin" else steps_per_ssl_epoch
            order = _rng(config, epoch, _RNG_BATCH).permutation(len(pool_ids))
            pool = [pool_ids[i] for i in order]
            for k in range(n_steps):
                lr = lr_schedule(state.step, total_steps, config.lr_max, config.lr_min)
                for g in state.optimizer.param_groups:
                    g["lr"] = lr
                chunk = pool[k * config.batch_size:(k + 1) * config.batch_size]
                if phase == "burnin":
                    parts = burnin_step(state, [dataset.samples[i] for i in chunk], lr)
                else:
                    lab = [dataset.samples[i]
                           for i in _labeled_batch_ids(labeled_ids, state.step, config)]
                    parts = ssl_step(state, lab, [dataset.samples[i] for i in chunk])
                log_record({"step": state.step, "phase": phase, "lr": lr,
                            "sup": parts.sup, "unsup": parts.unsup,
                            "itcl_sup": parts.itcl_sup, "itcl_unsup": parts.itcl_unsup,
                            "total": parts.total})

        for epoch in range(config.epochs_total):
            if epoch == burnin_epochs:
                # SSL phase starts: teacher is an exact copy of the student
                state.teacher = init_model(config.model, len(vocab), config.seed)
                state.teacher.load_state_dict({k: v.clone() for k, v
                                               in state.student.state_dict().items()})
                for p in state.teacher.parameters():
                    p.requires_grad_(False)
                state.phase = "ssl"
            state.student.train()
            run_epoch(epoch, state.phase)
            state.student.eval()
            report = evaluate_model(state.student, val, vocab)
            log_record({"epoch": epoch + 1, **report["summary"]})
            if report["summary"]["mean_dice"] > best_dice:
                best_dice = report["summary"]["mean_dice"]
                save_checkpoint(best_path, state.student, vocab, state.step, config_echo)

    save_checkpoint(out_dir / "final.ckpt", state.student, vocab, state.step, config_echo)
    return best_path
