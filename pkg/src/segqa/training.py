"""Training: answer-guided pseudo temporal labels and two optimization regimes.

The locator has no ground-truth supervision.  Instead, for every sample the
answer head is probed on all N proposal slices (eval mode, no gradients); the
proposal giving the highest softmax probability of the correct answer becomes
a one-hot pseudo label for the locator loss.  Labels are regenerated from the
current model per batch, never cached.

Two regimes consume that loss:

  * alternating ("DA"): odd epochs step everything except the locator group
    on the answer loss; even epochs step only the locator group on the
    pseudo-label loss.  No loss-weighting factor is needed.
  * bundled: every step optimizes answer_loss + lambda * locator_loss
    jointly.  The answer head reads the locator's argmax proposal (hard
    selection; no gradient flows through the choice itself).

Variants without a locator loss (``no_QL``, ``no_LQL``, ``soft_QL``) train on
the answer loss alone every epoch, whatever the schedule says.

The learning-rate policy is Adam with halving on validation plateau; the
convergence epoch reported in summaries is the first epoch that attained the
best validation accuracy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .answerer import masked_segment_pool, segment_mask
from .config import ModelConfig, TrainSchedule
from .model import Batch, SegQAModel, make_batch
from .proposals import temporal_iou

CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    """Optimizer / model / dataset wiring that cannot train."""


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries the failing location."""

    def __init__(self, epoch, batch_index, parts):
        self.epoch = epoch
        self.batch_index = batch_index
        self.parts = parts
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch_index}: {parts}"
        )


@dataclass
class PseudoLabel:
    """Proposal index chosen by probing the answer head, plus its confidence."""

    proposal_index: int
    confidence: float


# -- pseudo temporal labels -----------------------------------------------------


def correct_answer_probs(model, encoded, batch):
    """(B, N) softmax probability of the true answer for every proposal slice.

    Pure numpy (no graph); caller is responsible for eval-mode encodings.
    """
    pset = model.proposals_for(batch.video_len)
    with ad.no_grad():
        mask = segment_mask(batch.video_len, pset)
        pooled = masked_segment_pool(encoded.v_cross, mask)          # (B, N, d)
        scores = model.answer_scores(encoded, pooled).data           # (B, N, K)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=-1, keepdims=True)
    return probs[np.arange(batch.size), :, batch.answers]


def pseudo_labels_batch(model, encoded, batch):
    """Argmax proposal per sample (ties to the lowest index) + confidence."""
    probs = correct_answer_probs(model, encoded, batch)
    idx = np.argmax(probs, axis=1)
    return idx, probs[np.arange(batch.size), idx]


def generate_pseudo_label(model, sample, proposals=None):
    """Probe all proposals of one sample with the answer head (eval mode)."""
    batch = make_batch([sample])
    if proposals is not None:
        model._proposal_cache[batch.video_len] = proposals
    with ad.no_grad():
        encoded = model.encode(batch, training=False)
    idx, conf = pseudo_labels_batch(model, encoded, batch)
    return PseudoLabel(proposal_index=int(idx[0]), confidence=float(conf[0]))


# -- losses ----------------------------------------------------------------------


def locator_loss(scores, pseudo):
    """Softmax cross-entropy of locator scores against a pseudo label index."""
    scores = np.asarray(scores, dtype=np.float64)
    index = pseudo.proposal_index if isinstance(pseudo, PseudoLabel) else int(pseudo)
    if not 0 <= index < scores.shape[-1]:
        raise ValueError(f"pseudo label index {index} out of range")
    shifted = scores - scores.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[index])


def bundled_loss(loss_ap, loss_ql, weight):
    """Answer loss plus ``weight`` times the locator loss."""
    if weight < 0:
        raise ValueError("loss weight must be nonnegative")
    if isinstance(loss_ap, ad.Tensor) or isinstance(loss_ql, ad.Tensor):
        return ad.add(ad.as_tensor(loss_ap), ad.mul(ad.as_tensor(loss_ql), float(weight)))
    return float(loss_ap) + float(weight) * float(loss_ql)


# -- optimizer ---------------------------------------------------------------------


class Adam:
    """Adam with per-parameter state; parameters without a gradient are
    skipped entirely, so frozen groups stay bitwise unchanged.

    ``lr_scales`` maps parameter names to per-parameter learning-rate
    multipliers (e.g. to run the representation trunk slower than the heads).
    """

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, lr_scales=None):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.lr_scales = dict(lr_scales or {})
        self.state = {
            name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            for name, p in self.params.items()
        }

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, only=None):
        for name, p in self.params.items():
            if p.grad is None or (only is not None and name not in only):
                continue
            st = self.state[name]
            st["t"] += 1
            st["m"] = self.beta1 * st["m"] + (1 - self.beta1) * p.grad
            st["v"] = self.beta2 * st["v"] + (1 - self.beta2) * p.grad**2
            mhat = st["m"] / (1 - self.beta1 ** st["t"])
            vhat = st["v"] / (1 - self.beta2 ** st["t"])
            lr = self.lr * self.lr_scales.get(name, 1.0)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)


def build_optimizer(model, schedule):
    """Adam over all model parameters with a slow representation trunk."""
    params = dict(model.named_parameters())
    scales = {
        name: schedule.trunk_lr_scale
        for name in params
        if name.startswith("encoder.")
    }
    return Adam(params, schedule.base_lr, lr_scales=scales)


def _check_optimizer(model, optimizer):
    model_names = {name for name, _ in model.named_parameters()}
    if set(optimizer.params) != model_names:
        raise ConfigurationError(
            "optimizer state does not cover the model's parameter groups; "
            f"missing {sorted(model_names - set(optimizer.params))[:3]}, "
            f"unexpected {sorted(set(optimizer.params) - model_names)[:3]}"
        )


# -- batching ------------------------------------------------------------------------


def make_batches(samples, batch_size, rng=None):
    """Group samples into shape-uniform batches; shuffled when rng is given."""
    order = rng.permutation(len(samples)) if rng is not None else range(len(samples))
    buckets = {}
    batches = []
    for i in order:
        s = samples[i]
        key = (s.video.tokens.shape, s.question.tokens.shape, s.n_candidates)
        buckets.setdefault(key, []).append(s)
        if len(buckets[key]) == batch_size:
            batches.append(make_batch(buckets.pop(key)))
    for key in sorted(buckets, key=str):
        batches.append(make_batch(buckets[key]))
    return batches


# -- epoch bodies ----------------------------------------------------------------------


def _set_trainable(model, group_name):
    """requires_grad on for one group (or all when group_name is None)."""
    for gname, params in model.parameter_groups().items():
        flag = group_name is None or gname == group_name
        for p in params.values():
            p.requires_grad = flag


def _finite_or_raise(value, epoch, batch_index, parts):
    if not np.isfinite(value):
        raise TrainingDiverged(epoch, batch_index, parts)


def da_epoch(model, batches, epoch_index, optimizer, rng=None):
    """One alternating epoch: odd trains everything but the locator group on
    the answer loss, even trains only the locator group on the pseudo-label
    loss.  Returns mean losses and post-epoch group checksums."""
    _check_optimizer(model, optimizer)
    if model.locator is None:
        raise ConfigurationError(
            f"alternating training needs a locator head; variant is {model.variant!r}"
        )
    odd = epoch_index % 2 == 1
    phase = "AP" if odd else "QL"
    groups = model.parameter_groups()
    train_group = "rest" if odd else "ql"
    loss_ap_sum, loss_ql_sum, n = 0.0, 0.0, 0
    try:
        _set_trainable(model, train_group)
        for bi, batch in enumerate(batches):
            optimizer.zero_grad()
            if odd:
                encoded = model.encode(batch, training=True, rng=rng)
                pooled_seg, _ = model.pooled_segment(encoded, batch)
                scores = model.answer_scores(encoded, pooled_seg)
                loss = ad.cross_entropy(scores, batch.answers)
                loss_ap_sum += loss.item()
            else:
                with ad.no_grad():
                    probe = model.encode(batch, training=False)
                    pseudo_idx, _ = pseudo_labels_batch(model, probe, batch)
                    probe_seg, _ = model.pooled_segment(probe, batch)
                    probe_scores = model.answer_scores(probe, probe_seg)
                    loss_ap_sum += ad.cross_entropy(probe_scores, batch.answers).item()
                encoded = model.encode(batch, training=True, rng=rng)
                ql_scores = model.locator_scores(encoded)
                loss = ad.cross_entropy(ql_scores, pseudo_idx)
                loss_ql_sum += loss.item()
            _finite_or_raise(
                loss.item(), epoch_index, bi,
                {"phase": phase, "loss": loss.item()},
            )
            loss.backward()
            optimizer.step(only=set(groups[train_group]))
            n += 1
    finally:
        _set_trainable(model, None)
    stats = {
        "phase": phase,
        "loss_ap": loss_ap_sum / max(n, 1),
        "checksums": model.group_checksums(),
    }
    if not odd:
        stats["loss_ql"] = loss_ql_sum / max(n, 1)
    return stats


def bundled_epoch(model, batches, weight, epoch_index, optimizer, rng=None):
    """One joint epoch on answer_loss + weight * locator_loss."""
    _check_optimizer(model, optimizer)
    if model.locator is None:
        raise ConfigurationError(
            f"bundled training needs a locator head; variant is {model.variant!r}"
        )
    loss_ap_sum, loss_ql_sum, n = 0.0, 0.0, 0
    for bi, batch in enumerate(batches):
        optimizer.zero_grad()
        encoded = model.encode(batch, training=True, rng=rng)
        ql_scores = model.locator_scores(encoded)
        pooled_seg, _ = model.pooled_segment(encoded, batch, ql_scores)
        ap_scores = model.answer_scores(encoded, pooled_seg)
        loss_ap = ad.cross_entropy(ap_scores, batch.answers)
        with ad.no_grad():
            probe = model.encode(batch, training=False)
            pseudo_idx, _ = pseudo_labels_batch(model, probe, batch)
        loss_ql = ad.cross_entropy(ql_scores, pseudo_idx)
        loss = bundled_loss(loss_ap, loss_ql, weight)
        loss_ap_sum += loss_ap.item()
        loss_ql_sum += loss_ql.item()
        _finite_or_raise(
            loss.item(), epoch_index, bi,
            {"loss_ap": loss_ap.item(), "loss_ql": loss_ql.item(), "lambda": weight},
        )
        loss.backward()
        optimizer.step()
        n += 1
    return {
        "phase": "joint",
        "loss_ap": loss_ap_sum / max(n, 1),
        "loss_ql": loss_ql_sum / max(n, 1),
        "checksums": model.group_checksums(),
    }


def answer_only_epoch(model, batches, epoch_index, optimizer, rng=None):
    """One epoch on the answer loss alone (ablation variants)."""
    _check_optimizer(model, optimizer)
    loss_ap_sum, n = 0.0, 0
    for bi, batch in enumerate(batches):
        optimizer.zero_grad()
        encoded = model.encode(batch, training=True, rng=rng)
        pooled_seg, _ = model.pooled_segment(encoded, batch)
        scores = model.answer_scores(encoded, pooled_seg)
        loss = ad.cross_entropy(scores, batch.answers)
        loss_ap_sum += loss.item()
        _finite_or_raise(loss.item(), epoch_index, bi, {"loss_ap": loss.item()})
        loss.backward()
        optimizer.step()
        n += 1
    return {
        "phase": "AP",
        "loss_ap": loss_ap_sum / max(n, 1),
        "checksums": model.group_checksums(),
    }


# -- evaluation ----------------------------------------------------------------------


def evaluate(model, samples, batch_size=64):
    """Answer accuracy plus locator metrics when ground truth is available."""
    if not samples:
        raise ValueError("cannot evaluate on an empty sample list")
    correct = 0
    ious = []
    loc_hits = 0
    records = []
    for batch in make_batches(samples, batch_size):
        preds = model.predict_batch(batch)
        for i, pred in enumerate(preds):
            truth = int(batch.answers[i])
            ok = pred.answer.predicted == truth
            correct += ok
            rec = {
                "sample_id": batch.sample_ids[i],
                "predicted": pred.answer.predicted,
                "answer_index": truth,
                "correct": bool(ok),
            }
            gt = batch.gt_segments[i]
            if pred.segment is not None:
                rec["selected_segment"] = [pred.segment.st, pred.segment.ed]
            if gt is not None and pred.segment is not None:
                iou = temporal_iou(pred.segment, gt)
                ious.append(iou)
                loc_hits += iou >= 0.5
                rec["gt_segment"] = [gt.st, gt.ed]
                rec["iou"] = iou
            records.append(rec)
    n = len(samples)
    out = {"n": n, "accuracy": correct / n, "records": records}
    if ious:
        out["mean_iou"] = float(np.mean(ious))
        out["loc_at_half"] = loc_hits / len(ious)
    return out


# -- training loop ----------------------------------------------------------------------


@dataclass
class TrainResult:
    best_state: dict
    history: list
    summary: dict


def _validate_dataset(model, samples):
    cfg = model.cfg
    for s in samples[:64]:
        if s.answer_index >= cfg.n_answers:
            raise ConfigurationError(
                f"sample {s.sample_id}: answer_index {s.answer_index} "
                f"exceeds configured n_answers {cfg.n_answers}"
            )
        if cfg.answer_mode == "multiple_choice":
            if s.n_candidates != cfg.n_answers:
                raise ConfigurationError(
                    f"sample {s.sample_id}: {s.n_candidates} candidates, "
                    f"model expects {cfg.n_answers}"
                )
        if s.video.dim != cfg.d_video or s.question.dim != cfg.d_question:
            raise ConfigurationError(
                f"sample {s.sample_id}: feature dims ({s.video.dim}, {s.question.dim}) "
                f"do not match model ({cfg.d_video}, {cfg.d_question})"
            )


def train_loop(model, train_samples, val_samples, schedule, log=None):
    """Run the scheduled regime with plateau decay and early stopping.

    Returns the best checkpoint state (by validation accuracy), the per-epoch
    history, and a summary whose ``convergence_epoch`` is the first epoch that
    reached the best validation accuracy.
    """
    _validate_dataset(model, train_samples)
    _validate_dataset(model, val_samples)
    rng = np.random.default_rng(schedule.seed)
    optimizer = build_optimizer(model, schedule)
    uses_locator_loss = model.variant == "full"
    lr = schedule.base_lr
    history = []
    best = {"accuracy": -np.inf, "epoch": 0, "state": model.state_dict(), "val": None}
    since_best = 0
    for epoch in range(1, schedule.max_epochs + 1):
        batches = make_batches(train_samples, schedule.batch_size, rng)
        if uses_locator_loss and schedule.mode == "DA":
            stats = da_epoch(model, batches, epoch, optimizer, rng)
        elif uses_locator_loss and schedule.mode == "bundled":
            stats = bundled_epoch(
                model, batches, schedule.loss_lambda, epoch, optimizer, rng
            )
        else:
            stats = answer_only_epoch(model, batches, epoch, optimizer, rng)
        val = evaluate(model, val_samples, schedule.batch_size)
        if val["accuracy"] > best["accuracy"]:
            best = {
                "accuracy": val["accuracy"],
                "epoch": epoch,
                "state": model.state_dict(),
                "val": {k: v for k, v in val.items() if k != "records"},
            }
            since_best = 0
        else:
            since_best += 1
            if since_best % schedule.plateau_patience == 0:
                lr *= schedule.lr_decay_factor
                optimizer.lr = lr
        record = {
            "epoch": epoch,
            "phase": stats["phase"],
            "loss_ap": stats.get("loss_ap"),
            "loss_ql": stats.get("loss_ql"),
            "val_accuracy": val["accuracy"],
            "val_mean_iou": val.get("mean_iou"),
            "val_loc_at_half": val.get("loc_at_half"),
            "lr": lr,
            "epochs_since_best": since_best,
            "ql_checksum": stats["checksums"]["ql"],
            "rest_checksum": stats["checksums"]["rest"],
        }
        history.append(record)
        if log is not None:
            log(record)
        if since_best >= schedule.convergence_patience:
            break
    summary = {
        "variant": model.variant,
        "mode": schedule.mode if uses_locator_loss else "answer_only",
        "lambda": schedule.loss_lambda if schedule.mode == "bundled" else None,
        "seed": schedule.seed,
        "epochs_run": len(history),
        "best_val_accuracy": best["accuracy"] if best["val"] else None,
        "convergence_epoch": best["epoch"],
        "best_val": best["val"],
        "final_lr": lr,
    }
    return TrainResult(best_state=best["state"], history=history, summary=summary)


# -- checkpoints -------------------------------------------------------------------------


def save_checkpoint(path, model, state=None, schedule=None, rng_state=None, summary=None):
    """Versioned container: parameters + configs + RNG state in one npz."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "variant": model.variant,
        "model_config": model.cfg.to_dict(),
        "train_schedule": schedule.to_dict() if schedule is not None else None,
        "rng_state": rng_state,
        "summary": summary,
    }
    state = state if state is not None else model.state_dict()
    arrays = {f"param/{name}": arr for name, arr in state.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
            **arrays,
        )
    return path


def load_checkpoint(path):
    """Rebuild the model (and its meta dict) from a checkpoint file."""
    with np.load(path) as data:
        if "__meta__" not in data:
            raise ValueError(f"{path} is not a model checkpoint (no metadata)")
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {meta.get('format_version')}"
            )
        state = {
            key[len("param/"):]: data[key] for key in data.files if key.startswith("param/")
        }
    cfg = ModelConfig.from_dict(meta["model_config"])
    model = SegQAModel(cfg, np.random.default_rng(0), variant=meta["variant"])
    model.load_state_dict(state)
    return model, meta
