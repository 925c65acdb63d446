"""Training loop: AdamW with a cosine schedule over twin batches.

One optimisation step consumes one source image: shared mirror flips, a
random crop, then two independently augmented twins.  Both twins run through
the network; the combined loss couples their Dice terms with the
cross-correlation redundancy penalty on the projected embeddings.

Everything is driven by a single seeded generator consumed in a fixed
order, so a (seed, config, dataset) triple reproduces checkpoints and
metrics logs bit for bit.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import errors, losses, network
from .augment import AugmentConfig, make_twin_batch, mirror_flip_shared
from .ensemble import binarize
from .metrics import dice_score
from .volume import LabelMask, Volume, labels_to_regions, normalize_nonzero, random_crop, read_rvol

METRICS_HEADER = "step,epoch,lr,dice,invariance,redundancy,bt,total"
EPOCH_ROW_TAG = "epoch"  # epoch rows: epoch,<n>,val_dice_et,val_dice_tc,val_dice_wt


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 20
    crop_size: tuple[int, int, int] = (24, 24, 24)
    lambda_: float = 0.005
    bt_weight: float = 1.0
    seed: int = 0
    fold_count: int = 5
    fold_index: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    center_embeddings: bool = False
    network: network.SegResNetConfig = field(default_factory=network.SegResNetConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> None:
        if self.lr0 <= 0:
            raise errors.InvalidConfig(f"lr0 must be > 0, got {self.lr0}")
        if self.epochs < 1:
            raise errors.InvalidConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.fold_count < 1:
            raise errors.InvalidConfig("fold_count must be >= 1")
        if not 0 <= self.fold_index < self.fold_count:
            raise errors.InvalidConfig(
                f"fold_index {self.fold_index} outside [0, {self.fold_count})"
            )
        if len(self.crop_size) != 3 or min(self.crop_size) < 1:
            raise errors.InvalidConfig(f"bad crop_size {self.crop_size}")
        self.network.validate()
        self.augment.validate()
        m = 2 ** self.network.depth
        if any(c % m for c in self.crop_size):
            raise errors.InvalidConfig(
                f"crop_size {self.crop_size} must be divisible by 2^depth = {m}"
            )
        half_cell = self.network.projection.pool_factor / 2
        if self.augment.spatial_shift_voxels > half_cell:
            raise errors.InvalidConfig(
                f"spatial_shift_voxels {self.augment.spatial_shift_voxels} exceeds half a "
                f"pooling cell ({half_cell}); twin regions would stop overlapping"
            )

    # -- JSON config file (field names, with lambda_ exposed as "lambda") -----

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        if "lambda" in raw:
            raw["lambda_"] = raw.pop("lambda")
        known = set(cls.__dataclass_fields__)
        unknown = [k for k in raw if k not in known]
        if unknown:
            raise errors.InvalidConfig(f"unknown config key(s): {', '.join(sorted(unknown))}")
        if "network" in raw and isinstance(raw["network"], dict):
            raw["network"] = _network_from_dict(raw["network"])
        if "augment" in raw and isinstance(raw["augment"], dict):
            raw["augment"] = _dataclass_from_dict(AugmentConfig, raw["augment"], "augment")
        for key in ("crop_size",):
            if key in raw and isinstance(raw[key], list):
                raw[key] = tuple(raw[key])
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as err:
            raise errors.IoError(f"cannot read config {path}: {err}") from err
        except json.JSONDecodeError as err:
            raise errors.InvalidConfig(f"config {path} is not valid JSON: {err}") from err
        return cls.from_dict(raw)


def _dataclass_from_dict(cls, raw: dict, where: str):
    known = set(cls.__dataclass_fields__)
    unknown = [k for k in raw if k not in known]
    if unknown:
        raise errors.InvalidConfig(f"unknown {where} config key(s): {', '.join(sorted(unknown))}")
    fixed = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    return cls(**fixed)


def _network_from_dict(raw: dict) -> network.SegResNetConfig:
    raw = dict(raw)
    if "projection" in raw and isinstance(raw["projection"], dict):
        raw["projection"] = _dataclass_from_dict(
            network.ProjectionConfig, raw["projection"], "network.projection"
        )
    return _dataclass_from_dict(network.SegResNetConfig, raw, "network")


class OptimizerState:
    """AdamW first/second moments plus the shared step counter."""

    def __init__(self, params: dict[str, ad.Tensor]):
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.step = 0


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * 0.5 * (1 + cos(pi * step / total_steps))."""
    if not 0 <= step <= total_steps:
        raise errors.InvalidConfig(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def adamw_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update, in place.

    theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta
    """
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise errors.ShapeMismatch(f"missing gradient for {name}")
        if g.shape != p.data.shape:
            raise errors.ShapeMismatch(
                f"gradient shape {g.shape} != param shape {p.data.shape} for {name}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype, copy=False)


def kfold_split(case_ids: list[str], k: int, seed: int) -> list[tuple[list[str], list[str]]]:
    """Deterministic k-fold partition; fold sizes differ by at most one."""
    if k < 2:
        raise errors.TooFewCases(f"k-fold needs k >= 2, got {k}")
    if len(case_ids) < k:
        raise errors.TooFewCases(f"{len(case_ids)} case(s) cannot fill {k} folds")
    perm = list(np.random.default_rng(seed).permutation(case_ids))
    folds = [perm[i::k] for i in range(k)]
    out = []
    for i in range(k):
        val = folds[i]
        train = [cid for j, f in enumerate(folds) if j != i for cid in f]
        out.append((train, val))
    return out


def read_manifest(path) -> list[tuple[str, Path, Path]]:
    """Parse a dataset manifest; paths resolve relative to the manifest."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as err:
        raise errors.IoError(f"cannot read manifest {path}: {err}") from err
    out = []
    for row in rows:
        if not row.get("case_id") or not row.get("image_path") or not row.get("label_path"):
            raise errors.IoError(f"manifest {path} must have case_id,image_path,label_path")
        out.append((
            row["case_id"],
            path.parent / row["image_path"],
            path.parent / row["label_path"],
        ))
    return out


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    best_epoch: int
    best_val_dice: float
    val_history: list[tuple[float, float, float]]  # (et, tc, wt) per epoch
    steps: int


def _fmt(x: float) -> str:
    return repr(float(x))


def _load_cases(entries):
    cases = {}
    for case_id, img_path, lab_path in entries:
        img = read_rvol(img_path)
        lab = read_rvol(lab_path)
        if not isinstance(img, Volume) or not isinstance(lab, LabelMask):
            raise errors.IoError(f"case {case_id}: expected float32 image and uint8 mask")
        cases[case_id] = (normalize_nonzero(img), lab)
    return cases


def _validation_dice(model, cases, val_ids) -> tuple[float, float, float]:
    """Mean Dice per class (ET, TC, WT) over the held-out cases."""
    per_class = np.zeros(3)
    for cid in val_ids:
        vol, lab = cases[cid]
        pred = binarize(network.predict(model, vol))
        truth = labels_to_regions(lab)
        # channel order is (WT, TC, ET); report as (ET, TC, WT)
        for out_idx, ch in enumerate((2, 1, 0)):
            per_class[out_idx] += dice_score(pred.data[ch], truth.data[ch])
    per_class /= len(val_ids)
    return tuple(float(x) for x in per_class)


def _train_step(model, cfg: TrainConfig, vol, lab, rng):
    vol, lab = mirror_flip_shared(vol, lab, rng, cfg.augment.flip_prob)
    vol, lab = random_crop(vol, lab, cfg.crop_size, rng)
    twin_a, twin_b, mask_a, mask_b = make_twin_batch(vol, lab, cfg.augment, rng)
    xa = ad.constant(twin_a.data)
    xb = ad.constant(twin_b.data)
    ta = ad.constant(labels_to_regions(mask_a).data.astype(np.float32))
    tb = ad.constant(labels_to_regions(mask_b).data.astype(np.float32))
    feats_a = network.forward_features(model, xa)
    feats_b = network.forward_features(model, xb)
    seg_a = network.segmentation_head(model, feats_a)
    seg_b = network.segmentation_head(model, feats_b)
    za = network.forward_projection(model, feats_a)
    zb = network.forward_projection(model, feats_b)
    return losses.total_loss(seg_a, seg_b, ta, tb, za, zb,
                             lam=cfg.lambda_, bt_weight=cfg.bt_weight,
                             center_embeddings=cfg.center_embeddings)


def train(cfg: TrainConfig, manifest_path, out_dir, log=None) -> TrainResult:
    """Run the full loop; keeps the checkpoint with the best validation Dice.

    With fold_count == 1 no case is held out and validation runs on the
    training set itself (small-smoke mode); otherwise the fold_index fold of
    a deterministic fold_count-way split is held out.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = read_manifest(manifest_path)
    ids = [e[0] for e in entries]
    if cfg.fold_count == 1:
        train_ids, val_ids = list(ids), list(ids)
    else:
        train_ids, val_ids = kfold_split(ids, cfg.fold_count, cfg.seed)[cfg.fold_index]
    cases = _load_cases(entries)

    rng = np.random.default_rng(cfg.seed)
    model = network.build(cfg.network, rng)
    opt = OptimizerState(model.params)
    total_steps = cfg.epochs * len(train_ids)

    ckpt_path = out / "checkpoint.rckp"
    metrics_path = out / "metrics.csv"
    best = (-1.0, 0)  # (mean val dice, epoch)
    history: list[tuple[float, float, float]] = []

    with open(metrics_path, "w", newline="") as mf:
        mf.write(METRICS_HEADER + "\n")
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train_ids))
            for idx in order:
                vol, lab = cases[train_ids[int(idx)]]
                parts = _train_step(model, cfg, vol, lab, rng)
                vals = parts.values()
                if not math.isfinite(vals["total"]):
                    dump = {"epoch": epoch, "step": opt.step + 1,
                            "case_id": train_ids[int(idx)],
                            "components": {k: str(v) for k, v in vals.items()}}
                    (out / "diagnostic_dump.json").write_text(json.dumps(dump, indent=2))
                    raise errors.NonFiniteLoss(
                        f"non-finite loss at epoch {epoch} step {opt.step + 1}; "
                        f"state dumped to {out / 'diagnostic_dump.json'}"
                    )
                for p in model.params.values():
                    p.grad = None
                ad.backward(parts.total)
                # parameters outside the active loss (projection branch when
                # bt_weight == 0) have exactly-zero gradients
                grads = {
                    k: p.grad if p.grad is not None else np.zeros_like(p.data)
                    for k, p in model.params.items()
                }
                lr = cosine_lr(opt.step, total_steps, cfg.lr0)
                adamw_step(model.params, grads, opt, lr, cfg)
                mf.write(f"{opt.step},{epoch},{_fmt(lr)},{_fmt(vals['dice'])},"
                         f"{_fmt(vals['invariance'])},{_fmt(vals['redundancy'])},"
                         f"{_fmt(vals['bt'])},{_fmt(vals['total'])}\n")
            et, tc, wt = _validation_dice(model, cases, val_ids)
            history.append((et, tc, wt))
            mf.write(f"{EPOCH_ROW_TAG},{epoch},{_fmt(et)},{_fmt(tc)},{_fmt(wt)}\n")
            mf.flush()
            mean_dice = (et + tc + wt) / 3.0
            if mean_dice > best[0]:
                best = (mean_dice, epoch)
                network.save_checkpoint(ckpt_path, model.arrays(), opt)
            if log:
                log(f"epoch {epoch}/{cfg.epochs}: val dice et={et:.4f} tc={tc:.4f} "
                    f"wt={wt:.4f} (best {best[0]:.4f} @ {best[1]})")

    return TrainResult(
        checkpoint_path=ckpt_path, metrics_path=metrics_path,
        best_epoch=best[1], best_val_dice=best[0],
        val_history=history, steps=opt.step,
    )


def held_out_invariance(model, cases, case_ids, cfg: TrainConfig, seed: int = 0) -> float:
    """Mean invariance term sum((1 - C_ii)^2) over twinned held-out cases.

    Measures how similar the two twins' embeddings are per dimension; used
    to compare redundancy-reduction against Dice-only training.
    """
    rng = np.random.default_rng(seed)
    totals = []
    for cid in case_ids:
        vol, lab = cases[cid]
        vol_c, lab_c = random_crop(vol, lab, cfg.crop_size, rng)
        twin_a, twin_b, _, _ = make_twin_batch(vol_c, lab_c, cfg.augment, rng)
        with ad.no_grad():
            za = network.forward_projection(
                model, network.forward_features(model, ad.constant(twin_a.data)))
            zb = network.forward_projection(
                model, network.forward_features(model, ad.constant(twin_b.data)))
            c = losses.cross_correlation(za, zb, cfg.center_embeddings)
            inv, _ = losses._bt_terms(c)
        totals.append(inv.item())
    return float(np.mean(totals))
