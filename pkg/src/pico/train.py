"""Training loop: decoupled-weight-decay Adam with cosine learning-rate decay.

Trains on defect-free observations only. When the invariance weight is
nonzero, every batch item gets a companion render of the same scene at a
freshly drawn pose and condition, and the mean squared distance between the
two bottleneck outputs joins the objective. After training, a calibration
pass over the training split records the reconstruction-error and image-score
distributions and derives the decision thresholds stored in the checkpoint.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .model import ModelConfig, PipelineModel, TrainConfig, dir_loss, reconstruction_loss
from .metrics import anomaly_map
from .metrics import smooth as smooth_map
from .policy import calibrate_threshold, uncertainty
from .rng import substream
from .simulator import (
    BACKGROUND,
    Dataset,
    INTERIOR_ALBEDO,
    K_POSES,
    Pose,
    TRAIN_GLARE_RATE,
    albedo_prior,
    draw_condition,
    draw_pair_condition,
    render,
)
from .tensor import Tensor, no_grad

LOG_FIELDS = ["epoch", "lr", "recon", "dir", "total", "val_recon"]


class TrainingDiverged(RuntimeError):
    pass


class AdamW:
    """Adam with decoupled weight decay; one shared step counter."""

    def __init__(self, params, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (lr * (update + self.weight_decay * p.data)).astype(p.data.dtype)


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """lr_end + (lr_start - lr_end) * (1 + cos(pi * epoch / epochs)) / 2."""
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


def _first_nonfinite(named) -> str | None:
    for name, arr in named:
        if not np.all(np.isfinite(arr)):
            return name
    return None


def corrupt_views(images: np.ndarray, rng: np.random.Generator, rate: float = 0.8) -> np.ndarray:
    """Paint random dark spots onto copies of the images (synthetic-anomaly input).

    Training reconstructs the clean view from the corrupted one, so the
    decoder learns to repair local surprises from context instead of copying
    them through; true defects then surface as reconstruction error. Spots
    only darken: surface flaws on this bench are dark, while bright blobs
    are glare the model must reproduce, not remove.
    """
    size = images.shape[-1]
    out = images.copy()
    c = (size - 1) / 2.0
    ys, xs = np.mgrid[0:size, 0:size]
    for b in range(out.shape[0]):
        if rng.uniform() >= rate:
            continue
        for _ in range(int(rng.integers(1, 4))):
            ang = rng.uniform(0.0, 2.0 * math.pi)
            rad = math.sqrt(rng.uniform()) * 11.0
            cx, cy = c + rad * math.cos(ang), c + rad * math.sin(ang)
            r = rng.uniform(1.0, 3.5)
            amp = rng.uniform(0.05, 0.45)
            disk = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
            out[b] = np.where(disk, np.clip(out[b] - amp, 0.0, 1.0), out[b])
    return out


@dataclass
class TrainResult:
    best_path: Path
    final_path: Path
    log_path: Path
    log_rows: list[dict]
    tau: float
    score_tau: float
    best_val: float


def pretrain_photometric(model, scenes_poses, train_cfg: TrainConfig, pair_rng, batch_rng, quiet=True) -> list[dict]:
    """Self-supervised fit of the illumination estimator; no ground-truth fields.

    Three signals, all observable on a real rig: (1) ratio consistency, the
    normalized reflectance of the same scene/pose must agree across two
    illumination draws; (2) a background anchor, the mat around the object
    has known albedo, so its pixels reveal the field directly; (3) spatial
    smoothness of the field. Together they pin the field up to noise.
    """
    photo = model.photometric
    if photo is None or train_cfg.photo_warmup_epochs <= 0:
        return []
    size = model.cfg.image_size
    inv_albedo = 1.0 / albedo_prior(size)[None]
    # The mat albedo is a rig constant; the interior prior is only the mean
    # object base level, so its anchor gets less weight.
    conf = np.where(inv_albedo > 1.0 / (0.5 * (BACKGROUND + INTERIOR_ALBEDO)), 1.0, 0.35).astype(np.float32)
    conf_t = Tensor(conf / conf.mean())

    params = photo.params()
    opt = AdamW(params.values(), weight_decay=0.0)
    eps = photo.eps
    rows = []
    n_epochs = train_cfg.photo_warmup_epochs
    for epoch in range(n_epochs):
        lr = train_cfg.photo_lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * epoch / n_epochs)))
        perm = batch_rng.permutation(len(scenes_poses))
        ep = {"consistency": 0.0, "anchor": 0.0, "smooth": 0.0}
        n_batches = 0
        for start in range(0, len(perm), train_cfg.batch):
            sel = perm[start : start + train_cfg.batch]
            pose = [Pose(int(pair_rng.integers(0, K_POSES))) for _ in sel]
            # View pairs are glare-free redraws, so the estimator learns the
            # smooth multiplicative light and weak glare passes into the
            # normalized image as a predictable bump. A fraction of first
            # views add saturating glare: clipped pixels push the field to
            # its ceiling (the only consistent response) and are masked out
            # of the consistency term since they carry no reflectance.
            conds = []
            for j in range(len(sel)):
                c1 = draw_pair_condition(pair_rng)
                if pair_rng.uniform() < 0.3:
                    c1 = dataclasses.replace(
                        c1,
                        glare_enabled=True,
                        glare_intensity=pair_rng.uniform(0.8, 1.3),
                        glare_sigma=pair_rng.uniform(3.5, 5.0),
                        glare_dist=pair_rng.uniform(4.0, 9.0),
                    )
                conds.append(c1)
            v1 = np.stack([render(scenes_poses[i][0], pose[j], conds[j]).image for j, i in enumerate(sel)])
            v2 = np.stack([render(scenes_poses[i][0], pose[j], draw_pair_condition(pair_rng)).image for j, i in enumerate(sel)])
            i1, i2 = Tensor(v1), Tensor(v2)
            f1 = photo.estimator.field_batched(i1)
            f2 = photo.estimator.field_batched(i2)
            unsat = Tensor((v1 < 0.98).astype(np.float32))
            cons = ((i1.div(f1, eps) - i2.div(f2, eps)) * unsat).square().mean()
            anchor = Tensor(np.float32(0.0))
            for img, f in ((i1, f1), (i2, f2)):
                target = np.stack([smooth_map(im) for im in img.data]).astype(np.float32) * inv_albedo
                anchor = anchor + 0.5 * (((f - Tensor(target)).square()) * conf_t).mean()
            # Curvature penalty: zero on linear ramps, so it suppresses
            # texture leakage without biasing the field toward flatness.
            smooth = Tensor(np.float32(0.0))
            for f in (f1, f2):
                d2x = f.slice_axis(2, 2, size) - 2.0 * f.slice_axis(2, 1, size - 1) + f.slice_axis(2, 0, size - 2)
                d2y = f.slice_axis(1, 2, size) - 2.0 * f.slice_axis(1, 1, size - 1) + f.slice_axis(1, 0, size - 2)
                smooth = smooth + 0.5 * (d2x.square().mean() + d2y.square().mean())
            loss = cons + anchor + 5.0 * smooth
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            ep["consistency"] += cons.item()
            ep["anchor"] += anchor.item()
            ep["smooth"] += smooth.item()
            n_batches += 1
        rows.append({"epoch": epoch, "lr": lr, **{k: v / n_batches for k, v in ep.items()}})
        if not quiet and (epoch % 10 == 0 or epoch == n_epochs - 1):
            r = rows[-1]
            print(f"  warmup {epoch:3d}  cons {r['consistency']:.5f}  anchor {r['anchor']:.5f}  smooth {r['smooth']:.5f}")
    for p in params.values():
        p.requires_grad = False
    return rows


def _forward_batches(model: PipelineModel, images: np.ndarray, batch: int):
    """Yield (start, x_norm, x_hat) over inference batches, graph-free."""
    with no_grad():
        for start in range(0, len(images), batch):
            chunk = images[start : start + batch]
            x_norm, x_hat, _, _ = model.forward(Tensor(chunk))
            yield start, x_norm.numpy(), x_hat.numpy()


def calibration_stats(model: PipelineModel, images: np.ndarray, batch: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Per-image uncertainty U and smoothed-max image score over `images`."""
    us = np.zeros(len(images))
    scores = np.zeros(len(images))
    for start, xn, xh in _forward_batches(model, images, batch):
        for j in range(xn.shape[0]):
            us[start + j] = uncertainty(xn[j], xh[j])
            scores[start + j] = anomaly_map(xn[j], xh[j]).image_score
    return us, scores


def train_model(
    dataset: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seed: int,
    out_dir,
    quiet: bool = True,
) -> TrainResult:
    train_cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = dataset.split("train")
    if not rows:
        raise ParameterError("training needs a non-empty train split")

    model = PipelineModel.create(model_cfg, seed)
    batch_rng = substream(seed, "batch")
    pair_rng = substream(seed, "sim")
    dp_rng = substream(seed, "droppath")

    order = batch_rng.permutation(len(rows))
    n_val = min(len(rows) - 1, max(1, round(len(rows) * train_cfg.val_fraction))) if len(rows) > 1 else 0
    val_idx, tr_idx = order[:n_val], order[n_val:]

    all_images = np.stack([dataset.image(r["id"]) for r in rows])
    tr_images = all_images[tr_idx]
    val_images = all_images[val_idx] if n_val else None
    tr_scenes_poses = [dataset.scene_and_condition(rows[i])[:2] for i in tr_idx]

    warmup_rows = pretrain_photometric(model, tr_scenes_poses, train_cfg, pair_rng, batch_rng, quiet=quiet)
    if warmup_rows:
        with open(out_dir / "warmup_log.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "lr", "consistency", "anchor", "smooth"])
            writer.writeheader()
            for row in warmup_rows:
                writer.writerow({k: (row[k] if k == "epoch" else f"{row[k]:.10g}") for k in writer.fieldnames})

    params = model.params()
    opt = AdamW([p for p in params.values() if p.requires_grad], weight_decay=train_cfg.weight_decay)

    log_rows: list[dict] = []
    best_val = math.inf
    best_state: dict[str, np.ndarray] | None = None

    for epoch in range(train_cfg.epochs):
        lr = cosine_lr(epoch, train_cfg)
        perm = batch_rng.permutation(len(tr_idx))
        ep = {"recon": 0.0, "dir": 0.0, "total": 0.0}
        n_batches = 0

        for start in range(0, len(perm), train_cfg.batch):
            sel = perm[start : start + train_cfg.batch]
            n = len(sel)

            # Physical augmentation: most main views are fresh re-renders of
            # the training scenes at new poses and conditions, the bench
            # equivalent of re-observing the same part on the table.
            main_views = []
            main_poses = []
            for i in sel:
                if pair_rng.uniform() < 0.75:
                    pose_i = Pose(int(pair_rng.integers(0, K_POSES)))
                    cond_i = draw_condition(pair_rng, hard=False, glare_rate=TRAIN_GLARE_RATE)
                    main_views.append(render(tr_scenes_poses[i][0], pose_i, cond_i).image)
                else:
                    pose_i = tr_scenes_poses[i][1]
                    main_views.append(tr_images[i])
                main_poses.append(pose_i)
            main = np.stack(main_views)
            main_input = corrupt_views(main, pair_rng)
            with no_grad():
                if model.photometric is not None:
                    target, _ = model.photometric.forward_batched(Tensor(main))
                    target = Tensor(target.data)
                else:
                    target = Tensor(main)

            if train_cfg.alpha_dir > 0:
                # Main views and their positive-pair views share one pass
                # through photometric/encoder/bottleneck; only the main half
                # is decoded and reconstructed. Half the pairs keep the pose
                # and vary illumination only, isolating the photometric
                # nuisance; the other half vary the pose as well.
                pair_imgs = [
                    render(
                        tr_scenes_poses[i][0],
                        main_poses[j] if pair_rng.uniform() < 0.5 else Pose(int(pair_rng.integers(0, K_POSES))),
                        draw_pair_condition(pair_rng),
                    ).image
                    for j, i in enumerate(sel)
                ]
                joint = Tensor(np.concatenate([main_input, np.stack(pair_imgs)]))
                x_norm_j, z_in, z_joint = model.forward_to_latent(joint, training=True, droppath_rng=dp_rng)
                z_out = z_joint.slice0(0, n)
                x_norm = x_norm_j.slice0(0, n)
                x_hat = model.decoder.forward(z_out, target.shape[1], target.shape[2])
                recon = reconstruction_loss(target, x_hat)
                dir_term = dir_loss(z_out, z_joint.slice0(n, 2 * n))
                total = recon + train_cfg.alpha_dir * dir_term
            else:
                x_norm, x_hat, z_in, z_out = model.forward(Tensor(main_input), training=True, droppath_rng=dp_rng)
                recon = reconstruction_loss(target, x_hat)
                dir_term = None
                total = recon

            if not math.isfinite(total.item()):
                named = [("x_norm", x_norm.data), ("x_hat", x_hat.data), ("z_in", z_in.data), ("z_out", z_out.data)]
                culprit = _first_nonfinite(named) or "loss"
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}; first non-finite tensor: {culprit}")

            opt.zero_grad()
            total.backward()
            opt.step(lr)

            ep["recon"] += recon.item()
            ep["dir"] += dir_term.item() if dir_term is not None else 0.0
            ep["total"] += total.item()
            n_batches += 1

        if val_images is not None:
            se_sum = 0.0
            for _, xn, xh in _forward_batches(model, val_images, train_cfg.batch):
                se_sum += float(np.sum((xn - xh) ** 2))
            val_recon = se_sum / val_images.size
        else:
            val_recon = ep["recon"] / n_batches

        row = {
            "epoch": epoch,
            "lr": lr,
            "recon": ep["recon"] / n_batches,
            "dir": ep["dir"] / n_batches,
            "total": ep["total"] / n_batches,
            "val_recon": val_recon,
        }
        log_rows.append(row)
        if not quiet and (epoch % 20 == 0 or epoch == train_cfg.epochs - 1):
            print(f"  epoch {epoch:4d}  lr {lr:.2e}  recon {row['recon']:.5f}  dir {row['dir']:.5f}  val {val_recon:.5f}")

        if val_recon < best_val:
            best_val = val_recon
            best_state = {k: v.data.copy() for k, v in params.items()}

    log_path = out_dir / "training_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in log_rows:
            writer.writerow({k: (row[k] if k == "epoch" else f"{row[k]:.10g}") for k in LOG_FIELDS})

    def _trailer(us, scores):
        return {
            "epochs": train_cfg.epochs,
            "batch": train_cfg.batch,
            "lr_start": train_cfg.lr_start,
            "lr_end": train_cfg.lr_end,
            "weight_decay": train_cfg.weight_decay,
            "alpha_dir": train_cfg.alpha_dir,
            "seed": seed,
            "calib_percentile": 0.95,
            "calib_margin": 1.5,
            "calib_count": len(us),
            "u_mean": f"{float(np.mean(us)):.8g}",
            "tau": f"{calibrate_threshold(us):.8g}",
            "score_tau": f"{calibrate_threshold(scores):.8g}",
        }

    final_path = out_dir / "checkpoint_final.pico"
    us_f, scores_f = calibration_stats(model, all_images, train_cfg.batch)
    model.save(final_path, _trailer(us_f, scores_f))

    if best_state is not None:
        for k, p in params.items():
            p.data[...] = best_state[k]
    best_path = out_dir / "checkpoint_best.pico"
    us_b, scores_b = calibration_stats(model, all_images, train_cfg.batch)
    best_trailer = _trailer(us_b, scores_b)
    model.save(best_path, best_trailer)

    return TrainResult(
        best_path=best_path,
        final_path=final_path,
        log_path=log_path,
        log_rows=log_rows,
        tau=float(best_trailer["tau"]),
        score_tau=float(best_trailer["score_tau"]),
        best_val=best_val,
    )
