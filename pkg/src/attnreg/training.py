"""Optimization loop, ablation orchestration, and one-shot registration.

Training samples synthetic pairs deterministically from the run seed, takes
Adam steps on the weighted objective, logs every loss term per step, writes
checkpoints, and evaluates held-out pairs at the initial, affine, and final
stages.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from attnreg.checkpoint import load_checkpoint, save_checkpoint
from attnreg.fieldops import VectorField, save_field, warp_tensor
from attnreg.losses import LossWeights, dice_loss_tensor, lncc_tensor, smoothness_tensor, total_loss
from attnreg.metrics import STAGES, EvalReport, evaluate_stage
from attnreg.networks import AblationFlags, NetworkConfig, RegistrationNetwork, full_forward
from attnreg.synth import SynthConfig, SyntheticPair, generate_pair, pair_seed
from attnreg.volume import load_mask, load_volume, save_volume

# Index offset separating held-out evaluation pairs from training pairs.
EVAL_SEED_BASE = 2**32
# Stream tag for the batch sampler so it never collides with pair seeds.
SAMPLER_STREAM = 0x5A


@dataclass(frozen=True)
class TrainConfig:
    """Everything needed to reproduce a training run."""

    dims: tuple[int, int, int] = (32, 32, 16)
    batch_size: int = 8
    learning_rate: float = 3e-4  # desk-scale runs are short; 1e-5 is the full-scale setting
    max_steps: int = 2000
    seed: int = 7
    train_pairs: int = 200
    eval_pairs: int = 20
    use_masks: bool = True
    deterministic: bool = True
    checkpoint_every: int = 0  # 0 writes only the final checkpoint
    weights: LossWeights = field(default_factory=LossWeights)
    flags: AblationFlags = field(default_factory=AblationFlags)
    network: NetworkConfig = field(default_factory=NetworkConfig.desk)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self) -> None:
        errors = []
        if len(self.dims) != 3 or any(int(n) < 8 for n in self.dims):
            errors.append(f"dims must be 3 axes of >= 8 voxels, got {self.dims}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            errors.append(f"learning_rate must be positive, got {self.learning_rate}")
        if self.max_steps < 0:
            errors.append(f"max_steps must be >= 0, got {self.max_steps}")
        if self.train_pairs < 1:
            errors.append(f"train_pairs must be >= 1, got {self.train_pairs}")
        if self.eval_pairs < 1:
            errors.append(f"eval_pairs must be >= 1, got {self.eval_pairs}")
        if self.checkpoint_every < 0:
            errors.append(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        try:
            self.weights.validate()
        except ValueError as e:
            errors.append(str(e))
        try:
            self.network.validate()
        except ValueError as e:
            errors.append(str(e))
        if errors:
            raise ValueError("; ".join(errors))


@dataclass
class RunManifest:
    """Artifacts and aggregate results of one training run."""

    label: str
    config: dict
    loss_log: str
    eval_log: str
    checkpoints: list[str]
    final_checkpoint: str
    eval: dict[str, dict[str, float]]


def _apply_determinism(config: TrainConfig) -> None:
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(config.seed)


def _train_batch_tensors(pairs: list[SyntheticPair]):
    def stack(arrays):
        return torch.from_numpy(np.stack(arrays)).unsqueeze(1)

    return (
        stack([p.fixed.data for p in pairs]),
        stack([p.moving.data for p in pairs]),
        stack([p.fixed_mask.data for p in pairs]),
        stack([p.moving_mask.data for p in pairs]),
    )


def _evaluate_pairs(
    model: RegistrationNetwork,
    pairs: list[SyntheticPair],
    stages: tuple[str, ...] = STAGES,
) -> tuple[list[tuple[int, EvalReport]], dict[str, dict[str, float]]]:
    rows: list[tuple[int, EvalReport]] = []
    for i, pair in enumerate(pairs):
        outs = full_forward(model, pair.fixed, pair.moving)
        chains = {"initial": [], "affine": [outs.u_affine], "final": [outs.u_affine, outs.phi]}
        for stage in stages:
            rows.append((i, evaluate_stage(pair.fixed_mask, pair.moving_mask, chains[stage], stage)))
    aggregates: dict[str, dict[str, float]] = {}
    for stage in stages:
        reports = [r for _, r in rows if r.stage == stage]
        agg = {
            "dice": float(np.mean([r.dice for r in reports])),
            "prec": float(np.mean([r.prec for r in reports])),
            "rec": float(np.mean([r.rec for r in reports])),
            "assd_mm": float(np.mean([r.assd_mm for r in reports])),
        }
        jacs = [r.jac for r in reports if r.jac is not None]
        if jacs:
            agg["jac_nonpos_percent"] = float(np.mean([j.nonpos_percent for j in jacs]))
            agg["jac_nonpos_count"] = float(np.mean([j.nonpos_count for j in jacs]))
        aggregates[stage] = agg
    return rows, aggregates


def _write_eval_csv(path: Path, rows: list[tuple[int, EvalReport]]) -> None:
    with path.open("w") as fh:
        fh.write("pair_id,stage,dice,prec,rec,assd_mm,jac_nonpos_count,jac_nonpos_percent\n")
        for pair_id, r in rows:
            jc = "" if r.jac is None else repr(r.jac.nonpos_count)
            jp = "" if r.jac is None else repr(r.jac.nonpos_percent)
            fh.write(
                f"{pair_id},{r.stage},{r.dice!r},{r.prec!r},{r.rec!r},{r.assd_mm!r},{jc},{jp}\n"
            )


def _recombined_total(bd, weights: LossWeights, parts: list[float]) -> float:
    w = (weights.similarity_affine, weights.similarity_deform, weights.smooth,
         weights.seg_affine, weights.seg_deform)
    return w[0] * parts[0] + w[1] * parts[1] + w[2] * parts[2] + w[3] * parts[3] + w[4] * parts[4]


def train(config: TrainConfig, out_dir: str | Path) -> RunManifest:
    """Train one model; writes loss.csv, eval.csv, checkpoints, and run.json."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _apply_determinism(config)

    model = RegistrationNetwork(config.dims, config.network, config.flags)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )

    train_pairs = [
        generate_pair(pair_seed(config.seed, i), config.dims, config.synth)
        for i in range(config.train_pairs)
    ]
    eval_pairs = [
        generate_pair(pair_seed(config.seed, EVAL_SEED_BASE + i), config.dims, config.synth)
        for i in range(config.eval_pairs)
    ]
    f_all, m_all, fseg_all, mseg_all = _train_batch_tensors(train_pairs)
    sampler = np.random.default_rng(np.random.SeedSequence([config.seed, SAMPLER_STREAM]))

    w = config.weights
    checkpoints: list[str] = []
    loss_path = out / "loss.csv"
    model.train()
    with loss_path.open("w") as log:
        log.write("step,affine_sim,deform_sim,smooth,affine_seg,deform_seg,total\n")
        for step in range(1, config.max_steps + 1):
            idx = torch.from_numpy(
                sampler.integers(0, config.train_pairs, size=config.batch_size)
            )
            f_b, m_b = f_all[idx], m_all[idx]
            result = model(f_b, m_b)
            affine_sim = -lncc_tensor(f_b, result.m_a, w.window, w.epsilon)
            deform_sim = -lncc_tensor(f_b, result.m_d, w.window, w.epsilon)
            smooth_term = smoothness_tensor(result.phi)
            if config.use_masks:
                fseg_b, mseg_b = fseg_all[idx], mseg_all[idx]
                mseg_a = warp_tensor(mseg_b, result.u_affine, mode="linear")
                mseg_d = warp_tensor(mseg_a, result.phi, mode="linear")
                affine_seg = dice_loss_tensor(fseg_b, mseg_a, w.epsilon)
                deform_seg = dice_loss_tensor(fseg_b, mseg_d, w.epsilon)
            else:
                affine_seg = torch.zeros(())
                deform_seg = torch.zeros(())
            try:
                bd = total_loss(
                    affine_sim, deform_sim, smooth_term, affine_seg, deform_seg,
                    weights=w, masks_available=config.use_masks,
                )
            except ValueError as e:
                raise RuntimeError(f"training aborted at step {step}: {e}") from e
            optimizer.zero_grad()
            bd.total.backward()
            optimizer.step()
            for name, p in model.named_parameters():
                if not torch.isfinite(p).all():
                    raise RuntimeError(
                        f"training aborted at step {step}: parameter {name} became non-finite"
                    )
            parts = [
                float(bd.affine_sim.detach()), float(bd.deform_sim.detach()),
                float(bd.smooth.detach()), float(bd.affine_seg.detach()),
                float(bd.deform_seg.detach()),
            ]
            total = _recombined_total(bd, w, parts)
            log.write(
                f"{step},{parts[0]!r},{parts[1]!r},{parts[2]!r},{parts[3]!r},{parts[4]!r},{total!r}\n"
            )
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                name = f"ckpt_{step}"
                save_checkpoint(out / name, model, optimizer, step_count=step, rng_seed=config.seed)
                checkpoints.append(name)

    final_name = "ckpt_final"
    save_checkpoint(
        out / final_name, model, optimizer, step_count=config.max_steps, rng_seed=config.seed
    )
    checkpoints.append(final_name)

    stages = ("initial",) if config.max_steps == 0 else STAGES
    rows, aggregates = _evaluate_pairs(model, eval_pairs, stages)
    _write_eval_csv(out / "eval.csv", rows)

    manifest = RunManifest(
        label="",
        config=dataclasses.asdict(config),
        loss_log="loss.csv",
        eval_log="eval.csv",
        checkpoints=checkpoints,
        final_checkpoint=final_name,
        eval=aggregates,
    )
    (out / "run.json").write_text(
        json.dumps(dataclasses.asdict(manifest), indent=2, sort_keys=True) + "\n"
    )
    return manifest


ABLATION_VARIANTS = (
    ("BaseModel", "basemodel", AblationFlags(use_sam=False, use_cam=False, use_gfm=False)),
    ("BaseModel + SAM", "basemodel_sam", AblationFlags(use_sam=True, use_cam=False, use_gfm=False)),
    ("BaseModel + CAM", "basemodel_cam", AblationFlags(use_sam=False, use_cam=True, use_gfm=False)),
    ("Full model", "full_model", AblationFlags(use_sam=True, use_cam=True, use_gfm=True)),
)


def _ablation_csv(path: Path, results: list[RunManifest]) -> None:
    stages_cols = []
    for stage in STAGES:
        for metric in ("dice", "prec", "rec", "assd_mm"):
            stages_cols.append((stage, metric))
    header = "label," + ",".join(f"{s}_{m}" for s, m in stages_cols)
    lines = [header]
    for manifest in results:
        cells = [manifest.label]
        for stage, metric in stages_cols:
            cells.append(repr(manifest.eval[stage][metric]))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")


def run_ablation(config: TrainConfig, out_dir: str | Path) -> list[RunManifest]:
    """Train all four module variants on identical data; write ablation.csv.

    All runs share the seed, so the sampled pairs and the Initial columns
    are identical across rows.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for label, slug, flags in ABLATION_VARIANTS:
        variant = dataclasses.replace(config, flags=flags)
        manifest = train(variant, out / slug)
        manifest.label = label
        results.append(manifest)
    _ablation_csv(out / "ablation.csv", results)
    return results


def register(
    fixed_path: str | Path,
    moving_path: str | Path,
    checkpoint_path: str | Path,
    out_dir: str | Path,
    fixed_mask_path: str | Path | None = None,
    moving_mask_path: str | Path | None = None,
) -> dict[str, str]:
    """Register one pair with a trained checkpoint; write all outputs as files."""
    bundle = load_checkpoint(checkpoint_path)
    fixed = load_volume(fixed_path)
    moving = load_volume(moving_path)
    if fixed.dims != bundle.model.dims or moving.dims != bundle.model.dims:
        raise ValueError(
            f"volume dims {fixed.dims}/{moving.dims} do not match "
            f"checkpoint dims {bundle.model.dims}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outs = full_forward(bundle.model, fixed, moving)
    save_volume(outs.m_a, out / "m_a")
    save_volume(outs.m_d, out / "m_d")
    save_field(outs.phi, out / "phi", spacing=fixed.spacing)
    save_field(outs.velocity, out / "velocity", spacing=fixed.spacing)
    (out / "affine.json").write_text(
        json.dumps({"values": outs.params.values.tolist()}, indent=2) + "\n"
    )
    files = {
        "m_a": "m_a.json",
        "m_d": "m_d.json",
        "phi": "phi.json",
        "velocity": "velocity.json",
        "affine": "affine.json",
    }
    if fixed_mask_path is not None and moving_mask_path is not None:
        f_seg = load_mask(fixed_mask_path)
        m_seg = load_mask(moving_mask_path)
        chains = {
            "initial": [],
            "affine": [outs.u_affine],
            "final": [outs.u_affine, outs.phi],
        }
        payload = {}
        for stage in STAGES:
            r = evaluate_stage(f_seg, m_seg, chains[stage], stage)
            entry = {"dice": r.dice, "prec": r.prec, "rec": r.rec, "assd_mm": r.assd_mm}
            if r.jac is not None:
                entry["jac_nonpos_count"] = r.jac.nonpos_count
                entry["jac_nonpos_percent"] = r.jac.nonpos_percent
            payload[stage] = entry
        (out / "eval.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        files["eval"] = "eval.json"
    return files
