"""End-to-end acceptance checks.

Each test prints one `[criterion N] PASS/FAIL - detail` line (visible even
under captured output) and then asserts its stated tolerances and runtime
bound.  The two training-based criteria share one ablation run: all four
variants train with the same data/seed configuration, so the full-model row
doubles as the single-run training check.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from time import perf_counter

import numpy as np
import pytest
import torch

from attnreg.cli import main
from attnreg.checkpoint import load_checkpoint, save_checkpoint
from attnreg.fieldops import (
    AffineParams,
    VectorField,
    affine_to_displacement,
    exponentiate,
    jacobian_stats,
    load_field,
    save_field,
)
from attnreg.losses import (
    LossWeights,
    dice_loss_tensor,
    lncc,
    lncc_tensor,
    smoothness_tensor,
    total_loss,
)
from attnreg.metrics import STAGES, assd, evaluate_stage
from attnreg.networks import (
    MultiHeadAttention,
    NetworkConfig,
    RegistrationNetwork,
    full_forward,
)
from attnreg.synth import generate_pair, pair_seed
from attnreg.training import TrainConfig, run_ablation, warp_tensor
from attnreg.volume import Volume, load_volume, save_volume

from helpers import make_blob_mask, make_smooth_field, make_volume, tiny_network
from oracles import (
    FiniteDiffSpec,
    gradient_mismatches,
    oracle_assd,
    oracle_attention,
    oracle_expm,
    oracle_grad,
    oracle_lncc,
)


@pytest.fixture()
def announce(capsys):
    def _announce(criterion: int, passed: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {criterion}] {'PASS' if passed else 'FAIL'} - {detail}", flush=True)
    return _announce


@pytest.fixture(scope="session")
def ablation_run(tmp_path_factory):
    """Train all four variants with the end-to-end configuration, once."""
    config = TrainConfig(
        dims=(32, 32, 16),
        batch_size=4,
        max_steps=2000,
        seed=7,
        train_pairs=200,
        eval_pairs=20,
    )
    out = tmp_path_factory.mktemp("ablation")
    start = perf_counter()
    results = run_ablation(config, out)
    elapsed = perf_counter() - start
    return out, results, elapsed


def test_criterion_1_attention_matches_oracle(announce):
    start = perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(50):
        heads = int(rng.integers(1, 3))
        dim = heads * int(rng.integers(1, 16 // heads + 1))
        length = int(rng.integers(1, 9))
        layer = MultiHeadAttention(dim, heads).double()
        e = rng.standard_normal((length, dim))
        with torch.no_grad():
            got = layer.attend(torch.from_numpy(e).unsqueeze(0))[0].numpy()
            wq = layer.wq.weight.T.numpy()
            wk = layer.wk.weight.T.numpy()
            wv = layer.wv.weight.T.numpy()
        expected = oracle_attention(e, wq, wk, wv, heads=heads)
        worst = max(worst, float(np.abs(got - expected).max()))
    elapsed = perf_counter() - start
    passed = worst <= 1e-5 and elapsed < 10.0
    announce(1, passed, f"50 attention cases (L<=8, k<=16, 1-2 heads), "
                        f"max abs diff {worst:.3g} (tol 1e-5), {elapsed:.1f}s (<10s)")
    assert worst <= 1e-5
    assert elapsed < 10.0


def test_criterion_2_lncc_matches_oracle(announce):
    start = perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    worst_self = 0.0
    for _ in range(20):
        f = make_volume(rng, (8, 8, 8))
        w = make_volume(rng, (8, 8, 8))
        for n in (3, 5, 9):
            worst = max(worst, abs(lncc(f, w, n) - oracle_lncc(f.data, w.data, n)))
        worst_self = max(worst_self, abs(lncc(f, f, 9) - 1.0))
    elapsed = perf_counter() - start
    passed = worst <= 1e-5 and worst_self <= 1e-5 and elapsed < 30.0
    announce(2, passed, f"20 volume pairs x n in (3,5,9), max oracle diff {worst:.3g}, "
                        f"self-score off by {worst_self:.3g} (tol 1e-5), {elapsed:.1f}s (<30s)")
    assert worst <= 1e-5
    assert worst_self <= 1e-5
    assert elapsed < 30.0


def test_criterion_3_assd_matches_oracle_exactly(announce):
    start = perf_counter()
    rng = np.random.default_rng(303)
    worst = 0.0
    exact = True
    for _ in range(20):
        a = make_blob_mask(rng, (16, 16, 16))
        b = make_blob_mask(rng, (16, 16, 16))
        got = assd(a, b)
        want = oracle_assd(a.data, b.data)
        exact = exact and got == want
        worst = max(worst, abs(got - want))
    elapsed = perf_counter() - start
    passed = exact and elapsed < 30.0
    announce(3, passed, f"20 random 16^3 mask pairs, exact match: {exact} "
                        f"(max diff {worst:.3g}), {elapsed:.1f}s (<30s)")
    assert exact
    assert elapsed < 30.0


LOSS_NAMES = ("affine_sim", "deform_sim", "smooth", "affine_seg", "deform_seg", "total")


def _loss_terms(model, f, m, fseg, mseg, w):
    out = model(f, m)
    affine_sim = -lncc_tensor(f, out.m_a, w.window, w.epsilon)
    deform_sim = -lncc_tensor(f, out.m_d, w.window, w.epsilon)
    smooth_term = smoothness_tensor(out.phi)
    mseg_a = warp_tensor(mseg, out.u_affine, mode="linear")
    mseg_d = warp_tensor(mseg_a, out.phi, mode="linear")
    affine_seg = dice_loss_tensor(fseg, mseg_a, w.epsilon)
    deform_seg = dice_loss_tensor(fseg, mseg_d, w.epsilon)
    bd = total_loss(
        affine_sim, deform_sim, smooth_term, affine_seg, deform_seg,
        weights=w, masks_available=True,
    )
    return {
        "affine_sim": affine_sim,
        "deform_sim": deform_sim,
        "smooth": smooth_term,
        "affine_seg": affine_seg,
        "deform_seg": deform_seg,
        "total": bd.total,
    }


def test_criterion_4_gradients_match_finite_differences(announce, rng):
    start = perf_counter()
    dims = (8, 8, 8)
    model = RegistrationNetwork(dims, tiny_network()).double()
    model.eval()
    with torch.no_grad():
        # Nudge every weight off its init so sampling points avoid the exact
        # integer coordinates where trilinear interpolation has kinks.
        for p in model.parameters():
            p.add_(0.05 * torch.randn_like(p))

    f = torch.from_numpy(rng.random((1, 1, *dims))).double()
    m = torch.from_numpy(rng.random((1, 1, *dims))).double()
    fseg = torch.from_numpy(make_blob_mask(rng, dims).data).double().reshape(1, 1, *dims)
    mseg = torch.from_numpy(make_blob_mask(rng, dims).data).double().reshape(1, 1, *dims)
    w = LossWeights()
    params = dict(model.named_parameters())

    terms = _loss_terms(model, f, m, fseg, mseg, w)
    analytic = {}
    for name in LOSS_NAMES:
        model.zero_grad(set_to_none=True)
        terms[name].backward(retain_graph=True)
        analytic[name] = {
            pn: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for pn, p in params.items()
        }
    model.zero_grad(set_to_none=True)

    sample_rng = np.random.default_rng(404)
    samples: list[tuple[str, list[int]]] = []
    groups = model.parameter_groups()
    for gname in sorted(groups):
        entries = groups[gname]
        sizes = np.array([p.numel() for _, p in entries])
        offsets = np.cumsum(sizes) - sizes
        chosen = sample_rng.choice(int(sizes.sum()), size=24, replace=False)
        per_tensor: dict[str, list[int]] = {}
        for off in np.sort(chosen):
            ti = int(np.searchsorted(offsets, off, side="right") - 1)
            per_tensor.setdefault(entries[ti][0], []).append(int(off - offsets[ti]))
        samples.extend(per_tensor.items())

    spec = FiniteDiffSpec(h=1e-5)
    failures: list[str] = []
    coords = 0
    for pname, indices in samples:
        tensor = params[pname]
        original = tensor.detach().clone()
        flat = original.numpy().reshape(-1).copy()
        for lname in LOSS_NAMES:
            def fn(vec, _t=tensor, _n=lname):
                with torch.no_grad():
                    _t.copy_(torch.from_numpy(vec.reshape(_t.shape)))
                    return float(_loss_terms(model, f, m, fseg, mseg, w)[_n])
            numeric = oracle_grad(fn, flat, spec, indices)
            with torch.no_grad():
                tensor.copy_(original)
            a = analytic[lname][pname].reshape(-1)[indices].numpy()
            failures += [f"{lname} {pname} {msg}" for msg in gradient_mismatches(a, numeric, spec)]
        coords += len(indices)

    elapsed = perf_counter() - start
    passed = not failures and coords >= 200 and elapsed < 300.0
    announce(4, passed, f"{coords} parameters across {len(groups)} groups x "
                        f"{len(LOSS_NAMES)} loss terms, {len(failures)} mismatches, "
                        f"{elapsed:.0f}s (<300s)")
    assert coords >= 200
    assert not failures, failures[:10]
    assert elapsed < 300.0


def test_criterion_5_diffeomorphic_integration(announce, rng):
    start = perf_counter()
    zero = exponentiate(VectorField(np.zeros((3, 8, 8, 8), dtype=np.float32), kind="velocity"))
    zero_exact = not zero.data.any()

    data = np.zeros((3, 12, 12, 12), dtype=np.float32)
    data[0] = 0.8
    u = exponentiate(VectorField(data, kind="velocity"))
    core = (slice(3, -3),) * 3
    const_err = max(
        float(np.abs(u.data[0][core] - 0.8).max()),
        float(np.abs(u.data[1][core]).max()),
        float(np.abs(u.data[2][core]).max()),
    )

    dims = (12, 12, 12)
    mat = rng.uniform(-1.0, 1.0, (3, 3))
    mat = mat / np.abs(mat).sum() * 0.1
    c = (np.array(dims) - 1) / 2.0
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"))
    centered = grid - c.reshape(3, 1, 1, 1)
    vel = np.einsum("ij,jxyz->ixyz", mat, centered)
    got = exponentiate(VectorField(vel.astype(np.float32), kind="velocity"))
    expected = np.einsum("ij,jxyz->ixyz", oracle_expm(mat) - np.eye(3), centered)
    inner = (slice(None), slice(3, -3), slice(3, -3), slice(3, -3))
    linear_err = float(np.abs(got.data[inner] - expected[inner]).max())

    worst_nonpos = 0
    for _ in range(20):
        v = make_smooth_field(rng, (16, 16, 16), 2.5, smoothness=3.0, kind="velocity")
        stats = jacobian_stats(exponentiate(v))
        worst_nonpos = max(worst_nonpos, stats.nonpos_count)

    elapsed = perf_counter() - start
    passed = (zero_exact and const_err <= 1e-4 and linear_err <= 1e-3
              and worst_nonpos == 0 and elapsed < 60.0)
    announce(5, passed, f"exp(0) exact: {zero_exact}; translation err {const_err:.2g} (tol 1e-4); "
                        f"linear-field err {linear_err:.2g} (tol 1e-3); worst nonpos count "
                        f"over 20 fields: {worst_nonpos}; {elapsed:.1f}s (<60s)")
    assert zero_exact
    assert const_err <= 1e-4
    assert linear_err <= 1e-3
    assert worst_nonpos == 0
    assert elapsed < 60.0


def test_criterion_6_identity_at_initialization(announce):
    start = perf_counter()
    dims = (32, 32, 16)
    pair = generate_pair(pair_seed(7, 0), dims)
    model = RegistrationNetwork(dims, NetworkConfig.desk())
    outs = full_forward(model, pair.fixed, pair.moving)
    affine_exact = np.array_equal(outs.m_a.data, pair.moving.data)
    deform_exact = np.array_equal(outs.m_d.data, outs.m_a.data)
    chains = {"initial": [], "affine": [outs.u_affine], "final": [outs.u_affine, outs.phi]}
    reports = [evaluate_stage(pair.fixed_mask, pair.moving_mask, chains[s], s) for s in STAGES]
    same_metrics = all(
        (r.dice, r.prec, r.rec, r.assd_mm)
        == (reports[0].dice, reports[0].prec, reports[0].rec, reports[0].assd_mm)
        for r in reports
    )
    elapsed = perf_counter() - start
    passed = affine_exact and deform_exact and same_metrics and elapsed < 60.0
    announce(6, passed, f"fresh model: m_a == m: {affine_exact}, m_d == m_a: {deform_exact}, "
                        f"identical stage metrics: {same_metrics}, {elapsed:.1f}s (<60s)")
    assert affine_exact
    assert deform_exact
    assert same_metrics
    assert elapsed < 60.0


def test_criterion_9_determinism_and_round_trips(announce, rng, tmp_path):
    start = perf_counter()
    config_file = tmp_path / "config.json"
    config_file.write_text(json.dumps({"network": dataclasses.asdict(tiny_network())}))
    flags = [
        "--config", str(config_file), "--dims", "8x8x8", "--batch-size", "2",
        "--max-steps", "5", "--train-pairs", "4", "--eval-pairs", "2",
        "--seed", "3", "--deterministic",
    ]
    for name in ("a", "b"):
        assert main(["train", "--out", str(tmp_path / name), *flags]) == 0

    def file_bytes(path: Path) -> dict[str, bytes]:
        return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.is_file()}

    logs_identical = all(
        (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
        for n in ("loss.csv", "eval.csv", "run.json")
    )
    ckpts_identical = file_bytes(tmp_path / "a" / "ckpt_final") == file_bytes(tmp_path / "b" / "ckpt_final")

    vol = make_volume(rng, (9, 7, 5), spacing=(1.0, 1.5, 2.0))
    save_volume(vol, tmp_path / "vol")
    back = load_volume(tmp_path / "vol")
    volume_roundtrip = np.array_equal(back.data, vol.data) and back.spacing == vol.spacing

    field = make_smooth_field(rng, (6, 5, 4), 1.5)
    save_field(field, tmp_path / "field")
    field_roundtrip = np.array_equal(load_field(tmp_path / "field").data, field.data)

    bundle = load_checkpoint(tmp_path / "a" / "ckpt_final")
    save_checkpoint(tmp_path / "resaved", bundle.model, bundle.optimizer,
                    step_count=bundle.step_count, rng_seed=bundle.rng_seed)
    ckpt_roundtrip = file_bytes(tmp_path / "resaved") == file_bytes(tmp_path / "a" / "ckpt_final")

    elapsed = perf_counter() - start
    passed = (logs_identical and ckpts_identical and volume_roundtrip
              and field_roundtrip and ckpt_roundtrip and elapsed < 300.0)
    announce(9, passed, f"repeat runs byte-identical (logs {logs_identical}, "
                        f"checkpoints {ckpts_identical}); round trips bit-exact "
                        f"(volume {volume_roundtrip}, field {field_roundtrip}, "
                        f"checkpoint {ckpt_roundtrip}); {elapsed:.0f}s (<300s)")
    assert logs_identical
    assert ckpts_identical
    assert volume_roundtrip
    assert field_roundtrip
    assert ckpt_roundtrip
    assert elapsed < 300.0


def test_criterion_10_jacobian_arithmetic(announce, rng):
    start = perf_counter()
    identity_holds = True
    for _ in range(20):
        u = make_smooth_field(rng, (10, 10, 10), amplitude=2.0)
        stats = jacobian_stats(u)
        total = stats.det_map.data.size
        identity_holds = identity_holds and (
            stats.nonpos_percent == 100.0 * stats.nonpos_count / total
        )

    scale = AffineParams(np.array([1.1, 0, 0, 0, 0, 1.1, 0, 0, 0, 0, 1.1, 0], dtype=np.float64))
    det = jacobian_stats(affine_to_displacement(scale, (9, 9, 9))).det_map.data
    dilation_err = float(np.abs(det - 1.331).max())

    elapsed = perf_counter() - start
    passed = identity_holds and dilation_err <= 1e-6 and elapsed < 10.0
    announce(10, passed, f"percent identity exact on 20 fields: {identity_holds}; "
                         f"uniform dilation det off by {dilation_err:.2g} (tol 1e-6); "
                         f"{elapsed:.1f}s (<10s)")
    assert identity_holds
    assert dilation_err <= 1e-6
    assert elapsed < 10.0


def test_criterion_7_end_to_end_training(announce, ablation_run):
    _, results, elapsed = ablation_run
    ev = next(m for m in results if m.label == "Full model").eval
    gain = ev["final"]["dice"] - ev["initial"]["dice"]
    beats_affine = ev["final"]["dice"] > ev["affine"]["dice"]
    assd_ratio = ev["final"]["assd_mm"] / ev["initial"]["assd_mm"]
    nonpos = ev["final"]["jac_nonpos_percent"]
    # The run trains inside the 4-variant ablation; the elapsed bound is the
    # per-run target times four.
    passed = (gain >= 0.10 and beats_affine and assd_ratio <= 0.6
              and nonpos <= 5.0 and elapsed < 4 * 1800.0)
    announce(7, passed, f"dice {ev['initial']['dice']:.3f} -> {ev['affine']['dice']:.3f} -> "
                        f"{ev['final']['dice']:.3f} (gain {gain:+.3f}, need >= +0.10); "
                        f"assd ratio {assd_ratio:.2f} (need <= 0.60); "
                        f"nonpos {nonpos:.2f}% (need <= 5%); "
                        f"{elapsed / 60:.0f} min for 4 runs (< 120 min)")
    assert gain >= 0.10
    assert beats_affine
    assert assd_ratio <= 0.6
    assert nonpos <= 5.0
    assert elapsed < 4 * 1800.0


def test_criterion_8_ablation_harness(announce, ablation_run):
    out, results, elapsed = ablation_run
    labels = [m.label for m in results]
    expected_labels = ["BaseModel", "BaseModel + SAM", "BaseModel + CAM", "Full model"]
    lines = (out / "ablation.csv").read_text().splitlines()
    header = lines[0].split(",")
    initial_cols = [i for i, name in enumerate(header) if name.startswith("initial_")]
    rows = [line.split(",") for line in lines[1:]]
    shared_initial = all(len({row[col] for row in rows}) == 1 for col in initial_cols)
    base_final = results[0].eval["final"]["dice"]
    full_final = results[3].eval["final"]["dice"]
    non_inferior = full_final >= base_final - 0.01
    passed = (labels == expected_labels and len(rows) == 4 and shared_initial
              and non_inferior and elapsed < 9000.0)
    announce(8, passed, f"4 variants trained; shared initial columns: {shared_initial}; "
                        f"full-model final dice {full_final:.3f} vs base {base_final:.3f} "
                        f"(need >= base - 0.01); {elapsed / 60:.0f} min (< 150 min)")
    assert labels == expected_labels
    assert len(rows) == 4
    assert shared_initial
    assert non_inferior
    assert elapsed < 9000.0
