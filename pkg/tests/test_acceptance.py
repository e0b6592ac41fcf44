"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The end-to-end criterion
builds the full synthetic corpus and runs leave-one-subject-out evaluation
twice (the second run checks bit-exact reproducibility), so this module is
the slow part of the suite.
"""

import struct
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from apexflow.apexspot import RoiSet, dc_peak_index, lbp_image, spot_apex
from apexflow.cli import PipelineConfig, ensure_flows
from apexflow.dataset import TARGET_HEIGHT, TARGET_WIDTH, DatasetId, load_manifest
from apexflow.evaluation import (
    flow_store_from_dir,
    make_folds,
    metrics,
    normalize_rows,
    run_losocv,
)
from apexflow.offapexnet import (
    AdamState,
    NetArch,
    TrainConfig,
    backward,
    cross_entropy,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    softmax,
    train,
)
from apexflow.synthetic import SynthConfig, generate_corpus, synth_sequence
from apexflow.tvl1flow import FlowField, estimate_flow, read_flo, warp, write_flo

from conftest import blob_texture_pair, unimodal_bump


def report_line(number, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    # bypass pytest's capture so the line shows up even without -s
    print(f"ACCEPTANCE {number:>2} {name}: {status}  {detail}", file=sys.__stdout__)
    assert ok, f"criterion {number} ({name}): {detail}"


# ---------------------------------------------------------------------------


def test_criterion_01_architecture_fidelity():
    start = time.monotonic()
    params = init_params(0)
    rng = np.random.default_rng(1)
    logits, caches = forward(params, (rng.normal(size=(28, 28)), rng.normal(size=(28, 28))))
    elapsed = time.monotonic() - start

    ok = True
    for s in ("u", "v"):
        sc = caches["streams"][s]
        ok &= sc["c1_pre"].shape == (1, 28, 28, 6)
        ok &= sc["c2_pre"].shape == (1, 14, 14, 16)
        ok &= sc["p2_shape"] == (1, 7, 7, 16)
        pooled1_h = sc["xp2"].shape[1] - 4  # conv2 input was padded by 2
        ok &= pooled1_h == 14
    ok &= caches["concat"].shape == (1, 1568)
    ok &= caches["fc1_pre"].shape == (1, 1024)
    ok &= caches["fc2_pre"].shape == (1, 1024)
    ok &= logits.shape == (3,)
    ok &= elapsed < 1.0
    report_line(1, "architecture fidelity", ok, f"forward in {elapsed * 1000:.0f} ms")


def test_criterion_02_gradient_correctness():
    start = time.monotonic()
    arch = NetArch(input_size=8, fc1_units=16, fc2_units=16)
    # seed pair chosen so every pre-activation sits away from the ReLU kink
    params = init_params(3, arch)
    rng = np.random.default_rng(5)
    u, v = rng.normal(0, 1.5, (8, 8)), rng.normal(0, 1.5, (8, 8))
    label = 1

    _, caches = forward(params, (u, v))
    for key in ("fc1_pre", "fc2_pre"):
        assert np.abs(caches[key]).min() > 1e-3, "degenerate gradient-check point"
    grads = backward(caches, label)

    def loss():
        logits, _ = forward(params, (u, v))
        return cross_entropy(softmax(logits), label)

    h = 1e-5
    worst = 0.0
    n_checked = 0
    for key, arr in params.values.items():
        flat = arr.ravel()
        analytic = grads[key].ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = loss()
            flat[idx] = orig - h
            down = loss()
            flat[idx] = orig
            numeric = (up - down) / (2.0 * h)
            rel = abs(analytic[idx] - numeric) / max(abs(analytic[idx]), abs(numeric), 1e-3)
            worst = max(worst, rel)
            n_checked += 1
    elapsed = time.monotonic() - start
    ok = worst < 1e-4 and elapsed < 60.0
    report_line(
        2,
        "gradient correctness",
        ok,
        f"{n_checked} coordinates, max rel err {worst:.2e}, {elapsed:.1f} s",
    )


def test_criterion_03_flow_recovery():
    start = time.monotonic()
    rng = np.random.default_rng(7)
    epes = []
    for seed in range(20):
        angle = rng.uniform(0, 2 * np.pi)
        mag = rng.uniform(0.5, 4.0)
        dx, dy = mag * np.cos(angle), mag * np.sin(angle)
        i0, i1 = blob_texture_pair(seed, 64, 64, dx, dy)
        flow = estimate_flow(i0, i1)
        epes.append(np.mean(np.hypot(flow.u - dx, flow.v - dy)))
    mean_epe = float(np.mean(epes))

    still_max = 0.0
    for seed in range(5):
        img, _ = blob_texture_pair(100 + seed, 48, 48, 0.0, 0.0)
        flow = estimate_flow(img, img)
        still_max = max(still_max, float(np.abs(flow.u).max()), float(np.abs(flow.v).max()))
    elapsed = time.monotonic() - start
    ok = mean_epe < 0.3 and still_max < 1e-3 and elapsed < 120.0
    report_line(
        3,
        "flow recovery",
        ok,
        f"mean EPE {mean_epe:.3f} px over 20 pairs, still-pair max {still_max:.1e}, {elapsed:.0f} s",
    )


def test_criterion_04_flow_energy_sanity():
    rng = np.random.default_rng(11)
    all_decreased = True
    worst_ratio = 0.0
    for seed in range(12):
        angle = rng.uniform(0, 2 * np.pi)
        mag = rng.uniform(0.5, 4.0)
        dx, dy = mag * np.cos(angle), mag * np.sin(angle)
        i0, i1 = blob_texture_pair(200 + seed, 64, 64, dx, dy)
        flow = estimate_flow(i0, i1)
        before = np.mean((i1 - i0) ** 2)
        after = np.mean((warp(i1, flow) - i0) ** 2)
        all_decreased &= after < before
        worst_ratio = max(worst_ratio, after / before)
    report_line(
        4, "flow energy sanity", all_decreased, f"worst residual ratio {worst_ratio:.3f}"
    )


def test_criterion_05_apex_spotting():
    start = time.monotonic()
    rng = np.random.default_rng(13)
    exact = all(
        dc_peak_index(values) == peak
        for values, peak in (unimodal_bump(rng) for _ in range(100))
    )

    rois = RoiSet.default_for(TARGET_HEIGHT, TARGET_WIDTH)
    errors = []
    for seed in range(30):
        frames, apex = synth_sequence(seed)
        errors.append(abs(spot_apex(frames, rois) - apex))
    within_two = max(errors) <= 2
    elapsed = time.monotonic() - start
    ok = exact and within_two and elapsed < 120.0
    report_line(
        5,
        "apex spotting",
        ok,
        f"100 signals exact: {exact}; sequence errors max {max(errors)}, {elapsed:.0f} s",
    )


def test_criterion_06_lbp_oracle():
    offsets = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)]

    def oracle(img):
        h, w = img.shape
        out = np.zeros((h - 2, w - 2), dtype=np.uint8)
        for y in range(1, h - 1):
            for x in range(1, w - 1):
                code = 0
                for bit, (dy, dx) in enumerate(offsets):
                    if img[y + dy, x + dx] >= img[y, x]:
                        code |= 1 << (7 - bit)
                out[y - 1, x - 1] = code
        return out

    rng = np.random.default_rng(17)
    ok = all(
        np.array_equal(lbp_image(img), oracle(img))
        for img in (rng.random((8, 8)) for _ in range(50))
    )
    report_line(6, "lbp oracle", ok, "50 random 8x8 images, exact")


def test_criterion_07_metrics():
    cm = np.array([[8, 1, 1], [2, 6, 2], [1, 1, 8]])
    summary = metrics(cm)
    precision = [Fraction(8, 11), Fraction(6, 8), Fraction(8, 11)]
    recall = [Fraction(8, 10), Fraction(6, 10), Fraction(8, 10)]
    f_scores = [2 * p * r / (p + r) for p, r in zip(precision, recall)]
    ok = abs(summary.accuracy - 22 / 30) < 1e-12
    for i in range(3):
        ok &= abs(summary.precision[i] - float(precision[i])) < 1e-12
        ok &= abs(summary.recall[i] - float(recall[i])) < 1e-12
        ok &= abs(summary.f_scores[i] - float(f_scores[i])) < 1e-12
    ok &= abs(summary.macro_f - float(sum(f_scores) / 3)) < 1e-12

    rates = normalize_rows(np.array([[84, 11, 5], [1, 1, 0], [0, 0, 1]]))
    rendered = [f"{v:.2f}" for v in rates[0]]
    ok &= rendered == ["0.84", "0.11", "0.05"]
    report_line(7, "metrics", ok, "hand-worked matrix to 1e-12; row rendering .84/.11/.05")


@pytest.fixture(scope="module")
def synth_run(tmp_path_factory):
    """Full synthetic corpus with flows computed through the disk pipeline."""
    out = tmp_path_factory.mktemp("acceptance_synth")
    manifest_path, truths = generate_corpus(out, SynthConfig(seed=0))
    records = load_manifest(manifest_path)
    cfg = PipelineConfig(manifest=manifest_path, out_dir=out, jobs=2)
    rois = RoiSet.default_for(TARGET_HEIGHT, TARGET_WIDTH)
    flow_dir = ensure_flows(records, cfg, rois)
    store = flow_store_from_dir(records, flow_dir)
    return records, store


def test_criterion_08_protocol(synth_run, corpus_441):
    records, _ = synth_run
    folds = make_folds(records)
    keys = {(r.dataset_id, r.subject_id) for r in records}
    ok = len(folds) == len(keys) == 12
    tested = sorted(i for f in folds for i in f.test_indices)
    ok &= tested == list(range(len(records)))
    ok &= all(
        {(records[i].dataset_id, records[i].subject_id) for i in f.test_indices} == {f.held_out_key}
        and all((records[i].dataset_id, records[i].subject_id) != f.held_out_key for i in f.train_indices)
        for f in folds
    )

    folds_441 = make_folds(corpus_441)
    ok &= len(folds_441) == 68
    by_dataset = {}
    for fold in folds_441:
        by_dataset[fold.held_out_key[0]] = by_dataset.get(fold.held_out_key[0], 0) + 1
    ok &= by_dataset == {DatasetId.SMIC: 16, DatasetId.CASME2: 24, DatasetId.SAMM: 28}
    report_line(
        8,
        "losocv protocol",
        ok,
        f"{len(folds)} synth folds, 68 folds on the full-shape manifest",
    )


def test_criterion_09_end_to_end_learning(synth_run):
    start = time.monotonic()
    records, store = synth_run
    config = TrainConfig(epochs=50, seed=0)
    first = run_losocv(records, store, config)
    second = run_losocv(records, store, config)
    elapsed = time.monotonic() - start

    ok = first.accuracy >= 0.95
    ok &= config.epochs <= 500
    ok &= first.to_json_dict() == second.to_json_dict()
    ok &= elapsed < 600.0
    report_line(
        9,
        "end-to-end learning",
        ok,
        f"pooled accuracy {first.accuracy:.3f} at {config.epochs} epochs, "
        f"bit-exact repeat: {first.to_json_dict() == second.to_json_dict()}, {elapsed:.0f} s",
    )


def reference_read_flo(path):
    """Independent Middlebury reader used to cross-check the writer."""
    raw = open(path, "rb").read()
    magic = struct.unpack_from("<f", raw, 0)[0]
    assert magic == np.float32(202021.25), "bad magic"
    width, height = struct.unpack_from("<ii", raw, 4)
    flat = np.frombuffer(raw, dtype="<f4", count=2 * width * height, offset=12)
    return flat.reshape(height, width, 2)


def test_criterion_10_serialization(tmp_path):
    rng = np.random.default_rng(23)
    flow = FlowField(
        u=rng.normal(size=(9, 13)).astype(np.float32).astype(np.float64),
        v=rng.normal(size=(9, 13)).astype(np.float32).astype(np.float64),
    )
    flo_path = tmp_path / "x.flo"
    write_flo(flow, flo_path)
    back = read_flo(flo_path)
    ok = np.array_equal(back.u, flow.u) and np.array_equal(back.v, flow.v)

    ref = reference_read_flo(flo_path)
    ok &= np.array_equal(ref[:, :, 0].astype(np.float64), flow.u)
    ok &= np.array_equal(ref[:, :, 1].astype(np.float64), flow.v)

    arch = NetArch(input_size=8, fc1_units=16, fc2_units=16)
    rng_in = np.random.default_rng(29)
    samples = [
        ((rng_in.normal(size=(8, 8)), rng_in.normal(size=(8, 8))), i % 3) for i in range(6)
    ]
    params, _ = train(samples, TrainConfig(epochs=3, seed=1), arch=arch)
    state = AdamState(
        m={k: rng_in.normal(size=a.shape) for k, a in params.values.items()},
        v={k: np.abs(rng_in.normal(size=a.shape)) for k, a in params.values.items()},
        t=3,
    )
    ckpt = tmp_path / "x.ckpt"
    save_checkpoint(params, state, ckpt)
    loaded_params, loaded_state = load_checkpoint(ckpt)
    for key in params.values:
        ok &= np.array_equal(loaded_params.values[key], params.values[key])
        ok &= np.array_equal(loaded_state.m[key], state.m[key])
        ok &= np.array_equal(loaded_state.v[key], state.v[key])
    ok &= loaded_state.t == 3
    report_line(10, "serialization", ok, "flo + checkpoint round trips bit-identical")
