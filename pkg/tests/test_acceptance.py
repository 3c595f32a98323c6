"""Acceptance criteria, one test each.

Every test appends one ``ACCEPTANCE <n> <name>: PASS|FAIL <detail>`` line to
the terminal summary before asserting.
"""
import csv
import math
import re
import time

import numpy as np
from scipy import stats

from conftest import ACCEPTANCE_LINES
from fabricate import fabricate_runs
from mti import config as cfgmod
from mti.biasfield import all_fields, contaminate
from mti.dataset import synthetic_volume, transform_samples
from mti.metrics import dice, evaluate_session, fpr, ncc, ssim
from mti.nets import REFERENCE_TOTALS, NetworkConfig, build_discriminator, build_unet, count_parameters, method_parameter_total
from mti.scenarios import METHODS, SessionKey, builtin_scenarios, enumerate_sessions, loso_folds, split_samples
from mti.stats_report import ALPHA, FOOTNOTES, PValueCell, paired_ttest, pvalue_matrix, render_report, t_statistic
from mti.trainer import EpochRecord, LossCurve, TrainConfig, batch_tensors, check_stop, finite_difference_check, train_session
from oracles import dice_counting, fpr_counting, ncc_direct, ssim_bruteforce, t_two_sided_quadrature


def record(n, name, ok, detail):
    ACCEPTANCE_LINES.append(f"ACCEPTANCE {n} {name}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def test_1_metric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {"dice": 0.0, "fpr": 0.0, "ncc": 0.0, "ssim": 0.0}
    for _ in range(100):
        p, g = rng.integers(0, 4, (16, 16)), rng.integers(0, 4, (16, 16))
        d = dice(p, g)
        for cls, name in ((1, "gm"), (2, "wm"), (3, "csf")):
            worst["dice"] = max(worst["dice"], abs(d[name] - dice_counting(p, g, cls)))
        worst["fpr"] = max(worst["fpr"], abs(fpr(p, g) - fpr_counting(p, g)))
        a, b = rng.uniform(0, 255, (16, 16)), rng.uniform(0, 255, (16, 16))
        worst["ncc"] = max(worst["ncc"], abs(ncc(a, b) - ncc_direct(a, b)))
        worst["ssim"] = max(worst["ssim"], abs(ssim(a, b) - ssim_bruteforce(a, b)))
    elapsed = time.perf_counter() - start
    ok = worst["dice"] <= 1e-9 and worst["fpr"] <= 1e-9 and worst["ncc"] <= 1e-9 and worst["ssim"] <= 1e-6 and elapsed < 10
    detail = ", ".join(f"max|{k}-oracle|={v:.1e}" for k, v in worst.items()) + f", {elapsed:.2f}s"
    record(1, "metric oracle equivalence", ok, detail)


def test_2_bias_field_algebra():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    problems = []
    for n in (64, 512):
        bound = 0.6 / n * 4
        for f in all_fields(n, n):
            v = f.values
            if v.min() < 0.7 - 1e-12 or v.max() > 1.3 + 1e-12:
                problems.append(f"field {f.field_id}@{n} range [{v.min()}, {v.max()}]")
            step = max(np.abs(np.diff(v, axis=0)).max(), np.abs(np.diff(v, axis=1)).max())
            if step > bound:
                problems.append(f"field {f.field_id}@{n} step {step:.4g} > {bound:.4g}")
            s = rng.uniform(0, 255, (n, n))
            safe = s * v <= 255  # clipping cannot fire here
            err = np.abs(contaminate(s, f)[safe] / v[safe] - s[safe]).max()
            if err > 1e-6:
                problems.append(f"field {f.field_id}@{n} inversion error {err:.2e}")
    elapsed = time.perf_counter() - start
    ok = not problems and elapsed < 5
    record(2, "bias-field algebra", ok, "; ".join(problems) or f"16 fields in range, smooth, invertible, {elapsed:.2f}s")


def _trace(l1, disc=None, adv=None):
    curve = LossCurve()
    for i, v in enumerate(l1):
        curve.append(EpochRecord(i + 1, v, None if adv is None else adv[i], None if disc is None else disc[i]))
    return curve


def test_3_stop_criteria():
    start = time.perf_counter()
    down = [1.0 - 0.05 * i for i in range(11)]
    up = [1.0 + 0.1 * i for i in range(11)]
    cgan = TrainConfig(method="cgan", max_epochs=500)
    cases = [
        ("early at 50", _trace([0.5] * 49 + [0.009]), TrainConfig(), ("early_stop", 50)),
        ("threshold inclusive", _trace([0.5, 0.01]), TrainConfig(), ("early_stop", 2)),
        ("cap at 500", _trace([0.2] * 500), TrainConfig(), ("max_epoch_force", 500)),
        ("below cap", _trace([0.2] * 499), TrainConfig(), None),
        ("exactly 10 transitions", _trace([0.3] * 11, down, up), cgan, ("discriminator_force", 11)),
        ("9 transitions", _trace([0.3] * 10, down[1:], up[1:]), cgan, None),
        ("unet ignores disc", _trace([0.3] * 11, down, up), TrainConfig(), None),
        ("disc beats cap", _trace([0.3] * 11, down, up), TrainConfig(method="cgan", max_epochs=11),
         ("discriminator_force", 11)),
        ("early beats disc and cap", _trace([0.3] * 10 + [0.005], down, up), TrainConfig(method="cgan", max_epochs=11),
         ("early_stop", 11)),
    ]
    failed = []
    for name, curve, cfg, want in cases:
        got = check_stop(curve, cfg)
        got = None if got is None else (got.reason, got.epoch)
        if got != want:
            failed.append(f"{name}: {got} != {want}")
    elapsed = time.perf_counter() - start
    record(3, "stop criteria", not failed and elapsed < 1, "; ".join(failed) or f"{len(cases)} traces, {elapsed:.3f}s")


def test_4_matrix_accounting():
    start = time.perf_counter()
    keys = enumerate_sessions(builtin_scenarios(), 7)
    subjects = [f"s{i}" for i in range(7)]
    folds = loso_folds(subjects)
    partition = all(sorted([*train, test]) == sorted(subjects) and test not in train for train, test in folds)
    partition &= sorted(test for _, test in folds) == sorted(subjects)

    volumes = [synthetic_volume(s, (2, 16, 16)) for s in subjects]
    cfg = cfgmod.load_config(profile="toy", overrides=[cfgmod.parse_override(o) for o in ("net.slice_size=16", "augment.variants=[{}]")])
    leaks = 0
    for spec in builtin_scenarios()[:2]:  # one clean, one contaminated
        for fold in range(7):
            train, test = split_samples(SessionKey(spec.scenario_id, spec.sub, fold, "unet_mt"), volumes, cfg)
            tr = {m.subject_id for m in train.metas()}
            te = {m.subject_id for m in test.metas()}
            leaks += len(tr & te) + (te != {f"s{fold}"}) + (tr != set(subjects) - te)
    elapsed = time.perf_counter() - start
    ok = len(keys) == 280 and len(set(keys)) == 280 and partition and leaks == 0 and elapsed < 1
    record(4, "matrix accounting", ok, f"{len(keys)} keys, partition={partition}, leaks={leaks}, {elapsed:.2f}s")


def test_5_desk_scale_convergence():
    start = time.perf_counter()
    cfg = cfgmod.load_config(profile="toy")
    train_vol = synthetic_volume("s0", (32, 30, 30))
    test_vol = synthetic_volume("s1", (12, 30, 30))
    augs = cfgmod.augmentations(cfg)
    size = cfg["net"]["slice_size"]
    outcome = {}
    for label, transforms in (("ST", ("identity",)), ("MT", ("identity", "invert"))):
        train = transform_samples([train_vol], transforms=transforms, slice_size=size, augmentations=augs)
        test = transform_samples([test_vol], transforms=transforms, slice_size=size)
        res = train_session(train, cfgmod.network_config(cfg, len(transforms)), cfgmod.train_config(cfg, "unet"))
        recs = evaluate_session(res.generator, test)
        outcome[label] = (
            res.stop,
            float(np.mean([r.values["ssim"] for r in recs])),
            float(np.mean([r.values["ncc"] for r in recs])),
        )
    elapsed = time.perf_counter() - start
    ok = elapsed < 600
    parts = []
    for label, (stop, s, c) in outcome.items():
        ok &= stop.reason == "early_stop" and stop.epoch <= 200 and s >= 0.95 and c >= 0.99
        parts.append(f"{label} {stop.reason}@{stop.epoch} ssim={s:.4f} ncc={c:.5f}")
    record(5, "desk-scale convergence", ok, "; ".join(parts) + f", {elapsed:.0f}s")


def test_6_gradient_sanity():
    net = build_unet(NetworkConfig(base_filters=4, depth=1, slice_size=16, dropout_stages=0))
    samples = transform_samples([synthetic_volume("s0", (2, 30, 30))], slice_size=16)
    x, y = batch_tensors(samples, [0, 1])
    pairs = finite_difference_check(net, x, y, n_params=5, seed=3)
    rel = [abs(a - n) / max(abs(a), abs(n), 1e-12) for a, n in pairs]
    record(6, "gradient sanity", max(rel) <= 1e-3, f"max relative error {max(rel):.2e} over {len(pairs)} parameters")


def test_7_parameter_counting():
    toy_unet = count_parameters(build_unet(NetworkConfig(base_filters=4, depth=2, slice_size=16)))
    toy_small = count_parameters(build_unet(NetworkConfig(base_filters=4, depth=1, slice_size=8)))
    toy_disc = count_parameters(build_discriminator(NetworkConfig(base_filters=4, depth=2, slice_size=16,
                                                                  disc_filters=8, disc_layers=2)))
    hand = toy_unet == 943 and toy_small == 223 and toy_disc == 6633
    full = {m: method_parameter_total(m) for m in METHODS}
    published = ", ".join(f"{m} {full[m]:,} (target {REFERENCE_TOTALS[m]:,})" for m in METHODS)
    # exact full-scale match is reported, not gated
    record(7, "parameter counting", hand, f"toy 223/943/6633 hand={hand}; full scale: {published}")


def test_8_statistics():
    t, df = t_statistic([2, 2, 2, 0], [1, 1, 1, 1])
    p = paired_ttest([2, 2, 2, 0], [1, 1, 1, 1])
    example = abs(t - 1.0) <= 1e-3 and df == 3 and abs(p - 0.391) <= 1e-3

    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(3, 30))
        x = rng.normal(0.7, 0.1, n)
        y = x + rng.normal(rng.uniform(-0.05, 0.05), 0.03, n)
        ts, dfs = t_statistic(x, y)
        ours = paired_ttest(x, y)
        worst = max(worst, abs(ours - 2 * stats.t.sf(abs(ts), dfs)), abs(ours - t_two_sided_quadrature(ts, dfs)))

    edge = [PValueCell(("a", "b"), v, "p", 5).bold for v in (ALPHA, math.nextafter(ALPHA, 1), 0.049, 0.9)]
    runs_matrix = pvalue_matrix(_fabricated_rows())
    consistent = all(c.bold == (c.p_value is not None and c.p_value > ALPHA) for cells in runs_matrix.values() for c in cells)
    ok = example and worst <= 1e-6 and edge == [False, True, False, True] and consistent
    record(8, "statistics", ok, f"t={t:.3f} df={df} p={p:.4f}; max|p-oracle|={worst:.1e}; bold edge {edge}")


def _fabricated_rows():
    from mti.stats_report import collect_runs, flatten
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        _, records, _ = collect_runs(fabricate_runs(tmp, n_folds=1, n_slices=6))
    return flatten(records)


# -- criterion 9: structure of the rendered tables ---------------------------------


def _md_tables(text):
    """Split the markdown report into {heading: [rows as cell lists]}."""
    tables, current = {}, None
    for line in text.splitlines():
        if line.startswith("# "):
            current = line[2:]
            tables[current] = []
        elif line.startswith("|") and current is not None and not re.fullmatch(r"\|(---\|)+", line):
            tables[current].append([c.strip() for c in line.strip("|").split("|")])
    return tables


def _check_structure(out_dir, scenario_subset):
    md = (out_dir / "tables.md").read_text()
    tables = _md_tables(md)
    problems = []
    heads = list(tables)
    if len(heads) != 3:
        return [f"expected 3 tables, found {heads}"]
    labels = ["Unet-ST", "cGAN-ST", "Unet-MT", "cGAN-MT"]
    for head, ids in zip(heads[:2], ((1, 2), (3, 4, 5))):
        rows = tables[head]
        if rows[0] != ["Scen.", "Sub", "Metric", *labels, "Metric", *labels]:
            problems.append(f"{head}: header {rows[0]}")
        body = rows[1:]
        if len(body) != len(ids) * 2 * 4:
            problems.append(f"{head}: {len(body)} body rows")
        if any(len(r) != 12 for r in body):
            problems.append(f"{head}: ragged rows")
        for i, sid in enumerate(ids):
            for j, sub in enumerate("AB"):
                block = body[8 * i + 4 * j : 8 * i + 4 * j + 4]
                if block[0][:2] != [str(sid), sub] or not block[0][2].startswith("Task 1:"):
                    problems.append(f"{head}: block {sid}{sub} title row {block[0][:3]}")
                metric_col = [r[2] for r in block[1:]]
                seg = sid >= 3
                want = ["Dice", "FPR", "Epochs"] if seg else ["SSIM", "NCC", "Epochs"]
                if metric_col != want:
                    problems.append(f"{head}: {sid}{sub} metric rows {metric_col}")
                epochs = block[3][3:7] + block[3][8:]
                for cell in epochs:
                    if cell != "n/a" and not re.fullmatch(r"\d+[*-]?", cell):
                        problems.append(f"{head}: epoch cell {cell!r}")
                for r in block[1:3]:
                    for cell in r[3:7] + r[8:]:
                        if cell != "n/a" and not re.fullmatch(r"-?\d+\.\d{3} ± \d+\.\d{3}", cell):
                            problems.append(f"{head}: value cell {cell!r}")
                present = f"{sid}{sub}" in scenario_subset
                if present == ("n/a" in block[1][3:7]):
                    problems.append(f"{head}: {sid}{sub} presence mismatch")
    for note in FOOTNOTES:
        if note not in md:
            problems.append(f"missing footnote {note!r}")

    rows = tables[heads[2]]
    want_head = ["Scen.", "Sub"] + [f"Task {t}: {a} vs. {b}" for t in (1, 2)
                                    for a, b in (("Unet-ST", "cGAN-ST"), ("Unet-MT", "cGAN-MT"),
                                                 ("Unet-ST", "Unet-MT"), ("cGAN-ST", "cGAN-MT"))]
    if rows[0] != want_head:
        problems.append(f"p-value header {rows[0]}")
    if [r[:2] for r in rows[1:]] != [[str(i), s] for i in range(1, 6) for s in "AB"]:
        problems.append("p-value row labels")
    with open(out_dir / "table3.csv") as fh:
        csv_rows = list(csv.DictReader(fh))
    for r in csv_rows:
        if r["status"] == "p" and (float(r["p_value"]) > ALPHA) != (r["bold"] == "1"):
            problems.append(f"bold mismatch {r}")
    bolded = sum(c.startswith("**") for row in rows[1:] for c in row[2:])
    if bolded != sum(r["bold"] == "1" for r in csv_rows):
        problems.append("markdown bolding disagrees with table3.csv")
    return problems


def test_9_table_structure(tmp_path):
    problems = []
    everything = fabricate_runs(tmp_path / "all")
    render_report(everything, tmp_path / "r_all")
    problems += _check_structure(tmp_path / "r_all", {s.name for s in builtin_scenarios()})
    subset = [s for s in builtin_scenarios() if s.name in ("1A", "4B")]
    partial = fabricate_runs(tmp_path / "part", n_folds=1, scenarios=subset)
    render_report(partial, tmp_path / "r_part")
    problems += _check_structure(tmp_path / "r_part", {"1A", "4B"})
    record(9, "table structure", not problems, "; ".join(problems[:5]) or "full and partial run sets render 3 isomorphic tables")
