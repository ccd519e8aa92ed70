import csv
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from scipy.linalg import orthogonal_procrustes

from qdpcqa import evalcli
from qdpcqa.evalcli import (
    SUITES,
    VARIANTS,
    desk_config,
    emit_embedding_plot,
    pca_2d,
    run_ablation,
    summarize,
    variant_config,
    write_results,
    write_summary,
)
from qdpcqa.synthetic import SyntheticDomainSpec, make_synthetic_domains
from qdpcqa.train import evaluate_model, train_run

from _util import same_log

TINY_SPEC = SyntheticDomainSpec.shifted(n_source=60, n_target=40)


def tiny_base(**kw):
    return desk_config(total_iters=12, warmup_iters=3, batch_size=8, widths=(2, 2, 4, 4),
                       predictor_hidden=4, discriminator_hidden=4, **kw)


def test_every_table_variant_exists():
    for name in ("no_sm", "plain_sm", "qsm", "stage1_only", "stage4_only", "stage23_only", "multilayer",
                 "mmd", "cod", "rca", "single_domain_aug", "dual_domain_aug", "no_adapt", "dann_only"):
        variant_config(name, desk_config())
    assert set(SUITES) == {"sm", "stage", "align", "da", "alpha", "adapt"}
    assert all(v in VARIANTS for suite in SUITES.values() for v in suite)
    with pytest.raises(ValueError):
        variant_config("cutmix", desk_config())
    with pytest.raises(ValueError):
        evalcli.suite_variants("loss")


def test_variant_flags():
    base = desk_config()
    assert variant_config("plain_sm", base).source_mix == "uniform"
    assert variant_config("stage4_only", base).stage_policy == "stage4"
    assert variant_config("cod", base).kernel_config().rank_weight_scope == "none"
    assert variant_config("single_domain_aug", base).target_mix is False
    assert variant_config("alpha_0.5", base).alpha == 0.5
    full = variant_config("qsm", base)
    assert full == variant_config("rca", base) == variant_config("multilayer", base) == base


def test_rca_without_alignment_weight_collapses():
    source, target = make_synthetic_domains(TINY_SPEC, np.random.default_rng(0))
    base = tiny_base()
    no_weight = train_run(variant_config("rca", base).replace(lambda_align=0.0), source, target)
    no_align = train_run(variant_config("rca", base).replace(alignment="none"), source, target)
    assert same_log(no_weight.loss_log, no_align.loss_log)
    # and with mixing also off it is exactly the adversarial-only baseline
    bare = train_run(variant_config("rca", base).replace(lambda_align=0.0, mix_probability=0.0), source, target)
    dann = train_run(variant_config("dann_only", base), source, target)
    assert same_log(bare.loss_log, dann.loss_log)


def test_ablation_seed_reproducible_and_shared_runs(tmp_path):
    kw = dict(base=tiny_base(), spec=TINY_SPEC, seeds=2)
    a = run_ablation(["qsm", "rca", "no_sm"], **kw)
    b = run_ablation(["qsm", "rca", "no_sm"], **kw)
    assert [r.row() for r in a] == [r.row() for r in b]
    by = {(r.variant, r.seed): r.report for r in a}
    assert by[("qsm", 0)] == by[("rca", 0)]
    write_results(tmp_path / "runs.csv", a)
    write_summary(tmp_path / "summary.csv", a)
    rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
    assert [r["variant"] for r in rows] == ["qsm", "rca", "no_sm"]
    assert all(r["n_seeds"] == "2" for r in rows)
    med = summarize(a)
    want = float(np.median([r.report.srocc for r in a if r.variant == "no_sm"]))
    assert float(rows[2]["srocc"]) == med["no_sm"].srocc == want
    assert len(list(csv.DictReader(open(tmp_path / "runs.csv")))) == 6


def test_ablation_needs_seeds():
    with pytest.raises(ValueError):
        run_ablation(["qsm"], base=tiny_base(), spec=TINY_SPEC, seeds=[])


def test_pca_recovers_planted_subspace():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(80, 2)) * [3.0, 1.0]
    basis, _ = np.linalg.qr(rng.normal(size=(6, 2)))
    x = z @ basis.T + rng.normal(size=6)
    a, b = x[:50], x[50:]
    pa, pb = pca_2d(a, b)
    proj = np.concatenate([pa, pb])
    zc = z - z.mean(0)
    r, _ = orthogonal_procrustes(proj, zc)
    assert np.abs(proj @ r - zc).max() < 1e-6


def test_identical_sets_coincide():
    f = np.random.default_rng(1).normal(size=(20, 5))
    pa, pb = pca_2d(f, f.copy())
    assert np.array_equal(pa, pb)


def test_pca_needs_two_components():
    with pytest.raises(ValueError):
        pca_2d(np.zeros((5, 1)))


def test_embedding_plot_is_valid_svg(tmp_path):
    rng = np.random.default_rng(2)
    path = emit_embedding_plot(rng.normal(size=(15, 4)), rng.normal(size=(12, 4)) + 1, tmp_path / "e.svg",
                               rng.uniform(size=15), rng.uniform(size=12))
    root = ET.parse(path).getroot()
    assert root.tag.endswith("svg")


def test_embedding_plot_errors(tmp_path):
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError, match="10"):
        emit_embedding_plot(rng.normal(size=(9, 4)), rng.normal(size=(12, 4)), tmp_path / "e.svg")
    with pytest.raises(ValueError, match="vector"):
        emit_embedding_plot(rng.normal(size=(12, 4)), rng.normal(size=(12, 4)), tmp_path / "e.png")


@pytest.mark.slow
def test_identity_shift_ceiling():
    """Noise-free labels and no shift: a longer supervised run ranks the target almost perfectly."""
    spec = SyntheticDomainSpec.identity(label_noise=0.0)
    source, target = make_synthetic_domains(spec, np.random.default_rng(0))
    st = train_run(variant_config("no_adapt", desk_config(total_iters=1500, warmup_iters=250)), source, target)
    assert evaluate_model(st.model, target).srocc > 0.95
