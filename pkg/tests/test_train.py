import math

import numpy as np
import pytest
import torch

from qdpcqa import align, mixup, train
from qdpcqa.data import QualityDataset
from qdpcqa.synthetic import SyntheticDomainSpec, make_synthetic_domains
from qdpcqa.train import (
    Phase,
    TrainConfig,
    TrainState,
    composite_loss,
    make_pseudo_labels,
    phase,
    sgd_step,
    train_run,
    write_metric_log,
)
from qdpcqa.nnx import forward_stages

from qdpcqa.evalcli import VARIANTS, desk_config

from _util import same_log

D = torch.float64


def tiny_cfg(**kw):
    base = dict(total_iters=12, warmup_iters=4, batch_size=6, widths=(2, 3, 3, 4), predictor_hidden=4,
                discriminator_hidden=4, dtype="float64", eval_every=6, lr=1e-2, feature_bandwidth=None)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def domains():
    return make_synthetic_domains(SyntheticDomainSpec.shifted(n_source=40, n_target=30),
                                  np.random.default_rng(0), dtype=np.float64)


# -- config and phases --------------------------------------------------------------

def test_defaults_follow_training_recipe():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.momentum, cfg.weight_decay) == (36, 0.9, 5e-4)
    assert (cfg.total_iters, cfg.warmup_iters) == (3000, 500)
    assert (cfg.tau, cfg.epsilon, cfg.alpha, cfg.mix_probability) == (5e-2, 1e-3, 1.0, 0.5)
    assert cfg.lambda_pred == cfg.lambda_adv == cfg.lambda_align == 1.0


def test_phase_boundary():
    cfg = TrainConfig()
    assert phase(0, cfg) is Phase.WARMUP
    assert phase(499, cfg) is Phase.WARMUP
    assert phase(500, cfg) is Phase.JOINT
    with pytest.raises(ValueError):
        phase(3000, cfg)


@pytest.mark.parametrize("bad", [dict(warmup_iters=3000), dict(lr=0.0), dict(alignment="coral"),
                                 dict(mix_probability=1.5), dict(batch_size=1), dict(stage_policy="x")])
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_file_round_trip(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("total_iters: 20\nwarmup_iters: 5\nwidths: [2, 2, 4, 4]\nalignment: cod\n")
    cfg = TrainConfig.from_file(path)
    assert cfg.widths == (2, 2, 4, 4) and cfg.alignment == "cod"
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    path.write_text("total_iters: 20\nwarmup_iters: 5\nlearning_rate: 1\n")
    with pytest.raises(ValueError, match="learning_rate"):
        TrainConfig.from_file(path)


def test_cod_config_drops_rank_weights():
    assert TrainConfig(alignment="cod").kernel_config().rank_weight_scope == "none"
    assert TrainConfig().kernel_config().rank_weight_scope == "all"


# -- SGD ----------------------------------------------------------------------------

def test_sgd_zero_gradient_noop():
    w = torch.tensor([1.5, -2.0], dtype=D)
    v = torch.zeros(2, dtype=D)
    sgd_step([w], [torch.zeros(2, dtype=D)], [v], lr=0.1, momentum=0.9, weight_decay=0.0)
    assert w.tolist() == [1.5, -2.0]


def test_sgd_single_step():
    w, v = torch.tensor([1.0], dtype=D), torch.zeros(1, dtype=D)
    sgd_step([w], [torch.ones(1, dtype=D)], [v], lr=0.1, momentum=0.0, weight_decay=0.0)
    assert float(w) == pytest.approx(0.9, abs=1e-15)


def test_sgd_two_momentum_steps():
    w, v = torch.tensor([1.0], dtype=D), torch.zeros(1, dtype=D)
    for _ in range(2):
        sgd_step([w], [torch.ones(1, dtype=D)], [v], lr=0.1, momentum=0.9, weight_decay=0.0)
    assert float(w) == pytest.approx(1 - 0.1 * 1 - 0.1 * 1.9, abs=1e-15)
    assert float(w) == pytest.approx(0.71, abs=1e-15)


def test_sgd_coupled_weight_decay():
    w, v = torch.tensor([2.0], dtype=D), torch.zeros(1, dtype=D)
    sgd_step([w], [torch.ones(1, dtype=D)], [v], lr=0.1, momentum=0.9, weight_decay=5e-4)
    assert float(w) == pytest.approx(2.0 - 0.1 * (1 + 5e-4 * 2.0), abs=1e-15)


def test_sgd_rejects_non_finite_gradient():
    w, v = torch.tensor([1.0], dtype=D), torch.zeros(1, dtype=D)
    with pytest.raises(FloatingPointError):
        sgd_step([w], [torch.tensor([math.nan], dtype=D)], [v], lr=0.1)


# -- composite loss -----------------------------------------------------------------

def batch(domains, n=6, seed=0):
    source, target = domains
    rng = np.random.default_rng(seed)
    si, ti = rng.choice(len(source), n, replace=False), rng.choice(len(target), n, replace=False)
    return (torch.as_tensor(source.images[si]), torch.as_tensor(source.unit_labels[si]),
            torch.as_tensor(target.images[ti]))


def fresh(cfg, domains):
    state = TrainState.fresh(cfg)
    state.stratifier = mixup.fit_stratifier(domains[0].unit_labels)
    return state


def test_pure_regression_loss_is_mse(domains):
    cfg = tiny_cfg(lambda_adv=0.0, lambda_align=0.0)
    st = fresh(cfg, domains)
    x_s, y_s, x_t = batch(domains)
    out = composite_loss(st.model, x_s, y_s, x_t, cfg, Phase.JOINT, False, st.stratifier, np.random.default_rng(0))
    mse = ((st.model.predictor(st.model.backbone(x_s)) - y_s) ** 2).mean()
    assert out.total.item() == pytest.approx(mse.item(), abs=1e-15)
    assert math.isnan(out.l_r)


def test_perfect_predictions_on_duplicated_domains(domains):
    cfg = tiny_cfg(feature_bandwidth=1.0)
    st = fresh(cfg, domains)
    x_s, _, _ = batch(domains)
    with torch.no_grad():
        y_perfect = st.model.predictor(st.model.backbone(x_s))
    out = composite_loss(st.model, x_s, y_perfect, x_s.clone(), cfg, Phase.JOINT, False, st.stratifier,
                         np.random.default_rng(0))
    assert out.l_p == 0.0
    assert abs(out.l_r) < 1e-8
    assert out.total.item() == pytest.approx(cfg.lambda_adv * out.l_d, abs=1e-8)


def test_mixed_and_original_share_alignment_term(domains):
    cfg = tiny_cfg(feature_bandwidth=1.0)
    st = fresh(cfg, domains)
    x_s, y_s, x_t = batch(domains)
    args = (st.model, x_s, y_s, x_t, cfg, Phase.JOINT)
    orig = composite_loss(*args, False, st.stratifier, np.random.default_rng(1))
    mixed = composite_loss(*args, True, st.stratifier, np.random.default_rng(1))
    assert mixed.events and not orig.events
    assert abs(mixed.l_r - orig.l_r) < 1e-12
    assert mixed.l_p != orig.l_p and mixed.l_d != orig.l_d


def test_warmup_skips_alignment(domains):
    cfg = tiny_cfg()
    st = fresh(cfg, domains)
    x_s, y_s, x_t = batch(domains)
    out = composite_loss(st.model, x_s, y_s, x_t, cfg, Phase.WARMUP, False, st.stratifier, np.random.default_rng(0))
    assert math.isnan(out.l_r)
    assert out.total.item() == pytest.approx(out.l_p + out.l_d, abs=1e-15)


def test_loss_weight_linearity(domains):
    x_s, y_s, x_t = batch(domains)

    def total(l1):
        cfg = tiny_cfg(lambda_pred=l1, feature_bandwidth=1.0)
        st = fresh(tiny_cfg(), domains)
        return float(composite_loss(st.model, x_s, y_s, x_t, cfg, Phase.JOINT, False, st.stratifier,
                                    np.random.default_rng(0)).total.item())

    t0, t1, t3 = total(0.0), total(1.0), total(3.0)
    assert t3 - t0 == pytest.approx(3 * (t1 - t0), rel=1e-12)


def test_pseudo_labels_are_fresh_and_detached(domains):
    st = fresh(tiny_cfg(), domains)
    _, _, x_t = batch(domains)
    f = forward_stages(st.model.backbone, x_t).pooled
    p = make_pseudo_labels(st.model, f)
    assert not p.requires_grad
    assert torch.equal(p, st.model.predictor(f).detach())
    with torch.no_grad():
        for q in st.model.predictor.parameters():
            q.add_(0.1)
    assert not torch.equal(make_pseudo_labels(st.model, f), p)


def test_constant_predictor_gives_tied_pseudo_labels(domains):
    st = fresh(tiny_cfg(), domains)
    _, y_s, x_t = batch(domains)
    with torch.no_grad():
        for q in st.model.predictor.parameters():
            q.zero_()
    f = forward_stages(st.model.backbone, x_t).pooled
    p = make_pseudo_labels(st.model, f)
    assert torch.equal(p, torch.full_like(p, 0.5))
    w_tt = align.rank_weights(p, p, p, p)
    assert torch.count_nonzero(w_tt) == 0


# -- loop -----------------------------------------------------------------------------

def test_determinism_bit_exact(domains):
    cfg = tiny_cfg()
    a = train_run(cfg, *domains)
    b = train_run(cfg, *domains)
    assert same_log(a.loss_log, b.loss_log)
    assert same_log(a.metric_log, b.metric_log)
    for p, q in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(p, q)


def test_resume_matches_uninterrupted(domains, tmp_path):
    cfg = tiny_cfg()
    full = train_run(cfg, *domains)
    part = train_run(cfg, *domains, stop_at=7, checkpoint=tmp_path / "k.pt")
    assert part.iteration == 7
    resumed = train_run(cfg, *domains, state=TrainState.load(tmp_path / "k.pt"))
    assert same_log(resumed.loss_log, full.loss_log)
    for p, q in zip(resumed.model.parameters(), full.model.parameters()):
        assert torch.equal(p, q)


def test_ablation_collapse_to_dann(domains):
    collapsed = train_run(tiny_cfg(mix_probability=0.0, lambda_align=0.0), *domains)
    dann = train_run(tiny_cfg(mix_probability=0.0, alignment="none"), *domains)
    assert same_log(collapsed.loss_log, dann.loss_log)


def test_warmup_independent_of_alignment_hyperparameters(domains):
    cfg = tiny_cfg()
    a = train_run(cfg, *domains, stop_at=cfg.warmup_iters)
    b = train_run(cfg.replace(tau=0.3, epsilon=0.1, label_bandwidth=0.5), *domains, stop_at=cfg.warmup_iters)
    for p, q in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(p, q)
    assert same_log(a.loss_log, b.loss_log)


@pytest.mark.slow
def test_coin_flip_rate():
    source, target = make_synthetic_domains(SyntheticDomainSpec.shifted(n_source=20, n_target=20),
                                            np.random.default_rng(0))
    cfg = TrainConfig(total_iters=3000, warmup_iters=0, batch_size=2, widths=(1, 1, 1, 1),
                      predictor_hidden=2, discriminator_hidden=2, alignment="none", adversarial=False,
                      source_mix="none", target_mix=False, eval_every=10 ** 9)
    st = train_run(cfg, source, QualityDataset(target.images))
    rate = np.mean([row[5] for row in st.loss_log])
    assert abs(rate - 0.5) <= 0.02


def test_metric_log_and_diagnostics(domains, tmp_path):
    st = train_run(tiny_cfg(), *domains)
    assert [r[0] for r in st.metric_log] == [6, 12]
    write_metric_log(tmp_path / "m.csv", st)
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header == "iter,phase,L_P,L_D,L_R,plcc,srocc,krocc,rmse"
    assert len(st.diag_log) == st.cfg.total_iters - st.cfg.warmup_iters
    assert all(r[0] >= st.cfg.warmup_iters for r in st.diag_log)


def test_train_run_needs_labels_and_data(domains):
    source, target = domains
    with pytest.raises(ValueError):
        train_run(tiny_cfg(), QualityDataset(source.images), target)


@pytest.mark.slow
def test_identical_domains_sanity_run():
    """Supervised path on un-shifted domains learns the monotone quality cue."""
    spec = SyntheticDomainSpec.identity()
    source, target = make_synthetic_domains(spec, np.random.default_rng(0))
    cfg = desk_config(total_iters=500, warmup_iters=80, **VARIANTS["no_adapt"])
    st = train_run(cfg, source, target)
    assert train.evaluate_model(st.model, target).srocc > 0.9
