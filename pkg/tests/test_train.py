import math

import numpy as np
import pytest
import torch

from shotfi.dataset import LabeledArrays
from shotfi.nets import CpcStack, SetModel, multiuser_arch, parameter_hash, singleuser_arch
from shotfi.train import (MU_ADAPT, MU_SOURCE, SU_ADAPT, SU_SOURCE, ContractViolation, TrainConfig,
                          TrainingError, adapt_multiuser, adapt_multiuser_with_cpc, adapt_singleuser,
                          evaluate, predict, pretrain_cpc, pretrain_rotation, seed_everything,
                          train_source_multiuser, train_source_singleuser)

FAST = dict(epochs=2, batch_size=16)


def mu_arch(data):
    return multiuser_arch(data.x.shape[2], data.y.shape[1], data.num_classes, same_padding=True)


def su_arch(data):
    return singleuser_arch(data.x.shape[2], 6, width=4)


@pytest.fixture(scope="module")
def mu_source(tiny_mu):
    return train_source_multiuser(tiny_mu["source"], mu_arch(tiny_mu["source"]), MU_SOURCE.replace(**FAST))


@pytest.fixture(scope="module")
def su_source(tiny_su):
    return train_source_singleuser(tiny_su["source"], su_arch(tiny_su["source"]), SU_SOURCE.replace(**FAST))


def test_presets_follow_published_hyperparameters():
    assert (MU_SOURCE.epochs, MU_SOURCE.learning_rate, MU_SOURCE.label_smoothing) == (50, 1e-3, 0.2)
    assert (MU_ADAPT.lambda_ent, MU_ADAPT.lambda_rot, MU_ADAPT.learning_rate, MU_ADAPT.batch_size,
            MU_ADAPT.epochs) == (1.0, 0.5, 1e-4, 64, 50)
    assert (SU_SOURCE.optimizer, SU_SOURCE.learning_rate, SU_SOURCE.momentum, SU_SOURCE.weight_decay,
            SU_SOURCE.batch_size, SU_SOURCE.label_smoothing) == ("sgd", 0.1, 0.9, 5e-4, 32, 0.1)
    assert (SU_ADAPT.lambda_cls, SU_ADAPT.lambda_rot, SU_ADAPT.lambda_cpc, SU_ADAPT.epochs,
            SU_ADAPT.batch_size) == (0.1, 0.3, 0.3, 70, 32)
    assert MU_ADAPT.rot_pretrain_epochs == 70 and SU_ADAPT.cpc_pretrain_epochs == 70


def test_config_validation():
    with pytest.raises(ValueError, match="lambda_rot"):
        TrainConfig(lambda_rot=-1)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError, match="unknown"):
        MU_ADAPT.replace(lambda_foo=1)
    assert "lambda_cpc" in TrainConfig.keys()


def test_zero_epochs_equals_initialization(tiny_mu):
    src = tiny_mu["source"]
    res = train_source_multiuser(src, mu_arch(src), MU_SOURCE.replace(epochs=0, seed=3))
    seed_everything(3)
    fresh = SetModel(mu_arch(src))
    fresh.norm.fit(src.x)
    assert parameter_hash(res.model) == parameter_hash(fresh)
    assert res.losses == []


def test_source_training_deterministic(tiny_mu):
    src = tiny_mu["source"]
    cfg = MU_SOURCE.replace(epochs=2, batch_size=16, seed=5, deterministic=True)
    a = train_source_multiuser(src, mu_arch(src), cfg)
    b = train_source_multiuser(src, mu_arch(src), cfg)
    assert a.losses == b.losses
    assert parameter_hash(a.model) == parameter_hash(b.model)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(tiny_mu):
    src = tiny_mu["source"]
    bad = LabeledArrays(src.x.copy(), src.y, src.num_classes)
    bad.x[0, 0, 0, 0] = np.inf
    with pytest.raises(TrainingError, match="non-finite"):
        train_source_multiuser(bad, mu_arch(src), MU_SOURCE.replace(epochs=1, batch_size=64))


def test_arch_kind_checked(tiny_mu):
    with pytest.raises(ValueError):
        train_source_singleuser(tiny_mu["source"], mu_arch(tiny_mu["source"]))


def test_predict_shapes(mu_source, tiny_mu):
    probs, feats = predict(mu_source.model, tiny_mu["target"].x)
    assert probs.shape == (32, 3, 4) and feats.shape == (32, 128)
    np.testing.assert_allclose(probs.sum(-1), 1, atol=1e-5)
    assert not mu_source.model.training


def test_rotation_pretraining(mu_source, tiny_mu):
    model = mu_source.model
    before = parameter_hash(model.backbone) + parameter_hash(model.bottleneck)
    fresh = SetModel(model.arch)
    fresh.load_state_dict(model.state_dict())
    torch.nn.init.normal_(fresh.rot_head.weight, std=1e-3)
    torch.nn.init.zeros_(fresh.rot_head.bias)
    hist = pretrain_rotation(fresh, tiny_mu["target"].unlabeled(), epochs=3, batch_size=16)
    assert parameter_hash(fresh.backbone) + parameter_hash(fresh.bottleneck) == before
    assert abs(hist[0] - math.log(2)) < 0.05
    assert len(hist) == 3


def test_rotation_pretraining_decreases(tiny_mu):
    src = tiny_mu["source"]
    wins = 0
    for seed in range(3):
        res = train_source_multiuser(src, mu_arch(src), MU_SOURCE.replace(epochs=1, batch_size=16, seed=seed))
        hist = pretrain_rotation(res.model, tiny_mu["target"].unlabeled(), epochs=10, batch_size=16, seed=seed)
        wins += all(b < a for a, b in zip(hist, hist[1:]))
    assert wins >= 2


def test_adapt_multiuser_contracts(mu_source, tiny_mu):
    cfg = MU_ADAPT.replace(epochs=2, batch_size=16, rot_pretrain_epochs=2)
    model = mu_source.model
    h0 = parameter_hash(model)
    adapted, rep = adapt_multiuser(model, tiny_mu["target"].unlabeled(), cfg, probe=tiny_mu["target"])
    assert rep.classifier_hash_before == rep.classifier_hash_after == parameter_hash(model.classifier)
    assert parameter_hash(adapted.classifier) == parameter_hash(model.classifier)
    assert parameter_hash(adapted.backbone) != parameter_hash(model.backbone)
    assert parameter_hash(model) == h0
    assert rep.label_access_count == 0
    assert len(rep.history) == 2 and len(rep.probe) == 3 and len(rep.rotation_pretrain) == 2
    assert {"total", "im", "ent", "rot"} <= set(rep.history[0])


def test_adapt_rejects_labeled_data_and_tripwire(mu_source, tiny_mu):
    cfg = MU_ADAPT.replace(epochs=1, batch_size=16, rot_pretrain_epochs=0)
    with pytest.raises(TypeError):
        adapt_multiuser(mu_source.model, tiny_mu["target"], cfg)
    view = tiny_mu["target"].unlabeled()
    with pytest.raises(PermissionError):
        view.y
    with pytest.raises(ContractViolation, match="labels"):
        adapt_multiuser(mu_source.model, view, cfg)


def test_shot_im_degeneration(mu_source, tiny_mu):
    cfg = MU_ADAPT.replace(epochs=1, batch_size=16, lambda_rot=0.0, gent="standard")
    _, rep = adapt_multiuser(mu_source.model, tiny_mu["target"].unlabeled(), cfg)
    assert rep.rotation_pretrain == [] and rep.history[0]["rot"] == 0.0


def test_adaptation_deterministic(mu_source, tiny_mu):
    cfg = MU_ADAPT.replace(epochs=2, batch_size=16, rot_pretrain_epochs=2, deterministic=True)
    _, a = adapt_multiuser(mu_source.model, tiny_mu["target"].unlabeled(), cfg)
    _, b = adapt_multiuser(mu_source.model, tiny_mu["target"].unlabeled(), cfg)
    assert a.history == b.history and a.rotation_pretrain == b.rotation_pretrain


def test_adapt_multiuser_with_cpc_runs(mu_source, tiny_mu):
    # T=40 is too short for CPC; the run degrades to no CPC term instead of failing
    cfg = MU_ADAPT.replace(epochs=1, batch_size=16, rot_pretrain_epochs=1, lambda_cpc=0.3, cpc_pretrain_epochs=1)
    adapted, rep = adapt_multiuser_with_cpc(mu_source.model, tiny_mu["target"].unlabeled(), cfg)
    assert {"im", "rot", "cpc"} <= set(rep.history[0])


def test_cpc_initial_loss_near_ln_n(tiny_su):
    from shotfi.train import _cpc_batch_loss
    x = tiny_su["source"].x[:32]
    torch.manual_seed(0)
    cpc = CpcStack(x.shape[2])
    cpc.norm.fit(x)
    with torch.no_grad():
        loss = _cpc_batch_loss(cpc, torch.as_tensor(x), np.random.default_rng(0), SU_ADAPT)
    assert abs(loss.item() - math.log(32)) < 0.1


def test_cpc_pretraining_decreases(tiny_su):
    view = tiny_su["target"].unlabeled()
    torch.manual_seed(0)
    res = pretrain_cpc(view, SU_ADAPT.replace(cpc_batch_size=8), cpc=CpcStack(view.x.shape[2]), epochs=6)
    assert res.skipped == 0 and len(res.losses) == 6
    assert res.losses[-1] < res.losses[0]


def test_cpc_single_sample_batches_do_not_update(tiny_su):
    view = tiny_su["target"].unlabeled()
    cpc = CpcStack(view.x.shape[2], enc_dim=16, hidden=16, proj_dim=8)
    before = parameter_hash(cpc.encoder) + parameter_hash(cpc.gru) + parameter_hash(cpc.predictors)
    res = pretrain_cpc(view, SU_ADAPT.replace(cpc_batch_size=1), cpc=cpc, epochs=1)
    assert all(l == 0.0 for l in res.losses)
    assert parameter_hash(cpc.encoder) + parameter_hash(cpc.gru) + parameter_hash(cpc.predictors) == before


def test_cpc_skips_short_samples(tiny_mu):
    res = pretrain_cpc(tiny_mu["target"].unlabeled(), SU_ADAPT, epochs=1)
    assert res.skipped == len(tiny_mu["target"]) and res.losses == []


def test_adapt_singleuser(su_source, tiny_su):
    view = tiny_su["target"].unlabeled()
    cfg = SU_ADAPT.replace(epochs=2, batch_size=12, rot_pretrain_epochs=2, cpc_pretrain_epochs=1)
    cpc = pretrain_cpc(view, cfg, cpc=CpcStack(view.x.shape[2], enc_dim=16, hidden=16, proj_dim=8)).cpc
    adapted, rep = adapt_singleuser(su_source.model, view, cfg, probe=tiny_su["target"], cpc=cpc)
    assert rep.classifier_hash_before == rep.classifier_hash_after
    assert rep.history[0]["cls"] > 0 and rep.history[0]["cpc"] > 0
    assert 0 <= evaluate(adapted, tiny_su["target"]).accuracy <= 1
    _, rep2 = adapt_singleuser(su_source.model, view, cfg.replace(lambda_cpc=0.0), cpc=cpc)
    assert rep2.history[0]["cpc"] == 0.0


def test_adapt_kind_mismatch(su_source, mu_source, tiny_su, tiny_mu):
    with pytest.raises(ValueError):
        adapt_multiuser(su_source.model, tiny_su["target"].unlabeled())
    with pytest.raises(ValueError):
        adapt_singleuser(mu_source.model, tiny_mu["target"].unlabeled())
