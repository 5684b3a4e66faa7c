import pytest
import torch

from models import (FAMILIES, FreezePolicy, InputShapeError, ModelBuildError, ModelSpec, NeckSpec,
                    build_model, build_neck, count_params, default_neck_spec, load_pretrained, midplanes_for,
                    model_from_payload, neck_forward, weights_payload)
from training import focal_loss

RESNET18_BACKBONE = 11_176_512
RESNET18_LAYER3_LAYER4 = 10_493_440
HEAD_512 = 512 * 2 + 2
HEAD_64 = 64 * 2 + 2


def lstm_params(f, h, layers):
    total = 4 * (f * h + h * h + 2 * h)
    return total + (layers - 1) * 4 * (2 * h * h + 2 * h)


def transformer_layer_params(d, ff):
    attention = 3 * d * d + 3 * d + d * d + d
    feedforward = d * ff + ff + ff * d + d
    return attention + feedforward + 4 * d


def full(family, unfrozen=0):
    spec = ModelSpec(family=family, neck=default_neck_spec(family))
    return count_params(build_model(spec, FreezePolicy(unfrozen)))


def tiny_spec(family, positional=True):
    neck = None
    if family in ("resnet18_lstm", "resnet18_mlp", "resnet18_transformer"):
        kind = family.split("_")[1]
        neck = NeckSpec(kind=kind, hidden_size=8, num_layers=2, attention_heads=4, feedforward_dim=16,
                        dropout=0.0, positional_encoding=positional)
    return ModelSpec(family=family, neck=neck, base_width=4, num_timesteps=4)


def tiny_input(family, batch=2, seed=0, dtype=torch.float32):
    generator = torch.Generator().manual_seed(seed)
    shape = (batch, 3, 16, 16) if family == "image_resnet18" else (batch, 3, 4, 16, 16)
    return torch.randn(shape, generator=generator, dtype=dtype)


def test_image_model_params():
    report = full("image_resnet18")
    assert report.total_params == RESNET18_BACKBONE + HEAD_512
    assert report.trainable_params == 1_026
    assert report.breakdown["backbone"]["trainable"] == 0

    assert full("image_resnet18", 2).trainable_params == RESNET18_LAYER3_LAYER4 + HEAD_512


def test_lstm_neck_params():
    report = full("resnet18_lstm")
    assert lstm_params(512, 64, 2) == 181_248
    assert report.breakdown["neck"]["total"] == 181_248
    assert report.trainable_params == 181_248 + HEAD_64
    assert report.total_params == RESNET18_BACKBONE + 181_248 + HEAD_64
    assert full("resnet18_lstm", 2).trainable_params == RESNET18_LAYER3_LAYER4 + 181_248 + HEAD_64


def test_mlp_neck_params():
    report = full("resnet18_mlp")
    assert report.breakdown["neck"]["total"] == 8 * 512 * 64 + 64 == 262_208
    assert report.total_params == RESNET18_BACKBONE + 262_208 + HEAD_64


def test_transformer_neck_params():
    report = full("resnet18_transformer")
    expected_neck = 2 * transformer_layer_params(512, 3584) + 8 * 512
    assert expected_neck == 9_457_664
    assert report.breakdown["neck"]["total"] == expected_neck
    assert report.trainable_params == expected_neck + HEAD_512
    assert abs(report.total_params - 20.6e6) <= 0.02 * 20.6e6


def test_r2plus1d_params():
    transfer = full("r2plus1d")
    assert transfer.trainable_params == 1_026
    assert abs(transfer.total_params - 31.3e6) <= 0.02 * 31.3e6
    finetune = full("r2plus1d", 1)
    assert abs(finetune.trainable_params - 23.5e6) <= 0.03 * 23.5e6


def test_midplanes_matches_factorization_width():
    assert midplanes_for(64, 64) == 144
    assert midplanes_for(64, 128) == 230
    assert midplanes_for(512, 512) == 1152


def test_unfrozen_blocks_count_from_output_end():
    spec = tiny_spec("image_resnet18")
    trainable = [count_params(build_model(spec, FreezePolicy(k))).trainable_params for k in range(6)]
    assert trainable == sorted(trainable)
    assert trainable[5] == count_params(build_model(spec, FreezePolicy(5))).total_params


@pytest.mark.parametrize("family", FAMILIES)
def test_tiny_forward_shapes(family):
    model = build_model(tiny_spec(family), FreezePolicy(5)).eval()
    scores = model(tiny_input(family, batch=3))
    assert scores.shape == (3, 2)
    assert torch.isfinite(scores).all()


def test_wrong_timesteps_rejected():
    model = build_model(tiny_spec("resnet18_lstm")).eval()
    with pytest.raises(InputShapeError, match="T=4"):
        model(torch.randn(2, 3, 5, 16, 16))
    with pytest.raises(InputShapeError):
        model(torch.randn(2, 3, 16, 16))


def test_unknown_family_and_neck_mismatch():
    with pytest.raises(ModelBuildError, match="valid"):
        build_model(ModelSpec(family="resnet50"))
    with pytest.raises(ModelBuildError):
        build_model(ModelSpec(family="resnet18_lstm", neck=NeckSpec(kind="mlp")))
    with pytest.raises(ModelBuildError):
        build_model(ModelSpec(family="image_resnet18", neck=NeckSpec(kind="lstm")))


def test_frozen_batchnorm_stays_in_eval_mode():
    model = build_model(tiny_spec("resnet18_lstm"), FreezePolicy(1))
    model.train()
    assert not model.backbone.bn1.training
    assert not model.backbone.layer3[0].bn1.training
    assert model.backbone.layer4[0].bn1.training


def permuted_outputs(family, positional):
    torch.manual_seed(0)
    model = build_model(tiny_spec(family, positional), FreezePolicy(5)).eval()
    x = tiny_input(family)
    perm = torch.tensor([2, 0, 3, 1])
    with torch.no_grad():
        return model(x), model(x[:, :, perm])


def test_sequence_order_matters_with_positions():
    for family in ("resnet18_lstm", "resnet18_mlp", "r2plus1d"):
        a, b = permuted_outputs(family, True)
        assert not torch.allclose(a, b, atol=1e-7), family


def test_transformer_without_positions_ignores_order():
    a, b = permuted_outputs("resnet18_transformer", False)
    assert torch.allclose(a, b, atol=1e-5)


@pytest.mark.parametrize("family", FAMILIES)
def test_gradients_match_finite_differences(family):
    torch.manual_seed(1)
    model = build_model(tiny_spec(family), FreezePolicy(5)).double().eval()
    x = tiny_input(family, dtype=torch.float64)
    y = torch.tensor([0, 1])

    def loss():
        return focal_loss(model(x), y, gamma=2.0)

    model.zero_grad()
    loss().backward()

    eps = 1e-6
    generator = torch.Generator().manual_seed(2)
    checked, mismatched = 0, []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        flat = param.data.view(-1)
        grad = param.grad.view(-1)
        count = max(1, flat.numel() // 100)
        for i in torch.randperm(flat.numel(), generator=generator)[:count].tolist():
            analytic = grad[i].item()
            original = flat[i].item()
            flat[i] = original + eps
            plus = loss().item()
            flat[i] = original - eps
            minus = loss().item()
            flat[i] = original
            numeric = (plus - minus) / (2 * eps)
            checked += 1
            if abs(analytic - numeric) > 1e-3 * max(abs(analytic), abs(numeric)) + 1e-8:
                mismatched.append((name, i, analytic, numeric))

    assert checked >= sum(p.numel() for p in model.parameters()) // 100
    # A perturbation can cross a ReLU or max-pool kink; those few points have no derivative
    assert len(mismatched) <= max(1, checked // 200), mismatched[:5]


def test_weights_round_trip(tmp_path):
    model = build_model(tiny_spec("resnet18_transformer"), FreezePolicy(2)).eval()
    path = str(tmp_path / "w.pt")
    torch.save(weights_payload(model), path)
    loaded = model_from_payload(torch.load(path, weights_only=False)).eval()
    x = tiny_input("resnet18_transformer")
    with torch.no_grad():
        assert torch.equal(model(x), loaded(x))
    assert count_params(loaded).trainable_params == count_params(model).trainable_params


def test_load_pretrained_ignores_classifier_and_checks_shapes(tmp_path):
    source = build_model(tiny_spec("image_resnet18"))
    state = dict(source.backbone.state_dict())
    state["fc.weight"] = torch.zeros(1000, 32)
    path = str(tmp_path / "pre.pt")
    torch.save(state, path)

    target = build_model(tiny_spec("image_resnet18"))
    load_pretrained(target, path)
    assert torch.equal(target.backbone.conv1.weight, source.backbone.conv1.weight)

    state["conv1.weight"] = torch.zeros(8, 3, 7, 7)
    torch.save(state, path)
    with pytest.raises(ModelBuildError, match="shape mismatch"):
        load_pretrained(target, path)


@pytest.mark.parametrize("kind,out_features", [("lstm", 8), ("mlp", 8), ("transformer", 16)])
def test_neck_forward_fuses_timesteps(kind, out_features):
    neck = build_neck(NeckSpec(kind, hidden_size=8, num_layers=1, attention_heads=2, feedforward_dim=32), 16, 4)
    neck.eval()
    fused = neck_forward(neck, torch.randn(3, 4, 16))
    assert fused.shape == (3, out_features)

    with pytest.raises(InputShapeError, match="T=4"):
        neck_forward(neck, torch.randn(3, 5, 16))
    with pytest.raises(InputShapeError):
        neck_forward(neck, torch.randn(3, 16))
