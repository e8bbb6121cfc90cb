import pytest
import torch

from aada.checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from aada.networks import AdapterSpec, ClassifierSpec, DiscriminatorSpec, ModelBundle, build_adapter, build_classifier, build_discriminator


def bundle():
    c = build_classifier(ClassifierSpec(3, 4, 0.125, 2), 1)
    a = build_adapter(AdapterSpec(3, 2, 16, 8), 2)
    d = build_discriminator(DiscriminatorSpec(3, 8), 3)
    opt = torch.optim.Adam(a.parameters(), 1e-3)
    a(torch.randn(1, 3, 32, 32)).sum().backward()
    opt.step()
    return ModelBundle(c, a, d, {"adapter": opt.state_dict()}, epoch=7)


def test_round_trip(tmp_path):
    b = bundle()
    path = save_checkpoint(tmp_path / "sub" / "e7.pt", b, normalization_stats={"mean": [0.0]})
    back, payload = load_checkpoint(path)
    assert payload["format"] == FORMAT_VERSION and payload["normalization_stats"] == {"mean": [0.0]}
    assert back.epoch == 7
    for name in ("classifier", "adapter", "discriminator"):
        ours, theirs = getattr(b, name).state_dict(), getattr(back, name).state_dict()
        assert ours.keys() == theirs.keys()
        for k in ours:
            assert torch.equal(ours[k], theirs[k]), (name, k)
    assert back.optimizer_states["adapter"]["param_groups"][0]["lr"] == 1e-3
    x = torch.randn(1, 3, 96, 96)
    b.discriminator.eval(), back.discriminator.eval()
    assert torch.equal(b.discriminator(x), back.discriminator(x))


def test_classifier_only(tmp_path):
    c = build_classifier(ClassifierSpec(3, 4, 0.125, 2), 1)
    back, _ = load_checkpoint(save_checkpoint(tmp_path / "c.pt", ModelBundle(c)))
    assert back.adapter is None and back.discriminator is None


def test_no_temporary_files_left(tmp_path):
    save_checkpoint(tmp_path / "a.pt", bundle())
    assert [p.name for p in tmp_path.iterdir()] == ["a.pt"]


def test_wrong_format(tmp_path):
    torch.save({"format": 99}, tmp_path / "bad.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.pt")
