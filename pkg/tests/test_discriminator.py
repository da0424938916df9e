import pytest
import torch

from surgseg.discriminator import CONFIDENCE_EPS, Discriminator, one_hot
from surgseg.errors import DataError
from surgseg.losses import discriminator_loss


def test_one_hot_small_example():
    labels = torch.tensor([[0, 2], [1, 1]])
    hot = one_hot(labels, 3)
    assert hot.shape == (3, 2, 2)
    assert hot.dtype == torch.float32
    expected = torch.tensor(
        [[[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [1.0, 1.0]], [[0.0, 1.0], [0.0, 0.0]]]
    )
    assert torch.equal(hot, expected)


def test_one_hot_batched_round_trip(rng):
    labels = torch.from_numpy(rng.integers(0, 4, size=(2, 8, 8)))
    hot = one_hot(labels, 4)
    assert hot.shape == (2, 4, 8, 8)
    assert torch.equal(hot.argmax(dim=1), labels.long())
    assert torch.equal(hot.sum(dim=1), torch.ones(2, 8, 8))


def test_one_hot_reports_offending_value():
    with pytest.raises(DataError, match="7"):
        one_hot(torch.tensor([[0, 7]]), 4)
    with pytest.raises(DataError, match="-1"):
        one_hot(torch.tensor([[-1]]), 4)
    with pytest.raises(DataError, match="integer"):
        one_hot(torch.tensor([[0.5]]), 4)


@pytest.fixture(scope="module")
def disc():
    torch.manual_seed(0)
    return Discriminator(num_classes=4, base_channels=8)


def test_confidence_map_shape_and_open_interval(disc):
    probs = torch.softmax(torch.randn(2, 4, 64, 96), dim=1)
    conf = disc(probs)
    assert conf.shape == (2, 1, 64, 96)
    assert (conf > 0).all() and (conf < 1).all()


def test_extreme_logits_stay_inside_open_interval(disc):
    # saturate the sigmoid: clamping must keep confidences usable in BCE
    probs = torch.softmax(torch.randn(1, 4, 32, 32) * 50, dim=1)
    with torch.no_grad():
        for p in disc.parameters():
            p.mul_(30.0)
        conf = disc(probs)
        for p in disc.parameters():
            p.div_(30.0)
    assert (conf >= CONFIDENCE_EPS).all() and (conf <= 1 - CONFIDENCE_EPS).all()
    loss = discriminator_loss(conf, conf)
    assert torch.isfinite(loss)


def test_channel_mismatch_rejected(disc):
    with pytest.raises(DataError, match="class channels"):
        disc(torch.softmax(torch.randn(1, 3, 64, 64), dim=1))


def test_small_input_rejected(disc):
    with pytest.raises(DataError, match="stride-2"):
        disc(torch.softmax(torch.randn(1, 4, 16, 16), dim=1))
    with pytest.raises(DataError, match="4-D"):
        disc(torch.randn(4, 64, 64))


def test_channel_progression():
    d = Discriminator(num_classes=2, base_channels=64)
    assert [d.conv1.out_channels, d.conv2.out_channels, d.conv3.out_channels, d.conv4.out_channels] == [
        64,
        128,
        256,
        512,
    ]
    assert d.conv5.out_channels == 1
    assert all(c.stride == (2, 2) and c.kernel_size == (4, 4) for c in [d.conv1, d.conv2, d.conv3, d.conv4, d.conv5])


def test_discriminator_learns_on_fixed_batch(disc):
    torch.manual_seed(3)
    real = one_hot(torch.randint(0, 4, (2, 64, 64)), 4)
    fake = torch.full((2, 4, 64, 64), 0.25)
    opt = torch.optim.Adam(disc.parameters(), lr=1e-3)
    first = None
    for _ in range(30):
        loss = discriminator_loss(disc(real), disc(fake))
        if first is None:
            first = loss.item()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert loss.item() < first
