"""TorchScript test models and a rendered image shared across adapter tests."""

from __future__ import annotations

import pytest
import torch


class TinyEncoder(torch.nn.Module):
    """Average-pool cells mixed through a fixed 1x1 conv: [1,3,P,P] -> [1,4,c,c]."""

    def __init__(self, cell: int = 8, dim: int = 4):
        super().__init__()
        self.pool = torch.nn.AvgPool2d(cell)
        self.mix = torch.nn.Conv2d(3, dim, kernel_size=1)
        gen = torch.Generator().manual_seed(1234)
        with torch.no_grad():
            self.mix.weight.copy_(torch.rand(dim, 3, 1, 1, generator=gen))
            self.mix.bias.copy_(torch.linspace(0.1, 0.4, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.mix(self.pool(x))


class TinySegmenter(torch.nn.Module):
    """Darkness-thresholded disk around the positive, carved by negatives."""

    def forward(self, x: torch.Tensor, points: torch.Tensor, labels: torch.Tensor):
        dark = 1.0 - x[0].mean(dim=0)
        p = dark.shape[0]
        ys = torch.arange(p, dtype=torch.float32).view(-1, 1).expand(p, p)
        xs = torch.arange(p, dtype=torch.float32).view(1, -1).expand(p, p)
        mask = torch.zeros(p, p, dtype=torch.bool)
        for i in range(int(points.shape[1])):
            px = points[0, i, 0]
            py = points[0, i, 1]
            d2 = (ys - py) ** 2 + (xs - px) ** 2
            if bool(labels[0, i] > 0.5):
                seed = dark[int(py.item()), int(px.item())]
                mask = (d2 <= 400.0) & (dark >= 0.6 * seed)
            else:
                mask = mask & (d2 > 9.0)
        logits = torch.where(mask, torch.ones_like(dark), -torch.ones_like(dark))
        if bool(mask.any()):
            score = dark[mask].mean()
        else:
            score = torch.zeros(1)[0]
        return logits.view(1, 1, p, p), score.view(1)


@pytest.fixture(scope="session")
def encoder_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("models") / "tiny_encoder.pt"
    torch.jit.script(TinyEncoder()).save(str(path))
    return path


@pytest.fixture(scope="session")
def segmenter_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("models") / "tiny_segmenter.pt"
    torch.jit.script(TinySegmenter()).save(str(path))
    return path


@pytest.fixture(scope="session")
def fixture_image(tmp_path_factory):
    """One rendered H&E-like image plus ground truth from the consumer package."""
    from nucseg import fixtures

    root = tmp_path_factory.mktemp("fiximg")
    spec = fixtures.FixtureSpec(
        images=1, height=160, width=160, nuclei_min=8, nuclei_max=12,
        radius_min=7.0, radius_max=11.0, overlap_prob=0.0, rim_width=1.2,
    )
    fixtures.generate_dataset(spec, root, seed=21)
    return root / "images" / "fixture_000.png", root / "gt" / "fixture_000.png"


@pytest.fixture(scope="session")
def consumer_config():
    from nucseg.config import PipelineConfig

    cfg = PipelineConfig.from_dict({"features": {"patch_size": 32, "stride": 16, "cell": 8}})
    cfg.validate()
    return cfg


@pytest.fixture(scope="session")
def consumer_run(fixture_image, consumer_config, tmp_path_factory):
    """A primary-pipeline run whose prompts the adapter will consume."""
    from nucseg import pipeline

    out = tmp_path_factory.mktemp("consumer_out")
    image_path, _ = fixture_image
    return pipeline.run_image(image_path, consumer_config, out)
