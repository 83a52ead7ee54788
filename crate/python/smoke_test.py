"""Smoke test for the zerostyle Python module.

Build and install it first:

    pip install --no-build-isolation ./crates/py
    python python/smoke_test.py
"""

import json
import tempfile
from pathlib import Path

import zerostyle as zs

CONFIG = """
out_dir = "{root}/run"

[data]
scenes = ["{root}/scene"]
styles = "{root}/styles"

[backbone]
layers = 4
d_f = 32
patch = 8
heads = 2
retained = [1, 2]
schedule = ["local", "global", "local", "global"]
image_width = 32
image_height = 32
head_hidden = 16

[geometry]
steps = 2

[style]
steps = 3

[style.optim]
lr = 0.01

[style.patch]
n_patch = 2
crop_size = 16
"""


def main():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        images, cameras = zs.make_scene(root / "scene", seed=3, views=4, size=32)
        assert len(images) == 4 and len(cameras) == 4
        assert images[0].width == 32 and len(images[0].pixels) == 32 * 32 * 3
        png = images[0].to_png()
        assert zs.Image.from_png(png) == images[0]
        ids = zs.make_styles(root / "styles", count=3, size=32)
        assert ids[0] == "blue_stripes"

        (root / "train.toml").write_text(CONFIG.format(root=root.as_posix()))
        summary = json.loads(zs.train(root / "train.toml"))
        assert summary["style_steps"] == 3

        model = zs.Model.load(root / "run" / "model")
        assert model.frozen_digest == summary["frozen_digest"]
        rec = model.reconstruct(images, cameras)
        assert rec.views == 4 and rec.scene.validate() == []
        extractions = model.counters()[0]

        text = model.embed_text("oil painting")
        image = model.embed_image(zs.Image.read(root / "styles" / "images" / f"{ids[1]}.png"))
        assert text.modality == "text" and image.modality == "image"

        styled = model.stylize(rec, text)
        assert len(styled) == len(rec.scene) and styled.validate() == []
        again = model.stylize(rec, text)
        assert styled.render(cameras[0]) == again.render(cameras[0])
        assert model.counters()[0] == extractions

        a0 = model.stylize_interpolated(rec, text, image, 0.0)
        assert a0.render(cameras[1]) == styled.render(cameras[1])
        mid = zs.interpolate(text, image, 0.5)
        assert mid.modality == "mixed"

        styled.save(root / "styled")
        # scene files store f32
        loaded = zs.Scene.load(root / "styled").render(cameras[2]).pixels
        exact = styled.render(cameras[2]).pixels
        assert max(abs(x - y) for x, y in zip(loaded, exact)) < 1e-4
        rec.save(root / "cache")
        assert zs.Reconstruction.load(root / "cache").views == 4

        path = zs.Camera.orbit(12, 32, 32)
        report = json.loads(zs.consistency(styled, path, short_gap=1, long_gap=5))
        assert report["short_range"]["mean_rmse"] is not None

        try:
            zs.Image(2, 2, [0.0])
        except ValueError:
            pass
        else:
            raise AssertionError("bad pixel count accepted")

    print("zerostyle smoke test passed")


if __name__ == "__main__":
    main()
