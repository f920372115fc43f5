import argparse
import time

import mlx.core as mx
import numpy as np

from mlx_handnerf.common.config import load_settings
from mlx_handnerf.dataset import toy_scene
from mlx_handnerf.hand import PosedMesh
from mlx_handnerf.raster import rasterize
from mlx_handnerf.rendering import render_image
from mlx_handnerf.training import Trainer


def parse_arguments():
    parser = argparse.ArgumentParser(description="Benchmark script.")
    parser.add_argument("--image-size", type=int, default=64, help="Camera resolution")
    parser.add_argument("--hands", choices=["right", "both"], default="both")
    parser.add_argument("--points", type=int, default=20_000, help="Nearest-facet query points")
    parser.add_argument(
        "--precision", choices=["float32", "float64"], default="float32", help="Network precision"
    )
    return parser.parse_args()


def timer(fn, *args, warmup: int = 2, num_its: int = 5):
    for _ in range(warmup):
        fn(*args)

    tic = time.perf_counter()
    for _ in range(num_its):
        fn(*args)
    toc = time.perf_counter()
    return (toc - tic) / num_its


def nearest_facet(mesh: PosedMesh, points: np.ndarray):
    return mesh.locator.query(points)


def nearest_facet_brute(mesh: PosedMesh, points: np.ndarray):
    return mesh.locator.brute_force(points)


def raster(camera, meshes):
    return rasterize(camera, meshes)


def train_step(trainer: Trainer):
    return trainer.step()


def full_render(model, hands, camera):
    image = render_image(model, hands, camera, "full", frame=0)
    mx.eval(mx.array(image.color))
    return image


if __name__ == "__main__":
    args = parse_arguments()
    hands = ("left", "right") if args.hands == "both" else ("right",)
    scene = toy_scene(hands, image_size=args.image_size, train_cameras=4)
    frame = scene.training_frames[0]
    meshes = [PosedMesh.from_asset(scene.assets[s], frame.poses[s]) for s in scene.sides]
    camera = scene.train_cameras()[0]

    rng = np.random.default_rng(0)
    lo, hi = meshes[0].vertices.min(axis=0), meshes[0].vertices.max(axis=0)
    points = rng.uniform(lo - 0.1, hi + 0.1, size=(args.points, 3))
    print(f"Scene: {len(meshes)} hand(s), {sum(len(m.triangles) for m in meshes)} triangles")

    print(f"\nNearest facet (kd-tree) {timer(nearest_facet, meshes[0], points):.4f}s")
    print(f"Nearest facet (brute)   {timer(nearest_facet_brute, meshes[0], points, num_its=1):.4f}s")
    print(f"Rasterize {args.image_size}×{args.image_size}    {timer(raster, camera, meshes):.4f}s")

    settings = load_settings(
        numerics={"precision": args.precision},
        train={"val_every": 0, "checkpoint_every": 0, "distillation": "random"},
    )
    trainer = Trainer(scene, settings)
    print(f"Train step ({args.precision})  {timer(train_step, trainer):.4f}s")
    print(f"Full render            {timer(full_render, trainer.model, trainer.states[0], camera, warmup=1, num_its=1):.4f}s")
