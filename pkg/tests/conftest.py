"""Shared fixtures: tiny configs, synthetic scene caches, and the expensive
session-scoped trained models reused across quality and acceptance tests."""

import csv
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))  # make oracles importable

from stream4d import Model, ModelConfig, random_scene_spec, render_sequence

# knobs for the end-to-end CLI pipeline (acceptance criterion 7 and the
# trained-quality tests); calibrated so a CPU run stays in single-digit minutes
PIPELINE = dict(
    train_scenes=5, train_frames=30, held_scenes=3, held_frames=6, tracks=6,
    teacher=dict(epochs=4, steps=1500, lr="0.003", frames=6, seed=0),
    student=dict(epochs=2, steps=600, lr="0.0005", frames=6, seed=0),
)

# knobs for the distillation ablation (criterion 5): reduced config so
# 1 teacher + 6 student runs fit the budget comfortably
ABLATION = dict(
    scenes=12, frames=6, held=4, tracks=4,
    teacher_steps=2400, student_steps=500, seeds=(0, 1, 2),
    teacher_lr=3e-3, student_lr=5e-4,
)


def tiny_config(**kw):
    base = dict(height=16, width=16, patch_size=4, channels=32, layers=2,
                heads=4, track_features=8, max_frames=48)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def toy_config():
    return ModelConfig()  # 32x32, p=8, C=64, L=4


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


def make_scenes(count, seed0, **spec_kw):
    return [render_sequence(random_scene_spec(seed0 + i, **spec_kw))
            for i in range(count)]


@pytest.fixture(scope="session")
def small_scene_set():
    """A handful of 16x16 sequences for fast data-dependent tests."""
    return make_scenes(3, 500, height=16, width=16, frame_count=6, track_count=6)


@pytest.fixture(scope="session")
def cli_pipeline(tmp_path_factory):
    """The whole operator pipeline through the CLI: gen, teacher, distilled
    student, stream, eval. Returns aggregate held-out metrics plus paths."""
    from stream4d.cli import main as cli_main

    root = tmp_path_factory.mktemp("pipeline")
    train_dir = root / "train"
    held_dir = root / "held"
    p = PIPELINE
    assert cli_main(["gen", "--out", str(train_dir), "--count", str(p["train_scenes"]),
                     "--frames", str(p["train_frames"]), "--tracks", str(p["tracks"]),
                     "--seed", "100"]) == 0
    assert cli_main(["gen", "--out", str(held_dir), "--count", str(p["held_scenes"]),
                     "--frames", str(p["held_frames"]), "--tracks", str(p["tracks"]),
                     "--seed", "9000"]) == 0

    teacher_dir = root / "teacher"
    t = p["teacher"]
    assert cli_main(["train", "--data", str(train_dir), "--out", str(teacher_dir),
                     "--attention", "global",
                     "--set", f"epochs={t['epochs']}",
                     "--set", f"steps_per_epoch={t['steps'] // t['epochs']}",
                     "--set", f"frames_per_sample={t['frames']}",
                     "--set", f"peak_lr={t['lr']}", "--set", f"seed={t['seed']}",
                     "--set", "max_frames=48"]) == 0
    teacher_ckpt = teacher_dir / "final.ckpt"

    student_dir = root / "student"
    s = p["student"]
    assert cli_main(["train", "--data", str(train_dir), "--out", str(student_dir),
                     "--init", str(teacher_ckpt), "--distill",
                     "--teacher", str(teacher_ckpt),
                     "--set", f"epochs={s['epochs']}",
                     "--set", f"steps_per_epoch={s['steps'] // s['epochs']}",
                     "--set", f"frames_per_sample={s['frames']}",
                     "--set", f"peak_lr={s['lr']}", "--set", f"seed={s['seed']}",
                     "--set", "max_frames=48"]) == 0
    student_ckpt = student_dir / "final.ckpt"

    from stream4d.scenes import dataset_read
    abs_rels, aucs = [], []
    held_paths = sorted(held_dir.glob("*.s4dd"))
    for i, scene_path in enumerate(held_paths):
        preds_path = root / f"preds_{i}.s4dp"
        times_path = root / f"timings_{i}.csv"
        assert cli_main(["stream", "--checkpoint", str(student_ckpt),
                         "--dataset", str(scene_path), "--out", str(preds_path),
                         "--timings-csv", str(times_path)]) == 0
        csv_path = root / f"metrics_{i}.csv"
        assert cli_main(["eval", "--predictions", str(preds_path),
                         "--dataset", str(scene_path),
                         "--out-csv", str(csv_path)]) == 0
        values = {}
        with open(csv_path) as fh:
            for row in csv.DictReader(fh):
                values[(row["section"], row["metric"])] = float(row["value"])
        abs_rels.append(values[("depth", "abs_rel")])
        aucs.append(values[("pose", "auc30")])

    from stream4d.model import load_checkpoint
    student = load_checkpoint(student_ckpt)
    return {
        "root": root, "teacher_ckpt": teacher_ckpt, "student_ckpt": student_ckpt,
        "held_paths": held_paths, "config": student.config,
        "held_sequences": [dataset_read(p) for p in held_paths],
        "abs_rel": float(np.mean(abs_rels)), "auc30": float(np.mean(aucs)),
        "per_scene": list(zip(abs_rels, aucs)),
    }


@pytest.fixture(scope="session")
def ablation_results():
    """Teacher + {distilled, plain} students over several seeds, all from the
    same teacher initialization and budget; pointmap RMSE on held-out scenes."""
    from stream4d.losses import LossWeights
    from stream4d.model import Model
    from stream4d.training import TrainConfig, pointmap_rmse, train

    a = ABLATION
    cfg = tiny_config(max_frames=16)
    scenes = make_scenes(a["scenes"], 3000, height=16, width=16,
                         frame_count=a["frames"], track_count=a["tracks"])
    held = make_scenes(a["held"], 8000, height=16, width=16,
                       frame_count=a["frames"], track_count=a["tracks"])

    teacher = Model(cfg, seed=0, attention_mode="global")
    tc = TrainConfig(epochs=2, steps_per_epoch=a["teacher_steps"] // 2,
                     frames_per_sample=a["frames"], peak_lr=a["teacher_lr"], seed=0)
    train(tc, scenes, teacher)
    teacher_rmse = pointmap_rmse(teacher, held, mode="global")

    import copy

    def student_from_teacher():
        params = {k: type(v)(v.data.copy(), requires_grad=True)
                  for k, v in teacher.params.items()}
        return Model(cfg, attention_mode="causal", params=params)

    kd_rmse, plain_rmse = [], []
    for seed in a["seeds"]:
        for distill in (True, False):
            student = student_from_teacher()
            sc = TrainConfig(epochs=1, steps_per_epoch=a["student_steps"],
                             frames_per_sample=a["frames"], peak_lr=a["student_lr"],
                             seed=seed, distill=distill, pseudo_gt_blend=1.0)
            train(sc, scenes, student, teacher=teacher if distill else None)
            rmse = pointmap_rmse(student, held, mode="causal")
            (kd_rmse if distill else plain_rmse).append(rmse)

    return {"teacher": teacher_rmse, "kd": kd_rmse, "plain": plain_rmse}
