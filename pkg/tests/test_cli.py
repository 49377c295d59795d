import csv

import numpy as np
import pytest

from meshgait import mg3d
from meshgait.cli import main
from meshgait.export import read_topology, voxel_to_pixel, write_obj

TINY = [
    "--set", "model.backbone=tiny",
    "--set", "batch.P=2", "--set", "batch.K=2", "--set", "batch.T_fixed=4",
    "--set", "optim.name=adam", "--set", "optim.lr=0.001",
    "--set", "train.mesh_frames=1", "--set", "eval.max_frames=4",
]


def _log_rows(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_dataset_root):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--data", str(tiny_dataset_root), "--out", str(out), *TINY,
                 "--set", "max_steps=4", "--set", "eval_interval=2"])
    assert code == 0
    return out


def test_synth_counts_and_idempotent(tmp_path, capsys):
    assert main(["synth", "--ids", "2", "--seqs", "2", "--frames", "8", "--seed", "1", "--out", str(tmp_path / "a")]) == 0
    assert "4 sequences" in capsys.readouterr().out
    main(["synth", "--ids", "2", "--seqs", "2", "--frames", "8", "--seed", "1", "--out", str(tmp_path / "b")])
    a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert a == b
    assert all((tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes() for p in a)


def test_synth_single_identity_is_config_error(tmp_path):
    assert main(["synth", "--ids", "1", "--out", str(tmp_path)]) == 2


def test_train_outputs(trained):
    rows = _log_rows(trained / "train_log.csv")
    assert [int(r["step"]) for r in rows] == [1, 2, 3, 4]
    assert {"triplet", "ce", "joint", "mesh", "total", "lr"} <= set(rows[0])
    assert (trained / "train_log.csv").read_text().startswith("# fingerprint: ")
    assert (trained / "final.ckpt").exists()
    assert sorted(p.name for p in (trained / "checkpoints").iterdir())[-1] == "step_000004.ckpt"
    eval_lines = (trained / "eval.csv").read_text().splitlines()
    assert eval_lines[0].startswith("# fingerprint: ") and "rank1" in eval_lines[1]


def test_train_resume_continues_log(tmp_path, trained, tiny_dataset_root):
    import shutil

    out = tmp_path / "resumed"
    shutil.copytree(trained, out)
    ckpt = out / "checkpoints" / "step_000002.ckpt"
    if not ckpt.exists():
        pytest.skip("intermediate checkpoint pruned")
    code = main(["train", "--data", str(tiny_dataset_root), "--out", str(out), *TINY,
                 "--set", "max_steps=4", "--set", "eval_interval=2", "--resume", str(ckpt)])
    assert code == 0
    assert [int(r["step"]) for r in _log_rows(out / "train_log.csv")] == [1, 2, 3, 4]


def test_train_all_zero_weights(tmp_path, tiny_dataset_root):
    zeros = [a for k in ("triplet", "ce", "joint", "mesh") for a in ("--set", f"model.loss.{k}=0")]
    assert main(["train", "--data", str(tiny_dataset_root), "--out", str(tmp_path), *zeros]) == 2


def test_train_missing_dataset(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o"), *TINY]) == 3


def test_eval_protocols(trained, tiny_dataset_root, tmp_path, capsys):
    ckpt = str(trained / "final.ckpt")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(tiny_dataset_root), "--max-frames", "4",
                 "--out", str(tmp_path / "g.csv")]) == 0
    header = (tmp_path / "g.csv").read_text().splitlines()[1].split(",")
    assert {"rank1", "rank5", "mAP", "mINP"} <= set(header)
    capsys.readouterr()
    assert main(["eval", "--checkpoint", ckpt, "--data", str(tiny_dataset_root), "--protocol", "cross_view",
                 "--max-frames", "4"]) == 0
    header = capsys.readouterr().out.splitlines()[1].split(",")
    assert {"060", "090", "Mean"} <= set(header)


def test_eval_missing_checkpoint(tmp_path, tiny_dataset_root):
    assert main(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--data", str(tiny_dataset_root)]) == 3


def test_reconstruct_all_frames_and_single(trained, tiny_dataset_root, tmp_path):
    seq = tiny_dataset_root / "0000" / "nm" / "090" / "00"
    out = tmp_path / "rec"
    assert main(["reconstruct", "--checkpoint", str(trained / "final.ckpt"), "--sequence", str(seq), "--out", str(out)]) == 0
    assert len(list(out.glob("*.obj"))) == 8 and len(list(out.glob("keypoints_*.mg3d"))) == 8
    assert len(list(out.glob("projection_*.png"))) == 8
    kp = mg3d.read(out / "keypoints_0000.mg3d")
    assert kp.shape == (88, 3)
    obj = (out / "mesh_0000.obj").read_text().splitlines()
    assert len(obj) == 6890 and all(l.startswith("v ") for l in obj)
    from PIL import Image

    assert Image.open(out / "projection_0000.png").size == (44 * 4, 64 * 4)

    single = tmp_path / "one"
    assert main(["reconstruct", "--checkpoint", str(trained / "final.ckpt"), "--sequence", str(seq),
                 "--out", str(single), "--frame", "3"]) == 0
    assert [p.name for p in single.glob("*.obj")] == ["mesh_0003.obj"]
    assert main(["reconstruct", "--checkpoint", str(trained / "final.ckpt"), "--sequence", str(seq),
                 "--out", str(single), "--frame", "99"]) == 2


def test_reconstruct_with_topology(trained, tiny_dataset_root, tmp_path):
    topo = tmp_path / "faces.txt"
    topo.write_text("0 1 2\n2 3 4\n")
    seq = tiny_dataset_root / "0001" / "nm" / "060" / "01"
    out = tmp_path / "rec"
    assert main(["reconstruct", "--checkpoint", str(trained / "final.ckpt"), "--sequence", str(seq),
                 "--out", str(out), "--frame", "0", "--topology", str(topo)]) == 0
    lines = (out / "mesh_0000.obj").read_text().splitlines()
    assert lines[-2:] == ["f 1 2 3", "f 3 4 5"]
    topo.write_text("0 1 99999\n")
    assert main(["reconstruct", "--checkpoint", str(trained / "final.ckpt"), "--sequence", str(seq),
                 "--out", str(out), "--frame", "0", "--topology", str(topo)]) == 3


def test_export_helpers(tmp_path):
    write_obj(tmp_path / "m.obj", np.array([[1.0, 2.0, 3.0]]))
    assert (tmp_path / "m.obj").read_text() == "v 1.000000 2.000000 3.000000\n"
    assert voxel_to_pixel(np.array([[15.0, 15.0, 0.0]])).tolist() == [[43.0, 63.0]]
    (tmp_path / "t.txt").write_text("# tri\n0 1 2\n")
    assert read_topology(tmp_path / "t.txt", 3).tolist() == [[0, 1, 2]]


def test_ablate_representation(tiny_dataset_root, tmp_path, capsys):
    code = main(["ablate", "--axis", "representation", "--data", str(tiny_dataset_root), "--out", str(tmp_path),
                 *TINY, "--set", "max_steps=5"])
    assert code == 0
    lines = (tmp_path / "ablation_representation.csv").read_text().splitlines()
    assert lines[0].startswith("# fingerprint: ")
    assert lines[1].startswith("Heatmap,joint,mesh,R-1,R-5,mAP,mINP")
    assert [l.split(",")[:3] for l in lines[2:]] == [["yes", "yes", "no"], ["yes", "yes", "yes"]]


def test_ablate_unknown_axis_rejected_by_parser(tiny_dataset_root):
    with pytest.raises(SystemExit):
        main(["ablate", "--axis", "optimizer", "--data", str(tiny_dataset_root)])


def test_bench(tiny_dataset_root, tmp_path, capsys):
    code = main(["bench", "--data", str(tiny_dataset_root), "--n", "3", "--max-frames", "2",
                 "--set", "model.backbone=tiny", "--out", str(tmp_path / "b.csv")])
    assert code == 0
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0].startswith("# fingerprint: ")
    assert "mesh_on_s_per_seq" in lines[1] and "mesh_off_s_per_seq" in lines[1]


def test_bench_zero_sequences(tiny_dataset_root):
    assert main(["bench", "--data", str(tiny_dataset_root), "--n", "0"]) == 2
