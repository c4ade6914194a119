import csv
import json

import numpy as np
import pytest

from sam_matcher.cli import main, resolve_seed
from sam_matcher.io import read_image, write_image

TINY = ["--steps", "2", "--refiner-steps", "2", "--pairs-per-step", "1", "--warmup-steps", "1"]


def run(*argv):
    return main(["--threads", "1", *map(str, argv)])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", d / "data", "--n", "2", "--seed", "0") == 0
    assert run("train", "--out", d / "m.ckpt", "--seed", "0", *TINY) == 0
    return d


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_gen_data_layout(workspace):
    data = workspace / "data"
    for name in ("pair0000_source.png", "pair0001_target.png", "gt.csv", "homographies.csv", "meta.json"):
        assert (data / name).exists(), name
    assert json.loads((data / "meta.json").read_text())["seed"] == 0


def test_train_outputs(workspace):
    assert (workspace / "m.loss.csv").read_text().startswith("step,lr,loss\n")
    assert (workspace / "m.loss.refiner.csv").exists()
    meta = json.loads((workspace / "m.ckpt.meta.json").read_text())
    assert meta["seed"] == 0 and meta["train_config"]["steps"] == 2


def test_match_writes_one_row_per_grid_query(workspace):
    data, out = workspace / "data", workspace / "matches.csv"
    assert run("match", "--source", data / "pair0000_source.png", "--target", data / "pair0000_target.png",
               "--checkpoint", workspace / "m.ckpt", "--out", out, "--pair-id", "pair0000") == 0
    r = rows(out)
    assert len(r) == 64
    assert all(float(x["px"]).is_integer() for x in r)
    assert json.loads((workspace / "matches.csv.meta.json").read_text())["command"] == "match"


def test_match_coarse_only_gives_cell_centres(workspace):
    data, out = workspace / "data", workspace / "coarse.csv"
    assert run("match", "--source", data / "pair0000_source.png", "--target", data / "pair0000_target.png",
               "--checkpoint", workspace / "m.ckpt", "--out", out, "--coarse-only") == 0
    for x in rows(out):
        assert float(x["px"]) % 4 == 1.5 and float(x["py"]) % 4 == 1.5


def test_match_with_query_file(workspace):
    data, out = workspace / "data", workspace / "q_matches.csv"
    (workspace / "q.csv").write_text("qx,qy\n3,5\n60,2\n")
    assert run("match", "--source", data / "pair0000_source.png", "--target", data / "pair0000_target.png",
               "--checkpoint", workspace / "m.ckpt", "--out", out, "--queries", workspace / "q.csv") == 0
    assert [(x["qx"], x["qy"]) for x in rows(out)] == [("3", "5"), ("60", "2")]


def test_eval_end_to_end(workspace):
    data = workspace / "data"
    preds = workspace / "all.csv"
    lines = ["pair_id,qx,qy,px,py,score"]
    for pid in ("pair0000", "pair0001"):
        assert run("match", "--source", data / f"{pid}_source.png", "--target", data / f"{pid}_target.png",
                   "--checkpoint", workspace / "m.ckpt", "--out", workspace / f"{pid}.csv", "--pair-id", pid) == 0
        lines += (workspace / f"{pid}.csv").read_text().splitlines()[1:]
    preds.write_text("\n".join(lines) + "\n")
    out = workspace / "report.json"
    assert run("eval", "--pred", preds, "--gt", data / "gt.csv", "--images", data,
               "--homographies", data / "homographies.csv", "--out", out) == 0
    doc = json.loads(out.read_text())
    assert doc["schema_version"] == 1
    assert set(doc["metrics"]["MA"]) == {"1", "2", "3", "5", "10", "20"}
    assert set(doc["metrics"]["AUC"]) == {"3", "5", "10"}
    assert "MA_text" in doc["metrics"]


def test_eval_perfect_predictions(workspace, tmp_path):
    data = workspace / "data"
    gt = rows(data / "gt.csv")
    pred = tmp_path / "p.csv"
    pred.write_text("pair_id,qx,qy,px,py,score\n" + "".join(
        f"{r['pair_id']},{r['qx']},{r['qy']},{r['gx']},{r['gy']},0\n" for r in gt))
    out = tmp_path / "r.json"
    assert run("eval", "--pred", pred, "--gt", data / "gt.csv", "--homographies", data / "homographies.csv",
               "--image-size", 64, "--out", out) == 0
    m = json.loads(out.read_text())["metrics"]
    assert all(v == 1.0 for v in m["MA"].values())
    assert m["AUC"]["3"] == pytest.approx(1.0, abs=1e-6)


def test_eval_schema_errors(workspace, tmp_path):
    data = workspace / "data"
    pred = tmp_path / "p.csv"
    pred.write_text("pair_id,qx,qy,px,py,score\nother,0,0,1,1,0\n")
    assert run("eval", "--pred", pred, "--gt", data / "gt.csv", "--out", tmp_path / "r.json") == 5
    pred.write_text("pair_id,qx,qy,px,py,score\npair0000,0,0,1,1,0\npair0001,0,0,1,1,0\n")
    assert run("eval", "--pred", pred, "--gt", data / "gt.csv", "--out", tmp_path / "r.json") == 5
    pred.write_text("a,b\n")
    assert run("eval", "--pred", pred, "--gt", data / "gt.csv", "--out", tmp_path / "r.json") == 5


def test_exit_codes_for_bad_inputs(workspace, tmp_path):
    data = workspace / "data"
    assert run("match", "--source", tmp_path / "nope.png", "--target", data / "pair0000_target.png",
               "--checkpoint", workspace / "m.ckpt", "--out", tmp_path / "o.csv") == 2
    write_image(tmp_path / "odd.png", np.zeros((30, 30, 3)))
    assert run("match", "--source", tmp_path / "odd.png", "--target", tmp_path / "odd.png",
               "--checkpoint", workspace / "m.ckpt", "--out", tmp_path / "o.csv") == 3
    (tmp_path / "junk.png").write_bytes(b"not an image")
    assert run("match", "--source", tmp_path / "junk.png", "--target", data / "pair0000_target.png",
               "--checkpoint", workspace / "m.ckpt", "--out", tmp_path / "o.csv") == 2
    (tmp_path / "bad.ckpt").write_bytes(b"garbage!" * 4)
    assert run("match", "--source", data / "pair0000_source.png", "--target", data / "pair0000_target.png",
               "--checkpoint", tmp_path / "bad.ckpt", "--out", tmp_path / "o.csv") == 5


def test_seed_precedence(monkeypatch):
    class A:
        seed = None
    monkeypatch.delenv("SAM_SEED", raising=False)
    assert resolve_seed(A()) == 0
    monkeypatch.setenv("SAM_SEED", "7")
    assert resolve_seed(A()) == 7
    A.seed = 3
    assert resolve_seed(A()) == 3


def test_sam_seed_environment_drives_gen_data(monkeypatch, tmp_path):
    monkeypatch.setenv("SAM_SEED", "5")
    assert run("gen-data", "--out", tmp_path / "a", "--n", "1") == 0
    assert run("gen-data", "--out", tmp_path / "b", "--n", "1", "--seed", "5") == 0
    assert run("gen-data", "--out", tmp_path / "c", "--n", "1", "--seed", "6") == 0
    a = read_image(tmp_path / "a" / "pair0000_source.png")
    assert np.array_equal(a, read_image(tmp_path / "b" / "pair0000_source.png"))
    assert not np.array_equal(a, read_image(tmp_path / "c" / "pair0000_source.png"))


def test_gradcheck_pass_and_corrupt(tmp_path):
    out = tmp_path / "g.json"
    assert run("gradcheck", "--samples", "2", "--out", out) == 0
    assert json.loads(out.read_text())["passed"] is True
    assert run("gradcheck", "--samples", "2", "--corrupt", "latents") == 4


def test_ablate_table(tmp_path, capsys):
    out = tmp_path / "abl.csv"
    assert run("ablate", "--out", out, "--pairs", "2", "--etas", "2", *TINY) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "variant,MA_text@2"
    assert [l.split(",")[0] for l in lines[1:]] == ["SiameseCNN", "+InputCA_SA", "+LearnedLV_OutputCA",
                                                    "+PEConcat", "+StructuredAM", "Full"]
    assert (tmp_path / "abl.csv.meta.json").exists()


def test_latent_map(workspace, tmp_path):
    data = workspace / "data"
    out = tmp_path / "map.png"
    assert run("latent-map", "--source", data / "pair0000_source.png", "--target", data / "pair0000_target.png",
               "--checkpoint", workspace / "m.ckpt", "--out", out) == 0
    img = read_image(out)
    assert img.shape == (64, 64, 3)


def test_eval_overlays(workspace, tmp_path):
    data = workspace / "data"
    gt = rows(data / "gt.csv")
    pred = tmp_path / "p.csv"
    pred.write_text("pair_id,qx,qy,px,py,score\n" + "".join(
        f"{r['pair_id']},{r['qx']},{r['qy']},{r['gx']},{r['gy']},0\n" for r in gt))
    out = tmp_path / "r.json"
    assert run("eval", "--pred", pred, "--gt", data / "gt.csv", "--images", data, "--overlays", "--out", out) == 0
    img = read_image(tmp_path / "r_pair0000.png")
    assert img.shape == (64, 128, 3)
    # perfect predictions draw only green lines
    assert img[..., 1].max() == 1.0
    assert run("eval", "--pred", pred, "--gt", data / "gt.csv", "--overlays", "--out", out) == 5


def test_outputs_record_seed(workspace, tmp_path):
    data = workspace / "data"
    out = tmp_path / "map.png"
    assert run("latent-map", "--source", data / "pair0000_source.png", "--target", data / "pair0000_target.png",
               "--checkpoint", workspace / "m.ckpt", "--out", out, "--seed", "4") == 0
    assert json.loads((tmp_path / "map.png.meta.json").read_text())["seed"] == 4


def test_match_is_thread_count_invariant(workspace, tmp_path):
    data = workspace / "data"
    outs = []
    for threads in (1, 2):
        out = tmp_path / f"m{threads}.csv"
        assert main(["--threads", str(threads), "match", "--source", str(data / "pair0000_source.png"),
                     "--target", str(data / "pair0000_target.png"), "--checkpoint", str(workspace / "m.ckpt"),
                     "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
