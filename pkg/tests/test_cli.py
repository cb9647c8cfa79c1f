import numpy as np
import pytest

from meshpress.archive import ArchiveError, load_tensors, save_tensors
from meshpress.cli import Config, InputError, main, parse_config
from meshpress.codec import decode_bitstream
from meshpress.mesh import load_obj, save_obj
from meshpress.rgr.grid import GridSpec, TsdfDefTensor
from meshpress.shapes import box, capsule, mesh_from_sdf, sphere

SMALL_CONFIG = """
# a K = 16 pipeline that runs in seconds
K = 16
K_feat = 4
C = 4
L = 2
head_width = 8
widths = 4
epochs = 3
max_iter = 4
n_target = 2000
n_eval = 4000
views = 0
rd_widths = 2,4
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    meshes = root / "meshes"
    meshes.mkdir()
    save_obj(mesh_from_sdf(sphere(0.6), 40), meshes / "b_sphere.obj")
    save_obj(mesh_from_sdf(box((0.5, 0.4, 0.3)), 40), meshes / "a_box.obj")
    extra = root / "extra"
    extra.mkdir()
    save_obj(mesh_from_sdf(capsule((-0.4, 0, 0), (0.4, 0, 0), 0.25), 40), extra / "c_capsule.obj")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL_CONFIG)
    return root


def run(*argv):
    return main([str(a) for a in argv])


# --- configuration ---------------------------------------------------------------

def test_config_defaults():
    c = Config()
    assert (c.K, c.K_feat, c.C, c.L, c.epochs, c.max_iter) == (128, 4, 16, 5, 400, 500)
    assert (c.lambda_reg, c.lambda1, c.lambda2, c.lr_fit, c.lr_train) == (10, 5, 10, 0.01, 1e-3)
    assert c.arch().output_res == 128


def test_parse_config():
    c = parse_config("K = 32  # comment\nwidths = 16,16,8\nL=3\nC=8\nlambda1 = 2.5\nviews=0,45\n")
    assert c.K == 32 and c.widths == (16, 16, 8) and c.lambda1 == 2.5 and c.views == (0.0, 45.0)
    assert [m.out_channels for m in c.arch().modules] == [16, 16, 8]
    with pytest.raises(InputError):
        parse_config("bogus = 1\n")
    with pytest.raises(InputError):
        parse_config("K 32\n")
    with pytest.raises(InputError):
        parse_config("tau = 0\n")
    with pytest.raises(InputError):
        parse_config("K = 64\n").arch()  # 4 * 2^5 != 64


# --- archive ----------------------------------------------------------------------

def test_archive_round_trip_and_errors(tmp_path):
    rng = np.random.default_rng(0)
    ts = [TsdfDefTensor(GridSpec(8), rng.uniform(-1, 1, (8, 8, 8, 4))) for _ in range(2)]
    path = tmp_path / "t.ncgt"
    save_tensors(path, ["x", "ü"], ts)
    names, back = load_tensors(path)
    assert names == ["x", "ü"]
    assert np.array_equal(back[1].data, ts[1].data.astype(np.float32))
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ArchiveError):
        load_tensors(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-3])
    with pytest.raises(ArchiveError):
        load_tensors(tmp_path / "short")


# --- exit codes -----------------------------------------------------------------------

def test_exit_codes(workspace, tmp_path):
    cfg = workspace / "small.cfg"
    assert run("fit", tmp_path / "missing", "--out", tmp_path / "x", "--config", cfg) == 2
    assert run("nonsense") == 2
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("unknown_key = 3\n")
    assert run("fit", workspace / "meshes", "--out", tmp_path / "x", "--config", bad_cfg) == 2
    junk = tmp_path / "junk.ncgs"
    junk.write_bytes(b"garbage bytes")
    assert run("decompress", junk, "--out", tmp_path / "dec") == 3
    assert not (tmp_path / "dec").exists()
    assert run("train", junk, "--out", tmp_path / "s.npz", "--config", cfg) == 3
    big = tmp_path / "big"
    big.mkdir()
    (big / "s.obj").write_text("v 0 0 0\nv 2 0 0\nv 0 1 0\nf 1 2 3\n")
    assert run("fit", big, "--out", tmp_path / "x", "--config", cfg) == 2


# --- end-to-end ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pipeline(workspace):
    cfg = workspace / "small.cfg"
    out = workspace / "out"
    out.mkdir()
    assert run("fit", workspace / "meshes", "--out", out / "t.ncgt", "--config", cfg) == 0
    assert run("train", out / "t.ncgt", "--out", out / "state.npz", "--config", cfg) == 0
    assert run("compress", out / "state.npz", "--meshes", workspace / "meshes", "--out", out / "m.ncgs") == 0
    assert run("decompress", out / "m.ncgs", "--out", out / "dec") == 0
    return out


def test_fit_order_and_determinism(workspace, pipeline, tmp_path):
    names, tensors = load_tensors(pipeline / "t.ncgt")
    assert names == ["a_box", "b_sphere"]
    cfg = workspace / "small.cfg"
    assert run("fit", workspace / "meshes", "--out", tmp_path / "again.ncgt", "--config", cfg, "--workers", 2) == 0
    assert (tmp_path / "again.ncgt").read_bytes() == (pipeline / "t.ncgt").read_bytes()


def test_train_outputs_and_resume(workspace, pipeline, tmp_path):
    lines = (pipeline / "state_loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss" and len(lines) == 4
    cfg = workspace / "small.cfg"
    one = tmp_path / "one.cfg"
    one.write_text(SMALL_CONFIG.replace("epochs = 3", "epochs = 1"))
    assert run("train", pipeline / "t.ncgt", "--out", tmp_path / "s1.npz", "--config", one) == 0
    assert run("train", pipeline / "t.ncgt", "--resume", tmp_path / "s1.npz", "--out", tmp_path / "s3.npz", "--config", cfg) == 0
    a, b = np.load(tmp_path / "s3.npz"), np.load(pipeline / "state.npz")
    for key in ("theta", "features", "param_m", "param_v"):
        assert np.array_equal(a[key], b[key])
    wrong_k = tmp_path / "k32.cfg"
    wrong_k.write_text(SMALL_CONFIG.replace("K = 16", "K = 32").replace("L = 2", "L = 3"))
    assert run("train", pipeline / "t.ncgt", "--out", tmp_path / "s.npz", "--config", wrong_k) == 2


def test_compress_decompress(workspace, pipeline, capsys):
    bs = decode_bitstream((pipeline / "m.ncgs").read_bytes())
    assert bs.names == ["a_box", "b_sphere"]
    assert sorted(p.name for p in (pipeline / "dec").iterdir()) == ["a_box.obj", "b_sphere.obj"]
    assert load_obj(pipeline / "dec" / "a_box.obj").n_faces > 0
    assert run("compress", pipeline / "state.npz", "--meshes", workspace / "meshes", "--out", pipeline / "m2.ncgs") == 0
    out = capsys.readouterr().out
    assert "original" in out and "ratio" in out
    assert (pipeline / "m2.ncgs").read_bytes() == (pipeline / "m.ncgs").read_bytes()


def test_add(workspace, pipeline, capsys):
    cfg = workspace / "small.cfg"
    out = pipeline / "added.ncgs"
    assert run("add", workspace / "extra" / "c_capsule.obj", pipeline / "state.npz", pipeline / "m.ncgs",
               "--out", out, "--config", cfg) == 0
    assert "CD" in capsys.readouterr().out
    before = decode_bitstream((pipeline / "m.ncgs").read_bytes())
    after = decode_bitstream(out.read_bytes())
    assert after.n_shapes == before.n_shapes + 1
    assert after.theta.tobytes() == before.theta.tobytes()
    assert np.array_equal(after.features[:2], before.features)
    assert run("decompress", out, "--out", pipeline / "dec_added") == 0
    assert len(list((pipeline / "dec_added").iterdir())) == 3
    # adding a name that is already present is an input error
    assert run("add", workspace / "meshes" / "a_box.obj", pipeline / "state.npz", pipeline / "m.ncgs",
               "--out", pipeline / "dup.ncgs", "--config", cfg) == 2


def test_eval(workspace, pipeline):
    cfg = workspace / "small.cfg"
    csv_path = pipeline / "self.csv"
    assert run("eval", workspace / "meshes", workspace / "meshes", "--out", csv_path, "--config", cfg) == 0
    rows = [l.split(",") for l in csv_path.read_text().splitlines()[1:]]
    assert [r[1] for r in rows] == ["a_box", "b_sphere"]
    assert all(float(r[4]) == 1.0 and float(r[5]) == 1.0 for r in rows)
    assert run("eval", workspace / "meshes", pipeline / "dec", "--out", pipeline / "dec.csv", "--config", cfg) == 0
    assert run("eval", workspace / "meshes", workspace / "extra", "--out", pipeline / "x.csv", "--config", cfg) == 2


def test_rd(workspace, pipeline):
    cfg = workspace / "small.cfg"
    rd = pipeline / "rd.csv"
    assert run("rd", pipeline / "t.ncgt", "--meshes", workspace / "meshes", "--out", rd, "--config", cfg) == 0
    rows = [l.split(",") for l in rd.read_text().splitlines()[1:]]
    assert len(rows) == 2
    # sorted by ratio: the wider decoder has the smaller ratio
    assert [r[0] for r in rows] == ["width4", "width2"]
    assert float(rows[0][1]) < float(rows[1][1])
